"""Plain-text ``key = value`` experiment configs.

One setting per line; ``#`` starts a comment. Keys are the flat field names of
ExperimentConfig, LossWeights and OptimSchedule (``alpha``, ``lambda3``,
``base_lr``, ``epochs`` ...); synthetic-data options use a ``synthetic.``
prefix. Values are read as JSON where possible (numbers, booleans, lists) and
as bare strings otherwise; ``seeds = 0, 1, 2`` is accepted as a list.
"""

from __future__ import annotations

import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def _value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return [_value(part) for part in text.split(",") if part.strip()]
    return text


def parse_kv(text: str, source: str = "<config>") -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = _value(value)
    return out


def read_kv(path) -> dict:
    path = Path(path)
    return parse_kv(path.read_text(), str(path))


def dump_kv(settings: dict) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in settings.items())
