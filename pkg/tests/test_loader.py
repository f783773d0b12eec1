import threading
import time

import pytest
import torch

from pwl.blocknet import build, mini_spec
from pwl.checkpoint import read_header, save_checkpoint
from pwl.converter import build_bank
from pwl.datapipe import make_synthetic
from pwl.hybrid import ReplacementMask, compose_forward
from pwl.loader import RequestError, StartupError, SwapSchedule, start


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    teacher = build(mini_spec("vgg", "teacher"), 0).eval()
    student = build(mini_spec("vgg", "student"), 1).eval()
    bank = build_bank(teacher.spec, student.spec, "tiny", 2).eval()
    for name, obj in [("teacher", teacher), ("student", student), ("bank", bank)]:
        save_checkpoint(obj, d / f"{name}.pwlc")
    return d, teacher, student, bank


def _start(artifacts, order="prefix", **kw):
    d = artifacts[0]
    return start(d / "student.pwlc", d / "teacher.pwlc", d / "bank.pwlc",
                 SwapSchedule.from_order(order, 4, kw.pop("pacing", "manual")), **kw)


class TestSchedule:
    def test_prefix_first_stage(self):
        s = SwapSchedule.from_order("prefix", 4)
        assert str(s.masks[0]) == "TSSS" and len(s.masks) == 4

    def test_contiguous_is_cumulative(self):
        s = SwapSchedule.from_order("contiguous", 4)
        assert [str(m) for m in s.masks] == ["STSS", "STTS", "TTTT"]
        assert s.is_monotone()

    def test_explicit_list(self):
        s = SwapSchedule.from_order(["TSSS", "TTTT"], 4)
        assert [str(m) for m in s.masks] == ["TSSS", "TTTT"]

    def test_explicit_wrong_length(self):
        with pytest.raises(ValueError):
            SwapSchedule.from_order(["TSS"], 4)

    def test_repeated_mask_rejected(self):
        with pytest.raises(ValueError):
            SwapSchedule.from_order(["TSSS", "TSSS"], 4)

    @pytest.mark.parametrize("pacing,expected", [("manual", None), ("immediate", 0.0),
                                                 ("interval:500ms", 0.5), ("interval:2s", 2.0)])
    def test_pacing(self, pacing, expected):
        assert SwapSchedule.from_order("prefix", 4, pacing).interval() == expected

    def test_bad_pacing(self):
        with pytest.raises(ValueError):
            SwapSchedule.from_order("prefix", 4, "sometimes")


class TestServing:
    def test_student_before_any_shard(self, artifacts):
        _, teacher, student, _ = artifacts
        x = torch.randn(4, 3, 32, 32)
        with _start(artifacts) as server:
            assert server.reader.bytes_read == server.reader.header.payload_offset
            with torch.no_grad():
                assert torch.allclose(server.predict(x), student(x), atol=1e-6, rtol=0)
            assert server.first_inference_s is not None and server.first_inference_s > 0

    def test_teacher_after_last_stage(self, artifacts):
        _, teacher, _, _ = artifacts
        x = torch.randn(4, 3, 32, 32)
        with _start(artifacts) as server:
            while server.advance() is not None:
                pass
            assert str(server.mask) == "TTTT"
            with torch.no_grad():
                assert torch.allclose(server.predict(x), teacher(x), atol=1e-6, rtol=0)

    @pytest.mark.parametrize("order", ["prefix", "suffix", "contiguous"])
    def test_each_stage_matches_offline_hybrid(self, artifacts, order):
        _, teacher, student, bank = artifacts
        x = torch.randn(3, 3, 32, 32)
        with _start(artifacts, order) as server:
            for mask in server.schedule.masks:
                report = server.advance()
                assert report.mask == str(mask)
                with torch.no_grad():
                    want = compose_forward(student, teacher, bank, x, mask)
                    assert torch.allclose(server.predict(x), want, atol=1e-6, rtol=0)

    def test_byte_accounting(self, artifacts):
        d = artifacts[0]
        sizes = read_header(d / "teacher.pwlc").shard_sizes()
        with _start(artifacts) as server:
            reports = [server.advance() for _ in range(4)]
        for k, r in enumerate(reports[:-1], start=1):
            assert r.bytes_loaded == sum(sizes[:k])
        # the last stage brings the final block together with the head
        assert reports[-1].bytes_loaded == sum(sizes)
        assert all(a.bytes_loaded < b.bytes_loaded for a, b in zip(reports, reports[1:]))
        assert all(a.load_time_s <= b.load_time_s for a, b in zip(reports, reports[1:]))

    def test_terminal_signal(self, artifacts):
        with _start(artifacts) as server:
            for _ in range(4):
                assert server.advance() is not None
            assert server.advance() is None
            assert server.remaining() == 0

    def test_malformed_request(self, artifacts):
        with _start(artifacts) as server:
            with pytest.raises(RequestError):
                server.predict(torch.randn(2, 3, 16, 16))

    def test_eval_every_stage(self, artifacts):
        data = make_synthetic(20, num_classes=10, seed=0)
        with _start(artifacts, eval_data=data) as server:
            report = server.advance()
        assert 0.0 <= report.accuracy <= 1.0 and report.latency_ms > 0

    def test_predict_does_not_wait_for_writer(self, artifacts):
        x = torch.randn(1, 3, 32, 32)
        with _start(artifacts) as server:
            with server._writer:  # simulate a stage stuck in shard I/O
                done = threading.Event()
                threading.Thread(target=lambda: (server.predict(x), done.set())).start()
                assert done.wait(5.0)


class TestFailures:
    def test_spec_mismatch(self, artifacts, tmp_path):
        d = artifacts[0]
        other = build(mini_spec("resnet", "teacher"), 0)
        save_checkpoint(other, tmp_path / "resnet.pwlc")
        with pytest.raises(StartupError, match="converter|mismatch"):
            start(d / "student.pwlc", tmp_path / "resnet.pwlc", d / "bank.pwlc",
                  SwapSchedule.from_order("prefix", 4))

    def test_corrupt_shard_skips_stage(self, artifacts, tmp_path):
        d, teacher, student, bank = artifacts
        raw = bytearray((d / "teacher.pwlc").read_bytes())
        header = read_header(d / "teacher.pwlc")
        info = header.shard(1)
        raw[header.payload_offset + info.offset + 3] ^= 0xFF
        (tmp_path / "bad.pwlc").write_bytes(bytes(raw))
        x = torch.randn(2, 3, 32, 32)
        with start(d / "student.pwlc", tmp_path / "bad.pwlc", d / "bank.pwlc",
                   SwapSchedule.from_order("prefix", 4)) as server:
            assert server.advance().error is None
            bad = server.advance()
            assert bad.skipped and "block2" in bad.error
            assert str(server.mask) == "TSSS"
            with torch.no_grad():
                want = compose_forward(student, teacher, bank, x, ReplacementMask.parse("TSSS"))
                assert torch.allclose(server.predict(x), want, atol=1e-6, rtol=0)
            assert len(server.errors) == 1

    def test_free_student_needs_monotone_schedule(self, artifacts):
        with pytest.raises(ValueError, match="free-student"):
            _start(artifacts, ["TSSS", "STSS"], free_student=True)


class TestMemory:
    def test_free_student_reclaims_blocks(self, artifacts):
        _, teacher, _, _ = artifacts
        x = torch.randn(2, 3, 32, 32)
        with _start(artifacts, free_student=True) as freeing, _start(artifacts) as keeping:
            for _ in range(4):
                freeing.advance()
                keeping.advance()
            state = freeing._state
            assert all(u is None for u in state.student.units)
            assert freeing.resident_bytes() < keeping.resident_bytes()
            with torch.no_grad():
                assert torch.allclose(freeing.predict(x), teacher(x), atol=1e-6, rtol=0)


class TestStreaming:
    def test_interval_pacing(self, artifacts):
        seen = []
        with _start(artifacts, pacing="interval:20ms") as server:
            t0 = time.monotonic()
            server.stream(on_report=seen.append)
            server.join(10)
            elapsed = time.monotonic() - t0
        assert [r.stage for r in seen] == [1, 2, 3, 4]
        assert elapsed >= 0.06

    def test_manual_pacing_refuses_stream(self, artifacts):
        with _start(artifacts) as server:
            with pytest.raises(ValueError):
                server.stream()
