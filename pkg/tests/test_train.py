import csv

import pytest
import torch

from pwl.blocknet import build, mini_spec, toy_spec
from pwl.converter import build_bank
from pwl.datapipe import ImageDataset, make_synthetic
from pwl.evaluation import accuracy
from pwl.losses import LossWeights
from pwl.train import (METRIC_COLUMNS, OptimSchedule, TrainingDiverged, make_optimizer,
                       train_pwl, train_teacher)

FAST = OptimSchedule(epochs=2, batch_size=32, augment=False)


@pytest.fixture(scope="module")
def toy_data():
    return make_synthetic(128, num_classes=2, seed=0, noise=0.1)


@pytest.fixture(scope="module")
def toy_teacher(toy_data):
    net, _ = train_teacher(mini_spec("vgg", "teacher", num_classes=2), toy_data,
                           OptimSchedule(epochs=5, batch_size=32, augment=False), seed=0)
    return net


class TestSchedule:
    def test_endpoints(self):
        s = OptimSchedule(epochs=160)
        assert s.lr_at(0) == pytest.approx(5e-2)
        assert s.lr_at(159) == pytest.approx(1e-5)

    def test_monotone_decay(self):
        s = OptimSchedule(epochs=20)
        lrs = [s.lr_at(e) for e in range(20)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_constant(self):
        s = OptimSchedule(epochs=5, schedule="constant", base_lr=3e-4)
        assert {s.lr_at(e) for e in range(5)} == {3e-4}

    @pytest.mark.parametrize("kw", [{"optimizer": "rmsprop"}, {"schedule": "step"},
                                    {"epochs": 0}, {"base_lr": 0}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            OptimSchedule(**kw)


class TestOptimizer:
    def test_decay_exclusions(self):
        student = build(mini_spec("resnet", "student"))
        bank = build_bank(mini_spec("resnet", "teacher"), student.spec)
        opt = make_optimizer(student, bank, OptimSchedule())
        no_decay = {id(p) for g in opt.param_groups if g["weight_decay"] == 0 for p in g["params"]}
        for m in student.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                assert id(m.weight) in no_decay and id(m.bias) in no_decay
        for name, p in bank.named_parameters():
            assert (id(p) in no_decay) == name.endswith("bias")

    def test_converter_groups_scaled(self):
        student = build(toy_spec("student"))
        bank = build_bank(toy_spec("teacher"), student.spec)
        opt = make_optimizer(student, bank, OptimSchedule(base_lr=0.2))
        conv = [g for g in opt.param_groups if g.get("converter")]
        assert conv and all(g["lr"] == pytest.approx(0.02) for g in conv)
        n_conv = sum(p.numel() for g in conv for p in g["params"])
        assert n_conv == sum(p.numel() for p in bank.parameters())


class TestTrainTeacher:
    def test_toy_reaches_full_train_accuracy(self):
        data = make_synthetic(128, num_classes=2, seed=1)
        net, history = train_teacher(mini_spec("vgg", "teacher", num_classes=2), data,
                                     OptimSchedule(epochs=50, batch_size=32, augment=False))
        assert accuracy(net, data) >= 0.99
        assert history.step_lrs[0][0] == pytest.approx(5e-2)
        assert history.step_lrs[-1][0] == pytest.approx(1e-5)

    def test_seeded_runs_identical(self, toy_data):
        spec = mini_spec("vgg", "student", num_classes=2)
        sched = OptimSchedule(epochs=2, batch_size=32)  # with augmentation
        a, _ = train_teacher(spec, toy_data, sched, seed=3)
        b, _ = train_teacher(spec, toy_data, sched, seed=3)
        for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_nan_aborts(self, toy_data):
        bad = ImageDataset(torch.full_like(toy_data.images, float("nan")), toy_data.labels, 2)
        with pytest.raises(TrainingDiverged, match="epoch 0, step 0"):
            train_teacher(mini_spec("vgg", "student", num_classes=2), bad, FAST)

    def test_metrics_and_checkpoint(self, tmp_path, toy_data):
        from pwl.checkpoint import load_checkpoint
        net, _ = train_teacher(mini_spec("vgg", "student", num_classes=2), toy_data, FAST,
                               val=toy_data, metrics_csv=tmp_path / "m.csv",
                               checkpoint=tmp_path / "t.pwlc")
        rows = list(csv.DictReader((tmp_path / "m.csv").open()))
        assert len(rows) == 2 and list(rows[0]) == METRIC_COLUMNS
        loaded = load_checkpoint(tmp_path / "t.pwlc")
        for a, b in zip(net.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)


class TestTrainPWL:
    def test_teacher_is_not_modified(self, toy_data, toy_teacher):
        before = {k: v.clone() for k, v in toy_teacher.state_dict().items()}
        train_pwl(mini_spec("vgg", "student", num_classes=2), toy_teacher, toy_data,
                  sched=FAST)
        for k, v in toy_teacher.state_dict().items():
            assert torch.equal(v, before[k])

    def test_student_close_to_teacher_on_toy(self, toy_data, toy_teacher):
        test = make_synthetic(256, num_classes=2, seed=50, templates_seed=0, noise=0.1)
        student, _, _ = train_pwl(mini_spec("vgg", "student", num_classes=2), toy_teacher,
                                  toy_data, sched=OptimSchedule(epochs=5, batch_size=32,
                                                                augment=False))
        assert accuracy(student, test) >= accuracy(toy_teacher, test) - 0.02

    def test_converter_lr_is_tenth_at_every_step(self, toy_data, toy_teacher):
        _, _, history = train_pwl(mini_spec("vgg", "student", num_classes=2), toy_teacher,
                                  toy_data, sched=FAST)
        assert len(history.step_lrs) == 2 * 4
        for base, conv in history.step_lrs:
            assert conv == pytest.approx(base / 10, rel=1e-12)

    def test_block_count_mismatch(self, toy_data, toy_teacher):
        with pytest.raises(ValueError, match="mismatch"):
            train_pwl(toy_spec("student", 2), toy_teacher, toy_data, sched=FAST)

    def test_epoch_metrics(self, tmp_path, toy_data, toy_teacher):
        _, _, history = train_pwl(mini_spec("vgg", "student", num_classes=2), toy_teacher,
                                  toy_data, sched=FAST, val=toy_data,
                                  metrics_csv=tmp_path / "pwl.csv")
        rows = list(csv.DictReader((tmp_path / "pwl.csv").open()))
        assert [int(r["epoch"]) for r in rows] == [0, 1]
        for r in history.rows:
            w = LossWeights()
            total = (w.alpha * r["hard"] + (1 - w.alpha) * r["soft"] + w.lambda1 * r["feature"]
                     + w.lambda2 * r["recon"] + w.lambda3 * r["random_cross"])
            assert r["total"] == pytest.approx(total, rel=1e-5)
            assert 0.0 <= r["cross_acc"] <= 1.0

    def test_vit_two_stage(self):
        data = make_synthetic(64, num_classes=2, seed=0)
        teacher = build(mini_spec("vit", "teacher", num_classes=2)).freeze()
        sched = OptimSchedule(epochs=2, batch_size=32, augment=False, stage1_epochs=2,
                              finetune_epochs=1, finetune_lr=5e-5)
        _, _, history = train_pwl(mini_spec("vit", "student", num_classes=2), teacher, data,
                                  sched=sched, mode="vit")
        assert [r["epoch"] for r in history.rows] == [0, 1, 2]
        # stage one optimises only the matching terms
        assert history.rows[0]["hard"] == 0.0 and history.rows[0]["random_cross"] == 0.0
        assert history.rows[2]["hard"] > 0.0
        steps = len(history.step_lrs)
        assert history.step_lrs[-1][0] == pytest.approx(5e-5)
        assert history.step_lrs[steps - 1][1] == pytest.approx(5e-6)
