import copy

import numpy as np
import pytest
import torch

from ddflow import train
from ddflow.io import FormatError, read_frwt, read_manifest
from ddflow.metrics import dice
from ddflow.network import NetworkConfig
from ddflow.train import (
    TrainConfig, augment, ema_update, fit, init_state, load_checkpoint, load_module, sample_time_logit_normal,
    save_checkpoint, train_step, transform_array, validation_loss, validation_noise,
)
from ddflow.volume import LabelMap, Volume

TINY = NetworkConfig(n_scales=2, channels=(4, 4), time_embed_dim=8, mlp_hidden=4, seed=1)
SP = (1.5, 1.5, 3.15)


def pairs(n, seed=0, dims=(8, 8, 4)):
    r = np.random.default_rng(seed)
    return [(Volume(r.standard_normal(dims), SP), Volume(r.standard_normal(dims), SP)) for _ in range(n)]


def flat(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


class TestPieces:
    def test_logit_normal_median_and_range(self):
        t = sample_time_logit_normal(np.random.default_rng(0), 200_000)
        assert np.median(t) == pytest.approx(0.5, abs=0.01)
        assert t.min() > 0 and t.max() < 1
        # logit of the draws is standard normal
        z = np.log(t / (1 - t))
        assert z.std() == pytest.approx(1.0, abs=0.01)

    def test_ema_closed_form(self):
        student = torch.nn.Linear(2, 1)
        teacher = copy.deepcopy(student)
        t0 = flat(teacher).clone()
        with torch.no_grad():
            for p in student.parameters():
                p.add_(1.0)
        for _ in range(7):
            ema_update(teacher, student, 0.99)
        expected = flat(student) - 0.99**7 * (flat(student) - t0)
        torch.testing.assert_close(flat(teacher), expected, rtol=0, atol=1e-6)

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"warmup_epochs": 5, "epochs": 2}, {"ema_mu": 1.0},
                                    {"patience": 0}, {"batch_size": 2}, {"lr": 0}])
    def test_config_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_teacher_starts_as_student_copy(self):
        state = init_state(TINY, TrainConfig())
        assert torch.equal(flat(state.student), flat(state.teacher))
        assert state.teacher is not state.student
        assert all(not p.requires_grad for p in state.teacher.parameters())


class TestStep:
    def test_warmup_skips_teacher(self):
        state = init_state(TINY, TrainConfig(warmup_epochs=1))
        (f, m), = pairs(1)
        state.epoch = 1
        train_step(state, f, m, TrainConfig(warmup_epochs=1))
        assert state.teacher_calls == 0 and state.step == 1
        state.epoch = 2
        train_step(state, f, m, TrainConfig(warmup_epochs=1))
        assert state.teacher_calls == 1

    def test_teacher_moves_only_by_ema(self):
        cfg = TrainConfig(warmup_epochs=0, epochs=1, lr=1e-2)
        state = init_state(TINY, cfg, torch.float64)
        (f, m), = pairs(1)
        before_t, before_s = flat(state.teacher).clone(), flat(state.student).clone()
        train_step(state, f, m, cfg)
        after_s = flat(state.student)
        assert not torch.equal(after_s, before_s)
        torch.testing.assert_close(flat(state.teacher), 0.99 * before_t + 0.01 * after_s, rtol=0, atol=1e-12)

    def test_replayed_teacher_target_is_identical(self):
        cfg = TrainConfig(warmup_epochs=0, epochs=1, lr=1e-3)
        (f, m), = pairs(1)
        a = init_state(TINY, cfg, torch.float64)
        b = init_state(TINY, cfg, torch.float64)
        # reproduce the teacher target out of band with the same noise draw
        rng = copy.deepcopy(a.rng)
        from ddflow.volume import sample_noise_array

        eps = sample_noise_array(f.dims, f.spacing, rng)
        with torch.no_grad():
            target = a.teacher(torch.as_tensor(f.data)[None, None], torch.as_tensor(m.data)[None, None],
                               torch.as_tensor(eps)[None], 0.0)
        la = train_step(a, f, m, cfg)
        lb = train_step(b, f, m, cfg, teacher_target=target.numpy())
        assert la == lb
        assert torch.equal(flat(a.student), flat(b.student))
        assert b.teacher_calls == 0

    def test_divergence_raises(self):
        cfg = TrainConfig(warmup_epochs=1)
        state = init_state(TINY, cfg)
        f, m = pairs(1)[0]
        with torch.no_grad():
            for p in state.student.blocks[0].head.parameters():
                p.fill_(float("nan"))
        with pytest.raises(train.TrainingDivergedError, match="epoch 1"):
            train_step(state, f, m, cfg)


class TestAugment:
    def test_double_flip_is_identity(self, rng):
        a = rng.standard_normal((4, 6, 3))
        once = transform_array(a, (True, False, True), 0)
        assert np.array_equal(transform_array(once, (True, False, True), 0), a)

    def test_four_quarter_turns(self, rng):
        a = rng.standard_normal((4, 4, 3))
        assert np.array_equal(transform_array(transform_array(a, (False,) * 3, 2), (False,) * 3, 2), a)

    def test_field_stack_uses_spatial_axes(self, rng):
        u = rng.standard_normal((3, 4, 4, 2))
        out = transform_array(u, (True, False, False), 1)
        for c in range(3):
            assert np.array_equal(out[c], transform_array(u[c], (True, False, False), 1))

    def test_labels_follow_images(self, small_cases):
        c = small_cases[0]
        r = np.random.default_rng(3)
        for _ in range(4):
            (f, m), (lf, lm) = augment((c.ed_image, c.es_image), (c.ed_labels, c.es_labels), r)
            # a rigid permutation of voxels keeps class volumes and image mass
            for cls in (1, 2, 3):
                assert np.sum(lf.data == cls) == np.sum(c.ed_labels.data == cls)
            assert f.data.sum() == pytest.approx(c.ed_image.data.sum())

    def test_explicit_transform_matches(self, small_cases):
        c = small_cases[1]
        tf = ((False, True, False), 3)
        (f, _), (lf, _) = augment((c.ed_image, c.es_image), (c.ed_labels, c.es_labels), None, tf)
        ref = LabelMap(transform_array(c.ed_labels.data, *tf), c.ed_labels.spacing)
        assert dice(lf, ref, 3) == 1.0
        assert np.array_equal(f.data, transform_array(c.ed_image.data, *tf))


class TestValidation:
    def test_noise_is_fixed(self):
        p = pairs(2)
        a, b = validation_noise(p, 3), validation_noise(p, 3)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_loss_reproducible(self):
        p = pairs(2)
        state = init_state(TINY, TrainConfig())
        noise = validation_noise(p, 0)
        assert validation_loss(state.student, p, noise, TrainConfig()) == \
            validation_loss(state.student, p, noise, TrainConfig())


class TestFit:
    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, warmup_epochs=1, lr=1e-3, seed=5)
        a = fit(pairs(3), pairs(1, seed=9), cfg, TINY)
        b = fit(pairs(3), pairs(1, seed=9), cfg, TINY)
        assert [r["val_loss"] for r in a.history] == [r["val_loss"] for r in b.history]
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert a.state.teacher_calls == 3

    def test_patience_arithmetic(self, monkeypatch):
        monkeypatch.setattr(train, "train_step", lambda *a, **k: 0.0)
        monkeypatch.setattr(train, "validation_loss", lambda *a, **k: 1.0)
        res = fit(pairs(1), pairs(1), TrainConfig(epochs=20, warmup_epochs=2, patience=3), TINY)
        # first monitored epoch sets the best, then three without improvement
        assert len(res.history) == 2 + 1 + 3

    def test_patience_one_constant(self, monkeypatch):
        monkeypatch.setattr(train, "train_step", lambda *a, **k: 0.0)
        monkeypatch.setattr(train, "validation_loss", lambda *a, **k: 1.0)
        res = fit(pairs(1), pairs(1), TrainConfig(epochs=20, warmup_epochs=2, patience=1), TINY)
        assert len(res.history) == 4

    def test_warmup_losses_do_not_count(self, monkeypatch):
        vals = iter([0.1, 0.2, 0.5, 0.4, 0.45, 0.46, 0.3])
        monkeypatch.setattr(train, "train_step", lambda *a, **k: 0.0)
        monkeypatch.setattr(train, "validation_loss", lambda *a, **k: next(vals))
        res = fit(pairs(1), pairs(1), TrainConfig(epochs=7, warmup_epochs=2, patience=2), TINY)
        assert len(res.history) == 6
        assert res.best_epoch == 4 and res.best_val == 0.4

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            fit([], pairs(1), TrainConfig(epochs=1), TINY)
        with pytest.raises(ValueError):
            fit(pairs(1), [], TrainConfig(epochs=1), TINY)

    def test_outputs_and_reload(self, tmp_path):
        cfg = TrainConfig(epochs=2, warmup_epochs=1, lr=1e-3)
        val = pairs(2, seed=9)
        res = fit(pairs(2), val, cfg, TINY, out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["log.csv", "manifest.txt", "student.frwt", "teacher.frwt"]
        man = read_manifest(tmp_path / "manifest.txt")
        assert int(man["epoch"]) == res.best_epoch and float(man["val_loss"]) == res.best_val
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,seconds" and len(lines) == 3
        net = load_module(tmp_path / "student.frwt")
        again = validation_loss(net, val, validation_noise(val, cfg.seed), cfg)
        assert again == pytest.approx(res.best_val, abs=1e-6)

    def test_init_parameters(self):
        cfg = TrainConfig(epochs=1, warmup_epochs=1)
        res = fit(pairs(1), pairs(1), cfg, TINY)
        again = fit(pairs(1), pairs(1), cfg, TINY, init=res.params)
        assert not all(np.array_equal(res.params[k], again.params[k]) for k in res.params)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = train.network.build_network(TINY)
        save_checkpoint(tmp_path / "w.frwt", net, TINY, {"epoch": 3})
        params, cfg, echo = load_checkpoint(tmp_path / "w.frwt")
        assert cfg == TINY and echo["epoch"] == 3
        assert all(torch.equal(params[k], v) for k, v in net.state_dict().items())

    def test_mismatch(self, tmp_path):
        net = train.network.build_network(TINY)
        other = NetworkConfig(n_scales=2, channels=(4, 8), time_embed_dim=8, mlp_hidden=4)
        save_checkpoint(tmp_path / "w.frwt", net, other)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "w.frwt")
        assert read_frwt(tmp_path / "w.frwt")[1]["network"]["channels"] == [4, 8]
