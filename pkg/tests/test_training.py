"""Loss, optimizer, epoch-loop, and checkpoint behavior."""

import math

import numpy as np
import pytest

from volnet.data import DataConfig, ManifestDataset, ManifestEntry, Volume, write_vol1
from volnet.errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    NumericError,
    StateError,
    TruncatedCheckpointError,
    VersionMismatchError,
)
from volnet.regnet3d import RegNet3d, RegNetConfig
from volnet.tensor import Rng, Tensor
from volnet.training import (
    Adam,
    Checkpoint,
    LossConfig,
    NovoGrad,
    OptimizerConfig,
    Sgd,
    adam_step,
    apply_checkpoint,
    load_checkpoint,
    make_optimizer,
    novograd_step,
    restore_model,
    restore_training_state,
    run_training,
    save_checkpoint,
    sgd_step,
    snapshot,
    train_epoch,
    weighted_bce_with_logit,
    write_train_log,
)

from _oracles import finite_difference


class TestLoss:
    def test_logit_zero_positive_label_gives_ln2(self):
        loss, _ = weighted_bce_with_logit(0.0, 1, 1.0)
        assert math.isclose(loss, math.log(2.0), rel_tol=0, abs_tol=1e-15)

    def test_pos_weight_scales_positive_term_exactly(self):
        for z in (-3.0, -0.5, 0.0, 0.7, 4.0):
            base, _ = weighted_bce_with_logit(z, 1, 1.0)
            for w in (2.0, 3.0, 7.5):
                scaled, _ = weighted_bce_with_logit(z, 1, w)
                assert scaled == w * base

    def test_pos_weight_three_at_zero(self):
        loss, _ = weighted_bce_with_logit(0.0, 1, 3.0)
        assert loss == 3.0 * weighted_bce_with_logit(0.0, 1, 1.0)[0]

    def test_negative_label_ignores_pos_weight(self):
        a, _ = weighted_bce_with_logit(1.3, 0, 1.0)
        b, _ = weighted_bce_with_logit(1.3, 0, 5.0)
        assert a == b

    def test_label_symmetry_bit_exact(self):
        for z in (-8.0, -2.25, -0.1, 0.0, 0.3, 1.75, 9.0):
            pos, gp = weighted_bce_with_logit(z, 1, 1.0)
            neg, gn = weighted_bce_with_logit(-z, 0, 1.0)
            assert pos == neg
            assert gp == -gn

    def test_gradient_matches_finite_difference(self):
        z, label, w = 2.0, 0, 1.0
        _, grad = weighted_bce_with_logit(z, label, w)
        holder = np.array([z], dtype=np.float64)
        fd = finite_difference(
            lambda: weighted_bce_with_logit(float(holder[0]), label, w)[0],
            [holder],
            h=1e-6,
        )[0][0]
        assert abs(grad - fd) / abs(fd) <= 1e-6

    def test_gradient_sign_and_range(self):
        # positive label pulls the logit up, negative pushes it down
        for z in (-4.0, 0.0, 4.0):
            _, gp = weighted_bce_with_logit(z, 1, 1.0)
            _, gn = weighted_bce_with_logit(z, 0, 1.0)
            assert -1.0 <= gp <= 0.0
            assert 0.0 <= gn <= 1.0

    def test_loss_positive_unless_saturated(self):
        loss, _ = weighted_bce_with_logit(10.0, 1, 1.0)
        assert 0.0 < loss < 1e-3
        loss, _ = weighted_bce_with_logit(-40.0, 1, 1.0)
        assert loss > 1.0

    def test_saturated_logit_stays_finite(self):
        for z in (-1e4, 1e4):
            for label in (0, 1):
                loss, grad = weighted_bce_with_logit(z, label, 3.0)
                assert math.isfinite(loss) and math.isfinite(grad)

    def test_non_finite_logit_rejected(self):
        for bad in (math.nan, math.inf, -math.inf):
            with pytest.raises(NumericError):
                weighted_bce_with_logit(bad, 1, 1.0)

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            weighted_bce_with_logit(0.0, 2, 1.0)


class TestOptimizerConfig:
    def test_beta2_defaults_follow_kind(self):
        assert OptimizerConfig(kind="adam").beta2 == 0.999
        assert OptimizerConfig(kind="novograd").beta2 == 0.25
        assert OptimizerConfig(kind="sgd").beta2 == 0.0

    def test_explicit_beta2_kept(self):
        assert OptimizerConfig(kind="novograd", beta2=0.5).beta2 == 0.5

    def test_validation(self):
        with pytest.raises(ConfigError):
            OptimizerConfig(kind="adagrad").validate()
        with pytest.raises(ConfigError):
            OptimizerConfig(learning_rate=-0.1).validate()
        with pytest.raises(ConfigError):
            OptimizerConfig(beta1=1.0).validate()
        with pytest.raises(ConfigError):
            OptimizerConfig(kind="adam", beta2=1.0).validate()
        with pytest.raises(ConfigError):
            OptimizerConfig(momentum=-0.5).validate()
        with pytest.raises(ConfigError):
            OptimizerConfig(epsilon=0.0).validate()
        OptimizerConfig(learning_rate=0.0).validate()  # zero lr is legal

    def test_dict_round_trip(self):
        cfg = OptimizerConfig(kind="novograd", learning_rate=0.02, beta1=0.95)
        again = OptimizerConfig.from_dict(cfg.to_dict())
        assert again == cfg
        with pytest.raises(ConfigError):
            OptimizerConfig.from_dict({"kind": "adam", "nesterov": True})

    def test_loss_config(self):
        LossConfig(pos_weight=3.0).validate()
        with pytest.raises(ConfigError):
            LossConfig(pos_weight=0.0).validate()
        assert LossConfig.from_dict({"pos_weight": 2.0}).pos_weight == 2.0
        with pytest.raises(ConfigError):
            LossConfig.from_dict({"weight": 2.0})


def _bound(kind, tensors, **kwargs):
    cfg = OptimizerConfig(kind=kind, **kwargs)
    return make_optimizer(cfg, [(f"p{i}", t) for i, t in enumerate(tensors)])


class TestSgd:
    def test_plain_step(self):
        p = Tensor(np.array([1.0], dtype=np.float32))
        p.grad = np.array([0.5], dtype=np.float32)
        opt = _bound("sgd", [p], learning_rate=0.1, momentum=0.0)
        opt.step()
        assert p.data[0] == np.float32(0.95)

    def test_momentum_accumulates(self):
        p = Tensor(np.array([1.0], dtype=np.float32))
        opt = _bound("sgd", [p], learning_rate=0.1, momentum=0.9)
        for _ in range(2):
            p.grad = np.array([0.5], dtype=np.float32)
            opt.step()
        # v: 0.5 then 0.9*0.5 + 0.5 = 0.95; p: 1 - 0.05 - 0.095
        assert np.isclose(float(opt.state["v"][0][0]), 0.95, atol=1e-7)
        assert np.isclose(float(p.data[0]), 0.855, atol=1e-6)


class TestAdam:
    def test_first_step_magnitude_is_learning_rate(self):
        rng = Rng(5)
        p = Tensor(np.zeros(64, dtype=np.float32))
        g = rng.normals(64).astype(np.float32)
        g[np.abs(g) < 0.1] = 0.5  # keep |g| >> epsilon
        p.grad = g.copy()
        lr = 1e-3
        opt = _bound("adam", [p], learning_rate=lr)
        opt.step()
        delta = -p.data.astype(np.float64)  # started from zero
        assert np.all(np.abs(np.abs(delta) - lr) <= lr * 1e-6)
        assert np.all(np.sign(delta) == np.sign(g))

    def test_second_step_matches_hand_formula(self):
        p = Tensor(np.zeros(1, dtype=np.float32))
        opt = _bound("adam", [p], learning_rate=0.01)
        expect_p, m, v = 0.0, 0.0, 0.0
        for t, g in enumerate((0.8, -0.3), start=1):
            p.grad = np.array([g], dtype=np.float32)
            opt.step()
            m = np.float32(0.9 * m + 0.1 * g)
            v = np.float32(0.999 * v + 0.001 * g * g)
            mhat = float(m) / (1 - 0.9**t)
            vhat = float(v) / (1 - 0.999**t)
            expect_p = np.float32(expect_p - 0.01 * mhat / (math.sqrt(vhat) + 1e-8))
        assert np.isclose(float(p.data[0]), float(expect_p), rtol=1e-6)


class TestNovoGrad:
    def test_first_step_normalizes_by_gradient_norm(self):
        p = Tensor(np.zeros(2, dtype=np.float32))
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        lr = 0.1
        opt = _bound("novograd", [p], learning_rate=lr)
        opt.step()
        expected = -lr * np.array([3.0, 4.0]) / 5.0
        assert np.allclose(p.data, expected, rtol=1e-6, atol=0)
        assert np.isclose(float(opt.state["v"][0][0]), 25.0, rtol=1e-6)

    def test_per_tensor_normalization_is_independent(self):
        a = Tensor(np.zeros(1, dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        a.grad = np.array([1.0], dtype=np.float32)
        b.grad = np.array([100.0], dtype=np.float32)
        opt = _bound("novograd", [a, b], learning_rate=0.1)
        opt.step()
        # both tensors move by lr regardless of gradient scale
        assert np.isclose(float(a.data[0]), -0.1, rtol=1e-5)
        assert np.isclose(float(b.data[0]), -0.1, rtol=1e-5)

    def test_second_step_uses_ema_and_momentum(self):
        p = Tensor(np.zeros(1, dtype=np.float32))
        lr, b1, b2, eps = 0.1, 0.9, 0.25, 1e-8
        opt = _bound("novograd", [p], learning_rate=lr)
        grads = (2.0, 1.0)
        v = m = 0.0
        expect_p = 0.0
        for t, g in enumerate(grads):
            p.grad = np.array([g], dtype=np.float32)
            opt.step()
            norm2 = g * g
            v = norm2 if t == 0 else b2 * v + (1 - b2) * norm2
            v = float(np.float32(v))
            m = b1 * m + g / (math.sqrt(v) + eps)
            m = float(np.float32(m))
            expect_p = float(np.float32(expect_p - lr * m))
        assert np.isclose(float(p.data[0]), expect_p, rtol=1e-6)


class TestStepSafety:
    def test_zero_learning_rate_is_identity_on_parameters(self):
        for kind in ("sgd", "adam", "novograd"):
            p = Tensor(np.array([1.5, -2.0], dtype=np.float32))
            before = p.data.copy()
            p.grad = np.array([0.3, 0.7], dtype=np.float32)
            opt = _bound(kind, [p], learning_rate=0.0)
            opt.step()
            assert np.array_equal(p.data, before), kind
            assert opt.step_count == 1

    def test_non_finite_gradient_aborts_before_any_mutation(self):
        for kind in ("sgd", "adam", "novograd"):
            a = Tensor(np.array([1.0], dtype=np.float32))
            b = Tensor(np.array([2.0], dtype=np.float32))
            opt = _bound(kind, [a, b], learning_rate=0.1)
            a.grad = np.array([0.5], dtype=np.float32)
            b.grad = np.array([np.nan], dtype=np.float32)
            state_before = {
                slot: [arr.copy() for arr in arrs] for slot, arrs in opt.state.items()
            }
            with pytest.raises(NumericError):
                opt.step()
            assert a.data[0] == np.float32(1.0), kind
            assert b.data[0] == np.float32(2.0), kind
            assert opt.step_count == 0
            for slot, arrs in opt.state.items():
                for held, saved in zip(arrs, state_before[slot]):
                    assert np.array_equal(held, saved), (kind, slot)

    def test_missing_gradient_is_a_state_error(self):
        p = Tensor(np.array([1.0], dtype=np.float32))
        opt = _bound("sgd", [p], learning_rate=0.1)
        with pytest.raises(StateError):
            opt.step()

    def test_functional_wrappers_match_classes(self):
        rng = Rng(17)
        g1 = rng.normals(4).astype(np.float32)
        g2 = rng.normals(4).astype(np.float32)
        for fn, cls, kind in (
            (sgd_step, Sgd, "sgd"),
            (adam_step, Adam, "adam"),
            (novograd_step, NovoGrad, "novograd"),
        ):
            cfg = OptimizerConfig(kind=kind, learning_rate=0.05)
            p_fn = np.full(4, 0.5, dtype=np.float32)
            p_cls = Tensor(p_fn.copy())
            opt = make_optimizer(cfg, [("p0", p_cls)])
            state = None
            for g in (g1, g2):
                (p_fn,), state = fn([p_fn], [g.copy()], state, cfg)
                p_cls.grad = g.copy()
                opt.step()
            assert np.array_equal(p_fn, p_cls.data), kind


def _ball_volume(extent, rng, bright):
    """Small cube with either a bright centered ball or faint noise."""
    coords = np.arange(extent, dtype=np.float64)
    d, h, w = np.meshgrid(coords, coords, coords, indexing="ij")
    c = (extent - 1) / 2.0
    r2 = (d - c) ** 2 + (h - c) ** 2 + (w - c) ** 2
    base = rng.floats(extent**3).reshape(extent, extent, extent) * 0.2
    if bright:
        base = base + np.where(r2 <= (extent / 3.0) ** 2, 0.75, 0.0)
    return Volume(np.clip(base, 0.0, 1.0).astype(np.float32), "synthetic")


def _toy_dataset(root, count=6, seed=11):
    rng = Rng(seed)
    entries = []
    for i in range(count):
        label = i % 2
        path = root / f"vol{i}.v1"
        write_vol1(path, _ball_volume(8, rng, bright=label == 1))
        entries.append(ManifestEntry(sample_id=f"vol{i}", path=str(path), label=label))
    config = DataConfig(input_size=(8, 8, 8), train_crop_size=(6, 6, 6))
    return ManifestDataset(entries, config, seed=123)


def _tiny_model(seed=7):
    config = RegNetConfig(
        stage_depths=[1],
        stage_widths=[8],
        group_widths=[4],
        bottleneck_ratio=1.0,
        stem_width=8,
        num_classes=1,
    )
    return RegNet3d(config, Rng(seed))


class TestTrainEpoch:
    def test_single_sample_zero_lr_reports_loss_without_moving(self, tmp_path):
        dataset = _toy_dataset(tmp_path, count=1)
        model = _tiny_model()
        before = [t.data.copy() for t in model.parameters()]
        opt = make_optimizer(
            OptimizerConfig(kind="sgd", learning_rate=0.0, momentum=0.0),
            model.named_parameters(),
        )
        stats = train_epoch(model, dataset, opt, LossConfig(), Rng(1), epoch=0)
        assert stats.sample_count == 1
        assert math.isfinite(stats.mean_loss) and stats.mean_loss > 0
        assert stats.train_accuracy in (0.0, 1.0)
        for t, saved in zip(model.parameters(), before):
            assert np.array_equal(t.data, saved)

    def test_same_seed_gives_identical_stats(self, tmp_path):
        results = []
        for _ in range(2):
            dataset = _toy_dataset(tmp_path)
            model = _tiny_model()
            opt = make_optimizer(OptimizerConfig(kind="adam", learning_rate=1e-3),
                                 model.named_parameters())
            stats = run_training(model, dataset, opt, LossConfig(), Rng(42), epochs=2)
            results.append([(s.epoch, s.mean_loss, s.train_accuracy) for s in stats])
        assert results[0] == results[1]

    def test_loss_trends_down_over_ten_epochs(self, tmp_path):
        dataset = _toy_dataset(tmp_path)
        model = _tiny_model()
        opt = make_optimizer(
            OptimizerConfig(kind="adam", learning_rate=5e-3), model.named_parameters()
        )
        history = run_training(
            model, dataset, opt, LossConfig(pos_weight=1.0), Rng(3), epochs=10
        )
        losses = [s.mean_loss for s in history]
        rises = sum(1 for a, b in zip(losses, losses[1:]) if b > a)
        assert rises <= 2
        assert losses[-1] < losses[0]

    def test_multi_logit_model_rejected(self, tmp_path):
        dataset = _toy_dataset(tmp_path, count=1)
        config = RegNetConfig(
            stage_depths=[1], stage_widths=[8], group_widths=[4],
            stem_width=8, num_classes=2,
        )
        model = RegNet3d(config, Rng(0))
        opt = make_optimizer(OptimizerConfig(kind="sgd"), model.named_parameters())
        with pytest.raises(ConfigError):
            train_epoch(model, dataset, opt, LossConfig(), Rng(1), epoch=0)

    def test_exploded_parameters_name_the_sample(self, tmp_path):
        dataset = _toy_dataset(tmp_path, count=2)
        model = _tiny_model()
        model.fc.weight.data[...] = np.float32(1e30)  # drives the logit to inf
        model.fc.bias.data[...] = np.float32(1e38)
        opt = make_optimizer(OptimizerConfig(kind="sgd"), model.named_parameters())
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NumericError, match=r"sample \d"):
                train_epoch(model, dataset, opt, LossConfig(), Rng(1), epoch=0, batch_size=1)

    def test_train_log_format(self, tmp_path):
        from volnet.training import EpochStats

        history = [
            EpochStats(epoch=0, mean_loss=0.75, train_accuracy=0.5, sample_count=4),
            EpochStats(epoch=1, mean_loss=0.5, train_accuracy=0.75, sample_count=4),
        ]
        path = tmp_path / "log.csv"
        write_train_log(path, history)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,mean_loss,train_accuracy"
        assert lines[1] == "1,0.75,0.5"
        assert lines[2] == "2,0.5,0.75"


class TestCheckpoint:
    def _trained(self, tmp_path, epochs=1):
        dataset = _toy_dataset(tmp_path)
        model = _tiny_model()
        opt = make_optimizer(
            OptimizerConfig(kind="novograd", learning_rate=1e-2), model.named_parameters()
        )
        rng = Rng(99)
        run_training(model, dataset, opt, LossConfig(pos_weight=2.0), rng, epochs=epochs)
        return dataset, model, opt, rng

    def test_round_trip_is_byte_identical(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        ckpt = snapshot(model, opt, epoch=1, rng=rng, extra={"note": "round trip"})
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(first, ckpt)
        save_checkpoint(second, load_checkpoint(first))
        assert first.read_bytes() == second.read_bytes()

    def test_round_trip_restores_tensors_bit_exactly(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        restored = restore_model(load_checkpoint(path))
        for (name, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
            assert np.array_equal(a.data, b.data), name
        for (name, a), (_, b) in zip(model.named_buffers(), restored.named_buffers()):
            assert np.array_equal(a.data, b.data), name

    def test_truncation_is_detected_at_any_prefix(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        blob = path.read_bytes()
        clipped = tmp_path / "clipped.ckpt"
        for cut in (0, 1, 3, 4, 7, 12, 40, len(blob) - 1):
            clipped.write_bytes(blob[:cut])
            with pytest.raises(TruncatedCheckpointError):
                load_checkpoint(clipped)

    def test_bad_magic(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        blob = bytearray(path.read_bytes())
        blob[:4] = b"WHAT"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(BadMagicError):
            load_checkpoint(bad)

    def test_version_mismatch(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(bad)

    def test_trailing_bytes_rejected(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        padded = tmp_path / "padded.ckpt"
        padded.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError):
            load_checkpoint(padded)

    def test_apply_to_wrong_architecture_fails(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, snapshot(model, opt, epoch=1, rng=rng))
        ckpt = load_checkpoint(path)
        other = RegNet3d(
            RegNetConfig(stage_depths=[1], stage_widths=[16], group_widths=[4],
                         stem_width=8, num_classes=1),
            Rng(0),
        )
        with pytest.raises(CheckpointError):
            apply_checkpoint(ckpt, other)

    def test_resume_equals_uninterrupted(self, tmp_path):
        total = 3

        def run_full():
            dataset = _toy_dataset(tmp_path)
            model = _tiny_model()
            opt = make_optimizer(
                OptimizerConfig(kind="adam", learning_rate=1e-3), model.named_parameters()
            )
            rng = Rng(7)
            saved = {}

            def keep(stats):
                saved[stats.epoch + 1] = snapshot(model, opt, stats.epoch + 1, rng)
                return False

            run_training(model, dataset, opt, LossConfig(), rng, epochs=total, on_epoch=keep)
            return saved

        saved = run_full()
        mid = tmp_path / "mid.ckpt"
        save_checkpoint(mid, saved[2])

        model, opt, rng = restore_training_state(load_checkpoint(mid))
        dataset = _toy_dataset(tmp_path)
        run_training(
            model, dataset, opt, LossConfig(), rng,
            epochs=total, start_epoch=load_checkpoint(mid).epoch,
        )
        resumed = tmp_path / "resumed.ckpt"
        straight = tmp_path / "straight.ckpt"
        save_checkpoint(resumed, snapshot(model, opt, total, rng))
        save_checkpoint(straight, saved[total])
        assert resumed.read_bytes() == straight.read_bytes()

    def test_optimizer_kind_cross_check(self, tmp_path):
        _, model, opt, rng = self._trained(tmp_path)
        ckpt = snapshot(model, opt, epoch=1, rng=rng)
        fresh = _tiny_model()
        wrong = make_optimizer(OptimizerConfig(kind="sgd"), fresh.named_parameters())
        with pytest.raises(CheckpointError):
            apply_checkpoint(ckpt, fresh, wrong)
