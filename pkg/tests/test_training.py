import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meranet import ops, training
from meranet.autodiff import Tape, backward
from meranet.data import make_synthetic_dataset, preprocess, split_dataset
from meranet.init import conv_fans, xavier_bound, xavier_init
from meranet.model import NonFiniteActivationError, build_model, forward
from meranet.tensor import Tensor
from meranet.training import (
    CheckpointVersionError,
    ConfigError,
    MissingTensorError,
    PayloadMismatchError,
    SGDMomentum,
    TrainConfig,
    cosine_lr,
    evaluate,
    evaluate_logits,
    fit,
    history_csv,
    load_checkpoint,
    predict,
    read_checkpoint_header,
    save_checkpoint,
)

TINY = dict(channels=[4, 4, 8, 8], r=4, batch_size=4, lr=0.05)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    raw = make_synthetic_dataset(root / "raw", per_class=4, seed=0, frame_size=10, t=4, size=8)
    return preprocess(split_dataset(raw, 1.0, 0.25, seed=0), root / "data")


class TestXavier:
    def test_equal_fans_of_three(self):
        assert xavier_bound(3, 3) == 1.0

    def test_conv_fans_and_bound(self):
        d_in, d_out = conv_fans((64, 64, 3, 3, 3))
        assert (d_in, d_out) == (1728, 1728)
        assert xavier_bound(d_in, d_out) == pytest.approx(1 / 24, abs=1e-12)
        w = xavier_init((64, 64, 3, 3, 3), d_in, d_out, np.random.default_rng(0)).data
        assert np.all(np.abs(w) <= np.float32(1 / 24))

    def test_uniform_moments(self):
        x = xavier_init((100_000,), 3, 3, np.random.default_rng(1)).data.astype(np.float64)
        assert abs(x.mean()) < 0.01
        assert abs(x.var() - 1 / 3) < 0.05 / 3

    def test_model_initial_values(self):
        m = build_model(channels=(8, 8), r=4)
        for key, t in m.state().items():
            if key.endswith("gamma") or key.endswith("running_var"):
                assert np.all(t.data == 1), key
            elif key.endswith("beta") or key.endswith("bias") or key.endswith("running_mean") or key.endswith("_b"):
                assert np.all(t.data == 0), key
        rv = xavier_bound(*conv_fans(m.stem_conv.weight.shape))
        assert np.all(np.abs(m.stem_conv.weight.data) <= rv)

    def test_rejects_empty_fans(self):
        with pytest.raises(ValueError):
            xavier_bound(0, 3)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.1) == 0.1
        assert cosine_lr(100, 100, 0.1) == 0.0
        assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05, abs=1e-15)

    @given(st.integers(1, 300), st.floats(1e-4, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_non_increasing(self, total, lr0):
        values = [cosine_lr(e, total, lr0) for e in range(total + 1)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[0] == lr0 and values[-1] == 0.0

    def test_warmup_ramp(self):
        assert [cosine_lr(e, 10, 0.1, warmup=4) for e in range(4)] == pytest.approx([0.025, 0.05, 0.075, 0.1])
        assert cosine_lr(4, 10, 0.1, warmup=4) == 0.1
        assert cosine_lr(10, 10, 0.1, warmup=4) == 0.0

    def test_epoch_past_end(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)


class TestOptimizer:
    @staticmethod
    def _grads(loss_fn):
        with Tape() as tape:
            loss = loss_fn()
        return backward(tape, loss)

    def test_square_loss_step(self):
        theta = Tensor([1.0], requires_grad=True)
        opt = SGDMomentum({"theta": theta}, momentum=0.0)
        opt.step(self._grads(lambda: ops.total(ops.broadcast_mul(theta, theta))), 0.1)
        assert theta.data[0] == pytest.approx(0.8, abs=1e-7)

    def test_zero_momentum_is_gradient_descent(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
        b = Tensor(rng.standard_normal(3).astype(np.float32), requires_grad=True)
        c = Tensor(rng.standard_normal(3).astype(np.float32))
        before = a.data.copy(), b.data.copy()
        g = self._grads(lambda: ops.total(ops.sigmoid(ops.add(ops.broadcast_mul(a, b), c))))
        expect = [p - np.float32(0.3) * g[t] for p, t in zip(before, (a, b))]
        SGDMomentum({"a": a, "b": b}, momentum=0.0).step(g, 0.3)
        assert np.allclose(a.data, expect[0], atol=1e-7) and np.allclose(b.data, expect[1], atol=1e-7)

    def test_momentum_accumulates(self):
        theta = Tensor([1.0], requires_grad=True)
        opt = SGDMomentum({"theta": theta}, momentum=0.5)
        for _ in range(2):
            opt.step(self._grads(lambda: ops.total(theta)), 0.1)
        # v1 = -0.1, v2 = 0.5 * v1 - 0.1
        assert theta.data[0] == pytest.approx(1 - 0.1 - 0.15, abs=1e-7)

    def test_zero_rate_leaves_parameters(self):
        theta = Tensor([0.3, -2.0], requires_grad=True)
        opt = SGDMomentum({"theta": theta}, momentum=0.9)
        for _ in range(5):
            opt.step(self._grads(lambda: ops.total(ops.relu(theta))), 0.0)
        assert np.array_equal(theta.data, np.float32([0.3, -2.0]))


class TestEvaluate:
    def test_always_first_class_on_first_class_split(self):
        logits = np.tile([3.0, 1.0, 0.0], (5, 1))
        assert evaluate_logits(logits, [0] * 5, 3).accuracy == 1.0

    def test_uniform_logits_break_ties_low(self):
        labels = [0, 1, 2, 0, 2, 1, 0, 1]
        res = evaluate_logits(np.zeros((8, 3)), labels, 3)
        assert res.accuracy == 3 / 8 and res.predictions == [0] * 8

    def test_random_model_hand_tally(self):
        rng = np.random.default_rng(5)
        m = build_model(channels=(4, 4), r=4, seed=9)
        clips = [Tensor(rng.standard_normal((3, 2, 6, 6)).astype(np.float32)) for _ in range(10)]
        labels = [int(v) for v in rng.integers(0, 3, 10)]
        logits, _ = predict(m, clips, batch_size=3)
        correct = 0
        for row, y in zip(logits.tolist(), labels):
            best = 0
            for k in range(1, 3):
                if row[k] > row[best]:
                    best = k
            correct += best == y
        res = evaluate_logits(logits, labels, 3)
        assert res.accuracy == correct / 10
        assert [sum(r) for r in res.confusion] == [labels.count(k) for k in range(3)]

    def test_empty_split(self):
        with pytest.raises(ValueError):
            evaluate_logits(np.zeros((0, 3)), [], 3)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"st_kernel": 4},
                                    {"momentum": 1.0}, {"optimizer": "adam"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as e:
            TrainConfig.from_dict({"epochz": 3})
        assert "epochz" in str(e.value)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.lr, c.momentum, c.weight_decay) == (100, 8, 0.1, 0.9, 0.0)


class TestCheckpoint:
    def _saved(self, tmp_path):
        m = build_model(channels=(4, 4, 8, 8), r=4, seed=2)
        # make the running statistics non-trivial
        forward(m, Tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 6, 6)).astype(np.float32)), "train")
        save_checkpoint(m, tmp_path / "ck", config={"note": 1}, epoch=7)
        return m

    def test_round_trip_bit_exact(self, tmp_path):
        m = self._saved(tmp_path)
        x = Tensor(np.random.default_rng(1).standard_normal((2, 3, 2, 6, 6)).astype(np.float32))
        back, header = load_checkpoint(tmp_path / "ck")
        for key, t in m.state().items():
            assert np.array_equal(back.state()[key].data, t.data), key
        assert np.array_equal(forward(back, x).data, forward(m, x).data)
        assert header["epoch"] == 7 and header["config"] == {"note": 1}

    def test_missing_payload_names_the_layer(self, tmp_path):
        self._saved(tmp_path)
        (tmp_path / "ck" / "block1_1.conv1.weight.mera").unlink()
        with pytest.raises(MissingTensorError) as e:
            load_checkpoint(tmp_path / "ck")
        assert e.value.key == "block1_1/conv1/weight"

    def test_version_mismatch(self, tmp_path):
        self._saved(tmp_path)
        hp = tmp_path / "ck" / "header.json"
        header = json.loads(hp.read_text())
        header["format_version"] = 99
        hp.write_text(json.dumps(header))
        with pytest.raises(CheckpointVersionError):
            read_checkpoint_header(tmp_path / "ck")

    def test_manifest_disagrees_with_payload(self, tmp_path):
        self._saved(tmp_path)
        hp = tmp_path / "ck" / "header.json"
        header = json.loads(hp.read_text())
        header["tensors"]["head/bias"]["shape"] = [4]
        hp.write_text(json.dumps(header))
        with pytest.raises(PayloadMismatchError):
            load_checkpoint(tmp_path / "ck")

    def test_error_kinds_distinct(self):
        kinds = [CheckpointVersionError, MissingTensorError, PayloadMismatchError]
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


class TestFit:
    def test_three_epochs(self, tiny_data, tmp_path):
        cfg = TrainConfig(epochs=3, **TINY)
        res = fit(None, tiny_data, cfg, tmp_path / "run")
        assert [r["epoch"] for r in res.history] == [1, 2, 3]
        assert read_checkpoint_header(tmp_path / "run" / "final")["epoch"] == 3
        best = max(res.history, key=lambda r: (r["val_acc"], -r["val_loss"]))
        assert res.best_epoch == best["epoch"]
        assert read_checkpoint_header(tmp_path / "run" / "best")["epoch"] == res.best_epoch
        csv_lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert csv_lines[0] == "epoch,lr,train_loss,val_loss,val_acc" and len(csv_lines) == 4
        assert math.isclose(float(csv_lines[1].split(",")[1]), 0.05)
        ev = evaluate(res.model, tiny_data, "val")
        assert ev.accuracy == res.history[-1]["val_acc"]

    def test_deterministic_runs(self, tiny_data, tmp_path):
        cfg = TrainConfig(epochs=2, **TINY)
        a = fit(None, tiny_data, cfg, tmp_path / "a")
        b = fit(None, tiny_data, cfg, tmp_path / "b")
        assert history_csv(a.history) == history_csv(b.history)
        for f in (tmp_path / "a" / "final").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "final" / f.name).read_bytes()

    def test_zero_rate_throughout_keeps_parameters(self, tiny_data, monkeypatch):
        monkeypatch.setattr(training, "cosine_lr", lambda *a, **k: 0.0)
        cfg = TrainConfig(epochs=2, **TINY)
        model = build_model(**{k: v for k, v in cfg.model_config().items()})
        before = {k: t.data.copy() for k, t in model.parameters().items()}
        fit(model, tiny_data, cfg)
        assert all(np.array_equal(t.data, before[k]) for k, t in model.parameters().items())

    def test_non_finite_loss_aborts(self, tiny_data):
        cfg = TrainConfig(epochs=1, **TINY)
        model = build_model(**cfg.model_config())
        model.head.bias.assign(np.array([np.inf, 0.0, 0.0]))
        # either the logits guard or the loss guard stops the run
        with pytest.raises((training.TrainingDivergedError, NonFiniteActivationError)):
            fit(model, tiny_data, cfg)
