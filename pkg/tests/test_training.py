import math

import numpy as np
import pytest

from retrofpn.config import RunConfig
from retrofpn.dataset import SceneSpec, generate_scene
from retrofpn.geometry import PointCloud
from retrofpn.model import RetroFPN, prepare_sample
from retrofpn.tensor import Tensor, cross_entropy_mean, load_checkpoint, save_checkpoint
from retrofpn.training import (
    SGD,
    Adam,
    evaluate,
    evaluate_miou,
    hierarchical_loss,
    make_optimizer,
    train_epoch,
)

from oracles import confusion_oracle, cross_entropy_oracle


def two_level_logits(seed=0):
    rng = np.random.default_rng(seed)
    logits = [Tensor(rng.normal(size=(9, 4)) * 2), Tensor(rng.normal(size=(4, 4)) * 2)]
    labels = [rng.integers(0, 4, size=9), rng.integers(0, 4, size=4)]
    return logits, labels


class TestHierarchicalLoss:
    def test_zero_weights(self):
        logits, labels = two_level_logits()
        assert hierarchical_loss(logits, labels, [0.0, 0.0]).item() == 0.0

    def test_single_level_is_plain_cross_entropy(self):
        logits, labels = two_level_logits(1)
        got = hierarchical_loss(logits[:1], labels[:1], [1.0]).item()
        assert got == cross_entropy_mean(logits[0], labels[0]).item()

    def test_weighted_sum_oracle(self):
        logits, labels = two_level_logits(2)
        expected = cross_entropy_oracle(logits[0].data, labels[0]) + 0.5 * cross_entropy_oracle(logits[1].data, labels[1])
        assert hierarchical_loss(logits, labels, [1.0, 0.5]).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("level", [0, 1])
    def test_one_hot_weights_select_a_level(self, level):
        logits, labels = two_level_logits(3)
        weights = [0.0, 0.0]
        weights[level] = 1.0
        alone = cross_entropy_oracle(logits[level].data, labels[level])
        assert abs(hierarchical_loss(logits, labels, weights).item() - alone) <= 1e-12

    @pytest.mark.parametrize("scale", [0.0, 0.3, 2.0, 7.5])
    def test_linear_in_weights(self, scale):
        logits, labels = two_level_logits(4)
        base = hierarchical_loss(logits, labels, [1.0, 0.5]).item()
        scaled = hierarchical_loss(logits, labels, [scale, 0.5 * scale]).item()
        assert scaled == pytest.approx(scale * base, rel=1e-12, abs=1e-15)

    def test_length_mismatch(self):
        logits, labels = two_level_logits()
        with pytest.raises(ValueError, match="mismatch"):
            hierarchical_loss(logits, labels, [1.0])


def param(value, grad):
    p = Tensor(np.asarray(value, dtype=float), requires_grad=True)
    p.grad = np.asarray(grad, dtype=float)
    return p


class TestOptimizers:
    def test_sgd_first_step(self):
        p = param([1.0], [1.0])
        SGD([("w", p)], RunConfig(optimizer="sgd", lr=0.1, momentum=0.9)).step()
        assert p.data.tolist() == [0.9]
        assert p.grad is None

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_zero_gradient_is_a_no_op(self, kind):
        p = param([1.5, -2.0], [0.0, 0.0])
        make_opt = SGD if kind == "sgd" else Adam
        make_opt([("w", p)], RunConfig(optimizer=kind, lr=0.1)).step()
        assert p.data.tolist() == [1.5, -2.0]

    def test_sgd_momentum_accumulates(self):
        p = param([0.0], [1.0])
        opt = SGD([("w", p)], RunConfig(optimizer="sgd", lr=0.1, momentum=0.5))
        opt.step()
        p.grad = np.array([1.0])
        opt.step()
        # velocities 1 then 0.5 * 1 + 1
        assert p.data[0] == pytest.approx(-0.1 - 0.15, abs=1e-15)

    def test_adam_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(3)]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        p = Tensor(w0.copy(), requires_grad=True)
        opt = Adam([("w", p)], RunConfig(lr=lr, betas=[b1, b2], eps=eps))
        w, m, v = w0.copy(), 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p.grad = g.copy()
            opt.step()
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g**2
            w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            assert np.max(np.abs(p.data - w)) <= 1e-12

    def test_single_adam_step_moves_by_lr(self):
        p = param([2.0, 2.0], [3.0, -0.5])
        Adam([("w", p)], RunConfig(lr=0.01)).step()
        np.testing.assert_allclose(p.data, [1.99, 2.01], atol=1e-9)

    def test_weight_decay(self):
        p = param([2.0], [0.0])
        SGD([("w", p)], RunConfig(optimizer="sgd", lr=0.1, momentum=0.0, weight_decay=0.5)).step()
        assert p.data[0] == pytest.approx(1.9)

    def test_nan_gradient_aborts_with_name(self):
        p, q = param([1.0], [np.nan]), param([1.0], [1.0])
        opt = Adam([("retro/level_1/head/weight", p), ("other", q)], RunConfig())
        with pytest.raises(FloatingPointError, match="retro/level_1/head/weight"):
            opt.step()
        assert q.data.tolist() == [1.0]

    def test_state_roundtrip(self):
        p = param([1.0, 2.0], [0.3, -0.1])
        opt = Adam([("w", p)], RunConfig(lr=0.05))
        opt.step()
        state = opt.state_dict()
        q = Tensor(p.data.copy(), requires_grad=True)
        twin = Adam([("w", q)], RunConfig(lr=0.05))
        twin.load_state_dict(state)
        p.grad, q.grad = np.array([0.2, 0.2]), np.array([0.2, 0.2])
        opt.step()
        twin.step()
        assert np.array_equal(p.data, q.data)


class TestMiou:
    def test_perfect(self):
        gt = np.array([0, 1, 2, 3, 4, 0, 1])
        assert evaluate_miou(gt, gt, 5).miou == 1.0

    def test_disjoint(self):
        assert evaluate_miou([1, 1, 0, 0], [0, 0, 1, 1], 2).miou == 0.0

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        gt = rng.integers(-1, 5, size=100)
        pred = rng.integers(0, 5, size=100)
        assert evaluate_miou(pred, gt, 5).miou == pytest.approx(confusion_oracle(pred, gt, 5), abs=1e-12)

    def test_absent_classes_are_excluded(self):
        m = evaluate_miou([0, 0, 1], [0, 0, 1], 5)
        assert m.miou == 1.0 and np.isnan(m.iou[2:]).all()

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(1)
        gt, pred = rng.integers(0, 6, size=300), rng.integers(0, 6, size=300)
        perm = rng.permutation(6)
        assert evaluate_miou(perm[pred], perm[gt], 6).miou == pytest.approx(evaluate_miou(pred, gt, 6).miou, abs=1e-15)

    def test_empty_after_ignore(self):
        with pytest.raises(ValueError):
            evaluate_miou([0, 1], [-1, -1], 2)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_miou([0, 1, 1], [0, 1], 2)


# ---------------------------------------------------------------- epochs


def scene_samples(cfg, seeds, points=200):
    return [prepare_sample(generate_scene(SceneSpec(num_points=points, seed=s)), cfg, name=f"s{s}") for s in seeds]


def snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def test_zero_weight_epoch_changes_nothing():
    cfg = RunConfig(levels=3, channels=8, backbone_channels=8, loss_weights=[0.0, 0.0, 0.0], lr=0.05)
    samples = scene_samples(cfg, [1, 2])
    model = RetroFPN(cfg)
    before = snapshot(model)
    train_epoch(samples, model, make_optimizer(model, cfg), cfg)
    after = snapshot(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_fixed_seed_gives_identical_loss_trace():
    cfg = RunConfig(levels=3, channels=8, backbone_channels=8, seed=3)
    samples = scene_samples(cfg, [4, 5, 6])

    def trace():
        model = RetroFPN(cfg)
        opt = make_optimizer(model, cfg)
        return [train_epoch(samples, model, opt, cfg, e).per_level_loss for e in range(3)]

    assert trace() == trace()


def test_single_scene_loss_mostly_decreases():
    cfg = RunConfig(lr=1e-2)
    samples = scene_samples(cfg, [0])
    model = RetroFPN(cfg)
    opt = make_optimizer(model, cfg)
    losses = [train_epoch(samples, model, opt, cfg, e).per_level_loss[0] for e in range(21)]
    assert int((np.diff(losses) < 0).sum()) >= 16


def test_per_level_losses_reported():
    cfg = RunConfig(levels=3, channels=8, backbone_channels=8, loss_weights=[1.0, 0.0, 0.0])
    samples = scene_samples(cfg, [7])
    model = RetroFPN(cfg)
    m = train_epoch(samples, model, make_optimizer(model, cfg), cfg)
    assert len(m.per_level_loss) == 3 and math.isfinite(m.per_level_loss[0])
    assert m.to_dict()["miou"] == m.miou


def test_errors_name_the_scene():
    cfg = RunConfig(levels=2, channels=4, backbone_channels=4, num_classes=2)
    rng = np.random.default_rng(0)
    bad = prepare_sample(PointCloud(rng.uniform(0, 2, (80, 3)), rng.integers(0, 5, 80)), cfg, name="room-9")
    model = RetroFPN(cfg)
    with pytest.raises(RuntimeError, match="room-9"):
        train_epoch([bad], model, make_optimizer(model, cfg), cfg)


@pytest.mark.parametrize("kind", ["adam", "sgd"])
def test_resume_matches_uninterrupted_run(tmp_path, kind):
    cfg = RunConfig(levels=3, channels=8, backbone_channels=8, optimizer=kind, lr=0.02, seed=5)
    samples = scene_samples(cfg, [8, 9])

    model = RetroFPN(cfg)
    opt = make_optimizer(model, cfg)
    train_epoch(samples, model, opt, cfg, 0)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, {**model.state_dict(), **opt.state_dict()})
    continued = train_epoch(samples, model, opt, cfg, 1).per_level_loss

    state = load_checkpoint(path)
    fresh = RetroFPN(cfg, seed=99)
    fresh.load_state_dict({k: v for k, v in state.items() if not k.startswith("optim/")})
    fresh_opt = make_optimizer(fresh, cfg)
    fresh_opt.load_state_dict(state)
    resumed = train_epoch(samples, fresh, fresh_opt, cfg, 1).per_level_loss
    assert resumed == continued


def test_threaded_evaluation_matches_serial():
    cfg = RunConfig(levels=2, channels=8, backbone_channels=8)
    samples = scene_samples(cfg, [20, 21, 22])
    model = RetroFPN(cfg)
    serial, threaded = evaluate(samples, model, 1), evaluate(samples, model, 3)
    assert np.array_equal(serial.confusion, threaded.confusion)
