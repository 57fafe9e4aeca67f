import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metasg import flcore as fc
from metasg.errors import ConfigurationError, DataError, ShapeError
from metasg.oracles import central_fd, random_model_batch, rel_err


def _fit_softmax(ds, steps=300, lr=2.0, seed=0):
    model = fc.softmax_regression(ds.dim, ds.n_classes, np.random.default_rng(seed), 0.1)
    for _ in range(steps):
        model = fc.global_step(model, fc.grad(model, ds), lr)
    return model


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def test_empty_dataset():
    ds = fc.generate_synthetic_dataset(0, 2, 4, 3.0, seed=1)
    assert len(ds) == 0 and ds.dim == 4


def test_dataset_deterministic():
    a = fc.generate_synthetic_dataset(300, 3, 5, 2.0, seed=11)
    b = fc.generate_synthetic_dataset(300, 3, 5, 2.0, seed=11)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_dataset_in_unit_box_and_balanced():
    ds = fc.generate_synthetic_dataset(600, 3, 6, 2.0, seed=2)
    assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0
    assert np.array_equal(np.bincount(ds.labels), [200, 200, 200])


def test_dataset_fits_softmax():
    ds = fc.generate_synthetic_dataset(2000, 3, 8, 4.0, seed=7)
    model = _fit_softmax(ds)
    assert fc.evaluate(model, ds).clean_accuracy >= 0.9


def test_dataset_rejects_bad_args():
    with pytest.raises(ConfigurationError):
        fc.generate_synthetic_dataset(10, 5, 2, 1.0, seed=0)
    with pytest.raises(ConfigurationError):
        fc.generate_synthetic_dataset(10, 2, 2, 0.0, seed=0)


def _group_fraction(parts, C):
    same = total = 0
    for i, p in enumerate(parts):
        lab = p.base.labels
        same += int(np.sum(lab == fc.group_of(i, C)))
        total += lab.size
    return same / total


def test_partition_fraction_matches_q():
    ds = fc.generate_synthetic_dataset(600, 3, 4, 2.0, seed=3)
    parts = fc.partition_non_iid(ds, 6, 0.7, seed=3)
    assert abs(_group_fraction(parts, 3) - 0.7) <= 0.08


def test_partition_q_one_is_pure():
    ds = fc.generate_synthetic_dataset(300, 3, 4, 2.0, seed=0)
    parts = fc.partition_non_iid(ds, 6, 1.0, seed=0)
    for i, p in enumerate(parts):
        assert set(p.base.labels.tolist()) <= {i % 3}


def test_partition_iid_is_uniform():
    ds = fc.generate_synthetic_dataset(30000, 3, 4, 2.0, seed=0)
    parts = fc.partition_non_iid(ds, 3, 1 / 3, seed=1)
    sizes = np.array([len(p) for p in parts]) / len(ds)
    assert np.all(np.abs(sizes - 1 / 3) < 0.01)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 200), C=st.integers(2, 4), extra=st.integers(0, 5),
       q=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_partition_conserves_rows(n, C, extra, q, seed):
    q = max(q, 1.0 / C)
    ds = fc.generate_synthetic_dataset(n, C, 3, 2.0, seed=seed)
    parts = fc.partition_non_iid(ds, C + extra, q, seed)
    idx = np.sort(np.concatenate([p.source_index for p in parts]))
    assert np.array_equal(idx, np.arange(n))
    for p in parts:
        assert np.array_equal(p.base.labels, ds.labels[p.source_index])


def test_partition_rejects_low_q():
    ds = fc.generate_synthetic_dataset(30, 3, 4, 2.0, seed=0)
    with pytest.raises(ConfigurationError):
        fc.partition_non_iid(ds, 3, 0.1, seed=0)


def test_dataset_csv_roundtrip(tmp_path):
    ds = fc.generate_synthetic_dataset(25, 3, 4, 2.0, seed=4)
    back = fc.load_dataset_csv(fc.save_dataset_csv(ds, tmp_path / "d.csv", seed=4))
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.n_classes == 3


# ---------------------------------------------------------------------------
# model, loss, gradient
# ---------------------------------------------------------------------------

def test_layout_length_checked():
    with pytest.raises(ShapeError):
        fc.ModelParams(np.zeros(5), ((2, 2),), ("linear",))


def test_uniform_logits_loss_is_log_c():
    C = 4
    model = fc.ModelParams(np.zeros(3 * C + C), ((3, C),), ("linear",))
    X = np.random.default_rng(0).random((7, 3))
    y = np.arange(7) % C
    assert fc.forward_loss(model, (X, y)) == pytest.approx(math.log(C), abs=1e-12)


def test_loss_vanishes_with_margin():
    X = np.eye(2)
    y = np.array([0, 1])
    losses = []
    for m in [1.0, 4.0, 16.0, 64.0]:
        model = fc.ModelParams(np.array([m, 0.0, 0.0, m, 0.0, 0.0]), ((2, 2),), ("linear",))
        losses.append(fc.forward_loss(model, (X, y)))
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12


def _loss_loop(model, X, y):
    total = 0.0
    for x, label in zip(X, y):
        h = list(x)
        for (W, b), act in zip(model.layers(), model.activations):
            h = [sum(h[i] * W[i, j] for i in range(len(h))) + b[j] for j in range(W.shape[1])]
            if act == "tanh":
                h = [math.tanh(v) for v in h]
        mx = max(h)
        lse = mx + math.log(sum(math.exp(v - mx) for v in h))
        total += lse - h[label]
    return total / len(y)


def test_loss_matches_scalar_loop():
    rng = np.random.default_rng(5)
    for _ in range(10):
        model, X, y = random_model_batch(rng)
        assert fc.forward_loss(model, (X, y)) == pytest.approx(_loss_loop(model, X, y), abs=1e-12)


def test_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        model, X, y = random_model_batch(rng)
        g = fc.grad(model, (X, y))
        fd = central_fd(lambda w: fc.forward_loss(model.with_weights(w), (X, y)), model.weights)
        assert rel_err(g, fd) < 1e-5


def test_grad_duplicate_batch_invariant():
    rng = np.random.default_rng(1)
    model, X, y = random_model_batch(rng)
    g1 = fc.grad(model, (X, y))
    g3 = fc.grad(model, (np.tile(X, (3, 1)), np.tile(y, 3)))
    assert np.allclose(g1, g3, atol=1e-14)


def test_grad_zero_at_separable_optimum():
    # Both classes see the same input and the model already predicts the empirical frequencies.
    X = np.ones((2, 2))
    y = np.array([0, 1])
    model = fc.ModelParams(np.zeros(6), ((2, 2),), ("linear",))
    assert np.linalg.norm(fc.grad(model, (X, y))) < 1e-8


def test_grad_rejects_shape_mismatch():
    model = fc.softmax_regression(3, 2, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        fc.grad(model, (np.zeros((2, 4)), np.zeros(2, dtype=int)))
    with pytest.raises(DataError):
        fc.grad(model, (np.zeros((0, 3)), np.zeros(0, dtype=int)))


# ---------------------------------------------------------------------------
# local and global updates
# ---------------------------------------------------------------------------

def test_local_update_single_full_batch_is_grad():
    rng = np.random.default_rng(2)
    ds = fc.generate_synthetic_dataset(40, 3, 4, 2.0, seed=2)
    model = fc.mlp(4, 5, 3, rng)
    u = fc.local_update(model, ds, 0.1, 1, 1000, rng)
    assert np.array_equal(u, fc.grad(model, ds))


def test_local_update_zero_lr_accumulates():
    rng = np.random.default_rng(3)
    ds = fc.generate_synthetic_dataset(40, 3, 4, 2.0, seed=2)
    model = fc.softmax_regression(4, 3, rng)
    u = fc.local_update(model, ds, 0.0, 3, 1000, rng)
    assert np.allclose(u, 3 * fc.grad(model, ds), atol=1e-15)


def test_local_update_two_steps_hand_unrolled():
    rng = np.random.default_rng(4)
    model = fc.softmax_regression(3, 2, rng)
    X = rng.random((2, 3))
    y = np.array([0, 1])
    lr = 0.3
    g1 = fc.grad(model, (X, y))
    g2 = fc.grad(model.with_weights(model.weights - lr * g1), (X, y))
    u = fc.local_update(model, (X, y), lr, 2, 2, rng)
    assert np.allclose(u, g1 + g2, atol=1e-15)


def test_local_update_empty_client():
    model = fc.softmax_regression(3, 2, np.random.default_rng(0))
    with pytest.raises(DataError):
        fc.local_update(model, (np.zeros((0, 3)), np.zeros(0, dtype=int)), 0.1, 1, 4,
                        np.random.default_rng(0))


def test_global_step_cases():
    rng = np.random.default_rng(6)
    model = fc.softmax_regression(3, 2, rng)
    assert np.array_equal(fc.global_step(model, rng.normal(size=8), 0.0).weights, model.weights)
    eta = 0.25
    assert np.allclose(fc.global_step(model, model.weights / eta, eta).weights, 0.0, atol=1e-15)
    u = rng.normal(size=8)
    out = fc.global_step(model, u, 0.7).weights
    for i in range(8):
        assert out[i] == model.weights[i] - 0.7 * u[i]
    with pytest.raises(ShapeError):
        fc.global_step(model, np.zeros(3), 1.0)


def test_server_lr_schedule():
    cfg = fc.FLConfig(lr_schedule=(1.0, 0.5))
    assert [cfg.server_lr_at(t) for t in range(4)] == [1.0, 0.5, 0.5, 0.5]
    assert fc.FLConfig(server_lr=0.3).server_lr_at(9) == 0.3
    with pytest.raises(ConfigurationError):
        fc.FLConfig(n_clients=3, n_targeted=2, n_untargeted=2)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_constant_model_accuracy_is_max_prior():
    y = np.array([0, 0, 0, 1, 2, 2])
    ds = fc.Dataset(np.random.default_rng(0).random((6, 2)), y, 3)
    # zero weights, bias favouring class 0
    model = fc.ModelParams(np.array([0, 0, 0, 0, 0, 0, 1.0, 0, 0]), ((2, 3),), ("linear",))
    assert fc.evaluate(model, ds).clean_accuracy == pytest.approx(ds.class_priors().max())


def test_evaluate_hand_scored():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.2, 0.9], [0.9, 0.1],
                  [0.0, 0.0], [0.5, 0.6], [0.7, 0.2], [0.3, 0.3], [1.0, 0.4]])
    y = np.array([0, 1, 0, 1, 0, 1, 1, 0, 0, 1])
    # logit_0 = x0, logit_1 = x1: predict 1 iff x1 > x0, ties go to class 0
    model = fc.ModelParams(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), ((2, 2),), ("linear",))
    pred = [int(b > a) for a, b in X]
    acc = np.mean(np.array(pred) == y)
    m = fc.evaluate(model, fc.Dataset(X, y, 2))
    assert m.clean_accuracy == pytest.approx(acc)
    assert m.backdoor_accuracy == 0.0
    # trigger sets x1 = 1: every non-target (target=1) row with x0 < 1 flips to class 1
    trig = fc.Trigger((1,), target=1)
    bac = np.mean([1.0 > X[i, 0] for i in range(10) if y[i] != 1])
    assert fc.evaluate(model, fc.Dataset(X, y, 2), trig).backdoor_accuracy == pytest.approx(bac)


def test_trigger_validation():
    with pytest.raises(ConfigurationError):
        fc.Trigger((0, 0), 1)
    with pytest.raises(ConfigurationError):
        fc.Trigger((5,), 0).validate(dim=3, n_classes=2)


def test_root_data_bias():
    ds = fc.generate_synthetic_dataset(3000, 3, 4, 2.0, seed=0)
    root = fc.sample_root_data(ds, 300, np.random.default_rng(0), q_root=0.8)
    assert abs(np.mean(root.labels == 0) - 0.8) < 0.08
    plain = fc.sample_root_data(ds, 100, np.random.default_rng(0))
    assert len(plain) == 100
    with pytest.raises(DataError):
        fc.sample_root_data(ds, 5000, np.random.default_rng(0))
