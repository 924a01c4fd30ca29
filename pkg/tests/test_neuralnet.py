"""Dense network math, gradient exactness, optimizer behavior, checkpoints."""

import numpy as np
import pytest

from leosim.neuralnet import (
    Gradients,
    Mlp,
    Optimizer,
    StaleCacheError,
    load_checkpoint,
    save_checkpoint,
    soft_update,
)
from leosim.seeding import rng_for


def test_forward_matches_dense_oracle():
    net = Mlp([2, 3, 1], seed=0, name="oracle")
    x = np.array([0.4, -1.2])
    h = np.maximum(net.weights[0] @ x + net.biases[0], 0.0)
    want = net.weights[1] @ h + net.biases[1]
    np.testing.assert_allclose(net.forward(x), want, rtol=1e-12)


def test_forward_batch_matches_loop():
    net = Mlp([3, 5, 2], seed=1)
    xs = rng_for(11).standard_normal((6, 3))
    batch = net.forward(xs)
    rows = np.stack([net.forward(x) for x in xs])
    np.testing.assert_allclose(batch, rows, rtol=1e-12)


def central_fd(net: Mlp, x: np.ndarray, upstream: np.ndarray, eps: float = 1e-5):
    """d sum(upstream * f(x)) / d theta by central differences."""
    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + eps
            hi = float(np.sum(upstream * net.forward(x)))
            p[idx] = orig - eps
            lo = float(np.sum(upstream * net.forward(x)))
            p[idx] = orig
            g[idx] = (hi - lo) / (2 * eps)
            it.iternext()
        grads.append(g)
    return grads


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_central_differences(seed):
    net = Mlp([4, 8, 6, 3], seed=seed)
    rng = rng_for(seed, 77)
    x = rng.standard_normal(4)
    upstream = rng.standard_normal(3)
    net.forward(x)
    got = net.backward(upstream)
    want = central_fd(net, x, upstream)
    worst = 0.0
    for g, w in zip(got.flat(), want):
        denom = np.maximum(np.abs(w), 1e-6)
        worst = max(worst, float(np.max(np.abs(g - w) / denom)))
    assert worst < 1e-4


def test_backward_input_gradient_matches_fd():
    net = Mlp([3, 6, 2], seed=2)
    rng = rng_for(3, 77)
    x = rng.standard_normal(3)
    upstream = rng.standard_normal(2)
    net.forward(x)
    d_in = net.backward(upstream).d_input
    eps = 1e-5
    for i in range(3):
        bump = x.copy()
        bump[i] += eps
        hi = float(np.sum(upstream * net.forward(bump)))
        bump[i] -= 2 * eps
        lo = float(np.sum(upstream * net.forward(bump)))
        fd = (hi - lo) / (2 * eps)
        assert d_in[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_backward_requires_cached_forward():
    net = Mlp([2, 2], seed=0)
    with pytest.raises(StaleCacheError):
        net.backward(np.ones(2))


def test_shape_contracts():
    net = Mlp([3, 4], seed=0)
    with pytest.raises(ValueError):
        net.forward(np.ones(5))
    net.forward(np.ones(3))
    with pytest.raises(ValueError):
        net.backward(np.ones(7))
    with pytest.raises(ValueError):
        Mlp([4], seed=0)
    with pytest.raises(ValueError):
        Mlp([3, 0, 2], seed=0)


def test_init_is_seeded_and_name_scoped():
    a = Mlp([3, 4, 2], seed=9, name="actor_0")
    b = Mlp([3, 4, 2], seed=9, name="actor_0")
    c = Mlp([3, 4, 2], seed=9, name="critic_0")
    np.testing.assert_array_equal(a.weights[0], b.weights[0])
    assert not np.array_equal(a.weights[0], c.weights[0])
    bound = 1.0 / np.sqrt(3)
    assert np.all(np.abs(a.weights[0]) <= bound)


def test_clone_is_detached():
    a = Mlp([2, 3, 1], seed=4)
    b = a.clone()
    np.testing.assert_array_equal(a.weights[0], b.weights[0])
    b.weights[0][0, 0] += 1.0
    assert a.weights[0][0, 0] != b.weights[0][0, 0]


def test_soft_update_geometric_decay():
    target = Mlp([2, 2], seed=0, name="t")
    online = Mlp([2, 2], seed=1, name="o")
    tau = 0.25
    start = target.weights[0].copy()
    goal = online.weights[0].copy()
    for n in range(1, 6):
        soft_update(target, online, tau)
        want = goal + (1 - tau) ** n * (start - goal)
        np.testing.assert_allclose(target.weights[0], want, rtol=1e-12)
    with pytest.raises(ValueError):
        soft_update(target, online, 0.0)
    with pytest.raises(ValueError):
        soft_update(target, Mlp([2, 3], seed=0), 0.5)


def test_adam_minimizes_quadratic():
    # single weight, fixed input 1: loss (w*1 + b - 3)^2 has optimum w+b=3
    net = Mlp([1, 1], seed=0)
    opt = Optimizer(kind="adam", lr=0.05)
    x = np.array([1.0])
    for _ in range(500):
        y = net.forward(x)
        err = y - 3.0
        grads = net.backward(2.0 * err)
        opt.step(net, grads)
    assert float(net.forward(x)[0]) == pytest.approx(3.0, abs=1e-4)


def test_sgd_kind_and_bad_kind():
    net = Mlp([1, 1], seed=0)
    w0 = net.weights[0].copy()
    net.forward(np.array([2.0]))
    grads = net.backward(np.array([1.0]))
    Optimizer(kind="sgd", lr=0.1).step(net, grads)
    np.testing.assert_allclose(net.weights[0], w0 - 0.1 * grads.d_weights[0])
    with pytest.raises(ValueError):
        Optimizer(kind="rmsprop")
    with pytest.raises(ValueError):
        Optimizer(lr=0.0)


def test_nonfinite_gradient_skips_step():
    net = Mlp([2, 2], seed=0)
    before = [p.copy() for p in net.parameters()]
    bad = Gradients(
        d_weights=[np.full_like(net.weights[0], np.nan)],
        d_biases=[np.zeros_like(net.biases[0])],
        d_input=np.zeros(2),
    )
    opt = Optimizer()
    assert opt.step(net, bad) is False
    assert opt.skipped_steps == 1
    for p, q in zip(net.parameters(), before):
        np.testing.assert_array_equal(p, q)


def test_checkpoint_round_trip(tmp_path):
    nets = {
        "actor_0": Mlp([3, 8, 2], seed=1, name="actor_0"),
        "critic_0": Mlp([5, 4, 1], seed=2, name="critic_0"),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(nets, path, meta={"step": "120", "seed": "7"})
    assert path.read_text().splitlines()[0] == "mlp-checkpoint-v1"
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": "120", "seed": "7"}
    assert sorted(loaded) == sorted(nets)
    for name, net in nets.items():
        assert loaded[name].dims == net.dims
        for p, q in zip(loaded[name].parameters(), net.parameters()):
            np.testing.assert_array_equal(p, q)
