import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from usskit import numerics
from usskit.numerics import (Adam, ArchiveError, NumericFailure, OptimizerState, adam_step,
                             forward_backward, gradient_check, load_archive, save_archive)
from usskit.separator import FiLM
from usskit.ssl_mae import TransformerBlock

D = torch.float64


def _leaf(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=D) * scale).requires_grad_(True)


# -- forward_backward ---------------------------------------------------------


def test_square_sum_gradient():
    w = torch.tensor([1.0, 2.0, 3.0], dtype=D, requires_grad=True)
    g = forward_backward((w * w).sum(), {"w": w})["w"]
    assert g.tolist() == [2.0, 4.0, 6.0]


def test_relu_subgradient_zero_at_zero():
    w = torch.tensor([-1.0, 0.0, 2.0], dtype=D, requires_grad=True)
    g = forward_backward(F.relu(w).sum(), {"w": w})["w"]
    assert g.tolist() == [0.0, 0.0, 1.0]


def test_non_scalar_output_rejected():
    w = _leaf(3)
    with pytest.raises(ValueError, match="scalar"):
        forward_backward(w * 2, {"w": w})


def test_nan_in_backward_names_primitive():
    w = torch.tensor([0.0, 4.0], dtype=D, requires_grad=True)
    # d sqrt / dw is inf at 0; multiplying by zero turns it into nan inside sqrt's backward
    with pytest.raises(NumericFailure) as info:
        forward_backward((torch.sqrt(w) * torch.tensor([0.0, 1.0], dtype=D)).sum(), {"w": w})
    assert info.value.primitive == "sqrt"


def test_non_finite_forward_rejected():
    w = torch.tensor([0.0], dtype=D, requires_grad=True)
    with pytest.raises(NumericFailure):
        forward_backward(torch.log(w).sum(), {"w": w})


def test_non_parameter_leaves_untouched():
    w = _leaf(3)
    other = _leaf(3, seed=1)
    forward_backward((w * other).sum(), {"w": w})
    assert other.grad is None and w.grad is None


def test_unreachable_parameter_gets_zero_gradient():
    w, u = _leaf(2), _leaf(2, seed=1)
    grads = forward_backward((w**2).sum(), {"w": w, "u": u})
    assert torch.equal(grads["u"], torch.zeros(2, dtype=D))


class _ConvNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 3, 3, padding=1)
        self.c2 = nn.Conv2d(3, 4, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(4, 2, 1)

    def forward(self, x):
        return self.c3(torch.tanh(self.c2(F.relu(self.c1(x)))))


def test_three_layer_convnet_matches_finite_differences():
    torch.manual_seed(0)
    net = _ConvNet().double()
    x = _leaf(2, 1, 6, 6, seed=3)
    w = _leaf(2, 2, 3, 3, seed=4).detach()
    report = gradient_check(lambda: (net(x) * w).sum(), numerics.trainable(net),
                            tolerance=1e-4, step=1e-5)
    assert report.passed, report.line()


# -- per-primitive finite-difference properties --------------------------------


def _prim_cases():
    return {
        "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
        "conv2d": (lambda x, k: F.conv2d(x, k, stride=2, padding=1), [(1, 2, 5, 5), (3, 2, 3, 3)]),
        "conv_transpose2d": (lambda x, k: F.conv_transpose2d(x, k, stride=2), [(1, 2, 3, 3), (2, 3, 2, 2)]),
        "add": (lambda a, b: a + b, [(3, 3), (3, 3)]),
        "mul": (lambda a, b: a * b, [(3, 3), (3, 3)]),
        "relu": (lambda a: F.relu(a), [(4, 4)]),
        "sigmoid": (lambda a: torch.sigmoid(a), [(4, 4)]),
        "tanh": (lambda a: torch.tanh(a), [(4, 4)]),
        "softmax": (lambda a: F.softmax(a, dim=-1), [(3, 5)]),
        "layer_norm": (lambda a, g: F.layer_norm(a, (5,), weight=g), [(3, 5), (5,)]),
        "batch_norm": (lambda a, g: F.batch_norm(a, None, None, weight=g, training=True),
                       [(6, 3, 2, 2), (3,)]),
        "avg_pool": (lambda a: F.avg_pool2d(a, 2), [(1, 2, 4, 4)]),
        "max_pool": (lambda a: F.max_pool2d(a, 2), [(1, 2, 4, 4)]),
        "concat": (lambda a, b: torch.cat([a, b], dim=1), [(2, 3), (2, 2)]),
        "slice": (lambda a: a[1:, ::2], [(4, 5)]),
        "attention": (lambda q, k, v: numerics.scaled_dot_product_attention(q, k, v),
                      [(2, 4, 3), (2, 5, 3), (2, 5, 3)]),
    }


PRIMITIVES = sorted(_prim_cases())


@pytest.mark.parametrize("name", PRIMITIVES)
@settings(max_examples=4, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_primitive_gradient_matches_finite_differences(name, seed):
    fn, shapes = _prim_cases()[name]
    leaves = {f"x{i}": _leaf(*s, seed=seed + i) for i, s in enumerate(shapes)}
    readout = torch.randn(fn(*leaves.values()).shape, generator=torch.Generator().manual_seed(seed + 99),
                          dtype=D)
    report = gradient_check(lambda: (fn(*leaves.values()) * readout).sum(), leaves,
                            tolerance=1e-4, seed=seed, name=name)
    assert report.passed, report.line()


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_backprop_is_linear(a, b, seed):
    w = _leaf(4, seed=seed)
    f = lambda: torch.tanh(w).sum()
    g = lambda: (w**3).sum()
    gf = forward_backward(f(), {"w": w})["w"]
    gg = forward_backward(g(), {"w": w})["w"]
    combined = forward_backward(a * f() + b * g(), {"w": w})["w"]
    torch.testing.assert_close(combined, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic_under_seed():
    def run():
        torch.manual_seed(5)
        net = _ConvNet()
        x = torch.randn(2, 1, 6, 6)
        return net(x)

    assert torch.equal(run(), run())


# -- Adam ---------------------------------------------------------------------


def _reference_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam in plain numpy."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.zeros(1, dtype=D)}
    adam_step(p, {"w": torch.ones(1, dtype=D)}, OptimizerState(lr=1e-3))
    # m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
    assert p["w"].item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), steps=st.integers(1, 6))
def test_adam_matches_reference(seed, steps):
    rng = np.random.default_rng(seed)
    p0 = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(steps)]
    params = {"w": torch.tensor(p0)}
    state = OptimizerState(lr=0.01)
    for g in grads:
        adam_step(params, {"w": torch.tensor(g)}, state)
    np.testing.assert_allclose(params["w"].numpy(), _reference_adam(p0, grads, 0.01), rtol=1e-12,
                               atol=1e-14)
    assert state.step == steps


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    params = {"w": torch.tensor([1.0, -2.0], dtype=D)}
    state = OptimizerState()
    adam_step(params, {"w": torch.tensor([1.0, 1.0], dtype=D)}, state)
    m_before = state.exp_avg["w"].clone()
    v_before = state.exp_avg_sq["w"].clone()
    adam_step(params, {"w": torch.zeros(2, dtype=D)}, state)
    # the update is m̂ / √v̂, which is not zero while the moments decay
    assert torch.all(state.exp_avg["w"].abs() < m_before.abs())
    assert torch.all(state.exp_avg_sq["w"] < v_before)
    fresh = {"w": torch.tensor([1.0, -2.0], dtype=D)}
    adam_step(fresh, {"w": torch.zeros(2, dtype=D)}, OptimizerState())
    assert torch.equal(fresh["w"], torch.tensor([1.0, -2.0], dtype=D))


def test_adam_quadratic_descent():
    w = torch.zeros(1, dtype=D, requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(100):
        opt.step(((w - 3.0) ** 2).sum())
    assert abs(w.item() - 3.0) < 0.1


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        adam_step({"w": torch.zeros(3)}, {"w": torch.zeros(2)}, OptimizerState())


def test_adam_step_counter_increments():
    params = {"w": torch.zeros(2)}
    state = OptimizerState()
    for k in range(1, 4):
        adam_step(params, {"w": torch.ones(2)}, state)
        assert state.step == k


# -- gradient_check harness ----------------------------------------------------


def test_gradient_check_linear_layer_at_1e6():
    torch.manual_seed(1)
    lin = nn.Linear(4, 3).double()
    x = _leaf(5, 4)
    w = _leaf(5, 3, seed=2).detach()
    report = gradient_check(lambda: (lin(x) * w).sum(), numerics.trainable(lin), tolerance=1e-6)
    assert report.passed, report.line()


def test_gradient_check_film_block():
    film = FiLM(3, 4).double()
    with torch.no_grad():
        for p in film.parameters():
            p.normal_()
    h, e = _leaf(2, 3, 2, 2), _leaf(2, 4, seed=1)
    w = _leaf(2, 3, 2, 2, seed=2).detach()
    params = {**numerics.trainable(film), "e": e}
    report = gradient_check(lambda: (film(h, e) * w).sum(), params)
    assert report.passed, report.line()


def test_gradient_check_attention_block():
    torch.manual_seed(2)
    blk = TransformerBlock(8, 2).double()
    x = _leaf(2, 5, 8)
    w = _leaf(2, 5, 8, seed=1).detach()
    report = gradient_check(lambda: (blk(x) * w).sum(), {**numerics.trainable(blk), "x": x})
    assert report.passed, report.line()


def test_gradient_check_flags_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # should be 2x

    w = _leaf(4)
    report = gradient_check(lambda: Wrong.apply(w).sum(), {"w": w})
    assert not report.passed and report.worst_param == "w"


def test_gradient_check_requires_double():
    w = torch.zeros(2, requires_grad=True)
    with pytest.raises(TypeError):
        gradient_check(lambda: w.sum(), {"w": w})


# -- archive ----------------------------------------------------------------------

_dtypes = st.sampled_from([np.float32, np.float64, np.int64])


@settings(max_examples=25, deadline=None)
@given(shapes=st.lists(st.lists(st.integers(0, 4), max_size=3), min_size=1, max_size=4),
       dtype=_dtypes, seed=st.integers(0, 1000))
def test_archive_round_trip_is_bit_exact(tmp_path_factory, shapes, dtype, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}/x": (rng.standard_normal(s) * 1e3).astype(dtype) for i, s in enumerate(shapes)}
    path = tmp_path_factory.mktemp("arch") / "a.bin"
    save_archive(path, tensors, {"k": [1, 2]})
    loaded, meta = load_archive(path)
    assert meta == {"k": [1, 2]}
    for name, arr in tensors.items():
        assert loaded[name].dtype == arr.dtype and loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.tobytes()


def test_archive_scalar_tensor_keeps_shape(tmp_path):
    save_archive(tmp_path / "a", {"s": np.float32(2.5)})
    loaded, _ = load_archive(tmp_path / "a")
    assert loaded["s"].shape == () and loaded["s"] == np.float32(2.5)


@pytest.mark.parametrize("corrupt", [
    lambda b: b.replace(b"USSKIT-ARCHIVE", b"XXXXXX-ARCHIVE"),
    lambda b: b.replace(b"\nend\n", b"\nfin\n"),
    lambda b: b.replace(b"float64 2,3", b"float64 2,9"),
    lambda b: b[:-8],
])
def test_archive_corrupt_header_rejected(tmp_path, corrupt):
    path = tmp_path / "a"
    save_archive(path, {"w": np.zeros((2, 3))})
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(ArchiveError):
        load_archive(path)


def test_archive_rejects_whitespace_names(tmp_path):
    with pytest.raises(ArchiveError):
        save_archive(tmp_path / "a", {"a b": np.zeros(1)})


def test_state_checksum_tracks_changes():
    lin = nn.Linear(2, 2)
    before = numerics.state_checksum(lin)
    assert numerics.state_checksum(lin) == before
    with torch.no_grad():
        lin.weight[0, 0] += 1.0
    assert numerics.state_checksum(lin) != before


def test_batch_norm_momentum_convention():
    # running ← 0.9·running + 0.1·batch
    bn = numerics.batch_norm(1)
    x = torch.full((4, 1, 2, 2), 5.0)
    bn.train()
    bn(x)
    assert bn.running_mean.item() == pytest.approx(0.5)
    assert math.isclose(bn.momentum, 0.1)
