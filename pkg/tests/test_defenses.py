import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitleak._validation import ContractError
from splitleak.autodiff import Graph, backward, finite_difference_gradient, relative_error
from splitleak.defenses import (
    NoiseSpec,
    clip_factor,
    clip_inf,
    distance_correlation,
    dp_laplace_perturb,
    dxp_perturb,
    nearest_rows,
    nopeek_loss,
    sample_dxp_noise,
)


def _table(V=20, H=8, seed=0):
    return np.random.default_rng(seed).normal(size=(V, H))


# -------------------------------------------------------------------- spec

def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec("gauss")
    with pytest.raises(ValueError):
        NoiseSpec.dxp(0.0)
    with pytest.raises(ValueError):
        NoiseSpec.laplace(1.0, clip=-1)
    with pytest.raises(ValueError):
        NoiseSpec.nopeek(-0.1)


def test_noise_spec_round_trip():
    for spec in [NoiseSpec.none(), NoiseSpec.dxp(0.3, seed=2), NoiseSpec.laplace(5.0), NoiseSpec.nopeek(0.5)]:
        assert NoiseSpec.from_dict(spec.to_dict()) == spec


def test_default_clip():
    assert NoiseSpec.laplace(1.0).clip == 2000


# --------------------------------------------------------------------- dxp

def test_dxp_vanishing_noise_returns_row():
    table = _table()
    ids = np.array([[3, 7, 0], [19, 2, 2]])
    out = dxp_perturb(table[ids], 1e9, table, np.random.default_rng(0))
    assert np.array_equal(out, table[ids])


def test_dxp_outputs_are_table_rows():
    table = _table()
    e = np.random.default_rng(1).normal(size=(3, 5, 8))
    out = dxp_perturb(e, 0.5, table, np.random.default_rng(2))
    ids = nearest_rows(out, table)
    assert np.array_equal(out, table[ids])


def test_dxp_idempotent_at_vanishing_noise():
    table = _table()
    e = np.random.default_rng(1).normal(size=(2, 4, 8))
    once = dxp_perturb(e, 1e9, table, np.random.default_rng(0))
    twice = dxp_perturb(once, 1e9, table, np.random.default_rng(1))
    assert np.array_equal(once, twice)


def test_dxp_noise_magnitude_mean():
    H, eps = 16, 4.0
    noise = sample_dxp_noise((100_000, H), eps, np.random.default_rng(0)).noise
    mean = np.linalg.norm(noise, axis=-1).mean()
    assert abs(mean / (H / eps) - 1) < 0.02


def test_dxp_seeded():
    table = _table()
    e = np.random.default_rng(1).normal(size=(2, 4, 8))
    a = dxp_perturb(e, 0.2, table, np.random.default_rng(5))
    b = dxp_perturb(e, 0.2, table, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_nearest_rows_brute_force():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(32, 6))
    e = rng.normal(size=(4, 9, 6))
    got = nearest_rows(e, table)
    for idx in np.ndindex(*e.shape[:-1]):
        d = [float(((e[idx] - row) ** 2).sum()) for row in table]
        assert got[idx] == int(np.argmin(d))


def test_nearest_rows_tie_lowest_id():
    table = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    assert nearest_rows(np.array([[0.0, 0.0]]), table)[0] == 0
    assert nearest_rows(np.array([[1.0, 0.0]]), table)[0] == 0


# ----------------------------------------------------------------- Laplace

def test_clip_halves_at_twice_g():
    G = 3.0
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 4, 5))
    x[0, 2, 1] = 2 * G
    out = dp_laplace_perturb(x, math.inf, G)
    np.testing.assert_allclose(out, 0.5 * x, rtol=0, atol=1e-15)


def test_laplace_vanishing_noise():
    x = np.random.default_rng(0).normal(size=(2, 3, 4)) * 10
    G = 5.0
    out = dp_laplace_perturb(x, 1e9, G, np.random.default_rng(1))
    np.testing.assert_allclose(out, x * clip_factor(x, G), rtol=0, atol=1e-6)


@given(arrays(np.float64, (3, 2, 4), elements=st.floats(-1e6, 1e6)), st.floats(1e-3, 1e4))
@settings(max_examples=200, deadline=None)
def test_clip_bound_exact(x, G):
    clipped = clip_inf(x, G)
    assert np.abs(clipped).max() <= G


def test_laplace_noise_scale():
    G, eps_star = 2.0, 0.5
    x = np.zeros((50, 20, 20))
    noise = dp_laplace_perturb(x, eps_star, G, np.random.default_rng(0))
    # Laplace(b) has mean absolute value b = 2G/(eps_star·G)
    assert abs(np.abs(noise).mean() / (2 * G / (eps_star * G)) - 1) < 0.02


def test_laplace_seeded():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    a = dp_laplace_perturb(x, 1.0, 2.0, np.random.default_rng(3))
    b = dp_laplace_perturb(x, 1.0, 2.0, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_laplace_tensor_gradient_is_clip_factor():
    x = np.random.default_rng(0).normal(size=(2, 3, 4)) * 5
    g = Graph()
    t = g.leaf(x)
    out = dp_laplace_perturb(t, 2.0, 3.0, np.random.default_rng(0))
    from splitleak.autodiff import ops
    grad = backward(ops.sum(out), t)
    np.testing.assert_allclose(grad, np.broadcast_to(clip_factor(x, 3.0), x.shape))


# -------------------------------------------------------------------- dCor

def test_dcor_self_is_one():
    X = np.random.default_rng(0).normal(size=(8, 5))
    assert abs(distance_correlation(X, X).item() - 1) < 1e-12


def test_dcor_constant_is_zero():
    X = np.random.default_rng(0).normal(size=(8, 5))
    assert distance_correlation(X, np.ones((8, 3))).item() == 0.0


def test_dcor_rotation_translation_invariant():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 4))
    Y = rng.normal(size=(10, 6)) + X[:, :1]
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    Y2 = Y @ q + rng.normal(size=6)
    a = distance_correlation(X, Y).item()
    b = distance_correlation(X, Y2).item()
    assert abs(a - b) < 1e-10


def test_dcor_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    for _ in range(20):
        X, Y = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
        a, b = distance_correlation(X, Y).item(), distance_correlation(Y, X).item()
        assert abs(a - b) < 1e-12
        assert 0 <= a <= 1


def test_dcor_needs_four_rows():
    with pytest.raises(ContractError):
        distance_correlation(np.ones((3, 2)), np.ones((3, 2)))


def test_nopeek_alpha_zero_exact():
    from splitleak.autodiff import Tensor
    loss = Tensor(1.2345)
    assert nopeek_loss(loss, np.ones((2, 4)), np.ones((2, 4)), 0.0) is loss


def test_nopeek_gradient_fd():
    rng = np.random.default_rng(4)
    B, S, H = 4, 4, 8
    emb = rng.normal(size=(B, S, H))
    smashed = rng.normal(size=(B, S, H))
    from splitleak.autodiff import Tensor

    def f(s):
        return nopeek_loss(Tensor(0.7), emb, s, 0.8)

    g = Graph()
    t = g.leaf(smashed)
    grad = backward(f(t), t)
    fd = finite_difference_gradient(f, smashed, h=1e-5)
    assert relative_error(grad, fd, floor=1e-6) < 1e-4


def test_nopeek_default_batch():
    from splitleak.defenses import NOPEEK_BATCH
    assert NOPEEK_BATCH == 6
