import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from scot.align import (AlignConfig, align_losses, align_step, contrastive_loss, cost_matrix,
                        normalize_backward, ot_loss)
from scot.errors import DegenerateCouplingError, InputError
from scot.sinkhorn import SinkhornConfig, sinkhorn_solve
from scot.trainer import numeric_grad, rel_error


def test_cost_matrix_examples():
    C, _, _ = cost_matrix(np.eye(3), np.eye(3))
    np.testing.assert_allclose(np.diag(C), 0, atol=1e-12)
    C, _, _ = cost_matrix(np.array([[1.0, 0.0]]), np.array([[-2.0, 0.0]]))
    assert C[0, 0] == pytest.approx(2)
    C, _, _ = cost_matrix(np.array([[3.0, 4.0]]), np.array([[1.0, 0.0]]))
    assert C[0, 0] == pytest.approx(0.894427, abs=1e-6)


def test_cost_matrix_errors():
    with pytest.raises(InputError, match="row 1"):
        cost_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]), np.eye(2))
    with pytest.raises(InputError):
        cost_matrix(np.ones((2, 3)), np.ones((2, 2)))


def test_ot_loss_examples():
    C = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert ot_loss(np.ones((2, 2)), np.zeros((2, 2))) == 0
    assert ot_loss(np.eye(2) / 2, C) == 0
    assert ot_loss(np.full((2, 2), 0.25), C) == pytest.approx(0.25)


def test_contrastive_examples(rng):
    x = rng.normal(size=(3, 2))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    loss, _, _ = contrastive_loss(np.ones((3, 1)), x, x[:1], 0.1)
    assert loss == pytest.approx(0, abs=1e-12)
    n_t = 4
    P = rng.dirichlet(np.ones(n_t), size=3)
    xt = np.tile([[1.0, 0.0]], (n_t, 1))
    loss, _, _ = contrastive_loss(P, np.tile([[0.0, 1.0]], (3, 1)), xt, 0.1)
    assert loss == pytest.approx(np.log(n_t))


def test_contrastive_skips_zero_rows(rng):
    x = rng.normal(size=(3, 2))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    P = np.array([[0.5, 0.5], [0.0, 0.0], [1.0, 0.0]])
    loss, gs, _, skipped = contrastive_loss(P, x, x[:2], 0.5, return_skipped=True)
    assert skipped == 1 and np.all(gs[1] == 0)
    with pytest.raises(DegenerateCouplingError):
        contrastive_loss(np.zeros((3, 2)), x, x[:2], 0.5)


def _frozen_objective(zs, zt, P, eta, tau):
    C, xs, xt = cost_matrix(zs, zt)
    l_ot, l_con, gs, gt, _ = align_losses(xs, xt, C, P, eta, tau)
    gzs = normalize_backward(xs, np.linalg.norm(zs, axis=1), gs)
    gzt = normalize_backward(xt, np.linalg.norm(zt, axis=1), gt)
    return l_ot + eta * l_con, gzs, gzt


@pytest.mark.parametrize("seed", range(20))
def test_align_gradients_frozen_P(seed):
    rng = np.random.default_rng(seed)
    zs, zt = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    C, _, _ = cost_matrix(zs, zt)
    P = sinkhorn_solve(C, SinkhornConfig()).P
    _, gzs, gzt = _frozen_objective(zs, zt, P, 0.5, 0.1)
    f = lambda: _frozen_objective(zs, zt, P, 0.5, 0.1)[0]
    assert rel_error(gzs, numeric_grad(f, zs)) < 1e-4
    assert rel_error(gzt, numeric_grad(f, zt)) < 1e-4


def test_align_step_eta_zero(rng):
    zs, zt = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    r = align_step(zs, zt, AlignConfig(eta=0.0))
    assert r.l_align == r.l_ot
    r = align_step(zs, zt)
    assert r.l_align == r.l_ot + 0.5 * r.l_con


@pytest.mark.parametrize("seed", range(10))
def test_self_alignment_beats_permutation(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 4))
    cfg = AlignConfig(sinkhorn=SinkhornConfig(marginal_mode="uniform", max_iters=1000))
    base = align_step(z, z, cfg).l_ot
    for _ in range(5):
        perm = rng.permutation(8)
        if np.array_equal(perm, np.arange(8)):
            continue
        # the OT value is permutation invariant, so compare costs under the self coupling
        C, _, _ = cost_matrix(z, z[perm])
        P_self = align_step(z, z, cfg).coupling.P
        assert base < ot_loss(P_self, C)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_loss_bounds_and_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    n_s, n_t, d = rng.integers(2, 9), rng.integers(2, 9), 3
    zs, zt = rng.normal(size=(n_s, d)), rng.normal(size=(n_t, d))
    r = align_step(zs, zt)
    assert 0 <= r.l_ot <= 2 * r.coupling.total_mass / min(n_s, n_t) + 1e-12
    np.testing.assert_allclose(r.coupling.P.sum(axis=0), 1, atol=1e-9)
    Q = ortho_group.rvs(d, random_state=seed)
    r2 = align_step(zs @ Q, zt @ Q)
    assert r2.l_ot == pytest.approx(r.l_ot, abs=1e-9)
    assert r2.l_con == pytest.approx(r.l_con, abs=1e-9)
    np.testing.assert_allclose(r2.coupling.P, r.coupling.P, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_contrastive_nonnegative_for_unit_rows(seed):
    rng = np.random.default_rng(seed)
    xs, xt = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    xs /= np.linalg.norm(xs, axis=1, keepdims=True)
    xt /= np.linalg.norm(xt, axis=1, keepdims=True)
    P = rng.dirichlet(np.ones(6), size=5)
    loss, _, _ = contrastive_loss(P, xs, xt, 0.1)
    assert loss >= -1e-12
