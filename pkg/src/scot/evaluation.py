"""Ridge transfer readout, error metrics, matching accuracy and the transfer-bound check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .citydata import UNMATCHED
from .errors import InputError

DEFAULT_ALPHA = 1.0


@dataclass
class RidgeModel:
    weights: np.ndarray
    bias: float
    alpha: float

    def predict(self, Z):
        return np.asarray(Z, dtype=float) @ self.weights + self.bias


def ridge_fit(Z, y, alpha=DEFAULT_ALPHA, center=True) -> RidgeModel:
    """Closed-form ridge regression via a Cholesky solve.

    With ``center`` the design and targets are mean-centered and the means
    folded into the bias; otherwise the bias is 0.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise InputError(f"design {Z.shape} and targets {y.shape} are incompatible")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(y))):
        raise InputError("ridge inputs must be finite")
    if not alpha > 0:
        raise InputError(f"alpha must be positive, got {alpha}")
    if center:
        z_mean, y_mean = Z.mean(axis=0), y.mean()
        Zc, yc = Z - z_mean, y - y_mean
    else:
        z_mean, y_mean = np.zeros(Z.shape[1]), 0.0
        Zc, yc = Z, y
    gram = Zc.T @ Zc + alpha * np.eye(Z.shape[1])
    w = cho_solve(cho_factor(gram), Zc.T @ yc)
    return RidgeModel(w, float(y_mean - z_mean @ w), float(alpha))


def transfer_metrics(model: RidgeModel, Z_target, y_target):
    """MAE over all regions; MAPE (percent) over regions with nonzero target."""
    y = np.asarray(y_target, dtype=float)
    pred = model.predict(Z_target)
    if pred.shape != y.shape:
        raise InputError(f"prediction shape {pred.shape} != target shape {y.shape}")
    err = np.abs(pred - y)
    nz = y != 0
    if not np.any(nz):
        raise InputError("MAPE is undefined when every target is zero")
    return {
        "mae": float(err.mean()),
        "mape": float((err[nz] / np.abs(y[nz])).mean() * 100.0),
        "mape_excluded": int((~nz).sum()),
    }


def matching_metrics(P, true_match):
    """Top-1 accuracy and lift of coupling mass on true matches over a uniform row."""
    P = np.asarray(P, dtype=float)
    tm = np.asarray(getattr(true_match, "true_match", true_match))
    if P.shape[0] != tm.shape[0]:
        raise InputError(f"coupling has {P.shape[0]} rows but truth has {tm.shape[0]} entries")
    rows = np.flatnonzero(tm != UNMATCHED)
    if rows.size == 0:
        raise InputError("truth has no matched rows")
    n_t = P.shape[1]
    sub = P[rows]
    best = sub.max(axis=1, keepdims=True)
    ties = int(((sub == best).sum(axis=1) > 1).sum())
    top1 = float(np.mean(np.argmax(sub, axis=1) == tm[rows]))
    rowsum = sub.sum(axis=1)
    live = rowsum > 0
    lift = sub[live, tm[rows][live]] / (rowsum[live] / n_t)
    return {"top1_acc": top1, "mean_true_mass_ratio": float(lift.mean()), "ties": ties,
            "n_matched": int(rows.size)}


@dataclass
class BoundInstance:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    b: np.ndarray
    P: np.ndarray
    tau: float
    w_g: np.ndarray
    w_h: np.ndarray
    # g, h are clipped-linear x -> clip(<w, x>, -clip, clip); Lipschitz constant |w|
    clip: float = np.inf

    def g(self, X):
        return np.clip(X @ self.w_g, -self.clip, self.clip)

    def h(self, X):
        return np.clip(X @ self.w_h, -self.clip, self.clip)

    @property
    def L_g(self):
        return float(np.linalg.norm(self.w_g))

    @property
    def L_h(self):
        return float(np.linalg.norm(self.w_h))


def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def weighted_contrastive(u, v, P, a, tau):
    """``sum_i a_i * -log(sum_j P_ij e^{<u_i,v_j>/tau} / (a_i sum_k e^{<u_i,v_k>/tau}))``.

    Rows with ``a_i = 0`` contribute nothing.
    """
    S = (u @ v.T) / tau
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    live = a > 0
    ratio = (P[live] * E[live]).sum(axis=1) / (a[live] * E[live].sum(axis=1))
    return float(-(a[live] * np.log(ratio)).sum())


def verify_bound(inst: BoundInstance, tol=1e-9):
    """Evaluate both sides of the contrastive transfer bound on one instance.

    Returns a dict with the target risk ``lhs``, the bound ``rhs``, the
    contrastive loss, the cosine lower bound ``m_lower``, the realized
    coupling cosine ``mean_cos`` and the flags ``holds`` and
    ``intermediate_holds`` (``m_lower <= mean_cos``). When ``m_lower > 1``
    the square root is undefined; ``rhs`` is NaN and ``holds`` is False.
    """
    u, v, a, b, P = (np.asarray(x, dtype=float) for x in (inst.u, inst.v, inst.a, inst.b, inst.P))
    if np.max(np.abs(np.linalg.norm(u, axis=1) - 1)) > 1e-9 or np.max(np.abs(np.linalg.norm(v, axis=1) - 1)) > 1e-9:
        raise InputError("bound instance embeddings must be unit vectors")
    if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - a)) > 1e-6 or np.max(np.abs(P.sum(axis=0) - b)) > 1e-6:
        raise InputError("coupling marginals must match (a, b) within 1e-6")
    n_t = v.shape[0]
    tau = inst.tau
    l_con = weighted_contrastive(u, v, P, a, tau)
    H_a = _entropy(a)
    m_lower = max(-1.0, tau * np.log(n_t) + tau * H_a - tau * l_con - 1.0 - 1.0 / (2.0 * tau))
    mean_cos = float((P * (u @ v.T)).sum())
    r_s = float((a * np.abs(inst.h(u) - inst.g(u))).sum())
    r_t = float((b * np.abs(inst.h(v) - inst.g(v))).sum())
    gap_arg = 2.0 - 2.0 * m_lower
    rhs = r_s + (inst.L_h + inst.L_g) * np.sqrt(gap_arg) if gap_arg >= 0 else float("nan")
    # same bound without the tau * H(a) term
    m_plain = max(-1.0, tau * np.log(n_t) - tau * l_con - 1.0 - 1.0 / (2.0 * tau))
    rhs_plain = r_s + (inst.L_h + inst.L_g) * np.sqrt(2.0 - 2.0 * m_plain)
    return {
        "lhs": r_t,
        "rhs": float(rhs),
        "l_con": l_con,
        "entropy_a": H_a,
        "m_lower": float(m_lower),
        "mean_cos": mean_cos,
        "holds": bool(gap_arg >= 0 and r_t <= rhs + tol),
        "intermediate_holds": bool(m_lower <= mean_cos + tol),
        "m_lower_plain": float(m_plain),
        "rhs_plain": float(rhs_plain),
        "holds_plain": bool(r_t <= rhs_plain + tol and m_plain <= mean_cos + tol),
    }


def random_bound_instance(rng, max_n=12, d=None, taus=(0.1, 0.5, 1.0), epsilon=None):
    """Random unit embeddings, simplex marginals and a Sinkhorn coupling between them."""
    from .sinkhorn import SinkhornConfig, sinkhorn_solve

    n_s = int(rng.integers(1, max_n + 1))
    n_t = int(rng.integers(1, max_n + 1))
    d = d or int(rng.integers(2, 6))
    u = rng.normal(size=(n_s, d))
    v = rng.normal(size=(n_t, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    a = rng.dirichlet(np.ones(n_s))
    b = rng.dirichlet(np.ones(n_t))
    eps = epsilon if epsilon is not None else float(rng.choice([0.05, 0.15, 0.5, 1.0]))
    cfg = SinkhornConfig(epsilon=eps, max_iters=20000, tol=1e-10)
    C = np.sqrt(np.maximum(2.0 - 2.0 * (u @ v.T), 0.0))
    P = sinkhorn_solve(C, cfg, a=a, b=b).P
    # project away the residual on the row side so both marginals hold to ~1e-12
    P = P * (a / np.maximum(P.sum(axis=1), 1e-300))[:, None]
    w_g = rng.normal(size=d)
    w_h = rng.normal(size=d)
    w_g /= np.linalg.norm(w_g)
    w_h /= np.linalg.norm(w_h)
    tau = float(rng.choice(taus))
    return BoundInstance(u, v, a, b, P, tau, w_g, w_h)
