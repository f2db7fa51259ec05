"""Cross-city cost, OT alignment loss and the coupling-weighted contrastive loss.

Couplings are treated as constants when differentiating: gradients flow
through the cost matrix and the similarity logits only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCouplingError, InputError
from .sinkhorn import Coupling, SinkhornConfig, sinkhorn_solve

LOG_FLOOR = 1e-30


@dataclass(frozen=True)
class AlignConfig:
    eta: float = 0.5
    tau: float = 0.1
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    ot_weight: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise InputError(f"tau must be positive, got {self.tau}")
        if self.eta < 0:
            raise InputError(f"eta must be nonnegative, got {self.eta}")


@dataclass
class AlignResult:
    l_ot: float
    l_con: float
    l_align: float
    coupling: Coupling
    grad_zs: np.ndarray
    grad_zt: np.ndarray
    skipped_rows: int = 0


def row_normalize(z, name="embedding"):
    z = np.asarray(z, dtype=float)
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise InputError(f"{name} row {int(bad[0])} has zero norm and cannot be normalized")
    return z / norms[:, None], norms


def normalize_backward(z_norm, norms, grad):
    """Chain a gradient w.r.t. ``z / |z|`` back to ``z``."""
    radial = (z_norm * grad).sum(axis=1, keepdims=True)
    return (grad - z_norm * radial) / norms[:, None]


def sphere_cost(xs, xt):
    """Pairwise Euclidean distance between unit-norm rows."""
    return np.sqrt(np.maximum(2.0 - 2.0 * (xs @ xt.T), 0.0))


def cost_backward(xs, xt, C, grad_C):
    """Gradients of ``sum(grad_C * C)`` w.r.t. the unit rows; zero-distance cells contribute 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        Wt = np.where(C > 0, grad_C / C, 0.0)
    g_s = Wt.sum(axis=1)[:, None] * xs - Wt @ xt
    g_t = Wt.sum(axis=0)[:, None] * xt - Wt.T @ xs
    return g_s, g_t


def cost_matrix(zs, zt):
    """Return ``(C, zs_norm, zt_norm)`` with ``C_ij = |zs_i/|zs_i| - zt_j/|zt_j||``."""
    zs = np.asarray(zs, dtype=float)
    zt = np.asarray(zt, dtype=float)
    if zs.ndim != 2 or zt.ndim != 2 or zs.shape[1] != zt.shape[1]:
        raise InputError(f"embedding shapes {zs.shape} and {zt.shape} do not share a dimension")
    xs, _ = row_normalize(zs, "source embedding")
    xt, _ = row_normalize(zt, "target embedding")
    return sphere_cost(xs, xt), xs, xt


def ot_loss(coupling, C):
    P = coupling.P if isinstance(coupling, Coupling) else np.asarray(coupling, dtype=float)
    C = np.asarray(C, dtype=float)
    if P.shape != C.shape:
        raise InputError(f"coupling shape {P.shape} != cost shape {C.shape}")
    return float((P * C).sum() / min(C.shape))


def contrastive_loss(P, zs_norm, zt_norm, tau, return_skipped=False):
    """Coupling-weighted InfoNCE over cross-city cosine similarities.

    ``L = -(1/n_s) sum_i log(sum_j P_ij exp(S_ij) / sum_j exp(S_ij))`` with
    ``S = zs_norm zt_norm^T / tau``. Rows of ``P`` with zero mass contribute
    0 and are counted as skipped. Returns ``(loss, grad_zs_norm, grad_zt_norm)``
    (plus the skipped count when requested).
    """
    P = np.asarray(P, dtype=float)
    n_s = P.shape[0]
    if P.shape != (zs_norm.shape[0], zt_norm.shape[0]):
        raise InputError(f"coupling shape {P.shape} does not match embeddings")
    if np.any(P < 0):
        raise InputError("coupling must be nonnegative")
    live = P.sum(axis=1) > 0
    if not np.any(live):
        raise DegenerateCouplingError("every coupling row has zero mass")

    S = (zs_norm @ zt_norm.T) / tau
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    denom = E.sum(axis=1)
    num = (P * E).sum(axis=1) + LOG_FLOOR
    per_row = np.log(denom) - np.log(num)
    loss = float(per_row[live].sum() / n_s)

    dS = E / denom[:, None] - (P * E) / num[:, None]
    dS[~live] = 0.0
    dS /= n_s * tau
    g_s = dS @ zt_norm
    g_t = dS.T @ zs_norm
    if return_skipped:
        return loss, g_s, g_t, int((~live).sum())
    return loss, g_s, g_t


def align_losses(xs, xt, C, P, eta, tau, ot_weight=1.0):
    """Losses and unit-sphere gradients for a fixed coupling ``P``."""
    l_ot = ot_loss(P, C)
    g_s, g_t = cost_backward(xs, xt, C, ot_weight * P / min(C.shape))
    l_con, cs, ct, skipped = contrastive_loss(P, xs, xt, tau, return_skipped=True)
    return l_ot, l_con, g_s + eta * cs, g_t + eta * ct, skipped


def align_step(zs, zt, config: AlignConfig | None = None) -> AlignResult:
    """Cost, Sinkhorn coupling and ``L_align = L_OT + eta * L_Con`` with embedding gradients."""
    config = config or AlignConfig()
    zs = np.asarray(zs, dtype=float)
    zt = np.asarray(zt, dtype=float)
    C, xs, xt = cost_matrix(zs, zt)
    coupling = sinkhorn_solve(C, config.sinkhorn)
    l_ot, l_con, g_s, g_t, skipped = align_losses(xs, xt, C, coupling.P, config.eta, config.tau,
                                                  config.ot_weight)
    grad_zs = normalize_backward(xs, np.linalg.norm(zs, axis=1), g_s)
    grad_zt = normalize_backward(xt, np.linalg.norm(zt, axis=1), g_t)
    l_align = config.ot_weight * l_ot + config.eta * l_con
    return AlignResult(l_ot, l_con, l_align, coupling, grad_zs, grad_zt, skipped)
