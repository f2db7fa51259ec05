"""Shared prototype hub for multi-source alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import contrastive_loss, cost_backward, normalize_backward, row_normalize, sphere_cost
from .cycle import CycleParams, cycle_loss
from .errors import InputError
from .sinkhorn import Coupling, SinkhornConfig, sinkhorn_solve

PRIOR_MODES = ("uniform", "frozen", "adaptive")


@dataclass(frozen=True)
class HubConfig:
    K: int = 32
    tau: float = 0.1
    tau_b: float = 0.5
    eps_b: float = 1e-3
    lambda_c: float = 0.5
    lambda_hub: float = 0.1
    prior_mode: str = "adaptive"
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(marginal_mode="uniform"))

    def __post_init__(self):
        if self.K < 2:
            raise InputError(f"hub needs at least 2 prototypes, got K={self.K}")
        if self.prior_mode not in PRIOR_MODES:
            raise InputError(f"prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if not (self.tau > 0 and self.tau_b > 0 and self.eps_b > 0):
            raise InputError("tau, tau_b and eps_b must be positive")


@dataclass
class HubState:
    A: np.ndarray
    b: np.ndarray
    prior_mode: str = "adaptive"
    tau_b: float = 0.5
    eps_b: float = 1e-3
    frozen_b: np.ndarray | None = None

    @property
    def K(self):
        return self.A.shape[0]

    def refresh_prior(self, zt, epoch=1, freeze_epoch=1):
        """Recompute ``b`` for the current epoch according to ``prior_mode``."""
        K = self.K
        if self.prior_mode == "uniform":
            self.b = np.full(K, 1.0 / K)
        elif self.prior_mode == "adaptive":
            xt, _ = row_normalize(zt, "target embedding")
            xa, _ = row_normalize(self.A, "prototype")
            self.b = target_prior(xt, xa, self.tau_b, self.eps_b)
        else:
            if self.frozen_b is None and epoch >= freeze_epoch:
                xt, _ = row_normalize(zt, "target embedding")
                xa, _ = row_normalize(self.A, "prototype")
                self.frozen_b = target_prior(xt, xa, self.tau_b, self.eps_b)
            self.b = self.frozen_b if self.frozen_b is not None else np.full(K, 1.0 / K)
        return self.b


@dataclass
class HubCityResult:
    coupling: Coupling
    Q: np.ndarray
    l_ot: float
    l_con: float
    l_align: float
    l_hub: float
    l_cyc: float
    r_ent: float
    l_rec: float
    # alignment gradients (weight lambda_align) and cycle gradients (weight lambda_rec)
    grad_z: np.ndarray
    grad_A: np.ndarray
    grad_z_rec: np.ndarray
    grad_A_rec: np.ndarray
    grad_Wq: np.ndarray
    grad_Wk: np.ndarray


def target_prior(zt_norm, A_norm, tau_b, eps_b):
    """Prototype marginal from mean target-prototype cosine similarity.

    ``b_k`` is proportional to ``max(exp(mean_j <zt_j, a_k> / tau_b), eps_b)``.
    """
    s_bar = (zt_norm @ A_norm.T).mean(axis=0)
    # shift by the max for overflow safety; the floor shifts with it
    shift = s_bar.max() / tau_b
    w = np.maximum(np.exp(s_bar / tau_b - shift), eps_b * np.exp(-shift))
    return w / w.sum()


def kmeanspp_prototypes(X, K, rng):
    """K-means++ seeding on unit rows; duplicates are jittered when K exceeds distinct points."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        c = X[idx]
        if total <= 0 or d2[idx] == 0:
            c = c + rng.normal(0.0, 0.01, size=c.shape)
        centers.append(c)
        d2 = np.minimum(d2, ((X - c) ** 2).sum(axis=1))
    A = np.array(centers)
    return A / np.linalg.norm(A, axis=1, keepdims=True)


def kl_to_uniform(p):
    p = np.asarray(p, dtype=float)
    K = p.size
    pos = p > 0
    return float((p[pos] * np.log(p[pos] * K)).sum())


def hub_align_city(z_m, hub: HubState, config: HubConfig, cycle: CycleParams) -> HubCityResult:
    """Align one city to the hub and return its losses and gradients.

    The coupling and the prior ``hub.b`` are constants for differentiation,
    so the hub-usage KL term carries no gradient.
    """
    z_m = np.asarray(z_m, dtype=float)
    if z_m.shape[1] != hub.A.shape[1]:
        raise InputError(f"embedding dimension {z_m.shape[1]} != prototype dimension {hub.A.shape[1]}")
    n_m, K = z_m.shape[0], hub.K
    x, z_norms = row_normalize(z_m, "region embedding")
    xa, a_norms = row_normalize(hub.A, "prototype")
    C = sphere_cost(x, xa)
    coupling = sinkhorn_solve(C, config.sinkhorn, a=np.full(n_m, 1.0 / n_m), b=hub.b)
    Pi = coupling.P
    rows = Pi.sum(axis=1, keepdims=True)
    Q = np.divide(Pi, rows, out=np.zeros_like(Pi), where=rows > 0)

    scale = 1.0 / min(n_m, K)
    l_ot = float((Pi * C).sum() * scale)
    g_x, g_a = cost_backward(x, xa, C, Pi * scale)
    l_con, c_x, c_a = contrastive_loss(Q, x, xa, config.tau)
    g_x += config.lambda_c * c_x
    g_a += config.lambda_c * c_a
    l_hub = kl_to_uniform(Pi.sum(axis=0))

    cyc = cycle_loss(z_m, hub.A, cycle)
    return HubCityResult(
        coupling=coupling, Q=Q, l_ot=l_ot, l_con=l_con, l_align=l_ot + config.lambda_c * l_con,
        l_hub=l_hub, l_cyc=cyc.l_cyc, r_ent=cyc.r_ent, l_rec=cyc.l_rec,
        grad_z=normalize_backward(x, z_norms, g_x),
        grad_A=normalize_backward(xa, a_norms, g_a),
        grad_z_rec=cyc.grad_zs, grad_A_rec=cyc.grad_zt,
        grad_Wq=cyc.grad_Wq, grad_Wk=cyc.grad_Wk,
    )


def hub_usage_diagnostics(Pi):
    """Prototype mass share ``p``, its entropy, normalized entropy and ``exp(H)``."""
    Pi = np.asarray(Pi, dtype=float)
    if Pi.ndim != 2 or np.any(Pi < 0):
        raise InputError("hub coupling must be a nonnegative matrix")
    total = Pi.sum()
    if not total > 0:
        raise InputError("hub coupling has zero mass")
    p = Pi.sum(axis=0) / total
    pos = p > 0
    H = float(-(p[pos] * np.log(p[pos])).sum())
    K = Pi.shape[1]
    return {
        "mass_per_prototype": p,
        "entropy": H,
        "normalized_entropy": H / np.log(K) if K > 1 else 0.0,
        "effective_count": float(np.exp(H)),
    }
