"""Entropic optimal transport by Sinkhorn-Knopp matrix scaling.

Balanced, rectangular and KL-relaxed (unbalanced) problems are supported,
each in plain scaling form or in the log domain with dual potentials.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, StabilityError

LOG_DOMAIN_EPS = 0.05


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.15
    max_iters: int = 100
    tol: float = 1e-6
    marginal_mode: str = "ones"
    unbalanced_rho: float | None = None
    # None selects automatically: log domain below LOG_DOMAIN_EPS or on underflow.
    log_domain: bool | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InputError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise InputError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise InputError(f"tol must be >= 0, got {self.tol}")
        if self.marginal_mode not in ("ones", "uniform"):
            raise InputError(f"marginal_mode must be 'ones' or 'uniform', got {self.marginal_mode!r}")
        if self.unbalanced_rho is not None and not self.unbalanced_rho > 0:
            raise InputError(f"unbalanced_rho must be positive, got {self.unbalanced_rho}")


@dataclass
class Coupling:
    P: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iters_used: int
    row_residual: float
    col_residual: float
    total_mass: float
    log_domain: bool = False

    @property
    def shape(self):
        return self.P.shape


def gibbs_kernel(C, epsilon):
    if not epsilon > 0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    return np.exp(-np.asarray(C, dtype=float) / epsilon)


def _marginals(n_s, n_t, config, a, b):
    if a is None:
        a = np.ones(n_s) if config.marginal_mode == "ones" else np.full(n_s, 1.0 / n_s)
        explicit_a = False
    else:
        a = np.asarray(a, dtype=float)
        explicit_a = True
    if b is None:
        b = np.ones(n_t) if config.marginal_mode == "ones" else np.full(n_t, 1.0 / n_t)
        explicit_b = False
    else:
        b = np.asarray(b, dtype=float)
        explicit_b = True
    if a.shape != (n_s,) or b.shape != (n_t,):
        raise InputError(f"marginal shapes {a.shape}, {b.shape} do not match cost ({n_s}, {n_t})")
    if np.any(a < 0) or np.any(b < 0) or not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("marginals must be finite and nonnegative")
    if a.sum() <= 0 or b.sum() <= 0:
        raise InputError("marginals must carry positive mass")
    # ones-mode on rectangular problems is deliberately infeasible (fixed-T scaling).
    balanced = config.unbalanced_rho is None
    if balanced and (explicit_a or explicit_b or config.marginal_mode == "uniform"):
        if abs(a.sum() - b.sum()) > 1e-8 * max(a.sum(), b.sum()):
            raise InputError(f"infeasible balanced marginals: sum(a)={a.sum():.12g} != sum(b)={b.sum():.12g}")
    return a, b


def _residuals(P, a, b):
    return (float(np.max(np.abs(P.sum(axis=1) - a))),
            float(np.max(np.abs(P.sum(axis=0) - b))))


def _solve_scaling(C, config, a, b):
    K = gibbs_kernel(C, config.epsilon)
    if np.any(K.max(axis=1) == 0) or np.any(K.max(axis=0) == 0):
        raise StabilityError("Gibbs kernel has an all-zero row or column: cost range too wide "
                             f"for epsilon={config.epsilon}; use log_domain")
    expo = 1.0 if config.unbalanced_rho is None else config.unbalanced_rho / (config.unbalanced_rho + config.epsilon)
    u = np.ones_like(a)
    v = np.ones_like(b)
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for it in range(1, config.max_iters + 1):
            u_prev, v_prev = u, v
            u = (a / (K @ v)) ** expo
            v = (b / (K.T @ u)) ** expo
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise StabilityError(f"scaling vectors became non-finite at iteration {it} "
                                     f"(epsilon={config.epsilon}); use log_domain")
            if config.tol > 0 and _converged(K, u, v, u_prev, v_prev, a, b, config):
                break
    P = u[:, None] * K * v[None, :]
    return P, u, v, it


def _converged(K, u, v, u_prev, v_prev, a, b, config):
    if config.unbalanced_rho is None:
        return float(np.max(np.abs(u * (K @ v) - a))) < config.tol
    du = np.max(np.abs(np.log(u) - np.log(u_prev)))
    dv = np.max(np.abs(np.log(v) - np.log(v_prev)))
    return config.epsilon * max(du, dv) < config.tol


def _solve_log(C, config, a, b):
    eps = config.epsilon
    C = np.asarray(C, dtype=float)
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    expo = 1.0 if config.unbalanced_rho is None else config.unbalanced_rho / (config.unbalanced_rho + eps)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    it = 0
    for it in range(1, config.max_iters + 1):
        f_prev, g_prev = f, g
        f = expo * eps * (log_a - logsumexp((g[None, :] - C) / eps, axis=1))
        g = expo * eps * (log_b - logsumexp((f[:, None] - C) / eps, axis=0))
        if config.tol > 0:
            if config.unbalanced_rho is None:
                finite_f = np.where(np.isfinite(f), f, -np.inf)
                row = np.exp(logsumexp((finite_f[:, None] + g[None, :] - C) / eps, axis=1))
                if float(np.max(np.abs(row - a))) < config.tol:
                    break
            else:
                df = np.max(np.abs(np.nan_to_num(f - f_prev, nan=0.0, posinf=0.0, neginf=0.0)))
                dg = np.max(np.abs(np.nan_to_num(g - g_prev, nan=0.0, posinf=0.0, neginf=0.0)))
                if max(df, dg) < config.tol:
                    break
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    with np.errstate(over="ignore"):
        u, v = np.exp(f / eps), np.exp(g / eps)
    return P, u, v, it


def sinkhorn_solve(C, config: SinkhornConfig | None = None, a=None, b=None) -> Coupling:
    """Entropic OT coupling for cost ``C``.

    Iterates ``u <- a / (K v)``, ``v <- b / (K^T u)`` from ``u = v = 1``,
    ending on a ``v`` update, for ``config.max_iters`` steps or until the
    row residual drops below ``config.tol``. With ``unbalanced_rho`` set the
    updates are raised to ``rho / (rho + epsilon)``.

    Parameters
    ----------
    C : (n_s, n_t) array
        Finite cost matrix.
    config : SinkhornConfig
    a, b : arrays, optional
        Explicit marginals; otherwise taken from ``config.marginal_mode``.
    """
    config = config or SinkhornConfig()
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise InputError("cost matrix must be a finite 2-D array")
    a, b = _marginals(C.shape[0], C.shape[1], config, a, b)

    use_log = config.log_domain
    if use_log is None:
        use_log = config.epsilon < LOG_DOMAIN_EPS
        if not use_log:
            try:
                P, u, v, it = _solve_scaling(C, config, a, b)
            except StabilityError:
                use_log = True
    elif not use_log:
        P, u, v, it = _solve_scaling(C, config, a, b)
    if use_log:
        P, u, v, it = _solve_log(C, config, a, b)

    row_res, col_res = _residuals(P, a, b)
    return Coupling(P, u, v, it, row_res, col_res, float(P.sum()), bool(use_log))


def with_log_domain(config: SinkhornConfig, flag=True):
    return replace(config, log_domain=flag)


def _row_entropy(X):
    sums = X.sum(axis=1)
    out = np.zeros(X.shape[0])
    pos = sums > 0
    Q = X[pos] / sums[pos, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[pos] = -np.where(Q > 0, Q * np.log(Q), 0.0).sum(axis=1)
    return out, ~pos


def coupling_diagnostics(P):
    """Marginals, row/column entropies and the sharpness summaries ``q_max``, ``q_ent``.

    Zero rows get entropy 0 and are flagged in ``zero_rows``.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or np.any(P < 0):
        raise InputError("coupling must be a nonnegative matrix")
    if not np.any(P > 0):
        raise InputError("coupling has no mass")
    row_ent, zero_rows = _row_entropy(P)
    col_ent, zero_cols = _row_entropy(P.T)
    rows = P.sum(axis=1)
    Q = np.zeros_like(P)
    Q[~zero_rows] = P[~zero_rows] / rows[~zero_rows, None]
    q_ent = float(row_ent.mean())
    n_cols = P.shape[1]
    return {
        "row_entropies": row_ent,
        "col_entropies": col_ent,
        "row_marginals": rows,
        "col_marginals": P.sum(axis=0),
        "row_max": Q.max(axis=1),
        "q_max": float(Q.max(axis=1).mean()),
        "q_ent": q_ent,
        "q_ent_normalized": q_ent / np.log(n_cols) if n_cols > 1 else 0.0,
        "total_mass": float(P.sum()),
        "zero_rows": zero_rows,
        "zero_cols": zero_cols,
    }
