"""Cross-attention cycle reconstruction with an attention-entropy penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

DELTA = 1e-8


@dataclass
class CycleParams:
    Wq: np.ndarray
    Wk: np.ndarray
    beta: float = 0.05
    delta: float = DELTA
    mode: str = "one_sided"
    normalize_by_n2: bool = False

    def __post_init__(self):
        if self.mode not in ("one_sided", "two_sided"):
            raise InputError(f"cycle mode must be one_sided or two_sided, got {self.mode!r}")
        if self.beta < 0:
            raise InputError(f"beta must be nonnegative, got {self.beta}")

    @classmethod
    def init(cls, d, rng, **kw):
        Wq = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
        Wk = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
        return cls(Wq, Wk, **kw)

    def copy(self):
        return CycleParams(self.Wq.copy(), self.Wk.copy(), self.beta, self.delta, self.mode,
                           self.normalize_by_n2)


@dataclass
class CycleResult:
    l_cyc: float
    r_ent: float
    l_rec: float
    grad_zs: np.ndarray
    grad_zt: np.ndarray
    grad_Wq: np.ndarray
    grad_Wk: np.ndarray
    A_st: np.ndarray
    A_ts: np.ndarray


def _softmax(X):
    E = np.exp(X - X.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def _softmax_backward(A, dA):
    return A * (dA - (dA * A).sum(axis=1, keepdims=True))


def cross_attention(Zq, Zk, params: CycleParams):
    """Row softmax of ``(Zq Wq^T)(Zk Wk^T)^T / sqrt(d)``."""
    Zq = np.asarray(Zq, dtype=float)
    Zk = np.asarray(Zk, dtype=float)
    if Zq.ndim != 2 or Zk.ndim != 2 or Zq.shape[1] != Zk.shape[1]:
        raise InputError(f"attention inputs {Zq.shape}, {Zk.shape} must share a dimension")
    d = Zq.shape[1]
    if params.Wq.shape != (d, d) or params.Wk.shape != (d, d):
        raise InputError(f"projection matrices must be ({d}, {d})")
    return _softmax((Zq @ params.Wq.T) @ (Zk @ params.Wk.T).T / np.sqrt(d))


def cycle_loss(Zs, Zt, params: CycleParams) -> CycleResult:
    """Cycle loss ``|A_st A_ts - I|_F^2`` plus ``beta`` times the entropy of ``A_st``.

    ``two_sided`` mode adds ``|A_ts A_st - I|_F^2``. With ``normalize_by_n2``
    each cycle term is divided by the squared size of its identity.
    """
    Zs = np.asarray(Zs, dtype=float)
    Zt = np.asarray(Zt, dtype=float)
    n_s, n_t = Zs.shape[0], Zt.shape[0]
    d = Zs.shape[1]
    A_st = cross_attention(Zs, Zt, params)
    A_ts = cross_attention(Zt, Zs, params)

    R = A_st @ A_ts - np.eye(n_s)
    c_s = 1.0 / n_s**2 if params.normalize_by_n2 else 1.0
    l_cyc = c_s * float((R * R).sum())
    dA_st = 2 * c_s * R @ A_ts.T
    dA_ts = 2 * c_s * A_st.T @ R
    if params.mode == "two_sided":
        R2 = A_ts @ A_st - np.eye(n_t)
        c_t = 1.0 / n_t**2 if params.normalize_by_n2 else 1.0
        l_cyc += c_t * float((R2 * R2).sum())
        dA_ts += 2 * c_t * R2 @ A_st.T
        dA_st += 2 * c_t * A_ts.T @ R2

    logA = np.log(A_st + params.delta)
    r_ent = float(-(A_st * logA).sum() / n_s)
    dA_st += -params.beta / n_s * (logA + A_st / (A_st + params.delta))

    # logits: L1 = Zs Mx Zt^T / sqrt(d), L2 = Zt Mx Zs^T / sqrt(d), Mx = Wq^T Wk
    Mx = params.Wq.T @ params.Wk
    dL1 = _softmax_backward(A_st, dA_st) / np.sqrt(d)
    dL2 = _softmax_backward(A_ts, dA_ts) / np.sqrt(d)
    grad_zs = dL1 @ Zt @ Mx.T + dL2.T @ Zt @ Mx
    grad_zt = dL1.T @ Zs @ Mx + dL2 @ Zs @ Mx.T
    dMx = Zs.T @ dL1 @ Zt + Zt.T @ dL2 @ Zs
    grad_Wq = params.Wk @ dMx.T
    grad_Wk = params.Wq @ dMx
    return CycleResult(l_cyc, r_ent, l_cyc + params.beta * r_ent, grad_zs, grad_zt,
                       grad_Wq, grad_Wk, A_st, A_ts)
