"""Single-layer graph propagation encoder and the intra-city mobility loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .citydata import CityGraph
from .errors import InputError

DEFAULT_LEAK = 0.25


@dataclass
class EncoderParams:
    H0: np.ndarray
    W: np.ndarray
    leak: float = DEFAULT_LEAK

    @property
    def n(self):
        return self.H0.shape[0]

    @property
    def d(self):
        return self.H0.shape[1]

    @classmethod
    def init(cls, n, d, rng, leak=DEFAULT_LEAK):
        """Gaussian table (std 0.1) and near-identity mixing matrix."""
        if d < 2:
            raise InputError(f"embedding dimension must be >= 2, got {d}")
        H0 = rng.normal(0.0, 0.1, size=(n, d))
        W = np.eye(d) + rng.normal(0.0, 0.01, size=(d, d))
        return cls(H0, W, leak)

    def copy(self):
        return EncoderParams(self.H0.copy(), self.W.copy(), self.leak)


def normalized_adjacency(adjacency):
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2``."""
    A = np.asarray(adjacency, dtype=float) + np.eye(adjacency.shape[0])
    dinv = 1.0 / np.sqrt(A.sum(axis=1))
    return A * dinv[:, None] * dinv[None, :]


def _check(params, graph):
    if params.H0.shape[0] != graph.n:
        raise InputError(f"encoder table has {params.H0.shape[0]} rows but city "
                         f"{graph.city_id!r} has {graph.n} regions")
    if params.W.shape != (params.d, params.d):
        raise InputError(f"mixing matrix shape {params.W.shape} != ({params.d}, {params.d})")


def _preact(params, graph):
    AH = normalized_adjacency(graph.adjacency) @ params.H0
    return AH, AH @ params.W


def encode(params: EncoderParams, graph: CityGraph) -> np.ndarray:
    _check(params, graph)
    _, X = _preact(params, graph)
    return np.where(X > 0, X, params.leak * X)


def encode_backward(params: EncoderParams, graph: CityGraph, upstream):
    """Return ``(grad_H0, grad_W)`` given the gradient w.r.t. the embeddings."""
    _check(params, graph)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != params.H0.shape:
        raise InputError(f"upstream gradient shape {upstream.shape} != {params.H0.shape}")
    A_hat = normalized_adjacency(graph.adjacency)
    AH = A_hat @ params.H0
    X = AH @ params.W
    GX = upstream * np.where(X > 0, 1.0, params.leak)
    grad_W = AH.T @ GX
    grad_H0 = A_hat.T @ (GX @ params.W.T)
    return grad_H0, grad_W


def _log_softmax(S):
    m = S.max(axis=1, keepdims=True)
    return S - m - np.log(np.exp(S - m).sum(axis=1, keepdims=True))


def intra_loss(z, M):
    """Mobility-weighted NLL of the inner-product softmax, with its gradient.

    loss = -sum_ij M_ij log softmax_k(z_i . z_k)_j
    """
    z = np.asarray(z, dtype=float)
    M = np.asarray(M, dtype=float)
    n = z.shape[0]
    if M.shape != (n, n):
        raise InputError(f"mobility shape {M.shape} does not match {n} embeddings")
    if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-9:
        raise InputError("mobility matrix must be row-stochastic")
    logp = _log_softmax(z @ z.T)
    loss = float(-(M * logp).sum())
    G = np.exp(logp) - M
    grad = G @ z + G.T @ z
    return loss, grad
