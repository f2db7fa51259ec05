"""Adam, the single-source and hub training loops, and finite-difference gradient checks."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .align import AlignConfig, align_losses, cost_matrix, normalize_backward
from .citydata import CityGraph
from .cycle import CycleParams, cycle_loss
from .encoder import EncoderParams, encode, encode_backward, intra_loss
from .errors import InputError, TrainingError
from .hub import HubConfig, HubState, hub_align_city, kmeanspp_prototypes, target_prior
from .sinkhorn import SinkhornConfig, coupling_diagnostics, sinkhorn_solve

CYCLE_STREAM = 1000
HUB_STREAM = 1001


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 300
    seed: int = 0
    d: int = 32
    leak: float = 0.25
    lambda_align: float = 1.0
    lambda_rec: float = 0.5
    eta: float = 0.5
    beta: float = 0.05
    tau: float = 0.1
    ot_weight: float = 1.0
    epsilon: float = 0.15
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    marginal_mode: str = "ones"
    log_domain: bool | None = None
    unbalanced_rho: float | None = None
    cycle_mode: str = "one_sided"
    cycle_normalize: bool | None = None
    K: int = 32
    tau_b: float = 0.5
    eps_b: float = 1e-3
    lambda_c: float = 0.5
    lambda_hub: float = 0.1
    prior_mode: str = "adaptive"
    prior_freeze_epoch: int = 1
    clip_norm: float = 10.0
    diag_every: int = 10

    def __post_init__(self):
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise InputError("optimizer rates must be positive and betas in [0, 1)")
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.diag_every < 1:
            raise InputError("diag_every must be >= 1")
        choices = {"marginal_mode": ("ones", "uniform"), "cycle_mode": ("one_sided", "two_sided"),
                   "prior_mode": ("uniform", "frozen", "adaptive")}
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise InputError(f"{key} must be one of {', '.join(allowed)}, got {getattr(self, key)!r}")

    def sinkhorn_config(self, marginal_mode=None):
        return SinkhornConfig(epsilon=self.epsilon, max_iters=self.sinkhorn_iters, tol=self.sinkhorn_tol,
                              marginal_mode=marginal_mode or self.marginal_mode,
                              unbalanced_rho=self.unbalanced_rho, log_domain=self.log_domain)

    def align_config(self):
        return AlignConfig(eta=self.eta, tau=self.tau, sinkhorn=self.sinkhorn_config(),
                           ot_weight=self.ot_weight)

    def hub_config(self):
        return HubConfig(K=self.K, tau=self.tau, tau_b=self.tau_b, eps_b=self.eps_b,
                         lambda_c=self.lambda_c, lambda_hub=self.lambda_hub, prior_mode=self.prior_mode,
                         sinkhorn=self.sinkhorn_config(marginal_mode="uniform"))

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_overrides(cls, overrides, base=None):
        """Apply ``{key: string value}`` overrides, coercing to each field's type."""
        base = base or cls()
        valid = {f.name: f for f in fields(cls)}
        unknown = [k for k in overrides if k not in valid]
        if unknown:
            raise InputError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(valid)}")
        values = {}
        for key, raw in overrides.items():
            values[key] = _coerce(key, getattr(cls(), key), raw, valid[key].type)
        return replace(base, **values)

    def as_lines(self):
        return [f"{k}={_fmt_value(v)}" for k, v in asdict(self).items()]


def _fmt_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    return v if isinstance(v, str) else repr(v)


def _coerce(key, default, raw, annotation):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    optional = "None" in str(annotation)
    if optional and s.lower() in ("auto", "none", ""):
        return None
    kind = str(annotation)
    try:
        if "bool" in kind:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if "int" in kind:
            return int(s)
        if "float" in kind:
            return float(s)
    except ValueError:
        raise InputError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return s


def parse_config_text(text):
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.t, {k: x.copy() for k, x in self.m.items()},
                         {k: x.copy() for k, x in self.v.items()})


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    for name, g in grads.items():
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise InputError(f"gradient block {name!r} does not match its parameter")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    t = state.t + 1
    new_state = AdamState(t, dict(state.m), dict(state.v))
    new_params = dict(params)
    c1 = 1.0 - config.beta1**t
    c2 = 1.0 - config.beta2**t
    for name, g in grads.items():
        m = config.beta1 * state.m.get(name, 0.0) + (1 - config.beta1) * g
        v = config.beta2 * state.v.get(name, 0.0) + (1 - config.beta2) * g * g
        new_state.m[name] = m
        new_state.v[name] = v
        new_params[name] = params[name] - config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return new_params, new_state


def global_norm(grads):
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_grads(grads, max_norm):
    norm = global_norm(grads)
    if max_norm and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return grads, norm


# --------------------------------------------------------------------------- records

RECORD_COLUMNS = ("epoch", "l_intra_s", "l_intra_t", "l_ot", "l_con", "l_cyc", "r_ent", "l_hub",
                  "total", "grad_norm", "q_max", "q_ent_norm", "b_entropy", "mass_dev")


@dataclass
class TrainRecord:
    mode: str
    rows: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def recompute_total(self, config: TrainConfig):
        """Re-apply the objective weights to the logged components."""
        con_w = config.eta if self.mode == "single" else config.lambda_c
        ot_w = config.ot_weight if self.mode == "single" else 1.0
        hub_w = config.lambda_hub if self.mode == "multi" else 0.0
        out = []
        for r in self.rows:
            align = ot_w * r["l_ot"] + con_w * r["l_con"] + hub_w * r["l_hub"]
            rec = r["l_cyc"] + config.beta * r["r_ent"]
            out.append(r["l_intra_s"] + r["l_intra_t"] + config.lambda_align * align + config.lambda_rec * rec)
        return np.array(out)

    def to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RECORD_COLUMNS)
            for r in self.rows:
                w.writerow(["" if r[c] is None else (str(r[c]) if c == "epoch" else format(r[c], ".17g"))
                            for c in RECORD_COLUMNS])

    def timing_to_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_ms"])
            for r, ms in zip(self.rows, self.wall_ms):
                w.writerow([r["epoch"], f"{ms:.3f}"])


@dataclass
class TrainResult:
    mode: str
    config: TrainConfig
    encoders: list
    cycle: CycleParams
    record: TrainRecord
    embeddings: list
    couplings: list
    hub: HubState | None = None
    hub_mass: list = field(default_factory=list)
    b_history: list = field(default_factory=list)

    def parameter_blocks(self):
        blocks = {}
        for i, enc in enumerate(self.encoders):
            blocks[f"H0_{i}"] = enc.H0
            blocks[f"W_{i}"] = enc.W
        blocks["Wq"] = self.cycle.Wq
        blocks["Wk"] = self.cycle.Wk
        if self.hub is not None:
            blocks["prototypes"] = self.hub.A
            blocks["prior_b"] = self.hub.b
        return blocks


def _rng(seed, stream):
    return np.random.default_rng([int(seed), int(stream)])


def _check_params(params, epoch):
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"epoch {epoch}: parameter block {name!r} became non-finite")


def _diag_due(epoch, config):
    return epoch == 1 or epoch == config.epochs or epoch % config.diag_every == 0


def _enc(params, i, leak):
    return EncoderParams(params[f"H0_{i}"], params[f"W_{i}"], leak)


def _cyc(params, config, normalize):
    return CycleParams(params["Wq"], params["Wk"], beta=config.beta, mode=config.cycle_mode,
                       normalize_by_n2=normalize)


# --------------------------------------------------------------------------- single source

def single_objective(params, source, target, config: TrainConfig, frozen_P=None):
    """Total single-source loss, its components and gradients for every parameter block.

    With ``frozen_P`` the coupling is not recomputed (used by gradient checks).
    """
    enc_s, enc_t = _enc(params, 0, config.leak), _enc(params, 1, config.leak)
    zs, zt = encode(enc_s, source), encode(enc_t, target)
    li_s, gi_s = intra_loss(zs, source.mobility)
    li_t, gi_t = intra_loss(zt, target.mobility)

    C, xs, xt = cost_matrix(zs, zt)
    if frozen_P is None:
        coupling = sinkhorn_solve(C, config.sinkhorn_config())
        P = coupling.P
    else:
        coupling, P = None, np.asarray(frozen_P)
    l_ot, l_con, g_xs, g_xt, skipped = align_losses(xs, xt, C, P, config.eta, config.tau, config.ot_weight)
    ga_s = normalize_backward(xs, np.linalg.norm(zs, axis=1), g_xs)
    ga_t = normalize_backward(xt, np.linalg.norm(zt, axis=1), g_xt)

    normalize = bool(config.cycle_normalize) if config.cycle_normalize is not None else False
    cyc = cycle_loss(zs, zt, _cyc(params, config, normalize))

    la, lr_ = config.lambda_align, config.lambda_rec
    total = li_s + li_t + la * (config.ot_weight * l_ot + config.eta * l_con) + lr_ * cyc.l_rec
    gz_s = gi_s + la * ga_s + lr_ * cyc.grad_zs
    gz_t = gi_t + la * ga_t + lr_ * cyc.grad_zt
    gH_s, gW_s = encode_backward(enc_s, source, gz_s)
    gH_t, gW_t = encode_backward(enc_t, target, gz_t)
    grads = {"H0_0": gH_s, "W_0": gW_s, "H0_1": gH_t, "W_1": gW_t,
             "Wq": lr_ * cyc.grad_Wq, "Wk": lr_ * cyc.grad_Wk}
    terms = {"l_intra_s": li_s, "l_intra_t": li_t, "l_ot": l_ot, "l_con": l_con, "l_cyc": cyc.l_cyc,
             "r_ent": cyc.r_ent, "l_hub": 0.0, "total": total, "skipped_rows": skipped}
    return terms, grads, coupling, (zs, zt)


def _init_single(source, target, config):
    enc_s = EncoderParams.init(source.n, config.d, _rng(config.seed, 0), config.leak)
    enc_t = EncoderParams.init(target.n, config.d, _rng(config.seed, 1), config.leak)
    cyc = CycleParams.init(config.d, _rng(config.seed, CYCLE_STREAM))
    return {"H0_0": enc_s.H0, "W_0": enc_s.W, "H0_1": enc_t.H0, "W_1": enc_t.W,
            "Wq": cyc.Wq, "Wk": cyc.Wk}


def _step(params, grads, state, config, epoch):
    try:
        grads, norm = clip_grads(grads, config.clip_norm)
        params, state = adam_step(params, grads, state, config)
    except TrainingError as exc:
        raise TrainingError(f"epoch {epoch}: {exc}") from exc
    _check_params(params, epoch)
    return params, state, norm


def train_single(source: CityGraph, target: CityGraph, config: TrainConfig | None = None,
                 callback=None) -> TrainResult:
    """Single-source training: intra, OT alignment and cycle terms, one Adam step per epoch."""
    config = config or TrainConfig()
    params = _init_single(source, target, config)
    state = AdamState()
    record = TrainRecord("single")
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        try:
            terms, grads, coupling, _ = single_objective(params, source, target, config)
        except (InputError, ArithmeticError) as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        params, state, norm = _step(params, grads, state, config, epoch)
        row = {c: terms.get(c) for c in RECORD_COLUMNS}
        row.update(epoch=epoch, grad_norm=norm, q_max=None, q_ent_norm=None, b_entropy=None, mass_dev=None)
        if _diag_due(epoch, config):
            diag = coupling_diagnostics(coupling.P)
            row.update(q_max=diag["q_max"], q_ent_norm=diag["q_ent_normalized"])
        record.rows.append(row)
        record.wall_ms.append((time.perf_counter() - t0) * 1e3)
        if callback is not None:
            callback(epoch, row, coupling)

    enc_s, enc_t = _enc(params, 0, config.leak), _enc(params, 1, config.leak)
    zs, zt = encode(enc_s, source), encode(enc_t, target)
    C, _, _ = cost_matrix(zs, zt)
    final = sinkhorn_solve(C, config.sinkhorn_config())
    normalize = bool(config.cycle_normalize) if config.cycle_normalize is not None else False
    return TrainResult("single", config, [enc_s, enc_t], _cyc(params, config, normalize), record,
                       [zs, zt], [final])


def train_intra(graph: CityGraph, config: TrainConfig, stream: int):
    """Intra-only loop for one city with the same seeding as its slot in the joint run."""
    enc = EncoderParams.init(graph.n, config.d, _rng(config.seed, stream), config.leak)
    params = {"H0": enc.H0, "W": enc.W}
    state = AdamState()
    losses = []
    for epoch in range(1, config.epochs + 1):
        e = EncoderParams(params["H0"], params["W"], config.leak)
        loss, gz = intra_loss(encode(e, graph), graph.mobility)
        gH, gW = encode_backward(e, graph, gz)
        params, state, _ = _step(params, {"H0": gH, "W": gW}, state, config, epoch)
        losses.append(loss)
    return np.array(losses), EncoderParams(params["H0"], params["W"], config.leak)


# --------------------------------------------------------------------------- multi source

def _entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def multi_objective(params, cities, hub: HubState, config: TrainConfig, hub_cfg: HubConfig):
    """Hub objective over all cities (target last). ``hub.b`` must already be refreshed."""
    n_c = len(cities)
    zs = [encode(_enc(params, i, config.leak), g) for i, g in enumerate(cities)]
    hub.A = params["prototypes"]
    cyc = _cyc(params, config, True if config.cycle_normalize is None else bool(config.cycle_normalize))
    la, lr_ = config.lambda_align, config.lambda_rec
    w = 1.0 / n_c

    grads = {"prototypes": np.zeros_like(params["prototypes"]),
             "Wq": np.zeros_like(params["Wq"]), "Wk": np.zeros_like(params["Wk"])}
    intra, results = [], []
    for i, (g, z) in enumerate(zip(cities, zs)):
        li, gi = intra_loss(z, g.mobility)
        r = hub_align_city(z, hub, hub_cfg, cyc)
        intra.append(li)
        results.append(r)
        gz = gi + la * w * r.grad_z + lr_ * w * r.grad_z_rec
        gH, gW = encode_backward(_enc(params, i, config.leak), g, gz)
        grads[f"H0_{i}"] = gH
        grads[f"W_{i}"] = gW
        grads["prototypes"] += la * w * r.grad_A + lr_ * w * r.grad_A_rec
        grads["Wq"] += lr_ * w * r.grad_Wq
        grads["Wk"] += lr_ * w * r.grad_Wk

    mean = lambda attr: float(np.mean([getattr(r, attr) for r in results]))
    terms = {"l_intra_s": float(sum(intra[:-1])), "l_intra_t": float(intra[-1]),
             "l_ot": mean("l_ot"), "l_con": mean("l_con"), "l_hub": mean("l_hub"),
             "l_cyc": mean("l_cyc"), "r_ent": mean("r_ent")}
    terms["total"] = (sum(intra) + la * (terms["l_ot"] + hub_cfg.lambda_c * terms["l_con"]
                                         + hub_cfg.lambda_hub * terms["l_hub"])
                      + lr_ * (terms["l_cyc"] + config.beta * terms["r_ent"]))
    return terms, grads, results, zs


def _init_multi(cities, config):
    params = {}
    zs = []
    for i, g in enumerate(cities):
        enc = EncoderParams.init(g.n, config.d, _rng(config.seed, i), config.leak)
        params[f"H0_{i}"], params[f"W_{i}"] = enc.H0, enc.W
        zs.append(encode(enc, g))
    cyc = CycleParams.init(config.d, _rng(config.seed, CYCLE_STREAM))
    params["Wq"], params["Wk"] = cyc.Wq, cyc.Wk
    pooled = np.vstack([z / np.linalg.norm(z, axis=1, keepdims=True) for z in zs])
    params["prototypes"] = kmeanspp_prototypes(pooled, config.K, _rng(config.seed, HUB_STREAM))
    return params


def train_multi(sources, target: CityGraph, config: TrainConfig | None = None,
                callback=None) -> TrainResult:
    """Multi-source training through a shared prototype hub; the target is aligned to the hub too."""
    config = config or TrainConfig()
    sources = list(sources)
    if not sources:
        raise InputError("multi-source training needs at least one source city")
    cities = sources + [target]
    hub_cfg = config.hub_config()
    params = _init_multi(cities, config)
    hub = HubState(params["prototypes"], np.full(config.K, 1.0 / config.K), config.prior_mode,
                   config.tau_b, config.eps_b)
    state = AdamState()
    record = TrainRecord("multi")
    hub_mass, b_hist = [], []
    t_idx = len(cities) - 1
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        zt = encode(_enc(params, t_idx, config.leak), target)
        hub.A = params["prototypes"]
        b = hub.refresh_prior(zt, epoch, config.prior_freeze_epoch).copy()
        try:
            terms, grads, results, _ = multi_objective(params, cities, hub, config, hub_cfg)
        except (InputError, ArithmeticError) as exc:
            raise type(exc)(f"epoch {epoch}: {exc}") from exc
        params, state, norm = _step(params, grads, state, config, epoch)
        row = {c: terms.get(c) for c in RECORD_COLUMNS}
        row.update(epoch=epoch, grad_norm=norm, q_max=None, q_ent_norm=None,
                   b_entropy=_entropy(b),
                   mass_dev=max(abs(r.coupling.total_mass - 1.0) for r in results))
        if _diag_due(epoch, config):
            diag = coupling_diagnostics(results[-1].coupling.P)
            row.update(q_max=diag["q_max"], q_ent_norm=diag["q_ent_normalized"])
        record.rows.append(row)
        record.wall_ms.append((time.perf_counter() - t0) * 1e3)
        hub_mass.append(results[-1].coupling.P.sum(axis=0))
        b_hist.append(b)
        if callback is not None:
            callback(epoch, row, results)

    encs = [_enc(params, i, config.leak) for i in range(len(cities))]
    zs = [encode(e, g) for e, g in zip(encs, cities)]
    hub.A = params["prototypes"]
    hub.refresh_prior(zs[-1], config.epochs + 1, config.prior_freeze_epoch)
    cyc = _cyc(params, config, True if config.cycle_normalize is None else bool(config.cycle_normalize))
    finals = [hub_align_city(z, hub, hub_cfg, cyc).coupling for z in zs]
    return TrainResult("multi", config, encs, cyc, record, zs, finals, hub, hub_mass, b_hist)


# --------------------------------------------------------------------------- gradient checks

GRADCHECK_COMPONENTS = ("intra", "encoder", "align", "contrastive", "cycle", "cycle_two_sided", "hub", "train")
FD_STEP = 1e-5


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _check_blocks(loss_and_grads, arrays):
    """``loss_and_grads()`` returns ``(loss, {name: grad})`` evaluated on the live ``arrays``."""
    _, analytic = loss_and_grads()
    analytic = {k: v.copy() for k, v in analytic.items()}
    return {name: rel_error(analytic[name], numeric_grad(lambda: loss_and_grads()[0], arrays[name]))
            for name in arrays}


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _random_city(rng, n, city_id):
    from .citydata import CityGraph

    adj = (rng.random((n, n)) < 0.4).astype(float)
    adj = np.triu(adj, 1)
    adj = adj + adj.T
    M = rng.random((n, n))
    M /= M.sum(axis=1, keepdims=True)
    return CityGraph(city_id, adj, M)


def _gc_intra(rng, zero):
    z = np.zeros((8, 4)) if zero else rng.normal(size=(8, 4))
    M = rng.random((8, 8))
    M /= M.sum(axis=1, keepdims=True)
    return _check_blocks(lambda: (lambda lg: (lg[0], {"z": lg[1]}))(intra_loss(z, M)), {"z": z})


def _gc_encoder(rng, zero):
    g = _random_city(rng, 6, "gc")
    H0 = np.zeros((6, 3)) if zero else rng.normal(size=(6, 3))
    W = rng.normal(size=(3, 3))
    G = rng.normal(size=(6, 3))

    def f():
        p = EncoderParams(H0, W, 0.25)
        gH, gW = encode_backward(p, g, G)
        return float((encode(p, g) * G).sum()), {"H0": gH, "W": gW}
    return _check_blocks(f, {"H0": H0, "W": W})


def _frozen_align_inputs(rng, zero, n_s=7, n_t=5, d=3):
    if zero:
        zs = np.ones((n_s, d))
        zt = np.ones((n_t, d))
    else:
        zs = rng.normal(size=(n_s, d))
        zt = rng.normal(size=(n_t, d))
    C, _, _ = cost_matrix(zs, zt)
    P = sinkhorn_solve(C, SinkhornConfig(epsilon=0.15, max_iters=200)).P
    return zs, zt, P


def _gc_align(rng, zero):
    zs, zt, P = _frozen_align_inputs(rng, zero)
    eta, tau = 0.5, 0.1

    def f():
        C, xs, xt = cost_matrix(zs, zt)
        l_ot, l_con, gxs, gxt, _ = align_losses(xs, xt, C, P, eta, tau)
        return l_ot + eta * l_con, {
            "zs": normalize_backward(xs, np.linalg.norm(zs, axis=1), gxs),
            "zt": normalize_backward(xt, np.linalg.norm(zt, axis=1), gxt)}
    return _check_blocks(f, {"zs": zs, "zt": zt})


def _gc_contrastive(rng, zero):
    from .align import contrastive_loss

    xs = np.ones((7, 3)) / np.sqrt(3) if zero else _unit_rows(rng, 7, 3)
    xt = np.ones((5, 3)) / np.sqrt(3) if zero else _unit_rows(rng, 5, 3)
    P = rng.random((7, 5))

    def f():
        loss, gs, gt = contrastive_loss(P, xs, xt, 0.1)
        return loss, {"xs": gs, "xt": gt}
    return _check_blocks(f, {"xs": xs, "xt": xt})


def _gc_cycle(rng, zero, mode="one_sided", normalize=False):
    Zs = np.zeros((5, 3)) if zero else rng.normal(size=(5, 3))
    Zt = np.zeros((4, 3)) if zero else rng.normal(size=(4, 3))
    Wq = rng.normal(size=(3, 3))
    Wk = rng.normal(size=(3, 3))

    def f():
        r = cycle_loss(Zs, Zt, CycleParams(Wq, Wk, beta=0.05, mode=mode, normalize_by_n2=normalize))
        return r.l_rec, {"Zs": r.grad_zs, "Zt": r.grad_zt, "Wq": r.grad_Wq, "Wk": r.grad_Wk}
    return _check_blocks(f, {"Zs": Zs, "Zt": Zt, "Wq": Wq, "Wk": Wk})


def _gc_hub(rng, zero):
    from .align import contrastive_loss, cost_backward, row_normalize, sphere_cost
    from .hub import kl_to_uniform

    n, K, d = 6, 4, 3
    z = np.ones((n, d)) if zero else rng.normal(size=(n, d))
    A = rng.normal(size=(K, d))
    Wq = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    Wk = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    cfg = HubConfig(K=K, tau=0.1)
    hub = HubState(A, np.full(K, 1.0 / K))
    cyc = CycleParams(Wq, Wk, beta=0.05, normalize_by_n2=True)
    base = hub_align_city(z, hub, cfg, cyc)
    Pi, Q = base.coupling.P.copy(), base.Q.copy()

    def f():
        x, zn = row_normalize(z)
        xa, an = row_normalize(A)
        C = sphere_cost(x, xa)
        l_ot = float((Pi * C).sum() / min(n, K))
        gx, ga = cost_backward(x, xa, C, Pi / min(n, K))
        l_con, cx, ca = contrastive_loss(Q, x, xa, cfg.tau)
        r = cycle_loss(z, A, CycleParams(Wq, Wk, beta=0.05, normalize_by_n2=True))
        loss = l_ot + cfg.lambda_c * l_con + cfg.lambda_hub * kl_to_uniform(Pi.sum(axis=0)) + r.l_rec
        return loss, {
            "z": normalize_backward(x, zn, gx + cfg.lambda_c * cx) + r.grad_zs,
            "prototypes": normalize_backward(xa, an, ga + cfg.lambda_c * ca) + r.grad_zt,
            "Wq": r.grad_Wq, "Wk": r.grad_Wk}
    errs = _check_blocks(f, {"z": z, "prototypes": A, "Wq": Wq, "Wk": Wk})
    # the library path must agree with the frozen-coupling reference
    _, ref = f()
    lib = {"z": base.grad_z + base.grad_z_rec, "prototypes": base.grad_A + base.grad_A_rec,
           "Wq": base.grad_Wq, "Wk": base.grad_Wk}
    errs["library_vs_reference"] = max(rel_error(lib[k], ref[k]) for k in ref)
    return errs


def _gc_train(rng, zero):
    src, tgt = _random_city(rng, 5, "s"), _random_city(rng, 5, "t")
    config = TrainConfig(d=3, clip_norm=0.0)
    params = _init_single(src, tgt, config)
    for k in params:
        params[k] = params[k] + (0.0 if zero else 0.3 * rng.normal(size=params[k].shape))
    if not zero:
        params["H0_0"] = rng.normal(size=params["H0_0"].shape)
        params["H0_1"] = rng.normal(size=params["H0_1"].shape)
    _, _, coupling, _ = single_objective(params, src, tgt, config)
    P = coupling.P.copy()

    def f():
        terms, grads, _, _ = single_objective(params, src, tgt, config, frozen_P=P)
        return terms["total"], grads
    return _check_blocks(f, params)


def gradcheck(component="all", seed=0, zero=False):
    """Max relative error of each analytic gradient block against central differences.

    Couplings are frozen at their base value, matching the detached-coupling
    convention used in training. Returns ``{component: {block: error}}``.
    """
    runners = {
        "intra": _gc_intra, "encoder": _gc_encoder, "align": _gc_align, "contrastive": _gc_contrastive,
        "cycle": lambda r, z: _gc_cycle(r, z, "one_sided"),
        "cycle_two_sided": lambda r, z: _gc_cycle(r, z, "two_sided", normalize=True),
        "hub": _gc_hub, "train": _gc_train,
    }
    if component == "all":
        names = GRADCHECK_COMPONENTS
    elif component in runners:
        names = (component,)
    else:
        raise InputError(f"unknown gradcheck component {component!r}; choose from all, {', '.join(runners)}")
    rng = np.random.default_rng(seed)
    with np.errstate(divide="ignore", invalid="ignore"):
        return {name: runners[name](rng, zero) for name in names}


def gradcheck_failures(report, threshold=1e-3):
    return [f"{comp}.{block}" for comp, blocks in report.items() for block, err in blocks.items()
            if not err < threshold]
