"""City graphs, mobility matrices, CSV ingestion and synthetic twin cities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArtifactNotFound, InputError, ParseError

UNMATCHED = -1
N_CLUSTERS = 4


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TripTable:
    """Origin-destination trip counts as parallel integer arrays."""

    origin: np.ndarray
    dest: np.ndarray
    count: np.ndarray

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            empty = np.zeros(0, dtype=np.int64)
            return cls(empty, empty.copy(), empty.copy())
        o, d, c = zip(*records)
        return cls(np.asarray(o, dtype=np.int64), np.asarray(d, dtype=np.int64),
                   np.asarray(c, dtype=np.int64))

    def __len__(self):
        return len(self.count)

    def records(self):
        return list(zip(self.origin.tolist(), self.dest.tolist(), self.count.tolist()))


@dataclass(frozen=True)
class CityGraph:
    city_id: str
    adjacency: np.ndarray
    mobility: np.ndarray
    labels: dict = field(default_factory=dict)
    trips: TripTable | None = None

    def __post_init__(self):
        adj = _frozen(self.adjacency)
        mob = _frozen(self.mobility)
        n = adj.shape[0]
        if adj.shape != (n, n) or mob.shape != (n, n) or n < 1:
            raise InputError(f"city {self.city_id!r}: adjacency {adj.shape} and mobility "
                             f"{mob.shape} must be matching square matrices")
        if not np.array_equal(adj, adj.T) or np.any(np.diag(adj) != 0):
            raise InputError(f"city {self.city_id!r}: adjacency must be symmetric with zero diagonal")
        if not np.all(np.isin(adj, (0.0, 1.0))):
            raise InputError(f"city {self.city_id!r}: adjacency must be 0/1")
        if np.any(mob < 0) or np.any(mob > 1) or np.max(np.abs(mob.sum(axis=1) - 1.0)) > 1e-9:
            raise InputError(f"city {self.city_id!r}: mobility must be row-stochastic")
        labels = {}
        for task, y in self.labels.items():
            y = _frozen(y)
            if y.shape != (n,):
                raise InputError(f"city {self.city_id!r}: label {task!r} has shape {y.shape}, expected ({n},)")
            labels[task] = y
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "mobility", mob)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class TwinCityTruth:
    source: CityGraph
    target: CityGraph
    true_match: np.ndarray
    source_latent: np.ndarray
    target_latent: np.ndarray

    @property
    def matched(self):
        return self.true_match != UNMATCHED


def build_mobility(trips: TripTable, n: int) -> np.ndarray:
    """Row-normalize trip counts into an ``n x n`` transition matrix.

    Regions without outgoing trips get the uniform row ``1/n`` so the
    result stays row-stochastic.
    """
    if n < 1:
        raise InputError(f"region count must be positive, got {n}")
    o, d, c = trips.origin, trips.dest, trips.count
    bad = (o < 0) | (o >= n) | (d < 0) | (d >= n)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise InputError(f"trip {k} ({o[k]}->{d[k]}) has a region index outside [0, {n})")
    if np.any(c < 0):
        raise InputError("trip counts must be nonnegative")
    counts = np.zeros((n, n))
    np.add.at(counts, (o, d), c)
    totals = counts.sum(axis=1)
    M = np.full((n, n), 1.0 / n)
    has = totals > 0
    M[has] = counts[has] / totals[has, None]
    return M


def _read_csv(path: Path, expected_header):
    if not path.exists():
        raise ArtifactNotFound(f"missing required file {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(path, 1, "empty file, expected a header")
    header = [h.strip() for h in rows[0]]
    if expected_header is not None and header != expected_header:
        raise ParseError(path, 1, f"header {header} != expected {expected_header}")
    body = [(lineno, r) for lineno, r in enumerate(rows[1:], start=2) if any(x.strip() for x in r)]
    return header, body


def _ints(path, lineno, row, width):
    if len(row) != width:
        raise ParseError(path, lineno, f"expected {width} fields, got {len(row)}")
    try:
        return [int(x.strip(), 10) for x in row]
    except ValueError:
        raise ParseError(path, lineno, f"non-integer field in {row}") from None


def load_city(dir_path, city_id=None) -> CityGraph:
    """Load a city directory holding ``edges.csv``, ``trips.csv`` and optional ``labels.csv``."""
    root = Path(dir_path)
    if not root.is_dir():
        raise ArtifactNotFound(f"city directory {root} does not exist")
    edges_path, trips_path, labels_path = root / "edges.csv", root / "trips.csv", root / "labels.csv"
    _, edge_rows = _read_csv(edges_path, ["i", "j"])
    _, trip_rows = _read_csv(trips_path, ["origin", "dest", "count"])

    edges = [(ln, *_ints(edges_path, ln, r, 2)) for ln, r in edge_rows]
    trips = [(ln, *_ints(trips_path, ln, r, 3)) for ln, r in trip_rows]

    label_cols = {}
    n_labels = None
    if labels_path.exists():
        header, label_rows = _read_csv(labels_path, None)
        if not header or header[0] != "region_id":
            raise ParseError(labels_path, 1, "first column must be region_id")
        tasks = header[1:]
        values = {}
        for ln, r in label_rows:
            if len(r) != len(header):
                raise ParseError(labels_path, ln, f"expected {len(header)} fields, got {len(r)}")
            try:
                rid = int(r[0].strip(), 10)
                vals = [float(x) for x in r[1:]]
            except ValueError:
                raise ParseError(labels_path, ln, f"bad value in {r}") from None
            if rid in values:
                raise ParseError(labels_path, ln, f"duplicate region_id {rid}")
            values[rid] = vals
        n_labels = len(values)
        if sorted(values) != list(range(n_labels)):
            raise ParseError(labels_path, 2, "region_id values must be exactly 0..n-1")
        for t_idx, task in enumerate(tasks):
            label_cols[task] = np.array([values[i][t_idx] for i in range(n_labels)])

    max_idx = max([max(i, j) for _, i, j in edges] + [max(o, d) for _, o, d, _ in trips] + [-1])
    n = n_labels if n_labels is not None else max_idx + 1
    if n < 1:
        raise ParseError(edges_path, 1, "cannot infer a positive region count")

    adj = np.zeros((n, n))
    for ln, i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise ParseError(edges_path, ln, f"edge ({i},{j}) outside [0, {n})")
        if i == j:
            raise ParseError(edges_path, ln, f"self-loop on region {i}")
        adj[i, j] = adj[j, i] = 1.0
    for ln, o, d, c in trips:
        if not (0 <= o < n and 0 <= d < n):
            raise ParseError(trips_path, ln, f"trip ({o}->{d}) outside [0, {n})")
        if c < 0:
            raise ParseError(trips_path, ln, f"negative count {c}")

    table = TripTable.from_records([(o, d, c) for _, o, d, c in trips])
    return CityGraph(city_id or root.name, adj, build_mobility(table, n), label_cols, table)


def write_city(city: CityGraph, dir_path) -> None:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    iu, ju = np.nonzero(np.triu(city.adjacency, k=1))
    with (root / "edges.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"])
        w.writerows(zip(iu.tolist(), ju.tolist()))
    if city.trips is None:
        raise InputError(f"city {city.city_id!r} has no trip table to write")
    with (root / "trips.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "dest", "count"])
        w.writerows(city.trips.records())
    if city.labels:
        tasks = sorted(city.labels)
        with (root / "labels.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["region_id", *tasks])
            for i in range(city.n):
                w.writerow([i, *(repr(float(city.labels[t][i])) for t in tasks)])


def _knn(X, k):
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k], d2


def _synth_city(city_id, X, label_weights, label_noise, rng, trip_scale=1000):
    n = X.shape[0]
    k = min(max(3, n // 10), n - 1)
    nbrs, d2 = _knn(X, k)
    adj = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    adj[rows, nbrs.ravel()] = 1.0
    adj = np.maximum(adj, adj.T)

    sim = -d2 / X.shape[1]
    records = []
    for i in range(n):
        s = sim[i, nbrs[i]]
        w = np.exp(s - s.max())
        w /= w.sum()
        counts = np.maximum(1, np.rint(trip_scale * w)).astype(np.int64)
        records.extend((i, int(j), int(c)) for j, c in zip(nbrs[i], counts))
    trips = TripTable.from_records(records)

    labels = {}
    for task, (offset, wvec) in label_weights.items():
        labels[task] = offset + X @ wvec + label_noise * rng.normal(size=n)
    return CityGraph(city_id, adj, build_mobility(trips, n), labels, trips)


LABEL_TASKS = ("co2", "gdp", "population")


def _latent_world(rng, n, d_latent, center_scale):
    centers = rng.normal(0.0, center_scale, size=(N_CLUSTERS, d_latent))
    assign = rng.integers(0, N_CLUSTERS, size=n)
    latent = centers[assign] + rng.normal(size=(n, d_latent))
    label_weights = {t: (100.0, rng.normal(0.0, 5.0, size=d_latent)) for t in LABEL_TASKS}
    return centers, latent, label_weights


def gen_twin_cities(seed, n_s, n_t, d_latent=8, noise_sigma=0.0, drop_frac=0.0,
                    label_noise=0.5, center_scale=3.0) -> TwinCityTruth:
    """Generate a source/target pair sharing latent region semantics.

    Latent vectors come from a mixture of four spherical Gaussian clusters.
    The source takes the first ``n_s`` latents; the target takes a random
    permutation of ``n_t`` of them plus Gaussian noise of std
    ``noise_sigma``. Both cities derive mobility and adjacency from
    k-nearest latent neighbours and labels from the same linear
    functionals of the latents.

    ``drop_frac`` of the smaller side's matched pairs get a freshly drawn
    target latent, so those regions have no counterpart and are marked
    ``UNMATCHED`` in ``true_match``.
    """
    if n_s < 4 or n_t < 4:
        raise InputError(f"need at least 4 regions per city, got n_s={n_s}, n_t={n_t}")
    if not 0 <= drop_frac < 1:
        raise InputError(f"drop_frac must be in [0, 1), got {drop_frac}")
    if noise_sigma < 0 or d_latent < 2:
        raise InputError("noise_sigma must be >= 0 and d_latent >= 2")

    rng = np.random.default_rng(seed)
    n_max = max(n_s, n_t)
    centers, latent, label_weights = _latent_world(rng, n_max, d_latent, center_scale)

    perm = rng.permutation(n_max)[:n_t]
    Xs = latent[:n_s]
    Xt = latent[perm] + noise_sigma * rng.normal(size=(n_t, d_latent))

    true_match = np.full(n_s, UNMATCHED, dtype=np.int64)
    for j, src in enumerate(perm):
        if src < n_s:
            true_match[src] = j
    n_drop = int(np.floor(drop_frac * min(n_s, n_t)))
    if n_drop:
        matched_src = np.flatnonzero(true_match != UNMATCHED)
        dropped = rng.choice(matched_src, size=n_drop, replace=False)
        for src in np.sort(dropped):
            j = true_match[src]
            Xt[j] = centers[rng.integers(N_CLUSTERS)] + rng.normal(size=d_latent)
            true_match[src] = UNMATCHED

    source = _synth_city("source", Xs, label_weights, label_noise, rng)
    target = _synth_city("target", Xt, label_weights, label_noise, rng)
    return TwinCityTruth(source, target, true_match, _frozen(Xs), _frozen(Xt))


def write_truth(truth: TwinCityTruth, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "target_id"])
        w.writerows((i, int(j)) for i, j in enumerate(truth.true_match))


def read_truth(path) -> np.ndarray:
    path = Path(path)
    _, rows = _read_csv(path, ["source_id", "target_id"])
    parsed = [_ints(path, ln, r, 2) for ln, r in rows]
    out = np.full(len(parsed), UNMATCHED, dtype=np.int64)
    for (ln, _), (i, j) in zip(rows, parsed):
        if not 0 <= i < len(parsed):
            raise ParseError(path, ln, f"source_id {i} out of range")
        out[i] = j
    return out



def gen_city_family(seed, n, n_sources=2, d_latent=8, noise_sigma=0.0, label_noise=0.5,
                    center_scale=3.0):
    """Several source cities and one target built from the same latent regions.

    The target holds the latents in order; source ``m`` holds a random
    permutation of them plus noise. Returns ``(sources, target, matches)``
    with ``matches[m][i]`` the target region matching source ``m``'s region ``i``.
    """
    if n < 4 or n_sources < 1:
        raise InputError(f"need n >= 4 and at least one source, got n={n}, n_sources={n_sources}")
    rng = np.random.default_rng(seed)
    _, latent, label_weights = _latent_world(rng, n, d_latent, center_scale)
    sources, matches = [], []
    for m in range(n_sources):
        perm = rng.permutation(n)
        X = latent[perm] + noise_sigma * rng.normal(size=(n, d_latent))
        sources.append(_synth_city(f"source{m}", X, label_weights, label_noise, rng))
        matches.append(perm.astype(np.int64))
    target = _synth_city("target", latent, label_weights, label_noise, rng)
    return sources, target, matches
