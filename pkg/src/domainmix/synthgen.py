"""Three-domain toy benchmark: labeled synthetic A, unlabeled real B, unseen target C.

Each identity is an anchor point on a sphere. A sample of that identity is the
domain's affine map applied to the anchor, plus a per-sample nuisance ("style")
component living in a domain-specific subspace, plus isotropic noise. B and C
share most of their affine map and style subspace, the way two real-world
camera networks resemble each other more than either resembles rendered data.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .diffcore import make_rng
from .errors import ConfigError

__all__ = [
    "Domain",
    "Sample",
    "SampleSet",
    "BenchmarkSpec",
    "Benchmark",
    "generate",
    "generate_holdout",
    "domain_gap_score",
    "dump_csv",
    "load_csv",
]


class Domain(enum.IntEnum):
    SynthA = 0
    RealB = 1
    TargetC = 2


@dataclass(frozen=True)
class Sample:
    id: int
    input: np.ndarray
    domain: Domain
    identity: int | None


@dataclass(frozen=True)
class SampleSet:
    """Column-oriented block of samples from one domain.

    ``identities`` is ``None`` for the unlabeled real domain, so nothing that
    only sees a ``SampleSet`` for B can learn its ground truth.
    """

    ids: np.ndarray
    X: np.ndarray
    domain: Domain
    identities: np.ndarray | None

    def __len__(self):
        return self.ids.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for k in range(len(self)):
            ident = None if self.identities is None else int(self.identities[k])
            yield Sample(int(self.ids[k]), self.X[k], self.domain, ident)


@dataclass(frozen=True)
class BenchmarkSpec:
    seed: int = 0
    d_in: int = 16
    n_ids: tuple = (32, 24, 16)  # identities in A, B, C
    k_per_id: tuple = (8, 8, 8)  # samples per identity in A, B, C
    sigma: float = 0.15
    anchor_radius: float = 3.0
    offset_norm: float = 2.0
    scale_spread: float = 0.3  # singular values of each domain map in [1-s, 1+s]
    style_dim: int = 4
    style_ratio: float = 20.0 / 3.0  # extra noise along the style basis, in units of sigma
    real_gap: float = 0.15  # how far C's map and style drift from B's
    query_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "n_ids", tuple(int(v) for v in self.n_ids))
        object.__setattr__(self, "k_per_id", tuple(int(v) for v in self.k_per_id))
        if len(self.n_ids) != 3 or len(self.k_per_id) != 3:
            raise ConfigError("n_ids and k_per_id need one entry per domain (A, B, C)")
        if min(self.n_ids) < 1 or min(self.k_per_id) < 1:
            raise ConfigError("every domain needs at least one identity and one sample each")
        if not self.sigma >= 0:
            raise ConfigError("sigma must be non-negative")
        if not self.style_ratio >= 0:
            raise ConfigError("style_ratio must be non-negative")
        if not 0 < self.query_fraction < 1:
            raise ConfigError("query fraction must lie in (0, 1)")
        if not 0 <= self.scale_spread < 1:
            raise ConfigError("scale_spread must lie in [0, 1)")
        if not 0 <= self.style_dim <= self.d_in:
            raise ConfigError("style_dim must lie in [0, d_in]")
        n_query = self.queries_per_identity
        if self.k_per_id[2] - n_query < 1:
            raise ConfigError(
                f"K_C={self.k_per_id[2]} cannot hold {n_query} queries and still leave a gallery match"
            )

    @property
    def queries_per_identity(self) -> int:
        return max(1, int(round(self.query_fraction * self.k_per_id[2])))

    def identity_offsets(self) -> tuple:
        a, b, _ = self.n_ids
        return (0, a, a + b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_ids"] = list(self.n_ids)
        d["k_per_id"] = list(self.k_per_id)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Benchmark:
    spec: BenchmarkSpec
    train_A: SampleSet
    train_B: SampleSet
    query_C: SampleSet
    gallery_C: SampleSet
    _truth_B: np.ndarray

    def reveal_B_identities(self) -> np.ndarray:
        """Ground truth for B. Only the labeled-B ablation and diagnostics may call this."""
        return self._truth_B.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in (self.train_A, self.train_B, self.query_C, self.gallery_C):
            h.update(np.ascontiguousarray(s.X).tobytes())
            h.update(s.ids.tobytes())
        h.update(self._truth_B.tobytes())
        return h.hexdigest()[:16]


# streams under the root seed
_ANCHORS, _MAPS, _SAMPLES, _HOLDOUT = 1, 2, 3, 4


def _orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _domain_maps(spec: BenchmarkSpec):
    """Affine maps ``(S, o)`` and style bases ``U`` for domains A, B, C."""
    rng = make_rng(spec.seed, _MAPS)
    d, s = spec.d_in, spec.scale_spread

    def fresh():
        S = _orthogonal(rng, d) * rng.uniform(1 - s, 1 + s, size=d)
        o = spec.offset_norm * _unit(rng, d)
        U = _orthogonal(rng, d)[:, : spec.style_dim]
        return S, o, U

    S_a, o_a, U_a = fresh()
    S_b, o_b, U_b = fresh()
    # C drifts from B by real_gap
    S_n, o_n, U_n = fresh()
    g = spec.real_gap
    S_c = (1 - g) * S_b + g * S_n
    o_c = (1 - g) * o_b + g * o_n
    U_c, _ = np.linalg.qr((1 - g) * U_b + g * U_n) if spec.style_dim else (U_b, None)
    return [(S_a, o_a, U_a), (S_b, o_b, U_b), (S_c, o_c, U_c)]


def _anchors(spec: BenchmarkSpec) -> list:
    out = []
    for dom in range(3):
        rng = make_rng(spec.seed, _ANCHORS, dom)
        a = rng.standard_normal((spec.n_ids[dom], spec.d_in))
        out.append(spec.anchor_radius * a / np.linalg.norm(a, axis=1, keepdims=True))
    return out


def _draw(spec, maps, anchors, dom, k, rng):
    S, o, U = maps[dom]
    n = anchors.shape[0]
    ident = np.repeat(np.arange(n), k)
    clean = anchors[ident] @ S.T + o
    # within-identity covariance sigma^2 (I + r^2 U U^T): isotropic jitter plus
    # a stronger nuisance ("style") along a few domain-specific directions
    style = rng.standard_normal((n * k, spec.style_dim)) * (spec.style_ratio * spec.sigma) @ U.T
    noise = rng.standard_normal((n * k, spec.d_in)) * spec.sigma
    return clean + style + noise, ident


def generate(spec: BenchmarkSpec) -> Benchmark:
    maps = _domain_maps(spec)
    anchors = _anchors(spec)
    offsets = spec.identity_offsets()
    blocks = []
    next_id = 0
    for dom in range(3):
        rng = make_rng(spec.seed, _SAMPLES, dom)
        X, local = _draw(spec, maps, anchors[dom], dom, spec.k_per_id[dom], rng)
        ids = np.arange(next_id, next_id + X.shape[0], dtype=np.int64)
        next_id += X.shape[0]
        blocks.append((ids, X, local + offsets[dom]))

    ids_a, X_a, y_a = blocks[0]
    ids_b, X_b, y_b = blocks[1]
    ids_c, X_c, y_c = blocks[2]
    # first queries_per_identity draws of each C identity are queries
    k_c = spec.k_per_id[2]
    is_query = (np.arange(X_c.shape[0]) % k_c) < spec.queries_per_identity
    return Benchmark(
        spec=spec,
        train_A=SampleSet(ids_a, X_a, Domain.SynthA, y_a),
        train_B=SampleSet(ids_b, X_b, Domain.RealB, None),
        query_C=SampleSet(ids_c[is_query], X_c[is_query], Domain.TargetC, y_c[is_query]),
        gallery_C=SampleSet(ids_c[~is_query], X_c[~is_query], Domain.TargetC, y_c[~is_query]),
        _truth_B=y_b,
    )


def generate_holdout(spec: BenchmarkSpec, per_identity: int = 4) -> dict:
    """Fresh draws of the A and B identities, disjoint from the training samples.

    Returns ``{"A": (X, y), "B": (X, y)}``; used for diagnostics only.
    """
    maps = _domain_maps(spec)
    anchors = _anchors(spec)
    offsets = spec.identity_offsets()
    out = {}
    for dom, key in ((0, "A"), (1, "B")):
        rng = make_rng(spec.seed, _HOLDOUT, dom)
        X, local = _draw(spec, maps, anchors[dom], dom, per_identity, rng)
        out[key] = (X, local + offsets[dom])
    return out


def domain_gap_score(a, b) -> float:
    """Euclidean distance between the mean input vectors of two sample collections."""
    Xa, Xb = _inputs(a), _inputs(b)
    if Xa.shape[0] == 0 or Xb.shape[0] == 0:
        raise ValueError("domain_gap_score needs two non-empty sample sets")
    return float(np.linalg.norm(Xa.mean(axis=0) - Xb.mean(axis=0)))


def _inputs(samples) -> np.ndarray:
    if isinstance(samples, SampleSet):
        return samples.X
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples)
    rows = [np.asarray(s.input if isinstance(s, Sample) else s, dtype=np.float64) for s in samples]
    return np.array(rows) if rows else np.empty((0, 0))


# CSV interchange

_SPLITS = ("SynthA", "RealB", "TargetC:query", "TargetC:gallery")


def dump_csv(bench: Benchmark, path, *, reveal_hidden: bool = False):
    """Write all samples as ``id,domain,identity,feat_0..feat_{D-1}``.

    B identities are written empty unless ``reveal_hidden``. Values are
    written with 17 significant digits, which round-trips float64 exactly.
    """
    d = bench.spec.d_in
    sets = (bench.train_A, bench.train_B, bench.query_C, bench.gallery_C)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "domain", "identity"] + [f"feat_{j}" for j in range(d)])
        for tag, s in zip(_SPLITS, sets):
            idents = s.identities
            if s.domain is Domain.RealB and reveal_hidden:
                idents = bench._truth_B
            for k in range(len(s)):
                ident = "" if idents is None else str(int(idents[k]))
                w.writerow([int(s.ids[k]), tag, ident] + [f"{v:.17g}" for v in s.X[k]])


def load_csv(path, spec: BenchmarkSpec | None = None) -> Benchmark:
    """Inverse of :func:`dump_csv`. Missing B identities load as -1."""
    rows = {t: [] for t in _SPLITS}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != ["id", "domain", "identity"]:
            raise ConfigError(f"{path}: unexpected header {header[:3]}")
        for row in r:
            if row[1] not in rows:
                raise ConfigError(f"{path}: unknown domain tag {row[1]!r}")
            rows[row[1]].append(row)

    def block(tag, dom):
        rs = rows[tag]
        ids = np.array([int(x[0]) for x in rs], dtype=np.int64)
        X = np.array([[float(v) for v in x[3:]] for x in rs], dtype=np.float64).reshape(len(rs), -1)
        y = np.array([int(x[2]) if x[2] != "" else -1 for x in rs], dtype=np.int64)
        return SampleSet(ids, X, dom, y)

    a = block("SynthA", Domain.SynthA)
    b = block("RealB", Domain.RealB)
    q = block("TargetC:query", Domain.TargetC)
    g = block("TargetC:gallery", Domain.TargetC)
    if spec is None:
        d_in = a.X.shape[1] if len(a) else q.X.shape[1]
        spec = BenchmarkSpec(d_in=d_in)
    return Benchmark(
        spec=spec,
        train_A=a,
        train_B=SampleSet(b.ids, b.X, Domain.RealB, None),
        query_C=q,
        gallery_C=g,
        _truth_B=b.identities,
    )
