"""Sequence generators, experiment configuration and the end-to-end experiments.

The experiments are:

* :func:`run_gap_experiment` estimates consecutive gap rates of perturbed
  products over many independent noise streams;
* :func:`bookkeeping_simulation` splits a perturbed product into target
  blocks, detects which targets the noise hits and checks the decomposition
  ``G(product) = sum G(pieces) + G(tail) + sum F(transitions)``;
* :func:`compute_bound_constants` evaluates the explicit lower bound
  ``c = p / N`` on the gap in log space;
* :func:`prefix_constancy_experiment` tabulates how little dropping a prefix
  changes the gap estimate.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import mpmath
import numpy as np

from . import _io
from ._rng import haar_orthogonal, stream_key
from .cocycle import (
    PerturbationModel,
    ProductAccumulator,
    SequenceSource,
    gaps_from_logs,
    liminf_proxy,
    perturbation_block,
    prefix_invariance_check,
    run_products,
)
from .errors import AccumulationError, CertificationError, PreconditionError, SequenceFormatError
from .gluing import k_constant
from .matcore import MAX_DIM, MIN_DIM, singular_values
from .targets import (
    TargetBlock,
    build_3x3_target,
    build_3x3_target_23,
    build_extremal_target,
    build_spread_target,
    continuity_radius,
    delta_table,
    log_ball_volume_ratio,
    log_hit_probability_floor,
    nonsingular_init,
)

__all__ = [
    "GENERATORS",
    "generate_sequence",
    "read_sequence_file",
    "ExperimentConfig",
    "GapSummary",
    "run_gap_experiment",
    "BookkeepingTrace",
    "BookkeepingReport",
    "block_target",
    "bookkeeping_simulation",
    "BoundReport",
    "compute_bound_constants",
    "prefix_constancy_experiment",
]

GENERATORS = ("identity", "zero", "constant", "orthogonal_random", "orthogonal_cyclic", "rank_collapse",
              "bochi_align", "custom_file")


# ----------------------------------------------------------------------------
# sequence generators
# ----------------------------------------------------------------------------

def _plane_rotation(d: int, theta: float, p: int, q: int) -> np.ndarray:
    G = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    G[p, p] = G[q, q] = c
    G[p, q], G[q, p] = -s, s
    return G


def _periodic(mats: np.ndarray, kind: str, params: dict) -> SequenceSource:
    return SequenceSource.explicit(mats, kind=kind, norm_bounded=True, params=params)


class _LazySequence:
    """Sequentially defined matrices cached as they are generated."""

    def __init__(self, d: int, step_fn, chunk: int = 4096):
        self.d = d
        self._step_fn = step_fn
        self._store = np.empty((0, d, d))
        self._chunk = chunk

    def block(self, start: int, count: int) -> np.ndarray:
        stop = start - 1 + count
        if stop > len(self._store):
            need = max(stop, len(self._store) + self._chunk)
            self._store = np.concatenate([self._store, self._step_fn(len(self._store), need)])
        return self._store[start - 1:stop]


def _bochi_factory(d: int, length: int, sigma: float):
    """Adversary that keeps re-aligning the running product.

    Each block of ``length`` matrices starts with a rotation sending the
    current bottom left singular direction of the unperturbed running product
    to ``e_1`` and the top one to ``e_2`` (the rest in order), followed by
    ``length - 1`` contractions ``diag(1, sigma, ..., sigma)``.  The
    contractions therefore shrink whatever was on top, and over many blocks
    all singular values of the unperturbed product are cycled through the
    top position.
    """
    acc = ProductAccumulator(d, track_right=True)
    D = np.diag([1.0] + [sigma] * (d - 1))

    def step(have: int, need: int) -> np.ndarray:
        out = np.empty((need - have, d, d))
        for i in range(have, need):
            if i % length == 0:
                U, _, _ = acc.svd_factors()
                order = [d - 1, 0] + list(range(1, d - 1))
                target = np.eye(d)
                src = U[:, order]
                R = target @ src.T
                if np.linalg.det(R) < 0:
                    R[d - 1] *= -1.0  # keep a rotation; only the last basis direction flips
                M = R
            else:
                M = D
            out[i - have] = M
            acc.advance(M)
        return out

    return step


def read_sequence_file(path, d: int) -> np.ndarray:
    """Parse one matrix per line (``d*d`` decimals, row-major); blank lines and ``#`` comments are skipped."""
    mats = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.replace(",", " ").split()
        if len(parts) != d * d:
            raise SequenceFormatError(f"line {lineno}: expected {d * d} numbers, found {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise SequenceFormatError(f"line {lineno}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise SequenceFormatError(f"line {lineno}: non-finite entry")
        mats.append(vals.reshape(d, d))
    if not mats:
        raise SequenceFormatError("file contains no matrices")
    mats = np.array(mats)
    norms = singular_values(mats)[:, 0]
    bad = np.flatnonzero(norms > 1.0 + 1e-12)
    if len(bad):
        raise SequenceFormatError(f"matrix {int(bad[0]) + 1} has norm {norms[bad[0]]:.17g} > 1")
    return mats


def generate_sequence(kind: str, params: Mapping | None = None, d: int = 2, seed: int = 0) -> SequenceSource:
    """Build a named sequence of d x d matrices of norm at most 1.

    Kinds and parameters:

    ``identity``, ``zero``
        Constant sequences.
    ``constant``
        ``params["matrix"]``: a d x d nested list.
    ``orthogonal_random``
        Independent Haar orthogonal matrices drawn from ``seed``.
    ``orthogonal_cyclic``
        Cycles through rotations by ``params["theta"]`` (default 1) in the
        coordinate planes ``(1,2), (2,3), ...``.
    ``rank_collapse``
        Alternates ``diag(1, 0, ..., 0)`` with the composition of rotations by
        ``pi/4`` in the planes ``(1,2), ..., (d-1,d)``; the unperturbed product has rank one.
    ``bochi_align``
        Rotations that swap the running product's top and bottom singular
        directions followed by contractions; ``params["length"]`` (default 8)
        and ``params["sigma"]`` (default 0.5).
    ``custom_file``
        ``params["path"]``: one matrix per line, cycled periodically.
    """
    params = dict(params or {})
    if not MIN_DIM <= d <= MAX_DIM:
        raise PreconditionError(f"dimension {d} outside [{MIN_DIM}, {MAX_DIM}]")
    if kind == "identity":
        return _periodic(np.eye(d)[None], kind, params)
    if kind == "zero":
        return _periodic(np.zeros((1, d, d)), kind, params)
    if kind == "constant":
        M = np.array(params.get("matrix"), dtype=float)
        if M.shape != (d, d):
            raise PreconditionError(f"constant generator needs a {d} x {d} matrix")
        if singular_values(M)[0] > 1.0 + 1e-12:
            raise PreconditionError("constant matrix has norm above 1")
        return _periodic(M[None], kind, params)
    if kind == "orthogonal_random":
        stream = stream_key("orthogonal_random", d)

        def block(start, count):
            return haar_orthogonal(seed, stream, start, count, d)

        return SequenceSource(d, kind, block, params={**params, "seed": seed}, norm_bounded=True)
    if kind == "orthogonal_cyclic":
        theta = float(params.get("theta", 1.0))
        mats = np.array([_plane_rotation(d, theta, p, p + 1) for p in range(d - 1)])
        return _periodic(mats, kind, params)
    if kind == "rank_collapse":
        P = np.zeros((d, d))
        P[0, 0] = 1.0
        R = np.eye(d)
        for p in range(d - 1):
            R = _plane_rotation(d, math.pi / 4, p, p + 1) @ R
        return _periodic(np.array([P, R]), kind, params)
    if kind == "bochi_align":
        length = int(params.get("length", 8))
        sigma = float(params.get("sigma", 0.5))
        if length < 2 or not 0.0 < sigma < 1.0:
            raise PreconditionError("bochi_align needs length >= 2 and 0 < sigma < 1")
        lazy = _LazySequence(d, _bochi_factory(d, length, sigma))
        return SequenceSource(d, kind, lazy.block, params={"length": length, "sigma": sigma},
                              norm_bounded=True)
    if kind == "custom_file":
        if "path" not in params:
            raise PreconditionError("custom_file needs params['path']")
        return SequenceSource.explicit(read_sequence_file(params["path"], d), kind=kind, params=params,
                                       norm_bounded=True)
    raise PreconditionError(f"unknown generator {kind!r}; choose from {', '.join(GENERATORS)}")


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

_SECTION_DEFAULTS = {
    "estimator": {"window": 0.5, "segments": 10, "samples": 1000},
    "bookkeeping": {"gamma": 1.05, "block_length": 4, "blocks": 250, "traces": 100, "pair": [1, 2],
                    "radius": None},
    "glue": {"trials": 100000, "grid_points": 121},
    "constants": {"epsilons": [0.1, 0.01, 0.001], "zeta": None, "mode": "auto", "pair": None},
    "prefix": {"m_list": [10, 100, 1000]},
}


def _merge(defaults: dict, given: Mapping | None) -> dict:
    out = dict(defaults)
    for k, v in (given or {}).items():
        if k not in defaults:
            raise PreconditionError(f"unknown key {k!r}")
        out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Everything an experiment needs; serialisable to and from JSON.

    See the README for the JSON schema.  ``epsilon`` may be 0 to run
    unperturbed products.
    """

    dim: int = 2
    epsilon: float = 0.5
    generator: dict = field(default_factory=lambda: {"kind": "zero", "params": {}})
    gaps: Any = "all"
    n_max: int = 100_000
    trials: int = 32
    seed: int = 0
    out: str | None = None
    threads: int = 1
    estimator: dict = field(default_factory=dict)
    bookkeeping: dict = field(default_factory=dict)
    glue: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    prefix: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, defaults in _SECTION_DEFAULTS.items():
            try:
                setattr(self, name, _merge(defaults, getattr(self, name)))
            except PreconditionError as exc:
                raise PreconditionError(f"config section {name!r}: {exc}") from None
        self.validate()

    def validate(self) -> None:
        if not MIN_DIM <= int(self.dim) <= MAX_DIM:
            raise PreconditionError(f"dim must lie in [{MIN_DIM}, {MAX_DIM}]")
        if not 0.0 <= float(self.epsilon) < 1.0:
            raise PreconditionError("epsilon must lie in [0, 1)")
        if int(self.n_max) < 1000:
            raise PreconditionError("n_max must be at least 1000")
        if int(self.trials) < 1 or int(self.threads) < 1:
            raise PreconditionError("trials and threads must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise PreconditionError("seed must be an unsigned 64-bit integer")
        g = self.generator
        if not isinstance(g, Mapping) or g.get("kind") not in GENERATORS:
            raise PreconditionError(f"generator.kind must be one of {', '.join(GENERATORS)}")
        if self.gaps != "all":
            js = list(self.gaps)
            if not js or any(not 1 <= int(j) < self.dim for j in js):
                raise PreconditionError("gaps must be 'all' or a list of indices in [1, dim-1]")
        w = float(self.estimator["window"])
        if not 0.0 < w <= 1.0 or int(self.estimator["segments"]) < 1:
            raise PreconditionError("estimator window must lie in (0, 1] and segments >= 1")

    @property
    def gap_indices(self) -> list[int]:
        return list(range(1, self.dim)) if self.gaps == "all" else [int(j) for j in self.gaps]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise PreconditionError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**dict(data))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(_io.loads_json(text))

    def to_json(self) -> str:
        return _io.dumps_json(self.to_dict())

    def hash(self) -> str:
        """Hash of the settings that determine results (``out`` and ``threads`` excluded)."""
        data = self.to_dict()
        data.pop("out")
        data.pop("threads")
        return _io.config_hash(data)

    def sequence(self) -> SequenceSource:
        return generate_sequence(self.generator["kind"], self.generator.get("params", {}), self.dim, self.seed)


# ----------------------------------------------------------------------------
# gap experiment
# ----------------------------------------------------------------------------

@dataclass
class GapSummary:
    """Per-trial liminf proxies and their mean and standard error for each requested gap."""

    gap_indices: list
    proxies: np.ndarray
    trial_ids: list
    excluded: list
    mean: np.ndarray
    stderr: np.ndarray
    config_hash: str
    seed: int

    @property
    def positive(self) -> np.ndarray:
        """Mean above zero by more than three standard errors."""
        with np.errstate(invalid="ignore"):
            return self.mean - 3.0 * self.stderr > 0.0

    def to_dict(self) -> dict:
        return {"gap_indices": self.gap_indices, "mean": self.mean, "stderr": self.stderr,
                "positive_3se": self.positive, "trials": len(self.trial_ids), "excluded": self.excluded,
                "per_trial": {str(t): row for t, row in zip(self.trial_ids, self.proxies.tolist())}}

    def to_csv(self) -> str:
        header = {"config_hash": self.config_hash, "seed": self.seed}
        cols = ["trial"] + [f"proxy_{j}" for j in self.gap_indices]
        rows = ([t] + [float(v) for v in row] for t, row in zip(self.trial_ids, self.proxies))
        return _io.write_csv(header, cols, rows)


def _trial_proxies(seq, cfg: ExperimentConfig, streams: list[int], steps: np.ndarray):
    try:
        logs = run_products(seq, cfg.epsilon, cfg.seed, streams, cfg.n_max, steps)
        return [(s, logs[i]) for i, s in enumerate(streams)]
    except AccumulationError:
        if len(streams) == 1:
            return [(streams[0], None)]
        out = []
        for s in streams:
            out.extend(_trial_proxies(seq, cfg, [s], steps))
        return out


def run_gap_experiment(config: ExperimentConfig) -> GapSummary:
    """Liminf proxies of the requested gaps for ``config.trials`` independent noise streams.

    Trial ``t`` uses noise stream ``t``.  Trials whose product overflows are
    excluded and listed.  Results do not depend on ``config.threads``.
    """
    seq = config.sequence()
    steps = np.unique(np.linspace(0, config.n_max, int(config.estimator["samples"]) + 1)[1:].round()
                      .astype(np.int64))
    trials = list(range(int(config.trials)))
    groups = [g.tolist() for g in np.array_split(np.array(trials), min(config.threads, len(trials)))]
    groups = [g for g in groups if g]
    if config.threads > 1 and len(groups) > 1:
        # generator state (bochi_align) is filled before fan-out so workers only read
        seq.block(1, config.n_max)
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(lambda g: _trial_proxies(seq, config, g, steps), groups))
    else:
        parts = [_trial_proxies(seq, config, g, steps) for g in groups]
    results = dict(item for part in parts for item in part)
    idx = np.array(config.gap_indices) - 1
    kept, rows, excluded = [], [], []
    for t in trials:
        logs = results[t]
        if logs is None:
            excluded.append(t)
            continue
        g = gaps_from_logs(logs, steps)
        rows.append(liminf_proxy(g, config.estimator["window"], config.estimator["segments"])[idx])
        kept.append(t)
    prox = np.array(rows).reshape(len(kept), len(idx))
    mean = prox.mean(axis=0) if len(kept) else np.full(len(idx), np.nan)
    stderr = prox.std(axis=0, ddof=1) / math.sqrt(len(kept)) if len(kept) > 1 else np.full(len(idx), np.nan)
    return GapSummary(config.gap_indices, prox, kept, excluded, mean, stderr, config.hash(), int(config.seed))


# ----------------------------------------------------------------------------
# bookkeeping
# ----------------------------------------------------------------------------

def block_target(block, eps: float, gamma: float, pair=(1, 2)) -> TargetBlock:
    """Pick a target construction for one block.

    A block that is spread enough for the spread construction at its length
    gets it.  Otherwise ``(1, d)`` uses the extremal construction and, for
    3 x 3 blocks, ``(1, 2)`` and ``(2, 3)`` use the dedicated ones.
    """
    block = np.asarray(block, dtype=float)
    L, d = block.shape[0], block.shape[-1]
    j, k = pair
    if k == j + 1 and gamma >= 1.0:
        need = 16.0 * math.log(gamma) / (eps * L)
        deltas = delta_table(block)
        eta = min(1.0, float(deltas.min()) * (1.0 - 1e-9))
        if 0.0 < need <= eta or (need == 0.0 and eta > 0.0):
            return build_spread_target(block, j, eps, eta, gamma)
    if (j, k) == (1, d):
        return build_extremal_target(block, eps, gamma)
    if d == 3 and (j, k) == (1, 2):
        return build_3x3_target(block, eps, gamma)
    if d == 3 and (j, k) == (2, 3):
        return build_3x3_target_23(block, eps, gamma)
    raise CertificationError(f"no target construction for pair {pair} in dimension {d}")


@dataclass
class BookkeepingTrace:
    """Decomposition of one perturbed product along hit targets.

    ``transitions`` are the coordinates right before and after each hit
    target; ``G_pieces[i]`` is ``G`` of the product strictly between
    consecutive transitions (the first piece starts at 1), ``G_tail`` the
    piece after the last transition and ``F_values[i]`` the gluing statistic
    at transition ``i``.
    """

    trace: int
    hits: np.ndarray
    hit_coordinates: list
    transitions: list
    G_pieces: np.ndarray
    G_tail: float
    F_values: np.ndarray
    G_total: float
    hit_piece_G: np.ndarray

    @property
    def residual(self) -> float:
        return float(self.G_total - (np.sum(self.G_pieces) + self.G_tail + np.sum(self.F_values)))

    def structural_errors(self, ranges: Sequence[tuple[int, int]]) -> list[str]:
        """Violations of the adjacency and separation rules (empty when consistent)."""
        errs = []
        hit_ranges = [ranges[b] for b in np.flatnonzero(self.hits)]
        adj = set()
        for a, b in hit_ranges:
            adj.update({a - 1, b + 1})
        for t in self.transitions:
            if t not in adj:
                errs.append(f"transition {t} is not adjacent to a hit target")
        for (a1, b1), (a2, b2) in zip(hit_ranges, hit_ranges[1:]):
            if a2 - b1 < 2:
                errs.append(f"hit targets [{a1},{b1}] and [{a2},{b2}] are not separated")
        return errs

    def to_dict(self) -> dict:
        return {"trace": self.trace, "hits": int(self.hits.sum()), "transitions": self.transitions,
                "G_pieces": self.G_pieces, "G_tail": self.G_tail, "F_values": self.F_values,
                "G_total": self.G_total, "residual": self.residual, "hit_piece_G": self.hit_piece_G}


@dataclass
class BookkeepingReport:
    """All traces of a bookkeeping run with hit statistics."""

    traces: list
    ranges: list
    targets: list
    gamma: float
    block_length: int
    epsilon: float
    dim: int
    pair: tuple
    radius: float
    lemma_radius: float
    log_hit_floor: float
    log_p: float
    config_hash: str
    seed: int

    @property
    def total_blocks(self) -> int:
        return len(self.ranges) * len(self.traces)

    @property
    def hit_rate(self) -> float:
        return float(sum(int(t.hits.sum()) for t in self.traces) / self.total_blocks)

    @property
    def hit_floor(self) -> float:
        return float(math.exp(self.log_hit_floor))

    def floor_check(self) -> tuple[bool, float]:
        """``(hit rate >= floor - 3 sigma, sigma)`` with the binomial sigma at the floor."""
        q = self.hit_floor
        sigma = math.sqrt(q * (1.0 - q) / self.total_blocks)
        return self.hit_rate >= q - 3.0 * sigma, sigma

    @property
    def max_abs_residual(self) -> float:
        return max(abs(t.residual) for t in self.traces)

    def structural_errors(self) -> list[str]:
        return [f"trace {t.trace}: {e}" for t in self.traces for e in t.structural_errors(self.ranges)]

    def to_dict(self) -> dict:
        ok, sigma = self.floor_check()
        hit_G = np.concatenate([t.hit_piece_G for t in self.traces]) if self.traces else np.zeros(0)
        return {
            "gamma": self.gamma, "block_length": self.block_length, "epsilon": self.epsilon,
            "dim": self.dim, "pair": list(self.pair), "radius": self.radius,
            "lemma_radius": self.lemma_radius, "log_hit_floor": self.log_hit_floor, "log_p": self.log_p,
            "hit_rate": self.hit_rate, "hit_floor_sigma": sigma, "hit_rate_ok": ok,
            "max_abs_residual": self.max_abs_residual, "structural_errors": self.structural_errors(),
            "min_G_hit_pieces": float(hit_G.min()) if len(hit_G) else None,
            "log_half_gamma": math.log(self.gamma / 2.0) if self.gamma > 0 else None,
            "target_methods": sorted({t.method for t in self.targets}),
            "traces": [t.to_dict() for t in self.traces],
        }

    def to_csv(self) -> str:
        header = {"config_hash": self.config_hash, "seed": self.seed}
        cols = ["trace", "hits", "transitions", "G_total", "sum_G_pieces", "G_tail", "sum_F", "residual"]
        rows = ([t.trace, int(t.hits.sum()), len(t.transitions), t.G_total, float(np.sum(t.G_pieces)),
                 t.G_tail, float(np.sum(t.F_values)), t.residual] for t in self.traces)
        return _io.write_csv(header, cols, rows)


def bookkeeping_simulation(config: ExperimentConfig, gamma: float | None = None, N: int | None = None,
                           traces: int | None = None, radius: float | None = None) -> BookkeepingReport:
    """Hit detection and the gap decomposition on perturbed products.

    Coordinates ``lN+1 .. lN+N-1`` form block ``l``.  Each block of the
    unperturbed sequence is moved by :func:`nonsingular_init`, a target is
    built on it, and trace ``t`` (noise stream ``t``) hits the target when
    every perturbed factor ``A_i + eps Xi_i`` in its range is within
    ``radius`` of the target factor in every entry.  ``radius`` defaults to
    ``(eps/4)^N / (3 d N)``; larger values are only for exercising the
    decomposition.
    """
    bk = config.bookkeeping
    gamma = float(bk["gamma"] if gamma is None else gamma)
    N = int(bk["block_length"] if N is None else N)
    traces = int(bk["traces"] if traces is None else traces)
    pair = tuple(int(v) for v in bk["pair"])
    eps = float(config.epsilon)
    d = config.dim
    if not 0.0 < eps < 1.0:
        raise PreconditionError("bookkeeping needs 0 < epsilon < 1")
    if N < 2:
        raise PreconditionError("block length N must be at least 2")
    lemma_r = continuity_radius(eps, d, N)
    r = float(lemma_r if radius is None and bk["radius"] is None else (radius if radius is not None else bk["radius"]))
    blocks = int(bk["blocks"])
    n = blocks * N
    seq = config.sequence()
    A = seq.block(1, n)
    ranges, targets, Mhat = [], [], {}
    cache: dict[bytes, TargetBlock] = {}
    for l in range(blocks):
        blk = nonsingular_init(A[l * N:l * N + N - 1], eps)
        key = blk.tobytes()
        if key not in cache:
            try:
                cache[key] = block_target(blk, eps, gamma, pair)
            except (PreconditionError, CertificationError) as exc:
                raise CertificationError(f"block {l} (coordinates {l * N + 1}..{l * N + N - 1}): {exc}") from exc
        t = cache[key]
        a, b = l * N + t.start, l * N + t.stop
        ranges.append((a, b))
        targets.append(t)
        for i in range(a, b + 1):
            Mhat[i] = t.matrices[i - a]
    lengths = {t.length for t in targets}
    log_floor = min(log_ball_volume_ratio(eps, d, N, m) for m in lengths)

    T = traces
    noise = np.stack([perturbation_block(PerturbationModel(eps, config.seed, s), d, 1, n) for s in range(T)],
                     axis=1)  # (n, T, d, d)
    factors = A[:, None] + noise
    hits = np.zeros((T, blocks), dtype=bool)
    for l, (a, b) in enumerate(ranges):
        ref = np.array([Mhat[i] for i in range(a, b + 1)])
        dev = np.abs(factors[a - 1:b] - ref[:, None]).max(axis=(0, 2, 3))
        hits[:, l] = dev < r
    trans = [sorted({c for l in np.flatnonzero(hits[t]) for c in (ranges[l][0] - 1, ranges[l][1] + 1)
                     if 1 <= c <= n}) for t in range(T)]
    is_trans = np.zeros((n + 1, T), dtype=bool)
    for t in range(T):
        is_trans[trans[t], t] = True

    j, k = pair
    run = ProductAccumulator(d, trials=T)
    piece = ProductAccumulator(d, trials=T)
    G_bar = [[] for _ in range(T)]
    G_piece = [[] for _ in range(T)]
    piece_start = [[] for _ in range(T)]
    starts = np.ones(T, dtype=np.int64)
    for i in range(1, n + 1):
        mask = is_trans[i]
        if mask.any():
            lr = run.log_singular_values()
            lp = piece.log_singular_values()
            for t in np.flatnonzero(mask):
                G_bar[t].append(float(lr[t, j - 1] - lr[t, k - 1]))
                G_piece[t].append(float(lp[t, j - 1] - lp[t, k - 1]))
                piece_start[t].append((int(starts[t]), i - 1))
            starts[mask] = i + 1
        run.advance(factors[i - 1])
        piece.advance(factors[i - 1])
        if mask.any():
            piece.reset(mask)
    lr = run.log_singular_values()
    lp = piece.log_singular_values()
    out = []
    for t in range(T):
        Gb = np.array(G_bar[t])
        Gp = np.array(G_piece[t])
        G_total = float(lr[t, j - 1] - lr[t, k - 1])
        G_tail = float(lp[t, j - 1] - lp[t, k - 1])
        if len(Gb):
            F = np.append(Gb[1:] - Gp[1:] - Gb[:-1], G_total - G_tail - Gb[-1])
        else:
            F = np.zeros(0)
        hit_set = {ranges[l] for l in np.flatnonzero(hits[t])}
        hit_G = np.array([g for g, span in zip(Gp, piece_start[t]) if span in hit_set])
        hit_coords = sorted(c for l in np.flatnonzero(hits[t]) for c in range(ranges[l][0], ranges[l][1] + 1))
        out.append(BookkeepingTrace(t, hits[t].copy(), hit_coords, trans[t], Gp, G_tail, F, G_total, hit_G))
    return BookkeepingReport(out, ranges, targets, gamma, N, eps, d, pair, r, lemma_r, log_floor,
                             log_hit_probability_floor(eps, d, N), config.hash(), int(config.seed))


# ----------------------------------------------------------------------------
# constants calculator
# ----------------------------------------------------------------------------

_REFERENCE = {"extremal": (lambda d: 16 * d + 2, lambda d: 16 * d + 3),
              "three": (lambda d: 866, lambda d: 867),
              "orthogonal": (lambda d: 2, lambda d: 2.2)}


@dataclass(frozen=True)
class BoundReport:
    """The explicit gap lower bound ``c = p / N`` and its ingredients.

    Huge and tiny quantities are kept as logarithms; ``log_p`` and ``log_c``
    are decimal strings because they overflow doubles for small ``eps``.
    """

    d: int
    epsilon: float
    pair: tuple
    mode: str
    zeta: float | None
    K: float
    lambda_floor: float
    log_gamma: float
    eta: float | None
    log_N: float
    log_p: str
    log_c: str
    loglog_inv_c: float
    exponent: float
    reference_exponent: float
    stated_bound: float

    @property
    def within_stated_bound(self) -> bool:
        return self.exponent <= self.stated_bound

    @property
    def relative_to_reference(self) -> float:
        return abs(self.exponent - self.reference_exponent) / self.reference_exponent

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pair"] = list(self.pair)
        out["within_stated_bound"] = self.within_stated_bound
        out["relative_to_reference"] = self.relative_to_reference
        return out


def _mp_str(x) -> str:
    return mpmath.nstr(x, 17, min_fixed=-1, max_fixed=-1)


def compute_bound_constants(d: int, eps: float, zeta: float | None, gap_pair=None,
                            mode: str = "auto") -> BoundReport:
    """Evaluate ``c = p / N`` with ``p = (eps/4)^(N^2 d^2) / (3 d N)^(N d^2)``.

    ``lambda = 4d log(eps) - K`` with ``K = 4d (log(zeta) + 1)`` and the
    required gap is ``Gamma = 2 exp(2 + 2 |lambda|)``.  The block length ``N``
    (with ``N - 1`` the target length) depends on ``mode``:

    ``extremal``
        ``N - 1 = ceil((16/eps) Gamma log Gamma)``; the ``(1, d)`` gap, any ``d``.
    ``three``
        ``d = 3``: ``eta = min(Gamma^-9, eps/4)``, ``N - 1 = ceil(16 log Gamma / (eps eta^2))``.
    ``orthogonal``
        Orthogonal sequences: blocks are spread with ``eta -> sqrt(2)``,
        ``N - 1 = ceil(16 log Gamma / (eps sqrt(2)))``.

    ``auto`` picks ``three`` for ``d = 3`` with a consecutive pair and
    ``extremal`` otherwise.  ``zeta=None`` drops the constant entirely
    (``Gamma = eps^(-8d)``), which isolates the leading-order exponent.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if not MIN_DIM <= d <= MAX_DIM:
        raise PreconditionError(f"dimension {d} outside [{MIN_DIM}, {MAX_DIM}]")
    if zeta is not None and not zeta > 0:
        raise PreconditionError("zeta must be positive")
    pair = tuple(gap_pair) if gap_pair is not None else ((1, 2) if d == 3 else (1, d))
    if mode == "auto":
        mode = "three" if d == 3 and pair[1] == pair[0] + 1 else "extremal"
    if mode not in _REFERENCE:
        raise PreconditionError(f"unknown mode {mode!r}")
    if mode == "three" and d != 3:
        raise PreconditionError("mode 'three' is for d = 3")
    if mode == "extremal" and pair != (1, d):
        raise PreconditionError("mode 'extremal' bounds the (1, d) gap")
    with mpmath.workdps(50):
        e = mpmath.mpf(eps)
        if zeta is None:
            K = None
            lam = 4 * d * mpmath.log(e)
            log_gamma = -8 * d * mpmath.log(e)
        else:
            K = mpmath.mpf(k_constant(d, zeta))
            lam = 4 * d * mpmath.log(e) - K
            log_gamma = mpmath.log(2) + 2 + 2 * abs(lam)
        eta = None
        if mode == "extremal":
            Nm1 = mpmath.ceil(16 / e * mpmath.exp(log_gamma) * log_gamma)
        elif mode == "three":
            eta = mpmath.mpf(min(mpmath.exp(-9 * log_gamma), e / 4))
            Nm1 = mpmath.ceil(16 * log_gamma / (e * eta ** 2))
        else:
            Nm1 = mpmath.ceil(16 * log_gamma / (e * mpmath.sqrt(2)))
        N = Nm1 + 1
        logN = mpmath.log(N)
        d2 = d * d
        log_p = N * N * d2 * mpmath.log(e / 4) - N * d2 * mpmath.log(3 * d * N)
        log_c = log_p - logN
        loglog = mpmath.log(-log_c)
        exponent = loglog / mpmath.log(1 / e)
        ref, stated = (f(d) for f in _REFERENCE[mode])
        return BoundReport(d, float(eps), pair, mode, None if zeta is None else float(zeta),
                           math.nan if K is None else float(K), float(lam), float(log_gamma),
                           None if eta is None else float(eta), float(logN), _mp_str(log_p), _mp_str(log_c),
                           float(loglog), float(exponent), float(ref), float(stated))


# ----------------------------------------------------------------------------
# prefix constancy
# ----------------------------------------------------------------------------

def prefix_constancy_experiment(config: ExperimentConfig, m_list: Sequence[int] | None = None) -> list[dict]:
    """Gap rates with and without the first ``m`` factors, one row per ``m`` (noise stream 0)."""
    m_list = list(config.prefix["m_list"] if m_list is None else m_list)
    seq = config.sequence()
    model = PerturbationModel(config.epsilon, config.seed, 0)
    rows = []
    for m in m_list:
        pc = prefix_invariance_check(seq, model, int(m), config.n_max)
        rows.append({"m": int(m), "gap_full": pc.gap_full, "gap_shifted": pc.gap_shifted,
                     "difference": pc.difference, "bound": pc.bound,
                     "within_bound": bool(np.all(pc.difference <= pc.bound + 1e-12))})
    return rows
