"""Matrix sequences, the additive uniform noise model and stable products.

The central object is :class:`ProductAccumulator`, which keeps a running
product ``P = A_n ... A_1`` in the graded form ``P = C diag(exp(l)) W^T`` with
``W`` orthogonal (and discarded, since it never affects singular values).
Each step left-multiplies the carrier ``C``; every ``renorm_period`` steps the
carrier is re-factored so that ``C`` is orthogonal again and all scale lives
in the log-scales ``l``.

Re-factoring is a QR of the carrier followed by an SVD of
``R diag(exp(l))``.  Where consecutive log-scales are separated by far more
than the conditioning of ``R`` can bridge, the coupling block is below double
precision relative to the diagonal blocks and the SVD splits into independent
clusters; in the common fully-split case this is exactly a QR step and is done
for all trials at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _io
from ._rng import symmetric_uniform
from .errors import AccumulationError, PreconditionError
from .matcore import MAX_DIM, MIN_DIM, as_matrix, svd_batch

__all__ = [
    "SequenceSource",
    "PerturbationModel",
    "sample_perturbation",
    "perturbation_block",
    "ProductAccumulator",
    "GapTrajectory",
    "gap_trajectory",
    "run_products",
    "default_schedule",
    "gaps_from_logs",
    "liminf_proxy",
    "PrefixComparison",
    "prefix_invariance_check",
]

# log-margin below which clusters are merged (exp(-40) ~ 4e-18)
_SPLIT_MARGIN = 40.0
_CHUNK = 2048
# largest log-scale spread handled by a single unclustered SVD
_FULL_SVD_SPREAD = 600.0


class SequenceSource:
    """A deterministic sequence ``A_1, A_2, ...`` of d x d matrices.

    Parameters
    ----------
    dim : int
        Matrix dimension.
    kind : str
        Name of the rule that produced the sequence (recorded in outputs).
    block_fn : callable
        ``block_fn(start, count)`` returns the matrices ``A_start .. A_{start+count-1}``
        as an array of shape ``(count, d, d)``.  Indices start at 1.
    params : dict, optional
        Parameters of the rule.
    norm_bounded : bool
        Whether every matrix is guaranteed to have operator norm at most 1.
    """

    def __init__(self, dim: int, kind: str, block_fn: Callable[[int, int], np.ndarray],
                 params: dict | None = None, norm_bounded: bool = True):
        if not MIN_DIM <= dim <= MAX_DIM:
            raise PreconditionError(f"dimension {dim} outside [{MIN_DIM}, {MAX_DIM}]")
        self.dim = int(dim)
        self.kind = kind
        self.params = dict(params or {})
        self.norm_bounded = norm_bounded
        self._block_fn = block_fn

    @classmethod
    def explicit(cls, matrices: Sequence, kind: str = "explicit", norm_bounded: bool | None = None,
                 params: dict | None = None) -> "SequenceSource":
        """Periodic sequence cycling through ``matrices`` (a single matrix gives a constant sequence)."""
        mats = np.asarray(matrices, dtype=float)
        if mats.ndim == 2:
            mats = mats[None]
        d = mats.shape[-1]
        for M in mats:
            as_matrix(M, d)
        mats = mats.copy()
        mats.setflags(write=False)
        if norm_bounded is None:
            norm_bounded = bool(np.all(svd_batch(mats, compute_uv=False)[:, 0] <= 1 + 1e-12))

        def block(start, count):
            idx = (np.arange(start, start + count) - 1) % len(mats)
            return mats[idx]

        return cls(d, kind, block, params=params, norm_bounded=norm_bounded)

    def block(self, start: int, count: int) -> np.ndarray:
        if start < 1:
            raise ValueError("sequence indices start at 1")
        out = np.asarray(self._block_fn(start, count), dtype=float)
        if out.shape != (count, self.dim, self.dim):
            raise ValueError(f"generator returned shape {out.shape}")
        return out

    def matrix(self, n: int) -> np.ndarray:
        """The n-th matrix (n >= 1)."""
        return self.block(n, 1)[0]

    def __repr__(self):
        return f"SequenceSource(dim={self.dim}, kind={self.kind!r}, params={self.params!r})"


@dataclass(frozen=True)
class PerturbationModel:
    """Entrywise i.i.d. uniform noise of amplitude ``epsilon``.

    The noise matrix for step ``n`` is a pure function of ``(seed, stream_id, n)``.
    """

    epsilon: float
    seed: int = 0
    stream_id: int = 0
    law: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise PreconditionError("epsilon must lie in [0, 1)")
        if self.law != "uniform":
            raise PreconditionError("only the uniform entrywise law is available")
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= int(v) < 2 ** 64:
                raise PreconditionError(f"{name} must be an unsigned 64-bit integer")

    def with_stream(self, stream_id: int) -> "PerturbationModel":
        return PerturbationModel(self.epsilon, self.seed, stream_id, self.law)


def perturbation_block(model: PerturbationModel, dim: int, start: int, count: int) -> np.ndarray:
    """Noise matrices ``eps * Xi_n`` for ``n = start .. start+count-1``, shape ``(count, d, d)``."""
    if start < 1:
        raise ValueError("step indices start at 1")
    if model.epsilon == 0.0:
        return np.zeros((count, dim, dim))
    xi = symmetric_uniform(model.seed, model.stream_id, start, count, dim * dim)
    return model.epsilon * xi.reshape(count, dim, dim)


def sample_perturbation(model: PerturbationModel, n: int, dim: int = 2) -> np.ndarray:
    """The noise matrix added at step ``n``; entries lie in ``[-eps, eps]``.

    >>> m = PerturbationModel(0.5, seed=1)
    >>> bool(np.all(sample_perturbation(m, 3) == sample_perturbation(m, 3)))
    True
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return perturbation_block(model, dim, n, 1)[0]


def _log_abs(x):
    with np.errstate(divide="ignore"):
        return np.log(np.abs(x))


def _split_points(R: np.ndarray, logs: np.ndarray) -> np.ndarray:
    """Boolean ``(T, d-1)``: may the graded factor be split between k-1 and k?"""
    T, d, _ = R.shape
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    singular = np.any(diag == 0.0, axis=1)
    Rs = R.copy()
    if singular.any():
        Rs[singular] = np.eye(d)
    Rinv = np.linalg.inv(Rs)
    out = np.zeros((T, d - 1), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for k in range(1, d):
            inv_norm = np.sqrt(np.einsum("tij,tij->t", Rinv[:, :k, :k], Rinv[:, :k, :k]))
            top_zero = np.any(diag[:, :k] == 0.0, axis=1)
            inv_norm = np.where(top_zero, np.inf, inv_norm)
            off = np.sqrt(np.einsum("tij,tij->t", R[:, :k, k:], R[:, :k, k:]))
            coupling = np.log(inv_norm) + np.log(off)
            gap = logs[:, k - 1] - logs[:, k]
            ok = (gap - coupling) >= _SPLIT_MARGIN
            out[:, k - 1] = (off == 0.0) | np.where(np.isnan(ok), False, ok)
    return out


def _graded_factor(C: np.ndarray, logs: np.ndarray, want_right: bool = False):
    """Re-factor ``C diag(exp(logs))`` as ``U diag(exp(new_logs)) Vf^T``.

    ``U`` and ``Vf`` are orthogonal and ``new_logs`` is sorted descending.
    Batched over the leading axis.  ``Vf`` is ``None`` unless requested; a
    caller tracking the right factor ``W`` of the product updates it to
    ``W @ Vf``.
    """
    T, d, _ = C.shape
    Q, R = np.linalg.qr(C)
    U = np.empty_like(C)
    new = np.empty_like(logs)
    Vf = np.broadcast_to(np.eye(d), (T, d, d)).copy() if want_right else None
    finite = np.all(np.isfinite(logs), axis=1)
    # one coupling bound per trial: log of the Frobenius condition number of R
    fast = np.zeros(T, dtype=bool)
    try:
        Rinv = np.linalg.inv(R)
    except np.linalg.LinAlgError:
        Rinv = None
    if Rinv is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            lc = np.log(np.sqrt(np.einsum("tij,tij->t", R, R) * np.einsum("tij,tij->t", Rinv, Rinv)))
            gaps = logs[:, :-1] - logs[:, 1:]
            fast = finite & np.isfinite(lc) & np.all(gaps >= _SPLIT_MARGIN + lc[:, None], axis=1)
    if fast.all():
        # separation survives the update, so the result is already sorted
        dg = np.diagonal(R, axis1=1, axis2=2)
        return Q * np.where(dg < 0, -1.0, 1.0)[:, None, :], logs + np.log(np.abs(dg)), Vf
    if fast.any():
        dg = np.diagonal(R[fast], axis1=1, axis2=2)
        sign = np.where(dg < 0, -1.0, 1.0)
        U[fast] = Q[fast] * sign[:, None, :]
        new[fast] = logs[fast] + _log_abs(dg)
    # moderate spread: one SVD of the whole graded factor
    with np.errstate(invalid="ignore"):  # singular trials have -inf logs; ``finite`` excludes them
        mid = ~fast & finite & (logs[:, 0] - logs[:, -1] <= _FULL_SVD_SPREAD)
    if mid.any():
        top = logs[mid, :1]
        X = R[mid] * np.exp(logs[mid] - top)[:, None, :]
        trip = svd_batch(X)
        U[mid] = Q[mid] @ trip.U
        new[mid] = top + _log_abs(trip.s)
        if want_right:
            Vf[mid] = trip.V
    for t in np.flatnonzero(~fast & ~mid):
        splits = _split_points(R[t:t + 1], logs[t:t + 1])[0]
        U[t], new[t], vt = _cluster_svd(Q[t], R[t], logs[t], splits)
        if want_right:
            Vf[t] = vt
    order = np.argsort(-new, axis=1, kind="stable")
    new = np.take_along_axis(new, order, axis=1)
    U = np.take_along_axis(U, order[:, None, :], axis=2)
    if want_right:
        Vf = np.take_along_axis(Vf, order[:, None, :], axis=2)
    return U, new, Vf


def _cluster_svd(Q, R, logs, splits):
    d = len(logs)
    bounds = [0] + [k for k in range(1, d) if splits[k - 1]] + [d]
    U = np.empty((d, d))
    V = np.eye(d)
    new = np.empty(d)
    for a, b in zip(bounds[:-1], bounds[1:]):
        top = np.max(logs[a:b])
        if top == -np.inf:
            U[:, a:b] = Q[:, a:b]
            new[a:b] = -np.inf
            continue
        with np.errstate(under="ignore"):
            X = R[a:b, a:b] * np.exp(logs[a:b] - top)[None, :]
        if b - a == 1:
            U[:, a] = Q[:, a] * (-1.0 if X[0, 0] < 0 else 1.0)
            new[a] = top + _log_abs(X[0, 0])
            continue
        trip = svd_batch(X[None])
        U[:, a:b] = Q[:, a:b] @ trip.U[0]
        V[a:b, a:b] = trip.V[0]
        new[a:b] = top + _log_abs(trip.s[0])
    return U, new, V


class ProductAccumulator:
    """Running product ``A_n ... A_1`` for one or many independent trials.

    Parameters
    ----------
    dim : int
        Matrix dimension.
    trials : int, optional
        Number of products carried in parallel.  When omitted the accumulator
        holds a single product and accepts/returns unbatched arrays.
    renorm_period : int
        Steps between re-factorisations of the carrier.  Small singular
        values lose roughly ``eps * cond(carrier)`` relative accuracy at each
        re-factorisation, and the carrier's condition number compounds over
        the period, so the default re-factors after every step.
    track_right : bool
        Also accumulate the right orthogonal factor, so that singular vectors
        of the product are available from :meth:`svd_factors`.

    Examples
    --------
    >>> acc = ProductAccumulator(2)
    >>> for _ in range(100):
    ...     acc.advance(np.diag([0.5, 0.25]))
    >>> np.round(acc.log_singular_values() / 100 / np.log(2), 12).tolist()
    [-1.0, -2.0]
    """

    def __init__(self, dim: int, trials: int | None = None, renorm_period: int = 1,
                 track_right: bool = False):
        if not MIN_DIM <= dim <= MAX_DIM:
            raise PreconditionError(f"dimension {dim} outside [{MIN_DIM}, {MAX_DIM}]")
        if renorm_period < 1:
            raise ValueError("renorm_period must be positive")
        self.dim = dim
        self._single = trials is None
        self.trials = 1 if trials is None else int(trials)
        self.renorm_period = renorm_period
        self.step = 0
        self._C = np.broadcast_to(np.eye(dim), (self.trials, dim, dim)).copy()
        self._logs = np.zeros((self.trials, dim))
        self._W = np.broadcast_to(np.eye(dim), (self.trials, dim, dim)).copy() if track_right else None

    @property
    def carrier(self) -> np.ndarray:
        return self._C[0].copy() if self._single else self._C.copy()

    @property
    def log_scales(self) -> np.ndarray:
        return self._logs[0].copy() if self._single else self._logs.copy()

    def copy(self) -> "ProductAccumulator":
        other = ProductAccumulator.__new__(ProductAccumulator)
        other.__dict__.update(self.__dict__)
        other._C = self._C.copy()
        other._logs = self._logs.copy()
        other._W = None if self._W is None else self._W.copy()
        return other

    def advance(self, M) -> "ProductAccumulator":
        """Left-multiply the product by ``M`` (shape ``(d, d)`` or ``(trials, d, d)``)."""
        M = np.asarray(M, dtype=float)
        if M.shape[-2:] != (self.dim, self.dim):
            raise ValueError(f"expected {self.dim} x {self.dim} factors, got {M.shape}")
        self._C = M @ self._C
        self.step += 1
        if self.step % self.renorm_period == 0:
            self.renormalize()
        return self

    def advance_many(self, Ms) -> "ProductAccumulator":
        """Apply factors in order; ``Ms`` has shape ``(count, d, d)`` or ``(count, trials, d, d)``."""
        for M in Ms:
            self.advance(M)
        return self

    def reset(self, mask=None) -> None:
        """Restart the selected trials (all when ``mask`` is None) at the identity product."""
        sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
        self._C[sel] = np.eye(self.dim)
        self._logs[sel] = 0.0
        if self._W is not None:
            self._W[sel] = np.eye(self.dim)

    def renormalize(self) -> None:
        if not np.all(np.isfinite(self._C)):
            raise AccumulationError(f"non-finite carrier at step {self.step}")
        self._C, self._logs, vf = _graded_factor(self._C, self._logs, self._W is not None)
        if vf is not None:
            self._W = self._W @ vf

    def log_singular_values(self) -> np.ndarray:
        """Natural logs of the singular values of the product, descending.

        The accumulator state is not modified.  Zero singular values give ``-inf``.
        """
        if not np.all(np.isfinite(self._C)):
            raise AccumulationError(f"non-finite carrier at step {self.step}")
        _, logs, _ = _graded_factor(self._C, self._logs)
        return logs[0] if self._single else logs

    def svd_factors(self):
        """``(U, log_s, V)`` with product ``= U diag(exp(log_s)) V^T``.

        Requires ``track_right=True``.  The state is not modified.
        """
        if self._W is None:
            raise ValueError("right factor not tracked; construct with track_right=True")
        if not np.all(np.isfinite(self._C)):
            raise AccumulationError(f"non-finite carrier at step {self.step}")
        U, logs, vf = _graded_factor(self._C, self._logs, True)
        V = self._W @ vf
        if self._single:
            return U[0], logs[0], V[0]
        return U, logs, V


def gaps_from_logs(logs: np.ndarray, n) -> np.ndarray:
    """``(1/n) log(s_j / s_{j+1})`` for each consecutive pair.

    Equal zero singular values give ``nan`` (the ratio is undefined).
    """
    logs = np.asarray(logs, dtype=float)
    with np.errstate(invalid="ignore"):
        diff = logs[..., :-1] - logs[..., 1:]
    n = np.asarray(n, dtype=float)
    return diff / (n[..., None] if n.ndim else n)


@dataclass
class GapTrajectory:
    """Sampled gap rates of one perturbed product.

    ``gaps[i, j]`` is ``(1/n) log(s_{j+1}/s_{j+2})`` (0-based ``j``) at
    ``n = sample_steps[i]``.
    """

    sample_steps: np.ndarray
    gaps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_steps = np.asarray(self.sample_steps, dtype=np.int64)
        self.gaps = np.asarray(self.gaps, dtype=float)
        if self.gaps.ndim != 2 or len(self.gaps) != len(self.sample_steps):
            raise ValueError("gaps must have shape (samples, d-1)")
        if np.any(np.diff(self.sample_steps) <= 0):
            raise ValueError("sample steps must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.gaps.shape[1] + 1

    def liminf_proxy(self, window: float = 0.5, segments: int = 10) -> np.ndarray:
        return liminf_proxy(self.gaps, window, segments)

    def to_csv(self) -> str:
        cols = ["n"] + [f"gap_{j + 1}" for j in range(self.dim - 1)]
        rows = ([int(n)] + [float(g) for g in row] for n, row in zip(self.sample_steps, self.gaps))
        return _io.write_csv(self.meta, cols, rows)

    @classmethod
    def from_csv(cls, text: str) -> "GapTrajectory":
        header, cols, rows = _io.read_csv(text)
        steps = [int(r[0]) for r in rows]
        gaps = [[_io.parse_float(v) for v in r[1:]] for r in rows]
        return cls(np.array(steps), np.array(gaps).reshape(len(rows), len(cols) - 1), header)

    def to_dict(self) -> dict:
        return {"meta": dict(self.meta), "sample_steps": self.sample_steps.tolist(),
                "gaps": self.gaps.tolist()}

    def to_json(self) -> str:
        return _io.dumps_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GapTrajectory":
        data = _io.loads_json(text)
        d = len(data["gaps"][0]) if data["gaps"] else 1
        return cls(np.array(data["sample_steps"]), np.array(data["gaps"], dtype=float).reshape(-1, d),
                   data.get("meta", {}))


def default_schedule(n_max: int, samples: int = 1000) -> np.ndarray:
    """Evenly spaced sample steps ending at ``n_max``."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    stride = max(1, n_max // samples)
    steps = np.arange(stride, n_max + 1, stride)
    if steps[-1] != n_max:
        steps = np.append(steps, n_max)
    return steps


def _schedule(n_max, rule) -> np.ndarray:
    if rule is None:
        return default_schedule(n_max)
    if isinstance(rule, (int, np.integer)):
        steps = np.arange(int(rule), n_max + 1, int(rule))
        if len(steps) == 0 or steps[-1] != n_max:
            steps = np.append(steps, n_max)
        return steps
    if rule == "geometric":
        steps = np.unique(np.round(np.geomspace(1, n_max, 200)).astype(np.int64))
        return steps
    steps = np.asarray(rule, dtype=np.int64)
    if np.any(steps < 1) or np.any(steps > n_max) or np.any(np.diff(steps) <= 0):
        raise ValueError("explicit schedule must be increasing within [1, n_max]")
    return steps


def run_products(seq: SequenceSource, epsilon: float, seed: int, streams: Sequence[int], n_max: int,
                 sample_steps, start: int = 1, renorm_period: int = 1) -> np.ndarray:
    """Log singular values of perturbed products for several noise streams.

    The product for stream ``t`` is ``A_{n,eps} ... A_{start,eps}`` with
    ``A_{i,eps} = A_i + eps * Xi_i(seed, streams[t])``.

    Returns
    -------
    ndarray of shape ``(len(streams), len(sample_steps), d)``
    """
    d = seq.dim
    streams = [int(s) for s in streams]
    T = len(streams)
    sample_steps = np.asarray(sample_steps, dtype=np.int64)
    out = np.empty((T, len(sample_steps), d))
    acc = ProductAccumulator(d, trials=T, renorm_period=renorm_period)
    models = [PerturbationModel(epsilon, seed, s) for s in streams]
    k = 0
    n = start - 1
    if len(sample_steps) and sample_steps[0] < start:
        raise ValueError("sample steps must not precede the first factor")
    while k < len(sample_steps) and n < n_max:
        count = min(_CHUNK, n_max - n)
        A = seq.block(n + 1, count)
        if epsilon > 0:
            noise = np.stack([perturbation_block(m, d, n + 1, count) for m in models], axis=1)
            factors = A[:, None] + noise
        else:
            factors = np.broadcast_to(A[:, None], (count, T, d, d))
        for i in range(count):
            acc.advance(factors[i])
            n += 1
            while k < len(sample_steps) and sample_steps[k] == n:
                out[:, k] = acc.log_singular_values()
                k += 1
    return out


def gap_trajectory(seq: SequenceSource, model: PerturbationModel, n_max: int,
                   sample_schedule=None) -> GapTrajectory:
    """Gap rates of ``A_{n,eps} ... A_{1,eps}`` at the scheduled steps.

    ``sample_schedule`` may be ``None`` (about 1000 evenly spaced samples), an
    integer stride, ``"geometric"``, or an explicit increasing list of steps.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    steps = _schedule(n_max, sample_schedule)
    logs = run_products(seq, model.epsilon, model.seed, [model.stream_id], n_max, steps)[0]
    meta = {"epsilon": _io.fmt_float(model.epsilon), "seed": model.seed, "stream_id": model.stream_id,
            "sequence": seq.kind}
    return GapTrajectory(steps, gaps_from_logs(logs, steps), meta)


def liminf_proxy(gaps: np.ndarray, window: float = 0.5, segments: int = 10) -> np.ndarray:
    """Finite-horizon stand-in for the liminf of a sampled gap trajectory.

    Takes the trailing ``window`` fraction of samples, splits it into
    ``segments`` consecutive runs, averages each run and returns the smallest
    average per gap index.
    """
    gaps = np.asarray(gaps, dtype=float)
    if gaps.ndim == 1:
        gaps = gaps[:, None]
    S = len(gaps)
    if S == 0:
        raise ValueError("empty trajectory")
    first = min(S - 1, int(np.floor(S * (1.0 - window))))
    tail = gaps[first:]
    parts = np.array_split(tail, min(segments, len(tail)))
    return np.min(np.stack([p.mean(axis=0) for p in parts]), axis=0)


@dataclass(frozen=True)
class PrefixComparison:
    """Terminal gap rates with and without the first ``m`` factors.

    ``bound`` is ``2 (log C - log c) / n_max`` where ``c`` and ``C`` are the
    smallest and largest products of consecutive singular values of the
    prefix product; ``|gap_full - gap_shifted| <= bound`` must hold.
    """

    gap_full: np.ndarray
    gap_shifted: np.ndarray
    bound: float
    m: int
    n_max: int

    @property
    def difference(self) -> np.ndarray:
        return np.abs(self.gap_full - self.gap_shifted)


def _prefix_constants(logs: np.ndarray) -> tuple[float, float]:
    d = len(logs)
    partial = [logs[i:j + 1].sum() for i in range(d) for j in range(i, d)]
    return float(min(partial)), float(max(partial))


def prefix_invariance_check(seq: SequenceSource, model: PerturbationModel, m: int,
                            n_max: int) -> PrefixComparison:
    """Compare gap rates of ``A_n ... A_1`` and ``A_n ... A_{m+1}`` at ``n = n_max``.

    Both products use the same noise draws; both rates are normalised by ``n_max``.
    """
    if not 0 <= m < n_max:
        raise ValueError("need 0 <= m < n_max")
    eps, seed, stream = model.epsilon, model.seed, model.stream_id
    if m == 0:
        full = run_products(seq, eps, seed, [stream], n_max, [n_max])[0, 0]
        g = gaps_from_logs(full, n_max)
        return PrefixComparison(g, g.copy(), 0.0, 0, n_max)
    both = run_products(seq, eps, seed, [stream], n_max, [m, n_max])[0]
    prefix, full = both
    if not np.all(np.isfinite(prefix)):
        raise AccumulationError("prefix product is singular")
    shifted = run_products(seq, eps, seed, [stream], n_max, [n_max], start=m + 1)[0, 0]
    lo, hi = _prefix_constants(prefix)
    return PrefixComparison(gaps_from_logs(full, n_max), gaps_from_logs(shifted, n_max),
                            2.0 * (hi - lo) / n_max, m, n_max)
