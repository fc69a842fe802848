"""The gluing statistic and Monte Carlo checks of its tail and mean.

For matrices ``L, A, R`` and indices ``j < k`` write
``G(M) = log q(M) = log(s_j(M) / s_k(M))`` and

    F(L, A, R) = G(L A R) - G(L) - G(R),

so that ``G(L A R) = G(L) + G(R) + F(L, A, R)``.  Under additive uniform noise
``A -> A + eps * Xi`` the statistic has an exponentially decaying tail,
``P(|F| > X) <= min(1, zeta * exp(-X / (4d)) / eps)``, and a mean bounded below
by ``4d log(eps) - K`` with ``K = 4d (log(zeta) + 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _io
from ._rng import stream_key, symmetric_uniform
from .cocycle import ProductAccumulator
from .errors import PreconditionError
from .matcore import as_matrix, singular_values

__all__ = [
    "GlueSample",
    "ExpectationReport",
    "GlueConfig",
    "log_q",
    "glue_statistic",
    "glue_statistic_batch",
    "noise_matrices",
    "tail_profile",
    "fit_tail",
    "expectation_floor",
    "k_constant",
    "stress_battery",
]

FIT_WINDOW = (1e-4, 1e-1)
_INVERTIBLE_COND = 1e12


def _check_pair(j: int, k: int, d: int) -> None:
    if not 1 <= j < k <= d:
        raise PreconditionError(f"need 1 <= j < k <= {d}, got ({j}, {k})")


def _check_invertible(M: np.ndarray, name: str) -> None:
    s = singular_values(M)
    if not s[-1] > 0 or s[0] / s[-1] >= _INVERTIBLE_COND:
        raise PreconditionError(f"{name} is numerically singular")


def _product_logs(factors) -> np.ndarray:
    """Log singular values of ``factors[-1] @ ... @ factors[0]``; each factor is (d,d) or (T,d,d)."""
    shapes = [np.shape(f) for f in factors]
    d = shapes[0][-1]
    T = max((s[0] for s in shapes if len(s) == 3), default=None)
    acc = ProductAccumulator(d, trials=T)
    for f in factors:
        f = np.asarray(f, dtype=float)
        if T is not None and f.ndim == 2:
            f = np.broadcast_to(f, (T, d, d))
        acc.advance(f)
    return acc.log_singular_values()


def log_q(M, j: int, k: int) -> float:
    """``log(s_j(M) / s_k(M))``; ``inf`` when ``s_k`` vanishes."""
    M = np.asarray(M, dtype=float)
    _check_pair(j, k, M.shape[-1])
    logs = _product_logs([M])
    return float(logs[j - 1] - logs[k - 1])


def glue_statistic(L, A, R, j: int, k: int) -> float:
    """``F(L, A, R) = log q(LAR) - log q(L) - log q(R)`` with ``q = s_j / s_k``.

    Returns ``inf`` when ``LAR`` is singular; raises
    :class:`PreconditionError` when ``L`` or ``R`` is.

    >>> glue_statistic(np.diag([2.0, 1.0]), np.eye(2), np.eye(2), 1, 2)
    0.0
    """
    L = as_matrix(L)
    d = L.shape[0]
    A = as_matrix(A, d)
    R = as_matrix(R, d)
    return float(glue_statistic_batch(L, A[None], R, j, k)[0])


def glue_statistic_batch(L, A, R, j: int, k: int) -> np.ndarray:
    """:func:`glue_statistic` for a stack of middle matrices ``A`` of shape ``(T, d, d)``."""
    L = np.asarray(L, dtype=float)
    R = np.asarray(R, dtype=float)
    A = np.asarray(A, dtype=float)
    d = L.shape[-1]
    _check_pair(j, k, d)
    _check_invertible(L, "L")
    _check_invertible(R, "R")
    gl = _product_logs([L])
    gr = _product_logs([R])
    base = (gl[j - 1] - gl[k - 1]) + (gr[j - 1] - gr[k - 1])
    logs = _product_logs([R, A, L])
    with np.errstate(invalid="ignore"):
        G = logs[:, j - 1] - logs[:, k - 1]
    G = np.where(np.isfinite(G), G, np.inf)
    return G - base


def noise_matrices(d: int, trials: int, seed: int, stream: int) -> np.ndarray:
    """``trials`` matrices with i.i.d. entries uniform on ``[-1, 1)``, trial ``t`` at counter ``t + 1``."""
    return symmetric_uniform(seed, stream, 1, trials, d * d).reshape(trials, d, d)


@dataclass
class GlueSample:
    """Empirical tail of ``|F|`` on a grid and its exponential fit.

    Attributes
    ----------
    X_values, empirical_tail : ndarray
        Grid and ``P(|F| > X)`` estimated over all trials (saturated trials count as exceedances).
    rate, rate_stderr : float
        Decay rate from regressing ``log P`` on ``X`` where ``P`` lies in the fit window.
    log_intercept, log_intercept_stderr : float
        Intercept of that regression.
    zeta_hat : float
        Smallest ``zeta`` with ``P(X) <= zeta exp(-X / (4d)) / eps`` at every grid point.
    n_saturated : int
        Trials where ``LAR`` was singular.
    degenerate : bool
        Fewer than three grid points in the fit window; the fit fields are ``nan``.
    """

    X_values: np.ndarray
    empirical_tail: np.ndarray
    trials: int
    j: int
    k: int
    d: int
    epsilon: float
    rate: float
    rate_stderr: float
    log_intercept: float
    log_intercept_stderr: float
    zeta_hat: float
    n_saturated: int = 0
    degenerate: bool = False
    fit_points: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def reference_rate(self) -> float:
        return 1.0 / (4.0 * self.d)

    def bound(self, X=None) -> np.ndarray:
        """``min(1, zeta_hat * exp(-X / (4d)) / eps)`` on the grid (or at ``X``)."""
        X = self.X_values if X is None else np.asarray(X, dtype=float)
        with np.errstate(over="ignore"):
            return np.minimum(1.0, self.zeta_hat * np.exp(-X * self.reference_rate) / self.epsilon)

    def fitted(self) -> np.ndarray:
        if self.degenerate:
            return np.full(len(self.X_values), np.nan)
        return np.exp(self.log_intercept - self.rate * self.X_values)

    def to_csv(self) -> str:
        header = dict(self.meta)
        header.update({"trials": self.trials, "j": self.j, "k": self.k, "d": self.d,
                       "epsilon": _io.fmt_float(self.epsilon), "rate": _io.fmt_float(self.rate),
                       "zeta_hat": _io.fmt_float(self.zeta_hat)})
        rows = zip(self.X_values.tolist(), self.empirical_tail.tolist(), self.fitted().tolist(),
                   self.bound().tolist())
        return _io.write_csv(header, ["X", "tail", "fit", "bound"], rows)

    def to_dict(self) -> dict:
        return {
            "X_values": self.X_values, "empirical_tail": self.empirical_tail, "trials": self.trials,
            "j": self.j, "k": self.k, "d": self.d, "epsilon": self.epsilon, "rate": self.rate,
            "rate_stderr": self.rate_stderr, "log_intercept": self.log_intercept,
            "log_intercept_stderr": self.log_intercept_stderr, "zeta_hat": self.zeta_hat,
            "n_saturated": self.n_saturated, "degenerate": self.degenerate,
            "fit_points": self.fit_points, "meta": dict(self.meta),
        }

    def to_json(self) -> str:
        return _io.dumps_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GlueSample":
        data = _io.loads_json(text)
        data["X_values"] = np.array(data["X_values"], dtype=float)
        data["empirical_tail"] = np.array(data["empirical_tail"], dtype=float)
        return cls(**data)


def _default_grid(absF: np.ndarray, points: int = 121) -> np.ndarray:
    finite = absF[np.isfinite(absF)]
    top = float(np.max(finite)) if len(finite) else 1.0
    return np.linspace(0.0, max(top, 1e-12), points)


def fit_tail(X: np.ndarray, tail: np.ndarray, window=FIT_WINDOW):
    """Least-squares fit of ``log tail = a - r X`` over grid points with tail in ``window``.

    Returns ``(r, r_stderr, a, a_stderr, points)``; all ``nan`` with fewer than three points.
    """
    X = np.asarray(X, dtype=float)
    tail = np.asarray(tail, dtype=float)
    mask = (tail >= window[0]) & (tail <= window[1])
    n = int(mask.sum())
    if n < 3 or np.ptp(X[mask]) == 0:
        return math.nan, math.nan, math.nan, math.nan, n
    res = stats.linregress(X[mask], np.log(tail[mask]))
    return -float(res.slope), float(res.stderr), float(res.intercept), float(res.intercept_stderr), n


def _sample_F(L, A, R, j, k, eps, trials, seed, stream) -> np.ndarray:
    L = as_matrix(L)
    d = L.shape[0]
    A = as_matrix(A, d)
    if singular_values(A)[0] > 1.0 + 1e-12:
        raise PreconditionError("A must have operator norm at most 1")
    out = np.empty(trials)
    chunk = 1 << 15
    for lo in range(0, trials, chunk):
        cnt = min(chunk, trials - lo)
        xi = symmetric_uniform(seed, stream, lo + 1, cnt, d * d).reshape(cnt, d, d)
        out[lo:lo + cnt] = glue_statistic_batch(L, A[None] + eps * xi, R, j, k)
    return out


def _glue_stream(L, A, R, j, k, eps) -> int:
    key = (np.asarray(L).tobytes().hex(), np.asarray(A).tobytes().hex(), np.asarray(R).tobytes().hex())
    return stream_key("glue", *key, j, k, _io.fmt_float(eps))


def tail_profile(L, A, R, j: int, k: int, eps: float, trials: int, X_grid=None, seed: int = 0,
                 min_trials: int = 10_000, grid_points: int = 121) -> GlueSample:
    """Monte Carlo tail of ``|F(L, A + eps Xi, R)|`` with an exponential fit.

    The noise for trial ``t`` depends only on ``(seed, L, A, R, j, k, eps, t)``.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if trials < min_trials:
        raise PreconditionError(f"at least {min_trials} trials are required")
    F = _sample_F(L, A, R, j, k, eps, trials, seed, _glue_stream(L, A, R, j, k, eps))
    return _profile_from_samples(F, np.asarray(L).shape[-1], j, k, eps, X_grid, grid_points)


def _profile_from_samples(F, d, j, k, eps, X_grid=None, grid_points: int = 121) -> GlueSample:
    absF = np.abs(F)
    trials = len(F)
    X = _default_grid(absF, grid_points) if X_grid is None else np.asarray(X_grid, dtype=float)
    srt = np.sort(absF)
    # P(|F| > X) = (number of samples strictly above X) / trials; non-increasing in X
    tail = (trials - np.searchsorted(srt, X, side="right")) / trials
    rate, rse, a, ase, npts = fit_tail(X, tail)
    pos = tail > 0
    zeta = float(np.max(eps * tail[pos] * np.exp(X[pos] / (4.0 * d)))) if pos.any() else 0.0
    return GlueSample(X, tail, trials, j, k, d, float(eps), rate, rse, a, ase, zeta,
                      int(np.sum(~np.isfinite(F))), bool(npts < 3), npts)


def k_constant(d: int, zeta: float) -> float:
    """``K = 4d (log(zeta) + 1)``, the offset in ``E F >= 4d log(eps) - K``."""
    return 4.0 * d * (math.log(zeta) + 1.0)


@dataclass(frozen=True)
class ExpectationReport:
    """Sample mean of ``F`` against the floor ``4d log(eps) - K``."""

    mean: float
    stderr: float
    floor: float
    K: float
    zeta_hat: float
    trials: int
    n_saturated: int

    @property
    def holds(self) -> bool:
        """Mean at or above the floor, allowing three standard errors."""
        return self.mean >= self.floor - 3.0 * self.stderr

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "floor": self.floor, "K": self.K,
                "zeta_hat": self.zeta_hat, "trials": self.trials, "n_saturated": self.n_saturated,
                "holds": self.holds}


def expectation_floor(L, A, R, j: int, k: int, eps: float, trials: int, zeta_hat: float | None = None,
                      seed: int = 0, min_trials: int = 10_000) -> ExpectationReport:
    """Mean and standard error of ``F(L, A + eps Xi, R)`` with the floor ``4d log(eps) - K``.

    ``K`` uses ``zeta_hat``; when omitted it is estimated from the same
    samples as in :func:`tail_profile`.  Saturated trials are excluded from
    the mean and counted.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if trials < min_trials:
        raise PreconditionError(f"at least {min_trials} trials are required")
    d = np.asarray(L).shape[-1]
    F = _sample_F(L, A, R, j, k, eps, trials, seed, _glue_stream(L, A, R, j, k, eps))
    if zeta_hat is None:
        zeta_hat = _profile_from_samples(F, d, j, k, eps).zeta_hat
    finite = F[np.isfinite(F)]
    mean = float(np.mean(finite))
    stderr = float(np.std(finite, ddof=1) / math.sqrt(len(finite)))
    K = k_constant(d, zeta_hat)
    return ExpectationReport(mean, stderr, 4.0 * d * math.log(eps) - K, K, float(zeta_hat), trials,
                             int(len(F) - len(finite)))


@dataclass(frozen=True)
class GlueConfig:
    """One ``(L, A, R, j, k)`` configuration of the stress battery."""

    name: str
    L: np.ndarray
    A: np.ndarray
    R: np.ndarray
    j: int
    k: int


def _rotation(d: int, theta: float, p: int = 0, q: int = 1) -> np.ndarray:
    G = np.eye(d)
    c, s = math.cos(theta), math.sin(theta)
    G[p, p] = G[q, q] = c
    G[p, q], G[q, p] = -s, s
    return G


def stress_battery(d: int) -> list[GlueConfig]:
    """Eight fixed ``(L, A, R)`` configurations mixing benign and adversarial factors."""
    if d < 2:
        raise PreconditionError("d must be at least 2")
    I = np.eye(d)
    Z = np.zeros((d, d))
    squash = np.diag([1.0] + [1e-6] * (d - 1))
    graded = np.diag(10.0 ** -np.arange(d, dtype=float) * 2)
    rot = _rotation(d, math.pi / 4)
    flip = np.eye(d)[::-1].copy()
    rank_one = np.zeros((d, d))
    rank_one[0, 0] = 1.0
    nilpotent = np.diag(np.ones(d - 1), 1)
    last = (d - 1, d)
    mid = (1, d) if d > 2 else (1, 2)
    return [
        GlueConfig("identity-zero", I, Z, I, 1, 2),
        GlueConfig("identity-identity", I, I, I, 1, 2),
        GlueConfig("squash-left", squash, I, I, 1, 2),
        GlueConfig("squash-right", I, Z, squash, *last),
        GlueConfig("squash-both-rotated", squash, rot, squash, *mid),
        GlueConfig("graded-flip", graded, rank_one, flip @ graded, 1, 2),
        GlueConfig("rotated-nilpotent", rot, nilpotent, rot.T, *last),
        GlueConfig("squash-swap", squash, flip, squash, *mid),
    ]
