"""Target blocks: small perturbations of a block of matrices whose product has
a prescribed singular value gap.

A *block* is a sequence ``M_1, ..., M_L`` of invertible d x d matrices, stored
as an array of shape ``(L, d, d)`` and multiplied as ``M_L ... M_1``.  Indices
in the public API are 1-based, matching the usual way of writing products.

For the block product ``B`` with right singular vectors ``v_1..v_d`` (left
``u_1..u_d``), ``E_{j,n}`` is the image of ``span(v_1..v_j)`` under
``M_n ... M_1`` and ``F_{j,n}`` the image of ``span(v_{j+1}..v_d)``;
``delta[n, j]`` is the distance between their unit spheres.  The fast spaces
are carried forward from ``v``; the slow spaces are carried backward from
``u`` through inverses, which keeps both numerically stable.

Every builder returns a :class:`TargetBlock` whose gap has been recomputed
from the assembled product by a separate stable product SVD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _io
from ._rng import symmetric_uniform, stream_key
from .cocycle import ProductAccumulator
from .errors import CertificationError, InvertibilityError, PreconditionError
from .matcore import (
    MAX_DIM,
    MIN_DIM,
    angle,
    op_norm,
    oblique_projection_batch,
    principal_pairs_batch,
    singular_values,
    sphere_distance_batch,
)

__all__ = [
    "TargetBlock",
    "BlockClassification",
    "SubspaceEvolution",
    "nonsingular_init",
    "product_log_singular_values",
    "singular_vector_evolution",
    "delta_table",
    "classify_block",
    "spread_length",
    "extremal_length",
    "three_by_three_eta",
    "three_by_three_length",
    "build_spread_target",
    "build_spread_targets",
    "aligned_gap_certificate",
    "build_extremal_target",
    "split_gap_locator",
    "rotation_between",
    "build_3x3_aligned_target",
    "build_3x3_target",
    "build_3x3_target_23",
    "target_continuity_check",
    "continuity_radius",
    "log_hit_probability_floor",
    "log_ball_volume_ratio",
]

INVERTIBILITY_COND = 1e12
NEAR_IDENTITY_TOL = 1e-10
# relative slack when re-checking a certified ratio against its threshold
_RATIO_RTOL = 1e-12


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _as_block(block) -> np.ndarray:
    M = np.asarray(block, dtype=float)
    if M.ndim == 2:
        M = M[None]
    if M.ndim != 3 or M.shape[1] != M.shape[2]:
        raise PreconditionError(f"a block must have shape (L, d, d), got {M.shape}")
    if not MIN_DIM <= M.shape[1] <= MAX_DIM:
        raise PreconditionError(f"dimension {M.shape[1]} outside [{MIN_DIM}, {MAX_DIM}]")
    if len(M) == 0:
        raise PreconditionError("empty block")
    if not np.all(np.isfinite(M)):
        raise PreconditionError("block entries must be finite")
    return M


def _check_invertible(blocks: np.ndarray) -> None:
    s = singular_values(blocks)
    with np.errstate(divide="ignore"):
        c = np.where(s[..., -1] > 0, s[..., 0] / np.where(s[..., -1] > 0, s[..., -1], 1.0), np.inf)
    bad = np.argwhere(~(c < INVERTIBILITY_COND))
    if len(bad):
        idx = tuple(int(i) for i in bad[0])
        raise InvertibilityError(f"factor {idx[-1] + 1} is numerically singular (cond >= {INVERTIBILITY_COND:g})")


def _batched_products(blocks: np.ndarray, track_right: bool = False):
    """Stable SVD data of ``M_L ... M_1`` for each block in a stack ``(B, L, d, d)``."""
    B, L, d, _ = blocks.shape
    acc = ProductAccumulator(d, trials=B, track_right=track_right)
    for n in range(L):
        acc.advance(blocks[:, n])
    if track_right:
        return acc.svd_factors()
    return acc.log_singular_values()


def product_log_singular_values(matrices) -> np.ndarray:
    """Natural logs of the singular values of ``M_L ... M_1`` (descending).

    Accepts a block ``(L, d, d)`` or a stack of equal-length blocks ``(B, L, d, d)``.
    """
    M = np.asarray(matrices, dtype=float)
    if M.ndim == 3:
        return _batched_products(M[None])[0]
    return _batched_products(M)


def _log_ratio(matrices, j: int, k: int) -> float:
    logs = product_log_singular_values(matrices)
    return float(logs[j - 1] - logs[k - 1])


def _near_identity_excess(R: np.ndarray, eps: float) -> np.ndarray | float:
    """``max(||R - I||, ||R^-1 - I||) - eps/4`` for one matrix or a stack."""
    d = R.shape[-1]
    a = op_norm(R - np.eye(d))
    b = op_norm(np.linalg.inv(R) - np.eye(d))
    return np.maximum(a, b) - eps / 4


# ----------------------------------------------------------------------------
# data types
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockClassification:
    """Spread/aligned verdict for a block.

    ``verdict`` is ``"spread"`` when every ``delta[n, j]`` exceeds
    ``threshold``; otherwise ``"aligned"`` with the first violating ``(n, j)``
    (scanning ``n`` ascending, then ``j``) and its ``delta``.  ``deltas`` has
    shape ``(L, d-1)`` and row ``n-1`` holds ``delta[n, 1..d-1]``.
    """

    verdict: str
    threshold: float
    deltas: np.ndarray
    n: int | None = None
    j: int | None = None
    delta: float | None = None

    @property
    def is_spread(self) -> bool:
        return self.verdict == "spread"


@dataclass(frozen=True)
class SubspaceEvolution:
    """Bases of ``E_{j,n}`` and ``F_{j,n}`` for ``n = 1..L`` and their sphere distances.

    ``E[n-1]`` has shape ``(j, d)`` and ``F[n-1]`` shape ``(d-j, d)``, both
    with orthonormal rows.
    """

    j: int
    E: np.ndarray
    F: np.ndarray
    deltas: np.ndarray


@dataclass(frozen=True)
class TargetBlock:
    """A certified target for the sub-range ``[start, stop]`` of a block.

    Attributes
    ----------
    start, stop : int
        1-based inclusive range of replaced factors.
    matrices : ndarray, shape (stop - start + 1, d, d)
        The replacement factors.
    originals : ndarray
        The factors they replace.
    kinds : tuple of str
        Per factor: ``"left"`` (``R @ M``), ``"right"`` (``M @ R``) or ``"unchanged"``.
    rotations : tuple
        The ``R`` matrices (``None`` for unchanged factors).
    j, k : int
        Singular value indices of the certified gap.
    log_ratio : float
        ``log(s_j / s_k)`` of the assembled product, recomputed at construction.
    epsilon, gamma : float
        Noise amplitude the perturbations are measured against, and the gap threshold.
    method : str
        Which construction produced the target.
    """

    start: int
    stop: int
    matrices: np.ndarray
    originals: np.ndarray
    kinds: tuple
    rotations: tuple
    j: int
    k: int
    log_ratio: float
    epsilon: float
    gamma: float
    method: str

    @property
    def length(self) -> int:
        return self.stop - self.start + 1

    @property
    def dim(self) -> int:
        return self.matrices.shape[-1]

    @property
    def ratio(self) -> float:
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_ratio))

    @property
    def certified_gap(self) -> tuple[int, int, float]:
        return self.j, self.k, self.ratio

    def product(self) -> np.ndarray:
        P = np.eye(self.dim)
        for M in self.matrices:
            P = M @ P
        return P

    def revalidate(self) -> float:
        """Recompute the certificate; raises :class:`CertificationError` on failure."""
        _validate(self)
        return self.log_ratio

    def to_dict(self) -> dict:
        return {
            "range": [self.start, self.stop],
            "matrices": self.matrices.tolist(),
            "originals": self.originals.tolist(),
            "perturbations": [
                {"kind": kind, "R": None if R is None else np.asarray(R).tolist()}
                for kind, R in zip(self.kinds, self.rotations)
            ],
            "certificate": {"j": self.j, "k": self.k, "log_ratio": self.log_ratio, "ratio": self.ratio},
            "epsilon": self.epsilon,
            "gamma": self.gamma,
            "method": self.method,
        }

    def to_json(self) -> str:
        return _io.dumps_json(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TargetBlock":
        data = _io.loads_json(text)
        perts = data["perturbations"]
        t = cls(
            start=int(data["range"][0]),
            stop=int(data["range"][1]),
            matrices=np.array(data["matrices"], dtype=float),
            originals=np.array(data["originals"], dtype=float),
            kinds=tuple(p["kind"] for p in perts),
            rotations=tuple(None if p["R"] is None else np.array(p["R"], dtype=float) for p in perts),
            j=int(data["certificate"]["j"]),
            k=int(data["certificate"]["k"]),
            log_ratio=float(data["certificate"]["log_ratio"]),
            epsilon=float(data["epsilon"]),
            gamma=float(data["gamma"]),
            method=str(data["method"]),
        )
        t.revalidate()
        return t


def _structural_check(t: TargetBlock) -> None:
    n = t.length
    if t.start < 1 or t.stop < t.start:
        raise CertificationError(f"invalid range [{t.start}, {t.stop}]")
    if t.matrices.shape[0] != n or t.originals.shape != t.matrices.shape:
        raise CertificationError("matrix count does not match the range")
    if len(t.kinds) != n or len(t.rotations) != n:
        raise CertificationError("perturbation list does not match the range")
    moved = []
    for i, (kind, Mh, M) in enumerate(zip(t.kinds, t.matrices, t.originals)):
        if kind == "unchanged":
            if not np.array_equal(Mh, M):
                raise CertificationError(f"factor {t.start + i} marked unchanged but differs")
        elif kind in ("left", "right"):
            moved.append(i)
        else:
            raise CertificationError(f"unknown perturbation kind {kind!r}")
    if not moved:
        return
    R = np.array([np.asarray(t.rotations[i], dtype=float) for i in moved])
    M = t.originals[moved]
    left = np.array([t.kinds[i] == "left" for i in moved])[:, None, None]
    expect = np.where(left, R @ M, M @ R)
    scale = np.maximum(1.0, np.abs(M).max(axis=(1, 2)))
    bad = np.abs(expect - t.matrices[moved]).max(axis=(1, 2)) > 1e-12 * scale
    bad_near = _near_identity_excess(R, t.epsilon) > NEAR_IDENTITY_TOL
    for i, b, bn in zip(moved, bad, bad_near):
        if b:
            raise CertificationError(f"factor {t.start + i} is not the recorded perturbation")
        if bn:
            raise CertificationError(f"factor {t.start + i}: perturbation is not near-identity")


def _check_ratio(log_ratio: float, gamma: float, where: str) -> None:
    if not log_ratio >= np.log(gamma) - _RATIO_RTOL * max(1.0, abs(np.log(gamma))):
        raise CertificationError(f"{where}: recomputed gap {np.exp(log_ratio):.6g} is below {gamma:.6g}")


def _validate(t: TargetBlock) -> None:
    _structural_check(t)
    lr = _log_ratio(t.matrices, t.j, t.k)
    if abs(lr - t.log_ratio) > 1e-9 * max(1.0, abs(lr)):
        raise CertificationError("stored log ratio disagrees with the recomputed product")
    _check_ratio(lr, t.gamma, t.method)


def _make_target(start, originals, matrices, kinds, rotations, j, k, eps, gamma, method,
                 log_ratio=None) -> TargetBlock:
    """Assemble, structurally check and certify a target."""
    matrices = np.array(matrices, dtype=float)
    originals = np.array(originals, dtype=float)
    matrices.setflags(write=False)
    originals.setflags(write=False)
    if log_ratio is None:
        log_ratio = _log_ratio(matrices, j, k)
    t = TargetBlock(int(start), int(start) + len(matrices) - 1, matrices, originals, tuple(kinds),
                    tuple(rotations), int(j), int(k), float(log_ratio), float(eps), float(gamma), method)
    _structural_check(t)
    _check_ratio(t.log_ratio, gamma, method)
    return t


def _unchanged_target(block, a, b, j, k, eps, gamma, method, log_ratio=None) -> TargetBlock:
    sub = block[a - 1:b]
    return _make_target(a, sub, sub, ["unchanged"] * len(sub), [None] * len(sub), j, k, eps, gamma,
                        method, log_ratio)


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------

def nonsingular_init(A, eps: float) -> np.ndarray:
    """Nearby matrix with controlled norm and smallest singular value.

    Keeps the singular vectors of ``A`` and maps each singular value ``s`` to
    ``(1 - eps) s + eps / 2``.  Then ``||A' - A|| <= eps/2``,
    ``||A'|| <= max(1/2, 1 - eps/2)`` and ``s_d(A') >= eps/2``.  Accepts a
    single matrix or a stack.

    >>> nonsingular_init(np.eye(3), 0.5).diagonal().tolist()
    [0.75, 0.75, 0.75]
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    A = np.asarray(A, dtype=float)
    # the map only needs absolute accuracy, so LAPACK's faster SVD is enough here
    U, s, Vt = np.linalg.svd(A)
    if np.any(s[..., 0] > 1.0 + 1e-12):
        raise PreconditionError("nonsingular_init requires ||A|| <= 1")
    t = (1.0 - eps) * s + eps / 2.0
    return (U * t[..., None, :]) @ Vt


# ----------------------------------------------------------------------------
# subspace evolution
# ----------------------------------------------------------------------------

def _evolve(blocks: np.ndarray, U: np.ndarray, V: np.ndarray):
    """Nested frames for the fast and slow spaces along each block.

    Returns ``(Efr, Ffr)`` of shape ``(B, L, d, d)``: the first ``j`` columns
    of ``Efr[:, n-1]`` span ``E_{j,n}``, the last ``d-j`` columns of
    ``Ffr[:, n-1]`` span ``F_{j,n}``.
    """
    B, L, d, _ = blocks.shape
    Efr = np.empty((B, L, d, d))
    Ffr = np.empty((B, L, d, d))
    Q = V
    for n in range(L):
        Q, _ = np.linalg.qr(blocks[:, n] @ Q)
        Efr[:, n] = Q
    G = U
    Ffr[:, L - 1] = G
    for n in range(L - 1, 0, -1):
        G = np.linalg.solve(blocks[:, n], G)
        q, _ = np.linalg.qr(G[:, :, ::-1])
        G = q[:, :, ::-1]
        Ffr[:, n - 1] = G
    return Efr, Ffr


def _rows(frames: np.ndarray, lo: int, hi: int) -> np.ndarray:
    return np.swapaxes(frames[..., :, lo:hi], -1, -2)


def _deltas_from_frames(Efr, Ffr) -> np.ndarray:
    d = Efr.shape[-1]
    out = np.empty(Efr.shape[:-2] + (d - 1,))
    for j in range(1, d):
        out[..., j - 1] = sphere_distance_batch(_rows(Efr, 0, j), _rows(Ffr, j, d))
    return out


class _Analysis:
    """Frames and delta table of a stack of blocks, computed once and shared."""

    def __init__(self, blocks: np.ndarray, check: bool = True):
        if check:
            _check_invertible(blocks)
        self.blocks = blocks
        self.U, self.logs, self.V = _batched_products(blocks, track_right=True)
        self.Efr, self.Ffr = _evolve(blocks, self.U, self.V)
        self.deltas = _deltas_from_frames(self.Efr, self.Ffr)

    def projections(self, j: int) -> np.ndarray:
        d = self.blocks.shape[-1]
        return oblique_projection_batch(_rows(self.Efr, 0, j), _rows(self.Ffr, j, d))


def _single(block) -> tuple[np.ndarray, _Analysis]:
    M = _as_block(block)
    return M, _Analysis(M[None])


def singular_vector_evolution(block, j: int) -> SubspaceEvolution:
    """``E_{j,n}``, ``F_{j,n}`` and ``delta_{n,j}`` for every ``n`` in the block."""
    M, an = _single(block)
    d = M.shape[-1]
    if not 1 <= j < d:
        raise PreconditionError(f"j must satisfy 1 <= j < {d}")
    return SubspaceEvolution(j, _rows(an.Efr[0], 0, j), _rows(an.Ffr[0], j, d), an.deltas[0, :, j - 1].copy())


def delta_table(block) -> np.ndarray:
    """All ``delta[n, j]`` as an array of shape ``(L, d-1)``."""
    return _single(block)[1].deltas[0].copy()


def _classify(deltas: np.ndarray, eta: float) -> BlockClassification:
    bad = np.argwhere(~(deltas > eta))
    if len(bad) == 0:
        return BlockClassification("spread", float(eta), deltas)
    n, j = (int(x) for x in bad[0])  # argwhere scans row-major: n first, then j
    return BlockClassification("aligned", float(eta), deltas, n + 1, j + 1, float(deltas[n, j]))


def classify_block(block, eta: float) -> BlockClassification:
    """Spread if every ``delta[n, j] > eta``, else aligned at the first violation."""
    return _classify(delta_table(block), eta)


# ----------------------------------------------------------------------------
# spread blocks
# ----------------------------------------------------------------------------

def spread_length(eps: float, eta: float, gamma: float) -> int:
    """Smallest block length ``L`` with ``L >= 16 log(gamma) / (eps * eta)``."""
    return max(1, int(np.ceil(16.0 * np.log(gamma) / (eps * eta))))


def _check_spread_args(eps, eta, gamma):
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if not 0.0 < eta <= 1.0:
        raise PreconditionError("eta must lie in (0, 1]")
    if not gamma >= 1.0:
        raise PreconditionError("gamma must be at least 1")


def _spread_from_analysis(an: _Analysis, idx: Sequence[int], j: int, eps: float, eta: float,
                          gamma: float, method: str = "spread") -> list[TargetBlock]:
    blocks = an.blocks[list(idx)]
    B, L, d, _ = blocks.shape
    if L < 16.0 * np.log(gamma) / (eps * eta) * (1.0 - 1e-12):
        raise PreconditionError(
            f"block length {L} is below the required {16.0 * np.log(gamma) / (eps * eta):.6g}")
    deltas = an.deltas[list(idx)]
    if not np.all(deltas > eta):
        raise PreconditionError(f"block is not {eta:g}-spread (min delta {deltas.min():.3g})")
    Pi = oblique_projection_batch(_rows(an.Efr[list(idx)], 0, j), _rows(an.Ffr[list(idx)], j, d))
    R = np.eye(d) + (eps * eta / 8.0) * Pi  # (B, L, d, d)
    Mh = R @ blocks
    logs = _batched_products(Mh)
    out = []
    for b in range(B):
        out.append(_make_target(1, blocks[b], Mh[b], ["left"] * L, list(R[b]), j, j + 1, eps, gamma,
                                method, logs[b, j - 1] - logs[b, j]))
    return out


def build_spread_target(block, j: int, eps: float, eta: float, gamma: float) -> TargetBlock:
    """Target for an ``eta``-spread block: ``M_n -> (I + (eps*eta/8) Pi_n) M_n``.

    ``Pi_n`` projects onto ``E_{j,n}`` along ``F_{j,n}``.  The first ``j``
    singular values of the product are multiplied by
    ``(1 + eps*eta/8)**L`` and the rest are unchanged, so the ``(j, j+1)``
    ratio reaches ``gamma`` once ``L >= 16 log(gamma) / (eps*eta)``.
    """
    _check_spread_args(eps, eta, gamma)
    M, an = _single(block)
    if not 1 <= j < M.shape[-1]:
        raise PreconditionError("j out of range")
    return _spread_from_analysis(an, [0], j, eps, eta, gamma)[0]


def build_spread_targets(blocks, j: int, eps: float, eta: float, gamma: float) -> list[TargetBlock]:
    """Vectorised :func:`build_spread_target` for a stack ``(B, L, d, d)`` of equal-length blocks."""
    _check_spread_args(eps, eta, gamma)
    blocks = np.asarray(blocks, dtype=float)
    if blocks.ndim != 4:
        raise PreconditionError("expected a stack of blocks with shape (B, L, d, d)")
    an = _Analysis(blocks)
    return _spread_from_analysis(an, range(len(blocks)), j, eps, eta, gamma)


# ----------------------------------------------------------------------------
# extremal gaps (any d, and d = 2)
# ----------------------------------------------------------------------------

def aligned_gap_certificate(B, u, v, orthogonal: str = "inputs") -> float:
    """Angle certificate for an extremal gap.

    With ``orthogonal="inputs"``, ``u`` and ``v`` must be orthogonal and the
    return value is ``eta = angle(Bu, Bv)``; then ``s_1(B)/s_d(B) >= 1/eta``.
    With ``orthogonal="images"``, ``Bu`` and ``Bv`` must be orthogonal and the
    return value is ``angle(u, v)`` with the same consequence (apply the first
    form to ``B^{-1}``).
    """
    B = np.asarray(B, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_invertible(B[None])
    if orthogonal == "inputs":
        a, b = u, v
    elif orthogonal == "images":
        a, b = B @ u, B @ v
    else:
        raise ValueError("orthogonal must be 'inputs' or 'images'")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0 or abs(a @ b) / (na * nb) > 1e-10:
        raise PreconditionError("the vectors are not orthogonal")
    if orthogonal == "inputs":
        return angle(B @ u, B @ v)
    return angle(u, v)


def extremal_length(eps: float, gamma: float) -> int:
    """Smallest block length with ``L >= (16/eps) gamma log(gamma)``."""
    return max(1, int(np.ceil(16.0 / eps * gamma * np.log(gamma))))


def build_extremal_target(block, eps: float, gamma: float) -> TargetBlock:
    """Target with ``s_1/s_d >= gamma`` for any block of the required length.

    A ``1/gamma``-spread block gets the spread target with ``j = 1``.
    Otherwise the first aligned step ``n`` gives orthogonal ``u, v`` whose
    images under ``M_n ... M_1`` are within ``1/gamma``, and that prefix is
    the target unchanged.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if not gamma >= 1.0:
        raise PreconditionError("gamma must be at least 1")
    M, an = _single(block)
    L, d = M.shape[0], M.shape[-1]
    need = 16.0 / eps * gamma * np.log(gamma)
    if L < need * (1.0 - 1e-12):
        raise PreconditionError(f"block length {L} is below the required {need:.6g}")
    cls = _classify(an.deltas[0], 1.0 / gamma)
    if cls.is_spread:
        t = _spread_from_analysis(an, [0], 1, eps, 1.0 / gamma, gamma)[0]
        lr = _log_ratio(t.matrices, 1, d)
        return TargetBlock(t.start, t.stop, t.matrices, t.originals, t.kinds, t.rotations, 1, d, lr,
                           eps, gamma, "extremal-spread")
    return _unchanged_target(M, 1, cls.n, 1, d, eps, gamma, "extremal-aligned-prefix")


# ----------------------------------------------------------------------------
# d = 3
# ----------------------------------------------------------------------------

def _gap12(matrices) -> float:
    if len(matrices) == 0:
        return 0.0
    return _log_ratio(matrices, 1, 2)


def split_gap_locator(block, n: int, gamma: float):
    """Which of ``B``, ``M_n..M_1``, ``M_L..M_{n+1}`` has ``s_1/s_2 >= gamma``.

    Returns ``"whole"``, ``"left"`` or ``"right"`` (first match in that order)
    or ``None`` if none does.
    """
    M = _as_block(block)
    if M.shape[-1] != 3:
        raise PreconditionError("the split locator is for 3 x 3 blocks")
    L = len(M)
    if not 1 <= n <= L:
        raise PreconditionError("split index out of range")
    lg = np.log(gamma)
    for name, part in (("whole", M), ("left", M[:n]), ("right", M[n:])):
        if len(part) and _gap12(part) >= lg:
            return name
    return None


def rotation_between(e, f) -> np.ndarray:
    """Rotation taking unit ``e`` to unit ``f`` in the plane they span, identity elsewhere.

    Among orthogonal maps sending ``e`` to ``f`` it minimises ``||R - I||``,
    which equals ``||e - f||``.
    """
    e = np.asarray(e, dtype=float)
    f = np.asarray(f, dtype=float)
    d = len(e)
    c = float(e @ f)
    w = f - c * e
    s = float(np.linalg.norm(w))
    if s <= 1e-300:
        if c > 0:
            return np.eye(d)
        # antipodal: any plane through e works; use the axis least aligned with e
        axis = np.zeros(d)
        axis[int(np.argmin(np.abs(e)))] = 1.0
        w = axis - (axis @ e) * e
        s = 0.0
        g = w / np.linalg.norm(w)
    else:
        g = w / s
    return (np.eye(d) + (c - 1.0) * (np.outer(e, e) + np.outer(g, g))
            + s * (np.outer(g, e) - np.outer(e, g)))


def three_by_three_eta(eps: float, gamma: float) -> float:
    return min(gamma ** -9.0, eps / 4.0)


def three_by_three_length(eps: float, gamma: float) -> int:
    """Smallest ``L >= 16 log(gamma) / (eps * eta**2)`` with ``eta = min(gamma**-9, eps/4)``."""
    eta = three_by_three_eta(eps, gamma)
    return max(1, int(np.ceil(16.0 * np.log(gamma) / (eps * eta * eta))))


def _aligned_splice(M: np.ndarray, an: _Analysis, n: int, eps: float, gamma: float) -> TargetBlock:
    L = len(M)
    bound = three_by_three_eta(eps, gamma)
    delta = float(an.deltas[0, n - 1, 1])
    if not delta < bound:
        raise PreconditionError(f"delta[{n}, 2] = {delta:.3g} is not below {bound:.3g}")
    lg = np.log(gamma)
    # shortest already-gapped candidate first: shorter targets are easier to hit
    candidates = sorted([(n, 1, n), (L - n, n + 1, L), (L, 1, L)])
    for length, a, b in candidates:
        if length == 0:
            continue
        lr = _gap12(M[a - 1:b])
        if lr >= lg:
            return _unchanged_target(M, a, b, 1, 2, eps, gamma, "aligned-unchanged", lr)
    _, e_vecs, f_vecs = principal_pairs_batch(_rows(an.Efr[0, n - 1], 0, 2)[None],
                                              _rows(an.Ffr[0, n - 1], 2, 3)[None])
    e, f = e_vecs[0, 0], f_vecs[0, 0]
    if np.linalg.norm(e + f) < np.linalg.norm(e - f):
        f = -f
    R = rotation_between(e, f)
    Mh = M.copy()
    Mh[n - 1] = R @ M[n - 1]
    kinds = ["unchanged"] * L
    rots = [None] * L
    kinds[n - 1] = "left"
    rots[n - 1] = R
    return _make_target(1, M, Mh, kinds, rots, 1, 2, eps, gamma, "aligned-splice")


def build_3x3_aligned_target(block, n: int, eps: float, gamma: float) -> TargetBlock:
    """Target with ``s_1/s_2 >= gamma`` from a step where ``delta[n, 2]`` is tiny.

    Requires ``delta[n, 2] < min(gamma**-9, eps/4)``.  If the prefix, the
    suffix or the whole product already has the gap it is returned unchanged
    (shortest first).  Otherwise the factor ``M_n`` is replaced by ``R M_n``
    with ``R`` the rotation taking the closest unit vector of ``E_{2,n}`` to
    that of ``F_{2,n}``.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if not gamma > 2.0:
        raise PreconditionError("gamma must exceed 2")
    M, an = _single(block)
    if M.shape[-1] != 3:
        raise PreconditionError("this construction is for 3 x 3 blocks")
    if len(M) < 2:
        raise PreconditionError("the block needs at least two factors")
    if not 1 <= n <= len(M):
        raise PreconditionError("n out of range")
    return _aligned_splice(M, an, n, eps, gamma)


def _unsigned_chord(a, b) -> float:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(min(np.linalg.norm(a - b), np.linalg.norm(a + b)))


def _evolved_vectors_12(an: _Analysis, n: int):
    """Directions of ``M_n..M_1 v_1`` and ``M_n..M_1 v_2`` (the latter is ``E_{2,n}`` meet ``F_{1,n}``)."""
    Efr = an.Efr[0, n - 1]
    Ffr = an.Ffr[0, n - 1]
    v1 = Efr[:, 0]
    _, e_vecs, _ = principal_pairs_batch(_rows(Efr, 0, 2)[None], _rows(Ffr, 1, 3)[None])
    return v1, e_vecs[0, 0]


def build_3x3_target(block, eps: float, gamma: float, enforce_length: bool = True) -> TargetBlock:
    """Target with ``s_1/s_2 >= gamma`` for a block of 3 x 3 matrices.

    With ``eta = min(gamma**-9, eps/4)`` the cases are tried in order:

    1. every ``delta > eta**2``: spread target with ``j = 1``;
    2. some ``delta[n, 1] <= eta**2`` and every ``delta[., 2] >= eta``: the
       evolved top two singular directions are within ``gamma**-5`` (checked)
       and :func:`split_gap_locator` picks the gapped piece;
    3. some ``delta[n, 2] < eta``: :func:`build_3x3_aligned_target`.

    The guarantee needs ``L >= 16 log(gamma) / (eps * eta**2)``.  Passing
    ``enforce_length=False`` runs the dispatch on shorter blocks; case 1 may
    then fall short of ``gamma`` and raise :class:`CertificationError`.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if not gamma > 2.0:
        raise PreconditionError("gamma must exceed 2")
    M = _as_block(block)
    if M.shape[-1] != 3:
        raise PreconditionError("this construction is for 3 x 3 blocks")
    eta = three_by_three_eta(eps, gamma)
    need = 16.0 * np.log(gamma) / (eps * eta * eta)
    if enforce_length and len(M) < need * (1.0 - 1e-12):
        raise PreconditionError(f"block length {len(M)} is below the required {need:.6g}")
    an = _Analysis(M[None])
    deltas = an.deltas[0]
    if np.all(deltas > eta * eta):
        if not enforce_length and len(M) < need:
            # the spread lemma's length precondition is waived here on request
            return _spread_unchecked_length(M, an, eps, eta * eta, gamma)
        return _spread_from_analysis(an, [0], 1, eps, eta * eta, gamma, "3x3-spread")[0]
    low1 = np.flatnonzero(deltas[:, 0] <= eta * eta)
    if len(low1) and np.all(deltas[:, 1] >= eta):
        n = int(low1[0]) + 1
        v1, v2 = _evolved_vectors_12(an, n)
        ang = _unsigned_chord(v1, v2)
        if not ang < gamma ** -5.0:
            raise CertificationError(f"evolved singular directions at step {n} are {ang:.3g} apart")
        where = split_gap_locator(M, n, gamma)
        if where is None:
            raise CertificationError("no piece of the split block carries the gap")
        a, b = {"whole": (1, len(M)), "left": (1, n), "right": (n + 1, len(M))}[where]
        return _unchanged_target(M, a, b, 1, 2, eps, gamma, f"3x3-split-{where}")
    n = int(np.flatnonzero(deltas[:, 1] < eta)[0]) + 1
    t = _aligned_splice(M, an, n, eps, gamma)
    return TargetBlock(t.start, t.stop, t.matrices, t.originals, t.kinds, t.rotations, t.j, t.k,
                       t.log_ratio, t.epsilon, t.gamma, "3x3-" + t.method)


def _spread_unchecked_length(M, an, eps, eta, gamma) -> TargetBlock:
    d = M.shape[-1]
    Pi = oblique_projection_batch(_rows(an.Efr[0], 0, 1), _rows(an.Ffr[0], 1, d))
    R = np.eye(d) + (eps * eta / 8.0) * Pi
    Mh = R @ M
    return _make_target(1, M, Mh, ["left"] * len(M), list(R), 1, 2, eps, gamma, "3x3-spread")


def build_3x3_target_23(block, eps: float, gamma: float, enforce_length: bool = True) -> TargetBlock:
    """Target with ``s_2/s_3 >= gamma``, obtained by complementarity.

    Builds a ``(1, 2)`` target for the reversed block of inverses
    ``M_L^{-1}, ..., M_1^{-1}`` and inverts it back; left perturbations
    ``R M^{-1}`` become right perturbations ``M R^{-1}``.
    """
    M = _as_block(block)
    _check_invertible(M[None])
    L = len(M)
    tilde = np.linalg.inv(M[::-1])
    tt = build_3x3_target(tilde, eps, gamma, enforce_length)
    a, b = L + 1 - tt.stop, L + 1 - tt.start
    Mh = np.linalg.inv(tt.matrices[::-1])
    kinds, rots = [], []
    for kind, R in zip(tt.kinds[::-1], tt.rotations[::-1]):
        if kind == "unchanged":
            kinds.append("unchanged")
            rots.append(None)
        elif kind == "left":
            kinds.append("right")
            rots.append(np.linalg.inv(R))
        else:
            kinds.append("left")
            rots.append(np.linalg.inv(R))
    orig = M[a - 1:b]
    # unchanged factors must stay bit-identical to the originals
    for i, kind in enumerate(kinds):
        if kind == "unchanged":
            Mh[i] = orig[i]
    return _make_target(a, orig, Mh, kinds, rots, 2, 3, eps, gamma, "complement-" + tt.method)


# ----------------------------------------------------------------------------
# continuity and hit probabilities
# ----------------------------------------------------------------------------

def continuity_radius(eps: float, d: int, N: int) -> float:
    """Entrywise radius ``(eps/4)**N / (3 d N)`` of the target area."""
    return float(np.exp(N * np.log(eps / 4.0) - np.log(3.0 * d * N)))


def log_hit_probability_floor(eps: float, d: int, N: int) -> float:
    """``log p`` with ``p = (eps/4)**(N^2 d^2) / (3 d N)**(N d^2)``."""
    return float(N * N * d * d * np.log(eps / 4.0) - N * d * d * np.log(3.0 * d * N))


def log_ball_volume_ratio(eps: float, d: int, N: int, length: int) -> float:
    """``log`` of the chance that uniform noise lands every entry of ``length`` factors in the target area.

    Each entry of ``A + eps * Xi`` falls in an interval of half-width ``r``
    with probability ``r / eps``.
    """
    return float(d * d * length * (np.log(continuity_radius(eps, d, N)) - np.log(eps)))


def target_continuity_check(target: TargetBlock, eps: float, N: int, trials: int, seed: int = 0,
                            radius_scale: float = 1.0) -> float:
    """Worst ratio factor under perturbations inside the target area.

    Samples ``trials`` perturbations with every entry within
    ``radius_scale * (eps/4)**N / (3 d N)`` of the target factors and returns
    ``min(perturbed ratio / target ratio)`` for the certified ``(j, k)``.
    The target factors must satisfy ``||M|| <= 1 - eps/4`` and
    ``s_d(M) >= eps/4``; then the result is at least 1/2.
    """
    if not 0.0 < eps < 1.0:
        raise PreconditionError("eps must lie in (0, 1)")
    if target.length > N - 1:
        raise PreconditionError(f"target of length {target.length} does not fit a block of length {N - 1}")
    if not 0.0 <= radius_scale <= 1.0:
        raise PreconditionError("radius_scale must lie in [0, 1]")
    s = singular_values(target.matrices)
    if np.any(s[:, 0] > 1.0 - eps / 4.0 + 1e-12) or np.any(s[:, -1] < eps / 4.0 - 1e-12):
        raise PreconditionError("target factors need norm <= 1 - eps/4 and s_d >= eps/4")
    d = target.dim
    r = radius_scale * continuity_radius(eps, d, N)
    base = _log_ratio(target.matrices, target.j, target.k)
    m = target.length
    stream = stream_key("continuity", target.start, target.stop, target.j, target.k)
    worst = np.inf
    chunk = 4096
    for lo in range(0, trials, chunk):
        cnt = min(chunk, trials - lo)
        # trial t uses counter index t + 1; one draw of m * d^2 values (m * d^2 <= 64 per draw)
        noise = _continuity_noise(seed, stream, lo, cnt, m, d)
        pert = target.matrices[None] + r * noise  # (cnt, m, d, d)
        logs = _batched_products(pert)
        lr = logs[:, target.j - 1] - logs[:, target.k - 1]
        worst = min(worst, float(np.min(np.exp(lr - base))))
    return worst


def _continuity_noise(seed, stream, lo, cnt, m, d):
    size = m * d * d
    per = 64
    draws = -(-size // per)
    parts = [symmetric_uniform(seed, stream + i, lo + 1, cnt, min(per, size - i * per)) for i in range(draws)]
    return np.concatenate(parts, axis=1).reshape(cnt, m, d, d)
