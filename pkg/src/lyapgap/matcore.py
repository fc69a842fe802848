"""Small dense real linear algebra for 2 <= d <= 8.

Everything here works on plain ``numpy`` arrays.  Functions whose name ends
in ``_batch`` accept stacks of inputs with arbitrary leading dimensions and are
the paths used by the Monte Carlo code; the unbatched functions are thin
wrappers around them.

The SVD is a one-sided (Hestenes) Jacobi iteration with a fixed cyclic sweep
order.  It computes small singular values to high relative accuracy and returns
singular vectors under a fixed sign convention, so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DegenerateSumError, DomainError

__all__ = [
    "SvdTriple",
    "Subspace",
    "as_matrix",
    "svd",
    "svd_batch",
    "singular_values",
    "op_norm",
    "inf_norm",
    "cond",
    "angle",
    "sphere_distance",
    "sphere_distance_batch",
    "principal_pairs_batch",
    "oblique_projection",
    "oblique_projection_batch",
    "dist_to_sphere_section",
    "dist_to_sphere_section_batch",
]

MIN_DIM = 2
MAX_DIM = 8
EPS = np.finfo(float).eps
# columns smaller than this are treated as exactly zero and completed
_ZERO_COLUMN = 1e-290
_SIGN_TOL = 1e-12
_MAX_SWEEPS = 80
# combined-basis condition number beyond which E + F is not a direct sum
_DEGENERATE_COND = 1e12


class SvdTriple(NamedTuple):
    """``A = U @ diag(s) @ V.T`` with ``s`` descending and ``U``, ``V`` orthogonal."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray


def as_matrix(A, dim: int | None = None) -> np.ndarray:
    """Validate and return ``A`` as a float64 square matrix of size 2..8."""
    M = np.asarray(A, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {M.shape}")
    if not MIN_DIM <= M.shape[0] <= MAX_DIM:
        raise DomainError(f"dimension {M.shape[0]} outside [{MIN_DIM}, {MAX_DIM}]")
    if dim is not None and M.shape[0] != dim:
        raise DomainError(f"expected dimension {dim}, got {M.shape[0]}")
    if not np.all(np.isfinite(M)):
        raise DomainError("matrix has non-finite entries")
    return M


def _jacobi(a: np.ndarray, want_v: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Orthogonalise the columns of every matrix in the stack ``a`` in place.

    ``a`` has shape (B, m, n).  On return the columns of ``a`` are mutually
    orthogonal and ``a_in @ v == a`` (up to rounding).
    """
    B, _, n = a.shape
    v = np.broadcast_to(np.eye(n), (B, n, n)).copy() if want_v else None
    tol = n * EPS
    # matrices that made no rotation in a sweep are converged and drop out
    active = np.arange(B)
    for _ in range(_MAX_SWEEPS):
        if len(active) == 0:
            break
        x = a[active]
        y = v[active] if want_v else None
        rotated = np.zeros(len(active), dtype=bool)
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = x[:, :, p]
                aq = x[:, :, q]
                alpha = np.einsum("bi,bi->b", ap, ap)
                beta = np.einsum("bi,bi->b", aq, aq)
                gamma = np.einsum("bi,bi->b", ap, aq)
                todo = np.abs(gamma) > tol * np.sqrt(alpha * beta)
                if not todo.any():
                    continue
                rotated |= todo
                g = np.where(todo, gamma, 1.0)
                # a huge |zeta| means a negligible rotation; overflow to inf gives t = 0
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * g)
                    az = np.abs(zeta)
                    t = np.copysign(1.0, zeta) / (az + np.hypot(1.0, az))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                c = np.where(todo, c, 1.0)[:, None]
                s = np.where(todo, s, 0.0)[:, None]
                for z in ((x, y) if want_v else (x,)):
                    zp = z[:, :, p].copy()
                    zq = z[:, :, q]
                    z[:, :, p] = c * zp - s * zq
                    z[:, :, q] = s * zp + c * zq
        a[active] = x
        if want_v:
            v[active] = y
        active = active[rotated]
    return a, v


def _complete_columns(U: np.ndarray, missing: np.ndarray) -> None:
    """Replace the flagged columns of ``U`` by an orthonormal completion.

    Canonical basis vectors are tried in index order, so the completion is
    deterministic.
    """
    d = U.shape[0]
    keep = [U[:, i] for i in range(U.shape[1]) if not missing[i]]
    for i in np.flatnonzero(missing):
        for k in range(d):
            w = np.zeros(d)
            w[k] = 1.0
            for _ in range(2):
                for b in keep:
                    w -= (b @ w) * b
            nw = np.linalg.norm(w)
            if nw > 0.5:
                w /= nw
                U[:, i] = w
                keep.append(w)
                break


def svd_batch(A: np.ndarray, compute_uv: bool = True):
    """SVD of a stack of square matrices with shape (..., d, d).

    Returns an :class:`SvdTriple` of stacked arrays, or only the stacked
    singular values when ``compute_uv`` is false.
    """
    A = np.asarray(A, dtype=float)
    lead = A.shape[:-2]
    d = A.shape[-1]
    a = A.reshape((-1, d, d)).copy()
    # exact power-of-two scaling keeps the squared column norms clear of under/overflow
    _, expo = np.frexp(np.abs(a).max(axis=(1, 2)))
    a = np.ldexp(a, -expo[:, None, None])
    a, v = _jacobi(a, compute_uv)
    s = np.sqrt(np.einsum("bij,bij->bj", a, a))
    order = np.argsort(-s, axis=1, kind="stable")
    s = np.take_along_axis(s, order, axis=1)
    if not compute_uv:
        return np.ldexp(s, expo[:, None]).reshape(lead + (d,))
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    zero = s <= _ZERO_COLUMN
    U = a / np.where(zero, 1.0, s)[:, None, :]
    s = np.ldexp(s, expo[:, None])
    for b in np.flatnonzero(zero.any(axis=1)):
        _complete_columns(U[b], zero[b])
    # sign convention: first coordinate of each right vector above tolerance is positive
    lead_idx = np.argmax(np.abs(v) > _SIGN_TOL, axis=1)
    lead_val = np.take_along_axis(v, lead_idx[:, None, :], axis=1)[:, 0, :]
    flip = np.where(lead_val < 0, -1.0, 1.0)[:, None, :]
    U = U * flip
    v = v * flip
    return SvdTriple(U.reshape(lead + (d, d)), s.reshape(lead + (d,)), v.reshape(lead + (d, d)))


def svd(A) -> SvdTriple:
    """Singular value decomposition of a single matrix.

    >>> U, s, V = svd([[3.0, 0.0], [0.0, -2.0]])
    >>> s.tolist()
    [3.0, 2.0]
    """
    return svd_batch(as_matrix(A))


def singular_values(A) -> np.ndarray:
    """Descending singular values; accepts a single matrix or a stack."""
    return svd_batch(np.asarray(A, dtype=float), compute_uv=False)


def op_norm(A) -> np.ndarray | float:
    """Operator 2-norm (largest singular value); stacks are supported."""
    s = singular_values(A)
    return s[..., 0] if s.ndim > 1 else float(s[0])


def inf_norm(A) -> np.ndarray | float:
    """Largest absolute entry, written ``|M|_inf`` in the estimates."""
    r = np.max(np.abs(np.asarray(A, dtype=float)), axis=(-2, -1))
    return r if np.ndim(r) else float(r)


def cond(A) -> np.ndarray | float:
    """2-norm condition number; ``inf`` for singular input."""
    s = singular_values(A)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(s[..., -1] > 0, s[..., 0] / np.where(s[..., -1] > 0, s[..., -1], 1.0), np.inf)
    return c if np.ndim(c) else float(c)


def angle(u, v) -> float:
    """Chord distance between directions, ``|| u/|u| - v/|v| ||``, in [0, 2]."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("angle is undefined for a zero vector")
    return float(np.linalg.norm(u / nu - v / nv))


def _orthonormal_rows(vectors: np.ndarray) -> np.ndarray:
    q, r = np.linalg.qr(vectors.T)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag.min() <= 1e-12 * max(1.0, diag.max()):
        raise DomainError("spanning vectors are linearly dependent")
    return q.T


@dataclass(frozen=True)
class Subspace:
    """A proper nontrivial subspace of R^d stored by an orthonormal basis.

    ``basis`` has shape (k, d) with orthonormal rows, 1 <= k < d.
    """

    basis: np.ndarray

    def __post_init__(self):
        b = np.array(self.basis, dtype=float, ndmin=2)
        k, d = b.shape
        if not 1 <= k < d:
            raise DomainError(f"subspace dimension {k} must satisfy 1 <= k < {d}")
        if np.abs(b @ b.T - np.eye(k)).max() > 1e-12:
            raise DomainError("basis rows are not orthonormal")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @classmethod
    def span(cls, *vectors) -> "Subspace":
        """Subspace spanned by the given (not necessarily orthonormal) vectors."""
        vs = np.array([np.asarray(v, dtype=float) for v in vectors], ndmin=2)
        return cls(_orthonormal_rows(vs))

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim_ambient(self) -> int:
        return self.basis.shape[1]

    def projector(self) -> np.ndarray:
        """Orthogonal projector onto the subspace."""
        return self.basis.T @ self.basis


def principal_pairs_batch(E: np.ndarray, F: np.ndarray):
    """Principal vector pairs of stacked bases ``E`` (..., k, d) and ``F`` (..., m, d).

    Returns ``(cosines, e_vecs, f_vecs)`` with ``min(k, m)`` pairs, sorted by
    decreasing cosine; ``e_vecs[..., i, :]`` lies in E and ``f_vecs[..., i, :]``
    in F.
    """
    E = np.asarray(E, dtype=float)
    F = np.asarray(F, dtype=float)
    lead = E.shape[:-2]
    k, d = E.shape[-2:]
    m = F.shape[-2]
    Eb = E.reshape((-1, k, d))
    Fb = F.reshape((-1, m, d))
    C = Eb @ np.swapaxes(Fb, 1, 2)  # (B, k, m)
    a, v = _jacobi(C.copy(), True)
    cs = np.sqrt(np.einsum("bij,bij->bj", a, a))
    order = np.argsort(-cs, axis=1, kind="stable")[:, : min(k, m)]
    cs = np.take_along_axis(cs, order, axis=1)
    a = np.take_along_axis(a, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    f_vecs = np.swapaxes(v, 1, 2) @ Fb  # (B, r, d)
    # left principal vectors: normalise E-side images; fall back to projecting f onto E
    e_coef = a / np.where(cs > 1e-300, cs, 1.0)[:, None, :]
    e_vecs = np.swapaxes(e_coef, 1, 2) @ Eb
    weak = cs <= 1e-300
    if weak.any():
        # orthogonal directions: any unit vector of E orthogonal to the others works
        for b, i in zip(*np.nonzero(weak)):
            e_vecs[b, i] = Eb[b, i % k]
    r = cs.shape[1]
    return (
        cs.reshape(lead + (r,)),
        e_vecs.reshape(lead + (r, d)),
        f_vecs.reshape(lead + (r, d)),
    )


def sphere_distance_batch(E: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Minimal distance between unit vectors of E and F for stacked bases.

    Minimises ``|| e - sigma f ||`` over principal pairs and both signs; this
    is the exact minimum of ``|| e - f ||`` over the unit spheres of E and F.
    """
    _, e, f = principal_pairs_batch(E, F)
    dplus = np.linalg.norm(e - f, axis=-1)
    dminus = np.linalg.norm(e + f, axis=-1)
    return np.minimum(dplus, dminus).min(axis=-1)


def sphere_distance(E: Subspace, F: Subspace) -> float:
    """Distance between the unit spheres of two subspaces (chord metric)."""
    if E.dim_ambient != F.dim_ambient:
        raise DomainError("subspaces live in different ambient spaces")
    return float(sphere_distance_batch(E.basis[None], F.basis[None])[0])


def oblique_projection_batch(E: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Projection onto span(E) along span(F) for stacked bases.

    ``E`` has shape (..., k, d) and ``F`` (..., d - k, d).
    """
    E = np.asarray(E, dtype=float)
    F = np.asarray(F, dtype=float)
    k, d = E.shape[-2:]
    if F.shape[-2] + k != d or F.shape[-1] != d:
        raise DegenerateSumError("dimensions of E and F do not add up to the ambient dimension")
    W = np.swapaxes(np.concatenate([E, F], axis=-2), -1, -2)  # columns: E basis then F basis
    c = np.atleast_1d(cond(W))
    if np.any(~(c < _DEGENERATE_COND)):
        raise DegenerateSumError("E and F are not complementary (combined basis is singular)")
    coeff = np.linalg.inv(W)[..., :k, :]
    return np.swapaxes(E, -1, -2) @ coeff


def oblique_projection(E: Subspace, F: Subspace) -> np.ndarray:
    """The projection onto E along F for a direct sum E + F = R^d.

    >>> E = Subspace.span([1.0, 0.0]); F = Subspace.span([1.0, 1.0])
    >>> oblique_projection(E, F).round(12).tolist()
    [[1.0, -1.0], [0.0, 0.0]]
    """
    return oblique_projection_batch(E.basis[None], F.basis[None])[0]


def dist_to_sphere_section_batch(u: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances from unit vectors ``u`` (..., d) to span(V) and to its unit sphere."""
    u = np.asarray(u, dtype=float)
    V = np.asarray(V, dtype=float)
    coef = np.einsum("...kd,...d->...k", V, u)
    p = np.einsum("...k,...kd->...d", coef, V)
    d_lin = np.linalg.norm(u - p, axis=-1)
    pn = np.linalg.norm(p, axis=-1)
    safe = np.where(pn > 0, pn, 1.0)
    d_sph = np.where(pn > 0, np.linalg.norm(u - p / safe[..., None], axis=-1), np.sqrt(2.0))
    return d_lin, d_sph


def dist_to_sphere_section(u, V: Subspace) -> tuple[float, float]:
    """Return ``(d(u, V), d(u, V ∩ S))`` for a unit vector ``u``."""
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > 1e-10:
        raise DomainError("u must be a unit vector")
    d_lin, d_sph = dist_to_sphere_section_batch(u, V.basis)
    return float(d_lin), float(d_sph)
