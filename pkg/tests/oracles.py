"""Independent reference computations used by the tests.

These deliberately avoid the package's own routines: extended precision via
mpmath for singular values and linear solves, and brute-force minimisation
for distances between unit spheres.
"""

from __future__ import annotations

import mpmath
import numpy as np
from scipy import optimize

DPS = 60


def mp_matrix(A) -> mpmath.matrix:
    A = np.asarray(A, dtype=float)
    return mpmath.matrix([[mpmath.mpf(float(x)) for x in row] for row in A])


def mp_singular_values(A, dps: int = DPS) -> list:
    """Singular values in extended precision, descending, as mpf."""
    with mpmath.workdps(dps):
        s = mpmath.svd_r(mp_matrix(A), compute_uv=False)
        return sorted((s[i] for i in range(s.rows)), reverse=True)


def mp_product_log_singular_values(mats, dps: int = DPS) -> np.ndarray:
    """``log s_i(M_L ... M_1)`` from an extended-precision direct product."""
    with mpmath.workdps(dps):
        d = np.asarray(mats[0]).shape[0]
        P = mpmath.eye(d)
        for M in mats:
            P = mp_matrix(M) * P
        s = mpmath.svd_r(P, compute_uv=False)
        vals = sorted((s[i] for i in range(s.rows)), reverse=True)
        return np.array([float(mpmath.log(v)) for v in vals])


def mp_oblique_projection(E, F, dps: int = DPS) -> np.ndarray:
    """Projection onto span(E rows) along span(F rows) by extended-precision solves."""
    E = np.asarray(E, dtype=float)
    F = np.asarray(F, dtype=float)
    k, d = E.shape
    with mpmath.workdps(dps):
        W = mp_matrix(np.vstack([E, F]).T)
        P = np.zeros((d, d))
        for col in range(d):
            x = mpmath.matrix([1 if i == col else 0 for i in range(d)])
            c = mpmath.lu_solve(W, x)
            img = [sum(c[i] * mpmath.mpf(float(E[i, r])) for i in range(k)) for r in range(d)]
            P[:, col] = [float(v) for v in img]
        return P


def _unit_from_params(basis: np.ndarray, params: np.ndarray) -> np.ndarray:
    v = params @ basis
    return v / np.linalg.norm(v)


def brute_sphere_distance(E, F, starts: int = 40, seed: int = 0) -> float:
    """``min ||e - f||`` over unit e in span(E), unit f in span(F), by multistart minimisation."""
    E = np.asarray(E, dtype=float)
    F = np.asarray(F, dtype=float)
    k, m = len(E), len(F)
    rng = np.random.default_rng(seed)

    def obj(x):
        a, b = x[:k], x[k:]
        if np.linalg.norm(a @ E) < 1e-12 or np.linalg.norm(b @ F) < 1e-12:
            return 4.0
        return float(np.linalg.norm(_unit_from_params(E, a) - _unit_from_params(F, b)))

    best = np.inf
    # coarse random search then local refinement
    cand = rng.normal(size=(4000, k + m))
    vals = np.array([obj(c) for c in cand])
    for idx in np.argsort(vals)[:starts]:
        res = optimize.minimize(obj, cand[idx], method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        best = min(best, res.fun)
    return float(best)


def brute_dist_to_sphere_section(u, V, seed: int = 0) -> float:
    """``min ||u - v||`` over unit v in span(V)."""
    u = np.asarray(u, dtype=float)
    V = np.asarray(V, dtype=float)
    rng = np.random.default_rng(seed)

    def obj(a):
        if np.linalg.norm(a @ V) < 1e-12:
            return 4.0
        return float(np.linalg.norm(u - _unit_from_params(V, a)))

    cand = rng.normal(size=(2000, len(V)))
    vals = np.array([obj(c) for c in cand])
    best = np.inf
    for idx in np.argsort(vals)[:10]:
        res = optimize.minimize(obj, cand[idx], method="Nelder-Mead",
                                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
        best = min(best, res.fun)
    return float(best)


def mp_block_deltas(mats, dps: int = DPS) -> np.ndarray:
    """``delta[n, j]`` from an extended-precision SVD of the block product.

    ``E_{j,n}`` is the image of the top ``j`` right singular vectors under
    ``M_n ... M_1``; ``F_{j,n}`` the preimage of the bottom ``d - j`` left
    singular vectors under ``M_L ... M_{n+1}``.  The sphere distance is
    ``2 sin(theta / 2)`` for the smallest principal angle ``theta``.
    """
    from scipy.linalg import subspace_angles

    mats = [np.asarray(M, dtype=float) for M in mats]
    L, d = len(mats), mats[0].shape[0]
    with mpmath.workdps(dps):
        Ms = [mp_matrix(M) for M in mats]
        P = mpmath.eye(d)
        for M in Ms:
            P = M * P
        U, S, V = mpmath.svd_r(P)
        order = sorted(range(d), key=lambda i: -S[i])
        out = np.empty((L, d - 1))
        for n in range(1, L + 1):
            pre = mpmath.eye(d)
            for M in Ms[:n]:
                pre = M * pre
            post = mpmath.eye(d)
            for M in Ms[n:]:
                post = M * post
            post_inv = mpmath.inverse(post)
            for j in range(1, d):
                E = [pre * V.T[:, order[i]] for i in range(j)]
                F = [post_inv * U[:, order[i]] for i in range(j, d)]
                Ea = np.array([[float(x) for x in v] for v in E]).T
                Fa = np.array([[float(x) for x in v] for v in F]).T
                theta = subspace_angles(Ea, Fa).min()
                out[n - 1, j - 1] = 2.0 * np.sin(theta / 2.0)
        return out


def np_gap_ratio(mats, j: int, k: int) -> float:
    """``s_j / s_k`` of the product, by a direct extended-precision product."""
    s = mp_singular_values_product(mats)
    return float(s[j - 1] / s[k - 1])


def mp_singular_values_product(mats, dps: int = DPS) -> list:
    with mpmath.workdps(dps):
        d = np.asarray(mats[0]).shape[0]
        P = mpmath.eye(d)
        for M in mats:
            P = mp_matrix(M) * P
        s = mpmath.svd_r(P, compute_uv=False)
        return sorted((s[i] for i in range(s.rows)), reverse=True)
