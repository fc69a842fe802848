"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line (with its runtime) that the terminal
summary prints.  Criteria that cannot be met are still run as defined,
print FAIL with the reason and are marked as strict expected failures.
"""

import math
import time
import zlib

import numpy as np
import pytest
from scipy.linalg import subspace_angles
from scipy.stats import ortho_group

from lyapgap import cli, gluing, matcore
from lyapgap import targets as T
from lyapgap.harness import ExperimentConfig, bookkeeping_simulation, compute_bound_constants, run_gap_experiment

from .acceptance_log import report

pytestmark = pytest.mark.acceptance


def _rng(label: str) -> np.random.Generator:
    return np.random.default_rng(zlib.crc32(label.encode()))


def _unit_norm_ball(rng, n, d):
    A = rng.uniform(-1.0, 1.0, size=(n, d, d))
    nrm = np.linalg.norm(A, 2, axis=(1, 2))
    return A / np.maximum(1.0, nrm)[:, None, None]


# --------------------------------------------------------------------------- 1

def test_criterion_01_nonsingular_init():
    t0 = time.perf_counter()
    rng = _rng("init")
    worst = {"dist": -np.inf, "norm": -np.inf, "smin": -np.inf}
    for d in (2, 3, 4, 8):
        A = _unit_norm_ball(rng, 10_000, d)
        for eps in (0.1, 0.5, 0.9):
            B = T.nonsingular_init(A, eps)
            s = np.linalg.svd(B, compute_uv=False)  # independent LAPACK route
            worst["dist"] = max(worst["dist"], float(np.max(np.linalg.norm(B - A, 2, axis=(1, 2)) - eps / 2)))
            worst["norm"] = max(worst["norm"], float(np.max(s[:, 0] - max(0.5, 1 - eps / 2))))
            worst["smin"] = max(worst["smin"], float(np.max(eps / 2 - s[:, -1])))
    secs = time.perf_counter() - t0
    ok = all(v <= 1e-10 for v in worst.values()) and secs < 10
    report(1, "non-singular initialisation", ok,
           f"max excess dist={worst['dist']:.3g} norm={worst['norm']:.3g} smin={worst['smin']:.3g} (tol 1e-10)",
           secs)
    assert ok


# --------------------------------------------------------------------------- 2

def test_criterion_02_projection_and_sphere_bounds():
    t0 = time.perf_counter()
    rng = _rng("proj")
    worst_proj = worst_sec = -np.inf
    count = 0
    dims = range(2, 9)
    per = -(-10_000 // len(dims))
    for d in dims:
        k = rng.integers(1, d, size=per)
        for kk in np.unique(k):
            n = int(np.sum(k == kk))
            E = np.swapaxes(np.linalg.qr(rng.normal(size=(n, d, kk)))[0], 1, 2)
            F = np.swapaxes(np.linalg.qr(rng.normal(size=(n, d, d - kk)))[0], 1, 2)
            P = matcore.oblique_projection_batch(E, F)
            nP = np.linalg.norm(P, 2, axis=(1, 2))
            theta = np.array([subspace_angles(e.T, f.T).min() for e, f in zip(E, F)])
            delta = 2.0 * np.sin(theta / 2.0)
            assert np.allclose(delta, matcore.sphere_distance_batch(E, F), atol=1e-10)
            worst_proj = max(worst_proj, float(np.max(nP - 2.0 / delta)))
            u = rng.normal(size=(n, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            lin, sph = matcore.dist_to_sphere_section_batch(u, E)
            p = np.einsum("nkd,nk->nd", E, np.einsum("nkd,nd->nk", E, u))
            assert np.allclose(lin, np.linalg.norm(u - p, axis=1), atol=1e-12)
            worst_sec = max(worst_sec, float(np.max(sph - 2.0 * lin)))
            count += n
    secs = time.perf_counter() - t0
    ok = worst_proj <= 1e-9 and worst_sec <= 1e-9 and count >= 10_000 and secs < 30
    report(2, "projection norm and sphere distance", ok,
           f"{count} instances, max(|Pi| - 2/delta)={worst_proj:.3g}, max(d_S - 2 d)={worst_sec:.3g} (slack 1e-9)",
           secs)
    assert ok


# --------------------------------------------------------------------------- 3

def _spread_blocks(d, L, eta, want, seed):
    """``want`` random blocks of near-orthogonal factors, keeping only those that are eta-spread."""
    rng = np.random.default_rng(seed)
    found = []
    while sum(len(f) for f in found) < want:
        n = want
        Q = ortho_group.rvs(d, size=n * L, random_state=rng).reshape(n, L, d, d)
        B = Q * rng.uniform(0.8, 1.0, size=(n, L, 1, d))
        an = T._Analysis(B)
        found.append(B[an.deltas.min(axis=(1, 2)) > eta])
    return np.concatenate(found)[:want]


def _direct_log_sv(stack):
    """Log singular values of ``M_L ... M_1`` for a stack ``(B, L, d, d)`` by plain products and LAPACK."""
    P = stack[:, 0]
    for n in range(1, stack.shape[1]):
        P = stack[:, n] @ P
    return np.log(np.linalg.svd(P, compute_uv=False))


def test_criterion_03_spread_target_exactness():
    t0 = time.perf_counter()
    eps, eta = 0.5, 0.5
    worst_rel, worst_ratio, n_blocks = 0.0, np.inf, 0
    for d in (2, 3):
        for gamma in (2.0, 10.0, 100.0):
            L = T.spread_length(eps, eta, gamma)
            blocks = _spread_blocks(d, L, eta, 1000, seed=int(d * 1000 + gamma))
            for j in range(1, d):
                targets = T.build_spread_targets(blocks, j, eps, eta, gamma)
                shift = L * math.log1p(eps * eta / 8.0)
                before = _direct_log_sv(blocks)
                after = _direct_log_sv(np.array([t.matrices for t in targets]))
                expect = before + np.where(np.arange(d) < j, shift, 0.0)
                worst_rel = max(worst_rel, float(np.max(np.abs(np.expm1(after - expect)))))
                worst_ratio = min(worst_ratio, float(np.min(np.exp(after[:, j - 1] - after[:, j]))) / gamma)
                n_blocks += len(targets)
    secs = time.perf_counter() - t0
    ok = worst_rel <= 1e-9 and worst_ratio >= 1.0 and secs < 60
    report(3, "spread target exactness", ok,
           f"{n_blocks} targets, max relative scaling error={worst_rel:.3g} (tol 1e-9), "
           f"min ratio/Gamma={worst_ratio:.6g}", secs)
    assert ok


# --------------------------------------------------------------------------- 4

def test_criterion_04_closed2_and_product_inequality():
    t0 = time.perf_counter()
    rng = _rng("closed2")
    worst_c = -np.inf
    for d in (2, 3):
        n = 5_000
        B = rng.uniform(-1, 1, size=(n, d, d))
        Q = ortho_group.rvs(d, size=n, random_state=rng)
        u, v = Q[:, :, 0], Q[:, :, 1]
        Bu = np.einsum("nij,nj->ni", B, u)
        Bv = np.einsum("nij,nj->ni", B, v)
        eta = np.array([matcore.angle(x, y) for x, y in zip(Bu, Bv)])
        s = matcore.singular_values(B)
        s_ref = np.linalg.svd(B, compute_uv=False)
        assert np.allclose(s, s_ref, rtol=1e-10, atol=1e-14)
        worst_c = max(worst_c, float(np.max(1.0 / eta - s[:, 0] / s[:, -1])))
    worst_s = -np.inf
    count = 0
    for d in (2, 3, 4):
        n = -(-10_000 // 3)
        B1 = rng.uniform(-1, 1, size=(n, d, d))
        B2 = rng.uniform(-1, 1, size=(n, d, d))
        s1, s2 = matcore.singular_values(B1), matcore.singular_values(B2)
        top = matcore.singular_values(B2 @ B1)[:, 0]
        for k in range(d):
            worst_s = max(worst_s, float(np.max(s2[:, k] * s1[:, d - 1 - k] - top)))
        count += n
    secs = time.perf_counter() - t0
    ok = worst_c <= 1e-8 and worst_s <= 1e-8 and secs < 30
    report(4, "aligned-pair and product singular value inequalities", ok,
           f"10000 (B, u, v): max(1/angle - s1/sd)={worst_c:.3g}; {count} pairs: "
           f"max(s_(1+k)(B2) s_(d-k)(B1) - s1(B2 B1))={worst_s:.3g} (slack 1e-8)", secs)
    assert ok


# --------------------------------------------------------------------------- 5

def test_criterion_05_target_continuity():
    t0 = time.perf_counter()
    d, N, eps = 2, 4, 0.5
    rng = _rng("continuity")
    A = _unit_norm_ball(rng, N - 1, d)
    blk = T.nonsingular_init(A, eps)
    eta = min(1.0, float(T.delta_table(blk).min()) * 0.999)
    gamma = math.exp((N - 1) * eps * eta / 16.0)
    target = T.build_spread_target(blk, 1, eps, eta, gamma)
    worst = T.target_continuity_check(target, eps, N, trials=10_000, seed=5)
    secs = time.perf_counter() - t0
    ok = worst >= 0.5 and secs < 60
    report(5, "target continuity in the entrywise ball", ok,
           f"10000 perturbations of radius {T.continuity_radius(eps, d, N):.3g}, "
           f"min perturbed/target ratio={worst:.12g} (need >= 0.5)", secs)
    assert ok


# --------------------------------------------------------------------------- 6

@pytest.mark.xfail(strict=True, reason="mandated 3x3 block length is about 1.4e10 factors per block")
def test_criterion_06_3x3_dispatch_completeness():
    t0 = time.perf_counter()
    eps, gamma, blocks = 0.5, 3.0, 1000
    L = T.three_by_three_length(eps, gamma)
    need_bytes = L * 9 * 8
    budget = 8 * 2 ** 30  # one block of factors in memory, generously 8 GiB
    feasible = need_bytes <= budget
    secs = time.perf_counter() - t0
    detail = (f"mandated length L = 16 log(Gamma)/(eps eta^2) = {L} factors "
              f"(eta = {T.three_by_three_eta(eps, gamma):.3g}); one block needs {need_bytes / 2 ** 40:.2f} TiB "
              f"and {blocks} blocks at 5 min are out of reach")
    if not feasible:
        report(6, "3x3 dispatch completeness", False, detail, secs)
    assert feasible, detail
    rng = _rng("dispatch")
    worst12 = worst23 = np.inf
    for _ in range(blocks):
        blk = rng.uniform(-1, 1, size=(L, 3, 3)) + 2.0 * np.eye(3)
        t12 = T.build_3x3_target(blk, eps, gamma)
        t23 = T.build_3x3_target_23(blk, eps, gamma)
        s12 = np.linalg.svd(t12.product(), compute_uv=False)
        s23 = np.linalg.svd(t23.product(), compute_uv=False)
        worst12 = min(worst12, s12[0] / s12[1])
        worst23 = min(worst23, s23[1] / s23[2])
    secs = time.perf_counter() - t0
    ok = worst12 >= gamma and worst23 >= gamma and secs < 300
    report(6, "3x3 dispatch completeness", ok, f"min (1,2) ratio={worst12:.6g}, min (2,3) ratio={worst23:.6g}",
           secs)
    assert ok


# --------------------------------------------------------------------------- 7

def test_criterion_07_gluing_tail():
    t0 = time.perf_counter()
    failures, rows = [], 0
    min_rate_margin = np.inf
    for d in (2, 3):
        ref = 1.0 / (4 * d)
        for eps in (0.1, 0.5):
            for c in gluing.stress_battery(d):
                s = gluing.tail_profile(c.L, c.A, c.R, c.j, c.k, eps, 100_000, seed=0)
                e = gluing.expectation_floor(c.L, c.A, c.R, c.j, c.k, eps, 100_000, zeta_hat=s.zeta_hat, seed=0)
                rows += 1
                margin = s.rate / (0.9 * ref) if not s.degenerate else math.nan
                min_rate_margin = min(min_rate_margin, margin) if not math.isnan(margin) else min_rate_margin
                if s.degenerate or not s.rate >= 0.9 * ref:
                    failures.append(f"rate d={d} eps={eps} {c.name}: {s.rate:.4g}")
                if not e.holds:
                    failures.append(f"mean d={d} eps={eps} {c.name}: {e.mean:.4g} < {e.floor:.4g}")
    secs = time.perf_counter() - t0
    ok = not failures and secs < 600
    report(7, "gluing tail and expectation floor", ok,
           f"{rows} (d, eps, config) cases x 1e5 trials, min fitted rate / (0.9/(4d))={min_rate_margin:.4g}"
           + (f"; failures: {failures}" if failures else ""), secs)
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_08_positivity():
    t0 = time.perf_counter()
    failures, lines = [], []
    for kind in ("zero", "rank_collapse", "bochi_align", "orthogonal_random"):
        for d in (2, 3):
            means = {}
            for eps in (0.1, 0.5):
                cfg = ExperimentConfig(dim=d, epsilon=eps, generator={"kind": kind, "params": {}},
                                       n_max=100_000, trials=32, seed=0)
                s = run_gap_experiment(cfg)
                means[eps] = s.mean
                if s.excluded or not np.all(s.positive):
                    failures.append(f"{kind} d={d} eps={eps}: mean={s.mean} stderr={s.stderr}")
            trend = "up" if np.all(means[0.5] >= means[0.1]) else "not monotone"
            lines.append(f"{kind}/d={d}: {trend}")
    secs = time.perf_counter() - t0
    ok = not failures and secs < 1800
    report(8, "gap positivity at desk scale", ok,
           f"16 runs x 32 trials x n=1e5, all consecutive gaps positive at 3 stderr={not failures}; "
           f"eps trend (informational): {'; '.join(lines)}"
           + (f"; failures: {failures}" if failures else ""), secs)
    assert ok


# --------------------------------------------------------------------------- 9

def _zeta_hat_battery() -> float:
    """Largest envelope constant over the stress battery, d in {2, 3}, eps in {0.1, 0.5}."""
    z = 0.0
    for d in (2, 3):
        for eps in (0.1, 0.5):
            for c in gluing.stress_battery(d):
                z = max(z, gluing.tail_profile(c.L, c.A, c.R, c.j, c.k, eps, 10_000, seed=0).zeta_hat)
    return z


@pytest.mark.xfail(strict=True, reason="lower-order terms at eps = 1e-3 push every computed exponent past its bound")
def test_criterion_09_constants_calculator():
    zeta = _zeta_hat_battery()
    t0 = time.perf_counter()
    eps = 1e-3
    cases = [("d=2", compute_bound_constants(2, eps, zeta)),
             ("d=3", compute_bound_constants(3, eps, zeta, gap_pair=(1, 2))),
             ("d=4", compute_bound_constants(4, eps, zeta)),
             ("d=5", compute_bound_constants(5, eps, zeta)),
             ("orthogonal", compute_bound_constants(2, eps, zeta, mode="orthogonal"))]
    secs = time.perf_counter() - t0
    parts, ok = [], secs < 1.0
    for name, r in cases:
        good = r.within_stated_bound and r.relative_to_reference <= 0.10
        ok = ok and good
        parts.append(f"{name} exponent={r.exponent:.5g} (bound {r.stated_bound:g}, "
                     f"{100 * r.relative_to_reference:.1f}% from {r.reference_exponent:g})")
    report(9, "constants calculator", ok, f"zeta_hat={zeta:.4g}; " + "; ".join(parts), secs)
    assert ok


# --------------------------------------------------------------------------- 10

def test_criterion_10_bookkeeping():
    t0 = time.perf_counter()
    base = dict(dim=2, epsilon=0.5, generator={"kind": "identity", "params": {}}, n_max=1000, seed=0)
    cfg = ExperimentConfig(**base, bookkeeping={"gamma": 1.05, "block_length": 4, "blocks": 250, "traces": 100})
    lemma = bookkeeping_simulation(cfg)
    wide = bookkeeping_simulation(cfg, radius=0.45)
    secs = time.perf_counter() - t0
    floor_ok, sigma = lemma.floor_check()
    residual = max(lemma.max_abs_residual, wide.max_abs_residual)
    structure = lemma.structural_errors() + wide.structural_errors()
    ok = residual <= 1e-8 and floor_ok and wide.hit_rate > 0 and not structure and secs < 600
    report(10, "bookkeeping decomposition and hit rate", ok,
           f"100 traces at the lemma radius {lemma.radius:.3g}: hit rate {lemma.hit_rate:.4g} vs floor "
           f"{lemma.hit_floor:.3g} (3 sigma={3 * sigma:.3g}); 100 traces at radius 0.45: hit rate "
           f"{wide.hit_rate:.4g}; max |residual|={residual:.3g} (tol 1e-8); structural errors={len(structure)}",
           secs)
    assert ok


# --------------------------------------------------------------------------- 11

def test_criterion_11_verify_reproducible(tmp_path):
    t0 = time.perf_counter()
    codes = [cli.main(["verify", "--seed", "2024", "--out", str(tmp_path / run)]) for run in ("a", "b")]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("verify.json", "verify.csv"))
    secs = time.perf_counter() - t0
    ok = same and codes == [0, 0]
    report(11, "verify reproducibility", ok, f"byte-identical outputs={same}, exit codes={codes}", secs)
    assert ok
