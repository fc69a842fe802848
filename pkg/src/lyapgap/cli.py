"""Command line entry point: ``lyapgap <command> [options]``.

Every command writes a CSV and a JSON file into ``--out``.  Both start with
the configuration hash and seed, floats carry 17 significant digits, and no
timestamps or timings are written, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import mpmath
import numpy as np

from . import __version__, _io
from ._rng import haar_orthogonal, stream_key, symmetric_uniform
from .cocycle import PerturbationModel, ProductAccumulator, gap_trajectory
from .errors import LyapGapError
from .gluing import expectation_floor, glue_statistic_batch, log_q, stress_battery, tail_profile
from .harness import (
    ExperimentConfig,
    bookkeeping_simulation,
    compute_bound_constants,
    generate_sequence,
    run_gap_experiment,
)
from .matcore import (
    angle,
    dist_to_sphere_section_batch,
    oblique_projection_batch,
    op_norm,
    singular_values,
    sphere_distance_batch,
    svd_batch,
)
from .targets import build_spread_target, delta_table, nonsingular_init, product_log_singular_values

COMMANDS = ("gap-run", "bookkeep", "glue-tail", "constants", "verify")


def _load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        data = _io.loads_json(Path(args.config).read_text())
    overrides = {"seed": args.seed, "out": args.out, "threads": args.threads, "dim": args.dim,
                 "epsilon": args.epsilon, "n_max": args.n_max, "trials": args.trials}
    for k, v in overrides.items():
        if v is not None:
            data[k] = v
    return ExperimentConfig.from_dict(data)


def _header(cfg: ExperimentConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.hash(), "seed": int(cfg.seed), "version": __version__}


def _write(out: Path, stem: str, header: dict, payload: dict, csv_text: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(_io.dumps_json({"header": header, **payload}))
    lines = "".join(f"# {k}={header[k]}\n" for k in sorted(header) if k not in ("config_hash", "seed"))
    (out / f"{stem}.csv").write_text(lines + csv_text)


def cmd_gap_run(cfg: ExperimentConfig, out: Path) -> int:
    summary = run_gap_experiment(cfg)
    _write(out, "gap_run", _header(cfg, "gap-run"), {"config": cfg.to_dict(), "summary": summary.to_dict()},
           summary.to_csv())
    return 0


def cmd_bookkeep(cfg: ExperimentConfig, out: Path) -> int:
    rep = bookkeeping_simulation(cfg)
    _write(out, "bookkeep", _header(cfg, "bookkeep"), {"config": cfg.to_dict(), "report": rep.to_dict()},
           rep.to_csv())
    return 0


def cmd_glue_tail(cfg: ExperimentConfig, out: Path) -> int:
    d = cfg.dim
    eps = cfg.epsilon
    trials = int(cfg.glue["trials"])
    rows, results = [], []
    for c in stress_battery(d):
        s = tail_profile(c.L, c.A, c.R, c.j, c.k, eps, trials, seed=cfg.seed,
                         grid_points=int(cfg.glue["grid_points"]))
        e = expectation_floor(c.L, c.A, c.R, c.j, c.k, eps, trials, zeta_hat=s.zeta_hat, seed=cfg.seed)
        results.append({"name": c.name, "j": c.j, "k": c.k, "sample": s.to_dict(), "expectation": e.to_dict()})
        rows.append([c.name, c.j, c.k, s.rate, s.rate_stderr, s.zeta_hat, e.mean, e.stderr, e.floor,
                     str(e.holds)])
    zeta_max = max(r["sample"]["zeta_hat"] for r in results)
    header = _header(cfg, "glue-tail")
    csv_text = _io.write_csv({"config_hash": header["config_hash"], "seed": header["seed"]},
                             ["config", "j", "k", "rate", "rate_stderr", "zeta_hat", "mean_F", "stderr_F",
                              "floor", "floor_holds"], rows)
    _write(out, "glue_tail", header, {"config": cfg.to_dict(), "zeta_hat_max": zeta_max, "battery": results},
           csv_text)
    return 0


def cmd_constants(cfg: ExperimentConfig, out: Path) -> int:
    cc = cfg.constants
    reports = [compute_bound_constants(cfg.dim, float(e), cc["zeta"], cc["pair"], cc["mode"])
               for e in cc["epsilons"]]
    header = _header(cfg, "constants")
    cols = ["epsilon", "mode", "log_gamma", "log_N", "log_p", "log_c", "loglog_inv_c", "exponent",
            "reference_exponent", "stated_bound"]
    rows = ([r.epsilon, r.mode, r.log_gamma, r.log_N, r.log_p, r.log_c, r.loglog_inv_c, r.exponent,
             r.reference_exponent, r.stated_bound] for r in reports)
    csv_text = _io.write_csv({"config_hash": header["config_hash"], "seed": header["seed"]}, cols, rows)
    _write(out, "constants", header, {"config": cfg.to_dict(), "reports": [r.to_dict() for r in reports]},
           csv_text)
    return 0


# ----------------------------------------------------------------------------
# verify: the invariant battery at desk scale
# ----------------------------------------------------------------------------

def _uniform(seed, label, count, size):
    return symmetric_uniform(seed, stream_key("verify", label), 1, count, size)


def _check(name, value, tol, passed=None):
    passed = bool(value <= tol) if passed is None else bool(passed)
    return {"check": name, "value": float(value), "tolerance": float(tol), "passed": passed}


def _verify_checks(seed: int, scale: int = 1000) -> list[dict]:
    checks = []
    # SVD reconstruction and orthogonality
    worst = 0.0
    for d in range(2, 9):
        A = _uniform(seed, ("svd", d), scale, d * d).reshape(scale, d, d)
        U, s, V = svd_batch(A)
        rec = U @ (s[..., None] * np.swapaxes(V, -1, -2))
        nrm = np.maximum(1.0, s[:, 0])
        worst = max(worst, float(np.max(op_norm(rec - A) / nrm)))
        I = np.eye(d)
        worst = max(worst, float(np.max(op_norm(np.swapaxes(U, -1, -2) @ U - I))),
                    float(np.max(op_norm(np.swapaxes(V, -1, -2) @ V - I))))
    checks.append(_check("svd_reconstruction", worst, 1e-12))
    # singular values are 1-Lipschitz in the operator norm
    worst = -math.inf
    for d in range(2, 9):
        A = _uniform(seed, ("lip_a", d), scale, d * d).reshape(scale, d, d)
        B = A + 0.01 * _uniform(seed, ("lip_b", d), scale, d * d).reshape(scale, d, d)
        excess = np.abs(singular_values(A) - singular_values(B)).max(axis=1) - op_norm(A - B)
        worst = max(worst, float(excess.max()))
    checks.append(_check("singular_value_lipschitz", worst, 1e-10))
    # oblique projection norm certificate and sphere-section bound
    worst_proj, worst_sec = -math.inf, -math.inf
    for d in range(2, 9):
        k = 1 + d // 2 - (1 if d == 2 else 0)
        k = max(1, min(d - 1, k))
        X = _uniform(seed, ("proj", d), scale, d * d).reshape(scale, d, d)
        Q, _ = np.linalg.qr(X)
        Y = _uniform(seed, ("proj_f", d), scale, d * d).reshape(scale, d, d)
        Qf, _ = np.linalg.qr(Y)
        E = np.swapaxes(Q[..., :k], -1, -2)
        F = np.swapaxes(Qf[..., k:], -1, -2)
        P = oblique_projection_batch(E, F)
        delta = sphere_distance_batch(E, F)
        worst_proj = max(worst_proj, float(np.max(op_norm(P) - 2.0 / delta)))
        u = _uniform(seed, ("sec_u", d), scale, d)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        lin, sph = dist_to_sphere_section_batch(u, E)
        worst_sec = max(worst_sec, float(np.max(sph - 2.0 * lin)))
    checks.append(_check("projection_norm_certificate", worst_proj, 1e-9))
    checks.append(_check("sphere_section_bound", worst_sec, 1e-9))
    # accumulator against a direct product of well-conditioned factors
    worst = 0.0
    for d in (2, 3, 4):
        Qs = haar_orthogonal(seed, stream_key("verify", "acc", d), 1, 20, d)
        scales = 0.75 + 0.25 * (_uniform(seed, ("acc_s", d), 20, d) + 1.0) / 2.0
        Ms = Qs * scales[:, None, :]
        acc = ProductAccumulator(d)
        P = np.eye(d)
        for M in Ms:
            acc.advance(M)
            P = M @ P
        ref = np.log(singular_values(P))
        worst = max(worst, float(np.max(np.abs(acc.log_singular_values() - ref) / np.maximum(1.0, np.abs(ref)))))
    checks.append(_check("accumulator_direct_product", worst, 1e-8))
    acc = ProductAccumulator(3)
    for _ in range(100):
        acc.advance(np.eye(3))
    checks.append(_check("accumulator_identity", float(np.max(np.abs(acc.log_singular_values()))), 1e-10))
    # non-singular initialisation
    worst = -math.inf
    for d in (2, 3, 4, 8):
        A = _uniform(seed, ("init", d), scale, d * d).reshape(scale, d, d)
        A /= np.maximum(1.0, singular_values(A)[:, :1])[:, :, None]
        for eps in (0.1, 0.5, 0.9):
            A2 = nonsingular_init(A, eps)
            s = singular_values(A2)
            worst = max(worst, float(np.max(op_norm(A2 - A) - eps / 2)),
                        float(np.max(s[:, 0] - max(0.5, 1 - eps / 2))), float(np.max(eps / 2 - s[:, -1])))
    checks.append(_check("nonsingular_init_bounds", worst, 1e-10))
    # spread target exactness on an orthogonal block
    Q = haar_orthogonal(seed, stream_key("verify", "spread"), 1, 40, 2) * 0.9
    t = build_spread_target(Q, 1, 0.5, 1.0, 2.0)
    before = product_log_singular_values(Q)
    after = product_log_singular_values(t.matrices)
    expect = before + np.array([40 * math.log1p(0.5 / 8), 0.0])
    checks.append(_check("spread_target_exactness", float(np.max(np.abs(np.exp(after - expect) - 1.0))), 1e-9))
    # orthogonal blocks are sqrt(2)-spread
    Q3 = haar_orthogonal(seed, stream_key("verify", "orth"), 1, 10, 3)
    checks.append(_check("orthogonal_blocks_spread", float(np.max(np.abs(delta_table(Q3) - math.sqrt(2)))), 1e-9))
    # complementarity of (1,2) and (2,3) ratios
    worst = 0.0
    B3 = _uniform(seed, "compl", 6, 9).reshape(6, 3, 3) + 2.0 * np.eye(3)
    r12 = product_log_singular_values(B3)
    inv = product_log_singular_values(np.linalg.inv(B3[::-1]))
    worst = abs((r12[0] - r12[1]) - (inv[1] - inv[2])) / max(1.0, abs(r12[0] - r12[1]))
    checks.append(_check("complementarity", worst, 1e-9))
    # closed2 and the singular value product inequality
    worst_c, worst_s = -math.inf, -math.inf
    for d in (2, 3):
        B = _uniform(seed, ("closed2", d), scale, d * d).reshape(scale, d, d)
        Qv = haar_orthogonal(seed, stream_key("verify", "closed2q", d), 1, scale, d)
        u, v = Qv[:, :, 0], Qv[:, :, 1]
        Bu, Bv = np.einsum("bij,bj->bi", B, u), np.einsum("bij,bj->bi", B, v)
        eta = np.array([angle(x, y) for x, y in zip(Bu, Bv)])
        s = singular_values(B)
        worst_c = max(worst_c, float(np.max(1.0 / eta - s[:, 0] / s[:, -1])))
    for d in (2, 3, 4):
        B1 = _uniform(seed, ("svrel1", d), scale, d * d).reshape(scale, d, d)
        B2 = _uniform(seed, ("svrel2", d), scale, d * d).reshape(scale, d, d)
        s1, s2, s = singular_values(B1), singular_values(B2), singular_values(B2 @ B1)
        for k in range(d):
            worst_s = max(worst_s, float(np.max(s2[:, k] * s1[:, d - 1 - k] - s[:, 0])))
    checks.append(_check("closed2_inequality", worst_c, 1e-8))
    checks.append(_check("product_singular_value_inequality", worst_s, 1e-8))
    # gluing chain identity against products computed independently
    worst = 0.0
    for d in (2, 3):
        L = _uniform(seed, ("chain_l", d), 1, d * d).reshape(d, d) + 1.5 * np.eye(d)
        R = _uniform(seed, ("chain_r", d), 1, d * d).reshape(d, d) + 1.5 * np.eye(d)
        A = _uniform(seed, ("chain_a", d), 200, d * d).reshape(200, d, d)
        F = glue_statistic_batch(L, A, R, 1, 2)
        for a, f in zip(A, F):
            G = log_q(L @ a @ R, 1, 2) - log_q(L, 1, 2) - log_q(R, 1, 2)
            worst = max(worst, abs(G - f))
    checks.append(_check("glue_chain_identity", worst, 1e-10))
    # bookkeeping decomposition and structure
    cfg = ExperimentConfig(dim=2, epsilon=0.5, generator={"kind": "identity", "params": {}}, n_max=1000,
                           seed=seed, bookkeeping={"gamma": 1.05, "block_length": 4, "blocks": 50, "traces": 10})
    rep = bookkeeping_simulation(cfg, radius=0.45)
    checks.append(_check("bookkeeping_residual", rep.max_abs_residual, 1e-8))
    errs = rep.structural_errors()
    checks.append(_check("bookkeeping_structure", len(errs), 0))
    # constants calculator consistency: c = p / N and p in closed form
    r = compute_bound_constants(2, 0.1, 1.0)
    with mpmath.workdps(50):
        N = mpmath.e ** mpmath.mpf(r.log_N)
        p_ref = N * N * 4 * mpmath.log(mpmath.mpf(0.1) / 4) - N * 4 * mpmath.log(6 * N)
        dev = abs((mpmath.mpf(r.log_p) - p_ref) / p_ref)
        dev_c = abs(mpmath.mpf(r.log_c) - (mpmath.mpf(r.log_p) - mpmath.mpf(r.log_N)))
    checks.append(_check("bound_p_closed_form", float(dev), 1e-12))
    checks.append(_check("bound_c_equals_p_over_N", float(dev_c), 1e-9))
    # reproducibility of a short trajectory
    seq = generate_sequence("zero", {}, 2)
    m = PerturbationModel(0.5, seed, 7)
    a = gap_trajectory(seq, m, 2000, 100).to_csv()
    b = gap_trajectory(seq, m, 2000, 100).to_csv()
    checks.append(_check("trajectory_reproducible", 0.0 if a == b else 1.0, 0.0))
    return checks


def cmd_verify(cfg: ExperimentConfig, out: Path) -> int:
    checks = _verify_checks(int(cfg.seed))
    header = _header(cfg, "verify")
    ok = all(c["passed"] for c in checks)
    rows = ([c["check"], c["value"], c["tolerance"], str(c["passed"])] for c in checks)
    csv_text = _io.write_csv({"config_hash": header["config_hash"], "seed": header["seed"]},
                             ["check", "value", "tolerance", "passed"], rows)
    _write(out, "verify", header, {"all_passed": ok, "checks": checks}, csv_text)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']} value={_io.fmt_float(c['value'])}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapgap", description="Singular value gaps of perturbed matrix products.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="experiment configuration (JSON)")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="output directory (default: config 'out' or the current directory)")
        s.add_argument("--threads", type=int)
        s.add_argument("--dim", type=int)
        s.add_argument("--epsilon", type=float)
        s.add_argument("--n-max", dest="n_max", type=int)
        s.add_argument("--trials", type=int)
    return p


_DISPATCH = {"gap-run": cmd_gap_run, "bookkeep": cmd_bookkeep, "glue-tail": cmd_glue_tail,
             "constants": cmd_constants, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        out = Path(cfg.out or ".")
        return _DISPATCH[args.command](cfg, out)
    except (LyapGapError, ValueError, OSError) as exc:
        print(f"lyapgap {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
