"""Command-line entry points: solve, mpc, dealer, certify, estimate, bench.

Reports are JSON documents with a versioned schema; `--render` prints the
benchmark tables human-readably.  Exit codes: 2 schema error, 3 not
converged, 4 certificate failure, 5 peer failure, 6 preprocessing missing or
exhausted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import dealer as dl
from . import fieldfix as ff
from . import grid as gridmod
from . import pfcore as pf
from . import securepfa as sp
from . import transport as tp
from .abb import AbbSession
from .errors import (
    CertificateFail,
    FormatMismatch,
    NotConverged,
    PeerFailure,
    PpfaError,
    PreprocessingExhausted,
    SchemaError,
)

REPORT_SCHEMA = 1

EXIT_SCHEMA = 2
EXIT_NOT_CONVERGED = 3
EXIT_CERTIFICATE = 4
EXIT_PEER = 5
EXIT_PREPROCESSING = 6


def _load_grid_arg(spec: str) -> gridmod.GridModel:
    if spec in gridmod.BUNDLED_GRIDS:
        return gridmod.bundled_grid(spec)
    return gridmod.load_grid(spec)


def solution_digest(values) -> str:
    """Deterministic digest of revealed values at fixed-point resolution."""
    quantized = [int(round(float(v) * 2**20)) for v in np.asarray(values).ravel()]
    return hashlib.sha256(json.dumps(quantized).encode()).hexdigest()[:16]


def _write_report(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=1, default=str)
    if path:
        Path(path).write_text(text)
    else:
        print(text)


def build_secure_config(args, grid) -> sp.SecureSessionConfig:
    return sp.SecureSessionConfig(
        solver=args.solver,
        gb_public=args.gb_public,
        newton_iters=args.newton_iters,
        ls_iters=args.ls_iters,
        line_search=not args.no_line_search,
        check_constraints=args.check_constraints,
        load_scale_lo=args.calib_lo,
        load_scale_hi=args.calib_hi,
    )


# --- solve -------------------------------------------------------------------


def cmd_solve(args) -> int:
    grid = _load_grid_arg(args.grid)
    cfg = pf.SolverConfig(
        solver=args.solver,
        max_newton=args.newton_iters or 25,
        line_search=not args.no_line_search,
        max_linesearch=args.ls_iters,
    )
    t0 = time.monotonic()
    try:
        state = pf.newton_solve(grid, cfg)
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    wall = time.monotonic() - t0
    v_mag, i_b = pf.magnitudes(state.x, grid)
    flags = gridmod.check_constraints(v_mag, i_b, grid)
    report = {
        "schema": REPORT_SCHEMA,
        "grid": grid.grid_id,
        "mode": "plaintext",
        "solver": args.solver,
        "converged": state.converged,
        "iterations": state.k,
        "residual_sq": state.residual_norm,
        "trace": state.trace,
        "wall": {"online_s": wall},
        "solution": {
            "x": state.x.tolist(),
            "v_mag": v_mag.tolist(),
            "i_branch": i_b.tolist(),
            "violations": flags,
        },
        "digest": solution_digest(state.x),
    }
    _write_report(report, args.report_out)
    return 0


# --- secure run ----------------------------------------------------------------


def run_mpc_loopback(grid, cfg, cal, n_parties, material_dir, *, rtt_ms=0.0,
                     reveal=False, seed=0):
    """All parties in one process; returns per-party result dicts."""
    topo = tp.PartyTopology(n=n_parties, latency_ms=rtt_ms / 2.0)
    hub = tp.LoopbackHub(topo, ff.DEFAULT_PARAMS)
    owners = sp.SecurePfa.bus_owners(grid, n_parties)
    results: list = [None] * n_parties
    errors: list = []

    def worker(i):
        try:
            stream = dl.load_material(i, material_dir, ff.DEFAULT_PARAMS)
            channel = hub.connect(i)
            session = AbbSession(channel, stream, reveal_allowed=reveal,
                                 rng=random.Random((seed << 8) | i) if seed else None)
            prog = sp.SecurePfa(session, grid, cfg, cal)
            mine = {b: (grid.p0[b], grid.q0[b]) for b in owners if owners[b] == i}
            t0 = time.monotonic()
            out = prog.run(mine)
            out["wall_online_s"] = time.monotonic() - t0
            out["ledger"] = tp.ledger_report(channel)
            out["cache_hits"] = prog.cache_hits
            results[i] = out
        except BaseException as exc:
            errors.append(exc)
            hub.fail()

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(n_parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return results


def run_mpc_party(args) -> int:
    """One party over TCP (spawned by cmd_mpc or run by hand)."""
    grid = _load_grid_arg(args.grid)
    cfg = build_secure_config(args, grid)
    cal = sp.calibrate(grid, cfg)
    endpoints = [(host, int(port)) for host, port in
                 (e.rsplit(":", 1) for e in args.endpoints.split(","))]
    topo = tp.PartyTopology(n=len(endpoints), backend="tcp",
                            latency_ms=args.rtt_ms / 2.0, endpoints=endpoints)
    stream = dl.load_material(args.party_id, args.material_dir, ff.DEFAULT_PARAMS)
    channel = tp.TcpMeshChannel(args.party_id, topo, ff.DEFAULT_PARAMS,
                                session_id=stream.session_id)
    session = AbbSession(channel, stream, reveal_allowed=args.reveal_test)
    prog = sp.SecurePfa(session, grid, cfg, cal)
    owners = sp.SecurePfa.bus_owners(grid, len(endpoints))
    mine = {b: (grid.p0[b], grid.q0[b]) for b in owners if owners[b] == args.party_id}
    t0 = time.monotonic()
    out = prog.run(mine)
    wall = time.monotonic() - t0
    channel.close()
    report = secure_report(grid, args, out, tp.ledger_report(channel), wall,
                           len(endpoints), cal)
    _write_report(report, args.report_out)
    return 0


def secure_report(grid, args, out, ledger, wall, n_parties, cal) -> dict:
    report = {
        "schema": REPORT_SCHEMA,
        "grid": grid.grid_id,
        "mode": "secure",
        "solver": args.solver,
        "gb_public": args.gb_public,
        "n_parties": n_parties,
        "rtt_ms": args.rtt_ms,
        "newton_iters": cal.newton_iters,
        "ls_iters": args.ls_iters,
        "ledger": ledger,
        "wall": {"online_s": wall},
    }
    if "x_revealed" in out:
        report["solution"] = {"x": np.asarray(out["x_revealed"]).tolist()}
        report["digest"] = solution_digest(out["x_revealed"])
        report["eta_trace"] = out.get("eta_trace")
    if "violations" in out:
        report["violations"] = out["violations"]
    return report


def cmd_mpc(args) -> int:
    grid = _load_grid_arg(args.grid)
    cfg = build_secure_config(args, grid)
    try:
        cal = sp.calibrate(grid, cfg)
    except CertificateFail as exc:
        print(f"certificate failed: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    if not Path(args.material_dir or "").is_dir():
        print("material directory missing (run the dealer first)", file=sys.stderr)
        return EXIT_PREPROCESSING

    if args.backend == "loopback":
        try:
            results = run_mpc_loopback(
                grid, cfg, cal, args.parties, args.material_dir,
                rtt_ms=args.rtt_ms, reveal=args.reveal_test, seed=args.seed,
            )
        except (PreprocessingExhausted, FormatMismatch) as exc:
            print(f"preprocessing: {exc}", file=sys.stderr)
            return EXIT_PREPROCESSING
        except PeerFailure as exc:
            print(f"peer failure: {exc}", file=sys.stderr)
            return EXIT_PEER
        out = results[0]
        report = secure_report(grid, args, out, out["ledger"],
                               out["wall_online_s"], args.parties, cal)
        if args.reveal_test:
            plain = pf.newton_solve(
                grid,
                pf.SolverConfig(solver=args.solver, max_newton=30,
                                convergence_tol=1e-16),
                raise_on_fail=False,
            )
            rel = float(np.linalg.norm(out["x_revealed"] - plain.x)
                        / np.linalg.norm(plain.x))
            report["cross_check"] = {
                "plaintext_digest": solution_digest(plain.x),
                "relative_error": rel,
                "within_2^-16": rel <= 2.0**-16,
            }
        _write_report(report, args.report_out)
        return 0

    # tcp backend: spawn one subprocess per party on localhost
    import subprocess

    ports = [args.base_port + i for i in range(args.parties)]
    endpoints = ",".join(f"127.0.0.1:{p}" for p in ports)
    procs = []
    outdir = Path(args.report_out or "mpc-reports")
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(args.parties):
        cmd = [
            sys.executable, "-m", "ppfa", "mpc-party",
            "--grid", args.grid, "--party-id", str(i),
            "--endpoints", endpoints, "--material-dir", args.material_dir,
            "--solver", args.solver, "--rtt-ms", str(args.rtt_ms),
            "--ls-iters", str(args.ls_iters),
            "--report-out", str(outdir / f"party{i}.json"),
            "--calib-lo", str(args.calib_lo), "--calib-hi", str(args.calib_hi),
        ]
        if args.reveal_test:
            cmd.append("--reveal-test")
        if not args.gb_public:
            cmd.append("--gb-secret")
        if args.newton_iters:
            cmd += ["--newton-iters", str(args.newton_iters)]
        procs.append(subprocess.Popen(cmd))
    codes = [p.wait() for p in procs]
    if any(codes):
        return max(codes)
    print(f"reports written under {outdir}")
    return 0


# --- dealer ----------------------------------------------------------------------


def cmd_dealer(args) -> int:
    grid = _load_grid_arg(args.grid)
    cfg = build_secure_config(args, grid)
    budget = dl.estimate_budget(grid, cfg, margin=args.margin)
    paths = dl.generate(budget, args.parties, ff.DEFAULT_PARAMS, args.seed,
                        args.out_dir, session_id=args.session, dealers=args.dealers)
    echo = {
        "grid": grid.grid_id,
        "parties": args.parties,
        "dealers": args.dealers,
        "budget": {
            "triples": budget.triples,
            "trunc_pairs": {str(k): v for k, v in budget.trunc_pairs.items()},
            "bit_bundles": budget.bit_bundles,
            "bits_per_bundle": budget.bits_per_bundle,
        },
        "bounds": {
            "fj_mults": budget.fj_mults_bound,
            "lu_mults": budget.lu_mults_bound,
            "lu_reciprocals": budget.lu_reciprocals,
            "ls_mults_per_iter": budget.ls_mults_per_iter,
        },
        "files": [str(p) for p in paths],
    }
    print(json.dumps(echo, indent=1))
    return 0


# --- certify ---------------------------------------------------------------------


def cmd_certify(args) -> int:
    grid = _load_grid_arg(args.grid)
    box = gridmod.OperatingBox.from_limits(grid, vi_frac=args.vi_frac)
    K = gridmod.build_K(grid.G, grid.B)
    try:
        cert = gridmod.pivot_certificate(K, box, rows=grid.reduced_indices())
    except CertificateFail as exc:
        print(f"certificate failed: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    record = {
        "grid": grid.grid_id,
        "vi_frac": args.vi_frac,
        "bound": cert["bound"],
        "per_row": {str(k): v for k, v in cert["per_row"].items()},
    }
    _write_report(record, args.report_out)
    return 0


# --- estimate ---------------------------------------------------------------------


def cmd_estimate(args) -> int:
    try:
        x_samples, w_samples = gridmod.load_measurements(args.measurements, args.buses)
        w_est = gridmod.estimate_admittance(x_samples, w_samples, mode=args.mode)
    except (SchemaError, OSError) as exc:
        print(f"schema: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    g_est, b_est = gridmod.split_w_matrix(w_est)
    record = {"mode": args.mode, "G": g_est.tolist(), "B": b_est.tolist()}
    _write_report(record, args.report_out)
    return 0


# --- benchmark -----------------------------------------------------------------------


def cmd_bench(args) -> int:
    """Runtime table over RTTs and solvers, shaped like the online-phase
    benchmark tables; absolute numbers are hardware-specific by nature."""
    grid = _load_grid_arg(args.grid)
    rtts = [float(v) for v in args.rtts.split(",")]
    rows = []
    import tempfile

    for solver in args.solvers.split(","):
        cfg = sp.SecureSessionConfig(solver=solver)
        cal = sp.calibrate(grid, cfg)
        budget = dl.estimate_budget(grid, cfg)
        with tempfile.TemporaryDirectory() as tmp:
            t0 = time.monotonic()
            dl.generate(budget, args.parties, ff.DEFAULT_PARAMS, args.seed, tmp)
            offline = time.monotonic() - t0
            for rtt in rtts:
                results = run_mpc_loopback(grid, cfg, cal, args.parties, tmp,
                                           rtt_ms=rtt, reveal=True, seed=args.seed)
                out = results[0]
                rows.append({
                    "grid": grid.grid_id,
                    "solver": solver,
                    "n_parties": args.parties,
                    "rtt_ms": rtt,
                    "online_s": round(out["wall_online_s"], 3),
                    "offline_s": round(offline, 3),
                    "rounds": out["ledger"]["rounds"],
                    "logical_rounds": out["ledger"]["logical_rounds"],
                    "triples": out["ledger"]["triples_consumed"],
                    "digest": solution_digest(out["x_revealed"]),
                })
    report = {"schema": REPORT_SCHEMA, "kind": "bench", "rows": rows}
    _write_report(report, args.report_out)
    if args.render:
        print(f"\nonline runtime (s), grid={grid.grid_id}, n={args.parties}")
        solvers = sorted({r["solver"] for r in rows})
        print("RTT(ms)  " + "  ".join(f"{s:>8}" for s in solvers))
        for rtt in rtts:
            cells = []
            for s in solvers:
                match = [r for r in rows if r["solver"] == s and r["rtt_ms"] == rtt]
                cells.append(f"{match[0]['online_s']:>8.2f}" if match else " " * 8)
            print(f"{rtt:>7.1f}  " + "  ".join(cells))
    return 0


# --- simbench converter -----------------------------------------------------------------


def cmd_convert(args) -> int:
    """Convert simple bus/branch CSV exports into the grid JSON schema.

    Expects two CSVs: buses (id,p_w,q_var,slack,prosumer) and branches
    (from,to,r_ohm,x_ohm,i_max_a); series impedance converts to admittance.
    """
    try:
        buses = np.genfromtxt(args.buses_csv, delimiter=",", names=True)
        branches = np.genfromtxt(args.branches_csv, delimiter=",", names=True)
    except OSError as exc:
        print(f"schema: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    buses = np.atleast_1d(buses)
    branches = np.atleast_1d(branches)
    bus_docs = [
        {
            "id": int(b["id"]),
            "p": float(b["p_w"]),
            "q": float(b["q_var"]),
            "slack": bool(b["slack"]),
            "prosumer": bool(b["prosumer"]),
        }
        for b in buses
    ]
    branch_docs = []
    for br in branches:
        z = complex(float(br["r_ohm"]), float(br["x_ohm"]))
        y = 1.0 / z
        branch_docs.append({
            "from": int(br["from"]), "to": int(br["to"]),
            "g": y.real, "b": y.imag, "i_max": float(br["i_max_a"]),
        })
    doc = {"id": args.grid_id, "v_nominal": args.v_nominal,
           "buses": bus_docs, "branches": branch_docs}
    Path(args.out).write_text(json.dumps(doc, indent=1))
    print(f"wrote {args.out}")
    return 0


# --- parser ---------------------------------------------------------------------------


def _add_common_secure(p):
    p.add_argument("--solver", choices=("lu", "gmres"), default="lu")
    p.add_argument("--parties", type=int, default=3)
    p.add_argument("--rtt-ms", type=float, default=0.0)
    p.add_argument("--gb-public", dest="gb_public", action="store_true", default=True)
    p.add_argument("--gb-secret", dest="gb_public", action="store_false")
    p.add_argument("--newton-iters", type=int, default=None)
    p.add_argument("--ls-iters", type=int, default=3)
    p.add_argument("--no-line-search", action="store_true")
    p.add_argument("--check-constraints", action="store_true")
    p.add_argument("--calib-lo", type=float, default=0.85)
    p.add_argument("--calib-hi", type=float, default=1.15)
    p.add_argument("--report-out", default=None)
    p.add_argument("--seed", type=int, default=0)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppfa",
        description="Privacy-preserving AC power flow on secret-shared data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="plaintext reference solve")
    p.add_argument("--grid", required=True)
    p.add_argument("--solver", choices=("lu", "gmres"), default="lu")
    p.add_argument("--newton-iters", type=int, default=None)
    p.add_argument("--ls-iters", type=int, default=3)
    p.add_argument("--no-line-search", action="store_true")
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("mpc", help="secure run (loopback threads or tcp processes)")
    p.add_argument("--grid", required=True)
    p.add_argument("--backend", choices=("loopback", "tcp"), default="loopback")
    p.add_argument("--material-dir", required=True)
    p.add_argument("--reveal-test", action="store_true")
    p.add_argument("--base-port", type=int, default=19000)
    _add_common_secure(p)
    p.set_defaults(func=cmd_mpc)

    p = sub.add_parser("mpc-party", help="single tcp party (used by mpc --backend tcp)")
    p.add_argument("--grid", required=True)
    p.add_argument("--party-id", type=int, required=True)
    p.add_argument("--endpoints", required=True, help="host:port,host:port,...")
    p.add_argument("--material-dir", required=True)
    p.add_argument("--reveal-test", action="store_true")
    _add_common_secure(p)
    p.set_defaults(func=run_mpc_party)

    p = sub.add_parser("dealer", help="generate preprocessing material files")
    p.add_argument("--grid", required=True)
    p.add_argument("--parties", type=int, default=3)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--session", type=int, default=0)
    p.add_argument("--dealers", type=int, default=1, choices=(1, 2))
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--solver", choices=("lu", "gmres"), default="lu")
    p.add_argument("--gb-public", dest="gb_public", action="store_true", default=True)
    p.add_argument("--gb-secret", dest="gb_public", action="store_false")
    p.add_argument("--newton-iters", type=int, default=None)
    p.add_argument("--ls-iters", type=int, default=3)
    p.add_argument("--no-line-search", action="store_true")
    p.add_argument("--check-constraints", action="store_true")
    p.add_argument("--calib-lo", type=float, default=0.85)
    p.add_argument("--calib-hi", type=float, default=1.15)
    p.set_defaults(func=cmd_dealer)

    p = sub.add_parser("certify", help="pivot-omission certificate (operating box)")
    p.add_argument("--grid", required=True)
    p.add_argument("--vi-frac", type=float, default=0.1)
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("estimate", help="admittance estimation from measurements")
    p.add_argument("--measurements", required=True, help="CSV: vR.., vI.., signals")
    p.add_argument("--buses", type=int, required=True)
    p.add_argument("--mode", choices=("currents", "powers"), default="currents")
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench", help="RTT/solver runtime table (loopback)")
    p.add_argument("--grid", required=True)
    p.add_argument("--parties", type=int, default=3)
    p.add_argument("--rtts", default="1,5,10", help="comma-separated RTTs in ms")
    p.add_argument("--solvers", default="lu,gmres")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--render", action="store_true")
    p.add_argument("--report-out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("convert-simbench", help="convert bus/branch CSVs to grid JSON")
    p.add_argument("--buses-csv", required=True)
    p.add_argument("--branches-csv", required=True)
    p.add_argument("--v-nominal", type=float, default=230.0)
    p.add_argument("--grid-id", default="converted")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CertificateFail as exc:
        print(f"certificate: {exc}", file=sys.stderr)
        return EXIT_CERTIFICATE
    except (PreprocessingExhausted, FormatMismatch) as exc:
        print(f"preprocessing: {exc}", file=sys.stderr)
        return EXIT_PREPROCESSING
    except PeerFailure as exc:
        print(f"peer: {exc}", file=sys.stderr)
        return EXIT_PEER
    except NotConverged as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except PpfaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
