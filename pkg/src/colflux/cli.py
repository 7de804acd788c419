"""Command-line front end tying the pipeline together.

Subcommands cover the whole experiment flow: steady-state inspection,
disturbance-sequence generation, the benchmark operating-region run, pool
construction, policy training, closed-loop evaluation, the summary table,
and SVG plots. Every artifact-writing command drops a run manifest next to
its outputs recording the command, configuration, seeds, and content
digests, so results can be traced and reproduced.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error. Failures
print one machine-readable JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from . import policy as policy_io
from .column import (
    ColumnParams,
    Controls,
    ConvergenceError,
    NoiseSpec,
    SingularHoldupError,
    stage_temperature,
    steady_state,
)
from .manifest import RunManifest, file_sha256
from .mpc import OcpConfig
from .plots import KINDS, emit_plot
from .presets import (
    PRESETS,
    ROSTER,
    SEED_EVALUATION,
    SEED_INITIAL_POOL,
    SEED_NOISE_POOL,
    SEED_POLICY_INIT,
    SEED_REGION_SEQUENCE,
    SEED_TEST_SEQUENCE,
    SEED_TRAIN_DRAWS,
    seed_for,
)
from .sampling import (
    InitialConditionPool,
    NoisePool,
    PoolBuildError,
    RegionData,
    build_initial_pool,
    build_noise_pool,
)
from .scenarios import (
    DisturbanceSequence,
    EvalReport,
    cumulative_objective,
    estimate_operating_region,
    generate_disturbance_sequence,
    run_table4,
    simulate_closed_loop,
)
from .training import TrainConfig, regularized_workflow, train

log = logging.getLogger(__name__)

USAGE_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    json.JSONDecodeError,
)
RUNTIME_ERRORS = (
    SingularHoldupError,
    ConvergenceError,
    PoolBuildError,
    FloatingPointError,
)


def _parse_set(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _load_params(args) -> ColumnParams:
    """Effective column parameters: --set > --params file > defaults."""
    if getattr(args, "params", None):
        base = ColumnParams.from_json(args.params)
    else:
        base = ColumnParams()
    overrides = _parse_set(getattr(args, "set", []) or [])
    if overrides:
        base = ColumnParams.with_overrides(base, overrides)
    return base


def _params_dict(params: ColumnParams) -> dict:
    doc = dataclasses.asdict(params)
    doc["u_max"] = list(doc["u_max"])
    return doc


def _write_manifest(
    args,
    params: ColumnParams,
    sidecar_path,
    seeds: dict,
    inputs: dict,
    artifacts: list,
    options: dict,
    t0: float,
) -> None:
    base = os.path.dirname(os.path.abspath(sidecar_path))
    digests = {}
    for path in artifacts:
        rel = os.path.relpath(os.path.abspath(path), base)
        digests[rel] = file_sha256(path)
    man = RunManifest(
        command=tuple(args._argv),
        config={"params": _params_dict(params), "options": options},
        seeds=seeds,
        inputs=inputs,
        artifacts=digests,
        wall_time_s=time.perf_counter() - t0,
    )
    man.write(sidecar_path)


def _sidecar(out_path) -> str:
    return f"{out_path}.manifest.json"


# ---------------------------------------------------------------------------
# subcommands


def cmd_steady_state(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    state = steady_state(params)
    controls = Controls.nominal(params)
    d = params.D0 + params.K_D * (state.M[-1] - params.M0)
    b = params.B0 + params.K_B * (state.M[0] - params.M0)
    print(f"x_1   = {state.x[0]:.12f}")
    print(f"x_{params.N_T:<3d} = {state.x[-1]:.12f}")
    print(f"L_T   = {controls.lt:.6f}  V_B = {controls.vb:.6f}")
    print(f"D     = {d:.6f}  B   = {b:.6f}")
    if args.out:
        names = ["stage", "M", "x", "T"]
        temps = stage_temperature(state.x, params)
        data = np.column_stack(
            [np.arange(1, params.N_T + 1, dtype=np.float64), state.M, state.x, temps]
        )
        np.savetxt(args.out, data, fmt="%.17g", delimiter=",",
                   header=",".join(names), comments="")
        _write_manifest(
            args, params, _sidecar(args.out), seeds={}, inputs={},
            artifacts=[args.out], options={"out": args.out}, t0=t0,
        )
    return 0


def cmd_gen_disturbances(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    seed = args.seed if args.seed is not None else seed_for(SEED_TEST_SEQUENCE)
    seq = generate_disturbance_sequence(seed=seed, n_events=args.events)
    seq.to_csv(args.out)
    print(f"events={seq.n_events} duration={seq.duration:.4f} min -> {args.out}")
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={"sequence": seed}, inputs={},
        artifacts=[args.out],
        options={"events": args.events, "out": args.out}, t0=t0,
    )
    return 0


def cmd_region(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    seq = DisturbanceSequence.from_csv(args.sequence)
    region, _ = estimate_operating_region(seq, params, ocp=_ocp_from(args))
    region.to_csv(args.out)
    qpath = args.quantiles_out or _stem(args.out) + "-quantiles.csv"
    _write_quantiles(region, qpath)
    print(f"rows={region.t.size} -> {args.out}")
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={}, inputs={"sequence": file_sha256(args.sequence)},
        artifacts=[args.out, qpath],
        options={"sequence": args.sequence, "out": args.out}, t0=t0,
    )
    return 0


def _stem(path) -> str:
    root, _ = os.path.splitext(path)
    return root


def _write_quantiles(region: RegionData, path) -> None:
    q = region.quantiles()
    names = ["q"] + [f"T_{j+1}" for j in range(region.n_stages)] \
        + [f"M_{j+1}" for j in range(region.n_stages)]
    data = np.column_stack([q["q"], q["temperatures"], q["holdups"]])
    np.savetxt(path, data, fmt="%.17g", delimiter=",",
               header=",".join(names), comments="")


def cmd_pools(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    region = RegionData.from_csv(args.region)
    seed = args.seed if args.seed is not None else seed_for(SEED_INITIAL_POOL)
    noise_seed = args.noise_seed if args.noise_seed is not None \
        else seed_for(SEED_NOISE_POOL)
    os.makedirs(args.out_dir, exist_ok=True)
    pool = build_initial_pool(region, args.n, seed, params)
    noise = build_noise_pool(NoiseSpec.table_default(params), args.n, noise_seed)
    zero = build_noise_pool(NoiseSpec.table_default(params), args.n, noise_seed,
                            zero=True)
    paths = {
        "initial_pool.csv": pool,
        "noise_pool.csv": noise,
        "noise_zero.csv": zero,
    }
    written = []
    for name, obj in paths.items():
        path = os.path.join(args.out_dir, name)
        obj.to_csv(path)
        written.append(path)
    print(f"pool size={args.n} -> {args.out_dir}")
    _write_manifest(
        args, params, os.path.join(args.out_dir, "manifest.json"),
        seeds={"initial_pool": seed, "noise_pool": noise_seed},
        inputs={"region": file_sha256(args.region)},
        artifacts=written,
        options={"region": args.region, "n": args.n}, t0=t0,
    )
    return 0


def cmd_train(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    roster = ROSTER[args.policy]
    preset = PRESETS[args.preset]
    init_seed = args.init_seed if args.init_seed is not None \
        else seed_for(SEED_POLICY_INIT)
    draw_seed = args.draw_seed if args.draw_seed is not None \
        else seed_for(SEED_TRAIN_DRAWS)

    pool_path = os.path.join(args.pools, "initial_pool.csv")
    noise_name = "noise_pool.csv" if roster.train_noise else "noise_zero.csv"
    noise_path = os.path.join(args.pools, noise_name)
    pool = InitialConditionPool.from_csv(pool_path)
    noise = NoisePool.from_csv(noise_path)

    spec = roster.spec(u_max=params.u_max)
    config = preset.train_config(
        draw_seed=draw_seed, init_seed=init_seed, workers=args.workers,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    meta = {
        "policy": args.policy,
        "preset": args.preset,
        "init_seed": init_seed,
        "draw_seed": draw_seed,
    }
    if roster.regularized:
        final, record, selected = regularized_workflow(
            spec, pool, noise, config, params,
        )
        meta["selected"] = list(selected)
        print(f"selected measurements (1-based): {list(selected)}")
    else:
        final, record = train(spec, pool, noise, config, params)
    policy_path = os.path.join(args.out_dir, "policy.json")
    record_path = os.path.join(args.out_dir, "record.csv")
    policy_io.save(final, policy_path, meta=meta)
    record.to_csv(record_path, include_wall=False)
    print(f"final objective (smoothed tail): "
          f"{float(np.mean(record.objective[-50:])):.6g} -> {args.out_dir}")
    _write_manifest(
        args, params, os.path.join(args.out_dir, "manifest.json"),
        seeds={"init": init_seed, "draws": draw_seed},
        inputs={
            "initial_pool": file_sha256(pool_path),
            "noise_pool": file_sha256(noise_path),
        },
        artifacts=[policy_path, record_path],
        options={"policy": args.policy, "preset": args.preset,
                 "pools": args.pools, "workers": args.workers},
        t0=t0,
    )
    return 0


def _ocp_from(args) -> OcpConfig:
    return OcpConfig(horizon=args.mpc_horizon) if getattr(args, "mpc_horizon", None) \
        else OcpConfig()


def cmd_mpc_run(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    seq = DisturbanceSequence.from_csv(args.sequence)
    traj = simulate_closed_loop("mpc", seq, params, ocp=_ocp_from(args))
    obj = cumulative_objective(traj, seq.start)
    _write_traj(traj, args.out, params, args.stride)
    print(f"cumulative objective (post start-up) = {obj:.6g} -> {args.out}")
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={}, inputs={"sequence": file_sha256(args.sequence)},
        artifacts=[args.out],
        options={"sequence": args.sequence, "stride": args.stride,
                 "objective": obj},
        t0=t0,
    )
    return 0


def _write_traj(traj, path, params, stride: int = 1) -> None:
    if stride > 1:
        traj = traj.subsample(stride)
    traj.to_csv(path, params=params)


MODES = ("nominal", "bias", "avg-bias", "extreme", "mismatch")


def _evaluate_one(pol, seq, params, mode, seed, draws):
    if mode == "nominal":
        traj = simulate_closed_loop(pol, seq, params)
        return cumulative_objective(traj, seq.start), traj
    if mode == "bias":
        traj = simulate_closed_loop(
            pol, seq, params, noise_mode="constant_bias", seed=seed,
        )
        return cumulative_objective(traj, seq.start), traj
    if mode == "extreme":
        traj = simulate_closed_loop(
            pol, seq, params, noise_mode="extreme", seed=seed,
        )
        return cumulative_objective(traj, seq.start), traj
    if mode == "mismatch":
        traj = simulate_closed_loop(pol, seq, params, io_factors=(1.1, 0.9))
        return cumulative_objective(traj, seq.start), traj
    # avg-bias: mean over seeded constant-bias draws
    ds = [
        int(s.generate_state(1)[0])
        for s in np.random.SeedSequence(seed).spawn(draws)
    ]
    vals = []
    for d in ds:
        traj = simulate_closed_loop(
            pol, seq, params, noise_mode="constant_bias", seed=d,
        )
        vals.append(cumulative_objective(traj, seq.start))
    return float(np.mean(vals)), None


def cmd_evaluate(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    seq = DisturbanceSequence.from_csv(args.sequence)
    seed = args.seed if args.seed is not None else seed_for(SEED_EVALUATION)
    rows = []
    inputs = {"sequence": file_sha256(args.sequence)}
    written = []
    for path in args.policies:
        name = policy_io.load_meta(path).get("policy") \
            or _stem(os.path.basename(path))
        pol = policy_io.load(path)
        inputs[f"policy:{name}"] = file_sha256(path)
        log.info("evaluating %s under %s", name, args.mode)
        value, traj = _evaluate_one(pol, seq, params, args.mode, seed, args.draws)
        rows.append((name, args.mode, value))
        print(f"{name:>16s}  {args.mode:>9s}  {value:.6g}")
        if args.traj_dir and traj is not None:
            os.makedirs(args.traj_dir, exist_ok=True)
            tp = os.path.join(args.traj_dir, f"{name}-{args.mode}.csv")
            _write_traj(traj, tp, params)
            written.append(tp)
    report = EvalReport(
        rows=tuple(rows),
        meta={"mode": args.mode, "seed": seed, "sequence_seed": seq.seed},
    )
    report.to_csv(args.out)
    written.insert(0, args.out)
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={"evaluation": seed}, inputs=inputs, artifacts=written,
        options={"mode": args.mode, "draws": args.draws,
                 "policies": list(args.policies)},
        t0=t0,
    )
    return 0


def cmd_table4(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    seq = DisturbanceSequence.from_csv(args.sequence)
    seed = args.seed if args.seed is not None else seed_for(SEED_EVALUATION)
    policies = {}
    inputs = {"sequence": file_sha256(args.sequence)}
    for spec in args.policies:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ValueError(f"--policies expects name=path, got {spec!r}")
        policies[name] = policy_io.load(path)
        inputs[f"policy:{name}"] = file_sha256(path)
    report = run_table4(
        policies, seq, params, seed=seed, n_bias_draws=args.draws,
        ocp=_ocp_from(args),
    )
    report.to_csv(args.out)
    print(report.render())
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={"evaluation": seed}, inputs=inputs, artifacts=[args.out],
        options={"draws": args.draws, "policies": list(args.policies)},
        t0=t0,
    )
    return 0


def cmd_plot(args, params: ColumnParams) -> int:
    t0 = time.perf_counter()
    emit_plot(args.traj, args.kind, args.out, params=params)
    print(f"{args.kind} plot -> {args.out}")
    _write_manifest(
        args, params, _sidecar(args.out),
        seeds={}, inputs={"traj": file_sha256(args.traj)},
        artifacts=[args.out],
        options={"kind": args.kind, "traj": args.traj}, t0=t0,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="colflux",
        description="Closed-loop training and evaluation of distillation "
                    "column controllers.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--params", help="JSON file with column parameters")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one column parameter (repeatable)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel gradient workers")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="INFO-level progress logging")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("steady-state", parents=[common],
                       help="print (and optionally export) the nominal steady state")
    p.add_argument("--out", help="write the stage profile CSV here")
    p.set_defaults(func=cmd_steady_state)

    p = sub.add_parser("gen-disturbances", parents=[common],
                       help="generate a multi-level disturbance sequence")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--events", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_disturbances)

    p = sub.add_parser("region", parents=[common],
                       help="benchmark closed-loop run logging the operating region")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quantiles-out", default=None)
    p.add_argument("--mpc-horizon", type=float, default=None)
    p.set_defaults(func=cmd_region)

    p = sub.add_parser("pools", parents=[common],
                       help="build initial-condition and noise pools from a region log")
    p.add_argument("--region", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pools)

    p = sub.add_parser("train", parents=[common],
                       help="train one roster policy on prepared pools")
    p.add_argument("--policy", required=True, choices=sorted(ROSTER))
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--pools", required=True, help="directory from the pools command")
    p.add_argument("--init-seed", type=int, default=None)
    p.add_argument("--draw-seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("mpc-run", parents=[common],
                       help="closed-loop benchmark run over a disturbance sequence")
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int, default=1,
                   help="write every Nth grid node")
    p.add_argument("--mpc-horizon", type=float, default=None)
    p.set_defaults(func=cmd_mpc_run)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score trained policies under one evaluation mode")
    p.add_argument("--policies", nargs="+", required=True,
                   help="policy JSON files")
    p.add_argument("--sequence", required=True)
    p.add_argument("--mode", default="nominal", choices=MODES)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--draws", type=int, default=10,
                   help="bias draws for avg-bias mode")
    p.add_argument("--out", required=True)
    p.add_argument("--traj-dir", default=None,
                   help="also write closed-loop trajectory CSVs here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table4", parents=[common],
                       help="benchmark-vs-policies summary table")
    p.add_argument("--policies", nargs="+", required=True, metavar="NAME=PATH")
    p.add_argument("--sequence", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--mpc-horizon", type=float, default=None)
    p.set_defaults(func=cmd_table4)

    p = sub.add_parser("plot", parents=[common],
                       help="render a trajectory or envelope CSV to SVG")
    p.add_argument("--traj", required=True, help="input CSV")
    p.add_argument("--kind", default="temperatures", choices=KINDS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def _fail(exc: BaseException, code: int) -> int:
    line = json.dumps(
        {"error": type(exc).__name__, "message": str(exc), "exit": code},
        sort_keys=True,
    )
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = ["colflux"] + argv
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        params = _load_params(args)
        return args.func(args, params)
    except RUNTIME_ERRORS as exc:
        return _fail(exc, 1)
    except USAGE_ERRORS as exc:
        return _fail(exc, 2)
    except Exception as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
