"""Command-line front end: hrl {meta-train, meta-test, separation, validate, bench}."""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .envs import TaskFamily
from .mdp import rng_stream
from .textio import fmt

CSV_HELP = """\
output files (under --out, default [run] out):
  meta-train  seed<k>/state/        resumable state (phase by phase)
              seed<k>/exits.csv     seed, state, action, true_exit, label
  meta-test   regret.csv            seed, episode, regret, cumulative_regret, timesteps
              regret_mean.csv       episode, mean_regret, mean_cumulative_regret
              regret.svg            with --plot or [run] plot = true
  separation  separation.csv        W, learner, seed, regret, v_star, flat_over_hierarchy
              separation_summary.csv W, learner, mean_regret, flat_over_hierarchy
              separation_W<w>.svg   mean cumulative regret, one curve per learner
  every run   records.csv           append-only run log: config_hash, command, seed, phase,
                                    status, cause, wall_seconds, queries_phase1,
                                    queries_phase2, queries_phase3, exits_recovered,
                                    exits_true, exact_recovery, regret_total
Everything except records.csv (wall time) is byte-identical for equal config and seed.
HRL_THREADS caps the number of worker processes (default 1).
HRL_BACKEND selects the kernel path: numba (default) or numpy.
"""

RECORD_FIELDS = ("config_hash", "command", "seed", "phase", "status", "cause", "wall_seconds",
                 "queries_phase1", "queries_phase2", "queries_phase3", "exits_recovered",
                 "exits_true", "exact_recovery", "regret_total")

LEARNERS = ("flat", "hierarchy", "reduction")


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def threads() -> int:
    raw = os.environ.get("HRL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HRL_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def fan_out(fn, jobs: list) -> list:
    """Apply fn to each job, in worker processes when HRL_THREADS > 1; order is kept."""
    n = min(threads(), len(jobs))
    if n <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def append_record(out: Path, record: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "records.csv"
    new = not path.exists()
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, RECORD_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: record.get(k, "") for k in RECORD_FIELDS})


def seed_for(root_seed: int, seed: int) -> int:
    """Integer seed mixing the root seed and the run seed."""
    return int(np.random.SeedSequence([root_seed, seed]).generate_state(1)[0])


def _family(cfg: ExperimentConfig) -> TaskFamily:
    if not cfg.family:
        raise ConfigError("config has no [family] section")
    return cfg.build_family()


def _seeds(cfg: ExperimentConfig, args) -> tuple:
    return (args.seed,) if args.seed is not None else cfg.seeds


# ---------------------------------------------------------------------------
# meta-train
# ---------------------------------------------------------------------------

def _meta_train_one(cfg: ExperimentConfig, seed: int, phase: str, out: Path) -> dict:
    from .metatrain import (MetaTrainState, phase1_task_learning, phase2_reward_free,
                            phase3_detect_exits, PhaseOrderError)

    family = _family(cfg)
    mcfg = cfg.meta_train
    s = seed_for(cfg.root_seed, seed)
    sdir = out / f"seed{seed}"
    state_dir = sdir / "state"
    rec = {"seed": seed, "phase": phase}
    if phase in ("all", "1"):
        st = phase1_task_learning(family, mcfg, s)
        st.save(state_dir)
    else:
        try:
            st = MetaTrainState.load(state_dir)
        except FileNotFoundError:
            raise PhaseOrderError(f"phase order: phase {phase} needs the phase 1 state in {state_dir}") from None
    if phase in ("all", "2"):
        st.require("phase2")
        phase2_reward_free(family, mcfg, s, st)
        st.save(state_dir)
    if phase in ("all", "3"):
        phase3_detect_exits(family, mcfg, s, st)
        st.save(state_dir)
    by_phase = st.counter.by_phase()
    for k in (1, 2, 3):
        rec[f"queries_phase{k}"] = by_phase.get(f"phase{k}", 0)
    if st.exits is not None:
        found = st.exits.pairs()
        truth = family.hierarchy.exits
        names = exit_labels(family)
        write_csv(sdir / "exits.csv", ("seed", "state", "action", "true_exit", "label"),
                  [(seed, s_, a, int((s_, a) in truth), names.get((s_, a), ""))
                   for s_, a in sorted(found)])
        rec.update(exits_recovered=len(found), exits_true=len(truth),
                   exact_recovery=int(found == truth))
    return rec


def exit_labels(family: TaskFamily) -> dict:
    """Readable names for four-room exits: gate<k> and the dummy start pair."""
    layout = family.labels.get("layout")
    if layout is None:
        return {}
    names = {(s, a): f"gate{k}" for k, s, a, _ in layout.gate_pairs()}
    if layout.dummy:
        names[(0, 0)] = "start"
    return names


def cmd_meta_train(cfg: ExperimentConfig, args, out: Path) -> int:
    phase = args.phase or "all"
    seeds = _seeds(cfg, args)
    jobs = [(cfg, seed, phase, out) for seed in seeds]
    status = 0
    for seed, res in zip(seeds, fan_out(_guarded, [(_meta_train_one, *j) for j in jobs])):
        rec, err = res
        rec = {"seed": seed, "phase": phase, **rec}
        if err:
            status = 1
            rec.update(status="failed", cause=err)
            print(f"seed {seed}: {err}", file=sys.stderr)
        else:
            rec["status"] = "ok"
            if "exact_recovery" in rec:
                print(f"seed {seed}: {rec['exits_recovered']} exits flagged, "
                      f"exact recovery {'yes' if rec['exact_recovery'] else 'no'}")
            else:
                print(f"seed {seed}: phase {phase} done")
        _finish_record(cfg, args, out, rec)
    return status


def _guarded(fn, *args):
    """Run fn, returning (result, None) or (timing, cause) so failures still get recorded."""
    t0 = time.perf_counter()
    try:
        res = fn(*args)
        res["wall_seconds"] = f"{time.perf_counter() - t0:.3f}"
        return res, None
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        return {"wall_seconds": f"{time.perf_counter() - t0:.3f}"}, f"{type(exc).__name__}: {exc}"


def _finish_record(cfg, args, out, rec) -> None:
    rec.setdefault("config_hash", cfg.digest)
    rec.setdefault("command", args.command)
    append_record(out, rec)


# ---------------------------------------------------------------------------
# meta-test
# ---------------------------------------------------------------------------

def target_cluster(family: TaskFamily, task: int) -> set:
    """Declared target states, else every cluster holding positive reward."""
    if "target" in family.labels:
        return set(family.labels["target"])
    mdp = family.tasks[task]
    cl = family.hierarchy.cluster_of
    rewarded = {int(cl[s]) for s in np.flatnonzero(mdp.rewards.max(-1) > 0)}
    return {int(s) for s in np.flatnonzero(np.isin(cl, sorted(rewarded)))}


def build_oracle(cfg: ExperimentConfig, family: TaskFamily, task: int):
    from .metatrain import MetaTrainState
    from .oracle import HierarchyOracle

    mdp = family.tasks[task]
    o = cfg.oracle
    if o.source == "ground-truth":
        return HierarchyOracle.from_ground_truth(mdp, family.hierarchy, o.eps0)
    if o.state is None:
        raise ConfigError("[meta_test] a learned oracle needs state = <meta-train state dir>")
    try:
        st = MetaTrainState.load(o.state)
    except FileNotFoundError:
        raise FileNotFoundError(f"missing oracle state: {o.state}") from None
    return HierarchyOracle.from_meta_train(st, mdp.start_state, mdp.horizon,
                                           1.0 if o.eps0 is None else o.eps0)


def _meta_test_one(cfg: ExperimentConfig, seed: int) -> dict:
    from .metatest import run_hierarchy_learner

    family = _family(cfg)
    task = cfg.oracle.task
    if not 0 <= task < family.T:
        raise ConfigError(f"[meta_test] task {task} out of range")
    oracle = build_oracle(cfg, family, task)
    run = run_hierarchy_learner(family.tasks[task], oracle, target_cluster(family, task),
                                cfg.meta_test, rng_stream(cfg.root_seed, "meta-test", seed))
    return {"seed": seed, "regret": run.regret, "timesteps": run.timesteps}


def cmd_meta_test(cfg: ExperimentConfig, args, out: Path) -> int:
    if cfg.meta_test is None:
        raise ConfigError("config has no [meta_test] section")
    seeds = _seeds(cfg, args)
    results = fan_out(_guarded, [(_meta_test_one, cfg, seed) for seed in seeds])
    rows, curves, status = [], {}, 0
    for seed, (res, err) in zip(seeds, results):
        rec = {"seed": seed, "phase": "meta-test", "wall_seconds": res.get("wall_seconds", "")}
        if err:
            status = 1
            rec.update(status="failed", cause=err)
            print(f"seed {seed}: {err}", file=sys.stderr)
        else:
            cum = np.cumsum(res["regret"])
            curves[f"seed {seed}"] = cum
            for i, (r, c, t) in enumerate(zip(res["regret"], cum, res["timesteps"])):
                rows.append((seed, i + 1, fmt(r), fmt(c), int(t)))
            rec.update(status="ok", regret_total=fmt(cum[-1] if len(cum) else 0.0))
            print(f"seed {seed}: cumulative regret {cum[-1] if len(cum) else 0.0:.6g}")
        _finish_record(cfg, args, out, rec)
    if curves:
        write_csv(out / "regret.csv", ("seed", "episode", "regret", "cumulative_regret", "timesteps"), rows)
        mean_cum = np.mean(list(curves.values()), axis=0)
        mean_reg = np.diff(mean_cum, prepend=0.0)
        write_csv(out / "regret_mean.csv", ("episode", "mean_regret", "mean_cumulative_regret"),
                  [(i + 1, fmt(r), fmt(c)) for i, (r, c) in enumerate(zip(mean_reg, mean_cum))])
        if args.plot or cfg.plot:
            from .svg import write_plot

            write_plot(out / "regret.svg", {**curves, "mean": mean_cum}, title="Cumulative regret",
                       xlabel="episode", ylabel="cumulative regret")
    return status


# ---------------------------------------------------------------------------
# separation
# ---------------------------------------------------------------------------

def _separation_one(cfg: ExperimentConfig, seed: int) -> dict:
    from .metatest import run_separation_experiment

    sp = cfg.separation
    rows, curves = run_separation_experiment(sp.widths, sp.num_episodes, [seed], sp.eps,
                                             cfg.root_seed, sp.bonus_scale)
    return {"seed": seed, "rows": rows, "curves": curves}


def cmd_separation(cfg: ExperimentConfig, args, out: Path) -> int:
    seeds = _seeds(cfg, args)
    results = fan_out(_guarded, [(_separation_one, cfg, seed) for seed in seeds])
    rows, curves, status = [], {}, 0
    for seed, (res, err) in zip(seeds, results):
        rec = {"seed": seed, "phase": "separation", "wall_seconds": res.get("wall_seconds", "")}
        if err:
            status = 1
            rec.update(status="failed", cause=err)
            print(f"seed {seed}: {err}", file=sys.stderr)
        else:
            rows += res["rows"]
            curves.update(res["curves"])
            rec.update(status="ok", regret_total=fmt(sum(r["regret"] for r in res["rows"])))
        _finish_record(cfg, args, out, rec)
    if not rows:
        return status or 1
    reg = {(r["W"], r["learner"], r["seed"]): r for r in rows}
    order = sorted(reg, key=lambda k: (k[0], LEARNERS.index(k[1]), k[2]))
    table = []
    for W, learner, seed in order:
        r = reg[(W, learner, seed)]
        h = reg[(W, "hierarchy", seed)]["regret"]
        f = reg[(W, "flat", seed)]["regret"]
        table.append((W, learner, seed, fmt(r["regret"]), fmt(r["v_star"]), _ratio(f, h)))
    write_csv(out / "separation.csv",
              ("W", "learner", "seed", "regret", "v_star", "flat_over_hierarchy"), table)
    summary = []
    widths = sorted({k[0] for k in reg})
    for W in widths:
        means = {l: float(np.mean([reg[k]["regret"] for k in reg if k[0] == W and k[1] == l]))
                 for l in LEARNERS}
        for l in LEARNERS:
            summary.append((W, l, fmt(means[l]), _ratio(means["flat"], means["hierarchy"])))
        print(f"W={W}: " + ", ".join(f"{l} {means[l]:.1f}" for l in LEARNERS))
    write_csv(out / "separation_summary.csv", ("W", "learner", "mean_regret", "flat_over_hierarchy"),
              summary)
    if args.plot or cfg.plot:
        from .svg import write_plot

        for W in widths:
            series = {l: np.mean([c for k, c in sorted(curves.items()) if k[0] == W and k[1] == l],
                                 axis=0) for l in LEARNERS}
            write_plot(out / f"separation_W{W}.svg", series, title=f"Cumulative regret, W={W}",
                       xlabel="episode", ylabel="mean cumulative regret")
    return status


def _ratio(flat: float, hier: float) -> str:
    return fmt(flat / hier) if hier > 0 else "inf"


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------

def cmd_validate(cfg: ExperimentConfig, args, out: Path) -> int:
    from .validation import FamilyValidationError, check_coverage, validate_family

    family = _family(cfg)
    v = cfg.validate
    try:
        report = validate_family(family, v.rho, v.delta, v.index_samples, seed=cfg.root_seed)
    except FamilyValidationError as exc:
        result = {"ok": False, "violations": [str(exc)]}
    else:
        result = report.as_dict()
        alpha = cfg.meta_train.alpha if v.alpha is None else v.alpha
        zeta = cfg.meta_train.zeta if v.zeta is None else v.zeta
        if family.T > 1 and family.hierarchy.exits:
            cov = check_coverage(family, alpha, zeta, v.subset_size_cap)
            result["coverage"] = cov.as_dict()
            if not cov.ok:
                result["violations"].append(
                    f"coverage: certified (alpha, zeta) = ({cov.alpha_max:.6g}, {cov.zeta_max:.6g}) "
                    f"does not exceed the requested ({alpha:.6g}, {zeta:.6g})")
                result["ok"] = False
    if args.json:
        print(json.dumps(_finite(result), indent=2, sort_keys=True))
    else:
        print(f"family: {family.T} task(s), S={family.num_states}, A={family.num_actions}, "
              f"H={family.horizon}")
        for key in ("beta", "rho", "delta", "C_sampled"):
            if key in result:
                print(f"{key:>10}: {result[key]:.6g}")
        if "coverage" in result:
            c = result["coverage"]
            print(f"{'alpha':>10}: {c['alpha_max']:.6g} (certified), {c['alpha']:.6g} requested")
            print(f"{'zeta':>10}: {c['zeta_max']:.6g} (certified), {c['zeta']:.6g} requested")
        for note in result.get("notes", []):
            print(f"note: {note}")
        for msg in result["violations"]:
            print(f"VIOLATION: {msg}")
        print("ok" if result["ok"] else "FAILED")
    _finish_record(cfg, args, out, {"phase": "validate", "status": "ok" if result["ok"] else "failed",
                                    "cause": "; ".join(result["violations"])})
    return 0 if result["ok"] else 1


def _finite(obj):
    """JSON-safe copy: non-finite floats become the strings "inf", "-inf" or "nan"."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else str(float(obj))
    return obj


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    from .bench import format_table, run_bench

    rows = run_bench(args.states, args.actions, args.horizon)
    if args.json:
        print(json.dumps([r.as_dict() for r in rows], indent=2))
    else:
        print(format_table(rows))
    if args.out:
        write_csv(Path(args.out) / "bench.csv", ("kernel", "backend", "size", "seconds"),
                  [(r.kernel, r.backend, r.size, fmt(r.seconds)) for r in rows])
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="sectioned key=value config file")
    common.add_argument("--seed", type=int, help="run this seed only (default: [run] seeds)")
    common.add_argument("--out", help="output directory (default: [run] out)")

    p = argparse.ArgumentParser(prog="hrl", description=__doc__, epilog=CSV_HELP,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt_cls = argparse.RawDescriptionHelpFormatter
    mt = sub.add_parser("meta-train", parents=[common], epilog=CSV_HELP, formatter_class=fmt_cls,
                        help="learn the task family's exits")
    mt.add_argument("--phase", choices=("1", "2", "3", "all"),
                    help="run one phase, resuming from the saved state (default: all)")
    te = sub.add_parser("meta-test", parents=[common], epilog=CSV_HELP, formatter_class=fmt_cls,
                        help="hierarchy learner regret on a downstream task")
    te.add_argument("--plot", action="store_true", help="write an SVG regret plot")
    se = sub.add_parser("separation", parents=[common], epilog=CSV_HELP, formatter_class=fmt_cls,
                        help="flat versus hierarchy regret on binary-tree tasks")
    se.add_argument("--plot", action="store_true", help="write one SVG per width")
    va = sub.add_parser("validate", parents=[common], help="check the family's structural assumptions")
    va.add_argument("--json", action="store_true", help="machine-readable report")
    be = sub.add_parser("bench", help="time the numba and numpy kernel paths")
    be.add_argument("--states", type=int, default=60)
    be.add_argument("--actions", type=int, default=4)
    be.add_argument("--horizon", type=int, default=30)
    be.add_argument("--json", action="store_true")
    be.add_argument("--out", help="directory for bench.csv")
    return p


COMMANDS = {"meta-train": cmd_meta_train, "meta-test": cmd_meta_test,
            "separation": cmd_separation, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "bench":
        return cmd_bench(args)
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out is not None:
            append_record(out, {"config_hash": "-", "command": args.command, "status": "failed",
                                "cause": str(exc)})
        return 2
    out = out or cfg.out
    try:
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _finish_record(cfg, args, out, {"status": "failed", "cause": f"{type(exc).__name__}: {exc}"})
        return 1


if __name__ == "__main__":
    sys.exit(main())
