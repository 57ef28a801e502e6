"""Command-line driver: ``snplab {train,expand,analyze,bench,export-suite}``.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 radius
unresolved (some task was rolled back), 5 mode-switch search exhausted.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError, RadiusUnresolvedError
from .evaluation import ResultLedger, evaluate_tasks, format_report
from .experiment import (
    ExperimentConfig,
    load_config,
    maml_hyper,
    run_bench,
    split_tasks,
    with_overrides,
)
from .meta import (
    STREAM_DRIFT,
    interpolation_drift_curve,
    measure_subspace_radius,
    project,
    recovery_check,
    sample_drift_profile,
    train_space,
)
from .online import ExpansionConfig, SearchConfig, expand_space, flat_basin_predicate, mode_switch
from .persistence import load_checkpoint, load_memory, load_suite, save_checkpoint, save_memory, save_suite
from .tasks import generate_task_suite, group_tasks, pairwise_model_distance
from .telemetry import Telemetry

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_RADIUS = 4
EXIT_SEARCH_FAILED = 5

MODE_FLAGS = {"snp": "snp", "add": "snp_add", "remove": "snp_remove",
              "interpolate": "snp_interpolate", "mode-switch": "snp_mode_switch"}

log = logging.getLogger("snplab")


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed-{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _echo_config(config: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(config.dump(), encoding="utf-8")


def _write_csv(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _suite(config: ExperimentConfig, seed: int, path: str | None):
    return load_suite(path) if path else generate_task_suite(seed, config.suite)


# ------------------------------------------------------------------- commands


def cmd_train(config: ExperimentConfig, seed: int, out: Path, method: str = "snp",
              suite_path: str | None = None) -> int:
    """Meta-train on the configured seen tasks; write checkpoint, memory and telemetry."""
    d = _seed_dir(out, seed)
    suite = _suite(config, seed, suite_path)
    train, _ = split_tasks(config, suite)
    hyper = config.hyper if method == "snp" else maml_hyper(config.hyper)
    with Telemetry(d / "telemetry.jsonl") as tel:
        theta, memory = train_space(train, hyper, config.model, store_memory=True, rng_seed=seed,
                                    telemetry=tel)
    save_checkpoint(d / "checkpoint", theta, config.model, seed, {"method": method, "stage": 0})
    save_memory(d / "memory", memory)
    return EXIT_OK


def cmd_expand(config: ExperimentConfig, seed: int, out: Path, checkpoint: str, memory_path: str | None,
               mode: str = "add", task: str | None = None, suite_path: str | None = None) -> int:
    """Learn the configured new tasks (or switch a task's mode) from a trained checkpoint."""
    d = _seed_dir(out, seed)
    ck = load_checkpoint(checkpoint)
    if ck.config != config.model:
        raise ConfigError("checkpoint model config differs from the experiment config")
    memory = load_memory(memory_path) if memory_path else None
    suite = _suite(config, seed, suite_path)
    train, new = split_tasks(config, suite)
    settings = dataclasses.replace(config.settings(), seed=seed)
    mode_name = MODE_FLAGS[mode]
    with Telemetry(d / "telemetry.jsonl") as tel:
        if mode_name == "snp_mode_switch":
            if task is None or memory is None:
                raise ConfigError("mode-switch needs --task and --memory")
            hyper = config.hyper
            profile = sample_drift_profile(
                ck.params, [project(ck.params, e.batch(), hyper.lr_base, config.model) for e in memory],
                list(memory), hyper, (seed, STREAM_DRIFT), config.model,
            )
            radius = profile.radius(hyper.epsilon if hyper.epsilon is not None else
                                    recovery_check(ck.params, list(memory), hyper, config.model).epsilon)
            if radius is None:
                raise RadiusUnresolvedError()
            res = mode_switch(ck.params, memory, task, flat_basin_predicate(config.model, hyper.K, seed=seed),
                              SearchConfig(), config.model, hyper, (seed, 11), radius=radius, telemetry=tel)
            (d / "mode_switch.json").write_text(json.dumps(
                {"success": res.success, "trials": res.trials, "consolidation": res.consolidation},
                indent=2, sort_keys=True), encoding="utf-8")
            if not res.success:
                return EXIT_SEARCH_FAILED
            theta = res.theta
        else:
            if mode_name != "snp" and memory is None:
                raise ConfigError(f"mode {mode} needs --memory")
            exp = ExpansionConfig(config.hyper, mode_name,
                                  remove_task=task if mode_name == "snp_remove" else None,
                                  residual_beta=config.expansion.residual_beta,
                                  beta_int=config.expansion.beta_int)
            if mode_name == "snp_remove" and task is None:
                raise ConfigError("remove needs --task")
            res = expand_space(ck.params, new, memory if mode_name != "snp" else None, exp, config.model,
                               (seed, 7), telemetry=tel, eval_tasks=train + new, eval_settings=settings,
                               method=mode)
            theta = res.theta
            if res.memory is not None:
                memory = res.memory
            ledger = ResultLedger()
            ledger.extend(evaluate_tasks(ck.params, config.model, train + new, 0, mode, settings))
            ledger.extend(res.ledger)
            (d / "ledger.csv").write_text(ledger.to_csv(), encoding="utf-8")
            if res.aborted:
                log.error("rolled back tasks %s: radius unresolved", res.aborted)
    save_checkpoint(d / "checkpoint_expanded", theta, config.model, seed, {"mode": mode})
    if memory is not None:
        save_memory(d / "memory_expanded", memory)
    if mode_name != "snp_mode_switch" and res.aborted:
        return EXIT_RADIUS
    return EXIT_OK


def cmd_analyze(config: ExperimentConfig, seed: int, out: Path, checkpoints: list[str],
                memory_path: str | None, what: set[str], suite_path: str | None = None) -> dict:
    """Drift reports for the first checkpoint; pairwise distances and groups across all of them."""
    d = _seed_dir(out, seed)
    cks = [load_checkpoint(p) for p in checkpoints]
    theta, model = cks[0].params, cks[0].config
    if memory_path:
        tasks = list(load_memory(memory_path))
    else:
        tasks, _ = split_tasks(config, _suite(config, seed, suite_path))
    hyper = config.hyper
    report = {}
    if "radius" in what:
        r = measure_subspace_radius(theta, tasks, hyper, model)
        _write_csv(d / "radius.csv", [{"task": t, "euclidean": e, "cosine": c} for t, e, c in r.records])
        report["radius"] = {"euclidean": r.radius_euclidean, "cosine": r.radius_cosine}
    if "recovery" in what:
        rc = recovery_check(theta, tasks, hyper, model)
        ids = [getattr(t, "task_id", str(i)) for i, t in enumerate(tasks)]
        _write_csv(d / "recovery.csv", [{"moved_to": ids[j], **{ids[t]: float(rc.matrix[j, t])
                                         for t in range(len(ids))}} for j in range(len(ids))])
        report["recovery"] = {"epsilon": rc.epsilon, "epsilon_max": rc.epsilon_max}
    if "curve" in what:
        curve = interpolation_drift_curve(theta, tasks, hyper, model, np.linspace(0.05, 1.0, 20),
                                          hyper.S, (seed, STREAM_DRIFT))
        _write_csv(d / "curve.csv", curve.rows())
        report["curve_points"] = len(curve.r)
    if len(cks) > 1 and ({"pairwise", "groups"} & what):
        m = pairwise_model_distance([c.params for c in cks])
        _write_csv(d / "pairwise.csv", [{"checkpoint": checkpoints[i], **{str(j): float(m[i, j])
                                         for j in range(len(cks))}} for i in range(len(cks))])
        g = group_tasks(m)
        report["groups"] = {"labels": list(map(int, g.labels)),
                            "relations": {f"{a}-{b}": r for (a, b), r in g.relations.items()}}
    (d / "analysis.json").write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    return report


def cmd_bench(config: ExperimentConfig, out: Path) -> dict:
    """Full benchmark per seed: ledger CSV, text report, BWT rows and beta sequences."""
    results = {}
    for seed in config.seeds:
        d = _seed_dir(out, seed)
        with Telemetry(d / "telemetry.jsonl") as tel:
            res = run_bench(config, seed, tel)
        (d / "ledger.csv").write_text(res.ledger.to_csv(), encoding="utf-8")
        (d / "report.txt").write_text(format_report(res.ledger, config.policy, config.eval.top_k),
                                      encoding="utf-8")
        (d / "bwt.json").write_text(json.dumps(
            {f"{s}:{m}": {"pos": p, "neg": n} for (s, m), (p, n) in sorted(res.bwt.items())},
            indent=2, sort_keys=True), encoding="utf-8")
        (d / "beta.json").write_text(json.dumps(res.beta_histories, indent=2, sort_keys=True),
                                     encoding="utf-8")
        for method, theta in sorted(res.params.items()):
            save_checkpoint(d / f"checkpoint_{method.replace('+', 'p')}", theta, config.model, seed,
                            {"method": method})
        if res.memory is not None:
            save_memory(d / "memory", res.memory)
        results[seed] = res
    return results


def cmd_export_suite(config: ExperimentConfig, seed: int, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    man, _ = save_suite(out / f"suite-{seed}", generate_task_suite(seed, config.suite))
    return man


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (absent keys take defaults)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--paper-fidelity", action="store_true",
                        help="use the full-scale published defaults instead of desk-scale ones")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--epochs", type=int, help="override epochs_train (train) or epochs_expand (expand)")
    common.add_argument("--suite", help="load tasks from an exported suite instead of generating them")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="snplab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="meta-train on the seen tasks")
    t.add_argument("--method", choices=("snp", "maml"), default="snp")
    e = sub.add_parser("expand", parents=[common], help="learn new tasks from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--memory")
    e.add_argument("--mode", choices=tuple(MODE_FLAGS), default="add")
    e.add_argument("--task", help="task id for remove and mode-switch")
    a = sub.add_parser("analyze", parents=[common], help="drift, recovery and grouping reports")
    a.add_argument("--checkpoint", action="append", required=True)
    a.add_argument("--memory")
    a.add_argument("--what", default="radius,recovery,curve,pairwise,groups")
    sub.add_parser("bench", parents=[common], help="full multi-method benchmark")
    sub.add_parser("export-suite", parents=[common], help="write the task suite to disk")
    return p


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    config = load_config(args.config, paper_fidelity=True if args.paper_fidelity else None)
    if args.seed is not None:
        config = dataclasses.replace(config, seeds=(args.seed,))
    if args.out:
        config = dataclasses.replace(config, out=args.out)
    if args.epochs is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be non-negative")
        key = "epochs_expand" if args.command == "expand" else "epochs_train"
        config = with_overrides(config, **{key: args.epochs})
    out = Path(config.out)
    _echo_config(config, out)
    return config, out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config, out = _resolve(args)
        code = EXIT_OK
        if args.command == "bench":
            results = cmd_bench(config, out)
            for seed, res in results.items():
                for (stage, method), (pos, neg) in sorted(res.bwt.items()):
                    print(f"seed {seed} stage {stage} {method:<9} pos {pos:+7.2f} neg {neg:+7.2f}")
            return code
        for seed in config.seeds:
            if args.command == "train":
                c = cmd_train(config, seed, out, args.method, args.suite)
            elif args.command == "expand":
                c = cmd_expand(config, seed, out, args.checkpoint, args.memory, args.mode, args.task, args.suite)
            elif args.command == "analyze":
                rep = cmd_analyze(config, seed, out, args.checkpoint, args.memory,
                                  set(args.what.split(",")), args.suite)
                print(json.dumps(rep, indent=2, sort_keys=True))
                c = EXIT_OK
            else:
                print(cmd_export_suite(config, seed, out))
                c = EXIT_OK
            code = code or c
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RadiusUnresolvedError as exc:
        print(f"radius unresolved: {exc}", file=sys.stderr)
        return EXIT_RADIUS


if __name__ == "__main__":
    sys.exit(main())
