"""Command-line front end: ``dpselft <subcommand> [flags]``.

Exit codes: 0 ok, 2 configuration error, 3 privacy budget violation,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import theory
from .accountant import PrivacyLedger
from .nn import Dataset, accuracy, load_checkpoint, save_checkpoint
from .pipeline import (
    ARMS,
    RESULT_COLUMNS,
    BudgetViolation,
    ExperimentConfig,
    base_model,
    check_budget,
    choose_layers,
    finetune_sigma,
    finetune_stage,
    format_table,
    generator_config,
    load_config,
    make_task,
    run_pipeline,
    run_suite,
    selection_stage,
    stage_budgets,
    synthetic_stage,
    write_results_csv,
)
from .synth import export_synthetic, generate_candidates, load_dataset_csv, save_dataset_csv, save_pool_csv

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--arm", choices=ARMS, help="override the config arm")
    common.add_argument("--epsilon", type=float, help="override eps_total")
    common.add_argument("--deterministic", action="store_true", help="single process, fixed summation order")

    p = argparse.ArgumentParser(prog="dpselft", description="Differentially private selective fine-tuning at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write the private/test mixture and the public candidate pool")
    g.set_defaults(func=cmd_gen_data)
    s = sub.add_parser("synth", parents=[common], help="build the DP synthetic dataset")
    s.add_argument("--data", type=Path, help="directory written by gen-data")
    s.set_defaults(func=cmd_synth)
    se = sub.add_parser("select", parents=[common], help="synthetic data plus layer selection")
    se.add_argument("--data", type=Path, help="directory written by gen-data")
    se.set_defaults(func=cmd_select)
    f = sub.add_parser("finetune", parents=[common], help="DP fine-tuning of a fixed layer set")
    f.add_argument("--layers", help="comma-separated 1-based layer indices (default: the arm's own choice)")
    f.add_argument("--data", type=Path, help="directory written by gen-data")
    f.set_defaults(func=cmd_finetune)
    r = sub.add_parser("run", parents=[common], help="one arm end to end")
    r.add_argument("--data", type=Path, help="directory written by gen-data")
    r.add_argument("--init", type=Path, help="start from this model checkpoint instead of a fresh network")
    r.set_defaults(func=cmd_run)
    su = sub.add_parser("suite", parents=[common], help="arms x epsilons x seeds sweep")
    su.add_argument("--arms", help="comma-separated arms (default: all, or --arm)")
    su.add_argument("--epsilons", help="comma-separated eps_total values (default: --epsilon or the config)")
    su.add_argument("--seeds", type=int, default=3, help="number of seeds starting at --seed")
    su.add_argument("--workers", type=int, default=1)
    su.set_defaults(func=cmd_suite)
    v = sub.add_parser("verify-theory", parents=[common], help="executable checks of both bounds")
    v.add_argument("--trials", type=int, default=20000)
    v.set_defaults(func=cmd_verify_theory)
    return p


def resolve_config(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.arm is not None:
            changes["arm"] = args.arm
        if args.epsilon is not None:
            changes["eps_total"] = args.epsilon
        cfg = cfg.with_(**changes) if changes else cfg
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    if not cfg.eps_total > 0:
        raise ConfigError("eps_total must be positive")
    if cfg.arm in ("dp-selft", "dp-selft+adapter", "clean-selection", "random-noise-selection") and not cfg.eps_syn < cfg.eps_total:
        raise ConfigError("eps_syn must be smaller than eps_total")
    return cfg


def _load_data(args, cfg: ExperimentConfig) -> tuple[Dataset, Dataset, np.ndarray]:
    private, test, means = make_task(cfg.task, cfg.seed)
    data_dir = getattr(args, "data", None)
    if data_dir is None:
        return private, test, means
    try:
        private = load_dataset_csv(data_dir / "private.csv")
        test = load_dataset_csv(data_dir / "test.csv")
        with open(data_dir / "task.json") as fh:
            means = np.asarray(json.load(fh)["means"], dtype=np.float64)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read data directory {data_dir}: {exc}") from exc
    return private, test, means


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    raise TypeError(type(o))


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    private, test, means = make_task(cfg.task, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 202])
    pool = generate_candidates(generator_config(cfg, means, rng), rng)
    save_dataset_csv(private, args.out / "private.csv")
    save_dataset_csv(test, args.out / "test.csv")
    save_pool_csv(pool, args.out / "pool.csv")
    _write_json(args.out / "task.json", {"seed": cfg.seed, "task": cfg.to_dict()["task"], "means": means})
    print(f"wrote {len(private)} private, {len(test)} test, {len(pool)} candidates to {args.out}")
    return EXIT_OK


def _synthetic(args, cfg):
    private, test, means = _load_data(args, cfg)
    eps_syn, eps_ft, d_syn, d_ft = stage_budgets(cfg.with_(arm="dp-selft"))
    ledger = PrivacyLedger()
    syn = synthetic_stage(cfg, private, means, eps_syn, d_syn, ledger)
    return private, syn, ledger, (eps_ft, d_ft)


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    _, syn, ledger, _ = _synthetic(args, cfg)
    export_synthetic(syn, args.out / "synthetic.csv")
    ledger.write_json(args.out / "ledger.json")
    print(f"kept {len(syn)} synthetic records (train {len(syn.train_idx)}, val {len(syn.val_idx)}), sigma={syn.sigma_hist:.4f}")
    return EXIT_OK


def cmd_select(args, cfg: ExperimentConfig) -> int:
    if cfg.arm not in ("dp-selft", "dp-selft+adapter", "clean-selection", "random-noise-selection"):
        cfg = cfg.with_(arm="dp-selft")
    private, syn, ledger, (eps_ft, d_ft) = _synthetic(args, cfg)
    sigma = finetune_sigma(cfg, eps_ft, d_ft, len(private))
    report = selection_stage(cfg, base_model(cfg), syn, sigma)
    report.write_csv(args.out / "selection_report.csv")
    report.write_json(args.out / "selection.json")
    ledger.write_json(args.out / "ledger.json")
    print(format_table(report.rows()))
    print(f"chosen layers: {list(report.chosen)}")
    return EXIT_OK


def cmd_finetune(args, cfg: ExperimentConfig) -> int:
    if args.layers:
        try:
            layers = [int(x) for x in args.layers.split(",") if x.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --layers: {args.layers!r}") from exc
        cfg = cfg.with_(arm="heuristic", heuristic_layers=layers)
    if cfg.arm in ("dp-selft", "dp-selft+adapter", "clean-selection", "random-noise-selection"):
        return cmd_run(args, cfg)
    private, test, _ = _load_data(args, cfg)
    _, eps_ft, _, d_ft = stage_budgets(cfg)
    sigma = finetune_sigma(cfg, eps_ft, d_ft, len(private))
    model = base_model(cfg)
    try:
        layers = choose_layers(cfg, model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ledger = PrivacyLedger()
    model = finetune_stage(cfg, model, private, layers, sigma, d_ft, ledger)
    check_budget(cfg, ledger)
    acc = accuracy(model, test)
    _check_finite(acc)
    save_checkpoint(model, args.out / "model.npz")
    ledger.write_json(args.out / "ledger.json")
    print(f"layers {layers}  sigma={sigma:.4f}  eps={ledger.total_epsilon:.4f}  test accuracy={acc:.4f}")
    return EXIT_OK


def _check_finite(*values) -> None:
    if not all(math.isfinite(v) for v in values):
        raise NumericFailure(f"non-finite result: {values}")


def cmd_run(args, cfg: ExperimentConfig) -> int:
    data_dir = getattr(args, "data", None)
    private = test = None
    if data_dir is not None:
        private, test, _ = _load_data(args, cfg)
    init = None
    if getattr(args, "init", None) is not None:
        try:
            init = load_checkpoint(args.init)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {args.init}: {exc}") from exc
    result = run_pipeline(cfg, private, test, init)
    _check_finite(result.accuracy, result.eps_total)
    write_results_csv([result], args.out / "results.csv")
    _write_json(args.out / "ledger.json", result.ledger)
    report = getattr(result, "_report", None)
    if report is not None:
        report.write_csv(args.out / "selection_report.csv")
    save_checkpoint(result._model, args.out / "model.npz")  # type: ignore[attr-defined]
    print(format_table([{c: result.row()[c] for c in RESULT_COLUMNS}]))
    return EXIT_OK


def _csv_list(text: Optional[str], conv):
    return None if not text else [conv(x) for x in text.split(",") if x.strip()]


def cmd_suite(args, cfg: ExperimentConfig) -> int:
    try:
        arms = _csv_list(args.arms, str) or ([args.arm] if args.arm else list(ARMS))
        epsilons = _csv_list(args.epsilons, float) or [cfg.eps_total]
        configs = [cfg.with_(arm=a, eps_total=e) for e in epsilons for a in arms]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    workers = 1 if args.deterministic else max(1, args.workers)
    results, summary = run_suite(configs, seeds, workers=workers)
    write_results_csv(results, args.out / "results.csv")
    with open(args.out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    _write_json(args.out / "ledger.json", [{"arm": r.arm, "seed": r.seed, "eps_budget": r.eps_budget, "ledger": r.ledger} for r in results])
    table = format_table(summary)
    (args.out / "summary.txt").write_text(table + "\n")
    print(table)
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"failed: {r.arm} seed {r.seed}: {r.error}", file=sys.stderr)
    if any("BudgetViolation" in (r.error or "") for r in failed):
        return EXIT_BUDGET
    return EXIT_OK


def cmd_verify_theory(args, cfg: ExperimentConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    reports = []
    t1 = theory.verify_theorem1(theory.QuadraticProblem(np.eye(2), [1.0, 1.0]), [0, 1], 0.1, 1.0, 2.0, args.trials, cfg.seed)
    reports.append(("theorem1 analytic", t1))
    for i, rep in enumerate(theory.theorem1_sweep(rng, 100, 2000, cfg.seed)):
        reports.append((f"theorem1 random {i}", rep))
    handcrafted = theory.Theorem2Instance(
        R_syn=[[0.22, 0.08, 0.31], [0.47, 0.03, 0.52]],
        R_pri=[[0.2, 0.1, 0.3], [0.5, 0.0, 0.5]],
        probs=[1 / 3, 1 / 3, 1 / 3],
        tau=0.05,
        names=["L1", "L2"],
    )
    reports.append(("theorem2 handcrafted", theory.verify_theorem2(handcrafted)))
    for i in range(200):
        reports.append((f"theorem2 random {i}", theory.verify_theorem2(theory.random_theorem2_instance(rng))))
    violations = [name for name, r in reports if r.violated]
    _write_json(args.out / "theory.json", {name: r.to_dict() for name, r in reports})
    slope = theory.noise_damage_slope([2, 8, 32], 0.1, 1.0, 2.0, args.trials, cfg.seed)
    _write_json(args.out / "noise_damage.json", slope)
    print(f"theorem1 analytic: measured {t1.measured:.4f} +/- {t1.half_width:.4f}, bound {t1.bound:.4f}")
    print(f"noise damage slope {slope['slope']:.5f} (expected {slope['expected_slope']:.5f})")
    print(f"{len(reports)} checks, {len(violations)} violations")
    for name in violations:
        print(f"violated: {name}", file=sys.stderr)
    return EXIT_NUMERIC if violations else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetViolation as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
