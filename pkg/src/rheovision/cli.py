"""Command-line entry point: generate, train, evaluate, sweep.

Configuration comes from a plain-text file with [section] headers and
key = value lines; command-line flags override file values. Every command
echoes its effective configuration into the output directory. Exit codes:
0 success, 2 usage or validation error, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import datapipe, evaluator, protocol, synthgen, trainer
from .estimator import FreshPropertyRegressor
from .exceptions import CheckpointError, RheovisionError
from .flow import FlowParams

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3

CONFIG_KEYS = {
    "campaign": {"preset", "n_concretes", "runs_per_concrete", "frames_per_run",
                 "image_size", "recycled_fraction", "noise_scale", "residual_scale",
                 "shading_strength", "mask_threshold_mm", "seed"},
    "model": {"conv_channels"},
    "train": {"learning_rate", "momentum", "weight_decay", "epochs", "batch_size", "seed"},
    "data": {"skip_head", "flow_levels", "flow_window", "flow_iterations", "fold_seed",
             "assignment_seed"},
    "eval": {"average"},
}


class ConfigError(RheovisionError):
    pass


def read_config(path) -> dict:
    """Sectioned key=value file with unknown sections/keys rejected."""
    sections: dict[str, dict[str, str]] = {name: {} for name in CONFIG_KEYS}
    if path is None:
        return sections
    current = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown section [{current}]")
            continue
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        if key not in CONFIG_KEYS[current]:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}' in [{current}]")
        sections[current][key] = value.strip()
    return sections


def echo_config(sections: dict, out_dir: Path, extra: dict) -> None:
    lines = []
    for name in sorted(sections):
        entries = sections[name]
        if not entries:
            continue
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in sorted(entries.items()))
    if extra:
        lines.append("[invocation]")
        lines.extend(f"{k} = {v}" for k, v in sorted(extra.items()))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _campaign_spec(cfg: dict, seed_flag) -> synthgen.CampaignSpec:
    section = dict(cfg["campaign"])
    preset = section.pop("preset", "desk")
    overrides = {}
    if "n_concretes" in section:
        overrides["n_concretes"] = int(section["n_concretes"])
    if "runs_per_concrete" in section:
        overrides["runs_per_concrete"] = int(section["runs_per_concrete"])
    if "frames_per_run" in section:
        overrides["frames_per_run"] = int(section["frames_per_run"])
    if "image_size" in section:
        size = int(section["image_size"])
        overrides["image_size"] = (size, size)
    for key in ("recycled_fraction", "noise_scale", "residual_scale", "shading_strength",
                "mask_threshold_mm"):
        if key in section:
            overrides[key] = float(section[key])
    seed = seed_flag if seed_flag is not None else int(section.get("seed", "0"))
    overrides["seed"] = seed
    if preset == "desk":
        return synthgen.CampaignSpec.desk(**overrides)
    if preset == "full":
        return synthgen.CampaignSpec.full_scale(**overrides)
    if preset == "custom":
        return synthgen.CampaignSpec(**overrides)
    raise ConfigError(f"unknown campaign preset '{preset}'")


def _flow_params(cfg: dict) -> FlowParams:
    data = cfg["data"]
    return FlowParams(levels=int(data.get("flow_levels", "3")),
                      window=int(data.get("flow_window", "15")),
                      iterations=int(data.get("flow_iterations", "3")))


def _train_kwargs(cfg: dict) -> dict:
    section = cfg["train"]
    out = {}
    for key, caster in (("learning_rate", float), ("momentum", float),
                        ("weight_decay", float), ("epochs", int), ("batch_size", int),
                        ("seed", int)):
        if key in section:
            out[key] = caster(section[key])
    return out


def _load_campaign_sets(campaign, concrete_ids, combo, cfg):
    data = cfg["data"]
    skip_head = int(data.get("skip_head", str(datapipe.DEFAULT_SKIP_HEAD)))
    seed = int(data.get("assignment_seed", "0"))
    sets_by_cid = {}
    for cid in concrete_ids:
        sets_by_cid[cid] = datapipe.build_concrete_sets(
            campaign, cid, channels=combo.channels, skip_head=skip_head,
            flow_params=_flow_params(cfg), seed=seed)
    return sets_by_cid


def cmd_generate(args) -> int:
    cfg = read_config(args.config)
    spec = _campaign_spec(cfg, args.seed)
    out = Path(args.out)
    if not out.parent.exists():
        print(f"error: parent directory {out.parent} does not exist", file=sys.stderr)
        return EXIT_IO
    try:
        digest = synthgen.generate_campaign(spec, out, force=args.force)
    except RheovisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    echo_config(cfg, out, {"command": "generate", "seed": spec.seed, "digest": digest})
    print(f"campaign written to {out} (digest {digest[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    try:
        combo = protocol.parse_combination(args.combination)
    except RheovisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        campaign = datapipe.load_campaign(args.data_dir)
        summaries = datapipe.concrete_summaries(campaign)
    except (OSError, RheovisionError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return EXIT_IO

    fold_seed = int(cfg["data"].get("fold_seed", "0"))
    plan = protocol.make_folds(summaries, seed=fold_seed,
                               expected_total=len(summaries))
    if args.fold == "all":
        fold_indices = list(range(len(plan.folds)))
    else:
        try:
            fold_indices = [int(args.fold)]
        except ValueError:
            print(f"error: --fold must be an index or 'all', got {args.fold!r}",
                  file=sys.stderr)
            return EXIT_USAGE
        if not 0 <= fold_indices[0] < len(plan.folds):
            print(f"error: fold {fold_indices[0]} out of range 0..{len(plan.folds) - 1}",
                  file=sys.stderr)
            return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "folds.txt").write_text(plan.to_text(), encoding="utf-8")
    needed = set()
    for fi in fold_indices:
        fold = plan.folds[fi]
        needed.update(fold.train + fold.val + fold.test)
    sets_by_cid = _load_campaign_sets(campaign, sorted(needed), combo, cfg)

    kwargs = _train_kwargs(cfg)
    seed_base = kwargs.pop("seed", 0)
    for fi in fold_indices:
        fold = plan.folds[fi]
        est = FreshPropertyRegressor(combination=args.combination,
                                     image_size=campaign.image_size[0],
                                     seed=seed_base + fi, **kwargs)
        train_sets = [s for cid in fold.train for s in sets_by_cid[cid]]
        val_sets = [s for cid in fold.val for s in sets_by_cid[cid]]
        est.fit(train_sets, validation=val_sets)
        ckpt = out / f"fold{fi}_{args.combination}.rhc"
        est.save(ckpt, extra_meta={"fold": str(fi), "test_concretes": " ".join(fold.test)})
        (out / f"fold{fi}_{args.combination}_epochs.csv").write_text(
            trainer.reports_csv(est.reports_), encoding="utf-8")
        print(f"fold {fi}: best epoch {est.best_epoch_} "
              f"(val eps_rel avg {est.reports_[est.best_epoch_ - 1].val_eps_rel_avg:.2f}%) "
              f"-> {ckpt.name}")
    echo_config(cfg, out, {"command": "train", "combination": args.combination,
                           "fold": args.fold, "data_dir": str(args.data_dir)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = read_config(args.config)
    try:
        campaign = datapipe.load_campaign(args.data_dir)
        datapipe.concrete_summaries(campaign)  # validates references exist and parse
    except (OSError, RheovisionError) as exc:
        print(f"error: cannot load dataset: {exc}", file=sys.stderr)
        return EXIT_IO
    average = args.average or cfg["eval"].get("average", "none")
    if average not in evaluator.GROUPINGS:
        print(f"error: unknown averaging mode '{average}'; "
              f"valid: {', '.join(evaluator.GROUPINGS)}", file=sys.stderr)
        return EXIT_USAGE
    if args.dry_run:
        print(f"dataset {args.data_dir} looks valid "
              f"({len(campaign.concrete_ids)} concretes)")
        return EXIT_OK
    if not args.checkpoint:
        print("error: evaluate needs at least one --checkpoint (or --dry-run)",
              file=sys.stderr)
        return EXIT_USAGE

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_lines = [evaluator.METRICS_HEADER]
    all_records = []
    for ckpt in args.checkpoint:
        try:
            est = FreshPropertyRegressor.load(ckpt)
        except (OSError, CheckpointError) as exc:
            print(f"error: cannot load checkpoint {ckpt}: {exc}", file=sys.stderr)
            return EXIT_IO
        fold = est.meta_.get("fold", "0")
        test_ids = est.meta_.get("test_concretes", "").split()
        if not test_ids:
            test_ids = campaign.concrete_ids
        sets_by_cid = _load_campaign_sets(campaign, test_ids, est.combo_, cfg)
        test_sets = [s for cid in test_ids for s in sets_by_cid[cid]]
        preds = est.predict(test_sets)
        records = evaluator.records_from_sets(test_sets, preds)
        report = evaluator.epsilon_metrics(records)
        metrics_lines.extend(evaluator.metrics_csv_rows(report, est.combination, fold, 0))
        all_records.extend(records)
    averaging_results = evaluator.averaging_study(
        all_records, ("none", average) if average != "none" else ("none",))
    (out / "metrics.csv").write_text("\n".join(metrics_lines) + "\n", encoding="utf-8")
    (out / "averaging.csv").write_text(evaluator.averaging_csv(averaging_results),
                                       encoding="utf-8")
    echo_config(cfg, out, {"command": "evaluate", "average": average,
                           "data_dir": str(args.data_dir)})
    print(f"metrics written to {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = read_config(args.config)
    if args.to < getattr(args, "from"):
        print(f"error: sweep interval [{getattr(args, 'from')}, {args.to}] is empty",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        campaign = datapipe.load_campaign(args.data_dir)
        est = FreshPropertyRegressor.load(args.checkpoint)
    except (OSError, RheovisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.concrete not in campaign.concrete_ids:
        print(f"error: unknown concrete '{args.concrete}'", file=sys.stderr)
        return EXIT_USAGE
    run_dir = campaign.root / args.concrete / args.run
    if not run_dir.is_dir():
        print(f"error: no run directory {run_dir}", file=sys.stderr)
        return EXIT_USAGE

    data = cfg["data"]
    run = datapipe.load_run(run_dir)
    concrete_dir = campaign.root / args.concrete
    mix = protocol.read_mix_file(concrete_dir / "mix.txt")
    refs = protocol.read_references_csv(concrete_dir / "references.csv")
    combos = protocol.enumerate_combinations(refs)
    sets = datapipe.assemble_input_sets(
        run.frames, combos, mix, t_central_min=run.t_central_min,
        mask_threshold_mm=campaign.mask_threshold_mm, fps=run.fps,
        paddle_velocity=run.paddle_velocity, concrete_id=args.concrete, run_id=args.run,
        skip_head=int(data.get("skip_head", str(datapipe.DEFAULT_SKIP_HEAD))),
        channels=est.combo_.channels, flow_params=_flow_params(cfg),
        seed=int(data.get("assignment_seed", "0")))
    if not sets:
        print("error: run produced no input sets", file=sys.stderr)
        return EXIT_IO
    curve = evaluator.time_sweep(est.model_, est.norm_stats_, sets,
                                 getattr(args, "from"), args.to,
                                 t_central_min=run.t_central_min,
                                 mix_indices=est.combo_.mix_indices())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(evaluator.sweep_csv(curve), encoding="utf-8")
    plot_path = out.with_name(out.stem + "_plot.csv")
    plot_path.write_text(evaluator.sweep_plot_csv(curve), encoding="utf-8")
    if args.svg:
        Path(args.svg).write_text(evaluator.sweep_svg(curve), encoding="utf-8")
    print(f"sweep over [{getattr(args, 'from')}, {args.to}] min written to {out} "
          f"({curve.n_averaged} predictions averaged per point)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rheovision",
                                     description="Synthetic fresh-concrete property "
                                                 "prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic campaign dataset")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one or all cross-validation folds")
    p.add_argument("data_dir")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--fold", default="0", help="fold index or 'all'")
    p.add_argument("--combination", default="D+m+OF",
                   help=f"one of: {', '.join(protocol.COMBINATION_NAMES)}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute test metrics for checkpoints")
    p.add_argument("data_dir")
    p.add_argument("-c", "--config")
    p.add_argument("-o", "--out", default="eval_out")
    p.add_argument("--checkpoint", nargs="+", default=[])
    p.add_argument("--average", choices=evaluator.GROUPINGS)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="continuous time sweep from one run")
    p.add_argument("data_dir")
    p.add_argument("-c", "--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--concrete", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--from", type=float, required=True)
    p.add_argument("--to", type=float, required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except RheovisionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
