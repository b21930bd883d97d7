"""Command-line front end: ``generate``, ``train``, ``eval``, ``ensemble``, ``report``.

Exit status is 0 on success, 2 for configuration or data problems and 3 when
training hits a non-finite value.
"""

from __future__ import annotations

import argparse
import csv
import io
import shutil
import sys
from pathlib import Path

from .config import DOCS, OUTPUT_ENV, RunConfig
from .datagen import SPLITS, generate, load_dataset, write_dataset
from .errors import AnticipationError, ConfigError, DataError, NumericError
from .evalkit import (
    FusionSpec,
    ensemble_report,
    format_report,
    fuse,
    load_scoreset,
    mt5r_by_task,
    report_csv,
    save_scoreset,
)
from .model import TASKS, AnticipationModel, load_checkpoint, save_checkpoint
from .trainer import METRICS_HEADER, PHASES, check_compatible, predict_split, run_phase, select_phases

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _run_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out) / cfg.resolved_model_id()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args, out=print) -> int:
    target = Path(cfg.data)
    occupied = target.exists() and any(target.iterdir())
    if occupied and not args.force:
        raise ConfigError(f"{target} is not empty; pass --force to overwrite")
    ds = generate(cfg.data_seed, cfg.sizes(), cfg.verbs, cfg.nouns, cfg.actions, cfg.zipf,
                  signal=cfg.signal, noise=cfg.noise)
    if occupied:
        for split in SPLITS:
            shutil.rmtree(target / split, ignore_errors=True)
        (target / "manifest.json").unlink(missing_ok=True)
    write_dataset(ds, target)
    m = ds.manifest
    out(f"wrote {target}: V={m.n_verbs} N={m.n_nouns} A={m.n_actions} seed={m.seed}")
    for split, size in m.sizes.items():
        counts = m.counts[split]["action"]
        out(f"  {split:<5} {size:5d} samples, action counts min {min(counts)} max {max(counts)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out=print) -> int:
    pipeline = cfg.pipeline()
    phases = select_phases(pipeline, cfg.phase_names())
    first = PHASES.index(phases[0].name)
    run = _run_dir(cfg)
    ckpt_root = run / "checkpoints"

    dataset = load_dataset(cfg.data, modalities=[cfg.modality])
    if first == 0 and not args.resume:
        model = AnticipationModel(cfg.model_config())
    else:
        source = Path(args.resume) if args.resume else ckpt_root / PHASES[first - 1]
        if not (source / "manifest.json").exists():
            raise ConfigError(f"phase {phases[0].name} needs a checkpoint to resume from; {source} has none")
        model, _ = load_checkpoint(source)
    check_compatible(model, dataset, cfg.modality)

    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.dump())
    log_path = run / "metrics.log"
    kept = []
    if log_path.exists() and first > 0:
        kept = [line for line in log_path.read_text().splitlines()[1:]
                if line and PHASES.index(line.split(",", 1)[0]) < first]
    with open(log_path, "w") as log:
        log.write(METRICS_HEADER + "\n")
        for line in kept:
            log.write(line + "\n")

        def emit(line: str) -> None:
            log.write(line + "\n")
            log.flush()
            out(line)

        for spec in phases:
            run_phase(model, dataset, spec, cfg.optim_config(), emit)
            save_checkpoint(model, ckpt_root / spec.name,
                            {"phase": spec.name, "model_id": cfg.resolved_model_id()})
            out(f"checkpoint {ckpt_root / spec.name}")
    return EXIT_OK


def _latest_checkpoint(run: Path) -> Path:
    for name in reversed(PHASES):
        if (run / "checkpoints" / name / "manifest.json").exists():
            return run / "checkpoints" / name
    raise DataError(f"no checkpoints under {run}")


def cmd_eval(cfg: RunConfig, args, explicit: set[str], out=print) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(_run_dir(cfg))
    if not (ckpt / "manifest.json").exists():
        raise DataError(f"no checkpoint at {ckpt}")
    model, manifest = load_checkpoint(ckpt)
    if "modality" in explicit and cfg.modality != model.config.modality:
        raise ConfigError(f"checkpoint was trained on {model.config.modality!r}, config asks for {cfg.modality!r}")
    dataset = load_dataset(cfg.data, modalities=[model.config.modality], splits=[cfg.split])
    check_compatible(model, dataset)
    model_id = cfg.model_id or manifest.get("model_id") or cfg.resolved_model_id()
    scores = predict_split(model, dataset, cfg.split, model_id)
    target = Path(args.output) if args.output else Path(cfg.out) / "scores" / f"{model_id}.{cfg.split}.scores"
    target.parent.mkdir(parents=True, exist_ok=True)
    save_scoreset(scores, target)
    values = mt5r_by_task(scores, dataset.labels(cfg.split))
    out(f"{model_id} {cfg.split} " + " ".join(f"mt5r_{t}={values[t]!r}" for t in TASKS))
    out(f"scores {target}")
    return EXIT_OK


def _parse_weights(items: list[str]) -> dict[str, float]:
    weights = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--weight expects model_id=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            weights[key] = float(value)
        except ValueError:
            raise ConfigError(f"--weight {item!r}: {value!r} is not a number") from None
    return weights


def cmd_ensemble(cfg: RunConfig, args, out=print) -> int:
    if not args.scores:
        raise ConfigError("ensemble needs at least one score file")
    sets = [load_scoreset(p) for p in args.scores]
    ids = [s.model_id for s in sets]
    if len(set(ids)) != len(ids):
        # duplicate files are legitimate inputs; keep ids unique for the report
        for i, s in enumerate(sets):
            s.model_id = f"{s.model_id}#{i}"
    manual = _parse_weights(args.weight)
    weights = [(s.model_id, manual.get(s.model_id.split("#")[0],
                                       cfg.rgb_weight if s.modality == "rgb" else 1.0)) for s in sets]
    spec = FusionSpec(weights)
    members = [s.model_id for s in sets]
    split = cfg.split
    dataset = load_dataset(cfg.data, modalities=[], splits=[split])
    labels = dataset.labels(split)
    if sets[0].sample_ids != dataset.split(split).ids:
        raise DataError(f"{args.scores[0]} does not score the {split!r} split of {cfg.data}")

    specs = {s.model_id: ([s.model_id], None) for s in sets}
    specs["fused_uniform"] = (members, None)
    if any(w != 1.0 for _, w in weights):
        specs["fused_weighted"] = (members, spec)
    rows = ensemble_report(sets, specs, labels)
    fused = fuse(sets, spec, fused_id="fused")
    target = Path(args.output) if args.output else Path(cfg.out) / "scores" / f"fused.{split}.scores"
    target.parent.mkdir(parents=True, exist_ok=True)
    save_scoreset(fused, target)
    csv_path = Path(args.csv) if args.csv else Path(cfg.out) / f"ensemble.{split}.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(report_csv(rows))
    for line in format_report(rows).splitlines():
        out(line)
    out(f"scores {target}")
    out(f"table {csv_path}")
    return EXIT_OK


def curves_csv(metrics_text: str) -> str:
    """Plot data: one row per epoch with a running epoch index across phases."""
    rows = list(csv.DictReader(io.StringIO(metrics_text)))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step"] + METRICS_HEADER.split(","))
    for step, row in enumerate(rows):
        writer.writerow([step] + [row[k] for k in METRICS_HEADER.split(",")])
    return buf.getvalue()


def cmd_report(cfg: RunConfig, args, out=print) -> int:
    runs = [Path(r) for r in args.runs] or [_run_dir(cfg)]
    for run in runs:
        log_path = run / "metrics.log"
        if not log_path.exists():
            raise DataError(f"no metrics.log in {run}")
        text = log_path.read_text()
        target = run / "curves.csv"
        target.write_text(curves_csv(text))
        last = {}
        for row in csv.DictReader(io.StringIO(text)):
            last[row["phase"]] = row
        out(f"{run}:")
        for phase, row in last.items():
            vals = " ".join(f"{t}={100 * float(row['val_mt5r_' + t]):6.2f}" for t in TASKS)
            out(f"  {phase:<19} epochs {int(row['epoch']) + 1:3d}  loss {float(row['loss']):.4f}  val MT5R {vals}")
        out(f"  plot data {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file; flags override it")
    group = common.add_argument_group("config keys")
    defaults = RunConfig()
    for key in RunConfig.keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V",
                           help=f"{DOCS[key]} (default: {getattr(defaults, key)!r})")

    parser = argparse.ArgumentParser(prog="anticipation", description=__doc__.splitlines()[0],
                                     epilog=f"{OUTPUT_ENV} overrides the output directory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset directory")

    p = sub.add_parser("train", parents=[common], help="run training phases and checkpoint each one")
    p.add_argument("--resume", help="checkpoint directory to start from")

    p = sub.add_parser("eval", parents=[common], help="score a split with a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint directory (default: latest phase of the run)")
    p.add_argument("--output", help="score file to write")

    p = sub.add_parser("ensemble", parents=[common], help="fuse score files and tabulate MT5R")
    p.add_argument("scores", nargs="*", help="score files written by eval")
    p.add_argument("--weight", action="append", metavar="ID=W", help="explicit weight for one model id")
    p.add_argument("--output", help="fused score file to write")
    p.add_argument("--csv", help="report table as CSV")

    p = sub.add_parser("report", parents=[common], help="summarise runs and write plot CSV")
    p.add_argument("runs", nargs="*", help="run directories (default: the configured run)")
    return parser


def main(argv=None, out=print) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {key: getattr(args, f"cfg_{key}") for key in RunConfig.keys()
                 if getattr(args, f"cfg_{key}") is not None}
    try:
        cfg, explicit = RunConfig.load(args.config, overrides)
        if args.command == "generate":
            return cmd_generate(cfg, args, out)
        if args.command == "train":
            return cmd_train(cfg, args, out)
        if args.command == "eval":
            return cmd_eval(cfg, args, explicit, out)
        if args.command == "ensemble":
            return cmd_ensemble(cfg, args, out)
        return cmd_report(cfg, args, out)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (AnticipationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
