"""Command-line entry point: ``wisdomnet <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from wisdomnet import report
from wisdomnet._io import atomic_write_text
from wisdomnet.config import RunConfig, load_config
from wisdomnet.data_pipeline import (
    PNM_SUFFIXES,
    CorpusSpec,
    Dataset,
    generate_synthetic_corpus,
    load_corpus,
    load_image,
    probe_image_side,
    read_manifest,
    save_corpus,
    split_dataset,
)
from wisdomnet.ensemble import Role, cascade_batch, load_ensemble, save_ensemble, train_layer
from wisdomnet.errors import WisdomNetError

log = logging.getLogger("wisdomnet")

DEFAULT_COUNTS = "covid=24,healthy=10,bacterial=7,viral=7,ards=16,non_ards=16"
IMAGE_SUFFIXES = PNM_SUFFIXES | {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _fractions(text: str) -> list[float]:
    if not text.strip():
        return []
    return [float(x) for x in text.split(",")]


def _counts(text: str) -> dict[str, int]:
    out = {}
    for item in text.split(","):
        tag, _, n = item.partition("=")
        if not n:
            raise argparse.ArgumentTypeError(f"expected tag=count, got {item!r}")
        out[tag.strip()] = int(n)
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key-value configuration file")
    common.add_argument("--seed", type=int, help="master seed (ARDS layer uses seed + 1)")
    common.add_argument("--lambda", dest="lam", type=int, help="members kept per ensemble layer")
    common.add_argument("--neg-threshold", type=float, help="P(negative) needed for a Negative decision")
    common.add_argument("--input-side", type=int, help="image side length fed to the networks")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wisdomnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic radiograph corpus")
    p.add_argument("--counts", type=_counts, default=_counts(DEFAULT_COUNTS),
                   help=f"per-tag sample counts (default {DEFAULT_COUNTS})")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--train-fraction", type=float, default=0.5)

    p = sub.add_parser("train", parents=[common], help="train both ensemble layers")
    p.add_argument("--data", type=Path, required=True, help="manifest.csv or its directory")
    p.add_argument("--pool", type=int, help="candidate pool size per layer")
    p.add_argument("--workers", type=int, help="parallel training processes")

    p = sub.add_parser("predict", parents=[common], help="run the cascade and write reports")
    p.add_argument("--model", type=Path, required=True, help="directory written by 'train'")
    p.add_argument("--images", type=Path, required=True, help="image directory or manifest.csv")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("evaluate", parents=[common], help="accuracy and confusion on a test split")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", help="manifest split to evaluate ('' for all rows)")

    p = sub.add_parser("evaluate-splits", parents=[common], help="accuracy across train fractions")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--fractions", type=_fractions,
                   default=list(report.TABLE1_FRACTIONS))
    p.add_argument("--pool", type=int)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("diagnose", parents=[common], help="dispersion statistics from reports")
    p.add_argument("--reports", type=Path, required=True, help="reports.jsonl from 'predict'")
    p.add_argument("--subject", action="append", default=[],
                   help="plot this subject (repeatable); default: high-variance subjects")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        seed=args.seed, selected_count=args.lam, negative_threshold=args.neg_threshold,
        input_side=args.input_side, pool_size=getattr(args, "pool", None),
        workers=getattr(args, "workers", None),
    )


def _manifest_path(path: Path) -> Path:
    return path / "manifest.csv" if path.is_dir() else path


def _training_side(args, cfg: RunConfig, manifest: Path) -> int:
    """Explicit flag or config key wins; otherwise the corpus' native size."""
    if cfg.input_side_set:
        return cfg.input_side
    rows = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: manifest is empty")
    first = Path(rows[0]["path"])
    return probe_image_side(first if first.is_absolute() else manifest.parent / first)


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    side = args.input_side if args.input_side is not None else cfg.input_side
    seed = args.seed if args.seed is not None else cfg.covid.seed
    dataset = generate_synthetic_corpus(CorpusSpec(args.counts, side, args.noise), seed)
    train, test = split_dataset(dataset, args.train_fraction, seed)
    splits = {s.source_id: "train" for s in train} | {s.source_id: "test" for s in test}
    manifest = save_corpus(dataset, args.out, splits)
    print(f"wrote {len(dataset)} images ({len(train)} train / {len(test)} test) to {manifest}")
    return 0


def _load_training_data(manifest: Path, side: int) -> Dataset:
    rows = read_manifest(manifest)
    split = "train" if any(r["split"] for r in rows) else None
    return load_corpus(manifest, side, split=split)


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args.data)
    side = _training_side(args, cfg, manifest)
    data = _load_training_data(manifest, side)
    covid_data, ards_data = data.for_layer("covid"), data.for_layer("ards")
    if not len(covid_data) or not len(ards_data):
        raise ValueError(f"{manifest}: need both COVID-layer and ARDS-layer training samples")
    log.info("training COVID layer on %d samples at side %d", len(covid_data), side)
    covid = train_layer(covid_data, cfg.covid, Role.COVID)
    log.info("training ARDS layer on %d samples", len(ards_data))
    ards = train_layer(ards_data, cfg.ards, Role.ARDS)
    save_ensemble(covid, args.out / "covid")
    save_ensemble(ards, args.out / "ards")
    print(f"saved COVID layer ({covid.size} members) and ARDS layer ({ards.size} members) to {args.out}")
    return 0


def _load_model(model_dir: Path, args):
    covid = load_ensemble(model_dir / "covid")
    ards = load_ensemble(model_dir / "ards")
    if args.input_side is not None and args.input_side != covid.input_side:
        raise ValueError(f"--input-side {args.input_side} does not match the model ({covid.input_side})")
    return covid, ards


def _images_to_predict(path: Path, side: int):
    if path.is_dir() and not (path / "manifest.csv").exists():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"{path}: no images found")
        return [load_image(f, side) for f in files], [f.stem for f in files]
    ds = load_corpus(_manifest_path(path), side)
    return [s.image for s in ds], [s.source_id for s in ds]


def cmd_predict(args, cfg: RunConfig) -> int:
    covid, ards = _load_model(args.model, args)
    images, ids = _images_to_predict(args.images, covid.input_side)
    reports = cascade_batch(covid, ards, cfg.policy, images, ids)
    report.emit_report(reports, args.out, cfg.policy, cfg.high_variance_threshold,
                       figures=not args.no_figures)
    positives = sum(r.decision.value == "Positive" for r in reports)
    print(f"{len(reports)} subjects: {positives} positive, {len(reports) - positives} negative; "
          f"reports in {args.out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    covid, ards = _load_model(args.model, args)
    manifest = _manifest_path(args.data)
    test = load_corpus(manifest, covid.input_side, split=args.split or None).for_layer("covid")
    result = report.evaluate(covid, ards, cfg.policy, test)
    report.write_evaluation_csv(args.out / "evaluation.csv", result)
    print(f"accuracy={result.accuracy:.4f} false_negatives={result.false_negatives} "
          f"false_positives={result.false_positives} n={result.total}")
    return 0


def cmd_evaluate_splits(args, cfg: RunConfig) -> int:
    manifest = _manifest_path(args.data)
    side = _training_side(args, cfg, manifest)
    dataset = load_corpus(manifest, side)
    seed = args.seed if args.seed is not None else cfg.covid.seed
    rows = report.evaluate_splits(dataset, args.fractions, cfg.covid, cfg.ards, cfg.policy, seed)
    report.write_splits_csv(args.out / "splits.csv", rows)
    if rows and not args.no_figures:
        from wisdomnet import plotting

        plotting.split_accuracy_figure(rows, args.out / "splits.png")
    for r in rows:
        print(f"train={r.train_fraction:.2f} test={r.test_fraction:.2f} accuracy={r.accuracy:.4f}")
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    reports = report.read_reports_jsonl(args.reports)
    rows = report.dispersion_rows(reports, cfg.high_variance_threshold)
    if not rows:
        raise ValueError(f"{args.reports}: no subject has two or more member outputs")
    wanted = set(args.subject)
    unknown = wanted - {r.subject_id for r in reports}
    if unknown:
        raise ValueError(f"unknown subject(s): {', '.join(sorted(unknown))}")
    atomic_write_text(args.out / report.DISPERSION_FILE, report.csv_text(list(rows[0]), rows))
    if not args.no_figures:
        from wisdomnet import plotting

        for r in reports:
            if len(r.covid_members) < 2:
                continue
            stats = report.diagnose(r.covid_members, cfg.high_variance_threshold)
            if r.subject_id in wanted or (not wanted and stats.high_variance):
                plotting.normal_fit_figure(r, stats, cfg.policy, args.out / f"normal_fit_{r.subject_id}.png")
    flagged = [row["subject_id"] for row in rows if row["high_variance"]]
    print(f"{len(rows)} subjects, high variance: {', '.join(flagged) if flagged else 'none'}")
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "evaluate-splits": cmd_evaluate_splits,
    "diagnose": cmd_diagnose,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (WisdomNetError, ValueError, OSError) as exc:
        print(f"wisdomnet: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
