"""Command-line entry point: ``tsen <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analysis import Table, cka_model_table, export_embeddings, extract_representations, threshold_sweep
from .config import SEED_ENV, ConfigError, ExperimentConfig, parse_config
from .graph import DataError, generate_synthetic, write_dataset
from .layers import VARIANTS, ModelParams
from .training import DivergenceError, ExperimentResult, run_experiment

logger = logging.getLogger("tsen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4, 5


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _dataset_name(cfg: ExperimentConfig) -> str:
    d = cfg.dataset
    if d.name:
        return d.name
    if d.source == "manifest":
        return Path(d.path).parent.name or "manifest"
    return "synthetic"


def _emit_experiment(out: Path, variant: str, result: ExperimentResult, save_params: bool) -> None:
    for r, report in enumerate(result.reports):
        _write(out / "reports" / f"{variant}_run{r}.json", json.dumps(report.metrics(), indent=2, sort_keys=True) + "\n")
        logger.info("%s run %d: test acc %.4f, f1 %.4f, best epoch %d (%.1fs)", variant, r,
                    report.test_accuracy, report.test_f1, report.best_epoch, report.duration_seconds)
    if save_params:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        for r, params in enumerate(result.params):
            params.save(out / "checkpoints" / f"{variant}_run{r}.npz")


SUMMARY_HEADER = ["variant", "dataset", "acc_mean", "acc_std", "f1_mean", "f1_std"]


def _run_variants(cfg: ExperimentConfig, variants: Sequence[str], jobs: int) -> list[tuple[str, ExperimentResult]]:
    dataset = cfg.load_dataset()
    out = cfg.output_dir
    cfg.echo(out)
    results = []
    for v in variants:
        logger.info("training %s on %d graphs", v, len(dataset))
        result = run_experiment(dataset, cfg.model.replace(variant=v), cfg.train_config(), jobs=jobs, keep_params=True)
        _emit_experiment(out, v, result, save_params=True)
        results.append((v, result))
    return results


# --- subcommands ------------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else int(os.environ.get(SEED_ENV) or 0)
    ds = generate_synthetic(args.graphs, args.nodes, args.signal, seed=seed, threshold=args.threshold,
                            timepoints=args.timepoints)
    manifest = write_dataset(ds, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    variant = args.variant or cfg.model.variant
    cfg = cfg.with_variant(variant)
    results = _run_variants(cfg, [variant], args.jobs)
    name = _dataset_name(cfg)
    rows = [[v, name] + res.summary.csv_fields() for v, res in results]
    path = _write(cfg.output_dir / "summary.csv", _csv(SUMMARY_HEADER, rows))
    for v, res in results:
        print(f"{v}: accuracy {res.summary.accuracy}, F1 {res.summary.f1}")
    print(path)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    results = _run_variants(cfg, VARIANTS, args.jobs)
    name = _dataset_name(cfg)
    out = cfg.output_dir
    _write(out / "summary.csv", _csv(SUMMARY_HEADER, [[v, name] + r.summary.csv_fields() for v, r in results]))
    table = Table(["variant", "accuracy", "f1"], [[v, r.summary.accuracy, r.summary.f1] for v, r in results])
    _write(out / "ablation.csv", table.to_csv())
    _write(out / "ablation.txt", table.to_text())
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _parse_layer(text: str):
    return "final" if text == "final" else int(text)


def cmd_cka(args) -> int:
    cfg = parse_config(args.config)
    graphs = list(cfg.load_dataset().graphs)
    models = []
    for path in args.checkpoints:
        params = ModelParams.load(path)
        tag = params.config.variant
        if any(tag == t for t, _ in models):
            tag = Path(path).stem
        models.append((tag, params))
    table = cka_model_table(models, graphs, args.layers, args.kernel, args.bandwidth, args.include_self,
                            args.estimator)
    out = cfg.output_dir
    cfg.echo(out)
    _write(out / "cka.csv", table.to_csv())
    _write(out / "cka.txt", table.to_text())
    _write(out / "cka_meta.json", json.dumps(table.meta, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(table.to_text())
    return EXIT_OK


def _parse_thresholds(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    for t in args.thresholds:
        if not 0.0 <= t < 1.0:
            raise ConfigError(f"--thresholds: {t} outside [0, 1)")
    dataset = cfg.load_dataset()
    out = cfg.output_dir
    cfg.echo(out)
    result = threshold_sweep(dataset, args.thresholds, cfg.model, cfg.train_config(), jobs=args.jobs)
    table = result.table()
    _write(out / "sweep.csv", table.to_csv())
    _write(out / "sweep.txt", table.to_text())
    sys.stdout.write(table.to_text())
    return EXIT_OK


def cmd_export_emb(args) -> int:
    cfg = parse_config(args.config)
    dataset = cfg.load_dataset()
    params = ModelParams.load(args.checkpoint)
    rep = extract_representations(params, list(dataset.graphs), args.layer)
    path = Path(args.out)
    export_embeddings(rep, dataset.labels, path, dataset.subject_ids)
    print(path)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsen", description="Brain-network graph classification experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic correlation dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--graphs", type=int, default=400)
    g.add_argument("--nodes", type=int, default=50)
    g.add_argument("--signal", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV} or 0")
    g.add_argument("--threshold", type=float, default=0.3)
    g.add_argument("--timepoints", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    def with_config(name, help, func, jobs=True):
        s = sub.add_parser(name, help=help)
        s.add_argument("--config", required=True)
        if jobs:
            s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=func)
        return s

    t = with_config("train", "train one variant with repeated splits", cmd_train)
    t.add_argument("--variant", choices=VARIANTS)
    with_config("ablate", "train all six variants", cmd_ablate)

    c = with_config("cka", "pairwise CKA between trained checkpoints", cmd_cka, jobs=False)
    c.add_argument("--checkpoints", nargs="+", required=True)
    c.add_argument("--layers", nargs="+", type=_parse_layer, default=[1, 2])
    c.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
    c.add_argument("--bandwidth", type=float, default=1.0, help="multiplier on the median distance")
    c.add_argument("--estimator", choices=("biased", "unbiased"), default="biased")
    c.add_argument("--include-self", action="store_true")

    s = with_config("sweep", "rerun at several binarization thresholds", cmd_sweep)
    s.add_argument("--thresholds", type=_parse_thresholds, default=[0, 0.1, 0.2, 0.3, 0.4, 0.5])

    e = with_config("export-emb", "write graph embeddings as CSV", cmd_export_emb, jobs=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--layer", type=_parse_layer, default="final")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining validation failures come from user-supplied inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
