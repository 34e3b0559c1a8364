"""Command-line orchestration of the matching pipeline.

Commands: simulate, split, histogram, fit, impute, evaluate, match. A run is
described by one YAML config; flags override config keys. Exit codes: 0 on
success, 1 on numerical failure, 2 on I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import em, evaluate
from .config import RunConfig, echo_config, load_config
from .data import (
    FILE1,
    FILE2,
    MaskedMatrix,
    SplitSpec,
    apply_pattern,
    load_table,
    split_for_matching,
    write_table,
)
from .errors import MatchingError, NumericalError
from .impute import MatchedOutput, cluster_nn_impute, nn_impute
from .panel import PanelConfig, detect_levels, initial_means, with_detected_levels

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_CONFIG = 2


@contextlib.contextmanager
def _stage(name: str):
    """Prefix any pipeline error with the stage it came from."""
    try:
        yield
    except MatchingError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def _ensure_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_input(path: str | None, what: str, cfg: RunConfig) -> MaskedMatrix:
    if not path:
        raise MatchingError(f"no {what} file given (set inputs.{what} or pass --{what})")
    return load_table(path, cfg.missing_token)


def _detected_panel(cfg: RunConfig, stacked: MaskedMatrix) -> PanelConfig:
    """Fill any missing marker levels by peak detection on observed values."""
    missing = [m for m in cfg.panel.markers if m not in cfg.panel.levels]
    detected = {}
    for marker in missing:
        observed = stacked.observed_column(marker)
        detected[marker] = detect_levels(
            observed, cfg.histogram_bins, cfg.histogram_smoothing
        ).levels
    return with_detected_levels(cfg.panel, detected)


def _fit_pipeline(cfg: RunConfig, file1: MaskedMatrix, file2: MaskedMatrix) -> tuple[em.MixtureModel, np.ndarray, np.ndarray]:
    stacked = file1.stack(file2)
    with _stage("levels"):
        panel = _detected_panel(cfg, stacked)
        means = initial_means(panel)
        if cfg.n_components != means.shape[0]:
            raise MatchingError(
                f"model.k={cfg.n_components} does not match the panel's {means.shape[0]} cell types"
            )
    with _stage("init"):
        model0 = em.init_model(stacked, means, cfg.latent_dim, cfg.seed_init)
    with _stage("fit"):
        model = em.fit(model0, stacked, cfg.tol, cfg.max_iter)
    with _stage("classify"):
        labels = em.classify(model, stacked)
    return model, labels[: file1.n_rows], labels[file1.n_rows :]


def _impute_pair(
    cfg: RunConfig,
    file1: MaskedMatrix,
    file2: MaskedMatrix,
    labels1: np.ndarray,
    labels2: np.ndarray,
) -> tuple[MatchedOutput, MatchedOutput]:
    kwargs = dict(use_index=cfg.use_index, standardize=cfg.standardize_common, threads=cfg.threads)
    with _stage("impute"):
        if cfg.method == "nn":
            out1 = nn_impute(file1, file2, cfg.pattern.common, **kwargs)
            out2 = nn_impute(file2, file1, cfg.pattern.common, **kwargs)
        else:
            out1 = cluster_nn_impute(file1, file2, labels1, labels2, cfg.pattern.common, **kwargs)
            out2 = cluster_nn_impute(file2, file1, labels2, labels1, cfg.pattern.common, **kwargs)
    return out1, out2


def _write_provenance(out: MatchedOutput, path: Path) -> None:
    with path.open("w", newline="") as handle:
        handle.write("row,donor_row,cluster_label,fallback\n")
        n = out.completed.n_rows
        labels = out.labels if out.labels is not None else np.zeros(n, dtype=np.int64)
        fallback = out.fallback_rows if out.fallback_rows is not None else np.zeros(n, dtype=bool)
        for i in range(n):
            handle.write(f"{i},{int(out.donor_rows[i])},{int(labels[i])},{int(fallback[i])}\n")


def _write_labels(labels: np.ndarray, path: Path) -> None:
    with path.open("w", newline="") as handle:
        handle.write("row,cluster_label\n")
        for i, lab in enumerate(labels):
            handle.write(f"{i},{int(lab)}\n")


def _write_scatter(cfg: RunConfig, completed1: MaskedMatrix, completed2: MaskedMatrix, out_dir: Path) -> list[str]:
    """Emit scatter data for every never-jointly-observed column pair."""
    scatter_dir = _ensure_dir(out_dir / "scatter")
    stacked = completed1.stack(completed2)
    written = []
    for a in cfg.pattern.specific1:
        for b in cfg.pattern.specific2:
            ja, jb = stacked.column_index(a), stacked.column_index(b)
            path = scatter_dir / f"{a}__{b}.csv"
            with path.open("w", newline="") as handle:
                handle.write(f"{a},{b}\n")
                for va, vb in zip(stacked.values[:, ja], stacked.values[:, jb]):
                    handle.write(f"{float(va)!r},{float(vb)!r}\n")
            written.append(str(path.relative_to(out_dir)))
    return written


def _match_mode_kl(
    cfg: RunConfig,
    truth: MaskedMatrix,
    completed: MaskedMatrix,
) -> dict:
    """KL of one completed file against a ground-truth sample.

    Outside the split protocol there is no held-out set, so the completed
    rows themselves serve as evaluation points (capped for tractability).
    """
    points = completed.values
    if points.shape[0] > cfg.eval_max_points:
        take = np.random.default_rng(cfg.seed_split).choice(
            points.shape[0], size=cfg.eval_max_points, replace=False
        )
        points = points[np.sort(take)]
    report = evaluate.empirical_kl(
        completed.values,
        truth.values,
        points,
        method=cfg.method,
        columns=completed.columns,
        threads=cfg.threads,
    )
    return {"value": report.value, "n_eval": report.n_eval, "method": report.method}


def cmd_simulate(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.simulate.kind == "toy":
        table, labels = evaluate.sample_toy(cfg.simulate.n, cfg.seed_simulate)
    else:
        with _stage("levels"):
            if any(m not in cfg.panel.levels for m in cfg.panel.markers):
                raise MatchingError("panel simulation needs levels for every marker in the config")
        table, labels = evaluate.sample_panel(
            cfg.simulate.n, cfg.panel, cfg.seed_simulate, cfg.simulate.weights
        )
    write_table(table, args.out, cfg.missing_token)
    if args.labels_out:
        _write_labels(labels, Path(args.labels_out))
    print(f"wrote {table.n_rows} rows x {table.n_cols} columns to {args.out}")
    return EXIT_OK


def cmd_split(cfg: RunConfig, args: argparse.Namespace) -> int:
    if cfg.split_sizes is None:
        raise MatchingError("config has no split section")
    with _stage("load"):
        table = _load_input(args.data, "data", cfg)
    n1, n2, n_eval = cfg.split_sizes
    spec = SplitSpec(n1, n2, n_eval, cfg.seed_split, cfg.pattern)
    with _stage("split"):
        file1, file2, holdout = split_for_matching(table, spec)
    out = _ensure_dir(args.out_dir)
    write_table(file1, out / "file1.csv", cfg.missing_token)
    write_table(file2, out / "file2.csv", cfg.missing_token)
    write_table(holdout, out / "eval.csv", cfg.missing_token)
    echo_config(cfg, out)
    print(f"wrote file1 ({n1} rows), file2 ({n2} rows), eval ({n_eval} rows) to {out}")
    return EXIT_OK


def cmd_histogram(cfg: RunConfig, args: argparse.Namespace) -> int:
    with _stage("load"):
        table = _load_input(args.data, "data", cfg)
    out = _ensure_dir(args.out_dir)
    peaks: dict[str, dict] = {}
    with _stage("histogram"):
        for marker in table.columns:
            observed = table.observed_column(marker)
            detection = detect_levels(observed, cfg.histogram_bins, cfg.histogram_smoothing)
            with (out / f"hist_{marker}.csv").open("w", newline="") as handle:
                handle.write("bin_left,bin_right,count,smoothed\n")
                for left, right, count, smooth in zip(
                    detection.bin_edges[:-1],
                    detection.bin_edges[1:],
                    detection.counts,
                    detection.smoothed,
                ):
                    handle.write(f"{float(left)!r},{float(right)!r},{int(count)},{float(smooth)!r}\n")
            peaks[marker] = {
                "negative_level": detection.levels.negative,
                "positive_level": detection.levels.positive,
                "single_peak": detection.levels.single_peak,
                "peak_locations": [float(v) for v in detection.peak_locations],
                "prominences": [float(v) for v in detection.prominences],
            }
    (out / "peaks.json").write_text(json.dumps(peaks, indent=2) + "\n")
    echo_config(cfg, out)
    print(f"wrote per-marker histograms and peaks.json to {out}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args: argparse.Namespace) -> int:
    with _stage("load"):
        file1 = _load_input(args.file1 or cfg.file1, "file1", cfg)
        file2 = _load_input(args.file2 or cfg.file2, "file2", cfg)
    file1 = apply_pattern(file1, cfg.pattern, np.full(file1.n_rows, FILE1))
    file2 = apply_pattern(file2, cfg.pattern, np.full(file2.n_rows, FILE2))
    model, _, _ = _fit_pipeline(cfg, file1, file2)
    out = _ensure_dir(args.out_dir)
    em.save_model(model, out / "model.json")
    echo_config(cfg, out)
    print(
        f"fit converged={model.metadata.get('converged')} after {len(model.trace)} iterations, "
        f"loglik={model.trace[-1]:.6f}; model written to {out / 'model.json'}"
    )
    return EXIT_OK


def cmd_impute(cfg: RunConfig, args: argparse.Namespace) -> int:
    with _stage("load"):
        file1 = _load_input(args.file1 or cfg.file1, "file1", cfg)
        file2 = _load_input(args.file2 or cfg.file2, "file2", cfg)
        model = em.load_model(args.model)
    file1 = apply_pattern(file1, cfg.pattern, np.full(file1.n_rows, FILE1))
    file2 = apply_pattern(file2, cfg.pattern, np.full(file2.n_rows, FILE2))
    stacked = file1.stack(file2)
    with _stage("classify"):
        labels = em.classify(model, stacked)
    out1, out2 = _impute_pair(cfg, file1, file2, labels[: file1.n_rows], labels[file1.n_rows :])
    out = _ensure_dir(args.out_dir)
    write_table(out1.completed, out / "completed_file1.csv", cfg.missing_token)
    write_table(out2.completed, out / "completed_file2.csv", cfg.missing_token)
    _write_provenance(out1, out / "provenance_file1.csv")
    _write_provenance(out2, out / "provenance_file2.csv")
    echo_config(cfg, out)
    print(f"wrote completed files and provenance to {out}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    with _stage("load"):
        truth = _load_input(args.truth or cfg.truth, "truth", cfg)
    if cfg.split_sizes is None:
        raise MatchingError("config has no split section (needed to build evaluation splits)")
    with _stage("levels"):
        panel = _detected_panel(cfg, truth)
        means = initial_means(panel)
    n1, n2, n_eval = cfg.split_sizes
    seeds = [cfg.seed_split + r for r in range(cfg.eval_repeats)]
    with _stage("evaluate"):
        summary = evaluate.kl_summary(
            truth,
            cfg.pattern,
            means,
            cfg.latent_dim,
            n1,
            n2,
            n_eval,
            seeds,
            tol=cfg.tol,
            max_iter=cfg.max_iter,
            use_index=cfg.use_index,
            threads=cfg.threads,
        )
    out = _ensure_dir(args.out_dir)
    (out / "kl_report.json").write_text(json.dumps({"seeds": seeds, "kl": summary}, indent=2) + "\n")
    echo_config(cfg, out)
    header = f"{'method':<12} {'file1':>18} {'file2':>18}"
    print(header)
    for method, files in summary.items():
        row = f"{method:<12}"
        for file_key in ("file1", "file2"):
            cell = files[file_key]
            row += f" {cell['mean']:>10.3f} ± {cell['stderr']:<5.3f}"
        print(row)
    print(f"report written to {out / 'kl_report.json'}")
    return EXIT_OK


def cmd_match(cfg: RunConfig, args: argparse.Namespace) -> int:
    with _stage("load"):
        file1 = _load_input(args.file1 or cfg.file1, "file1", cfg)
        file2 = _load_input(args.file2 or cfg.file2, "file2", cfg)
        truth_path = args.truth or cfg.truth
        truth = load_table(truth_path, cfg.missing_token) if truth_path else None
    file1 = apply_pattern(file1, cfg.pattern, np.full(file1.n_rows, FILE1))
    file2 = apply_pattern(file2, cfg.pattern, np.full(file2.n_rows, FILE2))
    model, labels1, labels2 = _fit_pipeline(cfg, file1, file2)
    out1, out2 = _impute_pair(cfg, file1, file2, labels1, labels2)

    out = _ensure_dir(args.out_dir)
    em.save_model(model, out / "model.json")
    write_table(out1.completed, out / "completed_file1.csv", cfg.missing_token)
    write_table(out2.completed, out / "completed_file2.csv", cfg.missing_token)
    _write_labels(labels1, out / "labels_file1.csv")
    _write_labels(labels2, out / "labels_file2.csv")
    _write_provenance(out1, out / "provenance_file1.csv")
    _write_provenance(out2, out / "provenance_file2.csv")
    scatter = _write_scatter(cfg, out1.completed, out2.completed, out)
    echo_config(cfg, out)

    kl = None
    if truth is not None:
        with _stage("evaluate"):
            kl = {
                "file1": _match_mode_kl(cfg, truth, out1.completed),
                "file2": _match_mode_kl(cfg, truth, out2.completed),
            }
    report = {
        "method": cfg.method,
        "n_iterations": len(model.trace),
        "loglik": model.trace[-1] if model.trace else None,
        "loglik_trace": [float(v) for v in model.trace],
        "converged": model.metadata.get("converged"),
        "fallback_counts": {"file1": out1.fallback_count, "file2": out2.fallback_count},
        "kl": kl,
        # paths relative to the output directory, so reruns are byte-identical
        "outputs": {
            "model": "model.json",
            "completed_file1": "completed_file1.csv",
            "completed_file2": "completed_file2.csv",
            "scatter": scatter,
        },
    }
    (out / "run_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(
        f"match ({cfg.method}) finished: {len(model.trace)} EM iterations, "
        f"outputs in {out}"
    )
    if kl is not None:
        print(f"KL vs truth: file1={kl['file1']['value']:.3f} file2={kl['file2']['value']:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cytomatch",
        description="Statistical file matching of incomplete tables via mixture clustering and hot-deck imputation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key via dotted path, e.g. --set model.q=1",
    )
    common.add_argument("--threads", type=int, help="worker threads (default: $CYTOMATCH_THREADS or 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic complete table")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--labels-out", help="optional CSV of true cluster labels")

    p = sub.add_parser("split", parents=[common], help="split a complete table into file1/file2/eval")
    p.add_argument("--data", required=True, help="complete input CSV")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("histogram", parents=[common], help="per-marker histograms and detected peaks")
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit the mixture model on two data files")
    p.add_argument("--file1")
    p.add_argument("--file2")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("impute", parents=[common], help="impute with a previously fitted model")
    p.add_argument("--file1")
    p.add_argument("--file2")
    p.add_argument("--model", required=True, help="model.json from the fit command")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("evaluate", parents=[common], help="seeded split protocol with KL reporting")
    p.add_argument("--truth", help="complete ground-truth CSV")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("match", parents=[common], help="end-to-end pipeline on two data files")
    p.add_argument("--file1")
    p.add_argument("--file2")
    p.add_argument("--truth", help="optional complete ground-truth CSV for KL reporting")
    p.add_argument("--out-dir", required=True)
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "split": cmd_split,
    "histogram": cmd_histogram,
    "fit": cmd_fit,
    "impute": cmd_impute,
    "evaluate": cmd_evaluate,
    "match": cmd_match,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.threads is not None:
            cfg.threads = max(1, args.threads)
        return _COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MatchingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
