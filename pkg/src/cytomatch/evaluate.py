"""Quantitative evaluation of matched files.

Product-Gaussian kernel density estimation with per-dimension Silverman
bandwidths, the empirical KL divergence of the imputed distribution from the
ground truth, a 2-D mode counter for scatter diagnostics, the synthetic
generators used by the acceptance experiments, and the seeded
split/fit/impute/evaluate harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.special import logsumexp

from . import em
from .data import FILE1, FILE2, FilePattern, MaskedMatrix, apply_pattern, split_indices
from .errors import ConfigError, EvaluationError
from .impute import MatchedOutput, cluster_nn_impute, nn_impute
from .panel import PanelConfig, initial_means
from .parallel import chunk_slices, ordered_map
from .ppca import LOG_2PI

SILVERMAN_FACTOR = 1.06

_KDE_CHUNK = 256

METHOD_NN = "nn"
METHOD_CLUSTER_NN = "cluster-nn"
METHODS = (METHOD_NN, METHOD_CLUSTER_NN)


# ---------------------------------------------------------------------------
# Kernel density estimation and empirical KL


@dataclass(frozen=True)
class KdeModel:
    """Product-Gaussian KDE: a fully observed sample plus per-dimension
    bandwidths."""

    sample: np.ndarray
    bandwidth: np.ndarray

    def __post_init__(self) -> None:
        sample = np.array(self.sample, dtype=np.float64)
        bandwidth = np.array(self.bandwidth, dtype=np.float64)
        if sample.ndim != 2:
            raise ConfigError("KDE sample must be a 2-D array")
        if not np.isfinite(sample).all():
            raise ConfigError("KDE sample must be fully observed and finite")
        if bandwidth.shape != (sample.shape[1],):
            raise ConfigError("need one bandwidth per dimension")
        if not (np.isfinite(bandwidth).all() and (bandwidth > 0).all()):
            raise ConfigError("bandwidths must be positive and finite")
        sample.setflags(write=False)
        bandwidth.setflags(write=False)
        object.__setattr__(self, "sample", sample)
        object.__setattr__(self, "bandwidth", bandwidth)


def fit_kde(
    sample: np.ndarray,
    bandwidth: np.ndarray | float | None = None,
    columns: Sequence[str] | None = None,
) -> KdeModel:
    """Fit a product-Gaussian KDE.

    Bandwidths default to Silverman's rule per dimension,
    1.06 * std * N^(-1/5). A zero-variance dimension cannot be smoothed and
    raises ``EvaluationError`` naming the column.
    """
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim != 2:
        raise ConfigError("KDE sample must be a 2-D array")
    n, d = sample.shape
    if bandwidth is not None:
        bw = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (d,)).copy()
        return KdeModel(sample, bw)
    if n < 2:
        raise EvaluationError("bandwidth selection needs at least 2 sample rows")
    sd = sample.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        name = columns[bad[0]] if columns is not None else f"column {bad[0] + 1}"
        raise EvaluationError(f"degenerate bandwidth: {name} has zero variance")
    return KdeModel(sample, SILVERMAN_FACTOR * sd * n ** (-1.0 / 5.0))


def kde_log_density_batch(model: KdeModel, queries: np.ndarray, threads: int = 1) -> np.ndarray:
    """Log KDE density at each query row, computed via log-sum-exp."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != model.sample.shape[1]:
        raise ConfigError(
            f"queries have {queries.shape[1]} columns, KDE sample has {model.sample.shape[1]}"
        )
    if not np.isfinite(queries).all():
        raise ConfigError("query points must be finite")
    sample = model.sample
    h = model.bandwidth
    offset = float(np.log(sample.shape[0]) + np.sum(np.log(h)) + 0.5 * sample.shape[1] * LOG_2PI)

    def one_chunk(sl: slice) -> np.ndarray:
        block = queries[sl]
        quad = np.zeros((block.shape[0], sample.shape[0]))
        for j in range(sample.shape[1]):
            quad += ((block[:, j, None] - sample[None, :, j]) / h[j]) ** 2
        return logsumexp(-0.5 * quad, axis=1) - offset

    parts = ordered_map(one_chunk, chunk_slices(queries.shape[0], _KDE_CHUNK), threads)
    return np.concatenate(parts)


def kde_log_density(model: KdeModel, query: np.ndarray) -> float:
    """Log KDE density at a single point."""
    return float(kde_log_density_batch(model, np.asarray(query, dtype=np.float64)[None, :])[0])


@dataclass(frozen=True)
class KlReport:
    """Empirical KL(g || f): mean of per-point log-density ratios."""

    value: float
    terms: np.ndarray
    n_eval: int
    method: str = ""


def empirical_kl(
    imputed_sample: np.ndarray,
    truth_sample: np.ndarray,
    eval_points: np.ndarray,
    method: str = "",
    columns: Sequence[str] | None = None,
    threads: int = 1,
) -> KlReport:
    """Empirical KL divergence of the imputed distribution from the truth.

    Fits a KDE g on the imputed sample and a KDE f on the ground-truth
    sample, then averages log g - log f over the evaluation points. In the
    experiment protocol the evaluation points are the held-out rows pushed
    through the same hide-and-impute pipeline as the file under evaluation,
    so they are draws from (approximately) g.
    """
    imputed_sample = np.asarray(imputed_sample, dtype=np.float64)
    truth_sample = np.asarray(truth_sample, dtype=np.float64)
    eval_points = np.atleast_2d(np.asarray(eval_points, dtype=np.float64))
    if not (imputed_sample.ndim == truth_sample.ndim == 2):
        raise ConfigError("samples must be 2-D arrays")
    if not imputed_sample.shape[1] == truth_sample.shape[1] == eval_points.shape[1]:
        raise ConfigError("imputed, truth, and evaluation points must share the same columns")
    if eval_points.shape[0] < 2:
        raise ConfigError("need at least 2 evaluation points")
    g = fit_kde(imputed_sample, columns=columns)
    f = fit_kde(truth_sample, columns=columns)
    terms = kde_log_density_batch(g, eval_points, threads) - kde_log_density_batch(
        f, eval_points, threads
    )
    return KlReport(float(terms.mean()), terms, eval_points.shape[0], method)


# ---------------------------------------------------------------------------
# Scatter-plane mode counting


def count_modes_2d(
    points: np.ndarray,
    bins: int = 16,
    rel_threshold: float = 0.05,
    min_separation: int = 2,
) -> int:
    """Count modes of a 2-D point cloud via histogram local maxima.

    The histogram is smoothed with a 3x3 box filter; a mode is a bin that is
    a local maximum of the smoothed counts, rises above ``rel_threshold``
    times the global peak, and is not within ``min_separation`` bins
    (Chebyshev) of a higher retained mode.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ConfigError("mode counting expects an (n, 2) array")
    hist, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins)
    smoothed = ndimage.uniform_filter(hist, size=3, mode="constant")
    local_max = smoothed == ndimage.maximum_filter(smoothed, size=3, mode="constant", cval=-1.0)
    candidates = np.argwhere(local_max & (smoothed >= rel_threshold * smoothed.max()) & (smoothed > 0))
    if candidates.size == 0:
        return 0
    heights = smoothed[candidates[:, 0], candidates[:, 1]]
    order = np.lexsort((candidates[:, 1], candidates[:, 0], -heights))
    kept: list[np.ndarray] = []
    for i in order:
        cell = candidates[i]
        if all(np.abs(cell - other).max() > min_separation for other in kept):
            kept.append(cell)
    return len(kept)


# ---------------------------------------------------------------------------
# Synthetic generators

TOY_COLUMNS = ("c", "s1", "s2")
TOY_MEANS = np.array([[0.0, 0.0, 0.0], [2.0, 6.0, 6.0]])


def sample_toy(n: int, seed: int) -> tuple[MaskedMatrix, np.ndarray]:
    """Two unit-variance Gaussian clusters in 3-D.

    The clusters overlap substantially in the shared coordinate ``c`` but are
    well separated in the file-specific coordinates ``s1`` and ``s2``, which
    is exactly the geometry where plain nearest-neighbor matching invents
    spurious point clouds. Returns the complete table and 1-based true
    cluster labels.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    values = rng.standard_normal((n, 3)) + TOY_MEANS[labels]
    return MaskedMatrix.dense(values, TOY_COLUMNS), labels + 1


def sample_panel(
    n: int,
    panel: PanelConfig,
    seed: int,
    weights: Sequence[float] | None = None,
) -> tuple[MaskedMatrix, np.ndarray]:
    """Gaussian-mixture sample whose component means follow the panel.

    One component per cell type, centered on the panel's initial means, with
    seeded random positive-definite covariances on the scale of typical
    channel spreads. Returns the complete table and 1-based component labels.
    """
    means = initial_means(panel)
    n_types, d = means.shape
    if weights is None:
        probs = np.full(n_types, 1.0 / n_types)
    else:
        probs = np.asarray(weights, dtype=np.float64)
        if probs.shape != (n_types,) or (probs < 0).any() or probs.sum() <= 0:
            raise ConfigError("weights must be nonnegative with one entry per cell type")
        probs = probs / probs.sum()
    rng = np.random.default_rng(seed)
    labels = rng.choice(n_types, size=n, p=probs)
    values = np.empty((n, d))
    for k in range(n_types):
        rows = labels == k
        factor = rng.normal(0.0, 25.0, size=(d, 2))
        cov = factor @ factor.T + np.diag(rng.uniform(900.0, 1600.0, size=d))
        values[rows] = means[k] + rng.standard_normal((int(rows.sum()), d)) @ np.linalg.cholesky(cov).T
    return MaskedMatrix(panel.markers, values, np.ones((n, d), dtype=bool)), labels + 1


# ---------------------------------------------------------------------------
# Experiment harness: split, fit, impute, evaluate


@dataclass(frozen=True)
class SplitExperiment:
    """One seeded permutation: the masked files, their complete ground
    truth, the held-out rows, and the fitted mixture with cluster labels."""

    pattern: FilePattern
    file1: MaskedMatrix
    file2: MaskedMatrix
    truth1: MaskedMatrix
    truth2: MaskedMatrix
    holdout: MaskedMatrix
    model: em.MixtureModel
    labels1: np.ndarray
    labels2: np.ndarray


@dataclass(frozen=True)
class MethodEvaluation:
    """Everything one method produced on one split: completed files, imputed
    held-out points, and per-file KL reports."""

    method: str
    outputs: tuple[MatchedOutput, MatchedOutput]
    holdout_points: tuple[np.ndarray, np.ndarray]
    reports: tuple[KlReport, KlReport]


def prepare_split_experiment(
    truth: MaskedMatrix,
    pattern: FilePattern,
    means: np.ndarray,
    latent_dim: int,
    n1: int,
    n2: int,
    n_eval: int,
    seed: int,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> SplitExperiment:
    """Split a complete table, hide the file-specific blocks, and fit the
    mixture on the two masked files viewed as one data set."""
    if not truth.mask.all():
        raise ConfigError("experiment source must be fully observed")
    idx1, idx2, idx_eval = split_indices(truth.n_rows, n1, n2, n_eval, seed)
    truth1 = truth.select_rows(idx1)
    truth2 = truth.select_rows(idx2)
    holdout = truth.select_rows(idx_eval)
    file1 = apply_pattern(truth1, pattern, np.full(n1, FILE1))
    file2 = apply_pattern(truth2, pattern, np.full(n2, FILE2))
    stacked = file1.stack(file2)
    model = em.fit(em.init_model(stacked, means, latent_dim, seed=seed), stacked, tol, max_iter)
    labels = em.classify(model, stacked)
    return SplitExperiment(
        pattern, file1, file2, truth1, truth2, holdout, model, labels[:n1], labels[n1:]
    )


def _impute_one_file(
    exp: SplitExperiment,
    method: str,
    which: int,
    use_index: bool | None,
    threads: int,
) -> MatchedOutput:
    if which == FILE1:
        recipients, donors = exp.file1, exp.file2
        labels_r, labels_d = exp.labels1, exp.labels2
    else:
        recipients, donors = exp.file2, exp.file1
        labels_r, labels_d = exp.labels2, exp.labels1
    if method == METHOD_NN:
        return nn_impute(recipients, donors, exp.pattern.common, use_index, threads=threads)
    if method == METHOD_CLUSTER_NN:
        return cluster_nn_impute(
            recipients, donors, labels_r, labels_d, exp.pattern.common, use_index, threads=threads
        )
    raise ConfigError(f"unknown method {method!r}; expected one of {list(METHODS)}")


def _impute_holdout_as(
    exp: SplitExperiment,
    method: str,
    which: int,
    use_index: bool | None,
    threads: int,
) -> MatchedOutput:
    """Hide the held-out rows' blocks as if they belonged to the given file,
    then impute them from the other file's donors."""
    tags = np.full(exp.holdout.n_rows, which)
    masked = apply_pattern(exp.holdout, exp.pattern, tags)
    donors = exp.file2 if which == FILE1 else exp.file1
    labels_d = exp.labels2 if which == FILE1 else exp.labels1
    if method == METHOD_NN:
        return nn_impute(masked, donors, exp.pattern.common, use_index, threads=threads)
    labels_r = em.classify(exp.model, masked)
    return cluster_nn_impute(
        masked, donors, labels_r, labels_d, exp.pattern.common, use_index, threads=threads
    )


def evaluate_method(
    exp: SplitExperiment,
    method: str,
    use_index: bool | None = None,
    threads: int = 1,
) -> MethodEvaluation:
    """Run one imputation method on both files of a split and score each
    file's KL divergence against its ground truth."""
    outputs = []
    points = []
    reports = []
    for which, truth_file in ((FILE1, exp.truth1), (FILE2, exp.truth2)):
        out = _impute_one_file(exp, method, which, use_index, threads)
        holdout_out = _impute_holdout_as(exp, method, which, use_index, threads)
        pts = holdout_out.completed.values
        report = empirical_kl(
            out.completed.values,
            truth_file.values,
            pts,
            method=method,
            columns=exp.file1.columns,
            threads=threads,
        )
        outputs.append(out)
        points.append(pts)
        reports.append(report)
    return MethodEvaluation(method, (outputs[0], outputs[1]), (points[0], points[1]), (reports[0], reports[1]))


def kl_summary(
    truth: MaskedMatrix,
    pattern: FilePattern,
    means: np.ndarray,
    latent_dim: int,
    n1: int,
    n2: int,
    n_eval: int,
    seeds: Sequence[int],
    methods: Sequence[str] = METHODS,
    tol: float = 1e-6,
    max_iter: int = 500,
    use_index: bool | None = None,
    threads: int = 1,
) -> dict[str, dict[str, dict[str, object]]]:
    """Repeat the split/fit/impute/evaluate protocol over seeds and report
    the per-method, per-file KL mean and standard error."""
    values: dict[str, dict[str, list[float]]] = {
        m: {"file1": [], "file2": []} for m in methods
    }
    for seed in seeds:
        exp = prepare_split_experiment(
            truth, pattern, means, latent_dim, n1, n2, n_eval, seed, tol, max_iter
        )
        for method in methods:
            evaluation = evaluate_method(exp, method, use_index, threads)
            values[method]["file1"].append(evaluation.reports[0].value)
            values[method]["file2"].append(evaluation.reports[1].value)
    summary: dict[str, dict[str, dict[str, object]]] = {}
    for method in methods:
        summary[method] = {}
        for file_key in ("file1", "file2"):
            vals = np.array(values[method][file_key])
            stderr = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
            summary[method][file_key] = {
                "mean": float(vals.mean()),
                "stderr": stderr,
                "values": [float(v) for v in vals],
            }
    return summary
