"""Two-stage EM for a mixture of PPCA components on data with missing cells.

Rows are bucketed by missingness pattern so observed-block factorizations and
conditional moments are computed once per (component, pattern) per iteration.
Accumulations run in a fixed pattern/component order, so results are
reproducible bit-for-bit for a given seed.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .data import MaskedMatrix
from .errors import ConfigError, LoadError, NumericalError
from .ppca import PatternFactors, PpcaComponent

MODEL_SCHEMA = "ppca-mixture-model/1"

# A component whose responsibility mass falls below this is considered dead
# and gets reseeded instead of deleted.
DEAD_RESPONSIBILITY = 1e-8

_VARIANCE_FLOOR_SCALE = 1e-8


@dataclass
class MixtureModel:
    """A K-component PPCA mixture over named columns, with its fit trace."""

    columns: tuple[str, ...]
    latent_dim: int
    components: list[PpcaComponent]
    trace: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.columns = tuple(self.columns)
        if not self.components:
            raise ConfigError("mixture needs at least one component")
        d = len(self.columns)
        for k, comp in enumerate(self.components):
            if comp.dim != d:
                raise ConfigError(f"component {k + 1} has dimension {comp.dim}, expected {d}")
            if comp.latent_dim != self.latent_dim:
                raise ConfigError(
                    f"component {k + 1} has latent dimension {comp.latent_dim}, expected {self.latent_dim}"
                )
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"component weights must sum to 1, got {total!r}")

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def dim(self) -> int:
        return len(self.columns)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components])


@dataclass
class PatternMoments:
    """Per-pattern conditional moments from one E-step.

    ``cond_mean[k]`` holds E[x^mis | x^obs, component k] for every row of the
    pattern; ``cond_cov[k]`` is the shared conditional covariance of the
    missing block under component k.
    """

    rows: np.ndarray
    observed: np.ndarray
    missing: np.ndarray
    cond_mean: list[np.ndarray]
    cond_cov: list[np.ndarray]


def pattern_groups(mask: np.ndarray) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Group rows by identical missingness pattern.

    Returns (observed columns, missing columns, row indices) triples in a
    deterministic order.
    """
    uniq, inverse = np.unique(mask, axis=0, return_inverse=True)
    groups = []
    for g in range(uniq.shape[0]):
        rows = np.flatnonzero(inverse == g)
        observed = np.flatnonzero(uniq[g])
        missing = np.flatnonzero(~uniq[g])
        groups.append((observed, missing, rows))
    return groups


def repair_positive_definite(c: np.ndarray, floor: float) -> np.ndarray:
    """Make a symmetric matrix positive definite by flooring its eigenvalues.

    The input is symmetrized first; eigenvectors are kept and every
    eigenvalue below ``floor`` is raised to it.
    """
    if floor <= 0:
        raise ConfigError(f"eigenvalue floor must be positive, got {floor}")
    c = np.asarray(c, dtype=np.float64)
    c = (c + c.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(c)
    repaired = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
    return (repaired + repaired.T) / 2.0


def pairwise_covariance(
    values: np.ndarray, mask: np.ndarray, rows: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise-complete sample covariance over the given rows.

    Entry (i, j) uses rows that observe both columns, with means taken over
    those rows; it is estimable when at least two such rows exist. Returns
    the covariance matrix (zeros where not estimable) and the boolean
    estimability mask.
    """
    if rows is not None:
        values = values[rows]
        mask = mask[rows]
    d = values.shape[1]
    cov = np.zeros((d, d))
    estimable = np.zeros((d, d), dtype=bool)
    for i in range(d):
        for j in range(i, d):
            both = mask[:, i] & mask[:, j]
            n_both = int(both.sum())
            if n_both < 2:
                continue
            xi = values[both, i]
            xj = values[both, j]
            c = float((xi - xi.mean()) @ (xj - xj.mean())) / (n_both - 1)
            cov[i, j] = cov[j, i] = c
            estimable[i, j] = estimable[j, i] = True
    return cov, estimable


def initial_covariance(
    values: np.ndarray, mask: np.ndarray, rows: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, float]:
    """Covariance seed for one component before PD repair.

    Starts from a random symmetric matrix with entries uniform in [-r, r],
    where r is the mean estimable variance of the cluster, then overwrites
    every estimable entry with the pairwise-complete sample covariance.
    Returns (matrix, estimability mask, r).
    """
    sample_cov, estimable = pairwise_covariance(values, mask, rows)
    diag_est = np.diag(estimable)
    scale = float(np.diag(sample_cov)[diag_est].mean()) if diag_est.any() else 1.0
    if not scale > 0:
        scale = 1.0
    draw = rng.uniform(-scale, scale, size=sample_cov.shape)
    c = np.triu(draw) + np.triu(draw, 1).T
    c[estimable] = sample_cov[estimable]
    return c, estimable, scale


def init_model(data: MaskedMatrix, means: np.ndarray, latent_dim: int, seed: int) -> MixtureModel:
    """Build the starting mixture from the panel-driven component means.

    For each component: rows are assigned to their nearest mean using
    observed coordinates only; a random symmetric covariance is drawn and
    every estimable block replaced by the cluster's pairwise-complete sample
    covariance; the matrix is repaired to positive definite; the weight is
    the cluster fraction; loadings come from the top eigenvectors and the
    noise variance from the mean of the remaining eigenvalues. Components
    with fewer than latent_dim + 1 assigned rows fall back to covariance
    blocks estimated from all rows and weight 1/(2K). Deterministic for a
    fixed seed.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2:
        raise ConfigError("initial means must form a K x d matrix")
    n_components, d = means.shape
    if d != data.n_cols:
        raise ConfigError(f"means have dimension {d}, data has {data.n_cols} columns")
    if not 1 <= latent_dim < d:
        raise ConfigError(f"latent dimension must satisfy 1 <= q < d, got q={latent_dim}, d={d}")

    values, mask = data.values, data.mask
    n_rows = data.n_rows
    dist2 = np.empty((n_rows, n_components))
    for k in range(n_components):
        diff = np.where(mask, values - means[k], 0.0)
        dist2[:, k] = np.einsum("nj,nj->n", diff, diff)
    assignment = np.argmin(dist2, axis=1)

    rng = np.random.default_rng(seed)
    weights = np.empty(n_components)
    components: list[tuple[np.ndarray, float]] = []
    fallbacks: list[int] = []
    for k in range(n_components):
        rows = np.flatnonzero(assignment == k)
        if rows.size < latent_dim + 1:
            fallbacks.append(k)
            rows = np.arange(n_rows)
            weights[k] = 1.0 / (2 * n_components)
        else:
            weights[k] = rows.size / n_rows
        cov, _, scale = initial_covariance(values, mask, rows, rng)
        cov = repair_positive_definite(cov, floor=max(1e-12, 1e-6 * scale))
        eigvals, eigvecs = np.linalg.eigh(cov)
        eigvals = eigvals[::-1]
        eigvecs = eigvecs[:, ::-1]
        sigma2 = float(np.mean(eigvals[latent_dim:]))
        gaps = np.maximum(eigvals[:latent_dim] - sigma2, 1e-12 * max(eigvals[0], 1.0))
        loadings = eigvecs[:, :latent_dim] * np.sqrt(gaps)
        components.append((loadings, sigma2))
    weights = weights / weights.sum()

    if fallbacks:
        warnings.warn(
            f"initial clusters {[k + 1 for k in fallbacks]} had too few rows; "
            "used global covariance blocks for them",
            stacklevel=2,
        )
    comps = [
        PpcaComponent(weights[k], means[k], components[k][0], components[k][1])
        for k in range(n_components)
    ]
    metadata = {
        "init_seed": int(seed),
        "random_covariance": "symmetric entries uniform in [-r, r], r = mean estimable variance",
        "fallback_components": [k + 1 for k in fallbacks],
        "cluster_sizes": np.bincount(assignment, minlength=n_components).tolist(),
    }
    return MixtureModel(data.columns, latent_dim, comps, trace=[], metadata=metadata)


def _log_responsibilities(
    model: MixtureModel, data: MaskedMatrix, collect_moments: bool
) -> tuple[np.ndarray, list[PatternMoments]]:
    if model.columns != data.columns:
        raise ConfigError(
            f"model columns {list(model.columns)} do not match data columns {list(data.columns)}"
        )
    log_r = np.empty((data.n_rows, model.n_components))
    moments: list[PatternMoments] = []
    log_weights = np.log(np.maximum(model.weights, np.finfo(float).tiny))
    for observed, missing, rows in pattern_groups(data.mask):
        x_obs = data.values[np.ix_(rows, observed)]
        pm = PatternMoments(rows, observed, missing, [], [])
        for k, comp in enumerate(model.components):
            factors = PatternFactors(comp, observed, label=f"component {k + 1}")
            log_r[rows, k] = log_weights[k] + factors.log_density(x_obs)
            if collect_moments:
                pm.cond_mean.append(factors.conditional_mean(x_obs))
                pm.cond_cov.append(factors.cond_cov)
        if collect_moments:
            moments.append(pm)
    return log_r, moments


def e_step(
    model: MixtureModel, data: MaskedMatrix
) -> tuple[np.ndarray, list[PatternMoments], float]:
    """Responsibilities, conditional moments, and observed-data log-likelihood.

    Responsibilities are normalized per row via log-sum-exp. A row with no
    observed coordinates gets the component weights as responsibilities and
    contributes zero to the log-likelihood.
    """
    log_r, moments = _log_responsibilities(model, data, collect_moments=True)
    norm = logsumexp(log_r, axis=1)
    resp = np.exp(log_r - norm[:, None])
    return resp, moments, float(norm.sum())


def _completed_rows(pm: PatternMoments, k: int, values: np.ndarray) -> np.ndarray:
    """Rows of the pattern with missing coordinates replaced by their
    conditional means under component k, in natural column order."""
    out = np.empty((pm.rows.size, values.shape[1]))
    out[:, pm.observed] = values[np.ix_(pm.rows, pm.observed)]
    if pm.missing.size:
        out[:, pm.missing] = pm.cond_mean[k]
    return out


def m_step_stage1(
    resp: np.ndarray,
    moments: list[PatternMoments],
    data: MaskedMatrix,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """First-stage updates: component weights and means.

    Weights are mean responsibilities; means are responsibility-weighted
    averages of rows completed by their conditional expectations. Dead
    components (responsibility mass below 1e-8) are reseeded at the
    responsibility-weighted global mean plus a little seeded noise and given
    weight 1/(2K) before renormalization.
    """
    n_components = resp.shape[1]
    d = data.n_cols
    resp_sums = resp.sum(axis=0)
    weighted_sums = np.zeros((n_components, d))
    for pm in moments:
        resp_rows = resp[pm.rows]
        for k in range(n_components):
            completed = _completed_rows(pm, k, data.values)
            weighted_sums[k] += resp_rows[:, k] @ completed
    weights = resp_sums / resp_sums.sum()
    means = np.empty((n_components, d))
    alive = resp_sums >= DEAD_RESPONSIBILITY
    means[alive] = weighted_sums[alive] / resp_sums[alive, None]

    if not alive.all():
        dead = np.flatnonzero(~alive)
        warnings.warn(
            f"component(s) {[k + 1 for k in dead]} received no responsibility; reseeding",
            stacklevel=2,
        )
        rng = rng if rng is not None else np.random.default_rng(0)
        global_mean = weighted_sums.sum(axis=0) / resp_sums.sum()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            column_sd = np.nanstd(data.values, axis=0)
        column_sd = np.where(np.isfinite(column_sd) & (column_sd > 0), column_sd, 1.0)
        for k in dead:
            means[k] = global_mean + rng.normal(0.0, 0.01 * column_sd)
            weights[k] = 1.0 / (2 * n_components)
        weights = weights / weights.sum()
    return weights, means


def m_step_stage2(
    resp: np.ndarray,
    moments: list[PatternMoments],
    data: MaskedMatrix,
    model: MixtureModel,
) -> tuple[list[np.ndarray], list[float]]:
    """Second-stage updates: loadings and noise variances.

    Uses the stage-1 means already substituted into ``model`` together with
    the E-step moments. The local covariance S accumulates the completed
    outer products plus the conditional-covariance correction scattered into
    the missing block. Dead components keep their previous parameters (the
    caller resets them).
    """
    n_components = model.n_components
    d = model.dim
    q = model.latent_dim
    resp_sums = resp.sum(axis=0)
    eye_q = np.eye(q)
    new_loadings: list[np.ndarray] = []
    new_sigma2: list[float] = []
    for k, comp in enumerate(model.components):
        if resp_sums[k] < DEAD_RESPONSIBILITY:
            new_loadings.append(comp.loadings.copy())
            new_sigma2.append(comp.noise_variance)
            continue
        scatter = np.zeros((d, d))
        for pm in moments:
            w = resp[pm.rows, k]
            centered = _completed_rows(pm, k, data.values) - comp.mean
            scatter += (centered * w[:, None]).T @ centered
            if pm.missing.size:
                scatter[np.ix_(pm.missing, pm.missing)] += w.sum() * pm.cond_cov[k]
        scatter /= resp_sums[k]
        scatter = (scatter + scatter.T) / 2.0

        loadings = comp.loadings
        sigma2 = comp.noise_variance
        m_mat = loadings.T @ loadings + sigma2 * eye_q
        sw = scatter @ loadings
        inner = sigma2 * eye_q + linalg.solve(m_mat, loadings.T @ sw, assume_a="pos")
        updated = linalg.solve(inner.T, sw.T).T
        sigma2_new = float(np.trace(scatter) - np.trace(sw @ linalg.solve(m_mat, updated.T, assume_a="pos"))) / d
        if sigma2_new <= 0:
            floor = _VARIANCE_FLOOR_SCALE * float(np.trace(scatter)) / d
            warnings.warn(
                f"component {k + 1}: noise variance update {sigma2_new:.3e} clamped to {floor:.3e}",
                stacklevel=2,
            )
            sigma2_new = floor
        new_loadings.append(updated)
        new_sigma2.append(sigma2_new)
    return new_loadings, new_sigma2


def fit(
    model0: MixtureModel,
    data: MaskedMatrix,
    tol: float = 1e-6,
    max_iter: int = 500,
    reseed_seed: int = 0,
) -> MixtureModel:
    """Run EM until the relative log-likelihood change drops below ``tol``.

    Alternates the E-step with the two M-step stages, recording the
    log-likelihood every iteration. Stops when
    |Δloglik| / (1 + |loglik|) < tol or after ``max_iter`` iterations.
    Raises ``NumericalError`` on a non-finite log-likelihood.
    """
    if not tol > 0:
        raise ConfigError(f"tolerance must be positive, got {tol}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    model = MixtureModel(
        model0.columns,
        model0.latent_dim,
        list(model0.components),
        trace=list(model0.trace),
        metadata=dict(model0.metadata),
    )
    rng = np.random.default_rng(reseed_seed)
    previous = None
    for iteration in range(max_iter):
        resp, moments, loglik = e_step(model, data)
        if not np.isfinite(loglik):
            bad = [
                k + 1
                for k, comp in enumerate(model.components)
                if not (np.isfinite(comp.mean).all() and np.isfinite(comp.loadings).all())
            ]
            detail = f" (component(s) {bad} have non-finite parameters)" if bad else ""
            raise NumericalError(f"non-finite log-likelihood at iteration {iteration + 1}{detail}")
        model.trace.append(loglik)
        if previous is not None and abs(loglik - previous) / (1.0 + abs(loglik)) < tol:
            model.metadata["converged"] = True
            break
        weights, means = m_step_stage1(resp, moments, data, rng=rng)
        stage1 = MixtureModel(
            model.columns,
            model.latent_dim,
            [
                PpcaComponent(weights[k], means[k], comp.loadings, comp.noise_variance)
                for k, comp in enumerate(model.components)
            ],
            trace=model.trace,
            metadata=model.metadata,
        )
        loadings, sigma2 = m_step_stage2(resp, moments, data, stage1)
        dead = np.flatnonzero(resp.sum(axis=0) < DEAD_RESPONSIBILITY)
        if dead.size:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                global_variance = float(np.nanmean(np.nanvar(data.values, axis=0)))
            if not np.isfinite(global_variance) or global_variance <= 0:
                global_variance = 1.0
            for k in dead:
                sigma2[k] = global_variance
        model = MixtureModel(
            model.columns,
            model.latent_dim,
            [
                PpcaComponent(weights[k], means[k], loadings[k], sigma2[k])
                for k in range(model.n_components)
            ],
            trace=model.trace,
            metadata=model.metadata,
        )
        previous = loglik
    else:
        model.metadata["converged"] = False
    return model


def classify(model: MixtureModel, data: MaskedMatrix) -> np.ndarray:
    """Assign every row the 1-based index of its highest-responsibility
    component; ties go to the lowest index."""
    log_r, _ = _log_responsibilities(model, data, collect_moments=False)
    return np.argmax(log_r, axis=1).astype(np.int64) + 1


def save_model(model: MixtureModel, path: str | Path) -> None:
    """Persist a model as a versioned JSON document."""
    doc = {
        "schema": MODEL_SCHEMA,
        "columns": list(model.columns),
        "n_components": model.n_components,
        "latent_dim": model.latent_dim,
        "components": [
            {
                "weight": float(c.weight),
                "mean": [float(v) for v in c.mean],
                "loadings": [[float(v) for v in row] for row in c.loadings],
                "noise_variance": float(c.noise_variance),
            }
            for c in model.components
        ],
        "loglik_trace": [float(v) for v in model.trace],
        "metadata": model.metadata,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | Path) -> MixtureModel:
    """Load a model saved by :func:`save_model`; schema mismatches are rejected."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: not valid JSON: {exc}") from exc
    schema = doc.get("schema")
    if schema != MODEL_SCHEMA:
        raise ConfigError(f"{path}: unsupported model schema {schema!r}; expected {MODEL_SCHEMA!r}")
    components = [
        PpcaComponent(
            entry["weight"],
            np.array(entry["mean"], dtype=np.float64),
            np.array(entry["loadings"], dtype=np.float64),
            entry["noise_variance"],
        )
        for entry in doc["components"]
    ]
    return MixtureModel(
        tuple(doc["columns"]),
        int(doc["latent_dim"]),
        components,
        trace=[float(v) for v in doc["loglik_trace"]],
        metadata=dict(doc.get("metadata", {})),
    )
