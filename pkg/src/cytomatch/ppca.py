"""Single-component probabilistic PCA: marginal covariance, observed-margin
log-density, and Gaussian conditioning of missing coordinates on observed
ones. All densities are computed in log space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ConditioningError, ConfigError

LOG_2PI = float(np.log(2.0 * np.pi))

_JITTER_BASE = 1e-10
_JITTER_ATTEMPTS = 3


@dataclass(frozen=True)
class PpcaComponent:
    """One mixture component: x ~ N(mean, loadings @ loadings.T + noise_variance * I)."""

    weight: float
    mean: np.ndarray
    loadings: np.ndarray
    noise_variance: float

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64)
        loadings = np.array(self.loadings, dtype=np.float64)
        if mean.ndim != 1:
            raise ConfigError("component mean must be a vector")
        if loadings.ndim != 2:
            raise ConfigError("loadings must be a d x q matrix")
        d = mean.shape[0]
        if loadings.shape[0] != d:
            raise ConfigError(f"loadings have {loadings.shape[0]} rows for a {d}-dimensional mean")
        q = loadings.shape[1]
        if not 1 <= q <= d:
            raise ConfigError(f"latent dimension must satisfy 1 <= q <= d, got q={q}, d={d}")
        if not self.noise_variance > 0:
            raise ConfigError(f"noise variance must be positive, got {self.noise_variance}")
        if not 0.0 <= self.weight <= 1.0 + 1e-12:
            raise ConfigError(f"component weight must lie in [0, 1], got {self.weight}")
        if not (np.isfinite(mean).all() and np.isfinite(loadings).all()):
            raise ConfigError("component parameters must be finite")
        mean.setflags(write=False)
        loadings.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "loadings", loadings)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loadings.shape[1]


@dataclass(frozen=True)
class ConditionalMoments:
    """Conditional mean and covariance of the missing block given the
    observed block, plus the log-density of the observed block."""

    cond_mean: np.ndarray
    cond_cov: np.ndarray
    obs_logdensity: float


def marginal_covariance(comp: PpcaComponent) -> np.ndarray:
    """Implied d x d covariance loadings @ loadings.T + noise_variance * I."""
    W = comp.loadings
    C = W @ W.T + comp.noise_variance * np.eye(comp.dim)
    return (C + C.T) / 2.0


def _chol_observed(c_obs: np.ndarray, label: str) -> np.ndarray:
    """Lower Cholesky factor with escalating jitter before giving up.

    Jitter starts at 1e-10 * trace/d and grows tenfold for up to three
    attempts; a matrix still singular after that raises ConditioningError.
    """
    n = c_obs.shape[0]
    base = np.trace(c_obs) / max(1, n)
    jitter = 0.0
    for attempt in range(_JITTER_ATTEMPTS + 1):
        try:
            return linalg.cholesky(c_obs + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter = _JITTER_BASE * base * (10.0 ** attempt)
    raise ConditioningError(f"observed-block covariance of {label} is singular even after jitter")


class PatternFactors:
    """Conditioning of one component on one observed-coordinate set.

    Factorizations depend only on the missingness pattern, so one instance
    serves every row sharing the pattern; batch methods evaluate whole row
    blocks at once. Instances are immutable after construction and safe to
    share across threads.
    """

    def __init__(self, comp: PpcaComponent, observed: np.ndarray, label: str = "component"):
        d = comp.dim
        observed = np.asarray(observed, dtype=np.intp)
        missing = np.setdiff1d(np.arange(d), observed)
        C = marginal_covariance(comp)
        self.observed = observed
        self.missing = missing
        self._mean_obs = comp.mean[observed]
        self._mean_mis = comp.mean[missing]
        if observed.size == 0:
            self._chol = None
            self._logdet = 0.0
            self._gain = np.zeros((missing.size, 0))
            self.cond_cov = C
            return
        c_oo = C[np.ix_(observed, observed)]
        self._chol = _chol_observed(c_oo, label)
        self._logdet = 2.0 * float(np.sum(np.log(np.diag(self._chol))))
        if missing.size:
            c_om = C[np.ix_(observed, missing)]
            gain = linalg.cho_solve((self._chol, True), c_om).T
            q_block = C[np.ix_(missing, missing)] - gain @ c_om
            self.cond_cov = (q_block + q_block.T) / 2.0
        else:
            gain = np.zeros((0, observed.size))
            self.cond_cov = np.zeros((0, 0))
        self._gain = gain

    def log_density(self, x_obs: np.ndarray) -> np.ndarray:
        """log N(x^obs; mean^obs, C^obs,obs) for each row of x_obs.

        Rows with no observed coordinates contribute log-density 0 by
        convention.
        """
        x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
        if self.observed.size == 0:
            return np.zeros(x.shape[0])
        z = linalg.solve_triangular(self._chol, (x - self._mean_obs).T, lower=True)
        quad = np.einsum("ij,ij->j", z, z)
        return -0.5 * (self.observed.size * LOG_2PI + self._logdet + quad)

    def conditional_mean(self, x_obs: np.ndarray) -> np.ndarray:
        """E[x^mis | x^obs] for each row of x_obs; shape (n, n_missing)."""
        x = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
        return self._mean_mis + (x - self._mean_obs) @ self._gain.T


def condition(comp: PpcaComponent, x_obs: np.ndarray, observed_mask: np.ndarray) -> ConditionalMoments:
    """Condition a component on the observed coordinates of one row.

    ``observed_mask`` is a length-d boolean vector; ``x_obs`` holds the
    values of the observed coordinates in natural column order. With a full
    mask the conditional arrays are empty and ``obs_logdensity`` is the
    complete Gaussian log-density.
    """
    observed_mask = np.asarray(observed_mask, dtype=bool)
    if observed_mask.shape != (comp.dim,):
        raise ConfigError(f"observed mask must have length {comp.dim}")
    if not observed_mask.any():
        raise ConfigError("observed coordinate set must be nonempty")
    x_obs = np.asarray(x_obs, dtype=np.float64).ravel()
    if x_obs.shape != (int(observed_mask.sum()),):
        raise ConfigError("x_obs length must match the observed coordinate count")
    if not np.isfinite(x_obs).all():
        raise ConfigError("observed values must be finite")
    factors = PatternFactors(comp, np.flatnonzero(observed_mask))
    return ConditionalMoments(
        cond_mean=factors.conditional_mean(x_obs)[0],
        cond_cov=factors.cond_cov.copy(),
        obs_logdensity=float(factors.log_density(x_obs)[0]),
    )
