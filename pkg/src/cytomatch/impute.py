"""Hot-deck nearest-neighbor imputation, plain and cluster-restricted.

Every imputed value is copied verbatim from a donor row; donors may serve
multiple recipients. Distances are Euclidean on the raw common coordinates
(optional standardization sits behind a flag, off by default).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import spatial

from .data import MaskedMatrix
from .errors import ConfigError, ImputationError
from .parallel import chunk_slices, ordered_map

# The spatial index is used only in low dimension, where it is exact; it must
# return the same argmin as brute force, ties included.
KDTREE_MAX_DIM = 3

_BRUTE_CHUNK = 512


@dataclass(frozen=True)
class MatchedOutput:
    """Completed recipient file plus per-row donor provenance.

    ``donor_rows[i]`` is the donor-file row that filled recipient row i.
    ``labels`` carries recipient cluster labels for the cluster-restricted
    method; ``fallback_rows`` flags recipients whose cluster had no donors
    and that fell back to the unrestricted pool.
    """

    method: str
    completed: MaskedMatrix
    donor_rows: np.ndarray
    labels: np.ndarray | None = None
    fallback_rows: np.ndarray | None = None

    @property
    def fallback_count(self) -> int:
        return 0 if self.fallback_rows is None else int(self.fallback_rows.sum())


def _common_block(m: MaskedMatrix, common: Sequence[str], role: str) -> np.ndarray:
    cols = m.columns_index(common)
    if not m.mask[:, cols].all():
        raise ImputationError(f"common columns must be fully observed in the {role} file")
    return m.values[:, cols]


def _check_donor_coverage(recipients: MaskedMatrix, donors: MaskedMatrix) -> np.ndarray:
    """Columns missing anywhere in recipients must be observed in every donor row."""
    needed = np.flatnonzero(~recipients.mask.all(axis=0))
    uncovered = needed[~donors.mask[:, needed].all(axis=0)]
    if uncovered.size:
        names = [recipients.columns[j] for j in uncovered]
        raise ImputationError(f"donor file does not fully observe required column(s) {names}")
    return needed


def _standardized(rec: np.ndarray, don: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pooled = np.vstack([rec, don])
    center = pooled.mean(axis=0)
    scale = pooled.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (rec - center) / scale, (don - center) / scale


def _nearest_brute(rec: np.ndarray, don: np.ndarray, threads: int = 1) -> np.ndarray:
    """Exact argmin donor per recipient; ties resolve to the lowest index."""

    def one_chunk(sl: slice) -> np.ndarray:
        block = rec[sl]
        dist2 = np.zeros((block.shape[0], don.shape[0]))
        for j in range(rec.shape[1]):
            dist2 += (block[:, j, None] - don[None, :, j]) ** 2
        return np.argmin(dist2, axis=1)

    parts = ordered_map(one_chunk, chunk_slices(rec.shape[0], _BRUTE_CHUNK), threads)
    return np.concatenate(parts).astype(np.intp)


def _nearest_kdtree(rec: np.ndarray, don: np.ndarray) -> np.ndarray:
    """KD-tree nearest donor with exact lowest-index tie resolution.

    Candidates within the query radius are re-scored with the same
    per-dimension accumulation as the brute-force path, so both paths return
    identical indices.
    """
    tree = spatial.cKDTree(don)
    dist, idx = tree.query(rec, k=1)
    idx = np.asarray(idx, dtype=np.intp)
    radius = dist * (1.0 + 1e-9) + 1e-12
    neighborhoods = tree.query_ball_point(rec, r=radius)
    for i, candidates in enumerate(neighborhoods):
        if len(candidates) <= 1:
            continue
        cand = np.sort(np.asarray(candidates, dtype=np.intp))
        dist2 = np.zeros(cand.size)
        for j in range(rec.shape[1]):
            dist2 += (rec[i, j] - don[cand, j]) ** 2
        idx[i] = cand[np.argmin(dist2)]
    return idx


def _nearest(rec: np.ndarray, don: np.ndarray, use_index: bool | None, threads: int) -> np.ndarray:
    if use_index is None:
        use_index = rec.shape[1] <= KDTREE_MAX_DIM
    if use_index and rec.shape[1] <= KDTREE_MAX_DIM and don.shape[0] > 1:
        return _nearest_kdtree(rec, don)
    return _nearest_brute(rec, don, threads)


def _fill_from_donors(
    recipients: MaskedMatrix, donors: MaskedMatrix, donor_rows: np.ndarray
) -> MaskedMatrix:
    values = recipients.values.copy()
    missing = ~recipients.mask
    values[missing] = donors.values[donor_rows][missing]
    return MaskedMatrix(
        recipients.columns, values, np.ones(values.shape, dtype=bool), recipients.provenance
    )


def nn_impute(
    recipients: MaskedMatrix,
    donors: MaskedMatrix,
    common: Sequence[str],
    use_index: bool | None = None,
    standardize: bool = False,
    threads: int = 1,
) -> MatchedOutput:
    """Fill each recipient's missing columns from its nearest donor.

    The donor is the argmin of the Euclidean distance on the common columns,
    over the whole donor file; distance ties break to the lowest donor row
    index. Observed recipient cells are passed through bit-identically.
    """
    common = tuple(common)
    if not common:
        raise ConfigError("common column set must be nonempty")
    rec = _common_block(recipients, common, "recipient")
    don = _common_block(donors, common, "donor")
    _check_donor_coverage(recipients, donors)
    if standardize:
        rec, don = _standardized(rec, don)
    donor_rows = _nearest(rec, don, use_index, threads)
    return MatchedOutput("nn", _fill_from_donors(recipients, donors, donor_rows), donor_rows)


def cluster_nn_impute(
    recipients: MaskedMatrix,
    donors: MaskedMatrix,
    labels_recipients: np.ndarray,
    labels_donors: np.ndarray,
    common: Sequence[str],
    use_index: bool | None = None,
    standardize: bool = False,
    threads: int = 1,
) -> MatchedOutput:
    """Nearest-neighbor imputation with the donor search restricted to donors
    sharing the recipient's cluster label.

    A recipient whose cluster has no donors falls back to the unrestricted
    donor pool; such rows are flagged and counted. With a single cluster the
    result is identical to :func:`nn_impute`.
    """
    common = tuple(common)
    if not common:
        raise ConfigError("common column set must be nonempty")
    labels_recipients = np.asarray(labels_recipients, dtype=np.int64)
    labels_donors = np.asarray(labels_donors, dtype=np.int64)
    if labels_recipients.shape != (recipients.n_rows,):
        raise ConfigError("need exactly one cluster label per recipient row")
    if labels_donors.shape != (donors.n_rows,):
        raise ConfigError("need exactly one cluster label per donor row")
    if labels_recipients.min() < 1 or labels_donors.min() < 1:
        raise ConfigError("cluster labels must be 1-based positive integers")
    rec = _common_block(recipients, common, "recipient")
    don = _common_block(donors, common, "donor")
    _check_donor_coverage(recipients, donors)
    if standardize:
        rec, don = _standardized(rec, don)

    donor_rows = np.empty(recipients.n_rows, dtype=np.intp)
    fallback = np.zeros(recipients.n_rows, dtype=bool)
    for label in np.unique(labels_recipients):
        rows = np.flatnonzero(labels_recipients == label)
        pool = np.flatnonzero(labels_donors == label)
        if pool.size == 0:
            fallback[rows] = True
            donor_rows[rows] = _nearest(rec[rows], don, use_index, threads)
            continue
        within = _nearest(rec[rows], don[pool], use_index, threads)
        donor_rows[rows] = pool[within]
    return MatchedOutput(
        "cluster-nn",
        _fill_from_donors(recipients, donors, donor_rows),
        donor_rows,
        labels=labels_recipients.copy(),
        fallback_rows=fallback,
    )
