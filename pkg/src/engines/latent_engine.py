"""
Per-class binary latent codes: surrogate features -> regularized LDA -> class
means -> sign of the deviation from the centroid of class means.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import scipy.linalg

from engines.data_engine import Dataset
from engines.errors import DatasetError, ShapeError
from engines.victim_engine import Classifier

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LatentTable:
    """One latent row per D_sample image, with aligned labels."""
    rows: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != np.asarray(self.labels).shape[0]:
            raise ShapeError("latent_table", "rows must be (m, d) with one label per row",
                             rows.shape + np.asarray(self.labels).shape)
        if not np.all(np.isfinite(rows)):
            raise DatasetError("latent rows must be finite")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def dim(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])


@dataclass(frozen=True, eq=False)
class LdaProjection:
    matrix: np.ndarray          # (d, n)
    regularization: float
    eigenvalues: np.ndarray     # top-n, descending
    requested_dim: int

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) @ self.matrix


@dataclass(frozen=True, eq=False)
class BinaryCodeSet:
    """K binary codes plus the class means and centroid they were cut from."""
    codes: np.ndarray           # (K, n) of 0/1
    class_means: np.ndarray     # (K, n)
    centroid: np.ndarray        # (n,)

    @property
    def class_count(self) -> int:
        return int(self.codes.shape[0])

    @property
    def length(self) -> int:
        return int(self.codes.shape[1])

    def bit_strings(self):
        return ["".join(str(int(b)) for b in row) for row in self.codes]


def extract_latents(surrogate: Classifier, sample: Dataset) -> LatentTable:
    """Penultimate activations of the surrogate for every D_sample image."""
    missing = np.flatnonzero(sample.class_counts() == 0)
    if len(sample) == 0 or missing.size:
        raise DatasetError(f"every class must appear in D_sample; missing {missing.tolist()}")
    rows = surrogate.feature_array(sample.flat())
    return LatentTable(rows, sample.labels, sample.class_count)


def scatter_matrices(table: LatentTable):
    """Within-class and between-class scatter (sums, not averages)."""
    rows, labels = table.rows, table.labels
    overall = rows.mean(axis=0)
    d = table.dim
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for k in range(table.class_count):
        members = rows[labels == k]
        if members.shape[0] < 2:
            raise DatasetError(f"class {k} has {members.shape[0]} samples; LDA needs at least 2")
        centered = members - members.mean(axis=0)
        s_w += centered.T @ centered
        diff = (members.mean(axis=0) - overall)[:, None]
        s_b += members.shape[0] * (diff @ diff.T)
    return s_w, s_b


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    for j in range(vectors.shape[1]):
        nonzero = np.flatnonzero(np.abs(vectors[:, j]) > 1e-12)
        if nonzero.size and vectors[nonzero[0], j] < 0:
            vectors[:, j] = -vectors[:, j]
    return vectors


def lda_fit_transform(table: LatentTable, n: int):
    """
    Top-n eigenvectors of (S_w + lambda I)^-1 S_b, lambda = 1e-4 * trace(S_w) / d.

    Solved by Cholesky whitening of S_w + lambda I followed by a symmetric
    eigendecomposition. n is clipped to min(n, K-1, d) with a warning.

    Returns:
        (LdaProjection, projected LatentTable)
    """
    if table.class_count < 2:
        raise DatasetError("LDA needs at least two classes")
    if n < 1:
        raise ValueError(f"target dimension must be >= 1, got {n}")
    s_w, s_b = scatter_matrices(table)
    d = table.dim
    achieved = min(n, table.class_count - 1, d)
    if achieved < n:
        logger.warning("LDA dimension clipped from %d to %d (K-1=%d, d=%d)",
                       n, achieved, table.class_count - 1, d)

    trace = float(np.trace(s_w))
    lam = 1e-4 * trace / d if trace > 0 else 1e-8
    chol = scipy.linalg.cholesky(s_w + lam * np.eye(d), lower=True)
    inv_chol = scipy.linalg.solve_triangular(chol, np.eye(d), lower=True)
    whitened = inv_chol @ s_b @ inv_chol.T
    whitened = 0.5 * (whitened + whitened.T)
    values, vectors = scipy.linalg.eigh(whitened)
    order = np.argsort(-values, kind="stable")[:achieved]
    matrix = _fix_signs(inv_chol.T @ vectors[:, order])

    projection = LdaProjection(matrix, lam, values[order], n)
    projected = LatentTable(projection.transform(table.rows), table.labels, table.class_count)
    return projection, projected


def fisher_criterion(table: LatentTable, matrix: np.ndarray, regularization: Optional[float] = None) -> float:
    """trace((P^T (S_w + lambda I) P)^-1 P^T S_b P) for a (d, n) projection P."""
    s_w, s_b = scatter_matrices(table)
    d = table.dim
    if regularization is None:
        trace = float(np.trace(s_w))
        regularization = 1e-4 * trace / d if trace > 0 else 1e-8
    within = matrix.T @ (s_w + regularization * np.eye(d)) @ matrix
    between = matrix.T @ s_b @ matrix
    return float(np.trace(np.linalg.solve(within, between)))


def binarize_codes(projected: LatentTable) -> BinaryCodeSet:
    """B_y[i] = 1 iff (M_y - c)[i] > 0, strictly."""
    if len(projected) == 0:
        raise DatasetError("projected table is empty")
    means = np.stack([projected.rows[projected.labels == k].mean(axis=0)
                      for k in range(projected.class_count)])
    centroid = means.mean(axis=0)
    codes = (means - centroid > 0).astype(np.int8)
    return BinaryCodeSet(codes, means, centroid)


def encode_classes(surrogate: Classifier, sample: Dataset, n: int) -> BinaryCodeSet:
    """Extract -> LDA -> binarize in one call."""
    table = extract_latents(surrogate, sample)
    projection, projected = lda_fit_transform(table, n)
    codes = binarize_codes(projected)
    logger.info("encoded %d classes into %d-bit codes (%d distinct)",
                codes.class_count, codes.length, len({tuple(r) for r in codes.codes}))
    return codes


def codes_to_frame(codes: BinaryCodeSet) -> pd.DataFrame:
    return pd.DataFrame({"class": range(codes.class_count), "code": codes.bit_strings()})


def codes_to_csv(codes: BinaryCodeSet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    codes_to_frame(codes).to_csv(path, index=False)
    return path


def codes_from_csv(path: Union[str, Path]) -> np.ndarray:
    frame = pd.read_csv(path, dtype={"code": str})
    return np.array([[int(b) for b in s] for s in frame["code"]], dtype=np.int8)
