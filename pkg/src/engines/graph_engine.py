"""
Class-similarity graph over binary latent codes.

Edges join classes whose codes differ in fewer than `t` bits, weighted by
exponential decay Weight_min ** (d / t). The GCN consumes the dense
symmetric-normalized adjacency with unit self-loops.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from engines.errors import ShapeError
from engines.latent_engine import BinaryCodeSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 5.0
DEFAULT_WEIGHT_MIN = 0.1


@dataclass(frozen=True, eq=False)
class ClassGraph:
    features: np.ndarray                          # (K, n) binary codes
    distances: np.ndarray                         # (K, K) pairwise l1
    weights: np.ndarray                           # (K, K), zero where no edge
    edges: Tuple[Tuple[int, int, float, float], ...]   # (i, j, d_ij, W_ij), i < j
    threshold: float
    weight_min: float
    adjacency: np.ndarray                         # normalized, (K, K)

    @property
    def node_count(self) -> int:
        return int(self.features.shape[0])

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def edge_set(self) -> set:
        return {(i, j) for i, j, _, _ in self.edges}


def l1_distance(code_i: np.ndarray, code_j: np.ndarray) -> float:
    """Sum of absolute differences; the Hamming distance for 0/1 codes."""
    a = np.asarray(code_i, dtype=np.float64).reshape(-1)
    b = np.asarray(code_j, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", "codes must have equal length", (a.size, b.size))
    return float(np.abs(a - b).sum())


def pairwise_distances(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.float64)
    return np.abs(codes[:, None, :] - codes[None, :, :]).sum(axis=2)


def edge_weight(distance: float, threshold: float, weight_min: float) -> float:
    return float(weight_min ** (distance / threshold))


def normalize_adjacency(weights: np.ndarray) -> np.ndarray:
    """D^-1/2 (W + I) D^-1/2 with D the degree matrix of W + I."""
    weights = np.asarray(weights, dtype=np.float64)
    looped = weights + np.eye(weights.shape[0])
    inv_sqrt = 1.0 / np.sqrt(looped.sum(axis=1))
    adjacency = inv_sqrt[:, None] * looped * inv_sqrt[None, :]
    return 0.5 * (adjacency + adjacency.T)


def build_graph(codes: Union[BinaryCodeSet, np.ndarray], t: float = DEFAULT_THRESHOLD,
                weight_min: float = DEFAULT_WEIGHT_MIN) -> ClassGraph:
    """
    Builds the undirected weighted class graph.

    Args:
        codes: BinaryCodeSet or a (K, n) 0/1 array
        t: Distance threshold and decay temperature; edges need d_ij < t
        weight_min: Decay base in (0, 1)

    Returns:
        ClassGraph with the normalized adjacency attached
    """
    if not 0.0 < weight_min < 1.0:
        raise ValueError(f"Weight_min must be in (0, 1), got {weight_min}")
    if t < 0:
        raise ValueError(f"threshold t must be >= 0, got {t}")
    features = np.asarray(codes.codes if isinstance(codes, BinaryCodeSet) else codes, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("build_graph", "codes must be (K, n)", features.shape)

    k = features.shape[0]
    distances = pairwise_distances(features)
    weights = np.zeros((k, k))
    edges: List[Tuple[int, int, float, float]] = []
    for i in range(k):
        for j in range(i + 1, k):
            d = float(distances[i, j])
            if d < t:
                w = edge_weight(d, t, weight_min)
                weights[i, j] = weights[j, i] = w
                edges.append((i, j, d, w))

    logger.info("class graph: %d nodes, %d edges (t=%g, Weight_min=%g)", k, len(edges), t, weight_min)
    return ClassGraph(features, distances, weights, tuple(edges), float(t), float(weight_min),
                      normalize_adjacency(weights))


def spectral_radius(adjacency: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvalsh(np.asarray(adjacency, dtype=np.float64)))))


def graph_to_edge_frame(graph: ClassGraph) -> pd.DataFrame:
    return pd.DataFrame(list(graph.edges), columns=["i", "j", "d_ij", "W_ij"])


def save_edge_list(graph: ClassGraph, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    graph_to_edge_frame(graph).to_csv(path, index=False)
    return path


def graph_to_tensors(graph: ClassGraph) -> Dict[str, np.ndarray]:
    return {
        "features": graph.features,
        "weights": graph.weights,
        "adjacency": graph.adjacency,
        "params": np.array([graph.threshold, graph.weight_min]),
    }


def graph_from_tensors(tensors: Dict[str, np.ndarray]) -> ClassGraph:
    """
    Rebuilds a ClassGraph from its persisted tensors. The stored adjacency is
    used as is; distances and the edge list are recovered from codes and weights.
    """
    missing = {"features", "weights", "adjacency", "params"} - set(tensors)
    if missing:
        raise ValueError(f"graph tensors missing {sorted(missing)}")
    features = np.asarray(tensors["features"], dtype=np.float64)
    weights = np.asarray(tensors["weights"], dtype=np.float64)
    adjacency = np.asarray(tensors["adjacency"], dtype=np.float64)
    k = features.shape[0]
    if weights.shape != (k, k) or adjacency.shape != (k, k):
        raise ShapeError("graph_from_tensors", "weights and adjacency must be (K, K)",
                         (weights.shape, adjacency.shape))
    threshold, weight_min = (float(v) for v in np.asarray(tensors["params"]).reshape(-1)[:2])
    distances = pairwise_distances(features)
    edges = tuple((i, j, float(distances[i, j]), float(weights[i, j]))
                  for i in range(k) for j in range(i + 1, k) if weights[i, j] > 0)
    return ClassGraph(features, distances, weights, edges, threshold, weight_min, adjacency)
