"""Hierarchical point encoder: farthest point sampling, kNN grouping, set
abstraction with max-pooling, and inverse-distance feature propagation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

FP_EPS = 1e-8


@dataclass
class PointCloud:
    coords: np.ndarray                  # N x 3
    labels: np.ndarray | None = None    # N ints

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be N x 3, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def dumps(self) -> str:
        lines = [str(len(self))]
        for i, (x, y, z) in enumerate(self.coords):
            row = f"{float(x)!r} {float(y)!r} {float(z)!r}"
            if self.labels is not None:
                row += f" {int(self.labels[i])}"
            lines.append(row)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PointCloud":
        lines = text.split("\n")
        n = int(lines[0])
        rows = [ln.split() for ln in lines[1:n + 1]]
        coords = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64)
        labels = np.array([int(r[3]) for r in rows], dtype=np.int64) if rows and len(rows[0]) > 3 else None
        return cls(coords.reshape(n, 3), labels)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "PointCloud":
        return cls.loads(Path(path).read_text())


@dataclass
class RegionSet:
    center_indices: np.ndarray
    centers: np.ndarray        # m x 3
    features: Tensor           # C x m
    scale: str


def farthest_point_sample(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min selection seeded at index 0; ties go to the lowest index."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from {n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = 0
    dist = np.sum((coords - coords[0]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))  # argmax returns the first maximum
        chosen[i] = nxt
        dist = np.minimum(dist, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return chosen


def knn(queries: np.ndarray, points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and squared distances of the k nearest points for every query."""
    d2 = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=2)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d2, idx, axis=1)


class SetAbstraction(Module):
    """Shared two-layer MLP over (relative xyz, neighbor features), max-pooled per region."""

    def __init__(self, rng: np.random.Generator, in_channels: int, channels: int):
        self.mlp1 = Linear(rng, 3 + in_channels, channels, std=np.sqrt(2.0 / (3 + in_channels)))
        self.mlp2 = Linear(rng, channels, channels, std=np.sqrt(2.0 / channels))
        self.in_channels = in_channels


def set_abstraction(coords: np.ndarray, feats: Tensor | None, m: int, k_group: int,
                    layer: SetAbstraction, scale: str = "") -> RegionSet:
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k_group > n:
        raise ValueError(f"neighborhood size {k_group} exceeds {n} points")
    centers_idx = farthest_point_sample(coords, m)
    centers = coords[centers_idx]
    nbr, _ = knn(centers, coords, k_group)
    flat = nbr.reshape(-1)
    rel = (coords[flat] - np.repeat(centers, k_group, axis=0)).T      # 3 x (m*k)
    grouped = Tensor(rel)
    if feats is not None:
        grouped = T.concat([grouped, T.take_cols(feats, flat)], axis=0)
    h = T.relu(layer.mlp1(grouped))
    h = T.relu(layer.mlp2(h))
    return RegionSet(centers_idx, centers, T.group_max(h, k_group), scale)


def interpolation_weights(coarse: np.ndarray, fine: np.ndarray, k: int = 3, eps: float = FP_EPS) -> np.ndarray:
    """Matrix W [m x n] with column j holding normalized inverse-squared-distance
    weights of fine point j over its k nearest coarse points."""
    k = min(k, coarse.shape[0])
    idx, d2 = knn(fine, coarse, k)
    w = 1.0 / (d2 + eps)
    w /= w.sum(axis=1, keepdims=True)
    out = np.zeros((coarse.shape[0], fine.shape[0]))
    np.put_along_axis(out.T, idx, w, axis=1)
    return out


def interpolate(coarse: RegionSet | tuple[np.ndarray, Tensor], fine: np.ndarray, eps: float = FP_EPS) -> Tensor:
    centers, feats = (coarse.centers, coarse.features) if isinstance(coarse, RegionSet) else coarse
    return T.matmul(feats, Tensor(interpolation_weights(centers, np.asarray(fine), eps=eps)))


class FeaturePropagation(Module):
    def __init__(self, rng: np.random.Generator, in_channels: int, skip_channels: int, channels: int):
        self.linear = Linear(rng, in_channels + skip_channels, channels,
                             std=np.sqrt(2.0 / (in_channels + skip_channels)))
        self.skip_channels = skip_channels


def feature_propagation(coarse: RegionSet | tuple[np.ndarray, Tensor], fine: np.ndarray,
                        skip: Tensor | None, layer: FeaturePropagation) -> Tensor:
    """Interpolate coarse features onto ``fine`` points, append skip features,
    then a shared linear layer + ReLU."""
    x = interpolate(coarse, fine)
    if skip is not None:
        x = T.concat([x, skip], axis=0)
    return T.relu(layer.linear(x))


class PointBackbone(Module):
    """Two abstraction levels: N points -> small-scale regions -> large-scale regions."""

    def __init__(self, rng: np.random.Generator, channels: int, n_small: int, n_large: int, k_group: int):
        self.sa_small = SetAbstraction(rng, 0, channels)
        self.sa_large = SetAbstraction(rng, channels, channels)
        self.n_small, self.n_large, self.k_group = n_small, n_large, k_group

    def __call__(self, coords: np.ndarray) -> tuple[RegionSet, RegionSet]:
        small = set_abstraction(coords, None, self.n_small, self.k_group, self.sa_small, "small")
        k2 = min(self.k_group, self.n_small)
        large = set_abstraction(small.centers, small.features, self.n_large, k2, self.sa_large, "large")
        return large, small
