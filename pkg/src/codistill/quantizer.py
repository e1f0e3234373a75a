"""k-means codebooks over pooled feature frames and nearest-centroid code assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import load_tensor, save_tensor
from .config import parse_flat
from .errors import DataError, DimensionError, FormatError, InsufficientDataError


@dataclass
class Codebook:
    centroids: np.ndarray  # K x D
    inertia_history: list[float] = field(default_factory=list)
    source: str = ""
    # training-set assignment under the final centroids (not persisted)
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def D(self) -> int:
        return int(self.centroids.shape[1])


@dataclass
class CodeSequence:
    codes: np.ndarray
    K: int
    frame_rate: float | None = None

    def __len__(self) -> int:
        return len(self.codes)


def _check_frames(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected an N x D frame matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("frames contain non-finite values")
    return x


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """N x K squared Euclidean distances, clamped at zero."""
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ centroids.T) + (centroids * centroids).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _nearest(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    labels = np.argmin(squared_distances(x, centroids), axis=1)
    diff = x - centroids[labels]
    return labels, (diff * diff).sum(1)


def kmeans_plusplus(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    N = len(x)
    chosen = [int(rng.integers(N))]
    closest = ((x - x[chosen[0]]) ** 2).sum(1)
    for _ in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            free = np.setdiff1d(np.arange(N), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        closest = np.minimum(closest, ((x - x[idx]) ** 2).sum(1))
    return x[chosen].copy()


def kmeans_fit(
    frames,
    K: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    stride: int = 1,
    source: str = "",
) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations.

    Stops after ``max_iters`` assignments or once the relative inertia
    improvement drops below ``tol``.  A cluster that loses all its points is
    re-seeded at the frame currently farthest from its centroid.
    """
    x = _check_frames(frames)[::stride]
    N = len(x)
    if K < 1:
        raise InsufficientDataError(f"K must be >= 1, got {K}")
    if N < K:
        raise InsufficientDataError(f"{N} frames cannot support K={K} clusters")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, K, rng)
    history: list[float] = []
    for it in range(max_iters):
        labels, d2 = _nearest(x, centroids)
        inertia_now = float(d2.sum())
        history.append(inertia_now)
        if it > 0 and history[-2] - inertia_now <= tol * history[-2]:
            break
        if it == max_iters - 1:
            break
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = centroids.copy()
        live = counts > 0
        new[live] = sums[live] / counts[live, None]
        if not live.all():
            order = np.argsort(-d2, kind="stable")
            taken = 0
            for k in np.flatnonzero(~live):
                new[k] = x[order[taken]]
                taken += 1
        centroids = new
    return Codebook(centroids, history, source, labels)


def assign_codes(codebook: Codebook, frames, frame_rate: float | None = None) -> CodeSequence:
    """Nearest centroid per frame (ties go to the lowest index)."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.D:
        raise DimensionError(f"frames of shape {x.shape} do not match codebook dimension {codebook.D}")
    labels, _ = _nearest(x, codebook.centroids)
    return CodeSequence(labels.astype(np.int64), codebook.K, frame_rate)


def inertia(codebook: Codebook, frames) -> float:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.D:
        raise DimensionError(f"frames of shape {x.shape} do not match codebook dimension {codebook.D}")
    _, d2 = _nearest(x, codebook.centroids)
    return float(d2.sum())


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    """``path`` gets the TNSR centroids; ``path`` + ``.txt`` the K/D/source header."""
    path = Path(path)
    save_tensor(path, codebook.centroids)
    Path(str(path) + ".txt").write_text(f"K = {codebook.K}\nD = {codebook.D}\nsource = {codebook.source}\n")


def load_codebook(path: str | Path) -> Codebook:
    path = Path(path)
    centroids = load_tensor(path)
    header = parse_flat(Path(str(path) + ".txt").read_text(), source=str(path) + ".txt")
    if int(header["K"]) != centroids.shape[0] or int(header["D"]) != centroids.shape[1]:
        raise FormatError(f"{path}: sidecar header disagrees with tensor shape {centroids.shape}")
    return Codebook(centroids, source=header.get("source", ""))
