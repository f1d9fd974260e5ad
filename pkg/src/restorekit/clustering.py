"""Streaming patch clustering with momentum-updated centers.

Patches are assigned one at a time: a patch joins the nearest existing
cluster when its distance beats the threshold (or when the cluster budget
is exhausted), otherwise it seeds a new cluster.  Centers track their
cluster by an exponential moving average until the budget is reached,
after which they freeze.  Clustering looks only at clean blocks; degraded
blocks ride along under the same label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .images import Patch

METRICS = ("euclidean", "kl_histogram", "weighted_sum")


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterConfig:
    max_clusters: int = 32
    threshold: Optional[float] = None  # None -> calibrated from the data
    momentum: float = 0.05
    metric: str = "euclidean"
    w_euclidean: float = 1.0
    w_kl: float = 0.0
    histogram_bins: int = 32
    epsilon: float = 1e-8
    # reproduce the as-printed center update (newest cluster instead of the
    # matched one); off by default, kept for comparison runs
    literal_center_update: bool = False
    calibration_sample: int = 1000
    calibration_percentile: float = 10.0

    def __post_init__(self):
        if self.max_clusters < 1:
            raise ClusteringError(f"max_clusters must be >= 1, got {self.max_clusters}")
        if self.threshold is not None and self.threshold <= 0:
            raise ClusteringError(f"threshold must be > 0, got {self.threshold}")
        if not (0.0 < self.momentum < 1.0):
            raise ClusteringError(f"momentum must be in (0, 1), got {self.momentum}")
        if self.metric not in METRICS:
            raise ClusteringError(f"unknown metric {self.metric!r}")
        if self.histogram_bins < 2:
            raise ClusteringError("histogram_bins must be >= 2")


@dataclass
class ClusterSet:
    """Partition of patch ids into clusters plus per-cluster running centers."""

    clusters: list[list[str]]
    centers: list[np.ndarray]
    max_clusters: int
    threshold: float
    momentum: float
    metric: str
    histogram_bins: int
    patch_size: int
    channels: int

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    @property
    def total(self) -> int:
        return sum(self.sizes)

    def validate(self) -> None:
        if len(self.clusters) > self.max_clusters:
            raise ClusteringError(
                f"{len(self.clusters)} clusters exceed capacity {self.max_clusters}"
            )
        if len(self.clusters) != len(self.centers):
            raise ClusteringError("cluster/center count mismatch")
        seen: set[str] = set()
        for members in self.clusters:
            if not members:
                raise ClusteringError("empty cluster")
            for pid in members:
                if pid in seen:
                    raise ClusteringError(f"partition violation: {pid!r} appears twice")
                seen.add(pid)
        for center in self.centers:
            if not np.isfinite(center).all() or center.min() < 0 or center.max() > 1:
                raise ClusteringError("center outside [0, 1]")


def _histogram(block: np.ndarray, bins: int, epsilon: float) -> np.ndarray:
    counts, _ = np.histogram(block, bins=bins, range=(0.0, 1.0))
    probs = counts.astype(np.float64) + epsilon
    return probs / probs.sum()


def patch_distance(a: np.ndarray, b: np.ndarray, cfg: ClusterConfig) -> float:
    """Distance between two intensity blocks under the configured metric.

    Euclidean is the flat L2 distance; the KL term is the symmetrized
    divergence between epsilon-smoothed intensity histograms (channels
    pooled).  weighted_sum mixes the two with the configured weights.
    """
    if a.shape != b.shape:
        raise ClusteringError(f"shape mismatch {a.shape} vs {b.shape}")
    if cfg.metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if cfg.metric == "kl_histogram":
        return _sym_kl(a, b, cfg)
    return cfg.w_euclidean * float(np.linalg.norm(a - b)) + cfg.w_kl * _sym_kl(a, b, cfg)


def _sym_kl(a: np.ndarray, b: np.ndarray, cfg: ClusterConfig) -> float:
    p = _histogram(a, cfg.histogram_bins, cfg.epsilon)
    q = _histogram(b, cfg.histogram_bins, cfg.epsilon)
    kl_pq = float(np.sum(p * np.log(p / q)))
    kl_qp = float(np.sum(q * np.log(q / p)))
    return 0.5 * (kl_pq + kl_qp)


def _distances_to_centers(block: np.ndarray, centers: np.ndarray, cfg: ClusterConfig) -> np.ndarray:
    """Vectorized patch-to-centers distances; ties resolve to lowest index."""
    flat = block.reshape(-1)
    euc = np.linalg.norm(centers.reshape(len(centers), -1) - flat[None, :], axis=1)
    if cfg.metric == "euclidean":
        return euc
    kl = np.array([_sym_kl(block, c, cfg) for c in centers])
    if cfg.metric == "kl_histogram":
        return kl
    return cfg.w_euclidean * euc + cfg.w_kl * kl


def calibrate_threshold(
    patches: Sequence[Patch], cfg: ClusterConfig, rng: np.random.Generator
) -> float:
    """Pick a threshold from the data: a low percentile of pairwise distances
    over a bounded random subsample."""
    n = min(len(patches), cfg.calibration_sample)
    idx = rng.choice(len(patches), size=n, replace=False)
    blocks = [patches[i].clean for i in idx]
    if n < 2:
        return 1.0
    if cfg.metric == "euclidean":
        flat = np.stack([b.reshape(-1) for b in blocks])
        sq = np.sum(flat**2, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T, 0.0)
        dists = np.sqrt(d2[np.triu_indices(n, k=1)])
    else:
        dists = np.array(
            [
                patch_distance(blocks[i], blocks[j], cfg)
                for i in range(n)
                for j in range(i + 1, n)
            ]
        )
    value = float(np.percentile(dists, cfg.calibration_percentile))
    if value <= 0:
        positive = dists[dists > 0]
        value = float(positive.min()) if positive.size else 1.0
    return value


def cluster_patches(
    patches: Sequence[Patch], cfg: ClusterConfig, rng: np.random.Generator
) -> ClusterSet:
    """Stream all patches into at most ``max_clusters`` clusters.

    The seed cluster starts from one randomly chosen patch; the remaining
    patches are visited in input order.  Every patch gets its cluster_id
    set in place.
    """
    if len(patches) == 0:
        raise ClusteringError("no patches to cluster")
    threshold = cfg.threshold if cfg.threshold is not None else calibrate_threshold(patches, cfg, rng)

    seed_pos = int(rng.integers(len(patches)))
    order = [seed_pos] + [i for i in range(len(patches)) if i != seed_pos]

    first = patches[order[0]]
    clusters: list[list[str]] = [[first.patch_id]]
    centers: list[np.ndarray] = [first.clean.astype(np.float64).copy()]
    first.cluster_id = 0
    cap = cfg.max_clusters

    for pos in order[1:]:
        patch = patches[pos]
        block = patch.clean.astype(np.float64)
        dists = _distances_to_centers(block, np.stack(centers), cfg)
        j = int(np.argmin(dists))
        if dists[j] < threshold or len(clusters) >= cap:
            clusters[j].append(patch.patch_id)
            patch.cluster_id = j
            if len(clusters) < cap:
                target = len(clusters) - 1 if cfg.literal_center_update else j
                centers[target] = (1.0 - cfg.momentum) * centers[target] + cfg.momentum * block
        else:
            clusters.append([patch.patch_id])
            centers.append(block.copy())
            patch.cluster_id = len(clusters) - 1

    result = ClusterSet(
        clusters=clusters,
        centers=centers,
        max_clusters=cap,
        threshold=threshold,
        momentum=cfg.momentum,
        metric=cfg.metric,
        histogram_bins=cfg.histogram_bins,
        patch_size=first.size,
        channels=first.clean.shape[0],
    )
    result.validate()
    return result


@dataclass(frozen=True)
class ClusterStats:
    cluster_count: int
    total_patches: int
    min_size: int
    mean_size: float
    max_size: int
    rare_count: int  # clusters smaller than the average patches-per-cluster


def cluster_stats(cluster_set: ClusterSet) -> ClusterStats:
    sizes = cluster_set.sizes
    total = cluster_set.total
    rare_cut = total / cluster_set.max_clusters
    return ClusterStats(
        cluster_count=len(sizes),
        total_patches=total,
        min_size=min(sizes),
        mean_size=total / len(sizes),
        max_size=max(sizes),
        rare_count=sum(1 for s in sizes if s < rare_cut),
    )


_HEADER_KEYS = ("max_clusters", "threshold", "momentum", "metric", "histogram_bins", "patch_size", "channels")


def save_cluster_manifest(
    cluster_set: ClusterSet, path: str, seed: Optional[int] = None, config_hash: Optional[str] = None
) -> None:
    """Write the partition and centers as a self-describing text manifest.

    Center values use repr-precision decimals so a reload reproduces
    them exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("restorekit-clusters v1\n")
        if seed is not None:
            fh.write(f"seed {seed}\n")
        if config_hash is not None:
            fh.write(f"config_hash {config_hash}\n")
        fh.write(f"max_clusters {cluster_set.max_clusters}\n")
        fh.write(f"threshold {cluster_set.threshold!r}\n")
        fh.write(f"momentum {cluster_set.momentum!r}\n")
        fh.write(f"metric {cluster_set.metric}\n")
        fh.write(f"histogram_bins {cluster_set.histogram_bins}\n")
        fh.write(f"patch_size {cluster_set.patch_size}\n")
        fh.write(f"channels {cluster_set.channels}\n")
        fh.write("assignments\n")
        for cid, members in enumerate(cluster_set.clusters):
            for pid in members:
                fh.write(f"{pid}\t{cid}\n")
        fh.write("centers\n")
        for cid, center in enumerate(cluster_set.centers):
            values = " ".join(repr(float(v)) for v in center.reshape(-1))
            fh.write(f"{cid}\t{values}\n")


def load_cluster_manifest(path: str) -> ClusterSet:
    """Reload a cluster manifest; the file carries its own configuration."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("restorekit-clusters"):
        raise ClusteringError(f"malformed manifest {path!r}: missing header")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i] != "assignments":
        key, _, value = lines[i].partition(" ")
        header[key] = value
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in header]
    if i >= len(lines) or missing:
        raise ClusteringError(f"malformed manifest {path!r}: missing {missing or 'assignments'}")
    i += 1

    assignments: list[tuple[str, int]] = []
    while i < len(lines) and lines[i] != "centers":
        pid, _, cid = lines[i].partition("\t")
        if not cid:
            raise ClusteringError(f"malformed manifest {path!r}: bad assignment line {lines[i]!r}")
        assignments.append((pid, int(cid)))
        i += 1
    if i >= len(lines):
        raise ClusteringError(f"malformed manifest {path!r}: missing centers section")
    i += 1

    patch_size = int(header["patch_size"])
    channels = int(header["channels"])
    centers: list[np.ndarray] = []
    while i < len(lines):
        if lines[i].strip():
            _, _, values = lines[i].partition("\t")
            flat = np.array([float(v) for v in values.split()], dtype=np.float64)
            centers.append(flat.reshape(channels, patch_size, patch_size))
        i += 1

    n_clusters = len(centers)
    clusters: list[list[str]] = [[] for _ in range(n_clusters)]
    seen: set[str] = set()
    for pid, cid in assignments:
        if pid in seen:
            raise ClusteringError(f"partition violation: duplicate patch id {pid!r}")
        seen.add(pid)
        if not (0 <= cid < n_clusters):
            raise ClusteringError(f"assignment references unknown cluster {cid}")
        clusters[cid].append(pid)

    result = ClusterSet(
        clusters=clusters,
        centers=centers,
        max_clusters=int(header["max_clusters"]),
        threshold=float(header["threshold"]),
        momentum=float(header["momentum"]),
        metric=header["metric"],
        histogram_bins=int(header["histogram_bins"]),
        patch_size=patch_size,
        channels=channels,
    )
    result.validate()
    return result
