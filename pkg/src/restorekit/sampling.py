"""Batch-sampling strategies and their utilization analysis.

Three strategies feed training batches:

* RIS — pick B distinct images, crop one grid patch from each.
* RPS — shuffle the whole patch universe once per epoch, consume in order.
* RCS — pick B distinct clusters, draw one patch (with replacement) from each.

For each strategy the probability that a designated patch is still unused
after k iterations has a closed form; ``simulate_unuse`` estimates the same
quantity by Monte Carlo so the closed forms can be checked independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .clustering import ClusterSet

STRATEGIES = ("ris", "rps", "rcs")


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    """Counts that fix a strategy's utilization curve.

    ``images`` and ``patches_per_image`` describe the grid universe
    (RIS/RPS); ``cluster_sizes`` describes the clustered universe (RCS).
    """

    strategy: str
    batch_size: int
    images: int = 0
    patches_per_image: int = 0
    cluster_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplingError(f"unknown strategy {self.strategy!r}")
        if self.batch_size < 1:
            raise SamplingError("batch_size must be positive")
        if self.strategy in ("ris", "rps"):
            if self.images < 1 or self.patches_per_image < 1:
                raise SamplingError(f"{self.strategy} needs positive image and patch counts")
            if self.strategy == "ris" and self.batch_size > self.images:
                raise SamplingError(
                    f"ris requires batch_size <= images ({self.batch_size} > {self.images})"
                )
        else:
            if not self.cluster_sizes:
                raise SamplingError("rcs needs cluster_sizes")
            if any(s < 1 for s in self.cluster_sizes):
                raise SamplingError("cluster sizes must be positive")
            if self.batch_size > len(self.cluster_sizes):
                raise SamplingError(
                    f"rcs requires batch_size <= cluster count "
                    f"({self.batch_size} > {len(self.cluster_sizes)})"
                )

    @property
    def cluster_count(self) -> int:
        return len(self.cluster_sizes)

    @property
    def total_patches(self) -> int:
        if self.strategy == "rcs":
            return int(sum(self.cluster_sizes))
        return self.images * self.patches_per_image

    @property
    def iterations_per_epoch(self) -> int:
        """Epoch length in iterations; short final batches are dropped."""
        if self.strategy == "ris":
            return self.images // self.batch_size
        return self.total_patches // self.batch_size

    @classmethod
    def from_clusters(cls, cluster_set: ClusterSet, batch_size: int) -> "SamplerSpec":
        return cls(
            strategy="rcs",
            batch_size=batch_size,
            cluster_sizes=tuple(cluster_set.sizes),
        )


# ---------------------------------------------------------------------------
# samplers over a concrete patch universe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchUniverse:
    """Patch ids grouped by source image, all images sharing one grid count."""

    by_image: tuple[tuple[str, ...], ...]

    @classmethod
    def from_groups(cls, groups: dict[str, list[str]] | Sequence[Sequence[str]]) -> "PatchUniverse":
        if isinstance(groups, dict):
            rows = tuple(tuple(v) for _, v in sorted(groups.items()))
        else:
            rows = tuple(tuple(v) for v in groups)
        if not rows or any(not r for r in rows):
            raise SamplingError("empty patch universe")
        if len({len(r) for r in rows}) != 1:
            raise SamplingError("all images must contribute the same grid count")
        return cls(rows)

    @property
    def images(self) -> int:
        return len(self.by_image)

    @property
    def patches_per_image(self) -> int:
        return len(self.by_image[0])

    @property
    def all_ids(self) -> list[str]:
        return [pid for row in self.by_image for pid in row]


def ris_sample(universe: PatchUniverse, batch_size: int, rng: np.random.Generator) -> list[str]:
    """One batch: B distinct images uniformly, one grid patch from each."""
    if batch_size > universe.images:
        raise SamplingError(
            f"ris batch {batch_size} exceeds image count {universe.images}"
        )
    image_idx = rng.choice(universe.images, size=batch_size, replace=False)
    return [
        universe.by_image[i][int(rng.integers(universe.patches_per_image))]
        for i in image_idx
    ]


class RpsEpoch:
    """One epoch of patch sampling without replacement: a seeded shuffle
    consumed B ids at a time."""

    def __init__(self, universe: PatchUniverse, batch_size: int, rng: np.random.Generator):
        self.batch_size = batch_size
        ids = universe.all_ids
        self._order = [ids[i] for i in rng.permutation(len(ids))]
        self._cursor = 0

    @property
    def iterations(self) -> int:
        return len(self._order) // self.batch_size

    @property
    def consumed(self) -> int:
        return self._cursor

    def next_batch(self) -> list[str]:
        if self._cursor + self.batch_size > len(self._order):
            raise SamplingError("epoch exhausted")
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch


def rps_sample(epoch: RpsEpoch) -> list[str]:
    return epoch.next_batch()


def rcs_sample(cluster_set: ClusterSet, batch_size: int, rng: np.random.Generator) -> list[str]:
    """One batch: B distinct clusters uniformly, one member (with
    replacement across batches) from each."""
    n_clusters = len(cluster_set.clusters)
    if batch_size > n_clusters:
        raise SamplingError(f"rcs batch {batch_size} exceeds cluster count {n_clusters}")
    chosen = rng.choice(n_clusters, size=batch_size, replace=False)
    return [
        cluster_set.clusters[j][int(rng.integers(len(cluster_set.clusters[j])))]
        for j in chosen
    ]


# ---------------------------------------------------------------------------
# utilization: closed forms and Monte Carlo
# ---------------------------------------------------------------------------


def p_unuse_analytic(spec: SamplerSpec, k: int, cluster_index: int = 0) -> float:
    """Probability a designated patch is still unused after k iterations.

    RIS: (1 - B/(m P))^k.  RPS: 1 - k B/(m P).  RCS, patch in cluster j:
    (1 - B/(C N_j))^k.  ``k`` must not exceed the strategy's epoch length.
    """
    if k < 0:
        raise SamplingError("k must be >= 0")
    if k > spec.iterations_per_epoch:
        raise SamplingError(
            f"k={k} exceeds epoch length {spec.iterations_per_epoch} for {spec.strategy}"
        )
    b = spec.batch_size
    if spec.strategy == "ris":
        return (1.0 - b / (spec.images * spec.patches_per_image)) ** k
    if spec.strategy == "rps":
        return 1.0 - k * b / spec.total_patches
    if not (0 <= cluster_index < spec.cluster_count):
        raise SamplingError(f"cluster_index {cluster_index} out of range")
    return (1.0 - b / (spec.cluster_count * spec.cluster_sizes[cluster_index])) ** k


def ris_unuse_floor(patches_per_image: int) -> float:
    """The end-of-epoch utilization floor for image-level sampling."""
    return math.exp(-1.0 / patches_per_image)


@dataclass(frozen=True)
class UnuseEstimate:
    estimate: float
    stderr: float
    trials: int


def simulate_unuse(
    spec: SamplerSpec,
    k: int,
    trials: int,
    rng: np.random.Generator,
    cluster_index: int = 0,
    chunk: int = 1024,
) -> UnuseEstimate:
    """Monte-Carlo estimate of the unused probability after k iterations.

    RIS/RCS trials simulate the designated patch's membership in each
    iteration's draw: the B-subset is realized by ranking i.i.d. uniforms
    (a uniform random subset), the within-group pick by a uniform integer.
    RPS is deterministic: one epoch is consumed and the exact unused
    fraction is returned with zero standard error.
    """
    if trials < 1:
        raise SamplingError("trials must be >= 1")
    if k > spec.iterations_per_epoch:
        raise SamplingError(
            f"k={k} exceeds epoch length {spec.iterations_per_epoch} for {spec.strategy}"
        )

    if spec.strategy == "rps":
        total = spec.total_patches
        unused = total - k * spec.batch_size
        return UnuseEstimate(estimate=unused / total, stderr=0.0, trials=trials)

    if spec.strategy == "ris":
        groups, group_size = spec.images, spec.patches_per_image
    else:
        groups, group_size = spec.cluster_count, int(spec.cluster_sizes[cluster_index])

    b = spec.batch_size
    unused_count = 0
    remaining = trials
    while remaining > 0:
        n = min(chunk, remaining)
        # rank of the designated group's uniform among all groups, per (trial, iteration)
        u = rng.random((n, k, groups))
        in_subset = (u[:, :, 1:] < u[:, :, :1]).sum(axis=2) < b
        picks = rng.integers(0, group_size, size=(n, k))
        hit = in_subset & (picks == 0)
        unused_count += int((~hit.any(axis=1)).sum())
        remaining -= n

    p_hat = unused_count / trials
    stderr = math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / trials)
    return UnuseEstimate(estimate=p_hat, stderr=stderr, trials=trials)


@dataclass(frozen=True)
class UtilizationRow:
    strategy: str
    k: int
    analytic: float
    estimate: float
    stderr: float
    trials: int
    seed: int


def utilization_report(
    specs: Sequence[SamplerSpec],
    k_grid: Sequence[int],
    trials: int,
    seed: int,
) -> list[UtilizationRow]:
    """Analytic vs simulated unused probabilities per strategy per k.

    RIS rows carry an extra pseudo-row at the end of the table with the
    e^(-1/P) floor (k = epoch length); RCS specs contribute one row group
    per distinct cluster size, labeled ``rcs[N=s]``.
    """
    rows: list[UtilizationRow] = []
    rng = np.random.default_rng(seed)
    for spec in specs:
        if spec.strategy == "rcs":
            distinct = sorted(set(spec.cluster_sizes))
            targets = [(f"rcs[N={s}]", spec.cluster_sizes.index(s)) for s in distinct]
        else:
            targets = [(spec.strategy, 0)]
        for label, cidx in targets:
            for k in k_grid:
                if k > spec.iterations_per_epoch:
                    continue
                analytic = p_unuse_analytic(spec, k, cluster_index=cidx)
                est = simulate_unuse(spec, k, trials, rng, cluster_index=cidx)
                rows.append(
                    UtilizationRow(label, int(k), analytic, est.estimate, est.stderr, est.trials, seed)
                )
        if spec.strategy == "ris":
            floor = ris_unuse_floor(spec.patches_per_image)
            rows.append(
                UtilizationRow("ris_floor", spec.iterations_per_epoch, floor, floor, 0.0, 0, seed)
            )
    return rows


def report_to_csv(rows: Sequence[UtilizationRow], seed: int, config_hash: str) -> str:
    lines = [f"# seed={seed} config_hash={config_hash}", "strategy,k,analytic,estimate,stderr,trials,seed"]
    for r in rows:
        lines.append(
            f"{r.strategy},{r.k},{r.analytic:.9g},{r.estimate:.9g},{r.stderr:.6g},{r.trials},{r.seed}"
        )
    return "\n".join(lines) + "\n"
