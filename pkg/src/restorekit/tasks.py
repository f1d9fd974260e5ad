"""Episodic task generation over the clustered patch universe.

A task is a tiny learning problem: N distinct clusters, K training
patches plus a validation draw from each.  Tasks are sampled fresh per
outer iteration, so the task stream is as rich as the partition allows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterSet


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    clusters_per_task: int = 8  # N
    shots: int = 1  # K: train patches per cluster
    val_shots: int = 1
    allow_replacement: bool = False

    def __post_init__(self):
        if self.clusters_per_task < 1 or self.shots < 1 or self.val_shots < 1:
            raise TaskError("clusters_per_task, shots, and val_shots must be >= 1")


@dataclass(frozen=True)
class Task:
    task_id: str
    cluster_ids: tuple[int, ...]
    train_ids: tuple[str, ...]  # N*K ids, grouped by cluster
    val_ids: tuple[str, ...]  # N*val_shots ids
    used_replacement: bool = False


def sample_task(
    cluster_set: ClusterSet, cfg: TaskConfig, rng: np.random.Generator, task_id: str = "task"
) -> Task:
    """Draw one task: N distinct clusters uniformly, K+val_shots distinct
    patches from each (first K to train, the rest to validation).

    Clusters smaller than K+val_shots are an error unless replacement is
    allowed, in which case the draw is with replacement and the task is
    marked; only then may train and validation overlap.
    """
    n_clusters = len(cluster_set.clusters)
    if cfg.clusters_per_task > n_clusters:
        raise TaskError(
            f"task wants {cfg.clusters_per_task} clusters but only {n_clusters} exist"
        )
    chosen = rng.choice(n_clusters, size=cfg.clusters_per_task, replace=False)
    need = cfg.shots + cfg.val_shots
    train: list[str] = []
    val: list[str] = []
    used_replacement = False
    for j in chosen:
        members = cluster_set.clusters[int(j)]
        if len(members) >= need:
            picks = rng.choice(len(members), size=need, replace=False)
        elif cfg.allow_replacement:
            picks = rng.integers(0, len(members), size=need)
            used_replacement = True
        else:
            raise TaskError(
                f"cluster {int(j)} holds {len(members)} patches; "
                f"{need} needed (set allow_replacement to permit reuse)"
            )
        ids = [members[int(i)] for i in picks]
        train.extend(ids[: cfg.shots])
        val.extend(ids[cfg.shots :])
    return Task(
        task_id=task_id,
        cluster_ids=tuple(int(j) for j in chosen),
        train_ids=tuple(train),
        val_ids=tuple(val),
        used_replacement=used_replacement,
    )


def sample_task_batch(
    cluster_set: ClusterSet,
    cfg: TaskConfig,
    count: int,
    rng: np.random.Generator,
    prefix: str = "task",
) -> list[Task]:
    """R independently sampled tasks; clusters may repeat across tasks."""
    if count < 1:
        raise TaskError("task batch count must be >= 1")
    return [
        sample_task(cluster_set, cfg, rng, task_id=f"{prefix}-{i}") for i in range(count)
    ]


def task_trace_line(iteration: int, task: Task) -> str:
    """One audit-log line per task: reproducible draw record."""
    clusters = " ".join(str(c) for c in task.cluster_ids)
    train = " ".join(task.train_ids)
    val = " ".join(task.val_ids)
    return f"{iteration},{task.task_id},{clusters},{train},{val}"
