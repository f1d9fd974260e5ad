"""Streaming clustering: distances, Algorithm invariants, manifest round trip."""

import numpy as np
import pytest

from restorekit.clustering import (
    ClusterConfig,
    ClusteringError,
    ClusterSet,
    calibrate_threshold,
    cluster_patches,
    cluster_stats,
    load_cluster_manifest,
    patch_distance,
    save_cluster_manifest,
)
from restorekit.images import Patch


def make_patch(block, source="src", row=0, col=0):
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    return Patch(
        source_id=source,
        row_offset=row,
        col_offset=col,
        size=arr.shape[-1],
        clean=arr,
        degraded=arr.copy(),
    )


def blob_patches(rng, count, level, size=4, jitter=0.01, source="blob"):
    patches = []
    for i in range(count):
        block = np.clip(level + rng.normal(0, jitter, size=(1, size, size)), 0, 1)
        patches.append(make_patch(block, source=source, row=i, col=0))
    return patches


class TestPatchDistance:
    def test_identical_blocks_zero(self):
        a = np.random.default_rng(0).uniform(size=(1, 4, 4))
        for metric in ("euclidean", "kl_histogram"):
            cfg = ClusterConfig(metric=metric)
            assert patch_distance(a, a.copy(), cfg) == 0.0

    def test_two_pixel_euclidean(self):
        a = np.array([[[0.0, 0.0]]])
        b = np.array([[[1.0, 1.0]]])
        cfg = ClusterConfig(metric="euclidean")
        assert patch_distance(a, b, cfg) == pytest.approx(np.sqrt(2.0), abs=1e-12)

    @pytest.mark.parametrize("metric", ["euclidean", "kl_histogram", "weighted_sum"])
    def test_symmetry(self, metric):
        rng = np.random.default_rng(1)
        cfg = ClusterConfig(metric=metric, w_euclidean=0.7, w_kl=0.3)
        for _ in range(100):
            a = rng.uniform(size=(1, 4, 4))
            b = rng.uniform(size=(1, 4, 4))
            assert patch_distance(a, b, cfg) == pytest.approx(patch_distance(b, a, cfg), rel=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        cfg = ClusterConfig(metric="weighted_sum", w_euclidean=0.5, w_kl=0.5)
        for _ in range(50):
            a, b = rng.uniform(size=(2, 1, 4, 4))
            assert patch_distance(a, b, cfg) >= 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ClusteringError):
            patch_distance(np.zeros((1, 4, 4)), np.zeros((1, 5, 5)), ClusterConfig())


def brute_force_assignment(patches, centers, cfg):
    """Oracle: nearest stored center per patch, ties to lowest index."""
    labels = []
    for p in patches:
        dists = [patch_distance(p.clean.astype(np.float64), c, cfg) for c in centers]
        labels.append(int(np.argmin(dists)))
    return labels


class TestClusterPatches:
    def test_single_patch(self):
        p = make_patch(np.full((1, 4, 4), 0.3))
        cs = cluster_patches([p], ClusterConfig(max_clusters=4, threshold=0.5), np.random.default_rng(0))
        assert len(cs.clusters) == 1 and cs.clusters[0] == [p.patch_id]
        np.testing.assert_array_equal(cs.centers[0], p.clean)
        assert p.cluster_id == 0

    def test_huge_threshold_one_cluster(self):
        rng = np.random.default_rng(3)
        patches = blob_patches(rng, 20, 0.2) + blob_patches(rng, 20, 0.9, source="b2")
        cs = cluster_patches(patches, ClusterConfig(max_clusters=8, threshold=1e9), np.random.default_rng(0))
        assert len(cs.clusters) == 1
        assert cs.total == 40

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(4)
        lo = blob_patches(rng, 30, 0.1, source="lo")
        hi = blob_patches(rng, 30, 0.9, source="hi")
        patches = []
        for a, b in zip(lo, hi):
            patches.extend([a, b])
        cfg = ClusterConfig(max_clusters=2, threshold=0.8)
        cs = cluster_patches(patches, cfg, np.random.default_rng(5))
        assert len(cs.clusters) == 2
        labels = brute_force_assignment(patches, cs.centers, cfg)
        for patch, label in zip(patches, labels):
            assert patch.cluster_id == label
        # groups must be pure: all lo ids in one cluster, all hi ids in the other
        lo_ids = frozenset(p.patch_id for p in lo)
        hi_ids = frozenset(p.patch_id for p in hi)
        assert {frozenset(c) for c in cs.clusters} == {lo_ids, hi_ids}

    def test_partition_and_capacity(self):
        rng = np.random.default_rng(6)
        patches = [
            make_patch(rng.uniform(size=(1, 4, 4)), source="u", row=i) for i in range(300)
        ]
        cs = cluster_patches(patches, ClusterConfig(max_clusters=10, threshold=0.3), np.random.default_rng(7))
        cs.validate()
        assert len(cs.clusters) <= 10
        all_ids = sorted(pid for c in cs.clusters for pid in c)
        assert all_ids == sorted(p.patch_id for p in patches)
        assert sum(cs.sizes) == 300

    def test_center_recurrence_replay(self):
        """Replay the assignment stream; stored centers must match the
        momentum recurrence exactly while capacity is unreached, and freeze
        once it is reached."""
        rng = np.random.default_rng(8)
        patches = [make_patch(rng.uniform(size=(1, 3, 3)), source="r", row=i) for i in range(200)]
        cfg = ClusterConfig(max_clusters=6, threshold=0.45, momentum=0.05)
        cs = cluster_patches(patches, cfg, np.random.default_rng(9))

        by_id = {p.patch_id: p for p in patches}
        replay_centers = {}
        opened = 0
        frozen = {}
        # replay in the original visiting order: seed patch first, then input order
        seed_id = cs.clusters[0][0]
        stream = [by_id[seed_id]] + [p for p in patches if p.patch_id != seed_id]
        for patch in stream:
            cid = patch.cluster_id
            block = patch.clean.astype(np.float64)
            if cid not in replay_centers:
                replay_centers[cid] = block.copy()
                opened += 1
                if opened == cfg.max_clusters:
                    frozen = {k: v.copy() for k, v in replay_centers.items()}
            else:
                if opened < cfg.max_clusters:
                    replay_centers[cid] = (1 - cfg.momentum) * replay_centers[cid] + cfg.momentum * block
        assert opened == len(cs.clusters)
        for cid, center in enumerate(cs.centers):
            np.testing.assert_allclose(center, replay_centers[cid], atol=1e-9)
        if opened == cfg.max_clusters:
            for cid in frozen:
                np.testing.assert_allclose(cs.centers[cid], frozen[cid], atol=0)

    def test_determinism(self):
        rng = np.random.default_rng(10)
        patches_a = [make_patch(rng.uniform(size=(1, 4, 4)), source="d", row=i) for i in range(80)]
        patches_b = [make_patch(p.clean.copy(), source="d", row=p.row_offset) for p in patches_a]
        cfg = ClusterConfig(max_clusters=5, threshold=0.4)
        cs_a = cluster_patches(patches_a, cfg, np.random.default_rng(11))
        cs_b = cluster_patches(patches_b, cfg, np.random.default_rng(11))
        assert cs_a.clusters == cs_b.clusters
        for ca, cb in zip(cs_a.centers, cs_b.centers):
            np.testing.assert_array_equal(ca, cb)

    def test_literal_center_update_differs(self):
        rng = np.random.default_rng(12)
        patches = [make_patch(rng.uniform(size=(1, 3, 3)), source="l", row=i) for i in range(100)]
        # threshold above the typical pairwise distance so plenty of
        # pre-capacity assignments (and center updates) happen
        base = dict(max_clusters=6, threshold=1.25)
        cs_fixed = cluster_patches(list(patches), ClusterConfig(**base), np.random.default_rng(13))
        for p in patches:
            p.cluster_id = None
        cs_literal = cluster_patches(
            list(patches), ClusterConfig(**base, literal_center_update=True), np.random.default_rng(13)
        )
        same = cs_fixed.clusters == cs_literal.clusters and all(
            np.array_equal(a, b) for a, b in zip(cs_fixed.centers, cs_literal.centers)
        )
        assert not same

    def test_empty_input_rejected(self):
        with pytest.raises(ClusteringError):
            cluster_patches([], ClusterConfig(), np.random.default_rng(0))

    def test_threshold_calibration(self):
        rng = np.random.default_rng(14)
        patches = blob_patches(rng, 50, 0.2) + blob_patches(rng, 50, 0.8, source="c2")
        cfg = ClusterConfig(max_clusters=4, threshold=None)
        t = calibrate_threshold(patches, cfg, np.random.default_rng(15))
        assert t > 0
        cs = cluster_patches(patches, cfg, np.random.default_rng(15))
        assert cs.threshold > 0


class TestClusterStats:
    def _set_with_sizes(self, sizes, cap):
        clusters = []
        centers = []
        k = 0
        for s in sizes:
            clusters.append([f"p{k + i}" for i in range(s)])
            centers.append(np.full((1, 2, 2), 0.5))
            k += s
        return ClusterSet(
            clusters=clusters,
            centers=centers,
            max_clusters=cap,
            threshold=0.5,
            momentum=0.05,
            metric="euclidean",
            histogram_bins=32,
            patch_size=2,
            channels=1,
        )

    def test_rare_count(self):
        stats = cluster_stats(self._set_with_sizes([1, 2, 3], cap=3))
        assert stats.mean_size == pytest.approx(2.0)
        assert stats.rare_count == 1  # only the singleton is below 6/3 = 2
        assert (stats.min_size, stats.max_size) == (1, 3)

    def test_single_cluster(self):
        stats = cluster_stats(self._set_with_sizes([7], cap=1))
        assert stats.min_size == stats.max_size == stats.total_patches == 7

    def test_rare_bounded_by_count(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            sizes = rng.integers(1, 30, size=rng.integers(1, 10)).tolist()
            stats = cluster_stats(self._set_with_sizes(sizes, cap=len(sizes)))
            assert stats.rare_count <= stats.cluster_count


class TestManifestRoundTrip:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(17)
        patches = [make_patch(rng.uniform(size=(1, 4, 4)), source="m", row=i) for i in range(60)]
        cs = cluster_patches(patches, ClusterConfig(max_clusters=5, threshold=0.4), np.random.default_rng(18))
        path = str(tmp_path / "clusters.txt")
        save_cluster_manifest(cs, path, seed=18, config_hash="abc123")
        again = load_cluster_manifest(path)
        assert again.clusters == cs.clusters
        for a, b in zip(again.centers, cs.centers):
            np.testing.assert_array_equal(a, b)
        assert again.threshold == cs.threshold

    def test_duplicate_patch_id_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(
            "restorekit-clusters v1\n"
            "max_clusters 2\nthreshold 0.5\nmomentum 0.05\nmetric euclidean\n"
            "histogram_bins 32\npatch_size 1\nchannels 1\n"
            "assignments\np1\t0\np1\t0\n"
            "centers\n0\t0.5\n"
        )
        with pytest.raises(ClusteringError, match="partition violation"):
            load_cluster_manifest(str(path))

    def test_manifest_larger_than_run_config_accepted(self, tmp_path):
        # the manifest carries its own capacity; a smaller run config is irrelevant
        rng = np.random.default_rng(19)
        patches = [make_patch(rng.uniform(size=(1, 3, 3)), source="x", row=i) for i in range(40)]
        cs = cluster_patches(patches, ClusterConfig(max_clusters=12, threshold=0.2), np.random.default_rng(20))
        path = str(tmp_path / "wide.txt")
        save_cluster_manifest(cs, path)
        again = load_cluster_manifest(path)
        assert again.max_clusters == 12
        assert len(again.clusters) == len(cs.clusters)

    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "nope.txt"
        path.write_text("not a manifest\n")
        with pytest.raises(ClusteringError, match="malformed"):
            load_cluster_manifest(str(path))
