"""Shared fixtures: deterministic synthetic images and datasets."""

from __future__ import annotations

import os

import numpy as np

from restorekit.images import Image, PairedSample, add_gaussian_noise, save_image


def synthetic_image(rng: np.random.Generator, height: int, width: int, channels: int = 1) -> Image:
    """A structured synthetic scene: smooth ramp + blocks + stripes.

    The mix of flat, oriented, and textured regions gives patch clustering
    something real to separate.
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    kind = rng.integers(0, 4)
    if kind == 0:
        base = 0.5 * yy + 0.5 * xx
    elif kind == 1:
        base = 0.5 + 0.45 * np.sin(2 * np.pi * (3 * xx + rng.uniform(0, 1)))
    elif kind == 2:
        base = ((yy * 4).astype(int) + (xx * 4).astype(int)) % 2 * 0.8 + 0.1
    else:
        base = np.full((height, width), rng.uniform(0.2, 0.8))
        r0, c0 = rng.integers(0, height // 2), rng.integers(0, width // 2)
        base[r0 : r0 + height // 3, c0 : c0 + width // 3] = rng.uniform(0.0, 1.0)
    base = np.clip(base + rng.normal(0, 0.02, size=base.shape), 0, 1)
    data = np.repeat(base[None, :, :], channels, axis=0)
    return Image(data)


def synthetic_pairs(
    seed: int, count: int, height: int, width: int, channels: int = 1, sigma: float = 25.0
) -> list[PairedSample]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean = synthetic_image(rng, height, width, channels)
        degraded = add_gaussian_noise(clean, sigma, rng)
        pairs.append(PairedSample(f"img{i:03d}", clean, degraded))
    return pairs


def write_dataset(tmpdir: str, pairs: list[PairedSample], synthesize: bool = False) -> str:
    """Write pairs as PNGs plus a manifest; returns the manifest path."""
    lines = []
    for pair in pairs:
        clean_path = os.path.join(tmpdir, f"{pair.sample_id}_clean.png")
        save_image(pair.clean, clean_path)
        if synthesize:
            degraded_path = "-"
        else:
            degraded_path = os.path.join(tmpdir, f"{pair.sample_id}_deg.png")
            save_image(pair.degraded, degraded_path)
        lines.append(f"{pair.sample_id}\t{clean_path}\t{degraded_path}")
    manifest = os.path.join(tmpdir, "manifest.tsv")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest
