"""Image loading, noise synthesis, and grid-aligned patch extraction.

Images are stored channel-major as float arrays in [0, 1].  Patches are
square crops taken on a fixed stride grid; the grid is what makes the
per-image patch count well defined for the sampling analysis.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

SUPPORTED_FORMATS = {"PNG", "PPM"}  # Pillow reports PGM/PPM binaries as "PPM"


class ImageError(ValueError):
    """Raised for unreadable files, unsupported formats, or bad geometry."""


@dataclass(frozen=True)
class Image:
    """A normalized raster: data has shape (channels, height, width) in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] not in (1, 3):
            raise ImageError(f"expected (channels, height, width) with 1 or 3 channels, got {d.shape}")
        if d.shape[1] < 1 or d.shape[2] < 1:
            raise ImageError("zero-dimension image")
        if not np.isfinite(d).all():
            raise ImageError("non-finite intensities")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ImageError("intensities outside [0, 1]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class PairedSample:
    """A clean/degraded image pair with matching geometry."""

    sample_id: str
    clean: Image
    degraded: Image

    def __post_init__(self):
        if self.clean.data.shape != self.degraded.data.shape:
            raise ImageError(
                f"pair {self.sample_id!r}: clean {self.clean.data.shape} vs "
                f"degraded {self.degraded.data.shape}"
            )


@dataclass
class Patch:
    """A square crop of a paired sample, with its grid offsets.

    ``clean`` and ``degraded`` are (channels, size, size) blocks.  The
    cluster id is assigned later by the clustering pass.
    """

    source_id: str
    row_offset: int
    col_offset: int
    size: int
    clean: np.ndarray
    degraded: np.ndarray
    cluster_id: Optional[int] = None

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ImageError("clean and degraded blocks differ in shape")

    @property
    def patch_id(self) -> str:
        return f"{self.source_id}:{self.row_offset}:{self.col_offset}"


def load_image(path: str) -> Image:
    """Load a PNG or binary PGM/PPM file as a normalized Image.

    Intensities are scaled by the format's max value (255 for 8-bit,
    65535 for 16-bit grayscale); grayscale stays 1-channel, RGB stays 3.
    """
    try:
        pil = PILImage.open(path)
        pil.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"unreadable file {path!r}: {exc}") from exc
    if pil.format not in SUPPORTED_FORMATS:
        raise ImageError(f"unsupported format {pil.format!r} for {path!r} (PNG/PGM/PPM only)")
    if pil.width == 0 or pil.height == 0:
        raise ImageError(f"zero-dimension image {path!r}")

    if pil.mode == "P":
        pil = pil.convert("RGB")
    if pil.mode == "L":
        arr = np.asarray(pil, dtype=np.float64) / 255.0
        data = arr[None, :, :]
    elif pil.mode == "RGB":
        arr = np.asarray(pil, dtype=np.float64) / 255.0
        data = np.moveaxis(arr, -1, 0)
    elif pil.mode in ("I", "I;16"):
        arr = np.asarray(pil, dtype=np.float64) / 65535.0
        data = arr[None, :, :]
    else:
        raise ImageError(f"unsupported pixel mode {pil.mode!r} for {path!r}")
    return Image(np.clip(data, 0.0, 1.0))


def save_image(image: Image, path: str) -> None:
    """Write an Image as 8-bit PNG/PGM/PPM, chosen by file extension."""
    quantized = np.rint(image.data * 255.0).astype(np.uint8)
    if image.channels == 1:
        pil = PILImage.fromarray(quantized[0], mode="L")
    else:
        pil = PILImage.fromarray(np.moveaxis(quantized, 0, -1), mode="RGB")
    pil.save(path)


def patch_grid_count(height: int, width: int, size: int, stride: int) -> int:
    """Number of size x size patches on a stride grid inside height x width."""
    if stride < 1:
        raise ImageError(f"stride must be >= 1, got {stride}")
    if size < 1:
        raise ImageError(f"patch size must be >= 1, got {size}")
    if size > height or size > width:
        raise ImageError(f"patch size {size} exceeds image {height}x{width}")
    return ((height - size) // stride + 1) * ((width - size) // stride + 1)


def extract_patches(sample: PairedSample, size: int, stride: int) -> list[Patch]:
    """Crop the full stride grid of patches from a pair, row-major.

    The result length always equals patch_grid_count for the pair's
    geometry; offsets are multiples of the stride.
    """
    clean = sample.clean.data
    degraded = sample.degraded.data
    h, w = sample.clean.height, sample.clean.width
    patch_grid_count(h, w, size, stride)  # validates geometry
    patches = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            patches.append(
                Patch(
                    source_id=sample.sample_id,
                    row_offset=r,
                    col_offset=c,
                    size=size,
                    clean=clean[:, r : r + size, c : c + size].copy(),
                    degraded=degraded[:, r : r + size, c : c + size].copy(),
                )
            )
    return patches


def add_gaussian_noise(image: Image, sigma: float, rng: np.random.Generator) -> Image:
    """Add zero-mean Gaussian noise with std ``sigma`` on the 0-255 scale.

    Output is clamped back to [0, 1].  sigma = 0 is the identity map and
    does not consume random numbers.
    """
    if sigma < 0:
        raise ImageError(f"negative sigma {sigma}")
    if sigma == 0:
        return Image(image.data.copy())
    noise = rng.normal(0.0, sigma / 255.0, size=image.data.shape)
    return Image(np.clip(image.data + noise, 0.0, 1.0))


@dataclass(frozen=True)
class ManifestRecord:
    """One dataset row: id, clean path, degraded path ('-' = synthesize noise)."""

    sample_id: str
    clean_path: str
    degraded_path: str


def read_manifest(path: str) -> list[ManifestRecord]:
    """Parse a dataset manifest: `id <tab> clean_path <tab> degraded_path` lines.

    Blank lines and lines starting with '#' are skipped.  Relative paths
    are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ImageError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            sample_id, clean_path, degraded_path = parts
            if sample_id in seen:
                raise ImageError(f"{path}:{lineno}: duplicate sample id {sample_id!r}")
            seen.add(sample_id)
            if clean_path != "-" and not os.path.isabs(clean_path):
                clean_path = os.path.join(base, clean_path)
            if degraded_path != "-" and not os.path.isabs(degraded_path):
                degraded_path = os.path.join(base, degraded_path)
            records.append(ManifestRecord(sample_id, clean_path, degraded_path))
    if not records:
        raise ImageError(f"empty manifest {path!r}")
    return records


def load_pairs(
    records: Sequence[ManifestRecord],
    sigma: float | tuple[float, float] = 25.0,
    rng: Optional[np.random.Generator] = None,
) -> list[PairedSample]:
    """Load manifest records into paired samples.

    Rows whose degraded path is '-' get Gaussian noise synthesized on the
    clean image; ``sigma`` may be a scalar or a (lo, hi) range sampled
    uniformly per image (blind-noise regime).
    """
    pairs = []
    for rec in records:
        clean = load_image(rec.clean_path)
        if rec.degraded_path == "-":
            if rng is None:
                raise ImageError("manifest requests noise synthesis but no rng was provided")
            if isinstance(sigma, (tuple, list)):
                level = float(rng.uniform(sigma[0], sigma[1]))
            else:
                level = float(sigma)
            degraded = add_gaussian_noise(clean, level, rng)
        else:
            degraded = load_image(rec.degraded_path)
        pairs.append(PairedSample(rec.sample_id, clean, degraded))
    return pairs


def extract_dataset_patches(
    pairs: Sequence[PairedSample], size: int, stride: int
) -> tuple[list[Patch], dict[str, list[str]]]:
    """Extract the full patch grid of every pair.

    Returns the flat patch list plus a per-image grouping of patch ids
    (the sampling strategies need the grouping; every image must yield
    the same grid count, which holds when all images share a geometry).
    """
    patches: list[Patch] = []
    by_image: dict[str, list[str]] = {}
    for pair in pairs:
        ps = extract_patches(pair, size, stride)
        patches.extend(ps)
        by_image[pair.sample_id] = [p.patch_id for p in ps]
    return patches, by_image
