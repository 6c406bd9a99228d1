"""Depth-image sim2real augmentation pipeline and real-side preprocessing.

Sim-side stages run in the fixed order clip -> blur -> noise -> dropout ->
optional mixup; the real side only fills missing pixels and clips. Images
read/write as 16-bit binary PGM (P5, maxval 65535, big-endian) with the
metric scale declared in a comment line.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DimensionMismatch(ValueError):
    pass


class ZeroDepth(ValueError):
    pass


@dataclass(frozen=True)
class DepthImage:
    """Row-major grid of metric depth values with a declared maximum depth."""

    values: np.ndarray  # (H, W) meters
    max_depth: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"depth image must be a nonempty 2-D grid, got shape {v.shape}")
        if not (self.max_depth > 0):
            raise ValueError("max_depth must be positive")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth image contains non-finite values")
        if v.min() < 0 or v.max() > self.max_depth:
            raise ValueError("depth values must lie in [0, max_depth]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class AugmentConfig:
    clip_distance: float = 1.0      # task threshold distance d, meters
    noise_sigma: float = 0.005      # meters
    blur_sigma: float = 1.0         # pixels
    dropout_fraction: float = 0.005
    mixup_alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.clip_distance <= 0:
            raise ValueError("clip distance must be positive")
        if not (0.0 <= self.dropout_fraction <= 1.0):
            raise ValueError("dropout fraction must lie in [0, 1]")
        if not (0.0 <= self.mixup_alpha <= 1.0):
            raise ValueError("mixup alpha must lie in [0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise and blur sigmas must be nonnegative")


def clip_depth(img: DepthImage, d: float) -> DepthImage:
    """Replace every value beyond the threshold distance by it; max_depth becomes d."""
    if d <= 0:
        raise ValueError("clip distance must be positive")
    return DepthImage(np.minimum(img.values, d), d)


def fill_missing(img: DepthImage) -> DepthImage:
    """Fill missing pixels (encoded as 0) with the maximum depth."""
    out = img.values.copy()
    out[out == 0.0] = img.max_depth
    return DepthImage(out, img.max_depth)


def add_gaussian_noise(img: DepthImage, sigma: float, seed: int) -> DepthImage:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return DepthImage(img.values.copy(), img.max_depth)
    rng = np.random.default_rng(seed)
    out = img.values + rng.normal(0.0, sigma, size=img.values.shape)
    return DepthImage(np.clip(out, 0.0, img.max_depth), img.max_depth)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: DepthImage, sigma: float) -> DepthImage:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), clamp-to-edge."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0.0:
        return DepthImage(img.values.copy(), img.max_depth)
    k = _gaussian_kernel(sigma)
    out = ndimage.convolve1d(img.values, k, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, k, axis=1, mode="nearest")
    return DepthImage(np.clip(out, 0.0, img.max_depth), img.max_depth)


def dropout_to_max(img: DepthImage, fraction: float, seed: int) -> DepthImage:
    """Set exactly round(fraction * W * H) uniformly chosen pixels to max_depth."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must lie in [0, 1]")
    n_pixels = img.values.size
    n_drop = int(round(fraction * n_pixels))
    if n_drop == 0:
        return DepthImage(img.values.copy(), img.max_depth)
    rng = np.random.default_rng(seed)
    idx = rng.choice(n_pixels, size=n_drop, replace=False)
    out = img.values.copy().reshape(-1)
    out[idx] = img.max_depth
    return DepthImage(out.reshape(img.values.shape), img.max_depth)


def mixup(sim: DepthImage, dataset: DepthImage, alpha: float) -> DepthImage:
    """Per-pixel convex blend alpha*sim + (1-alpha)*dataset."""
    if sim.values.shape != dataset.values.shape:
        raise DimensionMismatch(
            f"mixup shapes differ: {sim.values.shape} vs {dataset.values.shape}")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    out = alpha * sim.values + (1.0 - alpha) * dataset.values
    return DepthImage(out, max(sim.max_depth, dataset.max_depth))


def to_disparity(img: DepthImage) -> DepthImage:
    """Per-pixel reciprocal (1/meters); run fill_missing and clip first."""
    if np.any(img.values == 0.0):
        raise ZeroDepth("disparity undefined for zero depth; fill missing values first")
    out = 1.0 / img.values
    return DepthImage(out, 1.0 / float(img.values.min()))


def sim_pipeline(img: DepthImage, cfg: AugmentConfig,
                 dataset: DepthImage | None = None) -> DepthImage:
    """Full sim-side augmentation: clip, blur, noise, dropout, optional mixup.

    A supplied dataset frame is first normalized through the real-side
    preprocessing (fill + clip to the same threshold) so the blend cannot
    reintroduce mass beyond the clip distance.
    """
    out = clip_depth(img, cfg.clip_distance)
    out = gaussian_blur(out, cfg.blur_sigma)
    out = add_gaussian_noise(out, cfg.noise_sigma, cfg.seed)
    out = dropout_to_max(out, cfg.dropout_fraction, cfg.seed + 1)
    if dataset is not None:
        out = mixup(out, real_pipeline(dataset, cfg.clip_distance), cfg.mixup_alpha)
    return out


def real_pipeline(img: DepthImage, d: float) -> DepthImage:
    """Real-side preprocessing: fill missing values, then clip; no noise added."""
    return clip_depth(fill_missing(img), d)


def histogram(img: DepthImage, bins: int) -> np.ndarray:
    """Proportions over equal-width bins spanning [0, max_depth]; sums to 1."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    counts, _ = np.histogram(img.values, bins=bins, range=(0.0, img.max_depth))
    return counts / img.values.size


def histogram_bin_centers(img: DepthImage, bins: int) -> np.ndarray:
    edges = np.linspace(0.0, img.max_depth, bins + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def kl_divergence(p: np.ndarray, q: np.ndarray, eps: float = 1e-9) -> float:
    """KL(p || q) between two proportion vectors, epsilon-smoothed."""
    p = np.asarray(p, dtype=float) + eps
    q = np.asarray(q, dtype=float) + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q)))


def write_pgm(img: DepthImage, path) -> None:
    """Write as binary P5, maxval 65535, big-endian, with a metric scale comment."""
    scale = img.max_depth / 65535.0
    units = np.round(img.values / scale).astype(">u2")
    header = f"P5\n# scale meters-per-unit {scale!r}\n{img.width} {img.height}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(units.tobytes())


def read_pgm(path) -> DepthImage:
    with open(path, "rb") as fh:
        data = fh.read()
    # Tokenize the header: magic, optional comments, width, height, maxval.
    pos = 0
    tokens: list[bytes] = []
    scale = None
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError("truncated PGM header")
        if data[pos:pos + 1].isspace():
            pos += 1
            continue
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1:end].decode("ascii").split()
            if comment[:2] == ["scale", "meters-per-unit"]:
                scale = float(comment[2])
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"expected binary PGM magic P5, got {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 65535:
        raise ValueError(f"expected maxval 65535, got {maxval}")
    if scale is None:
        raise ValueError("missing '# scale meters-per-unit' comment")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos:pos + width * height * 2]
    if len(raw) != width * height * 2:
        raise ValueError("truncated PGM pixel data")
    units = np.frombuffer(raw, dtype=">u2").reshape(height, width)
    return DepthImage(units.astype(float) * scale, 65535 * scale)
