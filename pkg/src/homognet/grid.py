"""Periodic RVE synthesis and geometric transforms.

An RVE image is a square n-by-n grid of phase indicators (0 = matrix,
1 = inclusion) with periodic semantics: all index arithmetic wraps modulo
n in both axes.  Inclusions are rasterized with a pixel-center rule, i.e.
a pixel belongs to an inclusion iff its center lies inside the periodically
replicated shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnsatisfiableSpecError

SHAPE_KINDS = ("circle", "rectangle", "ellipse")

# Retries for a full sample before giving up on the placement loop.
_MAX_SAMPLE_ATTEMPTS = 8
# Placement attempts per inclusion when overlap is forbidden.
_MAX_PLACE_ATTEMPTS = 200


@dataclass(frozen=True)
class RveImage:
    """Binary periodic pixel grid of a two-phase microstructure."""

    pixels: np.ndarray
    resolution: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise ConfigError(f"RVE pixels must be square, got shape {px.shape}")
        if px.shape[0] != self.resolution:
            raise ConfigError("resolution does not match pixel grid")
        if px.size and px.max() > 1:
            raise ConfigError("RVE pixels must be binary {0,1}")
        object.__setattr__(self, "pixels", px)


def as_rve(pixels) -> RveImage:
    px = np.asarray(pixels, dtype=np.uint8)
    return RveImage(pixels=px, resolution=px.shape[0])


@dataclass(frozen=True)
class InclusionSpec:
    """Controls random inclusion placement for one RVE.

    kind may be a single shape name or a tuple of names; each inclusion
    draws its shape uniformly from the tuple (a mixed-shape structure).
    Sizes are characteristic diameters / side lengths in pixels.
    """

    kind: str | tuple[str, ...] = "circle"
    count_range: tuple[int, int] = (1, 64)
    size_range: tuple[float, float] = (8.0, 40.0)
    orientation_range: tuple[float, float] = (0.0, np.pi)
    volume_fraction_range: tuple[float, float] = (0.2, 0.8)
    overlap_allowed: bool = True
    seed: int = 0
    aspect_range: tuple[float, float] = (0.35, 1.0)

    def kinds(self) -> tuple[str, ...]:
        kinds = (self.kind,) if isinstance(self.kind, str) else tuple(self.kind)
        for k in kinds:
            if k not in SHAPE_KINDS:
                raise ConfigError(f"unknown inclusion kind {k!r}")
        return kinds

    def validate(self):
        self.kinds()
        lo, hi = self.size_range
        if not (0 < lo <= hi):
            raise ConfigError("size range must be positive")
        fl, fh = self.volume_fraction_range
        if not (0.0 < fl <= fh < 1.0):
            raise ConfigError("volume fraction interval must lie inside (0,1)")
        cl, ch = self.count_range
        if cl < 0 or ch < cl:
            raise ConfigError("invalid count range")


def _pixel_centers(n):
    # Pixel (i, j) covers [i, i+1) x [j, j+1); its center is at +0.5.
    c = np.arange(n, dtype=float) + 0.5
    return np.meshgrid(c, c, indexing="ij")  # (rows=y, cols=x)


def _wrap_delta(coord, center, n):
    return (coord - center + n / 2.0) % n - n / 2.0


def _raster_inclusion(mask, kind, cx, cy, size_a, size_b, theta, n, ys, xs):
    """Set pixels whose centers fall inside the shape (periodic wrap)."""
    dx = _wrap_delta(xs, cx, n)
    dy = _wrap_delta(ys, cy, n)
    if kind == "circle":
        r = size_a / 2.0
        inside = dx * dx + dy * dy <= r * r
    else:
        ct, st = np.cos(theta), np.sin(theta)
        u = ct * dx + st * dy
        v = -st * dx + ct * dy
        if kind == "rectangle":
            inside = (np.abs(u) <= size_a / 2.0) & (np.abs(v) <= size_b / 2.0)
        else:  # ellipse
            a, b = size_a / 2.0, size_b / 2.0
            inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    mask |= inside


def generate_rve(spec: InclusionSpec, seed: int, resolution: int = 128) -> RveImage:
    """Generate a random periodic RVE; pure function of (spec, seed).

    Inclusions are placed sequentially (uniform centers, sizes and
    orientations from the spec ranges) until the achieved volume fraction
    reaches a target drawn from the spec interval, or the count cap is hit.
    Raises UnsatisfiableSpecError when the placement loop cannot satisfy
    the spec within a bounded number of attempts.
    """
    spec.validate()
    n = int(resolution)
    count_min, count_max = spec.count_range
    if count_max == 0:
        return RveImage(pixels=np.zeros((n, n), dtype=np.uint8), resolution=n)

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0x7FFFFFFF, int(seed) & 0xFFFFFFFFFFFFFFF]))
    ys, xs = _pixel_centers(n)
    kinds = spec.kinds()
    # Loosest bound on the area fraction of a single inclusion.
    one_inclusion = min(1.0, spec.size_range[1] ** 2 / float(n * n))

    for _ in range(_MAX_SAMPLE_ATTEMPTS):
        mask = np.zeros((n, n), dtype=bool)
        target = rng.uniform(*spec.volume_fraction_range)
        placed = 0
        failed = False
        while placed < count_max:
            kind = kinds[rng.integers(len(kinds))] if len(kinds) > 1 else kinds[0]
            size_a = rng.uniform(*spec.size_range)
            size_b = size_a
            if kind == "rectangle":
                size_b = rng.uniform(*spec.size_range)
            elif kind == "ellipse":
                size_b = size_a * rng.uniform(*spec.aspect_range)
            theta = rng.uniform(*spec.orientation_range)

            for _try in range(_MAX_PLACE_ATTEMPTS):
                cx, cy = rng.uniform(0.0, n, size=2)
                candidate = np.zeros((n, n), dtype=bool)
                _raster_inclusion(candidate, kind, cx, cy, size_a, size_b, theta, n, ys, xs)
                if spec.overlap_allowed or not (candidate & mask).any():
                    mask |= candidate
                    placed += 1
                    break
            else:
                failed = True
                break

            if mask.mean() >= target and placed >= count_min:
                break
        vf = mask.mean()
        reached = vf >= target or (placed == count_max and vf >= target - one_inclusion)
        if not failed and placed >= count_min and reached:
            return RveImage(pixels=mask.astype(np.uint8), resolution=n)
    raise UnsatisfiableSpecError(
        f"could not satisfy volume fraction {spec.volume_fraction_range} with "
        f"count range {spec.count_range} after {_MAX_SAMPLE_ATTEMPTS} attempts"
    )


def volume_fraction(rve: RveImage) -> float:
    """Inclusion phase fraction, i.e. the mean of the indicator grid."""
    return float(rve.pixels.mean()) if rve.pixels.size else 0.0


def translate_periodic(rve: RveImage, dx: int, dy: int) -> RveImage:
    """Shift the frame periodically: output(i,j) = input((i-dy) mod n, (j-dx) mod n)."""
    return RveImage(pixels=np.roll(rve.pixels, shift=(dy, dx), axis=(0, 1)), resolution=rve.resolution)


def rotate90(rve: RveImage) -> RveImage:
    """Counter-clockwise quarter turn; four applications give the identity."""
    return RveImage(pixels=np.ascontiguousarray(np.rot90(rve.pixels)), resolution=rve.resolution)


def phase_invert(rve: RveImage) -> RveImage:
    """Swap the two phases (1 - pixels); an involution."""
    return RveImage(pixels=(1 - rve.pixels).astype(np.uint8), resolution=rve.resolution)
