"""Synthetic echocardiography-like phantoms with exact ground-truth masks.

Each frame is an ultrasound cone (sector) of mid-grey tissue that fades
with depth, containing an elliptical cavity enclosed by a bright wall.
Multiplicative speckle ``exp(sigma * N(0, 1))`` is applied to the whole
cone and the result clipped to [0, 1]. The mask is the cavity interior.

Randomness comes from numpy's PCG64 generator seeded with the entropy pair
``(seed, index)`` through ``SeedSequence``, so every sample is reproducible
on its own regardless of generation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np

from ..errors import ConfigError
from .dataset import Sample

_MAX_PLACEMENT_TRIES = 200


@dataclass
class PhantomConfig:
    size: Tuple[int, int] = (112, 112)
    lv_area_fraction: Tuple[float, float] = (0.04, 0.20)
    eccentricity: Tuple[float, float] = (1.2, 2.5)
    wall_brightness: Tuple[float, float] = (0.5, 0.9)
    cavity_brightness: Tuple[float, float] = (0.0, 0.15)
    speckle_sigma: Tuple[float, float] = (0.05, 0.2)
    sector_angle: float = 75.0
    seed: int = 0

    def validate(self) -> None:
        h, w = self.size
        if h < 16 or w < 16:
            raise ConfigError(f"phantom size must be at least 16x16, got {h}x{w}")
        for name in ("lv_area_fraction", "eccentricity", "wall_brightness", "cavity_brightness", "speckle_sigma"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{name} range must satisfy lo < hi, got ({lo}, {hi})")
            if lo < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.lv_area_fraction[1] < 0.5:
            raise ConfigError("lv_area_fraction upper bound must be in (0, 0.5)")
        if self.eccentricity[0] < 1:
            raise ConfigError("eccentricity is a major/minor ratio and must be >= 1")
        if self.wall_brightness[1] > 1 or self.cavity_brightness[1] > 1:
            raise ConfigError("brightness ranges must lie within [0, 1]")
        if not 10 <= self.sector_angle <= 170:
            raise ConfigError(f"sector_angle must be in [10, 170] degrees, got {self.sector_angle}")

    def to_dict(self) -> dict:
        return asdict(self)


def sector_mask(size: Tuple[int, int], angle_deg: float) -> np.ndarray:
    """Boolean cone with its apex at the top-centre and radius ~ image height."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ay, ax = 0.0, (w - 1) / 2.0
    dy, dx = yy - ay, xx - ax
    radius = 0.98 * h
    half = math.radians(angle_deg) / 2.0
    ang = np.arctan2(np.abs(dx), dy)
    return (np.hypot(dy, dx) <= radius) & (ang <= half)


def _ellipse(yy, xx, cy, cx, a, b, tilt) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(tilt), math.sin(tilt)
    u = dy * c + dx * s
    v = -dy * s + dx * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_phantom(config: PhantomConfig, index: int) -> Sample:
    config.validate()
    h, w = config.size
    rng = np.random.default_rng([config.seed, index])
    sector = sector_mask((h, w), config.sector_angle)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    area = float(h * w)
    lo, hi = config.lv_area_fraction

    for _ in range(_MAX_PLACEMENT_TRIES):
        frac = rng.uniform(lo, hi)
        ecc = rng.uniform(*config.eccentricity)
        tilt = math.radians(rng.uniform(-25.0, 25.0))
        wall = rng.uniform(0.03, 0.06) * min(h, w)
        cy = rng.uniform(0.35, 0.65) * h
        cx = (w - 1) / 2.0 + rng.uniform(-0.1, 0.1) * w
        minor = math.sqrt(frac * area / (math.pi * ecc))
        major = ecc * minor
        cavity = _ellipse(yy, xx, cy, cx, major, minor, tilt)
        # nudge the axes until the rasterized area lands inside the range
        for _ in range(20):
            measured = cavity.sum() / area
            if lo <= measured <= hi:
                break
            scale = math.sqrt(frac / max(measured, 1.0 / area))
            major, minor = major * scale, minor * scale
            cavity = _ellipse(yy, xx, cy, cx, major, minor, tilt)
        measured = cavity.sum() / area
        outer = _ellipse(yy, xx, cy, cx, major + wall, minor + wall, tilt)
        if lo <= measured <= hi and np.all(sector[outer]):
            break
    else:
        raise RuntimeError(f"could not place a ventricle inside the sector for index {index}")

    depth = np.clip(yy / h, 0.0, 1.0)
    tissue = rng.uniform(0.2, 0.35) * (1.0 - 0.35 * depth)
    image = np.where(sector, tissue, 0.0)
    image[outer & ~cavity] = rng.uniform(*config.wall_brightness)
    image[cavity] = rng.uniform(*config.cavity_brightness)
    sigma = rng.uniform(*config.speckle_sigma)
    image = image * np.exp(sigma * rng.standard_normal((h, w)))
    image = np.clip(np.where(sector, image, 0.0), 0.0, 1.0)

    mask = cavity & sector
    return Sample(
        image=image.astype(np.float32)[None],
        mask=mask.astype(np.float32)[None],
        id=f"phantom_{config.seed}_{index:05d}",
    )


def generate_phantoms(config: PhantomConfig, count: int, start: int = 0) -> list:
    return [generate_phantom(config, i) for i in range(start, start + count)]
