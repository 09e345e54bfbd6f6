"""Affine augmentation: rotation, zoom, shear, and horizontal flip.

All four operations carry equal weight. The default `compose` mode applies
every operation per sample, each parameter drawn independently from its
range; `pick_one` applies exactly one operation chosen uniformly. Randomness
comes from per-sample streams keyed by (seed, epoch, index), so augmentation
is reproducible regardless of batch composition or execution order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .image import ImageU8, _round_u8
from .rng import RngState


@dataclass
class AffineSpec:
    """Output-to-source pixel mapping plus an optional final mirror."""

    matrix: np.ndarray  # 2x3, maps output (x, y) to source coordinates
    flip_h: bool = False
    fill: str = "zero"  # zero | edge

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (2, 3):
            raise ShapeError("affine matrix must be 2x3")
        det = self.matrix[0, 0] * self.matrix[1, 1] - self.matrix[0, 1] * self.matrix[1, 0]
        if abs(det) <= 1e-9:
            raise ShapeError(f"affine matrix is singular (det={det})")
        if self.fill not in ("zero", "edge"):
            raise ShapeError(f"unknown fill policy {self.fill!r}")


@dataclass
class AugmentConfig:
    rotation_deg: float = 15.0        # symmetric range, degrees
    zoom: tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 10.0           # symmetric range, degrees
    flip_prob: float = 0.5
    mode: str = "compose"             # compose | pick_one
    # Fixed equal weights over (rotation, flip, shear, zoom).
    op_weights: tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        if len(set(self.op_weights)) != 1:
            raise ConfigError("op_weights must be all equal")
        if self.rotation_deg < 0 or self.shear_deg < 0:
            raise ConfigError("angle ranges must be non-negative")
        if not (self.zoom[0] <= 1.0 <= self.zoom[1]):
            raise ConfigError("zoom range must contain the identity factor 1.0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        if self.mode not in ("compose", "pick_one"):
            raise ConfigError(f"unknown augment mode {self.mode!r}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_deg=0.0, zoom=(1.0, 1.0), shear_deg=0.0, flip_prob=0.0)


def build_affine(rotation_deg: float, zoom: float, shear_deg: float, flip_h: bool,
                 width: int, height: int, fill: str = "zero") -> AffineSpec:
    """Compose rotation * shear * zoom about the image center into one spec."""
    theta = math.radians(rotation_deg)
    phi = math.radians(shear_deg)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    shear = np.array([[1.0, math.tan(phi)], [0.0, 1.0]])
    zoom_m = np.array([[zoom, 0.0], [0.0, zoom]])
    fwd = rot @ shear @ zoom_m
    # Output pixel -> source: invert the forward map, keeping the center fixed.
    det = fwd[0, 0] * fwd[1, 1] - fwd[0, 1] * fwd[1, 0]
    inv = np.array([[fwd[1, 1], -fwd[0, 1]], [-fwd[1, 0], fwd[0, 0]]]) / det
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    center = np.array([cx, cy])
    trans = center - inv @ center
    matrix = np.hstack([inv, trans[:, None]])
    return AffineSpec(matrix=matrix, flip_h=flip_h, fill=fill)


def sample_augmentation(cfg: AugmentConfig, rng: RngState,
                        width: int, height: int) -> tuple[AffineSpec, RngState]:
    """Draw one augmentation. Draw order is fixed (rotation, zoom, shear,
    flip, then the pick_one selector) so streams stay reproducible across
    modes.
    """
    u, rng = rng.uniforms(5)
    rotation = (u[0] * 2.0 - 1.0) * cfg.rotation_deg
    zoom = cfg.zoom[0] + u[1] * (cfg.zoom[1] - cfg.zoom[0])
    shear = (u[2] * 2.0 - 1.0) * cfg.shear_deg
    flip = u[3] < cfg.flip_prob
    if cfg.mode == "pick_one":
        op = int(u[4] * 4.0)  # 0 rotation, 1 flip, 2 shear, 3 zoom
        rotation = rotation if op == 0 else 0.0
        flip = flip if op == 1 else False
        shear = shear if op == 2 else 0.0
        zoom = zoom if op == 3 else 1.0
    spec = build_affine(rotation, zoom, shear, flip, width, height)
    return spec, rng


def affine_transform(img: ImageU8, spec: AffineSpec) -> ImageU8:
    """Inverse-mapping bilinear resample; flip_h mirrors columns afterwards.

    Dimensions are preserved and output stays within [0, 255].
    """
    planes = np.ascontiguousarray(img.pixels.transpose(2, 0, 1).astype(np.float64))
    warped = kernels.warp_bilinear(
        planes, np.ascontiguousarray(spec.matrix), img.height, img.width,
        spec.fill == "zero",
    )
    pixels = _round_u8(warped).transpose(1, 2, 0)
    if spec.flip_h:
        pixels = pixels[:, ::-1, :]
    return ImageU8(img.height, img.width, img.channels, img.order, pixels)
