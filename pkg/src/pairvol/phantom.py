"""Procedural phantom volumes: synthetic anatomy with exact ground-truth masks.

Each phantom is a soft-tissue ellipsoid body containing two low-intensity
"lungs" that taper smoothly toward both depth ends without vanishing, plus a
few brighter "organ" ellipsoids. Intensities sit at the centers of disjoint
class bands so band thresholding (resegment) recovers the generating mask,
which is what every downstream fidelity metric is scored against.

Class layouts by n_classes:
  2: background 0, lungs 1 (organs rendered but unlabeled)
  3: background 0, lungs 1, organs 2
  8: background 0, lungs 1, organs split across classes 2..7 by intensity
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError
from .volio import DEFAULT_SPACING, MaskVolume, Volume

INTENSITY_AIR = 0.0
INTENSITY_BODY = 0.45
INTENSITY_LUNG = 0.15

# foreground intensity bands, [lo, hi) per class; background is the complement
LUNG_BAND = (0.05, 0.30)
ORGAN_BAND = (0.60, 1.01)
ORGAN_SUBBAND_WIDTH = 0.06  # classes 2..7 tile [0.60, 0.96) when n_classes=8
BODY_FLOOR = 0.30  # intensities at/above this read as solid tissue; below is air or lung


def class_bands(n_classes: int) -> dict[int, tuple[float, float]]:
    """Foreground class -> intensity band. Class 0 is the complement."""
    if n_classes == 2:
        return {1: LUNG_BAND}
    if n_classes == 3:
        return {1: LUNG_BAND, 2: ORGAN_BAND}
    if n_classes == 8:
        bands = {1: LUNG_BAND}
        for c in range(2, 8):
            lo = round(ORGAN_BAND[0] + ORGAN_SUBBAND_WIDTH * (c - 2), 6)
            bands[c] = (lo, round(lo + ORGAN_SUBBAND_WIDTH, 6))
        return bands
    raise ConfigError(f"n_classes must be one of 2, 3, 8; got {n_classes}")


def band_center(band: tuple[float, float]) -> float:
    return 0.5 * (band[0] + min(band[1], 1.0))


@dataclass(frozen=True)
class PhantomSpec:
    h: int = 32
    w: int = 32
    depth_range: tuple[int, int] = (16, 48)
    n_classes: int = 3
    seed: int = 0
    noise_level: float = 0.01

    def __post_init__(self):
        if self.h % 4 != 0 or self.w % 4 != 0:
            raise ConfigError(f"phantom dims must be divisible by 4, got {self.h}x{self.w}")
        if self.depth_range[0] < 8 or self.depth_range[0] > self.depth_range[1]:
            raise ConfigError(f"bad depth_range {self.depth_range} (min >= 8, min <= max)")
        if self.noise_level < 0:
            raise ConfigError(f"noise_level must be >= 0, got {self.noise_level}")
        class_bands(self.n_classes)  # validates membership in {2,3,8}


def _ellipsoid(d: int, h: int, w: int, center, radii) -> np.ndarray:
    """Boolean (d,h,w) mask of a solid axis-aligned ellipsoid."""
    cz, cy, cx = center
    rz, ry, rx = radii
    zz = ((np.arange(d) - cz) / rz) ** 2
    yy = ((np.arange(h) - cy) / ry) ** 2
    xx = ((np.arange(w) - cx) / rx) ** 2
    return zz[:, None, None] + yy[None, :, None] + xx[None, None, :] <= 1.0


_SEXES = ("F", "M")
_HABITUS = ("slender", "average", "broad")


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[Volume, MaskVolume, str]:
    """Deterministic (volume, mask, report) triple for a given spec and index."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    d = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
    h, w = spec.h, spec.w
    bands = class_bands(spec.n_classes)

    vol = np.full((d, h, w), INTENSITY_AIR, dtype=np.float32)
    mask = np.zeros((d, h, w), dtype=np.uint8)

    # body: one large ellipsoid; depth radius exceeds the half-depth so the
    # trunk tapers gently instead of pinching the lungs at the end slices
    body_ry = 0.42 * h * (1.0 + 0.08 * (rng.random() - 0.5))
    body_rx = 0.45 * w * (1.0 + 0.08 * (rng.random() - 0.5))
    body_center = (0.5 * (d - 1), 0.5 * (h - 1), 0.5 * (w - 1))
    body = _ellipsoid(d, h, w, body_center, (1.10 * d, body_ry, body_rx))
    vol[body] = INTENSITY_BODY

    # lungs: two ellipsoids, full-depth with smooth taper (rz > d/2 keeps the
    # cross-section from vanishing at either end); clipped to a shrunken body
    # core so a solid shell always encloses them in-plane
    core = _ellipsoid(d, h, w, body_center, (1.10 * d, body_ry - 1.6, body_rx - 1.6))
    for side in (-1.0, 1.0):
        cx = 0.5 * (w - 1) + side * 0.20 * w * (1.0 + 0.1 * (rng.random() - 0.5))
        cy = 0.52 * (h - 1) * (1.0 + 0.05 * (rng.random() - 0.5))
        ry = 0.26 * h * (1.0 + 0.15 * rng.random())
        rx = 0.14 * w * (1.0 + 0.15 * rng.random())
        lung = _ellipsoid(d, h, w, (0.5 * (d - 1), cy, cx), (0.95 * d, ry, rx))
        lung &= core
        vol[lung] = INTENSITY_LUNG
        mask[lung] = 1

    # organs: 1..3 brighter ellipsoids in the central column, painted last
    organ_classes = [c for c in bands if c >= 2]
    n_organs = int(rng.integers(1, 4))
    organ_kinds = []
    for _ in range(n_organs):
        cz = (0.32 + 0.36 * rng.random()) * (d - 1)
        cy = (0.40 + 0.25 * rng.random()) * (h - 1)
        cx = (0.42 + 0.16 * rng.random()) * (w - 1)
        rz = (0.28 + 0.17 * rng.random()) * d
        ry = (0.13 + 0.08 * rng.random()) * h
        rx = (0.13 + 0.08 * rng.random()) * w
        cls = int(organ_classes[int(rng.integers(0, len(organ_classes)))]) if organ_classes else 0
        organ = _ellipsoid(d, h, w, (cz, cy, cx), (rz, ry, rx))
        organ &= body
        if cls > 0:
            vol[organ] = band_center(bands[cls])
            mask[organ] = cls
            organ_kinds.append(cls)
        else:
            # n_classes=2: organs exist as texture but stay unlabeled; clear
            # any lung label they overwrite so mask and intensity stay in step
            vol[organ] = band_center(ORGAN_BAND)
            mask[organ] = 0

    if spec.noise_level > 0:
        vol = vol + rng.normal(0.0, spec.noise_level, size=vol.shape).astype(np.float32)
    vol = np.clip(vol, 0.0, 1.0)

    age = 18 + int(rng.integers(0, 71))
    sex = _SEXES[int(rng.integers(0, 2))]
    habitus = _HABITUS[min(2, int((body_ry / h - 0.38) / 0.03))]
    noun = "nodule" if n_organs == 1 else "nodules"
    report = (
        f"{age} years old {sex}: {habitus} habitus, lungs patent, "
        f"{n_organs} focal soft-tissue {noun}"
    )
    return (
        Volume(voxels=vol, spacing=DEFAULT_SPACING),
        MaskVolume(labels=mask, n_classes=spec.n_classes, spacing=DEFAULT_SPACING),
        report,
    )


def resegment(vol: Volume, bands: dict[int, tuple[float, float]]) -> MaskVolume:
    """Band-threshold each voxel, then apply one 3x3x3 majority smoothing pass.

    ``bands`` maps foreground classes to [lo, hi) intensity intervals; any
    voxel outside every band is background. Overlapping bands are rejected.

    Bands lying entirely below ``BODY_FLOOR`` describe enclosed low-intensity
    tissue (lungs), which open air matches too; those labels are kept only
    inside the filled body silhouette of each slice so ambient air never
    counts as lung, however noisy.

    The smoothing pass reassigns only voxels with no same-class neighbor in
    their 3x3x3 neighborhood, giving them the neighborhood's majority class
    (ties go to the lowest class). Supported structure is left untouched, so
    an already-banded volume is a fixed point and the pass is idempotent;
    what it removes is exactly the isolated speckle that intensity noise
    produces.
    """
    ordered = sorted(bands.items(), key=lambda kv: kv[1][0])
    for (c1, b1), (c2, b2) in zip(ordered, ordered[1:]):
        if b1[1] > b2[0]:
            raise ConfigError(f"overlapping bands: class {c1} {b1} and class {c2} {b2}")
    n_classes = max(bands) + 1

    v = vol.voxels
    labels = np.zeros(v.shape, dtype=np.uint8)
    for cls, (lo, hi) in bands.items():
        labels[(v >= lo) & (v < hi)] = cls

    low_bands = [cls for cls, (lo, hi) in bands.items() if hi <= BODY_FLOOR]
    if low_bands:
        solid = v >= BODY_FLOOR
        inside = np.stack([ndimage.binary_fill_holes(s) for s in solid])
        outside = ~inside
        for cls in low_bands:
            labels[(labels == cls) & outside] = 0

    # per-class neighbor counts over the 27-neighborhood (self included)
    kernel = np.ones((3, 3, 3), dtype=np.float32)
    counts = np.empty((n_classes,) + v.shape, dtype=np.float32)
    for cls in range(n_classes):
        counts[cls] = ndimage.correlate((labels == cls).astype(np.float32), kernel, mode="nearest")

    own = np.take_along_axis(counts, labels[None].astype(np.int64), axis=0)[0]
    isolated = own <= 1.0  # own count includes the voxel itself
    majority = np.argmax(counts, axis=0).astype(np.uint8)
    smoothed = np.where(isolated, majority, labels).astype(np.uint8)
    return MaskVolume(labels=smoothed, n_classes=n_classes, spacing=vol.spacing)


def split(count: int, train_frac: float, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint, exhaustive, seed-deterministic train/test id partition."""
    if not (0.0 < train_frac < 1.0):
        raise ConfigError(f"train_frac must be in (0,1), got {train_frac}")
    if count < 0:
        raise ContractError(f"count must be >= 0, got {count}")
    perm = np.random.default_rng(seed).permutation(count)
    n_train = int(round(count * train_frac))
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())
