"""Seeded synthetic short-axis phantom generator, preprocessing, and the
augmentation stack.

Each phantom is a nested-ellipse cartoon of a short-axis cardiac slice:
an LV blood pool (class 1) inside a myocardial ring (class 3), with an RV
crescent (class 2) attached on the left. Disease labels steer the geometry
(wall thickness, chamber scale) and vendor labels shift the base tissue
intensities, so metadata genuinely carries information about appearance:
the vendor shift is applied to tissue only and therefore survives the
per-image z-score that removes any whole-image offset. Field strength
scales the additive Gaussian noise (higher field, cleaner image).

Generation is a pure function of (spec.seed, record): the per-case RNG is
seeded by hashing both.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError
from .metadata import (
    ABSENT,
    MetadataRecord,
    MetadataSchema,
    builtin_schema,
    load_schema,
    records_from_csv,
    records_to_csv,
    save_schema,
)

CLASS_NAMES = ("BG", "LV", "RV", "MYO")

# base tissue intensities before the vendor shift
BG_LEVEL = 0.20
TISSUE_LEVELS = {1: 0.85, 2: 0.78, 3: 0.50}  # LV, RV, MYO

DEFAULT_VENDOR_OFFSETS = {"VendorA": 0.25, "VendorB": 0.0, "VendorC": -0.22}
DEFAULT_DISEASE_GEOMETRY = {
    "NOR": {"wall_thickness_px": 3.0, "chamber_scale": 1.0},
    "HCM": {"wall_thickness_px": 6.0, "chamber_scale": 0.85},
    "DLV": {"wall_thickness_px": 2.0, "chamber_scale": 1.30},
    "ARR": {"wall_thickness_px": 4.0, "chamber_scale": 1.15},
}
FIELD_STRENGTHS = (1.5, 3.0)


@dataclass
class PhantomSpec:
    image_size: int = 64
    num_classes: int = 4
    vendor_intensity_offsets: Mapping[str, float] = field(
        default_factory=lambda: dict(DEFAULT_VENDOR_OFFSETS)
    )
    disease_geometry: Mapping[str, Mapping[str, float]] = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_DISEASE_GEOMETRY.items()}
    )
    noise_sigma: float = 0.06
    seed: int = 0
    spacing_mm: tuple[float, float] = (1.25, 1.25)

    def __post_init__(self):
        if self.image_size < 48:
            raise ConfigError(f"image_size must be >= 48, got {self.image_size}")
        if self.num_classes != 4:
            raise ConfigError("the phantom draws exactly 4 classes (BG, LV, RV, MYO)")
        for label, off in self.vendor_intensity_offsets.items():
            if not np.isfinite(off):
                raise ConfigError(f"vendor offset for {label!r} is not finite")
        for label, geo in self.disease_geometry.items():
            if geo["wall_thickness_px"] < 1:
                raise ConfigError(f"wall thickness for {label!r} must be >= 1 px")
            if not (0.5 <= geo["chamber_scale"] <= 1.5):
                raise ConfigError(f"chamber_scale for {label!r} out of range [0.5, 1.5]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if any(s <= 0 for s in self.spacing_mm):
            raise ConfigError("spacing_mm must be positive")


@dataclass
class Sample:
    case_id: str
    image: np.ndarray       # (H, W) float32
    sub_labels: np.ndarray  # (H, W) uint8, values in {0..3}
    record: MetadataRecord
    spacing_mm: tuple[float, float]

    @property
    def super_label(self) -> np.ndarray:
        """Whole-heart binary map: the union of all foreground classes."""
        return self.sub_labels > 0


def _child_seed(seed: int, record: MetadataRecord, exclude: tuple[str, ...] = ()) -> int:
    parts = []
    for key in sorted(record.values):
        if key in exclude:
            continue
        value = record.values[key]
        if value is ABSENT:
            parts.append(f"{key}=<absent>")
        elif isinstance(value, str):
            parts.append(f"{key}={value}")
        else:
            parts.append(f"{key}={float(value):.9g}")
    digest = hashlib.sha256(f"{seed}|{'|'.join(parts)}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _ellipse_mask(size, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def generate_phantom(
    spec: PhantomSpec, record: MetadataRecord, case_id: str = "case"
) -> Sample:
    """Draw one phantom. Deterministic given (spec.seed, record)."""
    vendor = record.values.get("vendor")
    disease = record.values.get("disease")
    if vendor not in spec.vendor_intensity_offsets:
        raise GenerationError(f"vendor {vendor!r} not in spec offsets")
    if disease not in spec.disease_geometry:
        raise GenerationError(f"disease {disease!r} not in spec geometry")
    fs = record.values.get("field_strength", 1.5)
    if fs is ABSENT or not np.isfinite(float(fs)) or float(fs) <= 0:
        raise GenerationError(f"bad field strength {fs!r}")
    fs = float(fs)

    # geometry ignores the vendor, so records differing only in vendor share
    # anatomy and differ purely in appearance; noise draws from the full record
    rng = np.random.default_rng(_child_seed(spec.seed, record, exclude=("vendor",)))
    noise_rng = np.random.default_rng(_child_seed(spec.seed, record))
    size = spec.image_size
    f = size / 64.0
    geo = spec.disease_geometry[disease]

    cy = size / 2.0 + rng.uniform(-2.0, 2.0) * f
    cx = size / 2.0 + 3.0 * f + rng.uniform(-2.0, 2.0) * f
    r_lv = 8.0 * f * geo["chamber_scale"] * (1.0 + rng.uniform(-0.08, 0.08))
    ecc = rng.uniform(0.0, 0.10)
    ry_lv, rx_lv = r_lv * (1.0 + ecc), r_lv * (1.0 - ecc)
    wall = geo["wall_thickness_px"] * f * (1.0 + rng.uniform(-0.1, 0.1))

    ry_rv = r_lv * rng.uniform(1.05, 1.25)
    rx_rv = r_lv * rng.uniform(0.70, 0.90)
    cy_rv = cy + rng.uniform(-2.0, 2.0) * f
    cx_rv = cx - (rx_lv + wall + 0.55 * rx_rv)

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[_ellipse_mask(size, cy_rv, cx_rv, ry_rv, rx_rv)] = 2
    labels[_ellipse_mask(size, cy, cx, ry_lv + wall, rx_lv + wall)] = 3
    labels[_ellipse_mask(size, cy, cx, ry_lv, rx_lv)] = 1

    border = np.zeros((size, size), dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    if np.any(labels[border] > 0):
        raise GenerationError(
            f"phantom geometry for {disease!r} does not fit inside {size}x{size}"
        )
    if not all(np.any(labels == k) for k in (1, 2, 3)):
        raise GenerationError("degenerate phantom: a foreground class vanished")

    offset = float(spec.vendor_intensity_offsets[vendor])
    image = np.full((size, size), BG_LEVEL, dtype=np.float64)
    for cls, level in TISSUE_LEVELS.items():
        image[labels == cls] = level + offset
    sigma_eff = spec.noise_sigma * (1.5 / fs)
    image += noise_rng.normal(0.0, sigma_eff, size=image.shape)

    return Sample(
        case_id=case_id,
        image=image.astype(np.float32),
        sub_labels=labels,
        record=record,
        spacing_mm=tuple(spec.spacing_mm),
    )


# ---------------------------------------------------------------------------
# Dataset generation and disk layout
# ---------------------------------------------------------------------------

def sample_record(rng: np.random.Generator, schema: MetadataSchema) -> MetadataRecord:
    """Draw a uniform random complete record for the synthetic schema."""
    values = {}
    for entity in schema.entities:
        if entity.kind == "categorical":
            values[entity.name] = entity.categories[rng.integers(len(entity.categories))]
        else:
            values[entity.name] = float(FIELD_STRENGTHS[rng.integers(len(FIELD_STRENGTHS))])
    return MetadataRecord(values)


def make_dataset(
    root: str | Path,
    num_cases: int,
    spec: PhantomSpec,
    schema: Optional[MetadataSchema] = None,
    base_seed: int = 0,
) -> dict:
    """Generate a dataset directory: per-case npz arrays, a metadata CSV,
    the schema file, and a manifest. Case i uses generator seed
    base_seed + i, so separate splits stay disjoint by choosing disjoint
    seed ranges."""
    if num_cases < 1:
        raise ConfigError("num_cases must be >= 1")
    schema = schema or builtin_schema("synthetic")
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)

    rec_rng = np.random.default_rng(base_seed ^ 0x9E3779B97F4A7C15)
    rows = []
    cases = []
    for i in range(num_cases):
        case_id = f"case_{base_seed + i:05d}"
        record = sample_record(rec_rng, schema)
        case_spec = replace(spec, seed=base_seed + i)
        sample = generate_phantom(case_spec, record, case_id=case_id)
        np.savez_compressed(
            root / "cases" / f"{case_id}.npz",
            image=sample.image,
            sub_labels=sample.sub_labels,
        )
        rows.append((case_id, record))
        cases.append({"case_id": case_id, "seed": base_seed + i})

    records_to_csv(root / "metadata.csv", rows, schema)
    save_schema(schema, root / "schema.schema")
    manifest = {
        "dataset": schema.dataset_name,
        "schema_fingerprint": schema.fingerprint(),
        "image_size": spec.image_size,
        "spacing_mm": list(spec.spacing_mm),
        "noise_sigma": spec.noise_sigma,
        "vendor_intensity_offsets": dict(spec.vendor_intensity_offsets),
        "base_seed": base_seed,
        "cases": cases,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2)
    return manifest


def make_splits(
    root: str | Path,
    counts: Mapping[str, int],
    spec: PhantomSpec,
    schema: Optional[MetadataSchema] = None,
    base_seed: int = 0,
) -> dict[str, dict]:
    """Generate several splits under one root with disjoint seed ranges."""
    manifests = {}
    offset = base_seed
    for split, n in counts.items():
        manifests[split] = make_dataset(
            Path(root) / split, n, spec, schema, base_seed=offset
        )
        offset += n
    return manifests


def load_dataset(root: str | Path) -> tuple[list[Sample], MetadataSchema, dict]:
    root = Path(root)
    with open(root / "manifest.json", encoding="utf-8") as handle:
        manifest = json.load(handle)
    schema = load_schema(root / "schema.schema")
    if schema.fingerprint() != manifest["schema_fingerprint"]:
        raise ConfigError("schema file does not match manifest fingerprint")
    by_id = dict(records_from_csv(root / "metadata.csv", schema, id_column="case_id"))
    spacing = tuple(manifest["spacing_mm"])
    samples = []
    for case in manifest["cases"]:
        case_id = case["case_id"]
        with np.load(root / "cases" / f"{case_id}.npz") as arrays:
            samples.append(
                Sample(
                    case_id=case_id,
                    image=arrays["image"],
                    sub_labels=arrays["sub_labels"],
                    record=by_id[case_id],
                    spacing_mm=spacing,
                )
            )
    return samples, schema, manifest


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess(
    image: np.ndarray,
    spacing_in: Sequence[float],
    spacing_target: Sequence[float],
) -> np.ndarray:
    """Bilinear resample to the target spacing, then z-score normalize.

    A constant image cannot be normalized; it becomes all zeros with a
    warning instead of dividing by ~0.
    """
    spacing_in = np.asarray(spacing_in, dtype=np.float64)
    spacing_target = np.asarray(spacing_target, dtype=np.float64)
    if np.any(spacing_in <= 0) or np.any(spacing_target <= 0):
        raise ConfigError("spacings must be positive")
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"image must be 2-D, got shape {arr.shape}")
    factors = spacing_in / spacing_target
    if not np.allclose(factors, 1.0):
        arr = ndimage.zoom(arr, factors, order=1)
    std = float(arr.std())
    if std < 1e-8:
        warnings.warn("constant image: z-score undefined, returning zeros", RuntimeWarning)
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - arr.mean()) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    p_rotate: float = 0.25
    max_angle_deg: float = 30.0
    p_shift: float = 0.25
    max_shift_px: float = 4.0
    p_scale: float = 0.25
    scale_range: tuple[float, float] = (0.9, 1.1)
    p_elastic: float = 0.15
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    p_noise: float = 0.15
    noise_sigma: float = 0.04
    p_blur: float = 0.10
    blur_sigma_range: tuple[float, float] = (0.5, 1.0)
    p_bias: float = 0.10
    bias_strength: float = 0.3

    def __post_init__(self):
        for name in (
            "p_rotate", "p_shift", "p_scale", "p_elastic",
            "p_noise", "p_blur", "p_bias",
        ):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError(f"bad scale_range {self.scale_range}")
        if self.max_angle_deg < 0 or self.max_shift_px < 0:
            raise ConfigError("angle and shift ranges must be nonnegative")
        if self.noise_sigma < 0 or self.bias_strength < 0:
            raise ConfigError("intensity ranges must be nonnegative")
        if self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ConfigError("bad elastic parameters")
        if self.blur_sigma_range[0] <= 0 or self.blur_sigma_range[0] > self.blur_sigma_range[1]:
            raise ConfigError(f"bad blur_sigma_range {self.blur_sigma_range}")


def identity_augment_params() -> AugmentParams:
    return AugmentParams(
        p_rotate=0.0, p_shift=0.0, p_scale=0.0, p_elastic=0.0,
        p_noise=0.0, p_blur=0.0, p_bias=0.0,
    )


def rotate_pair(image: np.ndarray, labels: np.ndarray, angle_deg: float):
    """Rotate image (bilinear) and labels (nearest). Multiples of 90 degrees
    are pure index permutations, applied exactly via rot90."""
    if angle_deg % 90.0 == 0.0:
        k = int(angle_deg // 90) % 4
        return np.rot90(image, k).copy(), np.rot90(labels, k).copy()
    image = ndimage.rotate(
        image, angle_deg, reshape=False, order=1, mode="constant", cval=float(image.min())
    )
    labels = ndimage.rotate(labels, angle_deg, reshape=False, order=0, mode="constant", cval=0)
    return image, labels


def shift_pair(image: np.ndarray, labels: np.ndarray, dy: float, dx: float):
    image = ndimage.shift(image, (dy, dx), order=1, mode="constant", cval=float(image.min()))
    labels = ndimage.shift(labels, (dy, dx), order=0, mode="constant", cval=0)
    return image, labels


def scale_pair(image: np.ndarray, labels: np.ndarray, factor: float):
    """Zoom about the image center, keeping the canvas size."""
    size_y, size_x = image.shape
    center = np.array([(size_y - 1) / 2.0, (size_x - 1) / 2.0])
    matrix = np.eye(2) / factor
    offset = center - matrix @ center
    image = ndimage.affine_transform(
        image, matrix, offset=offset, order=1, mode="constant", cval=float(image.min())
    )
    labels = ndimage.affine_transform(
        labels, matrix, offset=offset, order=0, mode="constant", cval=0
    )
    return image, labels


def elastic_pair(
    image: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    sigma: float,
    rng: np.random.Generator,
):
    """Random smooth displacement field; bilinear for the image, nearest for
    the labels so no new label values can appear."""
    shape = image.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma) * alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), sigma) * alpha
    yy, xx = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    coords = np.array([yy + dy, xx + dx])
    image = ndimage.map_coordinates(
        image, coords, order=1, mode="constant", cval=float(image.min())
    )
    labels = ndimage.map_coordinates(labels, coords, order=0, mode="constant", cval=0)
    return image, labels


def bias_field(shape, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative low-order polynomial field exp(poly2(x, y))."""
    yy, xx = np.meshgrid(
        np.linspace(-1, 1, shape[0]), np.linspace(-1, 1, shape[1]), indexing="ij"
    )
    coeffs = rng.uniform(-strength, strength, size=6)
    poly = (
        coeffs[0] * yy + coeffs[1] * xx + coeffs[2] * yy * xx
        + coeffs[3] * yy**2 + coeffs[4] * xx**2 + coeffs[5]
    )
    return np.exp(poly)


def augment(
    image: np.ndarray,
    sub_labels: np.ndarray,
    params: AugmentParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the augmentation stack: geometric transforms hit image and
    labels identically, intensity transforms hit the image only."""
    image = np.asarray(image, dtype=np.float64).copy()
    labels = np.asarray(sub_labels, dtype=np.uint8).copy()

    if rng.random() < params.p_rotate:
        image, labels = rotate_pair(image, labels, rng.uniform(-params.max_angle_deg, params.max_angle_deg))
    if rng.random() < params.p_shift:
        image, labels = shift_pair(
            image, labels,
            rng.uniform(-params.max_shift_px, params.max_shift_px),
            rng.uniform(-params.max_shift_px, params.max_shift_px),
        )
    if rng.random() < params.p_scale:
        image, labels = scale_pair(image, labels, rng.uniform(*params.scale_range))
    if rng.random() < params.p_elastic:
        image, labels = elastic_pair(
            image, labels, params.elastic_alpha, params.elastic_sigma, rng
        )
    if rng.random() < params.p_blur:
        image = ndimage.gaussian_filter(image, rng.uniform(*params.blur_sigma_range))
    if rng.random() < params.p_noise:
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    if rng.random() < params.p_bias:
        image = image * bias_field(image.shape, params.bias_strength, rng)

    return image.astype(np.float32), labels
