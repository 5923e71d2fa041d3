"""Synthetic cardiac phantom dataset: generation, scribble synthesis, augmentation, disk I/O.

Each sample is a noisy 2D short-axis-style image containing a bright LV disk,
a surrounding myocardial annulus, and an adjacent RV crescent, together with a
dense ground-truth mask and a sparse scribble annotation derived from the mask.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

from .common import IGNORE_LABEL, ConfigError, DataError, InputError

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

# Class layout of the 4-class phantom (3- and 2-class variants drop the tail).
CLASS_NAMES = {0: "BG", 1: "RV", 2: "MYO", 3: "LV"}

# Rendering constants: per-class mean intensity, boundary blur, additive noise.
# Chosen so that class interiors are separable but boundaries are genuinely
# ambiguous; scribble-only training should underfit the unlabeled regions.
_BASE_INTENSITY = {0: 0.22, 1: 0.56, 2: 0.38, 3: 0.82}
_INTENSITY_JITTER = 0.05
_BLUR_SIGMA = 1.0
_NOISE_SIGMA = (0.06, 0.09)
_BIAS_AMPLITUDE = 0.12


# --------------------------------------------------------------------------- #
# Types
# --------------------------------------------------------------------------- #
@dataclass
class DatasetSpec:
    """Describes one synthetic dataset: geometry, class count, split sizes, seed."""

    num_classes: int = 4
    image_size: int = 64
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50
    seed: int = 0
    scribble_cap: float = 0.2  # upper bound on annotated pixel fraction

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > 4:
            raise ConfigError("phantom layout defines at most 4 classes (BG, RV, MYO, LV)")
        if self.image_size % 16 != 0 or self.image_size <= 0:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split counts must be non-negative")
        if not 0.0 < self.scribble_cap <= 1.0:
            raise ConfigError(f"scribble_cap must be in (0, 1], got {self.scribble_cap}")

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of_index(self, index: int) -> tuple[str, int]:
        """Map a global sample index to (split name, local index)."""
        if index < 0 or index >= self.total:
            raise InputError(f"sample index {index} outside [0, {self.total})")
        if index < self.n_train:
            return "train", index
        if index < self.n_train + self.n_val:
            return "val", index - self.n_train
        return "test", index - self.n_train - self.n_val


@dataclass
class PhantomSample:
    """One 2D sample: image in [0,1], dense class mask, sparse scribble map."""

    image: np.ndarray      # float32 (H, W)
    dense_mask: np.ndarray  # uint8 (H, W), values in {0..K-1}
    scribble: np.ndarray    # uint8 (H, W), values in {0..K-1} + IGNORE_LABEL
    id: str

    def labeled_fraction(self) -> float:
        return float(np.mean(self.scribble != IGNORE_LABEL))


def validate_sample(sample: PhantomSample, num_classes: int) -> None:
    """Raise InputError if the scribble/dense consistency invariants are broken."""
    if sample.image.shape != sample.dense_mask.shape or sample.image.shape != sample.scribble.shape:
        raise InputError(f"sample {sample.id}: image/mask/scribble shapes differ")
    if sample.dense_mask.max(initial=0) >= num_classes:
        raise InputError(f"sample {sample.id}: dense mask label out of range")
    labeled = sample.scribble != IGNORE_LABEL
    if not labeled.any():
        raise InputError(f"sample {sample.id}: scribble has no annotated pixels")
    if np.any(sample.scribble[labeled] != sample.dense_mask[labeled]):
        raise InputError(f"sample {sample.id}: scribble label disagrees with dense mask")


# --------------------------------------------------------------------------- #
# Geometry and rendering
# --------------------------------------------------------------------------- #
def _draw_phantom_mask(size: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Paint the class layout: RV crescent, then MYO disk, then LV disk on top.

    Painting order guarantees the MYO annulus is a complete ring enclosing the
    LV disk, and the RV remainder hugs the outer MYO boundary as a crescent.
    """
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[:size, :size]

    cy = size * (0.5 + rng.uniform(-0.02, 0.02))
    cx = size * (0.5 + rng.uniform(-0.02, 0.02))
    r_lv = size * rng.uniform(0.12, 0.16)
    r_myo = r_lv + size * rng.uniform(0.06, 0.09)
    d_center = (yy - cy) ** 2 + (xx - cx) ** 2

    if num_classes == 4:
        r_rv = size * rng.uniform(0.11, 0.14)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        rv_cy = cy + (r_myo + 0.45 * r_rv) * np.sin(phi)
        rv_cx = cx + (r_myo + 0.45 * r_rv) * np.cos(phi)
        d_rv = (yy - rv_cy) ** 2 + (xx - rv_cx) ** 2
        mask[d_rv <= r_rv**2] = 1
        mask[d_center <= r_myo**2] = 2
        mask[d_center <= r_lv**2] = 3
    elif num_classes == 3:
        mask[d_center <= r_myo**2] = 1
        mask[d_center <= r_lv**2] = 2
    else:
        mask[d_center <= r_myo**2] = 1

    return mask


def _render_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Map classes to noisy intensities with boundary blur and a smooth bias field."""
    size = mask.shape[0]
    levels = np.zeros(256, dtype=np.float64)
    for cls, base in _BASE_INTENSITY.items():
        levels[cls] = base + rng.uniform(-_INTENSITY_JITTER, _INTENSITY_JITTER)
    img = levels[mask]

    img = ndimage.gaussian_filter(img, sigma=_BLUR_SIGMA)

    # Low-order bias field (linear ramp in a random direction).
    theta = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(0.0, _BIAS_AMPLITUDE)
    yy, xx = np.mgrid[:size, :size]
    ramp = (np.cos(theta) * (xx / size - 0.5) + np.sin(theta) * (yy / size - 0.5))
    img = img + amp * ramp

    sigma = rng.uniform(*_NOISE_SIGMA)
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------- #
# Scribble synthesis
# --------------------------------------------------------------------------- #
_NEIGHBORS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _skeleton_walk(region: np.ndarray, rng: np.random.Generator) -> list[tuple[int, int]]:
    """A connected random walk along the region skeleton, covering part of it.

    Falls back to the most interior pixel when the skeleton is empty (tiny
    regions), so any region is guaranteed at least one stroke pixel.
    """
    skel = skeletonize(region)
    pts = [tuple(p) for p in np.argwhere(skel)]
    if not pts:
        dist = ndimage.distance_transform_edt(region)
        return [tuple(np.unravel_index(int(np.argmax(dist)), region.shape))]

    on_skel = set(pts)
    start = pts[int(rng.integers(len(pts)))]
    target = max(3, int(len(pts) * rng.uniform(0.18, 0.40)))

    visited: list[tuple[int, int]] = [start]
    seen = {start}
    cur = start
    while len(visited) < min(target, len(pts)):
        cand = [(cur[0] + dy, cur[1] + dx) for dy, dx in _NEIGHBORS8]
        cand = [p for p in cand if p in on_skel and p not in seen]
        if not cand:
            # Dead end: restart from a visited pixel that still has open neighbors.
            frontier = [
                v for v in visited
                if any((v[0] + dy, v[1] + dx) in on_skel and (v[0] + dy, v[1] + dx) not in seen
                       for dy, dx in _NEIGHBORS8)
            ]
            if not frontier:
                break
            cur = frontier[int(rng.integers(len(frontier)))]
            continue
        cur = cand[int(rng.integers(len(cand)))]
        visited.append(cur)
        seen.add(cur)
    return visited


def _jitter_stroke(points: list[tuple[int, int]], region: np.ndarray,
                   rng: np.random.Generator) -> list[tuple[int, int]]:
    """Offset the stroke with a slow random walk, clipped to stay inside the region."""
    h, w = region.shape
    out = []
    oy = ox = 0
    for y, x in points:
        if rng.random() < 0.3:
            oy = int(np.clip(oy + rng.integers(-1, 2), -2, 2))
            ox = int(np.clip(ox + rng.integers(-1, 2), -2, 2))
        jy, jx = y + oy, x + ox
        if 0 <= jy < h and 0 <= jx < w and region[jy, jx]:
            out.append((jy, jx))
        else:
            out.append((y, x))
    return out


def synthesize_scribbles(dense_mask: np.ndarray, rng: np.random.Generator,
                         coverage_cap: float = 0.2) -> np.ndarray:
    """Build a sparse scribble map from a dense mask.

    Every class present in the mask gets one jittered skeleton stroke lying
    strictly inside its region; all other pixels are IGNORE_LABEL. The total
    annotated fraction is capped at `coverage_cap` by random subsampling.
    """
    scrib = np.full(dense_mask.shape, IGNORE_LABEL, dtype=np.uint8)
    for cls in np.unique(dense_mask):
        region = dense_mask == cls
        stroke = _jitter_stroke(_skeleton_walk(region, rng), region, rng)
        for y, x in stroke:
            scrib[y, x] = cls

    budget = int(coverage_cap * dense_mask.size)
    labeled = np.argwhere(scrib != IGNORE_LABEL)
    if len(labeled) > budget:
        drop = rng.permutation(len(labeled))[budget:]
        for y, x in labeled[drop]:
            scrib[y, x] = IGNORE_LABEL
    return scrib


# --------------------------------------------------------------------------- #
# Sample generation
# --------------------------------------------------------------------------- #
def generate_phantom(spec: DatasetSpec, index: int) -> PhantomSample:
    """Deterministically generate the sample at a global index.

    The RNG substream is derived from (spec.seed, index) only, so generation is
    reproducible and embarrassingly parallel across indices.
    """
    spec.validate()
    split, local = spec.split_of_index(index)
    rng = np.random.default_rng([spec.seed, index])
    mask = _draw_phantom_mask(spec.image_size, spec.num_classes, rng)
    image = _render_image(mask, rng)
    scribble = synthesize_scribbles(mask, rng, coverage_cap=spec.scribble_cap)
    return PhantomSample(image=image, dense_mask=mask, scribble=scribble,
                         id=f"{split}_{local:04d}")


def generate_dataset(spec: DatasetSpec) -> dict[str, list[PhantomSample]]:
    spec.validate()
    out: dict[str, list[PhantomSample]] = {s: [] for s in SPLITS}
    for index in range(spec.total):
        split, _ = spec.split_of_index(index)
        out[split].append(generate_phantom(spec, index))
    return out


# --------------------------------------------------------------------------- #
# Augmentation
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class SpatialTransform:
    quarter_turns: int = 0      # multiples of 90 degrees, counter-clockwise
    flip_h: bool = False
    flip_v: bool = False
    angle: float | None = None  # optional continuous rotation (degrees), applied first


def sample_transform(rng: np.random.Generator, continuous: bool = False) -> SpatialTransform:
    angle = float(rng.uniform(-30.0, 30.0)) if continuous and rng.random() < 0.5 else None
    return SpatialTransform(
        quarter_turns=int(rng.integers(4)),
        flip_h=bool(rng.integers(2)),
        flip_v=bool(rng.integers(2)),
        angle=angle,
    )


def _rotate_continuous(sample: PhantomSample, angle: float) -> PhantomSample:
    # Bilinear for the image, nearest-neighbor for label maps so they stay categorical.
    image = ndimage.rotate(sample.image, angle, reshape=False, order=1,
                           mode="constant", cval=float(sample.image.mean()))
    dense = ndimage.rotate(sample.dense_mask, angle, reshape=False, order=0,
                           mode="constant", cval=0)
    scrib = ndimage.rotate(sample.scribble, angle, reshape=False, order=0,
                           mode="constant", cval=IGNORE_LABEL)
    return PhantomSample(image=image.astype(np.float32), dense_mask=dense.astype(np.uint8),
                         scribble=scrib.astype(np.uint8), id=sample.id)


def apply_transform(sample: PhantomSample, t: SpatialTransform) -> PhantomSample:
    """Apply the same spatial transform jointly to image, dense mask, and scribble."""
    if t.angle is not None:
        sample = _rotate_continuous(sample, t.angle)
    arrays = [sample.image, sample.dense_mask, sample.scribble]
    if t.quarter_turns % 4:
        arrays = [np.rot90(a, t.quarter_turns) for a in arrays]
    if t.flip_h:
        arrays = [np.flip(a, axis=1) for a in arrays]
    if t.flip_v:
        arrays = [np.flip(a, axis=0) for a in arrays]
    image, dense, scrib = (np.ascontiguousarray(a) for a in arrays)
    return PhantomSample(image=image, dense_mask=dense, scribble=scrib, id=sample.id)


def augment(sample: PhantomSample, rng: np.random.Generator,
            continuous: bool = False) -> PhantomSample:
    return apply_transform(sample, sample_transform(rng, continuous=continuous))


# --------------------------------------------------------------------------- #
# Disk format
# --------------------------------------------------------------------------- #
def _sample_paths(root: Path, sample_id: str) -> tuple[Path, Path, Path]:
    return (root / f"{sample_id}.img.f32",
            root / f"{sample_id}.mask.u8",
            root / f"{sample_id}.scrib.u8")


def save_dataset(directory: str | Path, samples: dict[str, list[PhantomSample]],
                 spec: DatasetSpec) -> dict:
    """Write raw little-endian arrays plus a manifest; returns the manifest dict."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_classes": spec.num_classes,
        "height": spec.image_size,
        "width": spec.image_size,
        "seed": spec.seed,
        "scribble_cap": spec.scribble_cap,
        "dtypes": {"image": "f32", "mask": "u8", "scribble": "u8"},
        "splits": {s: [smp.id for smp in samples.get(s, [])] for s in SPLITS},
    }
    for split_samples in samples.values():
        for smp in split_samples:
            img_p, mask_p, scrib_p = _sample_paths(root, smp.id)
            img_p.write_bytes(np.ascontiguousarray(smp.image, dtype="<f4").tobytes())
            mask_p.write_bytes(np.ascontiguousarray(smp.dense_mask, dtype=np.uint8).tobytes())
            scrib_p.write_bytes(np.ascontiguousarray(smp.scribble, dtype=np.uint8).tobytes())
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def _read_array(path: Path, dtype: str, shape: tuple[int, int]) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing sample file: {path}")
    raw = path.read_bytes()
    np_dtype = {"f32": "<f4", "u8": np.uint8}[dtype]
    expected = shape[0] * shape[1] * np.dtype(np_dtype).itemsize
    if len(raw) != expected:
        raise DataError(f"shape mismatch for {path.name}: manifest implies "
                        f"{expected} bytes, file has {len(raw)}")
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()


def load_dataset(directory: str | Path) -> tuple[dict[str, list[PhantomSample]], dict]:
    """Load a saved dataset; returns (samples by split, manifest)."""
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unknown dataset format version: {manifest.get('format_version')}")
    shape = (manifest["height"], manifest["width"])
    samples: dict[str, list[PhantomSample]] = {}
    for split, ids in manifest["splits"].items():
        samples[split] = []
        for sid in ids:
            img_p, mask_p, scrib_p = _sample_paths(root, sid)
            samples[split].append(PhantomSample(
                image=_read_array(img_p, "f32", shape),
                dense_mask=_read_array(mask_p, "u8", shape),
                scribble=_read_array(scrib_p, "u8", shape),
                id=sid,
            ))
    return samples, manifest


def dataset_fingerprint(directory: str | Path) -> str:
    """Content hash over the manifest and every sample file, in sorted name order."""
    root = Path(directory)
    h = hashlib.sha256()
    for path in sorted(root.iterdir()):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def export_preview_pngs(directory: str | Path, out_dir: str | Path,
                        limit: int = 8) -> list[Path]:
    """Optional visual check: image | mask | scribble side by side as PNGs."""
    from PIL import Image

    palette = np.array([[0, 0, 0], [200, 60, 60], [60, 180, 60], [80, 110, 230]],
                       dtype=np.uint8)
    samples, _ = load_dataset(directory)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    flat = [s for split in SPLITS for s in samples.get(split, [])]
    for smp in flat[:limit]:
        img = np.stack([(smp.image * 255).astype(np.uint8)] * 3, axis=-1)
        mask_rgb = palette[np.minimum(smp.dense_mask, len(palette) - 1)]
        scrib_rgb = np.full_like(img, 255)
        labeled = smp.scribble != IGNORE_LABEL
        scrib_rgb[labeled] = palette[np.minimum(smp.scribble[labeled], len(palette) - 1)]
        panel = np.concatenate([img, mask_rgb, scrib_rgb], axis=1)
        path = out / f"{smp.id}.png"
        Image.fromarray(panel).save(path)
        written.append(path)
    return written
