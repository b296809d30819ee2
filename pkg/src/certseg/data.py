"""Synthetic domain-shift benchmark, dataset IO, and the GTSR tensor format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MAGIC = b"GTSR"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("uint8"): 3,
    np.dtype("int32"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    pass


def write_tensor(path, array):
    """Write one array: magic, version byte, dtype byte, rank byte, u64-LE extents, payload."""
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION, _DTYPE_CODES[array.dtype], array.ndim]))
        for extent in array.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(array.tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic at offset 0 in {path}")
    if len(blob) < 7:
        raise TensorFormatError(f"truncated header at offset {len(blob)} in {path}")
    version, dtype_code, rank = blob[4], blob[5], blob[6]
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at offset 4 in {path}")
    if dtype_code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {dtype_code} at offset 5 in {path}")
    dtype = _CODE_DTYPES[dtype_code]
    offset = 7
    shape = []
    for _ in range(rank):
        if offset + 8 > len(blob):
            raise TensorFormatError(f"truncated extents at offset {offset} in {path}")
        shape.append(struct.unpack_from("<Q", blob, offset)[0])
        offset += 8
    count = int(np.prod(shape)) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(blob) != expected:
        raise TensorFormatError(
            f"payload truncated at offset {len(blob)} (expected {expected}) in {path}"
        )
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class DomainSpec:
    """Procedural domain: palette/texture style, optional unknown-class objects."""

    name: str
    n_images: int = 20
    image_extent: int = 64
    k_known: int = 4
    include_ood: bool = False
    style_shift: float = 0.0  # 0 = source style; larger = stronger appearance shift
    noise: float = 0.03
    seed: int = 0


@dataclass
class Dataset:
    images: list  # 3 x H x W float arrays in [0, 1]
    labels: list | None  # H x W int maps: -1 void, 0..K-1 known, >=K unknown
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)


# base palette: background, blob structure, box structure, surface band
_BASE_PALETTE = np.array(
    [
        [0.25, 0.45, 0.20],  # background
        [0.85, 0.30, 0.25],  # class 1: round structure
        [0.25, 0.35, 0.85],  # class 2: rectangular structure
        [0.60, 0.45, 0.70],  # class 3: surface band
        [0.90, 0.85, 0.15],  # unknown family (id K), never in source labels' range
    ]
)

# global appearance drift: tint applied to every class alike, so a shift
# degrades separability without swapping class identities
_SHIFT_TINT = np.array([0.05, -0.04, 0.05])
_SHIFT_DESATURATE = 0.30  # fraction of the way toward the palette mean at shift 1


def _render_image(spec: DomainSpec, rng: np.random.Generator):
    ext = spec.image_extent
    yy, xx = np.mgrid[0:ext, 0:ext].astype(np.float64)
    label = np.zeros((ext, ext), dtype=np.int32)

    # surface band along the bottom with a wavy top edge
    band_h = rng.uniform(0.18, 0.30) * ext
    wave = 2.0 * np.sin(2 * np.pi * xx[0] / ext * rng.uniform(1.0, 2.5) + rng.uniform(0, 6.28))
    band_top = ext - band_h + wave
    label[yy >= band_top[None, :]] = 3

    # one or two round structures (class 1)
    for _ in range(rng.integers(1, 3)):
        cy = rng.uniform(0.15, 0.6) * ext
        cx = rng.uniform(0.1, 0.9) * ext
        r = rng.uniform(0.08, 0.18) * ext
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1

    # one rectangular structure (class 2)
    h = rng.uniform(0.12, 0.3) * ext
    w = rng.uniform(0.1, 0.25) * ext
    top = rng.uniform(0.05, 0.55) * ext
    left = rng.uniform(0.05, 0.7) * ext
    label[(yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)] = 2

    if spec.include_ood:
        # unknown family: a cross-shaped object, labelled with the reserved id K
        cy = rng.uniform(0.2, 0.7) * ext
        cx = rng.uniform(0.2, 0.8) * ext
        arm = rng.uniform(0.08, 0.15) * ext
        thick = max(2.0, 0.035 * ext)
        vert = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= arm)
        horiz = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= arm)
        label[vert | horiz] = spec.k_known

    mix = _SHIFT_DESATURATE * spec.style_shift
    palette = (1.0 - mix) * _BASE_PALETTE + mix * _BASE_PALETTE.mean(axis=0)
    palette = palette + spec.style_shift * _SHIFT_TINT
    palette = palette + rng.normal(0.0, 0.02 + 0.03 * spec.style_shift, size=palette.shape)
    palette = np.clip(palette, 0.0, 1.0)

    image = palette[label].transpose(2, 0, 1)
    # low-frequency multiplicative shading plus pixel noise; shading deepens with shift
    shade_amp = 0.15 + 0.10 * spec.style_shift
    shade = 1.0 + shade_amp * np.sin(2 * np.pi * (yy + xx) / ext * rng.uniform(0.5, 2.0))
    image = image * shade[None, :, :]
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), label


def generate_domain(spec: DomainSpec) -> Dataset:
    """Render a deterministic procedural dataset for one domain."""
    if spec.image_extent < 16:
        raise ValueError(f"image extent {spec.image_extent} below minimum 16")
    images, labels = [], []
    for i in range(spec.n_images):
        rng = np.random.default_rng([spec.seed, i])
        img, lab = _render_image(spec, rng)
        images.append(img)
        labels.append(lab)
    manifest = {
        "name": spec.name,
        "K_known": spec.k_known,
        "K_total": spec.k_known + (1 if spec.include_ood else 0),
        "n_images": spec.n_images,
        "extent": spec.image_extent,
        "seed": spec.seed,
        "style": {
            "style_shift": spec.style_shift,
            "noise": spec.noise,
            "include_ood": spec.include_ood,
        },
    }
    return Dataset(images=images, labels=labels, manifest=manifest)


def save_dataset(dataset: Dataset, directory, with_labels=True):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    if with_labels and dataset.labels is not None:
        (directory / "labels").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(dataset.images):
        write_tensor(directory / "images" / f"{i:05d}.gt", img.astype(np.float32))
        if with_labels and dataset.labels is not None:
            write_tensor(directory / "labels" / f"{i:05d}.gt", dataset.labels[i].astype(np.int32))
    with open(directory / "manifest.json", "w") as fh:
        json.dump(dataset.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    image_paths = sorted((directory / "images").glob("*.gt"))
    if len(image_paths) != manifest["n_images"]:
        raise ValueError(
            f"manifest declares {manifest['n_images']} images, found {len(image_paths)}"
        )
    images = [read_tensor(p).astype(np.float64) for p in image_paths]
    labels = None
    labels_dir = directory / "labels"
    if labels_dir.is_dir():
        label_paths = sorted(labels_dir.glob("*.gt"))
        if len(label_paths) != len(image_paths):
            raise ValueError(
                f"label/image count mismatch: {len(label_paths)} vs {len(image_paths)}"
            )
        labels = [read_tensor(p) for p in label_paths]
        k_total = manifest["K_total"]
        for i, lab in enumerate(labels):
            bad = (lab < -1) | (lab >= k_total)
            if bad.any():
                raise ValueError(
                    f"label values outside [-1, {k_total}) in {label_paths[i].name}"
                )
    return Dataset(images=images, labels=labels, manifest=manifest)


def default_curriculum_specs(seed=0, n_images=24, extent=64):
    """Three-tier benchmark: source A, shifted B, strongly-shifted C with unknown objects."""
    return {
        "A": DomainSpec(name="A", n_images=n_images, image_extent=extent, seed=seed),
        "B": DomainSpec(
            name="B", n_images=n_images, image_extent=extent, style_shift=0.5,
            noise=0.05, seed=seed + 1,
        ),
        "C": DomainSpec(
            name="C", n_images=n_images, image_extent=extent, style_shift=1.0,
            noise=0.08, include_ood=True, seed=seed + 2,
        ),
    }


def spec_from_dict(d):
    return DomainSpec(**d)


def spec_to_dict(spec):
    return asdict(spec)
