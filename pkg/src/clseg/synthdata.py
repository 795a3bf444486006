"""Reproducible synthetic partially-labeled 3D volumes.

Volumes are HU-like float32 arrays of shape (D, H, W) with the axial
(head-foot) axis first.  Every registered anatomy that falls inside a
dataset's axial window is rendered into the image, but only the classes in
the dataset's own class set are rasterized into the label map — voxels of
foreign anatomies stay 0.  Each axial slice carries a body-position score
in [0, 1] (0 = pelvis bottom, 1 = head top) that increases strictly with
slice index.

Generation is a pure function of (seed, descriptor, registry): the same
inputs reproduce bit-identical samples.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SHAPE_KINDS = ("sphere", "box", "ellipsoid")

# raw volume container: 8-byte magic, three little-endian uint32 dims
# (D, H, W), then the C-order payload
MAGIC_F32 = b"SEG3DF32"
MAGIC_I32 = b"SEG3DI32"

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


class GenerationError(ValueError):
    """Raised when a dataset cannot be rasterized as specified."""


@dataclass(frozen=True)
class AnatomySpec:
    """One synthetic anatomy: a geometric blob pinned to an axial band.

    ``bpr_center``/``bpr_extent`` locate the blob in normalized body
    coordinates; ``plane_center``/``plane_radius`` place it in the axial
    plane (fractions of (H, W)).  GTV anatomies are carved inside their
    host organ's voxel set.
    """

    class_id: int
    name: str
    shape_kind: str
    bpr_center: float
    bpr_extent: float
    intensity_band: tuple[float, float]
    is_gtv: bool = False
    host_class: int | None = None
    plane_center: tuple[float, float] = (0.5, 0.5)
    plane_radius: float = 0.18

    def __post_init__(self):
        if self.class_id <= 0:
            raise ValueError(f"class_id must be positive, got {self.class_id}")
        if self.shape_kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape_kind {self.shape_kind!r}")
        lo = self.bpr_center - self.bpr_extent / 2.0
        hi = self.bpr_center + self.bpr_extent / 2.0
        if not (0.0 <= lo and hi <= 1.0 and self.bpr_extent > 0.0):
            raise ValueError(
                f"{self.name}: axial band [{lo:.3f}, {hi:.3f}] must lie in [0, 1]"
            )
        if self.is_gtv and self.host_class is None:
            raise ValueError(f"{self.name}: GTV anatomy needs a host_class")

    @property
    def band(self) -> tuple[float, float]:
        half = self.bpr_extent / 2.0
        return (self.bpr_center - half, self.bpr_center + half)


@dataclass(frozen=True)
class DatasetDescriptor:
    """One synthetic partially-labeled dataset.

    ``volume_shape`` is (D, H, W) with D the axial voxel count;
    ``voxel_spacing`` is the matching (D, H, W) spacing in mm.
    ``bpr_window`` is the body sub-interval the scan covers.
    """

    dataset_id: str
    class_set: frozenset[int]
    n_train: int
    n_val: int
    n_test: int
    volume_shape: tuple[int, int, int]
    voxel_spacing: tuple[float, float, float]
    seed: int
    bpr_window: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not self.class_set:
            raise ValueError(f"{self.dataset_id}: class_set must be non-empty")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if any(d < 1 for d in self.volume_shape):
            raise GenerationError(f"invalid volume_shape {self.volume_shape}")
        lo, hi = self.bpr_window
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError(f"bpr_window {self.bpr_window} must satisfy 0 <= lo < hi <= 1")


@dataclass(frozen=True)
class TaskRegistry:
    """All datasets plus the anatomy table shared between them."""

    datasets: tuple[DatasetDescriptor, ...]
    anatomies: tuple[AnatomySpec, ...]

    def __post_init__(self):
        ids = [a.class_id for a in self.anatomies]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate class_id in anatomy table")
        known = set(ids)
        for d in self.datasets:
            missing = d.class_set - known
            if missing:
                raise ValueError(f"{d.dataset_id}: unknown class ids {sorted(missing)}")
        for a in self.anatomies:
            if a.is_gtv and a.host_class not in known:
                raise ValueError(f"{a.name}: host_class {a.host_class} not registered")

    @property
    def class_union(self) -> frozenset[int]:
        out: set[int] = set()
        for d in self.datasets:
            out |= d.class_set
        return frozenset(out)

    @property
    def total_classes(self) -> int:
        return len(self.class_union)

    def anatomy(self, class_id: int) -> AnatomySpec:
        for a in self.anatomies:
            if a.class_id == class_id:
                return a
        raise KeyError(class_id)

    def dataset(self, dataset_id: str) -> DatasetDescriptor:
        for d in self.datasets:
            if d.dataset_id == dataset_id:
                return d
        raise KeyError(dataset_id)


@dataclass
class Sample:
    """One volume with its partial label map and per-slice position scores."""

    image: np.ndarray        # float32 (D, H, W), HU-like
    labels: np.ndarray       # int32 (D, H, W), 0 = background-or-unlabeled
    bpr_scores: np.ndarray   # float64 (D,), strictly increasing, in [0, 1]
    dataset_id: str
    split: str
    index: int

    @property
    def case_id(self) -> str:
        return f"{self.dataset_id}/{self.split}/{self.index:03d}"


@dataclass(frozen=True)
class ContinualOrder:
    """A validated permutation of the registry's datasets."""

    name: str
    dataset_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.dataset_ids)


def bpr_oracle(volume_shape: tuple[int, int, int], meta: DatasetDescriptor) -> np.ndarray:
    """Per-slice body-position scores, affine in slice index.

    Slice k of z gets the center of its cell in the scan's window:
    ``lo + (k + 0.5) * (hi - lo) / z``.
    """
    z = int(volume_shape[0])
    if z < 1:
        raise GenerationError("axial extent must be >= 1")
    lo, hi = meta.bpr_window
    return lo + (np.arange(z, dtype=np.float64) + 0.5) * (hi - lo) / z


def _case_rng(descriptor: DatasetDescriptor, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([descriptor.seed, _SPLIT_CODES[split], index])
    return np.random.default_rng(ss)


def _blob_mask(shape_kind, zc, rz, yc, ry, xc, rx, grid) -> np.ndarray:
    zz, yy, xx = grid
    if shape_kind == "box":
        return (
            (np.abs(zz - zc) <= 0.8 * rz)
            & (np.abs(yy - yc) <= 0.9 * ry)
            & (np.abs(xx - xc) <= 0.9 * rx)
        )
    if shape_kind == "sphere":
        r = min(rz, ry, rx)
        rz = ry = rx = r
    elif shape_kind == "ellipsoid":
        rx = 0.75 * rx
    return (
        ((zz - zc) / rz) ** 2 + ((yy - yc) / ry) ** 2 + ((xx - xc) / rx) ** 2
    ) <= 1.0


def rasterize_case(
    descriptor: DatasetDescriptor,
    registry: TaskRegistry,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, dict[int, np.ndarray]]:
    """Render one case: image, partial labels, and every anatomy's mask.

    All registry anatomies intersecting the scan window are drawn into the
    image (in class_id order, GTVs after their hosts); only class_set
    members are written into the label map.  Jitter draws happen for every
    anatomy in a fixed order so the byte stream is a pure function of rng.
    """
    D, H, W = descriptor.volume_shape
    lo, hi = descriptor.bpr_window
    span = hi - lo

    image = np.full((D, H, W), -500.0, dtype=np.float64)
    labels = np.zeros((D, H, W), dtype=np.int32)
    grid = np.meshgrid(
        np.arange(D, dtype=np.float64),
        np.arange(H, dtype=np.float64),
        np.arange(W, dtype=np.float64),
        indexing="ij",
    )

    ordered = sorted(registry.anatomies, key=lambda a: (a.is_gtv, a.class_id))
    masks: dict[int, np.ndarray] = {}
    for anat in ordered:
        # jitter is drawn unconditionally to keep the stream stable
        jitter = rng.uniform(-1.0, 1.0, size=4)
        intensity = rng.uniform(*sorted(anat.intensity_band))
        band_lo, band_hi = anat.band
        if band_hi <= lo or band_lo >= hi:
            continue  # outside the scan's field of view

        center = anat.bpr_center + jitter[0] * 0.05 * anat.bpr_extent
        zc = (center - lo) / span * D - 0.5
        rz = 0.98 * (anat.bpr_extent / 2.0) / span * D * (1.0 + 0.05 * jitter[1])
        rz = max(rz, 0.6)
        rp = anat.plane_radius * min(H, W) * (1.0 + 0.05 * jitter[2])
        yc = anat.plane_center[0] * H + jitter[3] * 0.04 * H
        xc = anat.plane_center[1] * W + jitter[3] * 0.04 * W

        mask = _blob_mask(anat.shape_kind, zc, rz, yc, rp, xc, rp, grid)
        if anat.is_gtv:
            host = masks.get(anat.host_class)
            if host is None or not host.any():
                raise GenerationError(
                    f"{anat.name}: host class {anat.host_class} absent from this scan"
                )
            mask = mask & host
            if not mask.any():
                # guarantee a non-empty lesion: seed it at the host centroid
                zi, yi, xi = (int(round(c.mean())) for c in np.nonzero(host))
                mask = np.zeros_like(host)
                mask[zi, yi, xi] = True
        masks[anat.class_id] = mask
        image[mask] = intensity
        if anat.class_id in descriptor.class_set:
            labels[mask] = anat.class_id

    labeled = [c for c in sorted(descriptor.class_set) if not registry.anatomy(c).is_gtv]
    for i, a in enumerate(labeled):
        if a not in masks:
            continue
        for b in labeled[i + 1:]:
            if b in masks and (masks[a] & masks[b]).any():
                raise GenerationError(
                    f"{descriptor.dataset_id}: classes {a} and {b} overlap"
                )

    image += rng.normal(0.0, 20.0, size=image.shape)
    np.clip(image, -1024.0, 1024.0, out=image)
    return image.astype(np.float32), labels, masks


def generate_case(
    descriptor: DatasetDescriptor,
    registry: TaskRegistry,
    split: str,
    index: int,
) -> Sample:
    rng = _case_rng(descriptor, split, index)
    image, labels, _ = rasterize_case(descriptor, registry, rng)
    scores = bpr_oracle(descriptor.volume_shape, descriptor)
    return Sample(image, labels, scores, descriptor.dataset_id, split, index)


def generate_dataset(
    descriptor: DatasetDescriptor,
    registry: TaskRegistry,
    splits: tuple[str, ...] = ("train", "val", "test"),
) -> list[Sample]:
    """Materialize the requested splits of one dataset."""
    if descriptor not in registry.datasets:
        raise ValueError(f"{descriptor.dataset_id} is not part of the registry")
    counts = {"train": descriptor.n_train, "val": descriptor.n_val, "test": descriptor.n_test}
    out = []
    for split in splits:
        for i in range(counts[split]):
            out.append(generate_case(descriptor, registry, split, i))
    return out


def make_orders(
    registry: TaskRegistry, order_specs: list[tuple[int, ...]] | list[list[int]]
) -> list[ContinualOrder]:
    """Turn index permutations into validated dataset orders."""
    n = len(registry.datasets)
    orders = []
    for k, perm in enumerate(order_specs):
        perm = tuple(int(i) for i in perm)
        if sorted(perm) != list(range(n)):
            raise ValueError(f"order {k}: {perm} is not a permutation of 0..{n - 1}")
        ids = tuple(registry.datasets[i].dataset_id for i in perm)
        orders.append(ContinualOrder(name=f"order{k + 1}", dataset_ids=ids))
    return orders


# ---------------------------------------------------------------------------
# default five-dataset suite: one comprehensive dataset plus three
# body-part-local ones and a lesion dataset whose host organ is unlabeled
# ---------------------------------------------------------------------------

def default_anatomies() -> tuple[AnatomySpec, ...]:
    return (
        AnatomySpec(1, "brain", "sphere", 0.87, 0.22, (40.0, 60.0),
                    plane_center=(0.50, 0.50), plane_radius=0.24),
        AnatomySpec(2, "lung", "ellipsoid", 0.60, 0.22, (-680.0, -620.0),
                    plane_center=(0.42, 0.30), plane_radius=0.20),
        AnatomySpec(3, "heart", "sphere", 0.57, 0.18, (220.0, 260.0),
                    plane_center=(0.62, 0.70), plane_radius=0.17),
        AnatomySpec(4, "liver", "box", 0.36, 0.16, (90.0, 120.0),
                    plane_center=(0.34, 0.62), plane_radius=0.20),
        AnatomySpec(5, "kidney", "ellipsoid", 0.27, 0.16, (310.0, 350.0),
                    plane_center=(0.68, 0.28), plane_radius=0.16),
        AnatomySpec(6, "kidney_gtv", "sphere", 0.27, 0.10, (620.0, 680.0),
                    is_gtv=True, host_class=5,
                    plane_center=(0.68, 0.28), plane_radius=0.10),
    )


def default_registry(
    volume_shape: tuple[int, int, int] = (48, 32, 32),
    voxel_spacing: tuple[float, float, float] = (1.5, 1.0, 1.0),
    n_train: int = 8,
    n_val: int = 4,
    n_test: int = 4,
    seed: int = 1234,
) -> TaskRegistry:
    """Five datasets: comprehensive, head, chest, abdomen, and lesion.

    The comprehensive dataset labels every organ class and plays the
    encoder-training role; the regional datasets overlap it (shared
    classes) and the lesion dataset labels the tumor only, with its host
    organ present but unlabeled.
    """
    def desc(dataset_id, class_set, window, seed_offset):
        return DatasetDescriptor(
            dataset_id=dataset_id,
            class_set=frozenset(class_set),
            n_train=n_train, n_val=n_val, n_test=n_test,
            volume_shape=volume_shape,
            voxel_spacing=voxel_spacing,
            seed=seed + seed_offset,
            bpr_window=window,
        )

    datasets = (
        desc("comprehensive", {1, 2, 3, 4, 5}, (0.0, 1.0), 0),
        desc("head", {1}, (0.70, 1.00), 1),
        desc("chest", {2, 3}, (0.44, 0.76), 2),
        desc("abdomen", {4, 5}, (0.12, 0.52), 3),
        desc("lesion", {6}, (0.12, 0.52), 4),
    )
    return TaskRegistry(datasets=datasets, anatomies=default_anatomies())


# ---------------------------------------------------------------------------
# raw on-disk format
# ---------------------------------------------------------------------------

def write_volume(path: str | Path, array: np.ndarray) -> None:
    """Write a rank-3 array: magic, three uint32 dims, little-endian payload."""
    array = np.asarray(array)
    if array.ndim != 3:
        raise ValueError("expected a rank-3 array")
    if array.dtype == np.float32:
        magic, dtype = MAGIC_F32, "<f4"
    elif array.dtype == np.int32:
        magic, dtype = MAGIC_I32, "<i4"
    else:
        raise ValueError(f"unsupported dtype {array.dtype}")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<III", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic == MAGIC_F32:
            dtype = "<f4"
        elif magic == MAGIC_I32:
            dtype = "<i4"
        else:
            raise ValueError(f"{path}: bad magic {magic!r}")
        dims = struct.unpack("<III", f.read(12))
        payload = f.read()
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="))


def write_dataset(root: str | Path, descriptor: DatasetDescriptor, registry: TaskRegistry) -> Path:
    """Write one dataset directory: manifest.json plus raw image/label files."""
    root = Path(root) / descriptor.dataset_id
    root.mkdir(parents=True, exist_ok=True)
    files = []
    for sample in generate_dataset(descriptor, registry):
        stem = f"{sample.split}_{sample.index:03d}"
        write_volume(root / f"{stem}_img.raw", sample.image)
        write_volume(root / f"{stem}_lbl.raw", sample.labels)
        files.append({"split": sample.split, "index": sample.index,
                      "image": f"{stem}_img.raw", "labels": f"{stem}_lbl.raw"})
    manifest = {
        "dataset_id": descriptor.dataset_id,
        "class_set": sorted(descriptor.class_set),
        "anatomies": [
            {
                "class_id": a.class_id, "name": a.name, "shape_kind": a.shape_kind,
                "bpr_center": a.bpr_center, "bpr_extent": a.bpr_extent,
                "intensity_band": list(a.intensity_band),
                "is_gtv": a.is_gtv, "host_class": a.host_class,
            }
            for a in registry.anatomies if a.class_id in descriptor.class_set
        ],
        "volume_shape": list(descriptor.volume_shape),
        "voxel_spacing": list(descriptor.voxel_spacing),
        "bpr_window": list(descriptor.bpr_window),
        "seed": descriptor.seed,
        "files": files,
    }
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return root


def load_dataset(root: str | Path, descriptor: DatasetDescriptor) -> list[Sample]:
    """Read back a dataset written by :func:`write_dataset`."""
    root = Path(root) / descriptor.dataset_id
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    scores = bpr_oracle(descriptor.volume_shape, descriptor)
    samples = []
    for entry in manifest["files"]:
        samples.append(Sample(
            image=read_volume(root / entry["image"]),
            labels=read_volume(root / entry["labels"]),
            bpr_scores=scores,
            dataset_id=descriptor.dataset_id,
            split=entry["split"],
            index=entry["index"],
        ))
    return samples
