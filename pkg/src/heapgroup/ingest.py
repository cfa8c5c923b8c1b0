"""Patch-feature container (HPF1), PGM masks, annotation manifests and the
synthetic planted-region generator."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"HPF1"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_DIMS = struct.Struct("<6I")


class FormatError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class ImageFeatures:
    image_id: str
    grid_h: int
    grid_w: int
    pixel_h: int
    pixel_w: int
    patch_size: int
    embeddings: np.ndarray  # (grid_h * grid_w, D)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = self.grid_h * self.grid_w
        if n < 1 or self.embeddings.ndim != 2 or self.embeddings.shape[0] != n:
            raise ConsistencyError(
                f"{self.image_id}: embeddings shape {self.embeddings.shape} does not match grid "
                f"{self.grid_h}x{self.grid_w}"
            )
        k = self.patch_size
        if self.grid_h * k < self.pixel_h - k or self.grid_w * k < self.pixel_w - k:
            raise ConsistencyError(f"{self.image_id}: patch grid does not cover the image")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ImageFeatures):
            return NotImplemented
        return (
            (self.image_id, self.grid_h, self.grid_w, self.pixel_h, self.pixel_w, self.patch_size)
            == (other.image_id, other.grid_h, other.grid_w, other.pixel_h, other.pixel_w, other.patch_size)
            and np.array_equal(self.embeddings, other.embeddings)
        )


@dataclass
class PatchFeatureSet:
    images: list[ImageFeatures]
    embed_dim: int

    def __post_init__(self):
        for img in self.images:
            if img.dim != self.embed_dim:
                raise ConsistencyError(f"{img.image_id}: D={img.dim}, expected {self.embed_dim}")

    def __len__(self):
        return len(self.images)

    def by_id(self) -> dict[str, ImageFeatures]:
        return {img.image_id: img for img in self.images}


# ------------------------------------------------------------- HPF1 container


def _write_records(fh, records, dtype: str):
    for name, dims, values in records:
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(_DIMS.pack(*dims))
        fh.write(np.ascontiguousarray(values, dtype=dtype).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise OSError(f"truncated HPF1 payload: wanted {n} bytes, got {len(buf)}")
    return buf


def read_container(path, version: int = FEATURE_VERSION):
    """Yield (name, dims, values) records of an HPF1 file with the given version.

    Version 1 payloads are float32; version 2 (checkpoints) are float64.
    """
    dtype = "<f4" if version == 1 else "<f8"
    width = np.dtype(dtype).itemsize
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size or head[:4] != MAGIC:
            raise FormatError(f"{path}: not an HPF1 file")
        _, ver, count = _HEADER.unpack(head)
        if ver != version:
            raise FormatError(f"{path}: HPF1 version {ver}, expected {version}")
        records = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, nlen).decode("utf-8")
            dims = _DIMS.unpack(_read_exact(fh, _DIMS.size))
            gh, gw, _, _, _, d = dims
            n = gh * gw * d
            values = np.frombuffer(_read_exact(fh, n * width), dtype=dtype).astype(np.float64)
            records.append((name, dims, values.reshape(gh * gw, d)))
    return records


def write_container(path, records, version: int = FEATURE_VERSION) -> None:
    dtype = "<f4" if version == 1 else "<f8"
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, version, len(records)))
        _write_records(fh, records, dtype)


def load_feature_set(path) -> PatchFeatureSet:
    records = read_container(path, FEATURE_VERSION)
    images = []
    for name, (gh, gw, ph, pw, k, _), values in records:
        images.append(ImageFeatures(name, gh, gw, ph, pw, k, values))
    dims = {img.dim for img in images}
    if len(dims) > 1:
        raise ConsistencyError(f"{path}: images disagree on embedding dim: {sorted(dims)}")
    return PatchFeatureSet(images, dims.pop() if dims else 0)


def write_feature_set(fs: PatchFeatureSet, path) -> None:
    records = [
        (
            img.image_id,
            (img.grid_h, img.grid_w, img.pixel_h, img.pixel_w, img.patch_size, img.dim),
            img.embeddings,
        )
        for img in fs.images
    ]
    write_container(path, records, FEATURE_VERSION)


# ------------------------------------------------------------------------ PGM


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM into a uint8 array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise OSError(f"{path}: truncated PGM payload")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- annotations


@dataclass
class Box:
    xmin: int
    ymin: int
    xmax: int
    ymax: int
    label: int = 0

    def as_tuple(self):
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass
class ImageTruth:
    saliency: np.ndarray | None = None  # bool (pixel_h, pixel_w)
    semantic: np.ndarray | None = None  # int class index per pixel
    boxes: list[Box] | None = None


@dataclass
class GroundTruth:
    images: dict[str, ImageTruth] = field(default_factory=dict)
    features_path: str | None = None

    def __getitem__(self, image_id: str) -> ImageTruth:
        return self.images[image_id]

    def ids(self) -> list[str]:
        return list(self.images)

    def check_against(self, fs: PatchFeatureSet) -> None:
        by_id = fs.by_id()
        for image_id, truth in self.images.items():
            img = by_id.get(image_id)
            if img is None:
                continue
            shape = (img.pixel_h, img.pixel_w)
            for kind in ("saliency", "semantic"):
                mask = getattr(truth, kind)
                if mask is not None and mask.shape != shape:
                    raise ConsistencyError(
                        f"{image_id}: {kind} mask is {mask.shape[0]}x{mask.shape[1]}, image is {shape[0]}x{shape[1]}"
                    )
            for box in truth.boxes or []:
                if not (0 <= box.xmin <= box.xmax < img.pixel_w and 0 <= box.ymin <= box.ymax < img.pixel_h):
                    raise ConsistencyError(f"{image_id}: box {box.as_tuple()} outside image bounds")


def load_annotations(manifest_path, features: PatchFeatureSet | None = None) -> GroundTruth:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    spec = json.loads(manifest_path.read_text())

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    gt = GroundTruth(features_path=str(resolve(spec["features"])) if spec.get("features") else None)
    for image_id, p in (spec.get("masks") or {}).items():
        gt.images.setdefault(image_id, ImageTruth()).saliency = read_pgm(resolve(p)) == 255
    for image_id, p in (spec.get("semantic_masks") or {}).items():
        gt.images.setdefault(image_id, ImageTruth()).semantic = read_pgm(resolve(p)).astype(np.int64)
    for image_id, boxes in (spec.get("boxes") or {}).items():
        gt.images.setdefault(image_id, ImageTruth()).boxes = [Box(*map(int, b)) for b in boxes]
    if features is not None:
        gt.check_against(features)
    return gt


def write_manifest(path, features: str | None, masks=None, semantic_masks=None, boxes=None) -> None:
    doc = {
        "features": features,
        "masks": masks or {},
        "semantic_masks": semantic_masks or {},
        "boxes": boxes or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    n_images: int = 4
    grid_h: int = 8
    grid_w: int = 8
    D: int = 16
    k_regions: int = 4
    n_fg_prototypes: int = 2
    noise_sigma: float = 0.05
    # pi/2 keeps every prototype pair at non-positive cosine, so the patch
    # affinity graph is a union of disjoint cliques
    min_prototype_angle: float = math.pi / 2
    seed: int = 7
    patch_size: int = 8
    # Offset of every prototype along one shared direction: + for foreground, - for background.
    fg_bias: float = 1.0

    def validate(self) -> None:
        if self.n_images < 0 or self.grid_h < 1 or self.grid_w < 1 or self.D < 1:
            raise ValueError("n_images, grid and D must be positive")
        if not 1 <= self.k_regions <= self.grid_h * self.grid_w:
            raise ValueError(
                f"k_regions={self.k_regions} must lie in [1, grid_h*grid_w={self.grid_h * self.grid_w}]"
            )
        if not 0 <= self.n_fg_prototypes < self.k_regions:
            raise ValueError("n_fg_prototypes must be smaller than k_regions")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass
class PlantedImage:
    image_id: str
    blocks: list[tuple[int, int, int, int]]  # (row0, col0, row1, col1), exclusive ends
    block_prototype: list[int]
    patch_labels: np.ndarray  # (grid_h * grid_w,) prototype index per patch


@dataclass
class SyntheticData:
    features: PatchFeatureSet
    truth: GroundTruth
    prototypes: np.ndarray
    planted: list[PlantedImage]


def sample_prototypes(k: int, dim: int, min_angle: float, rng: np.random.Generator,
                      n_fg: int = 0, fg_bias: float = 0.0, max_rejections: int = 10_000,
                      attempts: int = 20) -> np.ndarray:
    """Rejection-sample ``k`` unit prototypes with pairwise angle >= ``min_angle``.

    The first ``n_fg`` lean along a shared random axis by ``fg_bias``, the rest
    away from it. An attempt that hits ``max_rejections`` starts over from an
    empty set, since an early unlucky draw can leave no room for the rest.
    """
    axis = rng.standard_normal(dim)
    axis /= np.linalg.norm(axis)
    min_cos = np.cos(min_angle)
    for _ in range(attempts):
        protos: list[np.ndarray] = []
        rejections = 0
        while len(protos) < k and rejections < max_rejections:
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            sign = 1.0 if len(protos) < n_fg else -1.0
            v = v + sign * fg_bias * axis
            v /= np.linalg.norm(v)
            if all(float(v @ p) <= min_cos for p in protos):
                protos.append(v)
            else:
                rejections += 1
        if len(protos) == k:
            return np.stack(protos)
    raise ValueError(
        f"could not place {k} prototypes at pairwise angle >= {min_angle:.3f} rad in D={dim} "
        f"after {attempts} attempts of {max_rejections} rejections; try a smaller min_prototype_angle"
    )


def partition_grid(grid_h: int, grid_w: int, k: int, rng: np.random.Generator):
    """Guillotine-split the grid into ``k`` non-empty rectangles."""
    blocks = [(0, 0, grid_h, grid_w)]
    while len(blocks) < k:
        areas = [(r1 - r0) * (c1 - c0) for r0, c0, r1, c1 in blocks]
        idx = int(np.argmax(areas))
        r0, c0, r1, c1 = blocks.pop(idx)
        h, w = r1 - r0, c1 - c0
        if h >= w:
            cut = r0 + int(rng.integers(1, h))
            parts = [(r0, c0, cut, c1), (cut, c0, r1, c1)]
        else:
            cut = c0 + int(rng.integers(1, w))
            parts = [(r0, c0, r1, cut), (r0, cut, r1, c1)]
        blocks[idx:idx] = parts
    return blocks


def patch_to_pixel(grid: np.ndarray, pixel_h: int, pixel_w: int, patch_size: int) -> np.ndarray:
    """Nearest-neighbour expansion of a patch grid to pixel resolution.

    Pixels past the covered grid take the value of the closest patch cell.
    """
    grid = np.asarray(grid)
    gh, gw = grid.shape
    rows = np.minimum(np.arange(pixel_h) // patch_size, gh - 1)
    cols = np.minimum(np.arange(pixel_w) // patch_size, gw - 1)
    return grid[np.ix_(rows, cols)]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = sample_prototypes(
        spec.k_regions, spec.D, spec.min_prototype_angle, rng, spec.n_fg_prototypes, spec.fg_bias
    )
    k_px = spec.patch_size
    ph, pw = spec.grid_h * k_px, spec.grid_w * k_px
    images, planted = [], []
    truth = GroundTruth()
    for i in range(spec.n_images):
        image_id = f"syn{i:04d}"
        blocks = partition_grid(spec.grid_h, spec.grid_w, spec.k_regions, rng)
        order = [int(x) for x in rng.permutation(spec.k_regions)]
        labels = np.empty((spec.grid_h, spec.grid_w), dtype=np.int64)
        for (r0, c0, r1, c1), proto in zip(blocks, order):
            labels[r0:r1, c0:c1] = proto
        flat = labels.reshape(-1)
        emb = protos[flat] + spec.noise_sigma * rng.standard_normal((flat.size, spec.D))
        images.append(ImageFeatures(image_id, spec.grid_h, spec.grid_w, ph, pw, k_px, emb))
        planted.append(PlantedImage(image_id, blocks, order, flat.copy()))

        fg_grid = labels < spec.n_fg_prototypes
        saliency = patch_to_pixel(fg_grid, ph, pw, k_px)
        semantic = patch_to_pixel(np.where(fg_grid, labels + 1, 0), ph, pw, k_px)
        truth.images[image_id] = ImageTruth(saliency, semantic, _component_boxes(semantic))
    return SyntheticData(PatchFeatureSet(images, spec.D), truth, protos, planted)


def _component_boxes(semantic: np.ndarray) -> list[Box]:
    boxes = []
    labelled, count = ndimage.label(semantic > 0)
    for comp, sl in enumerate(ndimage.find_objects(labelled), start=1):
        region = semantic[sl][labelled[sl] == comp]
        cls = int(np.bincount(region).argmax())
        boxes.append(Box(sl[1].start, sl[0].start, sl[1].stop - 1, sl[0].stop - 1, cls))
    return boxes


def write_ground_truth(truth: GroundTruth, gt_dir, features_path: str | None) -> Path:
    """Write PGM masks plus a manifest.json into ``gt_dir``; returns the manifest path."""
    gt_dir = Path(gt_dir)
    gt_dir.mkdir(parents=True, exist_ok=True)
    masks, semantic, boxes = {}, {}, {}
    for image_id, t in truth.images.items():
        if t.saliency is not None:
            write_pgm(gt_dir / f"{image_id}_mask.pgm", np.where(t.saliency, 255, 0))
            masks[image_id] = f"{image_id}_mask.pgm"
        if t.semantic is not None:
            write_pgm(gt_dir / f"{image_id}_semantic.pgm", t.semantic)
            semantic[image_id] = f"{image_id}_semantic.pgm"
        if t.boxes is not None:
            boxes[image_id] = [[b.xmin, b.ymin, b.xmax, b.ymax, b.label] for b in t.boxes]
    manifest = gt_dir / "manifest.json"
    write_manifest(manifest, features_path, masks, semantic, boxes)
    return manifest
