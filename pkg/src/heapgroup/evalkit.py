"""Pixel-space saliency maps, masks, objects and the evaluation metrics:
pixel accuracy, IoU, max F-beta, CorLoc and segmentation-retrieval mIoU."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .head import HeadOutput
from .ingest import Box, ConsistencyError, ImageFeatures, patch_to_pixel

log = logging.getLogger(__name__)

BACKGROUND = 0
MIN_OBJECT_FRACTION = 0.01
FG_THRESHOLD = 0.5
N_THRESHOLDS = 256
# 4-connectivity
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


# ------------------------------------------------------------------ maps


def patch_grid(values: np.ndarray, image: ImageFeatures) -> np.ndarray:
    return np.asarray(values).reshape(image.grid_h, image.grid_w)


def saliency_map(output: HeadOutput, image: ImageFeatures) -> np.ndarray:
    """Per-pixel foreground probability: each patch cell takes H of its group."""
    grid = patch_grid(output.patch_probability(), image)
    return patch_to_pixel(grid, image.pixel_h, image.pixel_w, image.patch_size).astype(np.float64)


def group_map(output: HeadOutput, image: ImageFeatures) -> np.ndarray:
    """Per-patch group index on the patch grid."""
    return patch_grid(output.a, image)


def binarize(smap: np.ndarray, threshold: float = FG_THRESHOLD) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return np.asarray(smap) > threshold


def predicted_label_map(output: HeadOutput, image: ImageFeatures, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Pixel label map with 0 for background and group index + 1 for foreground groups."""
    fg = output.h_values > threshold
    labels = np.where(fg[output.a], output.a + 1, 0)
    return patch_to_pixel(patch_grid(labels, image), image.pixel_h, image.pixel_w, image.patch_size)


# ------------------------------------------------------------ components


@dataclass
class Component:
    mask: np.ndarray = field(repr=False)
    area: int
    box: Box
    label: int = 1


def _box_of(mask: np.ndarray, label: int = 0) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]), label)


def connected_components(mask: np.ndarray, min_fraction: float = 0.0) -> list[Component]:
    """4-connected components of a binary mask in raster order of first pixel.

    Components smaller than ``min_fraction`` of the image area are dropped.
    """
    mask = np.asarray(mask, dtype=bool)
    labeled, n = ndimage.label(mask, structure=_CROSS)
    min_area = min_fraction * mask.size
    out = []
    for k in range(1, n + 1):
        comp = labeled == k
        area = int(comp.sum())
        if area < min_area:
            continue
        out.append(Component(comp, area, _box_of(comp)))
    return out


def label_components(label_map: np.ndarray, min_fraction: float = 0.0) -> list[Component]:
    """Components of equal nonzero label; the background label is skipped."""
    label_map = np.asarray(label_map)
    out = []
    for value in np.unique(label_map):
        if value == BACKGROUND:
            continue
        for comp in connected_components(label_map == value, min_fraction):
            comp.label = int(value)
            out.append(comp)
    return out


# ---------------------------------------------------------------- metrics


def box_iou(a, b) -> float:
    """IoU of two (xmin, ymin, xmax, ymax) boxes with inclusive pixel coordinates."""
    a = a.as_tuple() if isinstance(a, Box) else tuple(a)[:4]
    b = b.as_tuple() if isinstance(b, Box) else tuple(b)[:4]
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(iw, 0) * max(ih, 0)
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)  # noqa: E731
    union = area(a) + area(b) - inter
    return inter / union if union > 0 else 0.0


def corloc(predictions, ground_truth, threshold: float = 0.5) -> float:
    """Fraction of images where some predicted box reaches IoU >= ``threshold``
    with some ground-truth box. Images without ground-truth boxes are skipped."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must list the same images")
    hits = total = 0
    for pred, gt in zip(predictions, ground_truth):
        if not gt:
            continue
        total += 1
        hits += any(box_iou(p, g) >= threshold for p in pred for g in gt)
    if total == 0:
        raise ValueError("no image has ground-truth boxes")
    return hits / total


def mask_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(pixel accuracy, IoU); IoU is 1 when both masks are empty."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ConsistencyError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    acc = float((pred == gt).mean())
    union = np.logical_or(pred, gt).sum()
    iou = float(np.logical_and(pred, gt).sum() / union) if union else 1.0
    return acc, iou


def max_fbeta(smap: np.ndarray, gt: np.ndarray, beta2: float = 0.3) -> float:
    """Max over thresholds i/255 of F-beta for the mask ``smap > t``.

    Precision with no predicted pixels and recall with an empty ground truth
    count as 0, so F-beta is 0 there.
    """
    smap = np.asarray(smap, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=bool).ravel()
    if smap.shape != gt.shape:
        raise ConsistencyError("saliency map and mask sizes differ")
    thresholds = np.arange(N_THRESHOLDS) / (N_THRESHOLDS - 1)
    all_sorted = np.sort(smap)
    fg_sorted = np.sort(smap[gt])
    pred_pos = smap.size - np.searchsorted(all_sorted, thresholds, side="right")
    true_pos = fg_sorted.size - np.searchsorted(fg_sorted, thresholds, side="right")
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_pos > 0, true_pos / np.maximum(pred_pos, 1), 0.0)
        recall = true_pos / fg_sorted.size if fg_sorted.size else np.zeros_like(precision)
        denom = beta2 * precision + recall
        f = np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f.max())


# -------------------------------------------------------------- retrieval


@dataclass
class PredictedObject:
    image_id: str
    mask: np.ndarray = field(repr=False)
    area: int
    box: Box
    patches: np.ndarray  # member patch indices
    feature: np.ndarray  # mean member patch embedding


def pixel_patch_index(image: ImageFeatures) -> np.ndarray:
    """Index of the patch cell each pixel falls into (nearest cell past the grid)."""
    idx = np.arange(image.n_patches).reshape(image.grid_h, image.grid_w)
    return patch_to_pixel(idx, image.pixel_h, image.pixel_w, image.patch_size)


def member_patches(mask: np.ndarray, image: ImageFeatures) -> np.ndarray:
    """Patches whose cell is at least half covered by ``mask``; the best-covered
    patch if none is."""
    cell = pixel_patch_index(image).ravel()
    covered = np.bincount(cell[np.asarray(mask).ravel()], minlength=image.n_patches)
    total = np.bincount(cell, minlength=image.n_patches)
    frac = covered / np.maximum(total, 1)
    members = np.flatnonzero(frac >= 0.5)
    if members.size == 0:
        members = np.array([int(np.argmax(frac))])
    return members


def extract_objects(image: ImageFeatures, label_map: np.ndarray, mode: str = "multi",
                    min_fraction: float = MIN_OBJECT_FRACTION) -> list[PredictedObject]:
    """Objects from a label map (0 = background).

    ``multi`` keeps each component as its own object; ``single`` merges all
    kept components into one object per image.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    label_map = np.asarray(label_map)
    if label_map.shape != (image.pixel_h, image.pixel_w):
        raise ConsistencyError(f"{image.image_id}: label map {label_map.shape} does not match image")
    comps = label_components(label_map, min_fraction)
    if not comps:
        return []
    masks = [c.mask for c in comps]
    if mode == "single":
        masks = [np.logical_or.reduce(masks)]
    out = []
    for m in masks:
        patches = member_patches(m, image)
        out.append(PredictedObject(image.image_id, m, int(m.sum()), _box_of(m),
                                   patches, image.embeddings[patches].mean(axis=0)))
    return out


def majority_label(mask: np.ndarray, semantic: np.ndarray) -> int | None:
    """Most frequent non-background class under ``mask``; ties go to the smaller class."""
    values = np.asarray(semantic)[np.asarray(mask, dtype=bool)]
    values = values[values != BACKGROUND]
    if values.size == 0:
        return None
    classes, counts = np.unique(values, return_counts=True)
    return int(classes[np.argmax(counts)])


@dataclass
class FeatureBank:
    features: np.ndarray  # (n, D)
    labels: np.ndarray  # (n,)

    def __len__(self):
        return len(self.labels)

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Index of the cosine-nearest entry per query row; ties go to the lowest index."""
        if len(self) == 0:
            raise ValueError("feature bank is empty")
        norm = lambda x: x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)  # noqa: E731
        sims = norm(np.atleast_2d(queries)) @ norm(self.features).T
        return np.argmax(sims, axis=1)


def build_bank(images, label_maps, semantics, mode: str = "multi") -> FeatureBank:
    """Bank of (object feature, majority class) entries over a training split."""
    feats, labels = [], []
    for image, lmap, sem in zip(images, label_maps, semantics):
        for obj in extract_objects(image, lmap, mode):
            label = majority_label(obj.mask, sem)
            if label is None:
                continue
            feats.append(obj.feature)
            labels.append(label)
    if not feats:
        dim = images[0].dim if len(images) else 0
        log.warning("feature bank is empty: no object overlaps a labelled region")
        return FeatureBank(np.zeros((0, dim)), np.zeros(0, dtype=np.int64))
    return FeatureBank(np.stack(feats), np.asarray(labels, dtype=np.int64))


def paint_semantic(shape, objects: list[PredictedObject], labels) -> np.ndarray:
    """Semantic prediction: background everywhere, objects painted largest first."""
    out = np.full(shape, BACKGROUND, dtype=np.int64)
    order = sorted(range(len(objects)), key=lambda i: -objects[i].area)
    for i in order:
        out[objects[i].mask] = labels[i]
    return out


def class_ious(preds, gts) -> dict[int, float]:
    """IoU per class present in the ground truth, accumulated over all images."""
    inter: dict[int, int] = {}
    union: dict[int, int] = {}
    present: set[int] = set()
    for pred, gt in zip(preds, gts):
        present.update(int(c) for c in np.unique(gt))
        for c in set(np.unique(pred).tolist()) | set(np.unique(gt).tolist()):
            p, g = pred == c, gt == c
            inter[c] = inter.get(c, 0) + int(np.logical_and(p, g).sum())
            union[c] = union.get(c, 0) + int(np.logical_or(p, g).sum())
    return {c: inter[c] / union[c] for c in sorted(present)}


def retrieval_miou(bank: FeatureBank, images, label_maps, semantics, mode: str = "multi") -> tuple[float, dict]:
    """Label each query object by its nearest bank entry and score the painted
    semantic masks. Returns (mIoU, per-class IoU)."""
    if len(bank) == 0:
        raise ValueError("feature bank is empty")
    preds = []
    for image, lmap, sem in zip(images, label_maps, semantics):
        objs = extract_objects(image, lmap, mode)
        labels = []
        if objs:
            labels = bank.labels[bank.nearest(np.stack([o.feature for o in objs]))]
        preds.append(paint_semantic(np.shape(sem), objs, labels))
    per_class = class_ious(preds, [np.asarray(s) for s in semantics])
    return float(np.mean(list(per_class.values()))), per_class


# ---------------------------------------------------------------- reports


@dataclass
class ImageMetrics:
    image_id: str
    acc: float | None = None
    iou: float | None = None
    max_fbeta: float | None = None
    corloc_hit: bool | None = None


@dataclass
class MetricsReport:
    corloc: float | None = None
    acc: float | None = None
    iou: float | None = None
    max_fbeta: float | None = None
    retrieval_miou: float | None = None
    per_image: list[ImageMetrics] = field(default_factory=list)

    def as_dict(self, keys=None) -> dict:
        d = asdict(self)
        if keys is not None:
            d = {k: d[k] for k in keys}
            d["per_image"] = [asdict(m) for m in self.per_image]
        return d


def prediction_boxes(mask: np.ndarray, single_box: bool = False) -> list[Box]:
    comps = connected_components(mask, MIN_OBJECT_FRACTION)
    if single_box and comps:
        comps = [max(comps, key=lambda c: c.area)]
    return [c.box for c in comps]


def evaluate(ids, saliency: dict, masks: dict, truth, single_box: bool = False) -> MetricsReport:
    """Saliency and discovery metrics over ``ids``.

    ``saliency`` maps id to a [0, 1] map and ``masks`` to a binary mask.
    Means are over images with the needed ground truth; a metric with no
    usable image stays None.
    """
    per_image, accs, ious, fbs = [], [], [], []
    pred_boxes, gt_boxes = [], []
    for image_id in ids:
        t = truth[image_id]
        m = ImageMetrics(image_id)
        if t.saliency is not None:
            m.acc, m.iou = mask_metrics(masks[image_id], t.saliency)
            m.max_fbeta = max_fbeta(saliency[image_id], t.saliency)
            accs.append(m.acc)
            ious.append(m.iou)
            fbs.append(m.max_fbeta)
        if t.boxes:
            boxes = prediction_boxes(masks[image_id], single_box)
            m.corloc_hit = any(box_iou(p, g) >= 0.5 for p in boxes for g in t.boxes)
            pred_boxes.append(boxes)
            gt_boxes.append(t.boxes)
        per_image.append(m)
    mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
    return MetricsReport(
        corloc=corloc(pred_boxes, gt_boxes) if gt_boxes else None,
        acc=mean(accs),
        iou=mean(ious),
        max_fbeta=mean(fbs),
        per_image=per_image,
    )
