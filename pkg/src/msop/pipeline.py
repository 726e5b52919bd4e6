"""Two-stage inference: gather candidate regions, classify each, aggregate.

Candidate boxes come from a provider (ground-truth manifest boxes, an external
detector's record file, or nothing at all); each crop is resized to the
network input and classified; the per-region labels collapse to one image
label: any malignant region makes the image malignant, all-normal regions make
it normal, and every other mix is benign.  When a provider yields no boxes the
whole image is classified instead and the prediction is flagged as a fallback.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .labels import LABELS, MALIGNANT, NORMAL


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box with exclusive max edges; must be non-degenerate."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"degenerate box {self.to_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamp(self, width: int, height: int) -> "BoundingBox":
        """Clip to image bounds; raises if nothing remains."""
        x0 = min(max(self.x_min, 0), width)
        y0 = min(max(self.y_min, 0), height)
        x1 = min(max(self.x_max, 0), width)
        y1 = min(max(self.y_max, 0), height)
        if x0 >= x1 or y0 >= y1:
            raise ValueError(f"box {self.to_list()} degenerate after clamping "
                             f"to {width}x{height}")
        return BoundingBox(x0, y0, x1, y1)

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0, min(self.x_max, other.x_max) - max(self.x_min, other.x_min))
        iy = max(0, min(self.y_max, other.y_max) - max(self.y_min, other.y_min))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def to_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords) -> "BoundingBox":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {coords!r}")
        return cls(*coords)


def crop_region(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Copy of the pixels under `box`, clamped to the image bounds."""
    h, w = img.shape[:2]
    clamped = box.clamp(w, h)
    return img[clamped.y_min:clamped.y_max, clamped.x_min:clamped.x_max].copy()


def aggregate_predictions(labels) -> str:
    """Collapse per-region labels to an image label (order-invariant)."""
    labels = list(labels)
    if not labels:
        raise ValueError("aggregate_predictions needs at least one label")
    for lab in labels:
        if lab not in LABELS:
            raise ValueError(f"unknown label {lab!r}")
    if any(lab == MALIGNANT for lab in labels):
        return MALIGNANT
    if all(lab == NORMAL for lab in labels):
        return NORMAL
    return "benign"


# ---------------------------------------------------------------------------
# region providers
# ---------------------------------------------------------------------------

class RoiProvider:
    """Source of candidate boxes for an image; must be deterministic."""

    def boxes_for(self, image_id: str, img: np.ndarray) -> list[BoundingBox]:
        raise NotImplementedError


class WholeImageRoiProvider(RoiProvider):
    """Never yields boxes, forcing the whole-image fallback path."""

    def boxes_for(self, image_id: str, img: np.ndarray) -> list[BoundingBox]:
        return []


class ManifestRoiProvider(RoiProvider):
    """Ground-truth boxes keyed by image id (the manifest's image path)."""

    def __init__(self, boxes_by_id: dict[str, list[BoundingBox]]):
        self._boxes = boxes_by_id

    @classmethod
    def from_records(cls, records) -> "ManifestRoiProvider":
        return cls({rec.image_id: list(rec.boxes) for rec in records})

    def boxes_for(self, image_id: str, img: np.ndarray) -> list[BoundingBox]:
        return list(self._boxes.get(image_id, []))


class DetectionFileRoiProvider(RoiProvider):
    """Detector output records filtered by a confidence threshold."""

    def __init__(self, path, threshold: float = 0.5):
        self.threshold = float(threshold)
        self._detections = load_detections(path)

    def boxes_for(self, image_id: str, img: np.ndarray) -> list[BoundingBox]:
        return [box for box, conf in self._detections.get(image_id, [])
                if conf >= self.threshold]


def load_detections(path) -> dict[str, list[tuple[BoundingBox, float]]]:
    """Parse detector records: one JSON object per line with image_id,
    x_min/y_min/x_max/y_max, and confidence in [0, 1]."""
    out: dict[str, list[tuple[BoundingBox, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                box = BoundingBox(rec["x_min"], rec["y_min"], rec["x_max"], rec["y_max"])
                conf = float(rec["confidence"])
                image_id = str(rec["image_id"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad detection record: {exc}") from exc
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"{path}:{lineno}: confidence {conf} outside [0, 1]")
            out.setdefault(image_id, []).append((box, conf))
    return out


def write_detections(path, detections: dict[str, list[tuple[BoundingBox, float]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, entries in detections.items():
            for box, conf in entries:
                rec = {"image_id": image_id, "x_min": box.x_min, "y_min": box.y_min,
                       "x_max": box.x_max, "y_max": box.y_max, "confidence": conf}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

@dataclass
class RegionPrediction:
    box: BoundingBox | None          # None when the whole image was classified
    label: str
    probs: np.ndarray

    def to_dict(self) -> dict:
        return {"box": self.box.to_list() if self.box else None,
                "label": self.label,
                "probs": [float(p) for p in self.probs]}


@dataclass
class ImagePrediction:
    image_id: str
    label: str
    fallback_used: bool
    regions: list[RegionPrediction] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "label": self.label,
                "fallback_used": self.fallback_used,
                "regions": [r.to_dict() for r in self.regions]}


def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a grayscale uint8 image."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.shape == (height, width):
        return arr.copy()
    pil = Image.fromarray(arr, mode="L")
    return np.asarray(pil.resize((width, height), Image.BILINEAR))


def _classify(model, img: np.ndarray) -> np.ndarray:
    cfg = model.config
    resized = resize_image(img, cfg.input_height, cfg.input_width)
    return model.predict_probs(resized)


def predict_image(img: np.ndarray, model, provider: RoiProvider,
                  image_id: str = "") -> ImagePrediction:
    """Classify every candidate region of one image and aggregate the labels.

    With no candidate boxes the entire image is classified instead and
    ``fallback_used`` is set.  Overlapping boxes are classified independently.
    """
    boxes = provider.boxes_for(image_id, img)
    regions: list[RegionPrediction] = []
    if not boxes:
        probs = _classify(model, img)
        label = LABELS[int(np.argmax(probs))]
        regions.append(RegionPrediction(box=None, label=label, probs=probs))
        return ImagePrediction(image_id=image_id, label=label,
                               fallback_used=True, regions=regions)
    for box in boxes:
        crop = crop_region(img, box)
        probs = _classify(model, crop)
        regions.append(RegionPrediction(
            box=box, label=LABELS[int(np.argmax(probs))], probs=probs))
    label = aggregate_predictions([r.label for r in regions])
    return ImagePrediction(image_id=image_id, label=label,
                           fallback_used=False, regions=regions)
