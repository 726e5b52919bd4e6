"""Dataset records, manifest IO, the synthetic shape/texture benchmark, and
texture perturbations.

The synthetic generator draws three classes that differ only in boundary
geometry: a thin closed ellipse ("normal"), a thick-walled ellipse with an
interior bright blob ("benign"), and an ellipse with a missing arc plus an
adjacent speckled mass ("malignant").  Texture content (speckle patches,
noise) never determines the label, which is what makes the benchmark suitable
for measuring texture bias: the perturbation operators transplant exactly
those texture statistics onto non-malignant images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import BENIGN, LABELS, MALIGNANT, NORMAL
from .pipeline import BoundingBox


class ManifestError(ValueError):
    """A manifest line could not be parsed; the message names the line."""


@dataclass
class LabeledImage:
    """One grayscale 8-bit image with its label, boxes, and patient id."""

    image: np.ndarray
    label: str
    patient_id: str
    boxes: list[BoundingBox] = field(default_factory=list)
    image_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 2 or self.image.dtype != np.uint8:
            raise ValueError("image must be a 2-D uint8 array")
        if self.label not in LABELS:
            raise ValueError(f"unknown label {self.label!r}")
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        h, w = self.image.shape
        for box in self.boxes:
            if not (0 <= box.x_min < box.x_max <= w and 0 <= box.y_min < box.y_max <= h):
                raise ValueError(f"box {box.to_list()} outside {w}x{h} image")


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"))


def save_image(path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="L").save(path)


def load_manifest(path) -> list[LabeledImage]:
    """Read a JSON-lines manifest; image paths resolve relative to it.

    Each line carries: image (path), label, patient_id, boxes (list of
    [x_min, y_min, x_max, y_max]).  Record order is preserved.
    """
    path = Path(path)
    base = path.parent
    records: list[LabeledImage] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                image_rel = str(rec["image"])
                label = str(rec["label"])
                patient = str(rec["patient_id"])
                boxes = [BoundingBox.from_list(b) for b in rec.get("boxes", [])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            image_path = base / image_rel
            if not image_path.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing image {image_path}")
            records.append(LabeledImage(
                image=load_image(image_path), label=label, patient_id=patient,
                boxes=boxes, image_id=image_rel))
    return records


def write_manifest(records, path) -> None:
    """Write manifest lines for records whose images already sit on disk."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if not rec.image_id:
                raise ValueError("record has no image_id to reference")
            fh.write(json.dumps({
                "image": rec.image_id,
                "label": rec.label,
                "patient_id": rec.patient_id,
                "boxes": [b.to_list() for b in rec.boxes],
            }, sort_keys=True) + "\n")


def save_dataset(records, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write PNGs plus manifest under `out_dir`; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        if not rec.image_id:
            rec.image_id = f"img_{i:04d}.png"
        save_image(out_dir / rec.image_id, rec.image)
    manifest = out_dir / manifest_name
    write_manifest(records, manifest)
    return manifest


# ---------------------------------------------------------------------------
# speckle texture
# ---------------------------------------------------------------------------

def speckle_texture(shape, rng: np.random.Generator, mean: float, sd: float,
                    smooth_sigma: float = 1.2) -> np.ndarray:
    """Smoothed white noise: the soft-tissue-like texture used everywhere."""
    from .curriculum import blur_image

    noise = rng.standard_normal(shape)
    smooth = blur_image(noise, smooth_sigma)
    spread = smooth.std()
    if spread > 0:
        smooth = smooth / spread
    return mean + sd * smooth


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the synthetic benchmark; the seed fixes every byte."""

    size: int = 128
    n_normal: int = 10
    n_benign: int = 10
    n_malignant: int = 10
    distractor_prob: float = 0.0
    noise_level: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 48:
            raise ValueError("image size too small for the shape geometry")
        for n in (self.n_normal, self.n_benign, self.n_malignant):
            if n < 0:
                raise ValueError("per-class counts must be >= 0")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ValueError("distractor_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"size": self.size, "n_normal": self.n_normal,
                "n_benign": self.n_benign, "n_malignant": self.n_malignant,
                "distractor_prob": self.distractor_prob,
                "noise_level": self.noise_level, "seed": self.seed}


_BACKGROUND = 28.0
_LUMEN = 12.0


def _ellipse_fields(size, cx, cy, a, b, theta):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    param_angle = np.arctan2(v / b, u / a) % (2 * np.pi)
    return rho, param_angle


def _disc_mask(size, cx, cy, radius):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2


def _render(label: str, size: int, rng: np.random.Generator,
            tex_rng: np.random.Generator, distractor_prob: float,
            noise_rng: np.random.Generator, noise_level: float):
    s = float(size)
    cx = s / 2 + rng.uniform(-s / 12, s / 12)
    cy = s / 2 + rng.uniform(-s / 12, s / 12)
    a = rng.uniform(s / 4.6, s / 3.4)
    b = rng.uniform(s / 4.6, s / 3.4)
    theta = rng.uniform(0, np.pi)
    ring_value = rng.uniform(195.0, 225.0)

    if label == NORMAL:
        thickness = rng.uniform(2.2, 2.8)
    elif label == BENIGN:
        thickness = rng.uniform(5.5, 7.0)
    else:
        thickness = rng.uniform(2.5, 3.2)

    rho, angle = _ellipse_fields(size, cx, cy, a, b, theta)
    half = thickness / (a + b)
    ring = np.abs(rho - 1.0) <= half
    lumen = rho < 1.0 - half

    img = np.full((size, size), _BACKGROUND)
    img[lumen] = _LUMEN

    mass_mask = None
    if label == MALIGNANT:
        # remove an arc of the wall, then grow a speckled mass over one end of
        # the gap so most of the opening stays clear
        gap_start = rng.uniform(0, 2 * np.pi)
        gap_width = rng.uniform(np.deg2rad(85), np.deg2rad(115))
        in_gap = (angle - gap_start) % (2 * np.pi) < gap_width
        ring = ring & ~in_gap
        edge = gap_start % (2 * np.pi)
        px = cx + np.cos(theta) * a * np.cos(edge) - np.sin(theta) * b * np.sin(edge)
        py = cy + np.sin(theta) * a * np.cos(edge) + np.cos(theta) * b * np.sin(edge)
        mass_radius = rng.uniform(s / 9, s / 7)
        mass_mask = _disc_mask(size, px, py, mass_radius)
        mass_tex = speckle_texture((size, size), tex_rng, mean=150.0, sd=35.0)
        img[mass_mask] = mass_tex[mass_mask]

    img[ring] = ring_value

    if label == BENIGN:
        # bright blob inside the lumen, clear of the wall
        blob_angle = rng.uniform(0, 2 * np.pi)
        blob_frac = rng.uniform(0.30, 0.45)
        bx = cx + np.cos(theta) * a * blob_frac * np.cos(blob_angle) \
            - np.sin(theta) * b * blob_frac * np.sin(blob_angle)
        by = cy + np.sin(theta) * a * blob_frac * np.cos(blob_angle) \
            + np.cos(theta) * b * blob_frac * np.sin(blob_angle)
        blob_radius = min(rng.uniform(s / 14, s / 10), 0.35 * min(a, b))
        img[_disc_mask(size, bx, by, blob_radius)] = rng.uniform(155.0, 185.0)
    else:
        # consume the blob draws anyway so normal and benign renders with the
        # same per-image seed share their base geometry
        rng.uniform(0, 2 * np.pi)
        rng.uniform(0.30, 0.45)
        rng.uniform(s / 14, s / 10)
        rng.uniform(155.0, 185.0)

    if tex_rng.random() < distractor_prob:
        # texture patch far from the shape; class-uninformative by design
        corner = tex_rng.integers(0, 4)
        pw = int(tex_rng.uniform(s / 8, s / 5))
        x0 = 2 if corner % 2 == 0 else size - pw - 2
        y0 = 2 if corner < 2 else size - pw - 2
        patch = speckle_texture((pw, pw), tex_rng, mean=70.0, sd=28.0)
        img[y0:y0 + pw, x0:x0 + pw] = patch

    if noise_level > 0:
        img = img + noise_rng.normal(0.0, noise_level, size=(size, size))

    hx = np.sqrt((a * np.cos(theta)) ** 2 + (b * np.sin(theta)) ** 2)
    hy = np.sqrt((a * np.sin(theta)) ** 2 + (b * np.cos(theta)) ** 2)
    x0, x1 = cx - hx, cx + hx
    y0, y1 = cy - hy, cy + hy
    if mass_mask is not None and mass_mask.any():
        ys, xs = np.nonzero(mass_mask)
        x0, x1 = min(x0, xs.min()), max(x1, xs.max())
        y0, y1 = min(y0, ys.min()), max(y1, ys.max())
    margin = 4
    box = BoundingBox(
        max(0, int(x0) - margin), max(0, int(y0) - margin),
        min(size, int(x1) + margin + 1), min(size, int(y1) + margin + 1))

    return np.clip(np.rint(img), 0, 255).astype(np.uint8), box


def generate_synthetic(config: SynthConfig) -> list[LabeledImage]:
    """Deterministically render the benchmark; labels depend on shape alone.

    Every record carries the generating region as its ground-truth box and a
    unique synthetic patient id.  Geometry, texture, and noise use separate
    seed streams, so changing ``distractor_prob`` changes pixels but never
    the geometry or the labels.
    """
    schedule = ([NORMAL] * config.n_normal + [BENIGN] * config.n_benign
                + [MALIGNANT] * config.n_malignant)
    records = []
    for i, label in enumerate(schedule):
        geo_rng = np.random.default_rng([config.seed, 10, i])
        tex_rng = np.random.default_rng([config.seed, 11, i])
        noise_rng = np.random.default_rng([config.seed, 12, i])
        img, box = _render(label, config.size, geo_rng, tex_rng,
                           config.distractor_prob, noise_rng, config.noise_level)
        records.append(LabeledImage(
            image=img, label=label, patient_id=f"synth-{i:04d}",
            boxes=[box], image_id=f"img_{i:04d}.png"))
    return records


# ---------------------------------------------------------------------------
# texture perturbations
# ---------------------------------------------------------------------------

def low_freq_swap(target: np.ndarray, source: np.ndarray, beta: float) -> np.ndarray:
    """Transplant the source's low-frequency amplitude spectrum onto target.

    The centered square of the amplitude spectrum with Chebyshev radius
    floor(beta * min(H, W)) around DC is replaced by the source's, the
    target's phase is kept, and the inverse transform is clamped to [0, 255].
    The swap window is symmetric about DC, so the result is real up to
    rounding; beta -> 0 leaves the target untouched.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {source.shape}")
    if not 0.0 < beta <= 0.5:
        raise ValueError("beta must lie in (0, 0.5]")
    h, w = target.shape
    radius = int(np.floor(beta * min(h, w)))
    if radius == 0:
        return np.clip(target.copy(), 0.0, 255.0)

    f_t = np.fft.fftshift(np.fft.fft2(target))
    f_s = np.fft.fftshift(np.fft.fft2(source))
    amp = np.abs(f_t)
    phase = np.angle(f_t)
    ys, xs = np.mgrid[0:h, 0:w]
    mask = (np.abs(ys - h // 2) < radius) & (np.abs(xs - w // 2) < radius)
    amp[mask] = np.abs(f_s)[mask]
    merged = np.fft.ifft2(np.fft.ifftshift(amp * np.exp(1j * phase)))
    return np.clip(merged.real, 0.0, 255.0)


def add_tissue_patch(img: np.ndarray, box: BoundingBox, seed: int) -> np.ndarray:
    """Fill `box` with speckle texture matched to the image's mean intensity.

    Pixels outside the box are untouched; the same seed reproduces the same
    patch bit for bit.
    """
    arr = np.asarray(img)
    h, w = arr.shape
    clamped = box.clamp(w, h)
    rng = np.random.default_rng(seed)
    patch = speckle_texture((clamped.height, clamped.width), rng,
                            mean=float(arr.mean()), sd=26.0)
    out = arr.astype(np.float64).copy()
    out[clamped.y_min:clamped.y_max, clamped.x_min:clamped.x_max] = patch
    if arr.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def perturb_non_malignant(records, beta: float = 0.1, seed: int = 0) -> list[LabeledImage]:
    """The texture-bias test set: perturb every non-malignant record.

    Each normal/benign image receives low frequencies from a seeded choice of
    malignant image plus one tissue-like patch beside its ground-truth region;
    malignant images are copied untouched, so sensitivity comparisons between
    the clean and perturbed sets are exact.  Labels and boxes never change.
    """
    malignant_pool = [r for r in records if r.label == MALIGNANT]
    if not malignant_pool:
        raise ValueError("need at least one malignant record as a texture source")
    rng = np.random.default_rng([int(seed), 3])
    out = []
    for rec in records:
        if rec.label == MALIGNANT:
            out.append(LabeledImage(rec.image.copy(), rec.label, rec.patient_id,
                                    list(rec.boxes), rec.image_id))
            continue
        src = malignant_pool[int(rng.integers(len(malignant_pool)))]
        swapped = low_freq_swap(rec.image, src.image, beta)
        img = np.clip(np.rint(swapped), 0, 255).astype(np.uint8)
        patch_box = _patch_beside(rec, rng)
        img = add_tissue_patch(img, patch_box, seed=int(rng.integers(2 ** 31)))
        out.append(LabeledImage(img, rec.label, rec.patient_id,
                                list(rec.boxes), rec.image_id))
    return out


def _patch_beside(rec: LabeledImage, rng: np.random.Generator) -> BoundingBox:
    # a patch next to the region of interest but strictly outside it, so the
    # depicted anatomy is never overwritten; shrinks if the margin is tight
    h, w = rec.image.shape
    box = rec.boxes[0] if rec.boxes else BoundingBox(0, 0, w, h)
    side = max(8, min(box.width, box.height) // 2)
    gap = 2
    margins = {
        "left": box.x_min, "right": w - box.x_max,
        "top": box.y_min, "bottom": h - box.y_max,
    }
    order = sorted(margins, key=lambda s: -margins[s])
    pick = order[0] if margins[order[0]] >= margins[order[1]] * 1.5 \
        else order[int(rng.integers(2))]
    room = margins[pick]
    side = min(side, max(6, room - gap))
    if pick in ("left", "right"):
        x0 = box.x_min - gap - side if pick == "left" else box.x_max + gap
        y0 = int(rng.uniform(box.y_min, max(box.y_min + 1, box.y_max - side)))
    else:
        y0 = box.y_min - gap - side if pick == "top" else box.y_max + gap
        x0 = int(rng.uniform(box.x_min, max(box.x_min + 1, box.x_max - side)))
    x0 = int(np.clip(x0, 0, w - side))
    y0 = int(np.clip(y0, 0, h - side))
    return BoundingBox(x0, y0, x0 + side, y0 + side)
