import itertools
import json
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msop.labels import BENIGN, LABELS, MALIGNANT, NORMAL
from msop.pipeline import (
    BoundingBox,
    DetectionFileRoiProvider,
    ManifestRoiProvider,
    WholeImageRoiProvider,
    aggregate_predictions,
    crop_region,
    load_detections,
    predict_image,
    resize_image,
    write_detections,
)


# ---------------------------------------------------------------------------
# boxes and crops
# ---------------------------------------------------------------------------

def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 5, 10)
    with pytest.raises(ValueError):
        BoundingBox(0, 9, 4, 3)
    box = BoundingBox(1, 2, 5, 9)
    assert (box.width, box.height, box.area) == (4, 7, 28)
    assert box.center == (3.0, 5.5)


def test_box_clamp_and_degenerate():
    box = BoundingBox(-5, -5, 30, 8)
    clamped = box.clamp(20, 20)
    assert clamped.to_list() == [0, 0, 20, 8]
    with pytest.raises(ValueError):
        BoundingBox(30, 30, 40, 40).clamp(20, 20)


def test_box_iou():
    a = BoundingBox(0, 0, 10, 10)
    assert a.iou(a) == 1.0
    assert a.iou(BoundingBox(10, 10, 20, 20)) == 0.0
    assert a.iou(BoundingBox(5, 0, 15, 10)) == pytest.approx(50 / 150)


def test_crop_full_image_identity():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(12, 16), dtype=np.uint8)
    crop = crop_region(img, BoundingBox(0, 0, 16, 12))
    assert np.array_equal(crop, img)
    crop[0, 0] = 99  # copied, not referenced
    assert img[0, 0] != 99 or img[0, 0] == 99 and crop is not img


def test_crop_coordinate_ramp():
    ys, xs = np.mgrid[0:20, 0:20]
    img = (xs + 20 * ys).astype(np.uint8)
    crop = crop_region(img, BoundingBox(3, 5, 13, 15))
    assert crop.shape == (10, 10)
    assert crop[0, 0] == img[5, 3]


def test_crop_clamps_oversized_box():
    img = np.zeros((10, 10), dtype=np.uint8)
    crop = crop_region(img, BoundingBox(6, 6, 40, 40))
    assert crop.shape == (4, 4)


def test_crop_degenerate_after_clamp():
    img = np.zeros((10, 10), dtype=np.uint8)
    with pytest.raises(ValueError):
        crop_region(img, BoundingBox(20, 20, 30, 30))


# ---------------------------------------------------------------------------
# aggregation rule
# ---------------------------------------------------------------------------

def test_aggregate_examples():
    assert aggregate_predictions([MALIGNANT, BENIGN, NORMAL]) == MALIGNANT
    assert aggregate_predictions([NORMAL, NORMAL]) == NORMAL
    assert aggregate_predictions([NORMAL, BENIGN]) == BENIGN


def test_aggregate_empty_and_invalid():
    with pytest.raises(ValueError):
        aggregate_predictions([])
    with pytest.raises(ValueError):
        aggregate_predictions(["cyst"])


# every multiset of size <= 4, written out by hand from the rule: any
# malignant region forces malignant, all-normal stays normal, rest benign
AGGREGATION_TABLE = {
    ("normal",): NORMAL,
    ("benign",): BENIGN,
    ("malignant",): MALIGNANT,
    ("normal", "normal"): NORMAL,
    ("benign", "normal"): BENIGN,
    ("benign", "benign"): BENIGN,
    ("malignant", "normal"): MALIGNANT,
    ("benign", "malignant"): MALIGNANT,
    ("malignant", "malignant"): MALIGNANT,
    ("normal", "normal", "normal"): NORMAL,
    ("benign", "normal", "normal"): BENIGN,
    ("benign", "benign", "normal"): BENIGN,
    ("benign", "benign", "benign"): BENIGN,
    ("malignant", "normal", "normal"): MALIGNANT,
    ("benign", "malignant", "normal"): MALIGNANT,
    ("benign", "benign", "malignant"): MALIGNANT,
    ("malignant", "malignant", "normal"): MALIGNANT,
    ("benign", "malignant", "malignant"): MALIGNANT,
    ("malignant", "malignant", "malignant"): MALIGNANT,
    ("normal", "normal", "normal", "normal"): NORMAL,
    ("benign", "normal", "normal", "normal"): BENIGN,
    ("benign", "benign", "normal", "normal"): BENIGN,
    ("benign", "benign", "benign", "normal"): BENIGN,
    ("benign", "benign", "benign", "benign"): BENIGN,
    ("malignant", "normal", "normal", "normal"): MALIGNANT,
    ("benign", "malignant", "normal", "normal"): MALIGNANT,
    ("benign", "benign", "malignant", "normal"): MALIGNANT,
    ("benign", "benign", "benign", "malignant"): MALIGNANT,
    ("malignant", "malignant", "normal", "normal"): MALIGNANT,
    ("benign", "malignant", "malignant", "normal"): MALIGNANT,
    ("benign", "benign", "malignant", "malignant"): MALIGNANT,
    ("malignant", "malignant", "malignant", "normal"): MALIGNANT,
    ("benign", "malignant", "malignant", "malignant"): MALIGNANT,
    ("malignant", "malignant", "malignant", "malignant"): MALIGNANT,
}


def test_aggregation_table_is_complete():
    from itertools import combinations_with_replacement
    multisets = set()
    for size in (1, 2, 3, 4):
        multisets.update(combinations_with_replacement(sorted(LABELS), size))
    assert multisets == set(AGGREGATION_TABLE)


def test_aggregate_exhaustive_all_orderings():
    # all 120 sequences of length <= 4, i.e. every permutation of every multiset
    for size in (1, 2, 3, 4):
        for seq in itertools.product(LABELS, repeat=size):
            expected = AGGREGATION_TABLE[tuple(sorted(seq))]
            assert aggregate_predictions(list(seq)) == expected


@settings(max_examples=200, deadline=None, derandomize=True)
@given(st.lists(st.sampled_from(LABELS), min_size=1, max_size=8),
       st.randoms(use_true_random=False))
def test_aggregate_order_invariant(labels, rnd):
    shuffled = labels[:]
    rnd.shuffle(shuffled)
    assert aggregate_predictions(labels) == aggregate_predictions(shuffled)


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------

def test_manifest_provider():
    provider = ManifestRoiProvider({"a.png": [BoundingBox(0, 0, 4, 4)]})
    assert provider.boxes_for("a.png", None) == [BoundingBox(0, 0, 4, 4)]
    assert provider.boxes_for("b.png", None) == []


def test_whole_image_provider():
    assert WholeImageRoiProvider().boxes_for("x", None) == []


def test_detection_file_roundtrip_and_threshold(tmp_path):
    path = tmp_path / "det.jsonl"
    write_detections(path, {
        "a.png": [(BoundingBox(0, 0, 10, 10), 0.9), (BoundingBox(5, 5, 9, 9), 0.3)],
        "b.png": [(BoundingBox(1, 1, 3, 3), 0.51)],
    })
    parsed = load_detections(path)
    assert len(parsed["a.png"]) == 2
    provider = DetectionFileRoiProvider(path, threshold=0.5)
    assert provider.boxes_for("a.png", None) == [BoundingBox(0, 0, 10, 10)]
    assert provider.boxes_for("b.png", None) == [BoundingBox(1, 1, 3, 3)]
    assert provider.boxes_for("c.png", None) == []


def test_detection_file_bad_record_names_line(tmp_path):
    path = tmp_path / "det.jsonl"
    path.write_text('{"image_id": "a", "x_min": 0, "y_min": 0, "x_max": 5, '
                    '"y_max": 5, "confidence": 0.8}\n{"image_id": "b"}\n')
    with pytest.raises(ValueError, match=":2:"):
        load_detections(path)


def test_detection_confidence_range(tmp_path):
    path = tmp_path / "det.jsonl"
    path.write_text('{"image_id": "a", "x_min": 0, "y_min": 0, "x_max": 5, '
                    '"y_max": 5, "confidence": 1.4}\n')
    with pytest.raises(ValueError):
        load_detections(path)


# ---------------------------------------------------------------------------
# predict_image with a stub classifier
# ---------------------------------------------------------------------------

class StubModel:
    """Labels a crop by its mean intensity: dark normal, mid benign, bright malignant."""

    def __init__(self, size=16):
        self.config = SimpleNamespace(input_height=size, input_width=size,
                                      input_channels=3)

    def predict_probs(self, image):
        mean = float(np.asarray(image).mean())
        if mean < 85:
            return np.array([0.8, 0.15, 0.05])
        if mean < 170:
            return np.array([0.1, 0.8, 0.1])
        return np.array([0.05, 0.15, 0.8])


def region_image():
    img = np.full((30, 60), 40, dtype=np.uint8)     # dark background: normal
    img[5:15, 20:30] = 128                          # benign patch
    img[5:15, 40:50] = 250                          # malignant patch
    return img


def test_predict_fallback_without_boxes():
    pred = predict_image(region_image(), StubModel(), WholeImageRoiProvider(), "img")
    assert pred.fallback_used
    assert len(pred.regions) == 1 and pred.regions[0].box is None
    assert pred.label == NORMAL  # whole image mean is dark


def test_predict_whole_box_matches_fallback():
    img = region_image()
    provider = ManifestRoiProvider({"img": [BoundingBox(0, 0, 60, 30)]})
    boxed = predict_image(img, StubModel(), provider, "img")
    fallback = predict_image(img, StubModel(), WholeImageRoiProvider(), "img")
    assert not boxed.fallback_used
    assert boxed.label == fallback.label


def test_predict_aggregates_three_regions():
    img = region_image()
    provider = ManifestRoiProvider({"img": [
        BoundingBox(0, 15, 18, 30),    # dark -> normal
        BoundingBox(20, 5, 30, 15),    # mid -> benign
        BoundingBox(2, 16, 16, 28),    # dark -> normal
    ]})
    pred = predict_image(img, StubModel(), provider, "img")
    assert [r.label for r in pred.regions] == [NORMAL, BENIGN, NORMAL]
    assert pred.label == BENIGN
    assert not pred.fallback_used


def test_predict_malignant_region_dominates():
    img = region_image()
    provider = ManifestRoiProvider({"img": [
        BoundingBox(0, 15, 18, 30),
        BoundingBox(40, 5, 50, 15),    # bright -> malignant
    ]})
    assert predict_image(img, StubModel(), provider, "img").label == MALIGNANT


def test_predict_deterministic():
    img = region_image()
    provider = ManifestRoiProvider({"img": [BoundingBox(0, 0, 60, 30)]})
    a = predict_image(img, StubModel(), provider, "img")
    b = predict_image(img, StubModel(), provider, "img")
    assert a.to_dict() == b.to_dict()


def test_prediction_serialization():
    pred = predict_image(region_image(), StubModel(), WholeImageRoiProvider(), "z")
    row = json.loads(json.dumps(pred.to_dict()))
    assert row["image_id"] == "z"
    assert row["fallback_used"] is True
    assert row["regions"][0]["box"] is None


def test_resize_shapes_and_identity():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(11, 7), dtype=np.uint8)
    assert resize_image(img, 16, 16).shape == (16, 16)
    assert np.array_equal(resize_image(img, 11, 7), img)
