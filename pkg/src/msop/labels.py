"""The three diagnosis classes and their fixed index order."""

NORMAL = "normal"
BENIGN = "benign"
MALIGNANT = "malignant"

LABELS = (NORMAL, BENIGN, MALIGNANT)

_INDEX = {name: i for i, name in enumerate(LABELS)}


def label_index(label: str) -> int:
    try:
        return _INDEX[label]
    except KeyError:
        raise ValueError(f"unknown label {label!r}; expected one of {LABELS}") from None
