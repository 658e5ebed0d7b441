"""Semantic class schema and per-class defaults.

Classes follow the 20-class SemanticKITTI learning map; class 0 is
``unlabeled``. Raw label ids found in ``.label`` files are remapped through
:data:`RAW_TO_CLASS`.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError

CLASS_NAMES = [
    "unlabeled",
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "bicyclist",
    "motorcyclist",
    "road",
    "parking",
    "sidewalk",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
    "traffic-sign",
]
NUM_CLASSES = len(CLASS_NAMES)
CLASS_ID = {name: i for i, name in enumerate(CLASS_NAMES)}

MOVING_CLASSES = tuple(range(1, 9))
HUMAN_CLASSES = (CLASS_ID["person"], CLASS_ID["bicyclist"], CLASS_ID["motorcyclist"])
GROUND_CLASSES = tuple(CLASS_ID[n] for n in ("road", "parking", "sidewalk", "terrain"))
THIN_CLASSES = (CLASS_ID["pole"], CLASS_ID["traffic-sign"])

RAW_TO_CLASS = {
    0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5, 30: 6, 31: 7,
    32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13, 51: 14, 52: 0, 60: 9, 70: 15,
    71: 16, 72: 17, 80: 18, 81: 19, 99: 0, 252: 1, 253: 7, 254: 6, 255: 8,
    256: 5, 257: 5, 258: 4, 259: 5,
}
# canonical raw id per class, used when writing synthetic label files
CLASS_TO_RAW = {
    0: 0, 1: 10, 2: 11, 3: 15, 4: 18, 5: 20, 6: 30, 7: 31, 8: 32, 9: 40, 10: 44,
    11: 48, 12: 49, 13: 50, 14: 51, 15: 70, 16: 71, 17: 72, 18: 80, 19: 81,
}


def default_class_factors(num_classes: int = NUM_CLASSES) -> np.ndarray:
    factors = np.ones(num_classes)
    if num_classes == NUM_CLASSES:
        factors[list(THIN_CLASSES)] = 0.75
        factors[list(GROUND_CLASSES)] = 0.8
        factors[list(HUMAN_CLASSES)] = 0.0
    return factors


def read_class_factors(path, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Parse ``class_id factor name`` lines; unspecified classes default to 1.0."""
    factors = np.ones(num_classes)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            cid, factor = int(parts[0]), float(parts[1])
        except (IndexError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: expected 'class_id factor name'") from exc
        if not 0 <= cid < num_classes or factor < 0:
            raise ConfigError(f"{path}:{lineno}: class {cid} factor {factor} out of range")
        factors[cid] = factor
    return factors


def write_class_factors(path, factors, names=CLASS_NAMES) -> None:
    lines = ["# class_id factor name"]
    for cid, f in enumerate(factors):
        name = names[cid] if cid < len(names) else f"class{cid}"
        lines.append(f"{cid} {f:.9g} {name}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_label_map(path) -> dict[int, int]:
    """Parse ``raw_id class_id`` lines into a remap table."""
    table = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            a, b = line.split()[:2]
            table[int(a)] = int(b)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: expected 'raw_id class_id'") from exc
    return table
