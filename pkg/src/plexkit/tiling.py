"""Slide downsampling, overlapping tile extraction, labeling, and sampling."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientClass, OutOfBounds, TooSmall, ZeroDimension

log = logging.getLogger(__name__)

LABEL_NO_PLEXUS = 0
LABEL_PLEXUS = 1
LABEL_NAMES = {LABEL_NO_PLEXUS: "no_plexus", LABEL_PLEXUS: "plexus"}
LABEL_VALUES = {name: value for value, name in LABEL_NAMES.items()}

DEFAULT_TILE_SIZE = 224
DEFAULT_STRIDE = 112
DEFAULT_DOWNSAMPLE = 4

AUGMENT_OPS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")


@dataclass(frozen=True)
class TileRecord:
    """One extracted tile: grid position, label, and provenance."""

    slide_id: str
    x: int
    y: int
    size: int = DEFAULT_TILE_SIZE
    label: int = LABEL_NO_PLEXUS
    augmentation: str | None = None

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative tile origin ({self.x}, {self.y})")
        if self.label not in LABEL_NAMES:
            raise ValueError(f"unknown label {self.label}")

    @property
    def key(self) -> str:
        return f"{self.slide_id}:{self.x}:{self.y}"


@dataclass(frozen=True)
class SamplePlan:
    """Balanced per-slide sampling: per_class_count tiles of each class."""

    per_class_count: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def per_slide_count(self) -> int:
        return 2 * self.per_class_count


@dataclass(frozen=True)
class SlideEntry:
    """One manifest row: a slide PNG and its annotation-mask PNG."""

    slide_id: str
    image_path: str
    mask_path: str
    magnification: float = 5.0


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsampling; trailing rows/cols not filling a block drop."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    oh, ow = h // factor, w // factor
    if oh == 0 or ow == 0:
        raise ZeroDimension(f"{w}x{h} image collapses at factor {factor}")
    trimmed = np.ascontiguousarray(img[: oh * factor, : ow * factor])
    if img.ndim == 3:
        blocks = trimmed.reshape(oh, factor, ow, factor, img.shape[2])
    else:
        blocks = trimmed.reshape(oh, factor, ow, factor)
    # accumulate in float64 without materializing a float copy of the input
    means = blocks.mean(axis=(1, 3), dtype=np.float64)
    return np.floor(means + 0.5).astype(np.uint8)


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool downsampling: any nonzero pixel in a block marks the block.

    Preserves the one-pixel label rule across resolutions.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return mask.copy()
    h, w = mask.shape
    oh, ow = h // factor, w // factor
    if oh == 0 or ow == 0:
        raise ZeroDimension(f"{w}x{h} mask collapses at factor {factor}")
    trimmed = mask[: oh * factor, : ow * factor]
    return trimmed.reshape(oh, factor, ow, factor).max(axis=(1, 3))


def tile_grid(width: int, height: int, size: int, stride: int) -> list[tuple[int, int]]:
    """Fully in-bounds top-left coordinates on a fixed-stride grid, row-major."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if size > width or size > height:
        raise TooSmall(f"size {size} exceeds {width}x{height}")
    xs = range(0, width - size + 1, stride)
    ys = range(0, height - size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def label_tile(mask: np.ndarray, x: int, y: int, size: int) -> int:
    """Plexus iff any mask pixel in the [x, x+size) x [y, y+size) window is nonzero."""
    h, w = mask.shape
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise OutOfBounds(f"tile ({x}, {y}, {size}) outside {w}x{h} mask")
    window = mask[y : y + size, x : x + size]
    return LABEL_PLEXUS if np.any(window) else LABEL_NO_PLEXUS


def _slide_rng(seed: int, slide_id: str) -> np.random.Generator:
    # Stable across platforms: slide identity enters through a sha256 digest.
    digest = hashlib.sha256(slide_id.encode("utf-8")).digest()
    slide_word = int.from_bytes(digest[:8], "little")
    return np.random.default_rng([seed, slide_word])


def balanced_sample(
    tiles: list[TileRecord], plan: SamplePlan, allow_short: bool = False
) -> list[TileRecord]:
    """Sample per_class_count tiles of each class from every slide present.

    Uniform without replacement, deterministic per (plan.seed, slide_id).
    Output is ordered by slide_id, then (y, x). Raises InsufficientClass
    when a slide lacks tiles of a class unless allow_short is set, which
    downgrades to taking all available with a warning.
    """
    by_slide: dict[str, list[TileRecord]] = {}
    for tile in tiles:
        by_slide.setdefault(tile.slide_id, []).append(tile)

    out: list[TileRecord] = []
    for slide_id in sorted(by_slide):
        rng = _slide_rng(plan.seed, slide_id)
        slide_tiles = by_slide[slide_id]
        for label in (LABEL_PLEXUS, LABEL_NO_PLEXUS):
            pool = [t for t in slide_tiles if t.label == label]
            pool.sort(key=lambda t: (t.y, t.x))
            if len(pool) < plan.per_class_count:
                if not allow_short:
                    raise InsufficientClass(
                        LABEL_NAMES[label], len(pool), plan.per_class_count
                    )
                log.warning(
                    "slide %s: only %d %s tiles, wanted %d; taking all",
                    slide_id,
                    len(pool),
                    LABEL_NAMES[label],
                    plan.per_class_count,
                )
                chosen = pool
            else:
                idx = rng.choice(len(pool), size=plan.per_class_count, replace=False)
                chosen = [pool[i] for i in idx]
            out.extend(chosen)
    out.sort(key=lambda t: (t.slide_id, t.y, t.x))
    return out


def augment_tile(tile: np.ndarray, op: str) -> np.ndarray:
    """Apply an exact pixel permutation to a square tile."""
    if tile.shape[0] != tile.shape[1]:
        raise ValueError(f"tile must be square, got {tile.shape}")
    if op == "identity":
        return tile.copy()
    if op == "rot90":
        return np.rot90(tile, 1).copy()
    if op == "rot180":
        return np.rot90(tile, 2).copy()
    if op == "rot270":
        return np.rot90(tile, 3).copy()
    if op == "flip_h":
        return np.fliplr(tile).copy()
    if op == "flip_v":
        return np.flipud(tile).copy()
    raise ValueError(f"unknown augmentation op '{op}'")


def extract_tile(img: np.ndarray, record: TileRecord) -> np.ndarray:
    h, w = img.shape[:2]
    if record.x + record.size > w or record.y + record.size > h:
        raise OutOfBounds(f"{record} outside {w}x{h} image")
    tile = img[record.y : record.y + record.size, record.x : record.x + record.size]
    if record.augmentation:
        return augment_tile(tile, record.augmentation)
    return tile.copy()


def write_tile_index(tiles: list[TileRecord], path: str | Path) -> None:
    """Tile index as JSON lines, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in tiles:
            fh.write(
                json.dumps(
                    {
                        "slide_id": t.slide_id,
                        "x": t.x,
                        "y": t.y,
                        "size": t.size,
                        "label": LABEL_NAMES[t.label],
                        "augmentation": t.augmentation,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_tile_index(path: str | Path) -> list[TileRecord]:
    tiles = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            tiles.append(
                TileRecord(
                    slide_id=doc["slide_id"],
                    x=int(doc["x"]),
                    y=int(doc["y"]),
                    size=int(doc["size"]),
                    label=LABEL_VALUES[doc["label"]],
                    augmentation=doc.get("augmentation"),
                )
            )
    return tiles


def write_manifest(slides: list[SlideEntry], path: str | Path) -> None:
    doc = {
        "slides": [
            {
                "slide_id": s.slide_id,
                "image": s.image_path,
                "mask": s.mask_path,
                "magnification": s.magnification,
            }
            for s in slides
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest(path: str | Path) -> list[SlideEntry]:
    doc = json.loads(Path(path).read_text())
    return [
        SlideEntry(
            slide_id=row["slide_id"],
            image_path=row["image"],
            mask_path=row["mask"],
            magnification=float(row.get("magnification", 5.0)),
        )
        for row in doc["slides"]
    ]
