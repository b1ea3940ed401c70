"""Deterministic synthetic data: paired slide/mask images for the imaging
path, and embedding bags with controllable class separation for the
learning path. Bags follow the sparse-evidence structure of the real task:
positive bags hide a minority of evidence instances among background."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .embeddings import ConceptSet, EmbeddingBag, save_concepts, write_bags
from .stain import od_to_rgb
from .tiling import LABEL_NO_PLEXUS, LABEL_PLEXUS, SlideEntry, write_manifest

# Domain-separation words for seeding independent substreams.
_TAG_SLIDE = 0x534C4944
_TAG_BAGS = 0x42414753
_TAG_CONCEPTS = 0x434F4E43


def _default_stain_matrix() -> np.ndarray:
    # Hematoxylin-like and eosin-like unit OD columns.
    s = np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]], dtype=np.float64)
    return s / np.linalg.norm(s, axis=0, keepdims=True)


@dataclass
class SynthSpec:
    n_slides: int = 30
    slide_width: int = 672
    slide_height: int = 672
    blob_count_range: tuple[int, int] = (2, 5)
    blob_radius_range: tuple[int, int] = (30, 80)
    stain_matrix: np.ndarray = field(default_factory=_default_stain_matrix)
    conc_range: tuple[float, float] = (0.05, 1.5)
    embed_dim: int = 512
    instances_per_bag: int = 49
    bags_per_slide: int = 100
    separation: float = 1.0
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.stain_matrix = self.stain_matrix / np.linalg.norm(
            self.stain_matrix, axis=0, keepdims=True
        )
        if not 0.0 <= self.separation <= 1.0:
            raise ValueError("separation must be in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if min(self.slide_width, self.slide_height) < 224:
            raise ValueError("slide dims must be >= 224")
        if self.bags_per_slide % 2 != 0:
            raise ValueError("bags_per_slide must be even for balanced classes")

    def slide_id(self, idx: int) -> str:
        return f"synth{idx:03d}"


def gen_slide(spec: SynthSpec, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic slide/mask pair, deterministic per (seed, idx).

    Background texture mixes the two stains with random concentrations;
    a fraction of pixels is near-pure per stain so the staining extremes
    are identifiable. Elliptical blobs mark the mask and get a boosted
    first-stain concentration in the image.
    """
    rng = np.random.default_rng([spec.seed, _TAG_SLIDE, idx])
    h, w = spec.slide_height, spec.slide_width
    lo, hi = spec.conc_range
    n_px = h * w

    conc = rng.uniform(lo, hi, size=(n_px, 2))
    mode = rng.random(n_px)
    pure0 = mode < 0.1
    pure1 = mode >= 0.9
    conc[pure0, 0] = rng.uniform(0.8 * hi, hi, size=int(pure0.sum()))
    conc[pure0, 1] = lo
    conc[pure1, 1] = rng.uniform(0.8 * hi, hi, size=int(pure1.sum()))
    conc[pure1, 0] = lo

    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    n_blobs = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    r_lo, r_hi = spec.blob_radius_range
    for _ in range(n_blobs):
        cx = rng.uniform(r_hi, w - r_hi)
        cy = rng.uniform(r_hi, h - r_hi)
        ax = rng.uniform(r_lo, r_hi)
        ay = rng.uniform(r_lo, r_hi)
        theta = rng.uniform(0, math.pi)
        dx = xx - cx
        dy = yy - cy
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        mask[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = 255

    inside = mask.reshape(-1) > 0
    conc[inside, 0] = np.minimum(conc[inside, 0] + 0.4, hi)

    od = conc @ spec.stain_matrix.T
    rgb = od_to_rgb(od).reshape(h, w, 3)
    return rgb, mask


@dataclass
class SynthTruth:
    """Construction parameters of the bag generator (the oracle's knowledge)."""

    pos_centroid: np.ndarray
    bg_centroid: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "pos_centroid": [float(v) for v in self.pos_centroid],
                "bg_centroid": [float(v) for v in self.bg_centroid],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SynthTruth":
        doc = json.loads(text)
        return cls(
            pos_centroid=np.asarray(doc["pos_centroid"], dtype=np.float64),
            bg_centroid=np.asarray(doc["bg_centroid"], dtype=np.float64),
        )


def _centroids(spec: SynthSpec) -> SynthTruth:
    rng = np.random.default_rng([spec.seed, _TAG_BAGS])
    bg = rng.standard_normal(spec.embed_dim)
    bg /= np.linalg.norm(bg)
    other = rng.standard_normal(spec.embed_dim)
    other -= np.dot(other, bg) * bg
    other /= np.linalg.norm(other)
    cos_target = 1.0 - spec.separation
    pos = cos_target * bg + math.sqrt(max(0.0, 1.0 - cos_target**2)) * other
    return SynthTruth(pos_centroid=pos, bg_centroid=bg)


def _noisy_rows(
    center: np.ndarray, count: int, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    rows = center[None, :] + sigma * rng.standard_normal((count, center.shape[0]))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def gen_bags(spec: SynthSpec) -> tuple[dict[str, list[EmbeddingBag]], SynthTruth]:
    """Labeled bags per slide, half of each class, deterministic per spec.

    Positive bags put ceil(N/4) instances near the positive centroid and
    the rest near the shared background centroid; negative bags are all
    background. Instances are unit-normalized.
    """
    truth = _centroids(spec)
    n_evidence = math.ceil(spec.instances_per_bag / 4)
    by_slide: dict[str, list[EmbeddingBag]] = {}
    for idx in range(spec.n_slides):
        rng = np.random.default_rng([spec.seed, _TAG_BAGS, idx])
        slide = spec.slide_id(idx)
        bags = []
        for j in range(spec.bags_per_slide):
            label = LABEL_PLEXUS if j < spec.bags_per_slide // 2 else LABEL_NO_PLEXUS
            if label == LABEL_PLEXUS:
                evidence = _noisy_rows(truth.pos_centroid, n_evidence, spec.noise, rng)
                background = _noisy_rows(
                    truth.bg_centroid,
                    spec.instances_per_bag - n_evidence,
                    spec.noise,
                    rng,
                )
                instances = np.concatenate([evidence, background], axis=0)
            else:
                instances = _noisy_rows(
                    truth.bg_centroid, spec.instances_per_bag, spec.noise, rng
                )
            bags.append(
                EmbeddingBag(
                    tile_ref=f"{slide}:bag{j:04d}",
                    instances=instances,
                    label=label,
                )
            )
        by_slide[slide] = bags
    return by_slide, truth


def gen_concepts(spec: SynthSpec) -> ConceptSet:
    """Concepts aligned with the construction, standing in for expert text:
    two slightly perturbed instance concepts per class and the exact
    centroids as class prompts."""
    truth = _centroids(spec)
    rng = np.random.default_rng([spec.seed, _TAG_CONCEPTS])
    inst_vecs = []
    inst_classes = []
    inst_names = []
    for label, center, word in (
        (LABEL_PLEXUS, truth.pos_centroid, "evidence"),
        (LABEL_NO_PLEXUS, truth.bg_centroid, "background"),
    ):
        for i in range(2):
            inst_vecs.append(_noisy_rows(center, 1, 0.1, rng)[0])
            inst_classes.append(label)
            inst_names.append(f"synthetic {word} descriptor {i + 1}")
    return ConceptSet(
        instance_concepts=np.stack(inst_vecs),
        instance_classes=inst_classes,
        instance_names=inst_names,
        class_prompts=np.stack([truth.bg_centroid, truth.pos_centroid]),
        class_prompt_names=["background region", "evidence region"],
    )


def oracle_scores(
    bags: list[EmbeddingBag], truth: SynthTruth
) -> tuple[np.ndarray, np.ndarray]:
    """Construction-knowledge oracle: pick the instance most similar to the
    positive centroid and score the bag by that instance's margin between
    the two centroids. Positive bags surface an evidence instance; negative
    bags can only offer background."""
    scores = np.empty(len(bags))
    labels = np.empty(len(bags), dtype=np.int64)
    for i, bag in enumerate(bags):
        x = bag.normalized()
        best = int(np.argmax(x @ truth.pos_centroid))
        scores[i] = float(
            x[best] @ truth.pos_centroid - x[best] @ truth.bg_centroid
        )
        labels[i] = bag.label
    return scores, labels


def oracle_accuracy(bags: list[EmbeddingBag], truth: SynthTruth) -> float:
    scores, labels = oracle_scores(bags, truth)
    preds = (scores > 0).astype(np.int64)
    return float(np.mean(preds == labels))


def bags_by_slide_of(bags: list[EmbeddingBag]) -> dict[str, list[EmbeddingBag]]:
    """Group bags by the slide part of their tile_ref (text before ':')."""
    grouped: dict[str, list[EmbeddingBag]] = {}
    for bag in bags:
        grouped.setdefault(bag.tile_ref.split(":", 1)[0], []).append(bag)
    return grouped


def materialize_dataset(spec: SynthSpec, out_dir: str | Path) -> dict[str, str]:
    """Write the full dataset an operator would get from the real pipeline:
    slide/mask PNGs + manifest, embedding bags, concepts, and the
    construction truth. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slides_dir = out / "slides"
    slides_dir.mkdir(exist_ok=True)

    entries = []
    for idx in range(spec.n_slides):
        rgb, mask = gen_slide(spec, idx)
        slide = spec.slide_id(idx)
        image_path = slides_dir / f"{slide}.png"
        mask_path = slides_dir / f"{slide}_mask.png"
        imgio.save_rgb(rgb, image_path)
        imgio.save_mask(mask, mask_path)
        entries.append(
            SlideEntry(
                slide_id=slide,
                image_path=str(image_path),
                mask_path=str(mask_path),
                magnification=5.0,
            )
        )
    manifest_path = out / "manifest.json"
    write_manifest(entries, manifest_path)

    by_slide, truth = gen_bags(spec)
    all_bags = [b for slide in sorted(by_slide) for b in by_slide[slide]]
    bags_path = out / "bags.kdve"
    write_bags(all_bags, bags_path)

    concepts_path = out / "concepts.kdve"
    save_concepts(gen_concepts(spec), concepts_path)

    truth_path = out / "truth.json"
    truth_path.write_text(truth.to_json())

    return {
        "manifest": str(manifest_path),
        "bags": str(bags_path),
        "concepts": str(concepts_path),
        "truth": str(truth_path),
    }
