"""Embedding bags, concept sets, and the KDVE on-disk format.

This is the boundary between frozen external encoders and the trainable
head: encoders write KDVE files, everything downstream reads them. Floats
are stored as little-endian 32-bit on disk and widened to 64-bit in memory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimMismatch,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)
from .tiling import LABEL_NAMES, LABEL_VALUES

KDVE_MAGIC = b"KDVE"
KDVE_VERSION = 1

DEFAULT_DIM = 512
DEFAULT_INSTANCES = 49  # 7x7 spatial token grid of a 224px ViT-B/32 encoder

LEVEL_INSTANCE = "instance"
LEVEL_BAG = "bag"


@dataclass
class EmbeddingBag:
    """Instance embeddings for one tile plus its label.

    The bag is the tile; the instances are the encoder's spatial tokens.
    """

    tile_ref: str
    instances: np.ndarray
    label: int

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError(f"instances must be (N>=1, d), got {self.instances.shape}")
        if not np.all(np.isfinite(self.instances)):
            raise ValueError(f"bag {self.tile_ref}: non-finite instance values")
        norms = np.linalg.norm(self.instances, axis=1)
        if np.any(norms <= 1e-12):
            raise ValueError(f"bag {self.tile_ref}: instance with zero norm")
        if self.label not in LABEL_NAMES:
            raise ValueError(f"bag {self.tile_ref}: unknown label {self.label}")

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def normalized(self) -> np.ndarray:
        """Instances with unit rows (the head's expected input)."""
        return self.instances / np.linalg.norm(self.instances, axis=1, keepdims=True)


def unit_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm; ZeroVector below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm <= 1e-12:
        raise ZeroVector(f"norm {norm} too small to normalize")
    return v / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1]; ZeroVector on zero input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ZeroVector("cosine of (near-)zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def write_bags(bags: list[EmbeddingBag], path: str | Path) -> None:
    """Write bags to a KDVE file. All bags must share one dimension."""
    if bags:
        dim = bags[0].dim
        for bag in bags:
            if bag.dim != dim:
                raise DimMismatch(
                    f"bag {bag.tile_ref} has dim {bag.dim}, file dim {dim}"
                )
    else:
        dim = 0
    with open(path, "wb") as fh:
        fh.write(KDVE_MAGIC)
        fh.write(struct.pack("<III", KDVE_VERSION, dim, len(bags)))
        for bag in bags:
            ident = bag.tile_ref.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise ValueError(f"bag id too long ({len(ident)} bytes)")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<BI", bag.label, bag.instances.shape[0]))
            fh.write(bag.instances.astype("<f4").tobytes(order="C"))


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFile(f"expected {count} bytes for {what}, got {len(data)}")
    return data


def read_bags(path: str | Path, expect_dim: int | None = None) -> list[EmbeddingBag]:
    """Read a KDVE file; payload floats come back widened to 64-bit."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != KDVE_MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        version, dim, bag_count = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != KDVE_VERSION:
            raise VersionMismatch(f"version {version}, reader supports {KDVE_VERSION}")
        if expect_dim is not None and bag_count > 0 and dim != expect_dim:
            raise DimMismatch(f"file dim {dim}, expected {expect_dim}")
        bags = []
        for _ in range(bag_count):
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, "id length"))
            ident = _read_exact(fh, id_len, "bag id").decode("utf-8")
            label, n = struct.unpack("<BI", _read_exact(fh, 5, "bag header"))
            raw = _read_exact(fh, n * dim * 4, f"payload of bag '{ident}'")
            instances = (
                np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
            )
            bags.append(EmbeddingBag(tile_ref=ident, instances=instances, label=int(label)))
        trailing = fh.read(1)
        if trailing:
            raise TruncatedFile("trailing bytes beyond declared bag count")
    return bags


@dataclass
class ConceptSet:
    """Frozen concept embeddings: per-class instance concepts + class prompts.

    Rows are unit-normalized at load. class_prompts is indexed by class
    value, so row 0 is the no-plexus prompt and row 1 the plexus prompt.
    """

    instance_concepts: np.ndarray
    instance_classes: list[int]
    instance_names: list[str]
    class_prompts: np.ndarray
    class_prompt_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.instance_concepts = np.asarray(self.instance_concepts, dtype=np.float64)
        self.class_prompts = np.asarray(self.class_prompts, dtype=np.float64)
        if self.instance_concepts.ndim != 2:
            raise ValueError("instance_concepts must be (M, d)")
        if self.class_prompts.shape[0] != len(LABEL_NAMES):
            raise ValueError(
                f"need exactly one class prompt per class, got shape "
                f"{self.class_prompts.shape}"
            )
        if self.instance_concepts.shape[1] != self.class_prompts.shape[1]:
            raise DimMismatch("instance concepts and class prompts differ in dim")
        for label in LABEL_NAMES:
            if label not in self.instance_classes:
                raise ValueError(f"class '{LABEL_NAMES[label]}' has no instance concept")
        self.instance_concepts = self.instance_concepts / np.linalg.norm(
            self.instance_concepts, axis=1, keepdims=True
        )
        self.class_prompts = self.class_prompts / np.linalg.norm(
            self.class_prompts, axis=1, keepdims=True
        )

    @property
    def dim(self) -> int:
        return self.class_prompts.shape[1]

    @property
    def n_instance_concepts(self) -> int:
        return self.instance_concepts.shape[0]


def concept_id(label: int, level: str, text: str) -> str:
    """KDVE bag id for a concept row: class, level, and text, tab-joined."""
    return f"{LABEL_NAMES[label]}\t{level}\t{text}"


def parse_concept_id(ident: str) -> tuple[int, str, str]:
    parts = ident.split("\t", 2)
    if len(parts) != 3:
        raise ValueError(f"concept id not in class/level/text form: {ident!r}")
    class_name, level, text = parts
    if class_name not in LABEL_VALUES:
        raise ValueError(f"unknown concept class {class_name!r}")
    if level not in (LEVEL_INSTANCE, LEVEL_BAG):
        raise ValueError(f"unknown concept level {level!r}")
    return LABEL_VALUES[class_name], level, text


def parse_prompt_file(path: str | Path) -> list[tuple[int, str, str]]:
    """Parse the concept prompt format: one 'class<TAB>level<TAB>text' per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append(parse_concept_id(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


def concepts_to_bags(concepts: ConceptSet) -> list[EmbeddingBag]:
    """Represent a concept set as single-instance bags for KDVE storage."""
    bags = []
    for vec, label, name in zip(
        concepts.instance_concepts, concepts.instance_classes, concepts.instance_names
    ):
        bags.append(
            EmbeddingBag(
                tile_ref=concept_id(label, LEVEL_INSTANCE, name),
                instances=vec[None, :],
                label=label,
            )
        )
    for label in sorted(LABEL_NAMES):
        name = (
            concepts.class_prompt_names[label]
            if label < len(concepts.class_prompt_names)
            else LABEL_NAMES[label]
        )
        bags.append(
            EmbeddingBag(
                tile_ref=concept_id(label, LEVEL_BAG, name),
                instances=concepts.class_prompts[label][None, :],
                label=label,
            )
        )
    return bags


def concepts_from_bags(bags: list[EmbeddingBag]) -> ConceptSet:
    """Rebuild a ConceptSet from concept KDVE rows (ids carry class/level/text)."""
    inst_vecs: list[np.ndarray] = []
    inst_classes: list[int] = []
    inst_names: list[str] = []
    prompts: dict[int, np.ndarray] = {}
    prompt_names: dict[int, str] = {}
    for bag in bags:
        label, level, text = parse_concept_id(bag.tile_ref)
        if label != bag.label:
            raise ValueError(
                f"concept {text!r}: id class {label} disagrees with label byte {bag.label}"
            )
        if bag.instances.shape[0] != 1:
            raise ValueError(f"concept {text!r}: expected a single embedding row")
        vec = bag.instances[0]
        if level == LEVEL_INSTANCE:
            inst_vecs.append(vec)
            inst_classes.append(label)
            inst_names.append(text)
        else:
            if label in prompts:
                raise ValueError(f"duplicate class prompt for {LABEL_NAMES[label]}")
            prompts[label] = vec
            prompt_names[label] = text
    missing = [LABEL_NAMES[l] for l in LABEL_NAMES if l not in prompts]
    if missing:
        raise ValueError(f"missing class prompt(s) for: {', '.join(missing)}")
    order = sorted(prompts)
    return ConceptSet(
        instance_concepts=np.stack(inst_vecs) if inst_vecs else np.zeros((0, 1)),
        instance_classes=inst_classes,
        instance_names=inst_names,
        class_prompts=np.stack([prompts[l] for l in order]),
        class_prompt_names=[prompt_names[l] for l in order],
    )


def save_concepts(concepts: ConceptSet, path: str | Path) -> None:
    write_bags(concepts_to_bags(concepts), path)


def load_concepts(path: str | Path, expect_dim: int | None = None) -> ConceptSet:
    return concepts_from_bags(read_bags(path, expect_dim=expect_dim))
