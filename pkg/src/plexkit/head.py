"""Knowledge-driven classification head over frozen embeddings.

Two-stage attention: instances are pooled into one feature per concept
(weights from instance-concept cosine), then concept features are pooled
into one feature per class (weights from feature-prompt cosine), passed
through a residual bottleneck adapter, and scored against the class
prompts. Everything trainable lives in HeadParams; all gradients are
hand-written reverse mode, verified against finite differences.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import ConceptSet, EmbeddingBag
from .errors import (
    BadMagic,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
    ZeroVector,
)

CHECKPOINT_MAGIC = b"KDHP"
CHECKPOINT_VERSION = 1

PARAM_FIELDS = ("data_concepts", "context_basis", "context_coeffs", "w_down", "w_up")


@dataclass(frozen=True)
class HeadConfig:
    """Fixed hyperparameters of the head (everything not trained)."""

    dim: int = 512
    n_data_concepts: int = 8
    context_rank: int = 16
    adapter_ratio: int = 4
    adapter_alpha: float = 0.2
    tau_inst: float = 0.1
    tau_bag: float = 1.0
    tau_cls: float = 0.07
    orth_weight: float = 2.0

    def __post_init__(self):
        if self.dim % self.adapter_ratio != 0:
            raise ValueError("dim must be divisible by adapter_ratio")
        if not 0.0 <= self.adapter_alpha <= 1.0:
            raise ValueError("adapter_alpha must be in [0, 1]")

    @property
    def bottleneck_dim(self) -> int:
        return self.dim // self.adapter_ratio


@dataclass
class HeadParams:
    """All trainable values plus the fixed config."""

    data_concepts: np.ndarray  # (K, d)
    context_basis: np.ndarray  # (d, r), shared across frozen concepts
    context_coeffs: np.ndarray  # (M, r), one row per frozen instance concept
    w_down: np.ndarray  # (d, d/ratio)
    w_up: np.ndarray  # (d/ratio, d)
    config: HeadConfig

    def copy(self) -> "HeadParams":
        return HeadParams(
            data_concepts=self.data_concepts.copy(),
            context_basis=self.context_basis.copy(),
            context_coeffs=self.context_coeffs.copy(),
            w_down=self.w_down.copy(),
            w_up=self.w_up.copy(),
            config=self.config,
        )


@dataclass
class HeadGrads:
    """Gradient structure congruent to the learnable HeadParams fields."""

    data_concepts: np.ndarray
    context_basis: np.ndarray
    context_coeffs: np.ndarray
    w_down: np.ndarray
    w_up: np.ndarray

    def scaled(self, factor: float) -> "HeadGrads":
        return HeadGrads(
            **{f: getattr(self, f) * factor for f in PARAM_FIELDS}
        )

    def add_(self, other: "HeadGrads") -> None:
        for f in PARAM_FIELDS:
            getattr(self, f).__iadd__(getattr(other, f))


def zero_grads(params: HeadParams) -> HeadGrads:
    return HeadGrads(**{f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS})


@dataclass
class ForwardTrace:
    """Every intermediate of one bag's forward pass."""

    instance_weights: np.ndarray  # (J, N), rows sum to 1
    concept_features: np.ndarray  # (J, d)
    bag_weights: np.ndarray  # (J, C), columns sum to 1
    class_features: np.ndarray  # (C, d), pre-adapter
    adapted_features: np.ndarray  # (C, d)
    logits: np.ndarray  # (C,)
    probs: np.ndarray  # (C,)


def init_params(
    concepts: ConceptSet, config: HeadConfig, seed: int = 0
) -> HeadParams:
    """Seeded initialization.

    Context coefficients start at zero so the untrained head scores with
    the frozen expert concepts exactly; the adapter up-projection starts
    at zero so the adapter is the identity blend at step 0.
    """
    rng = np.random.default_rng(seed)
    d, r, k = config.dim, config.context_rank, config.n_data_concepts
    if concepts.dim != d:
        raise ShapeMismatch(f"concept dim {concepts.dim} != config dim {d}")
    data = rng.standard_normal((k, d))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    return HeadParams(
        data_concepts=data,
        context_basis=rng.standard_normal((d, r)) / np.sqrt(d),
        context_coeffs=np.zeros((concepts.n_instance_concepts, r)),
        w_down=rng.standard_normal((d, config.bottleneck_dim)) * np.sqrt(2.0 / d),
        w_up=np.zeros((config.bottleneck_dim, d)),
        config=config,
    )


def _softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _row_normalize(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ZeroVector("row with (near-)zero norm")
    return rows / norms, norms[:, 0]


def effective_concepts(concepts: ConceptSet, params: HeadParams) -> np.ndarray:
    """Frozen concepts shifted by their low-rank context offsets, then the
    data-driven concepts; all rows unit-normalized. Shape (M + K, d)."""
    offsets = params.context_coeffs @ params.context_basis.T
    shifted, _ = _row_normalize(concepts.instance_concepts + offsets)
    data, _ = _row_normalize(params.data_concepts)
    return np.concatenate([shifted, data], axis=0)


def _bag_instances(bag: EmbeddingBag | np.ndarray) -> np.ndarray:
    if isinstance(bag, EmbeddingBag):
        return bag.normalized()
    x = np.asarray(bag, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"instances must be (N, d), got {x.shape}")
    return x


def instance_aggregate(
    bag: EmbeddingBag | np.ndarray,
    concepts_eff: np.ndarray,
    tau_inst: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Concept-wise softmax attention over a bag's instances.

    Returns (weights (J, N), features (J, d)) with each weight row summing
    to 1 and features f_j the attention-weighted instance sums.
    """
    x = _bag_instances(bag)
    sims = concepts_eff @ x.T
    weights = _softmax(sims / tau_inst, axis=1)
    return weights, weights @ x


def adapter_forward(h: np.ndarray, params: HeadParams) -> np.ndarray:
    """Residual bottleneck blend: alpha * up(relu(down(h))) + (1-alpha) * h."""
    alpha = params.config.adapter_alpha
    hidden = np.maximum(np.asarray(h, dtype=np.float64) @ params.w_down, 0.0)
    return alpha * (hidden @ params.w_up) + (1.0 - alpha) * h


def bag_aggregate(
    features: np.ndarray,
    class_prompts: np.ndarray,
    params: HeadParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Class-wise softmax pooling of concept features, adapter, prompt scoring.

    Returns (bag_weights (J, C), class_features (C, d), adapted (C, d),
    logits (C,)).
    """
    cfg = params.config
    fhat, fnorm = _row_normalize(features)
    cos_bag = (features @ class_prompts.T) / fnorm[:, None]
    bag_weights = _softmax(cos_bag / cfg.tau_bag, axis=0)
    class_features = bag_weights.T @ features
    adapted = adapter_forward(class_features, params)
    gnorm = np.linalg.norm(adapted, axis=1)
    if np.any(gnorm <= 1e-12):
        raise ZeroVector("adapted class feature collapsed to zero")
    logits = np.sum(adapted * class_prompts, axis=1) / (gnorm * cfg.tau_cls)
    return bag_weights, class_features, adapted, logits


def forward(
    bag: EmbeddingBag | np.ndarray, concepts: ConceptSet, params: HeadParams
) -> ForwardTrace:
    concepts_eff = effective_concepts(concepts, params)
    inst_weights, feats = instance_aggregate(bag, concepts_eff, params.config.tau_inst)
    bag_weights, class_feats, adapted, logits = bag_aggregate(
        feats, concepts.class_prompts, params
    )
    return ForwardTrace(
        instance_weights=inst_weights,
        concept_features=feats,
        bag_weights=bag_weights,
        class_features=class_feats,
        adapted_features=adapted,
        logits=logits,
        probs=_softmax(logits, axis=0),
    )


def orth_loss(data_concepts: np.ndarray) -> float:
    """Mean squared cosine over ordered pairs of distinct data concepts."""
    k = data_concepts.shape[0]
    if k < 2:
        raise ValueError("orthogonality loss needs at least 2 concepts")
    chat, _ = _row_normalize(data_concepts)
    cos = chat @ chat.T
    np.fill_diagonal(cos, 0.0)
    return float(np.sum(cos * cos) / (k * (k - 1)))


def loss(
    bag: EmbeddingBag | np.ndarray,
    concepts: ConceptSet,
    params: HeadParams,
    label: int,
) -> float:
    trace = forward(bag, concepts, params)
    ce = -float(np.log(trace.probs[label]))
    return ce + params.config.orth_weight * orth_loss(params.data_concepts)


def _orth_backward(data_concepts: np.ndarray) -> np.ndarray:
    k = data_concepts.shape[0]
    chat, norms = _row_normalize(data_concepts)
    cos = chat @ chat.T
    np.fill_diagonal(cos, 0.0)
    dcos = 2.0 * cos / (k * (k - 1))
    dchat = 2.0 * dcos @ chat  # dcos symmetric
    draw = (dchat - np.sum(dchat * chat, axis=1, keepdims=True) * chat) / norms[:, None]
    return draw


def loss_and_grad(
    bag: EmbeddingBag | np.ndarray,
    concepts: ConceptSet,
    params: HeadParams,
    label: int,
) -> tuple[float, HeadGrads]:
    """Loss plus exact reverse-mode derivatives for every learnable field."""
    cfg = params.config
    x = _bag_instances(bag)
    prompts = concepts.class_prompts
    m = concepts.n_instance_concepts

    # ---- forward, keeping intermediates ----
    offsets = params.context_coeffs @ params.context_basis.T
    shifted_raw = concepts.instance_concepts + offsets
    shifted, shifted_norm = _row_normalize(shifted_raw)
    data_hat, data_norm = _row_normalize(params.data_concepts)
    concepts_eff = np.concatenate([shifted, data_hat], axis=0)

    sims = concepts_eff @ x.T
    inst_w = _softmax(sims / cfg.tau_inst, axis=1)
    feats = inst_w @ x

    fhat, fnorm = _row_normalize(feats)
    cos_bag = (feats @ prompts.T) / fnorm[:, None]
    bag_w = _softmax(cos_bag / cfg.tau_bag, axis=0)
    class_feats = bag_w.T @ feats

    hidden_pre = class_feats @ params.w_down
    hidden = np.maximum(hidden_pre, 0.0)
    adapted = cfg.adapter_alpha * (hidden @ params.w_up) + (
        1.0 - cfg.adapter_alpha
    ) * class_feats

    gnorm = np.linalg.norm(adapted, axis=1)
    if np.any(gnorm <= 1e-12):
        raise ZeroVector("adapted class feature collapsed to zero")
    ghat = adapted / gnorm[:, None]
    cos_cls = np.sum(ghat * prompts, axis=1)
    logits = cos_cls / cfg.tau_cls
    probs = _softmax(logits, axis=0)

    ce = -float(np.log(probs[label]))
    total = ce + cfg.orth_weight * orth_loss(params.data_concepts)

    # ---- backward ----
    dlogits = probs.copy()
    dlogits[label] -= 1.0

    # logits = cos(adapted, prompt) / tau_cls with unit prompts
    dcos_cls = dlogits / cfg.tau_cls
    dadapted = dcos_cls[:, None] * (prompts - cos_cls[:, None] * ghat) / gnorm[:, None]

    # adapter
    dw_up = cfg.adapter_alpha * hidden.T @ dadapted
    dhidden_pre = cfg.adapter_alpha * (dadapted @ params.w_up.T) * (hidden_pre > 0)
    dw_down = class_feats.T @ dhidden_pre
    dclass_feats = dhidden_pre @ params.w_down.T + (1.0 - cfg.adapter_alpha) * dadapted

    # class_feats = bag_w.T @ feats
    dbag_w = feats @ dclass_feats.T  # (J, C)
    dfeats = bag_w @ dclass_feats  # (J, d)

    # bag_w = column softmax of cos_bag / tau_bag
    dq = bag_w * (dbag_w - np.sum(bag_w * dbag_w, axis=0, keepdims=True))
    dcos_bag = dq / cfg.tau_bag

    # cos_bag[j, y] = (f_j . p_y) / |f_j|
    dfeats += (
        dcos_bag @ prompts
        - np.sum(dcos_bag * cos_bag, axis=1, keepdims=True) * fhat
    ) / fnorm[:, None]

    # feats = inst_w @ x
    dinst_w = dfeats @ x.T
    dsims = inst_w * (dinst_w - np.sum(inst_w * dinst_w, axis=1, keepdims=True))
    dsims /= cfg.tau_inst

    # sims = concepts_eff @ x.T
    dconcepts_eff = dsims @ x

    # split into frozen-shifted rows and data rows, undo normalization
    dshifted = dconcepts_eff[:m]
    ddata_hat = dconcepts_eff[m:]
    dshifted_raw = (
        dshifted - np.sum(dshifted * shifted, axis=1, keepdims=True) * shifted
    ) / shifted_norm[:, None]
    ddata = (
        ddata_hat - np.sum(ddata_hat * data_hat, axis=1, keepdims=True) * data_hat
    ) / data_norm[:, None]

    # shifted_raw = frozen + coeffs @ basis.T
    dcontext_coeffs = dshifted_raw @ params.context_basis
    dcontext_basis = dshifted_raw.T @ params.context_coeffs

    ddata += cfg.orth_weight * _orth_backward(params.data_concepts)

    return total, HeadGrads(
        data_concepts=ddata,
        context_basis=dcontext_basis,
        context_coeffs=dcontext_coeffs,
        w_down=dw_down,
        w_up=dw_up,
    )


def grad(
    bag: EmbeddingBag | np.ndarray,
    concepts: ConceptSet,
    params: HeadParams,
    label: int,
) -> HeadGrads:
    return loss_and_grad(bag, concepts, params, label)[1]


def predict(
    bag: EmbeddingBag | np.ndarray, concepts: ConceptSet, params: HeadParams
) -> tuple[int, np.ndarray]:
    """(argmax class, class probabilities) for one bag."""
    trace = forward(bag, concepts, params)
    return int(np.argmax(trace.logits)), trace.probs


def save_checkpoint(
    params: HeadParams, path: str | Path, seed: int | None = None
) -> None:
    """Versioned little-endian binary plus a JSON metadata sidecar."""
    path = Path(path)
    m = params.context_coeffs.shape[0]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<IIIIII",
                CHECKPOINT_VERSION,
                params.config.dim,
                params.config.context_rank,
                params.config.n_data_concepts,
                m,
                params.config.bottleneck_dim,
            )
        )
        for name in PARAM_FIELDS:
            fh.write(getattr(params, name).astype("<f8").tobytes(order="C"))
    meta = {
        "dim": params.config.dim,
        "context_rank": params.config.context_rank,
        "n_data_concepts": params.config.n_data_concepts,
        "n_instance_concepts": m,
        "adapter_ratio": params.config.adapter_ratio,
        "adapter_alpha": params.config.adapter_alpha,
        "tau_inst": params.config.tau_inst,
        "tau_bag": params.config.tau_bag,
        "tau_cls": params.config.tau_cls,
        "orth_weight": params.config.orth_weight,
        "seed": seed,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2, sort_keys=True)
    )


def load_checkpoint(path: str | Path) -> HeadParams:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    config = HeadConfig(
        dim=meta["dim"],
        n_data_concepts=meta["n_data_concepts"],
        context_rank=meta["context_rank"],
        adapter_ratio=meta["adapter_ratio"],
        adapter_alpha=meta["adapter_alpha"],
        tau_inst=meta["tau_inst"],
        tau_bag=meta["tau_bag"],
        tau_cls=meta["tau_cls"],
        orth_weight=meta["orth_weight"],
    )
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"bad checkpoint magic {magic!r}")
        header = fh.read(24)
        if len(header) != 24:
            raise TruncatedFile("checkpoint header truncated")
        version, dim, rank, k, m, bott = struct.unpack("<IIIIII", header)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint version {version}")
        shapes = {
            "data_concepts": (k, dim),
            "context_basis": (dim, rank),
            "context_coeffs": (m, rank),
            "w_down": (dim, bott),
            "w_up": (bott, dim),
        }
        arrays = {}
        for name in PARAM_FIELDS:
            shape = shapes[name]
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise TruncatedFile(f"checkpoint field {name} truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise TruncatedFile("trailing bytes after checkpoint payload")
    return HeadParams(config=config, **arrays)
