"""Stain normalization of H&E images to a reference staining profile.

Stains mix linearly in optical-density space, so the pipeline is:
RGB -> OD -> estimate per-image stain vectors + concentrations ->
rescale concentrations to the reference -> reconstruct through the
reference stain matrix -> RGB.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateStains, NoTissue

DEFAULT_BETA = 0.15
DEFAULT_ALPHA_PCT = 1.0
DEFAULT_I0 = 255.0
DEFAULT_CONC_PERCENTILE = 99.0

MIN_TISSUE_PIXELS = 100
COLLINEARITY_LIMIT = 0.999


@dataclass(frozen=True)
class StainFitParams:
    """Parameters of the stain estimation step.

    beta: OD Euclidean-norm threshold separating tissue from background.
    alpha_pct: robust angle percentile for the extreme stain directions.
    i0: transmitted-light intensity (white level).
    conc_percentile: percentile defining the per-stain reference concentration.
    """

    beta: float = DEFAULT_BETA
    alpha_pct: float = DEFAULT_ALPHA_PCT
    i0: float = DEFAULT_I0
    conc_percentile: float = DEFAULT_CONC_PERCENTILE


@dataclass
class StainProfile:
    """Fitted stain matrix (3x2, unit columns) and per-stain max concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray
    fit_params: StainFitParams = field(default_factory=StainFitParams)

    def to_json(self) -> str:
        doc = {
            "stain_matrix": [float(v) for v in self.stain_matrix.reshape(-1)],
            "max_concentrations": [float(v) for v in self.max_concentrations],
            "fit_params": {
                "beta": self.fit_params.beta,
                "alpha_pct": self.fit_params.alpha_pct,
                "i0": self.fit_params.i0,
                "conc_percentile": self.fit_params.conc_percentile,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        doc = json.loads(text)
        matrix = np.asarray(doc["stain_matrix"], dtype=np.float64).reshape(3, 2)
        maxc = np.asarray(doc["max_concentrations"], dtype=np.float64)
        params = StainFitParams(**doc.get("fit_params", {}))
        return cls(stain_matrix=matrix, max_concentrations=maxc, fit_params=params)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "StainProfile":
        return cls.from_json(Path(path).read_text())


def rgb_to_od(img: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Convert 8-bit RGB to optical density, od = -log10((pixel+1)/i0).

    The +1 offset keeps pure black finite; values are clamped at 0 so that
    near-white pixels (where pixel+1 > i0) do not go negative.
    """
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    od = -np.log10((img.astype(np.float64) + 1.0) / i0)
    return np.maximum(od, 0.0)


def od_to_rgb(od: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Invert rgb_to_od; round-trips 8-bit values within +/-1 per channel."""
    pixel = np.floor(i0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - 1.0 + 0.5)
    return np.clip(pixel, 0, 255).astype(np.uint8)


def _check_stain_matrix(stain_matrix: np.ndarray) -> None:
    s = np.asarray(stain_matrix, dtype=np.float64)
    if s.shape != (3, 2):
        raise ValueError(f"stain matrix must be 3x2, got {s.shape}")
    n0 = np.linalg.norm(s[:, 0])
    n1 = np.linalg.norm(s[:, 1])
    if n0 <= 1e-12 or n1 <= 1e-12:
        raise DegenerateStains("stain column has zero norm")
    cos = float(np.dot(s[:, 0], s[:, 1]) / (n0 * n1))
    if abs(cos) >= COLLINEARITY_LIMIT:
        raise DegenerateStains(f"stain columns near-collinear (|cos|={abs(cos):.5f})")


def compute_concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Per-pixel nonnegative stain concentrations.

    Solves the unconstrained normal equations of stain_matrix @ c = od_pixel
    and clamps negatives to zero. Input may have any leading shape with a
    trailing channel axis of 3; output has the same leading shape with 2.
    """
    s = np.asarray(stain_matrix, dtype=np.float64)
    _check_stain_matrix(s)
    od = np.asarray(od, dtype=np.float64)
    lead = od.shape[:-1]
    flat = od.reshape(-1, 3)
    gram_inv = np.linalg.inv(s.T @ s)
    conc = flat @ s @ gram_inv
    np.maximum(conc, 0.0, out=conc)
    return conc.reshape(*lead, 2)


def fit_stain_profile(
    img: np.ndarray,
    beta: float = DEFAULT_BETA,
    alpha_pct: float = DEFAULT_ALPHA_PCT,
    i0: float = DEFAULT_I0,
    conc_percentile: float = DEFAULT_CONC_PERCENTILE,
) -> StainProfile:
    """Estimate the two dominant stain vectors and reference concentrations.

    Steps: keep tissue pixels (OD norm > beta); take the top-2 eigenvectors
    of the tissue-OD covariance as a plane, each oriented to a nonnegative
    component sum; project tissue OD to angles in that plane; the stain
    vectors are the plane directions at the alpha_pct and (100 - alpha_pct)
    angle percentiles, unit-normalized and ordered so the first column has
    the larger red-channel OD component.

    Raises NoTissue when fewer than 100 pixels clear beta and
    DegenerateStains when the estimated columns are near-collinear.
    """
    od = rgb_to_od(img, i0=i0).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > beta]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise NoTissue(
            f"only {tissue.shape[0]} pixels above OD norm {beta}, "
            f"need {MIN_TISSUE_PIXELS}"
        )

    cov = np.cov(tissue, rowvar=False)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh sorts ascending; plane basis = two largest, sign-fixed.
    e1 = eigvecs[:, 2]
    e2 = eigvecs[:, 1]
    if e1.sum() < 0:
        e1 = -e1
    if e2.sum() < 0:
        e2 = -e2

    angles = np.arctan2(tissue @ e2, tissue @ e1)
    phi_lo = np.percentile(angles, alpha_pct)
    phi_hi = np.percentile(angles, 100.0 - alpha_pct)
    v_lo = np.cos(phi_lo) * e1 + np.sin(phi_lo) * e2
    v_hi = np.cos(phi_hi) * e1 + np.sin(phi_hi) * e2
    v_lo /= np.linalg.norm(v_lo)
    v_hi /= np.linalg.norm(v_hi)

    # First column = larger red-channel OD component.
    if v_lo[0] >= v_hi[0]:
        stain_matrix = np.stack([v_lo, v_hi], axis=1)
    else:
        stain_matrix = np.stack([v_hi, v_lo], axis=1)
    _check_stain_matrix(stain_matrix)

    conc = compute_concentrations(od, stain_matrix)
    max_conc = np.percentile(conc, conc_percentile, axis=0)
    if np.any(max_conc <= 0):
        raise DegenerateStains("non-positive reference concentration")

    return StainProfile(
        stain_matrix=stain_matrix,
        max_concentrations=np.asarray(max_conc, dtype=np.float64),
        fit_params=StainFitParams(
            beta=beta, alpha_pct=alpha_pct, i0=i0, conc_percentile=conc_percentile
        ),
    )


def default_stain_profile() -> StainProfile:
    """The checked-in reference profile, fitted from the synthetic
    generator's canonical slide (seed 0, index 0). Real deployments should
    fit their own via the normalize command."""
    from importlib.resources import files

    text = files("plexkit").joinpath("data/default_stain_profile.json").read_text()
    return StainProfile.from_json(text)


def normalize_to_reference(
    img: np.ndarray,
    ref: StainProfile,
    params: StainFitParams | None = None,
) -> np.ndarray:
    """Map an image's staining onto the reference profile.

    Fits the source image's own profile, rescales its concentrations per
    stain by ref.max / source.max, and reconstructs through the reference
    stain matrix. Propagates NoTissue / DegenerateStains from the fit.
    """
    if params is None:
        params = ref.fit_params
    src = fit_stain_profile(
        img,
        beta=params.beta,
        alpha_pct=params.alpha_pct,
        i0=params.i0,
        conc_percentile=params.conc_percentile,
    )
    od = rgb_to_od(img, i0=params.i0)
    conc = compute_concentrations(od, src.stain_matrix)
    scale = ref.max_concentrations / src.max_concentrations
    od_out = (conc * scale) @ ref.stain_matrix.T
    return od_to_rgb(od_out, i0=params.i0)
