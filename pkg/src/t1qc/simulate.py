"""Synthetic artefact generators: k-space composite motion, additive
Gaussian noise, and gamma contrast degradation.

All generators are deterministic functions of (volume, params): the params
carry the seed, and identical triples produce bit-identical outputs.

Gamma convention: the corrupted image is ``I ** exp(beta)`` computed on
min-max normalized intensities and rescaled to the original range.
Negative beta gives exponents below 1, which compresses the bright end of
the histogram and lowers white/grey-matter contrast; the moderate/severe
presets therefore use negative beta ranges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from t1qc.errors import DataError
from t1qc.volume import (
    KSpace,
    RigidTransform,
    Volume3D,
    denormalize_minmax,
    fft3,
    ifft3,
    normalize_minmax,
    resample_rigid,
)

__all__ = [
    "MotionParams",
    "NoiseParams",
    "GammaParams",
    "SeverityPreset",
    "PRESETS",
    "preset",
    "simulate_motion",
    "simulate_noise",
    "simulate_gamma",
]


def _check_range(lo: float, hi: float, name: str) -> tuple[float, float]:
    lo, hi = float(lo), float(hi)
    if lo > hi:
        raise DataError(f"{name} range must satisfy lo <= hi, got [{lo}, {hi}]")
    return lo, hi


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *key])))


@dataclass
class MotionParams:
    """Composite-motion parameters: the subject takes ``num_positions``
    extra positions during acquisition; per-axis rotation/translation
    magnitudes are drawn uniformly from the ranges with random signs."""

    num_positions: int = 4
    rotation_range: tuple[float, float] = (2.0, 4.0)
    translation_range: tuple[float, float] = (2.0, 4.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_positions < 1:
            raise DataError("num_positions must be >= 1")
        self.rotation_range = _check_range(*self.rotation_range, "rotation")
        self.translation_range = _check_range(*self.translation_range, "translation")
        if self.rotation_range[0] < 0 or self.translation_range[0] < 0:
            raise DataError("rotation/translation ranges are magnitudes and must be >= 0")


@dataclass
class NoiseParams:
    """Additive zero-mean Gaussian noise with standard deviation drawn
    uniformly from ``sigma_range`` (in raw intensity units)."""

    sigma_range: tuple[float, float] = (5.0, 15.0)
    seed: int = 0

    def __post_init__(self) -> None:
        self.sigma_range = _check_range(*self.sigma_range, "sigma")
        if self.sigma_range[0] < 0:
            raise DataError("sigma range must be >= 0")


@dataclass
class GammaParams:
    """Contrast degradation with exponent ``exp(beta)``, beta drawn
    uniformly from ``beta_range`` (typically negative)."""

    beta_range: tuple[float, float] = (-0.2, -0.05)
    seed: int = 0

    def __post_init__(self) -> None:
        self.beta_range = _check_range(*self.beta_range, "beta")


@dataclass
class SeverityPreset:
    artefact: str
    severity: str
    params: MotionParams | NoiseParams | GammaParams


def _build_presets() -> dict[tuple[str, str], SeverityPreset]:
    table: dict[tuple[str, str], SeverityPreset] = {}
    entries = [
        ("motion", "moderate", MotionParams(rotation_range=(2.0, 4.0), translation_range=(2.0, 4.0))),
        ("motion", "severe", MotionParams(rotation_range=(5.0, 8.0), translation_range=(5.0, 8.0))),
        ("noise", "moderate", NoiseParams(sigma_range=(5.0, 15.0))),
        ("noise", "severe", NoiseParams(sigma_range=(15.0, 25.0))),
        ("contrast", "moderate", GammaParams(beta_range=(-0.2, -0.05))),
        ("contrast", "severe", GammaParams(beta_range=(-0.45, -0.3))),
    ]
    for artefact, severity, params in entries:
        table[(artefact, severity)] = SeverityPreset(artefact, severity, params)
    return table


PRESETS = _build_presets()

ARTEFACTS = ("motion", "noise", "contrast")
SEVERITIES = ("moderate", "severe")


def preset(artefact: str, severity: str, seed: int = 0) -> SeverityPreset:
    """Look up a severity preset; 'gamma' is accepted as an alias for
    'contrast'. A fresh params object is returned carrying ``seed``."""
    artefact = {"gamma": "contrast"}.get(artefact, artefact)
    key = (artefact, severity)
    if key not in PRESETS:
        valid = ", ".join(f"{a}:{s}" for a, s in PRESETS)
        raise DataError(f"unknown preset {artefact}:{severity}; valid presets: {valid}")
    base = PRESETS[key]
    params = type(base.params)(**{**base.params.__dict__, "seed": seed})
    return SeverityPreset(base.artefact, base.severity, params)


# --------------------------------------------------------------------------
# Generators


def simulate_gamma(vol: Volume3D, p: GammaParams) -> tuple[Volume3D, float]:
    """Degrade contrast by the power law ``x ** exp(beta)`` on min-max
    normalized intensities, rescaled back to the original range."""
    rng = _rng(p.seed)
    lo, hi = p.beta_range
    beta = float(rng.uniform(lo, hi)) if hi > lo else lo
    norm, vmin, vmax = normalize_minmax(vol)
    powered = np.power(norm.data.astype(np.float64), np.exp(beta))
    out = denormalize_minmax(norm.with_data(powered), vmin, vmax)
    return vol.with_data(out.data.astype(vol.data.dtype)), beta


def simulate_noise(vol: Volume3D, p: NoiseParams) -> tuple[Volume3D, float]:
    """Add independent zero-mean Gaussian noise in the raw intensity
    domain."""
    rng = _rng(p.seed)
    lo, hi = p.sigma_range
    sigma = float(rng.uniform(lo, hi)) if hi > lo else lo
    if sigma == 0.0:
        return vol.copy(), 0.0
    noise = rng.standard_normal(vol.dims, dtype=np.float64)
    out = vol.data.astype(np.float64) + sigma * noise
    return vol.with_data(out.astype(vol.data.dtype)), sigma


def _sample_transforms(p: MotionParams, rng: np.random.Generator) -> list[RigidTransform]:
    transforms = []
    for _ in range(p.num_positions):
        rot_mag = rng.uniform(p.rotation_range[0], p.rotation_range[1], size=3)
        rot_sign = rng.choice([-1.0, 1.0], size=3)
        tr_mag = rng.uniform(p.translation_range[0], p.translation_range[1], size=3)
        tr_sign = rng.choice([-1.0, 1.0], size=3)
        transforms.append(
            RigidTransform(rotation=tuple(rot_mag * rot_sign), translation=tuple(tr_mag * tr_sign))
        )
    return transforms


def compose_motion_kspace(vol: Volume3D, positions: list[RigidTransform]) -> KSpace:
    """Assemble a composite spectrum: the slowest storage axis is split
    into ``len(positions)`` contiguous equal blocks and block j is taken
    from the spectrum of the volume resampled at position j."""
    if not positions:
        raise DataError("at least one position is required")
    n = vol.dims[0]
    n_blocks = len(positions)
    bounds = [round(j * n / n_blocks) for j in range(n_blocks + 1)]
    composite = np.empty(vol.dims, dtype=np.complex128)
    base_k: KSpace | None = None
    for j, t in enumerate(positions):
        start, stop = bounds[j], bounds[j + 1]
        if start >= stop:
            continue
        if t.is_identity():
            if base_k is None:
                base_k = fft3(vol)
            k = base_k
        else:
            k = fft3(resample_rigid(vol, t))
        composite[start:stop] = k.data[start:stop]
    return KSpace(composite, spacing=vol.spacing, affine=vol.affine.copy())


def simulate_motion(vol: Volume3D, p: MotionParams) -> tuple[Volume3D, list[RigidTransform]]:
    """Corrupt with composite rigid motion: ``num_positions`` sampled
    positions plus the original one, whose spectra fill contiguous blocks
    of k-space along the slowest axis. The result is clamped to the
    input's intensity range."""
    rng = _rng(p.seed)
    transforms = _sample_transforms(p, rng)
    positions = [RigidTransform()] + transforms
    k = compose_motion_kspace(vol, positions)
    out = ifft3(k).data
    np.clip(out, float(vol.data.min()), float(vol.data.max()), out=out)
    return vol.with_data(out.astype(vol.data.dtype)), transforms


def apply_preset(vol: Volume3D, sp: SeverityPreset) -> tuple[Volume3D, dict]:
    """Apply a preset and return the corrupted volume plus a provenance
    record of the sampled parameters."""
    if isinstance(sp.params, MotionParams):
        out, transforms = simulate_motion(vol, sp.params)
        prov = {
            "artefact": "motion",
            "severity": sp.severity,
            "seed": sp.params.seed,
            "num_positions": sp.params.num_positions,
            "rotations": [list(t.rotation) for t in transforms],
            "translations": [list(t.translation) for t in transforms],
        }
    elif isinstance(sp.params, NoiseParams):
        out, sigma = simulate_noise(vol, sp.params)
        prov = {"artefact": "noise", "severity": sp.severity, "seed": sp.params.seed, "sigma": sigma}
    elif isinstance(sp.params, GammaParams):
        out, beta = simulate_gamma(vol, sp.params)
        prov = {"artefact": "contrast", "severity": sp.severity, "seed": sp.params.seed, "beta": beta}
    else:
        raise DataError(f"unknown params type {type(sp.params).__name__}")
    return out, prov
