"""Simulation-parameter calibration: corrupt a clean corpus with each
candidate parameter range and keep the range whose mean metric lands
closest to a clinical target mean.

Noise ranges are searched against SNR, contrast (gamma) ranges against
ND-WGM. Motion has no reliable reference-free metric and is excluded by
construction; its presets are fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from t1qc.dataset import derive_seed
from t1qc.errors import DataError
from t1qc.metrics import TissueMasks, nd_wgm, snr
from t1qc.simulate import GammaParams, NoiseParams, simulate_gamma, simulate_noise
from t1qc.volume import Volume3D

__all__ = [
    "CandidateSet",
    "CalibrationTarget",
    "DEFAULT_NOISE_CANDIDATES",
    "DEFAULT_CONTRAST_CANDIDATES",
    "CLINICAL_TARGETS",
    "calibrate_range",
    "calibration_table_tsv",
]

DEFAULT_NOISE_CANDIDATES = (
    (0.0, 10.0),
    (5.0, 15.0),
    (10.0, 20.0),
    (15.0, 25.0),
    (20.0, 30.0),
    (25.0, 35.0),
)

DEFAULT_CONTRAST_CANDIDATES = (
    (-0.2, -0.05),
    (-0.25, -0.15),
    (-0.30, -0.15),
    (-0.35, -0.20),
    (-0.40, -0.25),
    (-0.45, -0.03),
    (-0.50, -0.35),
)

# Clinical reference means per severity: SNR 74/44/25 and ND-WGM
# 0.16/0.13/0.10 for grades 0/1/2.
CLINICAL_TARGETS = {
    ("snr", "moderate"): 44.0,
    ("snr", "severe"): 25.0,
    ("nd_wgm", "moderate"): 0.13,
    ("nd_wgm", "severe"): 0.10,
}


@dataclass
class CandidateSet:
    artefact: str  # noise | contrast
    ranges: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.artefact not in ("noise", "contrast"):
            raise DataError(f"calibration artefact must be noise or contrast, got {self.artefact!r}")
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        if not self.ranges:
            raise DataError("candidate set must be non-empty")
        for lo, hi in self.ranges:
            if lo > hi:
                raise DataError(f"candidate range [{lo}, {hi}] has lo > hi")

    @classmethod
    def default(cls, artefact: str) -> "CandidateSet":
        if artefact == "noise":
            return cls("noise", DEFAULT_NOISE_CANDIDATES)
        if artefact in ("contrast", "gamma"):
            return cls("contrast", DEFAULT_CONTRAST_CANDIDATES)
        raise DataError(f"no default candidates for artefact {artefact!r}")


@dataclass
class CalibrationTarget:
    metric: str  # snr | nd_wgm
    target_mean: float
    severity: str = "moderate"

    def __post_init__(self) -> None:
        if self.metric not in ("snr", "nd_wgm"):
            raise DataError(f"calibration metric must be snr or nd_wgm, got {self.metric!r}")
        self.target_mean = float(self.target_mean)
        if not np.isfinite(self.target_mean):
            raise DataError("target_mean must be finite")
        if self.metric == "snr" and self.target_mean <= 0:
            raise DataError("snr target must be positive")


_METRIC_FOR_ARTEFACT = {"noise": "snr", "contrast": "nd_wgm"}


def calibrate_range(
    corpus: list[tuple[Volume3D, TissueMasks]],
    candidates: CandidateSet,
    target: CalibrationTarget,
    seed: int = 0,
    repetitions: int = 1,
    ids: list[str] | None = None,
) -> tuple[tuple[float, float], list[dict]]:
    """Pick the candidate range whose corpus-mean metric is closest to the
    target mean; ties break toward the earlier-listed range.

    Every volume is corrupted once per range per repetition with a seed
    derived from (master seed, volume index, repetition), so per-range
    means are reproducible bit-identically and independent of scheduling.
    """
    if not corpus:
        raise DataError("calibration corpus is empty")
    if repetitions < 1:
        raise DataError("repetitions must be >= 1")
    if _METRIC_FOR_ARTEFACT[candidates.artefact] != target.metric:
        raise DataError(
            f"{candidates.artefact} candidates are calibrated against "
            f"{_METRIC_FOR_ARTEFACT[candidates.artefact]}, not {target.metric}"
        )
    if ids is None:
        ids = [f"volume-{i:04d}" for i in range(len(corpus))]

    table: list[dict] = []
    for lo, hi in candidates.ranges:
        values = []
        for vi, (vol, masks) in enumerate(corpus):
            for rep in range(repetitions):
                item_seed = derive_seed(seed, vi, rep)
                if candidates.artefact == "noise":
                    corrupted, _ = simulate_noise(vol, NoiseParams((lo, hi), seed=item_seed))
                else:
                    corrupted, _ = simulate_gamma(vol, GammaParams((lo, hi), seed=item_seed))
                try:
                    value = (
                        snr(corrupted, masks)
                        if target.metric == "snr"
                        else nd_wgm(corrupted, masks)
                    )
                except Exception as exc:
                    raise DataError(
                        f"metric {target.metric} failed on image {ids[vi]} "
                        f"for range [{lo}, {hi}]: {exc}"
                    ) from exc
                values.append(value)
        mean = float(np.mean(values))
        table.append(
            {
                "range": (lo, hi),
                "mean": mean,
                "abs_error": abs(mean - target.target_mean),
                "n": len(values),
            }
        )
    best = min(range(len(table)), key=lambda i: (table[i]["abs_error"], i))
    return table[best]["range"], table


def calibration_table_tsv(table: list[dict]) -> str:
    lines = ["range_lo\trange_hi\tmean\tabs_error\tn"]
    for row in table:
        lo, hi = row["range"]
        lines.append(f"{lo!r}\t{hi!r}\t{row['mean']!r}\t{row['abs_error']!r}\t{row['n']}")
    return "\n".join(lines) + "\n"


def calibration_result_json(
    chosen: tuple[float, float], table: list[dict], target: CalibrationTarget
) -> str:
    payload = {
        "chosen_range": list(chosen),
        "metric": target.metric,
        "severity": target.severity,
        "target_mean": target.target_mean,
        "table": [
            {"range": list(r["range"]), "mean": r["mean"], "abs_error": r["abs_error"], "n": r["n"]}
            for r in table
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"
