"""Artefact severity metrics.

* ``nd_wgm`` — normalised difference of white- and grey-matter mean
  intensities, |(WM - GM) / (WM + GM)|; lower means poorer contrast.
* ``snr`` — white-matter mean over the air standard deviation; lower
  means noisier.
* ``average_edge_strength`` and ``tenengrad`` — reference-free sharpness
  measures used for motion severity studies.

nd_wgm and snr operate on raw intensities; both are invariant under
positive global rescaling.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from t1qc.errors import DataError, NumericalError
from t1qc.volume import Volume3D

__all__ = [
    "TissueMasks",
    "MetricReport",
    "nd_wgm",
    "snr",
    "average_edge_strength",
    "tenengrad",
    "estimate_air_mask",
]


@dataclass
class TissueMasks:
    """Binary white-matter / grey-matter / air masks aligned to a volume.
    Any of the three may be empty when unused by a given metric."""

    wm: np.ndarray
    gm: np.ndarray
    air: np.ndarray

    def __post_init__(self) -> None:
        self.wm = np.asarray(self.wm, dtype=bool)
        self.gm = np.asarray(self.gm, dtype=bool)
        self.air = np.asarray(self.air, dtype=bool)
        if not (self.wm.shape == self.gm.shape == self.air.shape):
            raise DataError("wm/gm/air masks must share one shape")
        if np.any(self.wm & self.gm) or np.any(self.wm & self.air) or np.any(self.gm & self.air):
            raise DataError("wm/gm/air masks must be pairwise disjoint")

    @classmethod
    def empty(cls, dims: tuple[int, int, int]) -> "TissueMasks":
        z = np.zeros(dims, dtype=bool)
        return cls(wm=z.copy(), gm=z.copy(), air=z.copy())


def _check_aligned(vol: Volume3D, masks: TissueMasks) -> None:
    if masks.wm.shape != vol.dims:
        raise DataError(f"masks shaped {masks.wm.shape} do not match volume dims {vol.dims}")


def nd_wgm(vol: Volume3D, masks: TissueMasks) -> float:
    """Normalised difference of white and grey matter mean intensities."""
    _check_aligned(vol, masks)
    if not masks.wm.any():
        raise DataError("empty mask: wm")
    if not masks.gm.any():
        raise DataError("empty mask: gm")
    wm_mean = float(vol.data[masks.wm].mean(dtype=np.float64))
    gm_mean = float(vol.data[masks.gm].mean(dtype=np.float64))
    denom = wm_mean + gm_mean
    if denom == 0.0:
        raise NumericalError("zero denominator: wm mean + gm mean is 0")
    return abs((wm_mean - gm_mean) / denom)


def snr(vol: Volume3D, masks: TissueMasks) -> float:
    """White-matter mean intensity over the air standard deviation
    (population form)."""
    _check_aligned(vol, masks)
    if not masks.wm.any():
        raise DataError("empty mask: wm")
    if not masks.air.any():
        raise DataError("empty mask: air")
    wm_mean = float(vol.data[masks.wm].mean(dtype=np.float64))
    air_std = float(vol.data[masks.air].std(dtype=np.float64))
    if air_std == 0.0:
        raise NumericalError("zero air standard deviation")
    return wm_mean / air_std


def _gradient_magnitude(data: np.ndarray, spacing: tuple[float, float, float]) -> np.ndarray:
    grads = np.gradient(data.astype(np.float64), *spacing)
    return np.sqrt(sum(g * g for g in grads))


def average_edge_strength(vol: Volume3D) -> float:
    """Mean gradient magnitude (central differences) over the voxels whose
    gradient magnitude exceeds its own Otsu threshold."""
    if float(vol.data.max()) == float(vol.data.min()):
        raise DataError("constant volume has no edges")
    gmag = _gradient_magnitude(vol.data, vol.spacing)
    thr = threshold_otsu(gmag)
    edges = gmag > thr
    if not edges.any():
        raise DataError("no edge voxels above the Otsu threshold")
    return float(gmag[edges].mean(dtype=np.float64))


def _sobel_normalized(data: np.ndarray, axis: int) -> np.ndarray:
    # scipy's sobel responds with 32x the slope (derivative kernel sums to
    # 2, each smoothing kernel to 4); normalize so a unit ramp reads 1
    return ndimage.sobel(data, axis=axis, mode="reflect") / 32.0


def tenengrad(vol: Volume3D) -> float:
    """Mean squared Sobel gradient magnitude over the foreground bounding
    box (Otsu-thresholded); 0 for constant volumes."""
    data = vol.data.astype(np.float64)
    if float(data.max()) == float(data.min()):
        return 0.0
    fg = data > threshold_otsu(data)
    if not fg.any():
        bbox = tuple(slice(0, s) for s in vol.dims)
    else:
        idx = np.nonzero(fg)
        bbox = tuple(slice(int(a.min()), int(a.max()) + 1) for a in idx)
    sq = sum(_sobel_normalized(data, axis)[bbox] ** 2 for axis in range(3))
    return float(np.mean(sq, dtype=np.float64))


# Corner blocks used by the fallback air estimator: six of the eight grid
# octants, lexicographically first by (x, y, z) corner index.
_AIR_CORNERS = [(0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0), (1, 0, 1)]


def estimate_air_mask(vol: Volume3D) -> TissueMasks:
    """Crude air-region fallback for volumes without external
    segmentations: voxels at or below the global 10th intensity
    percentile, restricted to six corner octants. Constant volumes yield
    an empty mask."""
    masks = TissueMasks.empty(vol.dims)
    if float(vol.data.max()) == float(vol.data.min()):
        return masks
    p10 = float(np.percentile(vol.data, 10.0))
    corners = np.zeros(vol.dims, dtype=bool)
    half = [d // 2 for d in vol.dims]
    for cx, cy, cz in _AIR_CORNERS:
        sl = tuple(
            slice(0, h) if c == 0 else slice(h, d)
            for c, h, d in zip((cx, cy, cz), half, vol.dims)
        )
        corners[sl] = True
    masks.air = corners & (vol.data <= p10)
    return masks


# --------------------------------------------------------------------------
# Reporting


@dataclass
class MetricReport:
    """Per-image metric rows plus per-metric summary statistics."""

    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, image_id: str, metric: str, value: float) -> None:
        if not np.isfinite(value):
            raise NumericalError(f"non-finite {metric} for {image_id}")
        self.rows.append((image_id, metric, float(value)))

    def values(self, metric: str) -> list[float]:
        return [v for _, m, v in self.rows if m == metric]

    def summary(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for metric in sorted({m for _, m, _ in self.rows}):
            vals = sorted(self.values(metric))
            q1, q3 = np.percentile(vals, [25.0, 75.0])
            out[metric] = {
                "n": len(vals),
                "mean": float(np.mean(vals)),
                "median": float(statistics.median(vals)),
                "iqr": float(q3 - q1),
            }
        return out

    def to_tsv(self) -> str:
        lines = ["image_id\tmetric\tvalue"]
        for image_id, metric, value in self.rows:
            lines.append(f"{image_id}\t{metric}\t{value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "MetricReport":
        lines = [ln for ln in text.splitlines() if ln]
        if not lines or lines[0] != "image_id\tmetric\tvalue":
            raise DataError("malformed metric report: bad header")
        report = cls()
        for ln in lines[1:]:
            image_id, metric, value = ln.split("\t")
            report.add(image_id, metric, float(value))
        return report

    def summary_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"
