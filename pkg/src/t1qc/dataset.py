"""Corpus bookkeeping: manifests, synthetic phantom generation, training
corpora with cross-artefact label composition, and subject-level splits.

A manifest is a TSV with the fixed header
``image_path  subject_id  grade_motion  grade_noise  grade_contrast  tier
split  fold  provenance_json``. Provenance records either ``{"real":
true}`` or the sampled corruption parameters, which are sufficient to
regenerate a corrupted image bit-identically.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from t1qc import evaluate
from t1qc.errors import DataError
from t1qc.metrics import TissueMasks
from t1qc.simulate import ARTEFACTS, SeverityPreset, apply_preset, preset
from t1qc.volume import RigidTransform, Volume3D, load_nifti, save_nifti

__all__ = [
    "ArtefactGrades",
    "ManifestRow",
    "Manifest",
    "PhantomSpec",
    "TaskSamples",
    "TASKS",
    "generate_phantoms",
    "write_phantom_corpus",
    "build_pretrain_corpus",
    "build_tier_corpus",
    "split_by_subject",
    "select_task",
    "derive_seed",
]

MANIFEST_HEADER = (
    "image_path\tsubject_id\tgrade_motion\tgrade_noise\tgrade_contrast"
    "\ttier\tsplit\tfold\tprovenance_json"
)

SPLITS = ("train", "validation", "test")

TASKS = (
    "motion0vs1",
    "motion01vs2",
    "noise0vs1",
    "noise0vs12",
    "contrast0vs1",
    "contrast01vs2",
    "tier1vs2",
    "tier12vs3",
)


def derive_seed(master: int, *key: int) -> int:
    """Deterministic per-item seed from a master seed and an index path,
    independent of worker scheduling."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in key]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class ArtefactGrades:
    """Per-artefact severity grades: 0 none, 1 moderate, 2 severe."""

    motion: int
    noise: int
    contrast: int

    def __post_init__(self) -> None:
        for name in ("motion", "noise", "contrast"):
            g = getattr(self, name)
            if g not in (0, 1, 2):
                raise DataError(f"{name} grade must be 0, 1 or 2, got {g!r}")

    def astuple(self) -> tuple[int, int, int]:
        return (self.motion, self.noise, self.contrast)


@dataclass
class ManifestRow:
    image_path: str
    subject_id: str
    grades: ArtefactGrades | None = None
    tier: int | None = None
    split: str | None = None
    fold: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise DataError("subject_id must be non-empty")
        if self.tier is not None and self.tier not in (1, 2, 3):
            raise DataError(f"tier must be 1, 2 or 3, got {self.tier!r}")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def subjects(self) -> list[str]:
        return sorted({r.subject_id for r in self.rows})

    def validate(self) -> None:
        """Check split/fold hygiene: a subject never straddles splits and
        sits in exactly one fold."""
        by_subject: dict[str, set] = {}
        folds_by_subject: dict[str, set] = {}
        for r in self.rows:
            by_subject.setdefault(r.subject_id, set())
            if r.split is not None:
                by_subject[r.subject_id].add(r.split)
            if r.fold is not None:
                folds_by_subject.setdefault(r.subject_id, set()).add(r.fold)
        for subject, splits in by_subject.items():
            if len(splits) > 1:
                raise DataError(f"subject {subject} appears in multiple splits: {sorted(splits)}")
        for subject, folds in folds_by_subject.items():
            if len(folds) > 1:
                raise DataError(f"subject {subject} appears in multiple folds: {sorted(folds)}")

    def to_tsv(self) -> str:
        lines = [MANIFEST_HEADER]
        for r in self.rows:
            g = r.grades
            prov = r.provenance if r.provenance else {}
            lines.append(
                "\t".join(
                    [
                        r.image_path,
                        r.subject_id,
                        "" if g is None else str(g.motion),
                        "" if g is None else str(g.noise),
                        "" if g is None else str(g.contrast),
                        "" if r.tier is None else str(r.tier),
                        "" if r.split is None else r.split,
                        "" if r.fold is None else str(r.fold),
                        json.dumps(prov, sort_keys=True),
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "Manifest":
        lines = [ln for ln in text.splitlines() if ln]
        if not lines or lines[0] != MANIFEST_HEADER:
            raise DataError("malformed manifest: unexpected header")
        rows = []
        for ln in lines[1:]:
            parts = ln.split("\t")
            if len(parts) != 9:
                raise DataError(f"malformed manifest row: {ln!r}")
            path, subject, gm, gn, gc, tier, split, fold, prov = parts
            grades = None
            if gm or gn or gc:
                if not (gm and gn and gc):
                    raise DataError(f"incomplete grades for {subject}")
                grades = ArtefactGrades(int(gm), int(gn), int(gc))
            provenance = json.loads(prov) if prov else {}
            if provenance == "real":
                provenance = {"real": True}
            rows.append(
                ManifestRow(
                    image_path=path,
                    subject_id=subject,
                    grades=grades,
                    tier=int(tier) if tier else None,
                    split=split or None,
                    fold=int(fold) if fold else None,
                    provenance=provenance,
                )
            )
        manifest = cls(rows)
        manifest.validate()
        return manifest

    def save(self, path: str | Path) -> None:
        """Write the TSV with image paths relative to the manifest's
        directory, so corpus trees are relocatable and reruns into
        different roots stay byte-identical."""
        path = Path(path)
        base = path.parent.resolve()
        copy = Manifest(
            [
                replace(
                    r,
                    image_path=os.path.relpath(Path(r.image_path).resolve(), base)
                    if Path(r.image_path).is_absolute()
                    else r.image_path,
                )
                for r in self.rows
            ]
        )
        path.write_text(copy.to_tsv())

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing manifest: {path}")
        manifest = cls.from_tsv(path.read_text())
        base = path.parent.resolve()
        for r in manifest.rows:
            if r.image_path and not Path(r.image_path).is_absolute():
                r.image_path = str((base / r.image_path).resolve())
        return manifest


# --------------------------------------------------------------------------
# Synthetic phantoms


@dataclass
class PhantomSpec:
    """Two-tissue head stand-in: a WM ellipsoid nested in a GM shell in
    air, with per-instance pose jitter, a smooth multiplicative intensity
    field over the tissue, and an optional additive noise floor that gives
    the air region a nonzero standard deviation."""

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    wm_intensity: float = 0.8
    gm_intensity: float = 0.6
    background: float = 0.0
    rotation_jitter: float = 8.0
    translation_jitter: float = 1.5
    axis_jitter: float = 0.08
    perturbation: float = 0.05
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.wm_intensity > self.gm_intensity > self.background >= 0):
            raise DataError("phantom intensities must satisfy WM > GM > background >= 0")
        if any(d < 8 for d in self.dims):
            raise DataError("phantom dims must be >= 8 per axis")


# GM semi-axes relative to the grid size; WM is a scaled-down copy.
_GM_AXES = (0.42, 0.36, 0.30)
_WM_SCALE = 0.62


def _phantom_instance(spec: PhantomSpec, index: int) -> tuple[Volume3D, TissueMasks]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))
    dims = np.asarray(spec.dims)
    center = (dims - 1) / 2.0 + rng.uniform(
        -spec.translation_jitter, spec.translation_jitter, size=3
    )
    gm_axes = np.array(_GM_AXES) * dims
    gm_axes = gm_axes * (1.0 + rng.uniform(-spec.axis_jitter, spec.axis_jitter, size=3))
    wm_axes = gm_axes * _WM_SCALE
    angles = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter, size=3)
    rot = RigidTransform(rotation=tuple(angles)).rotation_matrix()

    grid = np.stack(
        np.meshgrid(*[np.arange(d, dtype=np.float64) for d in spec.dims], indexing="ij"),
        axis=-1,
    )
    local = (grid - center) @ rot  # rotate coordinates into ellipsoid frame
    gm_mask = (np.square(local / gm_axes).sum(axis=-1)) <= 1.0
    wm_mask = (np.square(local / wm_axes).sum(axis=-1)) <= 1.0
    gm_only = gm_mask & ~wm_mask
    air_mask = ~gm_mask

    data = np.full(spec.dims, spec.background, dtype=np.float64)
    data[wm_mask] = spec.wm_intensity
    data[gm_only] = spec.gm_intensity
    if spec.perturbation > 0:
        fld = ndimage.gaussian_filter(rng.standard_normal(spec.dims), sigma=min(spec.dims) / 8)
        fld /= max(np.abs(fld).max(), 1e-12)
        data[gm_mask] *= 1.0 + spec.perturbation * fld[gm_mask]
    if spec.noise_sigma > 0:
        data += spec.noise_sigma * rng.standard_normal(spec.dims)

    vol = Volume3D(data=data.astype(np.float32), spacing=spec.spacing)
    masks = TissueMasks(wm=wm_mask, gm=gm_only, air=air_mask)
    return vol, masks


def generate_phantoms(
    spec: PhantomSpec, n: int
) -> tuple[list[tuple[Volume3D, TissueMasks]], Manifest]:
    """Generate ``n`` distinct phantoms with exact masks and a clean
    manifest (grades (0,0,0), tier 1). Paths in the manifest are relative
    until the corpus is written to disk."""
    if n < 1:
        raise DataError("phantom count must be >= 1")
    items = []
    rows = []
    for i in range(n):
        vol, masks = _phantom_instance(spec, i)
        subject = f"sub-{i:04d}"
        items.append((vol, masks))
        rows.append(
            ManifestRow(
                image_path=f"{subject}/image.nii.gz",
                subject_id=subject,
                grades=ArtefactGrades(0, 0, 0),
                tier=1,
                provenance={"clean": True, "phantom_seed": spec.seed, "phantom_index": i},
            )
        )
    return items, Manifest(rows)


MASK_FILES = {"wm": "mask_wm.nii.gz", "gm": "mask_gm.nii.gz", "air": "mask_air.nii.gz"}


def write_phantom_corpus(
    spec: PhantomSpec, n: int, out_dir: str | Path
) -> tuple[Manifest, Path]:
    """Generate and persist a phantom corpus: one directory per subject
    holding the image and its exact masks, plus ``manifest.tsv``."""
    out_dir = Path(out_dir)
    if not out_dir.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out_dir.parent} does not exist")
    out_dir.mkdir(exist_ok=True)
    items, manifest = generate_phantoms(spec, n)
    for (vol, masks), row in zip(items, manifest.rows):
        subject_dir = out_dir / row.subject_id
        subject_dir.mkdir(exist_ok=True)
        save_nifti(vol, subject_dir / "image.nii.gz")
        for name, fname in MASK_FILES.items():
            mask_vol = vol.with_data(getattr(masks, name).astype(np.float32))
            save_nifti(mask_vol, subject_dir / fname)
        row.image_path = str(subject_dir / "image.nii.gz")
    manifest_path = out_dir / "manifest.tsv"
    manifest.save(manifest_path)
    return manifest, manifest_path


def masks_for_image(image_path: str | Path) -> TissueMasks | None:
    """Load the mask files conventionally stored beside an image, if any."""
    image_path = Path(image_path)
    paths = {name: image_path.parent / fname for name, fname in MASK_FILES.items()}
    if not all(p.exists() for p in paths.values()):
        return None
    loaded = {name: load_nifti(p).data > 0.5 for name, p in paths.items()}
    return TissueMasks(**loaded)


# --------------------------------------------------------------------------
# Corpus builders


def _default_presets(seed: int) -> list[SeverityPreset]:
    return [preset(a, s, seed=seed) for a in ARTEFACTS for s in ("moderate", "severe")]


def _check_clean(clean: Manifest) -> None:
    if not clean.rows:
        raise DataError("empty clean manifest")
    for r in clean.rows:
        if r.grades is None or r.grades.astuple() != (0, 0, 0):
            raise DataError(f"clean manifest requires grades (0,0,0); {r.subject_id} differs")


def grades_for_severity(artefact: str, severity: str) -> ArtefactGrades:
    grade = {"moderate": 1, "severe": 2}[severity]
    kwargs = {"motion": 0, "noise": 0, "contrast": 0}
    kwargs[artefact] = grade
    return ArtefactGrades(**kwargs)


def _corrupt_row(
    row: ManifestRow,
    artefact: str,
    severity: str,
    seed: int,
    out_dir: Path,
    cache: dict,
) -> ManifestRow:
    sp = preset(artefact, severity, seed=seed)
    if row.image_path not in cache:
        cache[row.image_path] = load_nifti(row.image_path)
    out, prov = apply_preset(cache[row.image_path], sp)
    prov["source"] = row.image_path
    _record_ranges(prov, sp)
    subject_dir = out_dir / row.subject_id
    subject_dir.mkdir(exist_ok=True)
    out_path = subject_dir / f"{artefact}_{severity}.nii.gz"
    save_nifti(out, out_path)
    grades = grades_for_severity(artefact, severity)
    return ManifestRow(
        image_path=str(out_path),
        subject_id=row.subject_id,
        grades=grades,
        tier=evaluate.grades_to_tier(grades),
        provenance=prov,
    )


def _record_ranges(prov: dict, sp: SeverityPreset) -> None:
    p = sp.params
    if prov["artefact"] == "motion":
        prov["rotation_range"] = list(p.rotation_range)
        prov["translation_range"] = list(p.translation_range)
    elif prov["artefact"] == "noise":
        prov["sigma_range"] = list(p.sigma_range)
    else:
        prov["beta_range"] = list(p.beta_range)


def build_pretrain_corpus(
    clean: Manifest, out_dir: str | Path, seed: int = 0
) -> Manifest:
    """Build the six-variant artefact pool behind the detection tasks:
    each clean image is kept and additionally corrupted with every
    (artefact, severity) pair; :func:`select_task` later composes the
    per-task classes, with each task's negative class drawn in equal
    thirds from clean images and moderate corruptions of the two other
    artefacts."""
    _check_clean(clean)
    if len(clean.rows) < 3:
        raise DataError("insufficient clean images: need at least 3 to fill the label-0 thirds")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = list(clean.rows)
    cache: dict = {}
    for i, row in enumerate(clean.rows):
        for v, (artefact, severity) in enumerate(
            (a, s) for a in ARTEFACTS for s in ("moderate", "severe")
        ):
            rows.append(
                _corrupt_row(row, artefact, severity, derive_seed(seed, i, v), out_dir, cache)
            )
        cache.clear()
    return Manifest(rows)


def build_tier_corpus(clean: Manifest, out_dir: str | Path, seed: int = 0) -> Manifest:
    """Build a tier-labelled corpus: per subject one clean image (tier 1),
    one moderate corruption (tier 2) and one severe corruption (tier 3),
    rotating the artefact types across subjects so tiers stay balanced."""
    _check_clean(clean)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ManifestRow] = list(clean.rows)
    cache: dict = {}
    for i, row in enumerate(clean.rows):
        moderate_artefact = ARTEFACTS[i % 3]
        severe_artefact = ARTEFACTS[(i + 1) % 3]
        rows.append(
            _corrupt_row(row, moderate_artefact, "moderate", derive_seed(seed, i, 0), out_dir, cache)
        )
        rows.append(
            _corrupt_row(row, severe_artefact, "severe", derive_seed(seed, i, 1), out_dir, cache)
        )
        cache.clear()
    return Manifest(rows)


# --------------------------------------------------------------------------
# Splitting


def split_by_subject(
    m: Manifest, folds: int = 5, test_fraction: float = 0.0, seed: int = 0
) -> Manifest:
    """Assign subjects to a held-out test split and partition the rest
    into cross-validation folds. All images of a subject share its
    assignment; the result only depends on the set of subject ids, not on
    row order."""
    subjects = m.subjects()
    if len(subjects) < folds + 1:
        raise DataError(f"too few subjects: {len(subjects)} for {folds} folds")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_test = int(round(test_fraction * len(subjects)))
    if len(subjects) - n_test < folds:
        raise DataError("too few subjects left for the requested folds after the test holdout")
    assignment: dict[str, tuple[str, int | None]] = {}
    for s in order[:n_test]:
        assignment[s] = ("test", None)
    for i, s in enumerate(order[n_test:]):
        assignment[s] = ("train", i % folds)
    rows = []
    for r in m.rows:
        split, fold = assignment[r.subject_id]
        rows.append(replace(r, split=split, fold=fold))
    out = Manifest(rows)
    out.validate()
    return out


# --------------------------------------------------------------------------
# Task views


@dataclass
class TaskSamples:
    """Flat per-task view of a manifest: image paths with binary labels."""

    task: str
    paths: list[str]
    labels: np.ndarray
    subject_ids: list[str]
    splits: list[str | None]
    folds: list[int | None]

    def subset(self, keep: np.ndarray) -> "TaskSamples":
        idx = np.flatnonzero(keep)
        return TaskSamples(
            task=self.task,
            paths=[self.paths[i] for i in idx],
            labels=self.labels[idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            splits=[self.splits[i] for i in idx],
            folds=[self.folds[i] for i in idx],
        )


def _parse_task(task: str) -> tuple[str, str]:
    if task in ("tier1vs2", "tier12vs3"):
        return "tier", task
    for artefact in ARTEFACTS:
        for kind in ("0vs1", "01vs2", "0vs12"):
            if task == f"{artefact}{kind}":
                return artefact, kind
    raise DataError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")


def _variant(row: ManifestRow) -> str | None:
    """Synthetic-variant tag of a row: 'clean', '<artefact>_<severity>',
    or None for real data."""
    prov = row.provenance
    if prov.get("real"):
        return None
    if prov.get("clean"):
        return "clean"
    if "artefact" in prov:
        return f"{prov['artefact']}_{prov['severity']}"
    return None


def _grade_for(row: ManifestRow, artefact: str) -> int:
    if row.grades is None:
        raise DataError(f"row {row.subject_id} has no grades")
    return getattr(row.grades, artefact)


def select_task(manifest: Manifest, task: str) -> TaskSamples:
    """Select and label the images entering one detection task.

    Synthetic rows follow the pool composition: the negative class is
    built from equal thirds of clean images and moderate corruptions of
    the two non-target artefacts (assigned round-robin over sorted
    subjects, remainders in that order), while the positive class takes
    the target corruption of every subject. Real rows are filtered by
    their target-artefact grade alone. Tier tasks use the tier column.
    """
    artefact, kind = _parse_task(task)
    paths, labels, subject_ids, splits, folds = [], [], [], [], []

    def emit(row: ManifestRow, label: int) -> None:
        paths.append(row.image_path)
        labels.append(label)
        subject_ids.append(row.subject_id)
        splits.append(row.split)
        folds.append(row.fold)

    if artefact == "tier":
        for row in manifest.rows:
            if row.tier is None:
                raise DataError(f"row {row.subject_id} has no tier")
            if kind == "tier1vs2":
                if row.tier in (1, 2):
                    emit(row, int(row.tier == 2))
            else:
                emit(row, int(row.tier == 3))
        return TaskSamples(task, paths, np.asarray(labels, dtype=np.int64), subject_ids, splits, folds)

    others = [a for a in ARTEFACTS if a != artefact]
    subject_order = {s: i for i, s in enumerate(manifest.subjects())}
    negative_variant = {}
    for s, i in subject_order.items():
        role = i % 3
        negative_variant[s] = "clean" if role == 0 else f"{others[role - 1]}_moderate"

    for row in manifest.rows:
        variant = _variant(row)
        if variant is None:
            g = _grade_for(row, artefact)
            if kind == "0vs1":
                if g in (0, 1):
                    emit(row, g)
            elif kind == "01vs2":
                emit(row, int(g == 2))
            else:
                emit(row, int(g >= 1))
            continue
        if variant == f"{artefact}_moderate":
            if kind == "0vs1":
                emit(row, 1)
            elif kind == "01vs2":
                emit(row, 0)
            else:
                emit(row, 1)
        elif variant == f"{artefact}_severe":
            if kind in ("01vs2", "0vs12"):
                emit(row, 1)
        elif variant == negative_variant[row.subject_id]:
            emit(row, 0)
    return TaskSamples(task, paths, np.asarray(labels, dtype=np.int64), subject_ids, splits, folds)
