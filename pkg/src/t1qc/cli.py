"""Command-line surface: phantom, corrupt, metrics, calibrate, pretrain,
finetune, predict, evaluate.

Configuration is file-first: ``--config run.json`` supplies per-command
defaults (schema-versioned, unknown keys rejected) and explicit flags
override it. All randomness flows from seeds in the config/flags; no
command reads the clock or OS entropy.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from t1qc import calibrate as cal
from t1qc import dataset, evaluate, metrics, model, simulate
from t1qc.errors import DataError, NumericalError, T1qcError, UsageError
from t1qc.volume import load_nifti, save_nifti

CONFIG_SCHEMA_VERSION = 1

ARTEFACT_TASKS = dataset.TASKS[:6]
TIER_TASKS = dataset.TASKS[6:]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2); we map usage to 1
        raise UsageError(message)


@dataclass
class _Param:
    name: str
    type: Any = str
    default: Any = None
    required: bool = False
    nargs: int | None = None
    choices: tuple | None = None
    help: str = ""


_COMMON = [_Param("config", str, help="JSON config file with per-command defaults"),
           _Param("overwrite", bool, default=False, help="replace existing outputs instead of refusing")]

_SPECS: dict[str, list[_Param]] = {
    "phantom": [
        _Param("out", str, required=True, help="output corpus directory"),
        _Param("n", int, required=True, help="number of phantoms"),
        _Param("dims", int, default=32, help="cubic grid size in voxels"),
        _Param("seed", int, default=0),
        _Param("wm_intensity", float, default=0.8),
        _Param("gm_intensity", float, default=0.6),
        _Param("background", float, default=0.0),
        _Param("noise_floor", float, default=0.01, help="additive air noise std"),
        _Param("perturbation", float, default=0.05),
        _Param("rotation_jitter", float, default=8.0),
        _Param("translation_jitter", float, default=1.5),
        _Param("axis_jitter", float, default=0.08),
        _Param("spacing", float, default=1.0),
    ],
    "corrupt": [
        _Param("manifest", str, required=True),
        _Param("out", str, required=True),
        _Param("artefact", str, required=True, help="motion | noise | contrast (alias gamma)"),
        _Param("severity", str, choices=("moderate", "severe")),
        _Param("sigma_range", float, nargs=2),
        _Param("beta_range", float, nargs=2),
        _Param("rotation_range", float, nargs=2),
        _Param("translation_range", float, nargs=2),
        _Param("num_positions", int, default=4),
        _Param("seed", int, default=0),
    ],
    "metrics": [
        _Param("manifest", str, required=True),
        _Param("out", str, required=True, help="output report directory"),
        _Param("metrics", str, default="nd_wgm,snr,aes,tenengrad"),
        _Param("plots", bool, default=False),
    ],
    "calibrate": [
        _Param("manifest", str, required=True),
        _Param("out", str, required=True),
        _Param("artefact", str, required=True, choices=("noise", "contrast")),
        _Param("severity", str, default="moderate", choices=("moderate", "severe")),
        _Param("target", float, help="target mean (defaults to the clinical reference)"),
        _Param("repetitions", int, default=1),
        _Param("seed", int, default=0),
    ],
    "pretrain": [
        _Param("manifest", str, required=True, help="clean corpus manifest"),
        _Param("out", str, required=True),
        _Param("tasks", str, default="all", help="'all', 'tier', or comma-separated task names"),
        _Param("epochs", int, default=30),
        _Param("patience", int, default=5),
        _Param("batch_size", int, default=6),
        _Param("learning_rate", float, default=1e-4),
        _Param("folds", int, default=5),
        _Param("test_fraction", float, default=0.2),
        _Param("seed", int, default=0),
    ],
    "finetune": [
        _Param("checkpoint", str, required=True),
        _Param("manifest", str, required=True, help="graded target-domain manifest"),
        _Param("task", str, required=True, choices=dataset.TASKS),
        _Param("out", str, required=True),
        _Param("epochs", int, default=30),
        _Param("patience", int, default=5),
        _Param("batch_size", int, default=6),
        _Param("learning_rate", float, default=1e-4),
        _Param("folds", int, default=5),
        _Param("test_fraction", float, default=0.0),
        _Param("seed", int, default=0),
    ],
    "predict": [
        _Param("checkpoint", str, required=True),
        _Param("image", str, help="single image to score"),
        _Param("manifest", str, help="manifest to score (with --task)"),
        _Param("task", str, choices=dataset.TASKS),
        _Param("out", str, help="output TSV (stdout for single images if omitted)"),
    ],
    "evaluate": [
        _Param("mode", str, required=True, choices=("indirect", "direct")),
        _Param("manifest", str, required=True),
        _Param("out", str, required=True, help="output report JSON"),
        _Param("checkpoints_dir", str, help="directory with the six task checkpoints (indirect)"),
        _Param("checkpoint", str, help="tier-model checkpoint (direct)"),
        _Param("task", str, choices=TIER_TASKS, help="tier task (direct)"),
        _Param("split", str, default="test", choices=("train", "validation", "test", "all")),
        _Param("compare_with", str, help="previous report to compare against (Wilcoxon)"),
    ],
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="t1qc", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(_SPECS) + "}")
    for command, spec in _SPECS.items():
        p = sub.add_parser(command, conflict_handler="resolve")
        for param in spec + _COMMON:
            flag = "--" + param.name.replace("_", "-")
            if param.type is bool:
                p.add_argument(flag, action="store_const", const=True, default=None,
                               dest=param.name, help=param.help)
            else:
                kwargs: dict = {"type": param.type, "default": None, "dest": param.name,
                                "help": param.help}
                if param.nargs:
                    kwargs["nargs"] = param.nargs
                if param.choices:
                    kwargs["choices"] = param.choices
                p.add_argument(flag, **kwargs)
    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing config file: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed config {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    version = cfg.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise UsageError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    for key, section in cfg.items():
        if key == "schema_version":
            continue
        if key not in _SPECS:
            raise UsageError(f"unknown config section {key!r}")
        if not isinstance(section, dict):
            raise UsageError(f"config section {key!r} must be an object")
        allowed = {param.name for param in _SPECS[key] + _COMMON}
        for name in section:
            if name not in allowed:
                raise UsageError(f"unknown key {name!r} in config section {key!r}")
    return cfg


def _resolve(args: argparse.Namespace, command: str, config: dict) -> dict:
    section = config.get(command, {})
    resolved = {}
    for param in _SPECS[command] + _COMMON:
        value = getattr(args, param.name, None)
        if value is None:
            value = section.get(param.name, param.default)
        if value is None and param.required:
            raise UsageError(f"missing required option --{param.name.replace('_', '-')}")
        if param.nargs and value is not None:
            value = tuple(float(v) for v in value)
            if len(value) != param.nargs:
                raise UsageError(f"--{param.name.replace('_', '-')} takes {param.nargs} values")
        if param.choices and value is not None and value not in param.choices:
            raise UsageError(f"--{param.name.replace('_', '-')} must be one of {param.choices}")
        resolved[param.name] = value
    return resolved


def _refuse_existing(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise DataError(f"output {path} already exists; pass --overwrite to replace it")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# --------------------------------------------------------------------------
# Commands


def cmd_phantom(opts: dict) -> int:
    if opts["n"] < 1:
        raise UsageError("--n must be >= 1")
    out = Path(opts["out"])
    _refuse_existing(out / "manifest.tsv", opts["overwrite"])
    spec = dataset.PhantomSpec(
        dims=(opts["dims"],) * 3,
        spacing=(opts["spacing"],) * 3,
        wm_intensity=opts["wm_intensity"],
        gm_intensity=opts["gm_intensity"],
        background=opts["background"],
        rotation_jitter=opts["rotation_jitter"],
        translation_jitter=opts["translation_jitter"],
        axis_jitter=opts["axis_jitter"],
        perturbation=opts["perturbation"],
        noise_sigma=opts["noise_floor"],
        seed=opts["seed"],
    )
    manifest, manifest_path = dataset.write_phantom_corpus(spec, opts["n"], out)
    print(f"wrote {len(manifest)} phantoms under {out} ({manifest_path})")
    return 0


def _custom_params(opts: dict):
    artefact = {"gamma": "contrast"}.get(opts["artefact"], opts["artefact"])
    if artefact not in simulate.ARTEFACTS:
        valid = ", ".join(f"{a}:{s}" for a, s in simulate.PRESETS)
        raise UsageError(f"unknown preset {opts['artefact']!r}; valid presets: {valid}")
    if opts["severity"] is not None:
        return simulate.preset(artefact, opts["severity"])
    if artefact == "noise":
        if opts["sigma_range"] is None:
            raise UsageError("noise without --severity needs --sigma-range")
        return simulate.SeverityPreset(artefact, "custom", simulate.NoiseParams(opts["sigma_range"]))
    if artefact == "contrast":
        if opts["beta_range"] is None:
            raise UsageError("contrast without --severity needs --beta-range")
        return simulate.SeverityPreset(artefact, "custom", simulate.GammaParams(opts["beta_range"]))
    if opts["rotation_range"] is None or opts["translation_range"] is None:
        raise UsageError("motion without --severity needs --rotation-range and --translation-range")
    return simulate.SeverityPreset(
        artefact,
        "custom",
        simulate.MotionParams(
            num_positions=opts["num_positions"],
            rotation_range=opts["rotation_range"],
            translation_range=opts["translation_range"],
        ),
    )


def cmd_corrupt(opts: dict) -> int:
    manifest = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    _refuse_existing(out / "manifest.tsv", opts["overwrite"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    base = _custom_params(opts)
    rows = []
    for i, row in enumerate(manifest.rows):
        params = type(base.params)(**{**base.params.__dict__,
                                      "seed": dataset.derive_seed(opts["seed"], i)})
        sp = simulate.SeverityPreset(base.artefact, base.severity, params)
        vol = load_nifti(row.image_path)
        corrupted, prov = simulate.apply_preset(vol, sp)
        prov["source"] = row.image_path
        subject_dir = out / row.subject_id
        subject_dir.mkdir(exist_ok=True)
        out_path = subject_dir / f"{base.artefact}_{base.severity}.nii.gz"
        save_nifti(corrupted, out_path)
        grades = None
        tier = None
        if base.severity in ("moderate", "severe"):
            grades = dataset.grades_for_severity(base.artefact, base.severity)
            tier = evaluate.grades_to_tier(grades)
        rows.append(
            dataset.ManifestRow(
                image_path=str(out_path),
                subject_id=row.subject_id,
                grades=grades,
                tier=tier,
                split=row.split,
                fold=row.fold,
                provenance=prov,
            )
        )
    corrupted_manifest = dataset.Manifest(rows)
    corrupted_manifest.save(out / "manifest.tsv")
    print(f"corrupted {len(rows)} images with {base.artefact}:{base.severity} under {out}")
    return 0


def cmd_metrics(opts: dict) -> int:
    manifest = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    _refuse_existing(out / "report.tsv", opts["overwrite"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    wanted = [m.strip() for m in opts["metrics"].split(",") if m.strip()]
    known = {"nd_wgm", "snr", "aes", "tenengrad"}
    unknown = set(wanted) - known
    if unknown:
        raise UsageError(f"unknown metrics {sorted(unknown)}; valid: {sorted(known)}")
    report = metrics.MetricReport()
    for row in manifest.rows:
        vol = load_nifti(row.image_path)
        masks = dataset.masks_for_image(row.image_path)
        if masks is None and "source" in row.provenance:
            masks = dataset.masks_for_image(row.provenance["source"])
        for name in wanted:
            if name == "nd_wgm":
                if masks is None:
                    continue
                report.add(row.subject_id, name, metrics.nd_wgm(vol, masks))
            elif name == "snr":
                m = masks if masks is not None else metrics.estimate_air_mask(vol)
                if not (m.wm.any() and m.air.any()):
                    continue
                report.add(row.subject_id, name, metrics.snr(vol, m))
            elif name == "aes":
                report.add(row.subject_id, name, metrics.average_edge_strength(vol))
            else:
                report.add(row.subject_id, name, metrics.tenengrad(vol))
    (out / "report.tsv").write_text(report.to_tsv())
    (out / "summary.json").write_text(report.summary_json())
    if opts["plots"]:
        _metric_plots(report, out)
    print(f"wrote metric report for {len(manifest)} images to {out}")
    return 0


def _metric_plots(report: metrics.MetricReport, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for metric in sorted({m for _, m, _ in report.rows}):
        values = report.values(metric)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.violinplot(values, showmedians=True)
        ax.set_title(metric)
        ax.set_xticks([])
        fig.savefig(out / f"{metric}.png", metadata={"Software": "t1qc"})
        plt.close(fig)


def _calibration_corpus(manifest: dataset.Manifest):
    corpus = []
    ids = []
    for row in manifest.rows:
        masks = dataset.masks_for_image(row.image_path)
        if masks is None:
            raise DataError(f"no tissue masks found beside {row.image_path}")
        corpus.append((load_nifti(row.image_path), masks))
        ids.append(row.subject_id)
    return corpus, ids


def cmd_calibrate(opts: dict) -> int:
    manifest = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    _refuse_existing(out / "calibration.json", opts["overwrite"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    out.mkdir(exist_ok=True)
    candidates = cal.CandidateSet.default(opts["artefact"])
    metric = cal._METRIC_FOR_ARTEFACT[opts["artefact"]]
    target_mean = opts["target"]
    if target_mean is None:
        target_mean = cal.CLINICAL_TARGETS[(metric, opts["severity"])]
    target = cal.CalibrationTarget(metric=metric, target_mean=target_mean, severity=opts["severity"])
    corpus, ids = _calibration_corpus(manifest)
    chosen, table = cal.calibrate_range(
        corpus, candidates, target, seed=opts["seed"], repetitions=opts["repetitions"], ids=ids
    )
    (out / "calibration.tsv").write_text(cal.calibration_table_tsv(table))
    (out / "calibration.json").write_text(cal.calibration_result_json(chosen, table, target))
    print(f"chosen {opts['artefact']} range for {opts['severity']}: [{chosen[0]}, {chosen[1]}]")
    return 0


def _train_cfg(opts: dict) -> model.TrainConfig:
    return model.TrainConfig(
        learning_rate=opts["learning_rate"],
        batch_size=opts["batch_size"],
        max_epochs=opts["epochs"],
        patience=opts["patience"],
        folds=opts["folds"],
        seed=opts["seed"],
    )


def _model_cfg_for(manifest: dataset.Manifest) -> model.ModelConfig:
    dims = load_nifti(manifest.rows[0].image_path).dims
    return model.ModelConfig(input_dims=dims)


def _task_report(ckpt: model.Checkpoint, samples: dataset.TaskSamples) -> dict:
    probs, labels = model.predict_samples(ckpt, samples)
    ref = samples.labels
    ba = evaluate.balanced_accuracy(labels, ref)
    tp = int(((labels == 1) & (ref == 1)).sum())
    tn = int(((labels == 0) & (ref == 0)).sum())
    fp = int(((labels == 1) & (ref == 0)).sum())
    fn = int(((labels == 0) & (ref == 1)).sum())
    return {
        "balanced_accuracy": ba,
        "confusion": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
        "n": int(len(ref)),
    }


def cmd_pretrain(opts: dict) -> int:
    clean = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    if opts["tasks"] == "all":
        tasks = list(ARTEFACT_TASKS)
    elif opts["tasks"] == "tier":
        tasks = list(TIER_TASKS)
    else:
        tasks = [t.strip() for t in opts["tasks"].split(",") if t.strip()]
        for t in tasks:
            if t not in dataset.TASKS:
                raise UsageError(f"unknown task {t!r}; valid tasks: {', '.join(dataset.TASKS)}")
    ckpt_dir = out / "checkpoints"
    for task in tasks:
        _refuse_existing(ckpt_dir / f"{task}.ckpt", opts["overwrite"])
    out.mkdir(exist_ok=True)
    ckpt_dir.mkdir(exist_ok=True)

    split_clean = dataset.split_by_subject(
        clean, folds=opts["folds"], test_fraction=opts["test_fraction"], seed=opts["seed"]
    )
    pools: dict[str, dataset.Manifest] = {}

    def pool_for(task: str) -> dataset.Manifest:
        kind = "tier" if task in TIER_TASKS else "artefact"
        if kind not in pools:
            pool_dir = out / ("tier_pool" if kind == "tier" else "pool")
            manifest_path = pool_dir / "manifest.tsv"
            if manifest_path.exists() and not opts["overwrite"]:
                pools[kind] = dataset.Manifest.load(manifest_path)
            else:
                builder = (
                    dataset.build_tier_corpus if kind == "tier" else dataset.build_pretrain_corpus
                )
                pool = builder(split_clean, pool_dir, seed=dataset.derive_seed(opts["seed"], 1))
                pool = _inherit_split(pool, split_clean)
                pool.save(manifest_path)
                pools[kind] = pool
        return pools[kind]

    report: dict = {"tasks": {}, "seed": opts["seed"]}
    train_cfg = _train_cfg(opts)
    for task in tasks:
        pool = pool_for(task)
        samples = dataset.select_task(pool, task)
        model_cfg = _model_cfg_for(pool)
        final, _ = model.cross_validate(
            samples, model_cfg, train_cfg, log_dir=out / "logs"
        )
        model.save_checkpoint(final, ckpt_dir / f"{task}.ckpt")
        test_mask = np.array([s == "test" for s in samples.splits])
        entry = {"best_val_loss": final.metadata["best_val_loss"], "fold": final.metadata["fold"]}
        if test_mask.any():
            entry["test"] = _task_report(final, samples.subset(test_mask))
        report["tasks"][task] = entry
        print(f"{task}: fold {entry['fold']} val_loss {entry['best_val_loss']:.4f}"
              + (f" test_ba {entry['test']['balanced_accuracy']:.4f}" if "test" in entry else ""))
    _write_json(out / "pretrain_report.json", report)
    return 0


def _inherit_split(pool: dataset.Manifest, split_clean: dataset.Manifest) -> dataset.Manifest:
    assignment = {r.subject_id: (r.split, r.fold) for r in split_clean.rows}
    for row in pool.rows:
        split, fold = assignment[row.subject_id]
        row.split, row.fold = split, fold
    pool.validate()
    return pool


def cmd_finetune(opts: dict) -> int:
    pretrained = model.load_checkpoint(opts["checkpoint"])
    manifest = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    ckpt_path = out / f"{opts['task']}_finetuned.ckpt"
    _refuse_existing(ckpt_path, opts["overwrite"])
    out.mkdir(exist_ok=True)
    has_folds = any(r.fold is not None for r in manifest.rows)
    if not has_folds:
        manifest = dataset.split_by_subject(
            manifest, folds=opts["folds"], test_fraction=opts["test_fraction"], seed=opts["seed"]
        )
    samples = dataset.select_task(manifest, opts["task"])
    final = model.finetune(pretrained, samples, _train_cfg(opts), log_dir=out / "logs")
    model.save_checkpoint(final, ckpt_path)
    report = {
        "task": opts["task"],
        "best_val_loss": final.metadata["best_val_loss"],
        "fold": final.metadata["fold"],
    }
    test_mask = np.array([s == "test" for s in samples.splits])
    if test_mask.any():
        report["test"] = _task_report(final, samples.subset(test_mask))
    _write_json(out / f"{opts['task']}_finetune_report.json", report)
    print(f"finetuned {opts['task']}: val_loss {report['best_val_loss']:.4f} -> {ckpt_path}")
    return 0


def cmd_predict(opts: dict) -> int:
    ckpt = model.load_checkpoint(opts["checkpoint"])
    if (opts["image"] is None) == (opts["manifest"] is None):
        raise UsageError("predict needs exactly one of --image or --manifest")
    if opts["image"] is not None:
        vol = load_nifti(opts["image"])
        prob, label = model.predict(ckpt, vol)
        line = f"{opts['image']}\t{prob!r}\t{label}"
        if opts["out"]:
            path = Path(opts["out"])
            _refuse_existing(path, opts["overwrite"])
            path.write_text("image\tprobability\tlabel\n" + line + "\n")
        else:
            print(line)
        return 0
    if opts["task"] is None:
        raise UsageError("--manifest prediction needs --task")
    if opts["out"] is None:
        raise UsageError("--manifest prediction needs --out")
    manifest = dataset.Manifest.load(opts["manifest"])
    samples = dataset.select_task(manifest, opts["task"])
    probs, labels = model.predict_samples(ckpt, samples)
    path = Path(opts["out"])
    _refuse_existing(path, opts["overwrite"])
    lines = ["subject_id\timage_path\tprobability\tlabel"]
    for sid, p, pr, lb in zip(samples.subject_ids, samples.paths, probs, labels):
        lines.append(f"{sid}\t{p}\t{float(pr)!r}\t{int(lb)}")
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {len(labels)} predictions to {path}")
    return 0


_INDIRECT_TASKS = (
    "motion01vs2",
    "motion0vs1",
    "contrast01vs2",
    "contrast0vs1",
    "noise0vs12",
    "noise0vs1",
)


def _rows_for_split(manifest: dataset.Manifest, split: str) -> list[dataset.ManifestRow]:
    if split == "all":
        rows = list(manifest.rows)
    else:
        rows = [r for r in manifest.rows if r.split == split]
    if not rows:
        raise DataError(f"no rows with split {split!r} in the manifest")
    return rows


def _flags_from_checkpoints(
    rows: list[dataset.ManifestRow], checkpoints: dict[str, model.Checkpoint]
) -> dict[str, np.ndarray]:
    samples = dataset.TaskSamples(
        task="indirect",
        paths=[r.image_path for r in rows],
        labels=np.zeros(len(rows), dtype=np.int64),
        subject_ids=[r.subject_id for r in rows],
        splits=[r.split for r in rows],
        folds=[r.fold for r in rows],
    )
    flags = {}
    for task in _INDIRECT_TASKS:
        _, labels = model.predict_samples(checkpoints[task], samples)
        flags[task] = labels.astype(bool)
    return flags


def cmd_evaluate(opts: dict) -> int:
    manifest = dataset.Manifest.load(opts["manifest"])
    out = Path(opts["out"])
    _refuse_existing(out, opts["overwrite"])
    if not out.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {out.parent} does not exist")
    rows = _rows_for_split(manifest, opts["split"])

    if opts["mode"] == "direct":
        if opts["checkpoint"] is None or opts["task"] is None:
            raise UsageError("direct mode needs --checkpoint and --task")
        ckpt = model.load_checkpoint(opts["checkpoint"])
        sub_manifest = dataset.Manifest(rows)
        samples = dataset.select_task(sub_manifest, opts["task"])
        probs, labels = model.predict_samples(ckpt, samples)
        ref = samples.labels
        report = {
            "mode": "direct",
            "task": opts["task"],
            "split": opts["split"],
            "balanced_accuracy": evaluate.balanced_accuracy(labels, ref),
            "n": int(len(ref)),
            "image_ids": samples.subject_ids,
            "correct": [int(c) for c in (labels == ref)],
        }
        report["confusion"] = _confusion(labels, ref)
    else:
        if opts["checkpoints_dir"] is None:
            raise UsageError("indirect mode needs --checkpoints-dir with the six task checkpoints")
        ckpt_dir = Path(opts["checkpoints_dir"])
        checkpoints = {}
        for task in _INDIRECT_TASKS:
            path = ckpt_dir / f"{task}.ckpt"
            if not path.exists():
                raise DataError(f"indirect mode needs checkpoint {path}")
            checkpoints[task] = model.load_checkpoint(path)
        for row in rows:
            if row.tier is None:
                raise DataError(f"row {row.subject_id} has no reference tier")
        flags = _flags_from_checkpoints(rows, checkpoints)
        predicted_tiers = []
        predicted_grades = []
        for i in range(len(rows)):
            p = evaluate.SixWayPrediction(
                motion_severe=bool(flags["motion01vs2"][i]),
                motion_moderate=bool(flags["motion0vs1"][i]),
                contrast_severe=bool(flags["contrast01vs2"][i]),
                contrast_moderate=bool(flags["contrast0vs1"][i]),
                noise_0vs12=bool(flags["noise0vs12"][i]),
                noise_0vs1=bool(flags["noise0vs1"][i]),
            )
            predicted_tiers.append(evaluate.tier_from_flags(p))
            predicted_grades.append(evaluate.recombine_grades(p))
        reference_tiers = [r.tier for r in rows]
        tasks = evaluate.tier_tasks(predicted_tiers, reference_tiers)
        report = {
            "mode": "indirect",
            "split": opts["split"],
            "n": len(rows),
            "image_ids": [r.subject_id for r in rows],
            "tasks": {},
        }
        for name, pair in tasks.items():
            entry = {
                "balanced_accuracy": evaluate.balanced_accuracy(pair["pred"], pair["ref"]),
                "confusion": _confusion(pair["pred"], pair["ref"]),
                "n": int(len(pair["ref"])),
            }
            report["tasks"][name] = entry
        report["correct"] = [
            int(p == r) for p, r in zip(predicted_tiers, reference_tiers)
        ]
        graded = [r for r in rows if r.grades is not None]
        if graded:
            kappa = {}
            ref_idx = [i for i, r in enumerate(rows) if r.grades is not None]
            for artefact in ("motion", "noise", "contrast"):
                ref_grades = [getattr(rows[i].grades, artefact) for i in ref_idx]
                pred_grades = [getattr(predicted_grades[i], artefact) for i in ref_idx]
                kappa[artefact] = evaluate.weighted_cohen_kappa(pred_grades, ref_grades, "linear")
            report["kappa_vs_reference"] = kappa

    if opts["compare_with"]:
        other_path = Path(opts["compare_with"])
        if not other_path.exists():
            raise DataError(f"missing comparison report: {other_path}")
        other = json.loads(other_path.read_text())
        if "correct" in report and "correct" in other:
            if other.get("image_ids") != report.get("image_ids"):
                raise DataError("comparison reports cover different images")
            res = evaluate.wilcoxon_signed_rank(report["correct"], other["correct"])
            report["comparison"] = {
                "against": str(other_path),
                "statistic": res.statistic,
                "p_value": res.p_value,
                "p_value_bonferroni": evaluate.bonferroni([res.p_value])[0],
                "method": res.method,
            }
    _write_json(out, report)
    summary = (
        f"balanced_accuracy {report['balanced_accuracy']:.4f}"
        if opts["mode"] == "direct"
        else ", ".join(
            f"{k}: {v['balanced_accuracy']:.4f}" for k, v in report["tasks"].items()
        )
    )
    print(f"evaluate[{opts['mode']}] on split {opts['split']}: {summary} -> {out}")
    return 0


def _confusion(pred, ref) -> dict:
    pred = np.asarray(pred, dtype=int)
    ref = np.asarray(ref, dtype=int)
    return {
        "tp": int(((pred == 1) & (ref == 1)).sum()),
        "tn": int(((pred == 0) & (ref == 0)).sum()),
        "fp": int(((pred == 1) & (ref == 0)).sum()),
        "fn": int(((pred == 0) & (ref == 1)).sum()),
    }


_HANDLERS = {
    "phantom": cmd_phantom,
    "corrupt": cmd_corrupt,
    "metrics": cmd_metrics,
    "calibrate": cmd_calibrate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("T1QC_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(int(threads))
        except ValueError as exc:
            print(f"t1qc: bad T1QC_THREADS value: {exc}", file=sys.stderr)
            return 1
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        config = _load_config(getattr(args, "config", None))
        opts = _resolve(args, args.command, config)
        return _HANDLERS[args.command](opts)
    except UsageError as exc:
        print(f"t1qc: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"t1qc: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"t1qc: numerical failure: {exc}", file=sys.stderr)
        return 3
    except T1qcError as exc:
        print(f"t1qc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
