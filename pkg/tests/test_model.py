import math

import numpy as np
import pytest
import torch

from t1qc.dataset import (
    Manifest,
    PhantomSpec,
    build_pretrain_corpus,
    select_task,
    split_by_subject,
    write_phantom_corpus,
)
from t1qc.errors import DataError
from t1qc.model import (
    Checkpoint,
    ModelConfig,
    TrainConfig,
    build_conv5fc3,
    class_weights_from_labels,
    cross_validate,
    finetune,
    flatten_width,
    load_checkpoint,
    load_dataset,
    param_count,
    predict,
    predict_samples,
    save_checkpoint,
    train,
    training_loss,
    weighted_bce,
)
from t1qc.volume import Volume3D
from util import MINI_CONFIG, gradient_check


@pytest.fixture(scope="module")
def tiny_task(tmp_path_factory):
    """16-phantom noise0vs12 task at 16^3: separable and quick to fit."""
    root = tmp_path_factory.mktemp("tinytask")
    spec = PhantomSpec(
        dims=(16, 16, 16), wm_intensity=400.0, gm_intensity=300.0, noise_sigma=2.0, seed=30
    )
    manifest, _ = write_phantom_corpus(spec, 16, root / "ph")
    manifest = split_by_subject(manifest, folds=5, test_fraction=0.25, seed=3)
    pool = build_pretrain_corpus(manifest, root / "pool", seed=5)
    assign = {r.subject_id: (r.split, r.fold) for r in manifest.rows}
    for r in pool.rows:
        r.split, r.fold = assign[r.subject_id]
    samples = select_task(pool, "noise0vs12")
    cfg = ModelConfig(input_dims=(16, 16, 16), conv_channels=(4, 8, 8, 16, 16), fc_widths=(32, 8))
    return samples, cfg


def _masks(samples, which):
    if which == "train":
        return np.array([s == "train" and f != 0 for s, f in zip(samples.splits, samples.folds)])
    if which == "val":
        return np.array([s == "train" and f == 0 for s, f in zip(samples.splits, samples.folds)])
    return np.array([s == "test" for s in samples.splits])


class TestArchitecture:
    def test_shape_oracle_32cube(self):
        cfg = ModelConfig()
        assert flatten_width(cfg) == 128  # 32 / 2^5 = 1 per axis, 128 channels
        model = build_conv5fc3(cfg, seed=0)
        out = model(torch.zeros(2, 1, 32, 32, 32))
        assert out.shape == (2, 1)

    def test_param_count_closed_form(self):
        for cfg in (
            ModelConfig(),
            MINI_CONFIG,
            ModelConfig(input_dims=(16, 16, 16), conv_channels=(4, 8, 8, 16, 16), fc_widths=(32, 8)),
        ):
            model = build_conv5fc3(cfg, seed=0)
            torch_count = sum(p.numel() for p in model.parameters())
            assert torch_count == param_count(cfg)

    def test_batch_of_six_logits(self):
        model = build_conv5fc3(ModelConfig(), seed=1)
        model.eval()
        out = model(torch.randn(6, 1, 32, 32, 32))
        assert out.shape == (6, 1)
        assert torch.isfinite(out).all()

    def test_mini_config_pools_clamp_at_one(self):
        assert flatten_width(MINI_CONFIG) == 1  # 8 -> 4 -> 2 -> 1 -> 1 -> 1
        model = build_conv5fc3(MINI_CONFIG, seed=0)
        model.eval()
        assert model(torch.zeros(1, 1, 8, 8, 8)).shape == (1, 1)

    def test_config_validation(self):
        with pytest.raises(DataError):
            ModelConfig(dropout_rate=1.5)
        with pytest.raises(DataError):
            ModelConfig(input_dims=(0, 32, 32))
        with pytest.raises(DataError):
            ModelConfig(resize_policy="stretch")

    def test_seeded_init_reproducible(self):
        a = build_conv5fc3(ModelConfig(), seed=7)
        b = build_conv5fc3(ModelConfig(), seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestWeightedBce:
    def test_unit_weights_closed_form(self):
        assert weighted_bce(0.0, 1, (1.0, 1.0)) == pytest.approx(math.log(2.0))
        assert weighted_bce(0.0, 0, (1.0, 1.0)) == pytest.approx(math.log(2.0))

    def test_confident_limit(self):
        assert weighted_bce(500.0, 1, (1.0, 1.0)) == pytest.approx(0.0, abs=1e-12)
        assert weighted_bce(-500.0, 0, (1.0, 1.0)) == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(weighted_bce(-500.0, 1, (1.0, 1.0)))

    def test_weight_three(self):
        assert weighted_bce(0.0, 1, (1.0, 3.0)) == pytest.approx(3.0 * math.log(2.0))

    def test_matches_torch_twin(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(scale=4.0, size=64)
        labels = rng.integers(0, 2, size=64)
        weights = (0.7, 1.9)
        expected = weighted_bce(logits, labels, weights).mean()

        class Raw(torch.nn.Module):
            def forward(self, x):
                return x

        value = training_loss(
            Raw(),
            torch.from_numpy(logits[:, None]),
            torch.from_numpy(labels.astype(np.float64)),
            weights,
        )
        assert float(value) == pytest.approx(expected)

    def test_positivity(self):
        rng = np.random.default_rng(1)
        vals = weighted_bce(rng.normal(size=100), rng.integers(0, 2, size=100), (2.0, 0.5))
        assert np.all(vals >= 0)

    def test_invalid_weights(self):
        with pytest.raises(DataError):
            weighted_bce(0.0, 1, (0.0, 1.0))


class TestClassWeights:
    def test_inverse_frequency_mean_one(self):
        labels = np.array([0, 0, 1, 0, 0, 1])  # 4 vs 2
        w0, w1 = class_weights_from_labels(labels)
        assert (w0 + w1) / 2 == pytest.approx(1.0)
        assert w1 / w0 == pytest.approx(2.0)

    def test_single_class_errors(self):
        with pytest.raises(DataError, match="single-class"):
            class_weights_from_labels(np.array([1, 1, 1]))

    def test_gradient_contributions_equalized(self):
        # 2:1 imbalance with inverse-frequency weights: per-class gradient
        # contributions to the output bias match within 10% at init
        torch.manual_seed(0)
        model = build_conv5fc3(MINI_CONFIG, seed=3).double()
        with torch.no_grad():  # zero head: init logits exactly 0
            model.fc3.weight.zero_()
            model.fc3.bias.zero_()
        model.train()
        g = torch.Generator().manual_seed(4)
        x = torch.randn(12, 1, 8, 8, 8, generator=g, dtype=torch.float64)
        y = torch.tensor([1.0] * 4 + [0.0] * 8, dtype=torch.float64)
        weights = class_weights_from_labels(y.numpy().astype(int))
        contrib = {}
        for label in (0, 1):
            sel = y == label
            loss = training_loss(model, x[sel], y[sel], weights) * sel.sum() / len(y)
            model.zero_grad()
            loss.backward()
            contrib[label] = abs(model.fc3.bias.grad.item())
        ratio = contrib[0] / contrib[1]
        assert abs(ratio - 1.0) < 0.1


class TestTraining:
    def test_overfit_separable(self, tiny_task):
        samples, cfg = tiny_task
        train_all = samples.subset(_masks(samples, "train"))
        keep = np.zeros(len(train_all.paths), dtype=bool)
        keep[np.flatnonzero(train_all.labels == 0)[:5]] = True
        keep[np.flatnonzero(train_all.labels == 1)[:5]] = True
        ten = train_all.subset(keep)
        tcfg = TrainConfig(learning_rate=1e-3, max_epochs=80, patience=80, seed=5, batch_size=4)
        model = build_conv5fc3(cfg, seed=5)
        ckpt = train(model, ten, ten, tcfg, cfg)
        probs, labels = predict_samples(ckpt, ten)
        from t1qc.evaluate import balanced_accuracy

        assert balanced_accuracy(labels, ten.labels) == 1.0

    def test_zero_epochs_returns_init(self, tiny_task):
        samples, cfg = tiny_task
        tr = samples.subset(_masks(samples, "train"))
        va = samples.subset(_masks(samples, "val"))
        model = build_conv5fc3(cfg, seed=6)
        init_state = {k: v.clone() for k, v in model.state_dict().items()}
        ckpt = train(model, tr, va, TrainConfig(max_epochs=0, seed=6), cfg)
        assert ckpt.metadata["best_epoch"] == 0
        assert math.isfinite(ckpt.metadata["best_val_loss"])
        for name, arr in ckpt.weights.items():
            assert np.array_equal(arr, init_state[name].numpy())

    def test_single_class_training_set_errors(self, tiny_task):
        samples, cfg = tiny_task
        tr = samples.subset(_masks(samples, "train"))
        only_pos = tr.subset(tr.labels == 1)
        model = build_conv5fc3(cfg, seed=7)
        with pytest.raises(DataError, match="single-class"):
            train(model, only_pos, only_pos, TrainConfig(max_epochs=1), cfg)

    def test_deterministic_repeat(self, tiny_task):
        samples, cfg = tiny_task
        tr = samples.subset(_masks(samples, "train"))
        va = samples.subset(_masks(samples, "val"))

        def run():
            model = build_conv5fc3(cfg, seed=8)
            return train(model, tr, va, TrainConfig(max_epochs=3, seed=8), cfg)

        a, b = run(), run()
        assert a.metadata["best_val_loss"] == b.metadata["best_val_loss"]
        for name in a.weights:
            assert np.array_equal(a.weights[name], b.weights[name])

    def test_training_log_written(self, tiny_task, tmp_path):
        import json

        samples, cfg = tiny_task
        tr = samples.subset(_masks(samples, "train"))
        va = samples.subset(_masks(samples, "val"))
        log = tmp_path / "log.jsonl"
        model = build_conv5fc3(cfg, seed=9)
        train(model, tr, va, TrainConfig(max_epochs=2, seed=9), cfg, log_path=log)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines[0]["epoch"] == 0
        assert lines[-1]["epoch"] == 2
        assert all("val_loss" in entry for entry in lines)


class TestCrossValidation:
    def test_final_is_argmin_with_low_fold_tie(self, tiny_task):
        samples, cfg = tiny_task
        tcfg = TrainConfig(max_epochs=2, seed=11)
        final, folds = cross_validate(samples, cfg, tcfg)
        losses = [c.metadata["best_val_loss"] for c in folds]
        assert final.metadata["best_val_loss"] == min(losses)
        winners = [c.metadata["fold"] for c in folds if c.metadata["best_val_loss"] == min(losses)]
        assert final.metadata["fold"] == min(winners)

    def test_identical_folds_tie_to_fold_zero(self, tiny_task):
        samples, cfg = tiny_task
        # duplicate one subject's row set into five pseudo-folds
        sub = samples.subset(np.array([s == "train" for s in samples.splits]))
        base = sub.subset(np.array([f == 0 for f in sub.folds]))
        import copy

        clone = copy.deepcopy(base)
        paths, labels, sids, splits, folds = [], [], [], [], []
        for fold in range(5):
            paths += clone.paths
            labels += list(clone.labels)
            sids += [f"{s}-f{fold}" for s in clone.subject_ids]
            splits += ["train"] * len(clone.paths)
            folds += [fold] * len(clone.paths)
        from t1qc.dataset import TaskSamples

        pseudo = TaskSamples(samples.task, paths, np.array(labels), sids, splits, folds)
        final, all_folds = cross_validate(pseudo, cfg, TrainConfig(max_epochs=1, seed=12))
        losses = [c.metadata["best_val_loss"] for c in all_folds]
        assert len(set(losses)) == 1
        assert final.metadata["fold"] == 0

    def test_missing_folds_error(self, tiny_task):
        samples, cfg = tiny_task
        test_only = samples.subset(_masks(samples, "test"))
        with pytest.raises(DataError, match="folds"):
            cross_validate(test_only, cfg, TrainConfig(max_epochs=1))


@pytest.fixture(scope="module")
def pretrained(tiny_task):
    samples, cfg = tiny_task
    final, _ = cross_validate(samples, cfg, TrainConfig(max_epochs=2, seed=13))
    return final


class TestFinetune:

    def test_freeze_contract(self, tiny_task, pretrained):
        samples, cfg = tiny_task
        tuned = finetune(pretrained, samples, TrainConfig(max_epochs=2, seed=14))
        conv_names = [n for n in tuned.weights if n.split(".")[0].startswith(("conv", "bn"))]
        fc_names = [n for n in tuned.weights if n.startswith("fc")]
        assert conv_names and fc_names
        for name in conv_names:
            assert np.array_equal(tuned.weights[name], pretrained.weights[name]), name
        assert any(
            not np.array_equal(tuned.weights[n], pretrained.weights[n]) for n in fc_names
        )
        assert tuned.metadata["frozen_conv"]

    def test_no_degradation_on_same_distribution(self, tiny_task, pretrained):
        samples, _ = tiny_task
        tuned = finetune(pretrained, samples, TrainConfig(max_epochs=2, seed=15))
        assert (
            tuned.metadata["best_val_loss"]
            <= pretrained.metadata["best_val_loss"] + 1e-6
        )


class TestPredict:
    def _zero_head_checkpoint(self, cfg):
        model = build_conv5fc3(cfg, seed=20)
        with torch.no_grad():
            model.fc3.weight.zero_()
            model.fc3.bias.zero_()
        from t1qc.model import _state_to_numpy

        return Checkpoint(config=cfg, weights=_state_to_numpy(model), metadata={})

    def test_probability_half_maps_to_label_one(self):
        cfg = MINI_CONFIG
        ckpt = self._zero_head_checkpoint(cfg)
        vol = Volume3D(np.random.default_rng(0).normal(size=(8, 8, 8)).astype(np.float32))
        prob, label = predict(ckpt, vol)
        assert prob == 0.5
        assert label == 1

    def test_deterministic(self, tiny_task):
        samples, cfg = tiny_task
        ckpt = self._zero_head_checkpoint(cfg)
        from t1qc.volume import load_nifti

        vol = load_nifti(samples.paths[0])
        assert predict(ckpt, vol) == predict(ckpt, vol)

    def test_strict_dims_mismatch_named(self):
        ckpt = self._zero_head_checkpoint(MINI_CONFIG)
        vol = Volume3D(np.zeros((9, 9, 9), dtype=np.float32))
        with pytest.raises(DataError, match=r"\(9, 9, 9\).*\(8, 8, 8\)"):
            predict(ckpt, vol)

    def test_crop_pad_policy(self):
        cfg = ModelConfig(
            input_dims=(8, 8, 8),
            conv_channels=(1, 1, 1, 1, 1),
            fc_widths=(4, 3),
            resize_policy="crop_pad",
        )
        ckpt = self._zero_head_checkpoint(cfg)
        vol = Volume3D(np.random.default_rng(1).normal(size=(10, 6, 8)).astype(np.float32))
        prob, label = predict(ckpt, vol)
        assert 0.0 <= prob <= 1.0

    def test_overfit_checkpoint_recalls_training_labels(self, tiny_task):
        samples, cfg = tiny_task
        train_all = samples.subset(_masks(samples, "train"))
        keep = np.zeros(len(train_all.paths), dtype=bool)
        keep[np.flatnonzero(train_all.labels == 0)[:5]] = True
        keep[np.flatnonzero(train_all.labels == 1)[:5]] = True
        tr = train_all.subset(keep)
        model = build_conv5fc3(cfg, seed=21)
        ckpt = train(model, tr, tr, TrainConfig(learning_rate=1e-3, max_epochs=80, patience=80, seed=21, batch_size=4), cfg)
        from t1qc.volume import load_nifti

        hits = 0
        for path, label in zip(tr.paths[:6], tr.labels[:6]):
            _, pred = predict(ckpt, load_nifti(path))
            hits += int(pred == label)
        assert hits == 6


class TestCheckpointContainer:
    def test_roundtrip_bitstable(self, tiny_task, tmp_path):
        samples, cfg = tiny_task
        tr = samples.subset(_masks(samples, "train"))
        va = samples.subset(_masks(samples, "val"))
        model = build_conv5fc3(cfg, seed=22)
        ckpt = train(model, tr, va, TrainConfig(max_epochs=1, seed=22), cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(ckpt, path)
        back = load_checkpoint(path)
        assert back.config == ckpt.config
        assert back.metadata["best_val_loss"] == ckpt.metadata["best_val_loss"]
        for name in ckpt.weights:
            assert np.array_equal(back.weights[name], ckpt.weights[name])
        from t1qc.volume import load_nifti

        vol = load_nifti(tr.paths[0])
        assert predict(back, vol) == predict(ckpt, vol)

    def test_save_twice_identical_bytes(self, tiny_task, tmp_path):
        samples, cfg = tiny_task
        model = build_conv5fc3(cfg, seed=23)
        from t1qc.model import _state_to_numpy

        ckpt = Checkpoint(config=cfg, weights=_state_to_numpy(model), metadata={"seed": 23})
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        save_checkpoint(ckpt, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_weight_count_invariant_enforced(self, tmp_path):
        model = build_conv5fc3(MINI_CONFIG, seed=24)
        from t1qc.model import _state_to_numpy

        weights = _state_to_numpy(model)
        weights.popitem()
        bad = Checkpoint(config=MINI_CONFIG, weights=weights, metadata={})
        with pytest.raises(DataError, match="weight count"):
            save_checkpoint(bad, tmp_path / "bad.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"junkjunkjunk")
        with pytest.raises(DataError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="missing checkpoint"):
            load_checkpoint(tmp_path / "none.ckpt")


class TestGradientCheck:
    def test_analytic_matches_finite_differences(self):
        checked, worst = gradient_check(n_coords=100, seed=0)
        assert checked == 100
        assert worst < 1e-3
