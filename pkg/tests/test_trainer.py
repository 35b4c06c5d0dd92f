import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from timedistill.augment import CropPair
from timedistill.checkpoint_manager import CheckpointError, list_checkpoints, load_checkpoint, save_checkpoint
from timedistill.cli import prepare_dataset
from timedistill.config import ConfigValidationError, SyntheticSpec, load_run_config
from timedistill.errors import SizingError, UsageError
from timedistill.forecast import run_forecast
from timedistill.loss import sl_loss, ssl_loss
from timedistill.model import ema_update, init_params
from timedistill.numeric import GradTape, backward, sgd_step
from timedistill.preprocessing import normalize, split
from timedistill.synthetic import synth_generate
from timedistill.trainer import (
    TrainConfig,
    branch_representations,
    complexity_terms,
    draw_crop,
    draw_crops,
    overlap_alignment,
    pretrain,
    sample_windows,
    train_step,
)


class TestTrainConfig:
    def test_defaults_are_valid(self):
        TrainConfig().validate()

    @pytest.mark.parametrize("field,value", [
        ("lam", 1.5),
        ("momentum", 1.0),
        ("keep_prob", 0.0),
        ("iterations", 0),
        ("lr", 0.0),
        ("optimizer", "rmsprop"),
        ("sl_axis", "channel"),
        ("mask_position", "middle"),
    ])
    def test_out_of_range(self, field, value):
        with pytest.raises(ConfigValidationError) as excinfo:
            replace(TrainConfig(), **{field: value}).validate()
        assert excinfo.value.key == f"train.{field}"

    def test_wrong_type(self):
        with pytest.raises(ConfigValidationError):
            replace(TrainConfig(), batch_size=2.5).validate()

    def test_needs_one_loss(self):
        with pytest.raises(ConfigValidationError):
            replace(TrainConfig(), use_supervised=False, use_contrastive=False).validate()

    def test_effective_lambda(self):
        assert TrainConfig(lam=0.3).effective_lambda() == 0.3
        assert TrainConfig(lam=0.3, use_supervised=False).effective_lambda() == 0.0
        assert TrainConfig(lam=0.3, use_contrastive=False).effective_lambda() == 1.0


class TestSampling:
    def test_windows_come_from_training_split(self, synthetic_ds, rng):
        windows = sample_windows(synthetic_ds, 16, 50, rng)
        assert windows.shape == (50, 16, 3)
        train = synthetic_ds.values[0, :240]
        for w in windows:
            starts = [o for o in range(240 - 15) if np.array_equal(train[o:o + 16], w)]
            assert starts

    def test_window_too_long(self, synthetic_ds, rng):
        with pytest.raises(SizingError):
            sample_windows(synthetic_ds, 241, 2, rng)

    def test_crop_overlap_at_least_two(self, rng):
        assert all(draw_crop(8, rng).overlap_len >= 2 for _ in range(500))

    def test_per_window_crops_share_overlap_length(self, rng):
        for _ in range(50):
            crops = draw_crops(16, 6, rng)
            assert len(crops) == 6
            assert len({c.overlap_len for c in crops}) == 1
            assert crops[0].overlap_len >= 2
            assert all(c.is_valid(16) for c in crops)

    def test_per_window_offsets_vary(self, rng):
        starts = {(c.a1, c.a2) for _ in range(20) for c in draw_crops(32, 4, rng)[1:]}
        assert len(starts) > 5

    def test_complexity_terms(self):
        terms = complexity_terms(crop_len=100, C=7, K=320, L=40)
        assert terms["projection"] == 100 * 7 * 320
        assert terms["contrastive"] == 320 * 40 * 40


class TestTrainStep:
    def test_teacher_follows_ema_recurrence(self, tiny_train_config, synthetic_ds):
        cfg = replace(tiny_train_config, momentum=0.9)
        state = init_params(0, cfg.model_dims(3), momentum=cfg.momentum)
        rng = np.random.default_rng(0)
        expected = state.teacher.arrays()
        step = lambda params, grads: sgd_step(params, grads, cfg.lr)
        for _ in range(4):
            windows = sample_windows(synthetic_ds, cfg.crop_window, cfg.batch_size, rng)
            train_step(state, windows, draw_crop(cfg.crop_window, rng), cfg, rng, step)
            student = state.student.arrays()
            expected = {n: 0.9 * v + 0.1 * student[n] for n, v in expected.items()}
        for name, tensor in state.teacher.items():
            assert_allclose(tensor.data, expected[name], rtol=0, atol=1e-12)

    def test_student_moves_every_step(self, tiny_train_config, synthetic_ds, rng):
        state = init_params(0, tiny_train_config.model_dims(3))
        before = state.student.arrays()
        windows = sample_windows(synthetic_ds, 16, 2, rng)
        _, grads = train_step(
            state, windows, draw_crop(16, rng), tiny_train_config, rng,
            lambda p, g: sgd_step(p, g, tiny_train_config.lr),
        )
        assert any(np.any(g) for g in grads.values())
        assert any(not np.array_equal(before[n], t.data) for n, t in state.student.items())

    def test_zero_lambda_reports_contrastive_loss(self, tiny_train_config, synthetic_ds, rng):
        cfg = replace(tiny_train_config, lam=0.0)
        state = init_params(0, cfg.model_dims(3))
        windows = sample_windows(synthetic_ds, 16, 2, rng)
        report, _ = train_step(state, windows, draw_crop(16, rng), cfg, rng, lambda p, g: sgd_step(p, g, cfg.lr))
        assert report.joint == report.ssl

    def test_per_window_crops(self, tiny_train_config, synthetic_ds, rng):
        state = init_params(0, tiny_train_config.model_dims(3))
        windows = sample_windows(synthetic_ds, 16, 3, rng)
        crops = [CropPair(0, 8, 3, 12), CropPair(4, 12, 7, 16), CropPair(0, 8, 3, 12)]
        with GradTape():
            h_t, h_t_centered, h_s = branch_representations(state, windows, crops, tiny_train_config, rng)
        assert h_t.shape == h_t_centered.shape == h_s.shape == (3, 5, 8)
        report, _ = train_step(state, windows, crops, tiny_train_config, rng, lambda p, g: sgd_step(p, g, 1e-3))
        assert report.is_finite()
        assert report.n_positive == 15

    def test_crops_follow_their_window(self, tiny_train_config, synthetic_ds, rng):
        cfg = replace(tiny_train_config, keep_prob=1.0, use_center=False)
        state = init_params(0, cfg.model_dims(3))
        windows = sample_windows(synthetic_ds, 16, 2, rng)
        crops = [CropPair(0, 8, 3, 12), CropPair(4, 12, 7, 16)]
        with GradTape():
            _, _, h_s = branch_representations(state, windows, crops, cfg, rng)
            _, _, h_s_second = branch_representations(state, windows[1:], crops[1], cfg, rng)
        assert_array_equal(h_s.data[1:], h_s_second.data)
        assert not np.array_equal(h_s.data[:1], h_s_second.data)

    def test_crops_with_different_overlap_lengths(self, tiny_train_config, synthetic_ds, rng):
        state = init_params(0, tiny_train_config.model_dims(3))
        windows = sample_windows(synthetic_ds, 16, 2, rng)
        with pytest.raises(UsageError):
            train_step(
                state, windows, [CropPair(0, 8, 3, 12), CropPair(0, 8, 2, 12)], tiny_train_config, rng,
                lambda p, g: sgd_step(p, g, 1e-3),
            )

    def test_crop_count_must_match_batch(self, tiny_train_config, synthetic_ds, rng):
        state = init_params(0, tiny_train_config.model_dims(3))
        windows = sample_windows(synthetic_ds, 16, 2, rng)
        with pytest.raises(UsageError):
            train_step(state, windows, [CropPair(0, 8, 3, 12)], tiny_train_config, rng, lambda p, g: sgd_step(p, g, 1e-3))


def _single_loss_run(cfg, ds, component, iterations=5):
    """Gradients de l'élève quand l'itération ne calcule qu'une seule des deux pertes."""
    state = init_params(cfg.seed, cfg.model_dims(3), momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(iterations):
        windows = sample_windows(ds, cfg.crop_window, cfg.batch_size, rng)
        crops = draw_crops(cfg.crop_window, cfg.batch_size, rng)
        tape = GradTape()
        tape.watch(state.student)
        with tape:
            h_t, h_t_centered, h_s = branch_representations(state, windows, crops, cfg, rng)
            if component == "ssl":
                loss = ssl_loss(h_t, h_s, cfg.temperature, cfg.same_branch_negatives)
            else:
                loss = sl_loss(h_t_centered, h_s, axis=cfg.sl_axis)
        grads = backward(tape, loss)
        state.student = sgd_step(state.student, grads, cfg.lr)
        ema_update(state)
        history.append(grads)
    return history


def _joint_run(cfg, ds, iterations=5):
    state = init_params(cfg.seed, cfg.model_dims(3), momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(iterations):
        windows = sample_windows(ds, cfg.crop_window, cfg.batch_size, rng)
        crops = draw_crops(cfg.crop_window, cfg.batch_size, rng)
        _, grads = train_step(state, windows, crops, cfg, rng, lambda p, g: sgd_step(p, g, cfg.lr))
        history.append(grads)
    return history


class TestLossWeightEndpoints:
    @pytest.mark.parametrize("lam,component", [(0.0, "ssl"), (1.0, "sl")])
    def test_gradients_match_single_loss_bit_for_bit(self, tiny_train_config, synthetic_ds, lam, component):
        cfg = replace(tiny_train_config, lam=lam, momentum=0.9)
        joint = _joint_run(cfg, synthetic_ds)
        single = _single_loss_run(cfg, synthetic_ds, component)
        assert len(joint) == len(single) == 5
        for iteration, (got, expected) in enumerate(zip(joint, single)):
            assert set(got) == set(expected)
            for name in expected:
                assert np.array_equal(got[name], expected[name]), (iteration, name)

    def test_intermediate_weight_differs(self, tiny_train_config, synthetic_ds):
        cfg = replace(tiny_train_config, lam=0.5)
        joint = _joint_run(cfg, synthetic_ds, iterations=1)
        single = _single_loss_run(cfg, synthetic_ds, "ssl", iterations=1)
        assert any(not np.array_equal(joint[0][n], single[0][n]) for n in single[0])


class TestPretrain:
    def test_trace_length_and_files(self, tiny_train_config, synthetic_ds, tmp_path):
        state, trace = pretrain(tiny_train_config, synthetic_ds, out_dir=tmp_path)
        assert len(trace) == 5
        assert state.iteration == 5
        assert all(r.is_finite() for r in trace.reports)
        assert trace.checkpoint_path == tmp_path / "final.ckpt.json"
        assert (tmp_path / "trace.csv").read_text().splitlines()[0] == "iteration,ssl,sl,joint"
        assert len((tmp_path / "timings.csv").read_text().splitlines()) == 6

    def test_same_seed_same_trace(self, tiny_train_config, synthetic_ds, tmp_path):
        pretrain(tiny_train_config, synthetic_ds, out_dir=tmp_path / "a")
        pretrain(tiny_train_config, synthetic_ds, out_dir=tmp_path / "b")
        assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()

    @pytest.mark.parametrize("mask_position", ["hybrid", "pre", "after", "reverse"])
    def test_each_mask_position_trains(self, tiny_train_config, synthetic_ds, mask_position):
        _, trace = pretrain(replace(tiny_train_config, mask_position=mask_position), synthetic_ds)
        assert len(trace) == 5
        assert all(r.is_finite() for r in trace.reports)

    def test_mask_position_changes_trajectory(self, tiny_train_config, synthetic_ds):
        _, hybrid = pretrain(tiny_train_config, synthetic_ds)
        _, after = pretrain(replace(tiny_train_config, mask_position="after"), synthetic_ds)
        assert not np.array_equal(hybrid.joint(), after.joint())

    def test_independent_teacher(self, tiny_train_config, synthetic_ds):
        state, trace = pretrain(replace(tiny_train_config, momentum_teacher=False), synthetic_ds)
        assert len(trace) == 5
        assert state.teacher.shapes() == state.student.shapes()

    def test_adam(self, tiny_train_config, synthetic_ds):
        _, trace = pretrain(replace(tiny_train_config, optimizer="adam"), synthetic_ds)
        assert len(trace) == 5

    def test_train_split_too_short(self, tiny_train_config):
        ds = normalize(split(synth_generate(0, 1, 20, 3, SyntheticSpec(length=20))))
        with pytest.raises(SizingError):
            pretrain(tiny_train_config, ds)

    def test_resume_reproduces_uninterrupted_run(self, tiny_train_config, synthetic_ds, tmp_path):
        cfg = replace(tiny_train_config, iterations=6, checkpoint_every=3)
        pretrain(cfg, synthetic_ds, out_dir=tmp_path / "full")
        checkpoint = load_checkpoint(tmp_path / "full" / "iter000003.ckpt.json")
        assert checkpoint.iteration == 3
        assert len(checkpoint.reports) == 3
        pretrain(cfg, synthetic_ds, resume=checkpoint, out_dir=tmp_path / "resumed")
        assert (tmp_path / "full" / "trace.csv").read_bytes() == (tmp_path / "resumed" / "trace.csv").read_bytes()

    def test_overlap_alignment(self, tiny_train_config, synthetic_ds, rng):
        state, _ = pretrain(tiny_train_config, synthetic_ds)
        matched, mismatched = overlap_alignment(state, synthetic_ds, tiny_train_config, rng, n_batches=2)
        assert -1.0 <= matched <= 1.0
        assert -1.0 <= mismatched <= 1.0

    @pytest.mark.slow
    def test_default_synthetic_run(self):
        cfg = load_run_config(Path(__file__).resolve().parent.parent / "configs" / "synthetic.json")
        ds = prepare_dataset(cfg)
        state, trace = pretrain(cfg.train, ds)
        joint = trace.joint()
        assert len(joint) == cfg.train.iterations
        assert joint[-20:].mean() < 0.9 * joint[:20].mean()

        [report], [baseline] = run_forecast(state, ds, replace(cfg.forecast, horizons=(24,)))
        assert report.mse <= 0.9 * baseline.mse

        matched, mismatched = overlap_alignment(state, ds, cfg.train, np.random.default_rng(0))
        assert matched > mismatched


class TestCheckpoint:
    def test_round_trip_is_exact(self, tiny_state, tmp_path, rng):
        tiny_state.center = rng.normal(size=8)
        tiny_state.iteration = 12
        loaded = load_checkpoint(save_checkpoint(tiny_state, tmp_path / "s.ckpt.json", rng=rng)).state
        assert loaded.dims == tiny_state.dims
        assert loaded.iteration == 12
        assert_array_equal(loaded.center, tiny_state.center)
        for name, tensor in tiny_state.student.items():
            assert_array_equal(loaded.student[name].data, tensor.data)
            assert_array_equal(loaded.teacher[name].data, tiny_state.teacher[name].data)

    def test_truncated_file(self, tiny_state, tmp_path):
        path = save_checkpoint(tiny_state, tmp_path / "s.ckpt.json")
        path.write_text(path.read_text()[:200])
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.field == "document"

    def test_version_mismatch(self, tiny_state, tmp_path):
        path = save_checkpoint(tiny_state, tmp_path / "s.ckpt.json")
        data = json.loads(path.read_text())
        data["version"] = 99
        path.write_text(json.dumps(data))
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.field == "version"

    def test_missing_field(self, tiny_state, tmp_path):
        path = save_checkpoint(tiny_state, tmp_path / "s.ckpt.json")
        data = json.loads(path.read_text())
        del data["center"]
        path.write_text(json.dumps(data))
        with pytest.raises(CheckpointError) as excinfo:
            load_checkpoint(path)
        assert excinfo.value.field == "center"

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.ckpt.json")

    def test_list_most_recent_first(self, tiny_state, tmp_path):
        for iteration in (3, 9, 6):
            tiny_state.iteration = iteration
            save_checkpoint(tiny_state, tmp_path / f"iter{iteration:06d}.ckpt.json")
        assert [c["iteration"] for c in list_checkpoints(tmp_path)] == [9, 6, 3]
