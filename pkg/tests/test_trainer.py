"""Tests for training targets, losses and the optimization loop."""

import json
import logging
from dataclasses import replace

import numpy as np
import pytest
import torch

from garment_dynamics.errors import TrainingError
from garment_dynamics.features import token_dim
from garment_dynamics.geometry import deformation_gradients, singular_values
from garment_dynamics.model import load_checkpoint
from garment_dynamics.trainer import (
    TrainConfig,
    WindowDataset,
    build_dataset,
    loss,
    prepare_sequence,
    split_schedule,
    train,
    truncate_metrics,
)


def truncated(sequence, n_frames):
    return replace(
        sequence,
        garment_frames=sequence.garment_frames[:n_frames],
        body_frames=sequence.body_frames[:n_frames],
    )


@pytest.fixture
def dataset(tiny_sequence, tiny_model_config):
    return build_dataset([tiny_sequence], tiny_model_config)


@pytest.fixture
def quick_config():
    """A handful of steps with both split phases."""
    return TrainConfig(batch_size=2, steps=6, split_count=2, split_phase_steps=3, checkpoint_every=3, learning_rate=1e-3)


class TestLoss:
    """Test the weighted L1 training loss."""

    def random_terms(self, rng, n_faces=5):
        def t(*shape):
            return torch.as_tensor(rng.normal(size=shape), dtype=torch.float64)

        return t(n_faces, 3, 3), t(n_faces, 3), t(3), t(n_faces, 3, 3), t(n_faces, 3), t(3)

    def test_zero_for_exact_prediction(self, rng):
        """Test predictions equal to targets give zero loss."""
        psi, sigma, q, *_ = self.random_terms(rng)
        terms = loss(psi, sigma, q, psi.clone(), sigma.clone(), q.clone())
        assert float(terms.total) == 0.0

    def test_velocity_weight(self):
        """Test a 0.1 velocity error with λ_vel = 3 gives total 0.3."""
        psi = torch.eye(3).expand(4, 3, 3)
        sigma = torch.ones(4, 3)
        terms = loss(psi, sigma, torch.tensor([0.1, 0.0, 0.0]), psi, sigma, torch.zeros(3), lambda_vel=3.0)
        assert float(terms.total) == pytest.approx(0.3)
        assert float(terms.deformation) == 0.0

    def test_matches_scalar_loop(self, rng):
        """Test against a per-element loop over faces."""
        pp, ps, pq, tp, ts, tq = self.random_terms(rng, n_faces=7)
        terms = loss(pp, ps, pq, tp, ts, tq, lambda_sv=0.7, lambda_vel=2.5)
        deformation = sv = 0.0
        for f in range(7):
            for i in range(3):
                sv += abs(float(ps[f, i] - ts[f, i]))
                for j in range(3):
                    deformation += abs(float(pp[f, i, j] - tp[f, i, j]))
        velocity = sum(abs(float(pq[i] - tq[i])) for i in range(3))
        expected = deformation / 7 + 0.7 * sv / 7 + 2.5 * velocity
        assert float(terms.total) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self, rng):
        """Test mismatched shapes are rejected."""
        pp, ps, pq, tp, ts, tq = self.random_terms(rng)
        with pytest.raises(TrainingError, match="shapes"):
            loss(pp, ps, pq, tp[:-1], ts, tq)

    def test_non_finite(self, rng):
        """Test a NaN prediction raises."""
        pp, ps, pq, tp, ts, tq = self.random_terms(rng)
        pq[0] = float("nan")
        with pytest.raises(TrainingError, match="not finite"):
            loss(pp, ps, pq, tp, ts, tq)


class TestTargets:
    """Test ground-truth targets and windowing."""

    def test_prepare_sequence(self, tiny_sequence):
        """Test Ψ composes consecutive gradients and Σ are their singular values."""
        targets = prepare_sequence(tiny_sequence)
        rest = tiny_sequence.garment_rest
        assert targets.frame_features.shape == (7, rest.n_faces, 34)
        assert targets.n_frames == 8
        phi = [deformation_gradients(rest, p) for p in tiny_sequence.garment_frames]
        for k in range(7):
            np.testing.assert_allclose(targets.psi[k] @ phi[k], phi[k + 1], atol=1e-10)
        np.testing.assert_allclose(targets.sigma[3], singular_values(phi[3]))
        np.testing.assert_allclose(targets.velocities[:, 0], 0.005, atol=1e-12)

    def test_window_count(self, dataset):
        """Test windows end at every t in [n_hist - 1, T - 2]."""
        assert len(dataset) == 6
        assert [t for _, t in dataset.windows] == [1, 2, 3, 4, 5, 6]

    def test_sample(self, dataset, tiny_model_config):
        """Test a window yields a token stack and the next-frame targets."""
        seq, tokens, psi, sigma, q = dataset.sample(2)
        assert tokens.shape == (48, token_dim(2))
        np.testing.assert_array_equal(tokens[:, :34], seq.frame_features[2])
        np.testing.assert_array_equal(tokens[:, -3:], np.broadcast_to(seq.velocities[2], (48, 3)))
        np.testing.assert_array_equal(psi, seq.psi[3])
        np.testing.assert_array_equal(sigma, seq.sigma[4])
        np.testing.assert_array_equal(q, seq.velocities[3])
        assert seq.geodesics is not None

    def test_norm_stats_dimension(self, dataset, tiny_model_config):
        """Test statistics cover the full token layout."""
        assert dataset.fit_norm_stats().dim == tiny_model_config.token_dim

    def test_short_sequences(self, tiny_sequence, caplog):
        """Test short sequences are skipped and an all-short corpus is rejected."""
        long_enough = prepare_sequence(tiny_sequence)
        short = prepare_sequence(truncated(tiny_sequence, 3))
        with caplog.at_level(logging.WARNING, logger="garment_dynamics.trainer"):
            dataset = WindowDataset([short, long_enough], n_hist=3)
        assert "Skipping" in caplog.text
        assert {s for s, _ in dataset.windows} == {1}
        with pytest.raises(TrainingError, match="too short"):
            WindowDataset([short], n_hist=3)

    def test_geodesic_cache(self, tmp_path, tiny_sequence, tiny_model_config):
        """Test datasets store rest-mesh geodesics in the cache directory."""
        build_dataset([tiny_sequence], tiny_model_config, geodesic_cache=tmp_path)
        assert len(list(tmp_path.glob("*.npy"))) == 1

    def test_split_schedule(self):
        """Test n_s switches to 1 after the split phase."""
        config = TrainConfig(split_count=4, split_phase_steps=10)
        assert split_schedule(9, config) == 4
        assert split_schedule(10, config) == 1


class TestTrain:
    """Test the optimization loop."""

    def test_outputs(self, tmp_path, dataset, tiny_model_config, quick_config):
        """Test the checkpoint and one metrics record per step are written."""
        result = train(dataset, tiny_model_config, quick_config, tmp_path, metadata={"corpus": "tiny"})
        lines = result.metrics_log.read_text().splitlines()
        assert len(lines) == 6
        record = json.loads(lines[0])
        assert set(record) >= {"step", "loss", "deformation", "singular_values", "velocity", "wall_time"}
        assert [r["n_s"] for r in result.history] == [2, 2, 2, 1, 1, 1]
        checkpoint = load_checkpoint(result.checkpoint)
        assert checkpoint.metadata["corpus"] == "tiny"
        assert checkpoint.metadata["step"] == 6
        assert checkpoint.metadata["train"]["batch_size"] == 2

    def test_deterministic(self, tmp_path, dataset, tiny_model_config, quick_config):
        """Test two runs with the same seed give identical loss curves."""
        a = train(dataset, tiny_model_config, quick_config, tmp_path / "a")
        b = train(dataset, tiny_model_config, quick_config, tmp_path / "b")
        assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]

    def test_resume_reproduces_trajectory(self, tmp_path, dataset, tiny_model_config, quick_config):
        """Test stopping and resuming matches an uninterrupted run exactly."""
        full = train(dataset, tiny_model_config, quick_config, tmp_path / "full")
        first = train(dataset, tiny_model_config, quick_config.model_copy(update={"steps": 3}), tmp_path / "part")
        rest = train(dataset, tiny_model_config, quick_config, tmp_path / "part", resume=first.checkpoint)
        assert [r["step"] for r in rest.history] == [4, 5, 6]
        assert [r["loss"] for r in first.history + rest.history] == [r["loss"] for r in full.history]
        assert len((tmp_path / "part" / "metrics.jsonl").read_text().splitlines()) == 6

    def test_resume_drops_records_after_checkpoint(self, tmp_path, dataset, tiny_model_config, quick_config):
        """Test records logged after the resumed checkpoint are not duplicated."""
        part = tmp_path / "part"
        first = train(dataset, tiny_model_config, quick_config.model_copy(update={"steps": 3}), part)
        with first.metrics_log.open("a", encoding="utf-8") as log:
            log.write(json.dumps({"step": 4, "loss": 1.0}) + "\n")
            log.write(json.dumps({"step": 5, "loss": 1.0}) + "\n")
            log.write('{"step": 6, "lo')
        train(dataset, tiny_model_config, quick_config, part, resume=first.checkpoint)
        steps = [json.loads(line)["step"] for line in first.metrics_log.read_text().splitlines()]
        assert steps == [1, 2, 3, 4, 5, 6]

    def test_truncate_missing_metrics(self, tmp_path):
        """Test truncating a log that does not exist keeps nothing and creates nothing."""
        assert truncate_metrics(tmp_path / "metrics.jsonl", 3) == 0
        assert not (tmp_path / "metrics.jsonl").exists()

    def test_resume_with_other_hyperparameters(self, tmp_path, dataset, tiny_model_config, quick_config):
        """Test resuming a checkpoint of a different architecture is rejected."""
        first = train(dataset, tiny_model_config, quick_config.model_copy(update={"steps": 1}), tmp_path)
        other = tiny_model_config.model_copy(update={"p_geo": 5.0})
        with pytest.raises(TrainingError, match="different hyperparameters"):
            train(dataset, other, quick_config, tmp_path, resume=first.checkpoint)

    def test_nan_loss_reports_step(self, tmp_path, dataset, tiny_model_config, quick_config, mocker):
        """Test a failing loss aborts with the step index."""
        mocker.patch("garment_dynamics.trainer.step_loss", side_effect=TrainingError("Loss is not finite"))
        with pytest.raises(TrainingError) as exc:
            train(dataset, tiny_model_config, quick_config, tmp_path)
        assert exc.value.step == 0
        assert "Step 0" in str(exc.value)

    @pytest.mark.slow
    def test_overfit_single_window(self, tmp_path, tiny_sequence, tiny_model_config):
        """Test 200 steps on a one-window corpus lower the loss."""
        dataset = build_dataset([truncated(tiny_sequence, 3)], tiny_model_config)
        assert len(dataset) == 1
        config = TrainConfig(batch_size=1, steps=200, split_phase_steps=0, noise_std=0.0, learning_rate=1e-3, checkpoint_every=1000)
        history = train(dataset, tiny_model_config, config, tmp_path).history
        losses = [r["loss"] for r in history]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        assert losses[-1] < losses[0]
