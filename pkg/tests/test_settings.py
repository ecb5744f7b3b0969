"""Tests for the pydantic-settings configuration tree."""

import pytest
from pydantic import ValidationError

from garment_dynamics.errors import ConfigError
from garment_dynamics.settings import Settings, load_settings


@pytest.fixture(autouse=True)
def clean_env(tmp_path, monkeypatch):
    """Run from an empty directory so no stray .env is picked up."""
    monkeypatch.chdir(tmp_path)
    for name in ("GARMENT_DYNAMICS_LOG_LEVEL", "GARMENT_DYNAMICS_THREADS", "GARMENT_DYNAMICS_TRAIN__LEARNING_RATE"):
        monkeypatch.delenv(name, raising=False)


class TestSettingsDefaults:
    """Test default configuration values."""

    def test_model_defaults(self):
        """Default network is 8 layers of width 512 with two geodesic heads."""
        model = Settings().model
        assert (model.n_layers, model.n_embed, model.n_ff, model.n_heads) == (8, 512, 512, 8)
        assert model.n_conn == 2
        assert model.n_hist == 10
        assert model.p_geo == 20.0

    def test_train_defaults(self):
        """Default loss weights and optimizer."""
        train = Settings().train
        assert train.lambda_sv == 1.0
        assert train.lambda_vel == 3.0
        assert train.learning_rate == 1e-4
        assert train.noise_std == 0.01

    def test_refine_defaults(self):
        """Default refinement pushes 2 mm outward."""
        refine = Settings().refine
        assert refine.lambda_lap == 0.5
        assert refine.epsilon == 0.002
        assert refine.collision_sign == "outward"

    def test_misc_defaults(self):
        """Default threads, logging and singular-value replacement."""
        settings = Settings()
        assert settings.threads == 1
        assert settings.log_level == "INFO"
        assert settings.use_svd_replace is True
        assert settings.eval.chamfer_samples == 10000


class TestEnvironmentVariableOverrides:
    """Test environment variable configuration."""

    def test_top_level(self, monkeypatch):
        """GARMENT_DYNAMICS_LOG_LEVEL should override default."""
        monkeypatch.setenv("GARMENT_DYNAMICS_LOG_LEVEL", "DEBUG")
        assert Settings().log_level == "DEBUG"

    def test_nested(self, monkeypatch):
        """Nested keys are joined with a double underscore."""
        monkeypatch.setenv("GARMENT_DYNAMICS_TRAIN__LEARNING_RATE", "0.01")
        settings = Settings()
        assert settings.train.learning_rate == 0.01
        assert settings.train.lambda_vel == 3.0

    def test_dotenv_file(self, tmp_path):
        """Settings should load from a .env file."""
        env_file = tmp_path / ".env"
        env_file.write_text("GARMENT_DYNAMICS_THREADS=4\n")
        assert Settings(_env_file=str(env_file)).threads == 4

    def test_env_vars_override_dotenv(self, tmp_path, monkeypatch):
        """Environment variables should override .env file."""
        env_file = tmp_path / ".env"
        env_file.write_text("GARMENT_DYNAMICS_THREADS=4\n")
        monkeypatch.setenv("GARMENT_DYNAMICS_THREADS", "8")
        assert Settings(_env_file=str(env_file)).threads == 8


class TestTomlConfig:
    """Test TOML files given with --config."""

    def test_toml_values(self, tmp_path):
        """Sections of the TOML file fill the configuration tree."""
        path = tmp_path / "desk.toml"
        path.write_text('log_level = "WARNING"\n[model]\nn_layers = 2\np_geo = 5.0\n[refine]\nepsilon = 0.001\n')
        settings = load_settings(path)
        assert settings.log_level == "WARNING"
        assert settings.model.n_layers == 2
        assert settings.model.p_geo == 5.0
        assert settings.refine.epsilon == 0.001

    def test_priority(self, tmp_path, monkeypatch):
        """Flags beat environment, which beats TOML, which beats defaults."""
        path = tmp_path / "desk.toml"
        path.write_text("threads = 2\nlog_level = \"ERROR\"\n")
        monkeypatch.setenv("GARMENT_DYNAMICS_THREADS", "3")
        monkeypatch.setenv("GARMENT_DYNAMICS_LOG_LEVEL", "DEBUG")
        settings = load_settings(path, log_level="WARNING")
        assert settings.threads == 3
        assert settings.log_level == "WARNING"

    def test_file_is_not_sticky(self, tmp_path):
        """A later load without --config ignores the earlier file."""
        path = tmp_path / "desk.toml"
        path.write_text("threads = 2\n")
        assert load_settings(path).threads == 2
        assert load_settings().threads == 1

    def test_missing_file(self, tmp_path):
        """A missing config file is a configuration error."""
        with pytest.raises(ConfigError, match="not found"):
            load_settings(tmp_path / "none.toml")

    def test_malformed_file(self, tmp_path):
        """Unparsable TOML is a configuration error."""
        path = tmp_path / "bad.toml"
        path.write_text("[model\nn_layers = 2\n")
        with pytest.raises(ConfigError, match="Malformed"):
            load_settings(path)


class TestSettingsValidation:
    """Test Pydantic validation rules."""

    def test_threads_range(self, monkeypatch):
        """Threads must be >= 1."""
        monkeypatch.setenv("GARMENT_DYNAMICS_THREADS", "0")
        with pytest.raises(ValidationError, match="greater than or equal to 1"):
            Settings()

    def test_geodesic_heads_bounded(self):
        """n_conn cannot exceed n_heads."""
        with pytest.raises(ValidationError, match="cannot exceed"):
            load_settings(model={"n_heads": 2, "n_conn": 3, "n_embed": 16})

    def test_collision_sign(self):
        """Only the as-printed and outward targets exist."""
        with pytest.raises(ValidationError):
            load_settings(refine={"collision_sign": "sideways"})
