"""Tests for the manifold-aware transformer, geodesic attention and checkpoints."""

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from garment_dynamics import shapes
from garment_dynamics.errors import ArchiveError, ModelError
from garment_dynamics.features import NormStats
from garment_dynamics.geometry import build_mesh, geodesic_field
from garment_dynamics.model import (
    ManifoldTransformer,
    ModelConfig,
    geodesic_attention,
    load_checkpoint,
    parameter_gradients,
    save_checkpoint,
    split_faces,
)
from garment_dynamics.trainer import loss


@pytest.fixture
def strip_field(strip_mesh):
    field = geodesic_field(strip_mesh)
    return geodesic_field(strip_mesh, scale=float(field.D.mean()))


def make_inputs(config, n_faces, field, dtype=torch.float32, seed=0):
    generator = torch.Generator().manual_seed(seed)
    tokens = torch.randn(n_faces, config.token_dim, generator=generator, dtype=dtype)
    bias = torch.from_numpy(geodesic_attention(field, np.arange(n_faces), config.p_geo)).to(dtype)
    return tokens, bias


class TestModelConfig:
    """Test hyperparameter validation."""

    def test_defaults(self):
        """Test the default architecture sizes."""
        config = ModelConfig()
        assert (config.n_layers, config.n_embed, config.n_heads, config.n_conn) == (8, 512, 8, 2)
        assert config.token_dim == 367

    def test_too_many_geodesic_heads(self):
        """Test n_conn may not exceed n_heads."""
        with pytest.raises(ValidationError, match="n_conn"):
            ModelConfig(n_heads=4, n_conn=5, n_embed=16)

    def test_indivisible_embedding(self):
        """Test n_embed must split evenly across heads."""
        with pytest.raises(ValidationError, match="divisible"):
            ModelConfig(n_embed=30, n_heads=4)


class TestGeodesicAttention:
    """Test fixed attention matrices from geodesic distances."""

    @pytest.mark.parametrize("p_geo", [0.01, 0.1, 1.0, 10.0, 20.0, 50.0, 100.0])
    def test_rows_are_monotone_distributions(self, strip_field, p_geo):
        """Test rows sum to one and never weight a farther face above a nearer one."""
        A = geodesic_attention(strip_field, np.arange(strip_field.n_faces), p_geo)
        assert np.isfinite(A).all()
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
        for row, distances in zip(A, strip_field.D.astype(np.float64)):
            order = np.argsort(distances, kind="stable")
            assert (np.diff(row[order]) <= 1e-15).all()

    def test_subset_is_renormalized(self, strip_field):
        """Test a face subset yields a square stochastic matrix over that subset."""
        subset = [0, 5, 9, 20, 33]
        A = geodesic_attention(strip_field, subset, 2.0)
        assert A.shape == (5, 5)
        np.testing.assert_allclose(A.sum(axis=1), 1.0)

    def test_disconnected_faces_get_zero_weight(self):
        """Test infinite distances map to exactly zero attention."""
        mesh = build_mesh(*shapes.two_panel(0.2, 0.1, 0.3, 4, 3, seam_cut=1.0, left_seam_cut=1.0))
        field = geodesic_field(mesh)
        A = geodesic_attention(field, np.arange(mesh.n_faces), 1.0, scale=0.1)
        half = mesh.n_faces // 2
        assert (A[:half, half:] == 0.0).all()
        assert (A[half:, :half] == 0.0).all()
        np.testing.assert_allclose(A.sum(axis=1), 1.0)

    def test_invalid_arguments(self, strip_field):
        """Test empty subsets, out-of-range faces and non-positive exponents."""
        with pytest.raises(ModelError, match="empty"):
            geodesic_attention(strip_field, [], 1.0)
        with pytest.raises(ModelError, match="outside"):
            geodesic_attention(strip_field, [0, 999], 1.0)
        with pytest.raises(ModelError, match="positive"):
            geodesic_attention(strip_field, [0, 1], 0.0)


class TestSplitFaces:
    """Test random face partitions for split training."""

    def test_partition(self, rng):
        """Test subsets cover every face once with sizes within one."""
        parts = split_faces(50, 4, rng)
        assert len(parts) == 4
        np.testing.assert_array_equal(np.sort(np.concatenate(parts)), np.arange(50))
        sizes = [len(p) for p in parts]
        assert max(sizes) - min(sizes) <= 1

    def test_single_subset(self, rng):
        """Test n_s = 1 keeps every face in order."""
        (only,) = split_faces(7, 1, rng)
        np.testing.assert_array_equal(only, np.arange(7))

    def test_too_many_subsets(self, rng):
        """Test more subsets than faces is rejected."""
        with pytest.raises(ModelError):
            split_faces(3, 4, rng)


class TestForward:
    """Test output shapes and constraints."""

    def test_output_shapes(self, tiny_model_config, strip_mesh, strip_field):
        """Test Ψ (F, 3, 3), descending positive Σ (F, 3) and q (3)."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).eval()
        tokens, bias = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field)
        out = model(tokens, bias)
        assert out.psi.shape == (strip_mesh.n_faces, 3, 3)
        assert out.sigma.shape == (strip_mesh.n_faces, 3)
        assert out.q.shape == (3,)
        assert (out.sigma > 0).all()
        assert (out.sigma[:, :-1] >= out.sigma[:, 1:]).all()

    def test_batched_matches_unbatched(self, tiny_model_config, strip_mesh, strip_field):
        """Test a batch of two equals two separate calls."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).eval()
        a, bias = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field, seed=1)
        b, _ = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field, seed=2)
        with torch.no_grad():
            batched = model(torch.stack((a, b)), bias)
            single = [model(a, bias), model(b, bias)]
        for k in range(2):
            torch.testing.assert_close(batched.psi[k], single[k].psi, rtol=1e-5, atol=1e-5)
            torch.testing.assert_close(batched.sigma[k], single[k].sigma, rtol=1e-5, atol=1e-5)
            torch.testing.assert_close(batched.q[k], single[k].q, rtol=1e-5, atol=1e-5)

    def test_missing_bias(self, tiny_model_config, strip_mesh, strip_field):
        """Test geodesic heads cannot run without an attention matrix."""
        model = ManifoldTransformer(tiny_model_config)
        tokens, _ = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field)
        with pytest.raises(ModelError, match="bias"):
            model(tokens)

    def test_learned_heads_only(self, tiny_model_config, strip_mesh, strip_field):
        """Test n_conn = 0 runs without a bias."""
        config = tiny_model_config.model_copy(update={"n_conn": 0})
        tokens, _ = make_inputs(config, strip_mesh.n_faces, strip_field)
        assert ManifoldTransformer(config)(tokens).psi.shape == (strip_mesh.n_faces, 3, 3)

    def test_wrong_token_dim(self, tiny_model_config, strip_field):
        """Test tokens of the wrong width are rejected."""
        model = ManifoldTransformer(tiny_model_config)
        with pytest.raises(ModelError, match="Token dimension"):
            model(torch.zeros(5, 10))

    def test_bias_shape_mismatch(self, tiny_model_config, strip_mesh, strip_field):
        """Test a bias for another face count is rejected."""
        model = ManifoldTransformer(tiny_model_config)
        tokens, _ = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field)
        with pytest.raises(ModelError, match="does not match"):
            model(tokens, torch.eye(4))

    def test_permutation_equivariance(self, tiny_model_config, strip_mesh, strip_field, rng):
        """Test permuting faces and the geodesic bias permutes Ψ and Σ and leaves q unchanged."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).double().eval()
        tokens, bias = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field, dtype=torch.float64)
        perm = torch.from_numpy(rng.permutation(strip_mesh.n_faces))
        with torch.no_grad():
            out = model(tokens, bias)
            permuted = model(tokens[perm], bias[perm][:, perm])
        torch.testing.assert_close(permuted.psi, out.psi[perm], rtol=0, atol=1e-10)
        torch.testing.assert_close(permuted.sigma, out.sigma[perm], rtol=0, atol=1e-10)
        torch.testing.assert_close(permuted.q, out.q, rtol=0, atol=1e-10)

    def test_zero_heads_predict_rest(self, tiny_model_config, strip_mesh, strip_field):
        """Test zeroed output heads give Ψ = I, Σ = 1 and q = 0 for any input."""
        model = ManifoldTransformer(tiny_model_config).eval()
        with torch.no_grad():
            for head in (model.face_head, model.velocity_head):
                head.weight.zero_()
                head.bias.zero_()
            out = model(*make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field, seed=3))
        assert torch.equal(out.psi, torch.eye(3).expand(strip_mesh.n_faces, 3, 3))
        torch.testing.assert_close(out.sigma, torch.ones(strip_mesh.n_faces, 3), rtol=0, atol=1e-6)
        assert torch.equal(out.q, torch.zeros(3))


class TestGradients:
    """Test reverse-mode gradients."""

    @pytest.mark.slow
    def test_gradcheck_float64(self, tiny_model_config):
        """Test analytic input gradients against finite differences in double precision."""
        mesh = build_mesh(*shapes.grid_strip(0.1, 0.1, 3, 2))
        field = geodesic_field(mesh)
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).double().eval()
        tokens, bias = make_inputs(tiny_model_config, mesh.n_faces, field, dtype=torch.float64)
        tokens.requires_grad_(True)
        assert torch.autograd.gradcheck(lambda t: tuple(model(t, bias)), (tokens,), eps=1e-6, atol=1e-5)

    def loss_inputs(self, config):
        mesh = build_mesh(*shapes.grid_strip(0.1, 0.1, 3, 2))
        tokens, bias = make_inputs(config, mesh.n_faces, geodesic_field(mesh), dtype=torch.float64)
        generator = torch.Generator().manual_seed(7)
        targets = (
            torch.eye(3, dtype=torch.float64) + 0.1 * torch.randn(mesh.n_faces, 3, 3, generator=generator, dtype=torch.float64),
            torch.rand(mesh.n_faces, 3, generator=generator, dtype=torch.float64) + 0.5,
            0.01 * torch.randn(3, generator=generator, dtype=torch.float64),
        )
        return tokens, bias, targets

    @pytest.mark.slow
    def test_loss_gradcheck_in_parameters(self, tiny_model_config):
        """Test loss gradients with respect to parameters against finite differences in double precision."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).double().eval()
        tokens, bias, targets = self.loss_inputs(tiny_model_config)
        params = dict(model.named_parameters())
        names = ["face_head.weight", "velocity_head.bias", "layers.0.attention.value.weight", "embed.bias"]

        def total(*values):
            out = torch.func.functional_call(model, {**params, **dict(zip(names, values))}, (tokens, bias))
            return loss(out.psi, out.sigma, out.q, *targets).total

        inputs = tuple(params[n].detach().clone().requires_grad_(True) for n in names)
        assert torch.autograd.gradcheck(total, inputs, eps=1e-6, atol=1e-5)

    def test_parameter_gradients_match_differences(self, tiny_model_config):
        """Test parameter_gradients of the loss against central differences on sampled entries."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).double().eval()
        tokens, bias, targets = self.loss_inputs(tiny_model_config)

        def evaluate():
            out = model(tokens, bias)
            return loss(out.psi, out.sigma, out.q, *targets).total

        grads = parameter_gradients(model, evaluate())
        eps = 1e-6
        params = dict(model.named_parameters())
        for name in ("face_head.weight", "velocity_head.weight", "layers.1.ff.0.weight", "norm.weight"):
            flat = params[name].data.view(-1)
            for index in (0, flat.numel() // 2, flat.numel() - 1):
                original = flat[index].item()
                with torch.no_grad():
                    flat[index] = original + eps
                    upper = evaluate().item()
                    flat[index] = original - eps
                    lower = evaluate().item()
                    flat[index] = original
                numeric = (upper - lower) / (2 * eps)
                assert grads[name].view(-1)[index].item() == pytest.approx(numeric, abs=1e-5)

    def test_parameter_gradients(self, tiny_model_config, strip_mesh, strip_field):
        """Test every named parameter gets a finite gradient of matching shape."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config)
        tokens, bias = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field)
        out = model(tokens, bias)
        grads = parameter_gradients(model, out.psi.abs().sum() + out.q.abs().sum())
        assert set(grads) == {n for n, _ in model.named_parameters()}
        for name, p in model.named_parameters():
            assert grads[name].shape == p.shape
            assert torch.isfinite(grads[name]).all()

    def test_parameter_gradients_need_graph(self, tiny_model_config):
        """Test a detached loss is rejected."""
        with pytest.raises(ModelError, match="graph"):
            parameter_gradients(ManifoldTransformer(tiny_model_config), torch.tensor(1.0))


class TestCheckpoint:
    """Test checkpoint save and load."""

    def test_round_trip(self, tmp_path, tiny_model_config, strip_mesh, strip_field):
        """Test a loaded model reproduces the saved model's outputs and metadata."""
        torch.manual_seed(0)
        model = ManifoldTransformer(tiny_model_config).eval()
        stats = NormStats(np.zeros(tiny_model_config.token_dim), np.ones(tiny_model_config.token_dim))
        path = save_checkpoint(tmp_path / "run" / "checkpoint.pt", model, stats, metadata={"geodesic_scale": 0.25})
        loaded = load_checkpoint(path)
        assert loaded.config == tiny_model_config
        assert loaded.metadata == {"geodesic_scale": 0.25}
        np.testing.assert_array_equal(loaded.norm_stats.std, stats.std)
        tokens, bias = make_inputs(tiny_model_config, strip_mesh.n_faces, strip_field)
        with torch.no_grad():
            expected, actual = model(tokens, bias), loaded.model(tokens, bias)
        assert torch.equal(actual.psi, expected.psi)
        assert torch.equal(actual.sigma, expected.sigma)
        assert torch.equal(actual.q, expected.q)
        assert not (tmp_path / "run" / "checkpoint.pt.tmp").exists()

    def test_float64_round_trip(self, tmp_path, tiny_model_config):
        """Test the parameter dtype is restored."""
        model = ManifoldTransformer(tiny_model_config).double()
        stats = NormStats(np.zeros(tiny_model_config.token_dim), np.ones(tiny_model_config.token_dim))
        loaded = load_checkpoint(save_checkpoint(tmp_path / "c.pt", model, stats))
        assert next(loaded.model.parameters()).dtype == torch.float64

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint raises an archive error."""
        with pytest.raises(ArchiveError, match="not found"):
            load_checkpoint(tmp_path / "nope.pt")

    def test_unreadable_file(self, tmp_path):
        """Test a corrupt checkpoint raises an archive error."""
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ArchiveError, match="could not be read"):
            load_checkpoint(path)
