import math

import numpy as np
import pytest

from conftest import peak_bytes
from sct.errors import ConfigError, NumericError, ShapeError
from sct.model import (
    AdditiveAttention,
    Batch,
    Linear,
    ModelConfig,
    analytic_param_count,
    build_model,
    cross_entropy,
    forward_loss,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
)


def toy_cfg(**kw):
    base = dict(n_layers=2, d_model=64, d_ffn=128, vocab=256, seq_len=8, mlp_rank=8, attention_param_mode="dense")
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, vocab, b=2, t=4):
    seq = rng.integers(0, vocab, size=(b, t + 1))
    return Batch(seq[:, :-1], seq[:, 1:])


class TestParamCount:
    def test_closed_form(self):
        d, f, v, k = 64, 128, 256, 8
        expected = v * d + 2 * (2 * d + 4 * d * d + 3 * k * (d + f + 1)) + d + d * v
        model = build_model(toy_cfg())
        assert model.param_count() == expected == analytic_param_count(toy_cfg())
        assert model.spectral_param_count() == 2 * 3 * k * (d + f + 1)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(tie_embeddings=True),
            dict(attention_param_mode="spectral", attn_rank=4),
            dict(mlp_mode="dense"),
            dict(attention_mode="additive", n_layers=3),
        ],
    )
    def test_variants_match_formula(self, kw):
        cfg = toy_cfg(**kw)
        assert build_model(cfg).param_count() == analytic_param_count(cfg)

    def test_dense_mlp_has_no_spectral_params(self):
        assert build_model(toy_cfg(mlp_mode="dense")).spectral_param_count() == 0

    def test_llama70b_spectral_count(self):
        cfg = ModelConfig(
            n_layers=80, d_model=8192, d_ffn=28672, vocab=8, seq_len=4, mlp_rank=32, attn_rank=32,
            attention_mode="additive", attention_param_mode="spectral",
        )
        per_layer = 3 * 32 * (8192 + 28672 + 1) + 4 * 32 * (2 * 8192 + 1)
        spectral = 80 * per_layer
        assert spectral == 450_905_600
        assert abs(spectral - 452e6) / 452e6 < 0.01
        # formula agrees with the layer-by-layer accounting used elsewhere
        dense_part = analytic_param_count(cfg) - spectral
        assert dense_part == 8 * 8192 * 2 + 80 * 2 * 8192 + 8192

    def test_rank_too_large(self):
        with pytest.raises(ConfigError):
            toy_cfg(mlp_rank=65)
        with pytest.raises(ConfigError):
            toy_cfg(attention_param_mode="spectral", attn_rank=100)

    def test_bad_counts(self):
        with pytest.raises(ConfigError):
            toy_cfg(n_layers=0)


class TestLoss:
    def test_untrained_near_uniform(self, rng):
        model = build_model(toy_cfg())
        loss, logits = forward_loss(model, random_batch(rng, 256, b=4, t=8))
        assert logits.shape == (4, 8, 256)
        assert abs(loss - math.log(256)) < 0.15 * math.log(256)

    def test_brute_force_two_token_vocab(self, rng):
        model = build_model(toy_cfg(vocab=2, d_model=8, d_ffn=16, mlp_rank=4, init_std=0.5))
        batch = random_batch(rng, 2, b=3, t=5)
        loss, logits = forward_loss(model, batch)
        total = 0.0
        for i in range(3):
            for j in range(5):
                z0, z1 = float(logits[i, j, 0]), float(logits[i, j, 1])
                zt = (z0, z1)[int(batch.targets[i, j])]
                total += math.log(math.exp(z0) + math.exp(z1)) - zt
        assert abs(loss - total / 15) < 1e-10

    def test_large_margin_drives_loss_to_zero(self):
        logits = np.zeros((1, 3, 5))
        logits[..., 2] = 200.0
        loss, _ = cross_entropy(logits, np.full((1, 3), 2))
        assert loss < 1e-80

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_activation_norms(self, rng):
        model = build_model(toy_cfg(n_layers=1))
        model.head.weight.data[0, 0] = np.inf
        with pytest.raises(NumericError) as info:
            forward_loss(model, random_batch(rng, 256))
        assert "block0" in info.value.diagnostics

    def test_out_of_vocab_ids(self):
        model = build_model(toy_cfg(vocab=256))
        with pytest.raises(ShapeError):
            forward_loss(model, Batch([[300]], [[1]]))

    def test_deterministic(self, rng):
        batch = random_batch(rng, 256)
        a = forward_loss(build_model(toy_cfg(seed=3)), batch)[0]
        b = forward_loss(build_model(toy_cfg(seed=3)), batch)[0]
        assert a == b


class TestAdditiveAttention:
    def _attn(self, d, weight_fn):
        projs = [Linear(n, weight_fn()) for n in "qkvo"]
        return AdditiveAttention(*projs, seq_len=4)

    def test_identity_projections_triple_input(self, rng):
        attn = self._attn(6, lambda: np.eye(6))
        x = rng.standard_normal((5, 6))
        np.testing.assert_allclose(attn.forward(x, (1, 5)), 3 * x, atol=1e-15)

    def test_zero_projections(self, rng):
        attn = self._attn(6, lambda: np.zeros((6, 6)))
        np.testing.assert_array_equal(attn.forward(rng.standard_normal((5, 6)), (1, 5)), 0.0)

    def test_all_four_projections_receive_gradient(self, rng):
        attn = self._attn(4, lambda: rng.standard_normal((4, 4)))
        x = rng.standard_normal((3, 4))
        c = rng.standard_normal((3, 4))
        attn.forward(x, (1, 3))
        attn.backward(c, (1, 3))
        for proj in attn.projections():
            w = proj.weight
            assert np.any(w.grad)
            # spot check one entry against a central difference
            h, orig = 1e-6, w.data[1, 2]
            w.data[1, 2] = orig + h
            plus = np.sum(attn.forward(x, (1, 3)) * c)
            w.data[1, 2] = orig - h
            minus = np.sum(attn.forward(x, (1, 3)) * c)
            w.data[1, 2] = orig
            assert abs((plus - minus) / (2 * h) - w.grad[1, 2]) < 1e-7 * max(1.0, abs(w.grad[1, 2]))


@pytest.mark.parametrize("attention_mode", ["additive", "causal_softmax"])
@pytest.mark.parametrize("tie", [False, True])
def test_end_to_end_finite_difference(rng, attention_mode, tie):
    cfg = ModelConfig(
        n_layers=1, d_model=8, d_ffn=16, vocab=16, seq_len=4, mlp_rank=4, attn_rank=4,
        attention_mode=attention_mode, attention_param_mode="spectral", tie_embeddings=tie, init_std=0.3,
    )
    model = build_model(cfg)
    batch = random_batch(rng, 16, b=2, t=4)
    loss_and_grads(model, batch)
    worst = 0.0
    for p in model.parameters():
        if p.kind not in ("u", "s", "v"):
            continue
        flat, gflat = p.data.reshape(-1), p.grad.reshape(-1)
        scale = np.max(np.abs(gflat))
        for idx in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + 1e-6
            plus = forward_loss(model, batch)[0]
            flat[idx] = orig - 1e-6
            minus = forward_loss(model, batch)[0]
            flat[idx] = orig
            fd = (plus - minus) / 2e-6
            denom = max(abs(fd), abs(gflat[idx]), 1e-3 * scale)
            worst = max(worst, abs(fd - gflat[idx]) / denom)
    assert worst < 1e-5


def test_no_dense_mlp_weight_buffer(rng):
    cfg = ModelConfig(n_layers=1, d_model=128, d_ffn=512, vocab=16, seq_len=4, mlp_rank=8, attention_param_mode="spectral",
                      attn_rank=8)
    model = build_model(cfg)
    batch = random_batch(rng, 16, b=1, t=4)
    loss_and_grads(model, batch)  # warm caches
    peak, _ = peak_bytes(loss_and_grads, model, batch)
    assert peak < 128 * 512 * 8
    for layer in model.spectral_layers():
        for p in layer.parameters():
            assert p.data.ndim < 2 or min(p.data.shape) <= 8


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = toy_cfg(attention_param_mode="spectral", attn_rank=4, n_layers=1)
    model = build_model(cfg)
    batch = random_batch(rng, 256)
    loss_and_grads(model, batch)
    for p in model.parameters():
        p.data -= 0.01 * p.grad  # move away from the seeded init
    path = save_checkpoint(model, tmp_path / "ckpt", extra={"step": 3})
    assert (path / "manifest.json").exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]
    back = load_checkpoint(path)
    for a, b in zip(model.parameters(), back.parameters()):
        assert a.name == b.name
        np.testing.assert_array_equal(a.data, b.data)
    assert forward_loss(back, batch)[0] == forward_loss(model, batch)[0]
    # overwriting an existing checkpoint keeps the directory valid
    save_checkpoint(model, path)
    assert load_checkpoint(path).param_count() == model.param_count()
