import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reflectgan import dataset as ds, gan, nn
from reflectgan.errors import ConfigError

SMALL_BLOCKS = ((8, 16), (16, 8), (8, 8), (8, 4))


def small_pairs(n=64, seed=0):
    rng = np.random.default_rng(seed)
    veg = rng.uniform(0.02, 0.5, (n, 7))
    bare = np.clip(veg * 0.8 + 0.05, 0, 1)
    return veg, bare


# -- architecture -----------------------------------------------------------------

def test_default_generator_shapes():
    g = gan.GeneratorNet()
    widths = [(b.in_dim, b.out_dim) for _, b in g.res.layers]
    assert widths == [(64, 128), (128, 64), (64, 64), (64, 32)]
    assert g.input_stage.layers[0][1].params["weight"].shape == (64, 7)
    assert g.output_stage.layers[0][1].params["weight"].shape == (7, 32)
    assert [b.skip is None for _, b in g.res.layers] == [False, False, True, False]


def test_generator_rejects_unchained_blocks():
    with pytest.raises(ConfigError):
        gan.GeneratorNet(blocks=((64, 128), (64, 32)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(0, 1000))
def test_generator_output_in_tanh_range(batch, seed):
    rng = np.random.default_rng(seed)
    g = gan.GeneratorNet(seed=seed).eval()
    out = gan.generator_forward(g, rng.uniform(-1, 1, (batch, 7)) * 50)
    assert out.shape == (batch, 7)
    assert np.all(np.abs(out) <= 1.0)


def test_generator_deterministic_in_inference():
    g = gan.GeneratorNet(seed=1).eval()
    x = np.random.default_rng(1).uniform(-1, 1, (4, 7))
    np.testing.assert_array_equal(g.forward(x), g.forward(x))


def _zero_main(block):
    for _, m in block.main.named_modules():
        if isinstance(m, nn.Linear):
            m.params["weight"][:] = 0
            m.params["bias"][:] = 0
        if isinstance(m, nn.BatchNorm):
            m.params["gamma"][:] = 0


def test_residual_zero_main_identity_and_projection():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 6))
    block = gan.ResidualBlock(6, 6, rng)
    _zero_main(block)
    np.testing.assert_array_equal(gan.residual_forward(block, x), x)
    proj = gan.ResidualBlock(6, 9, rng)
    _zero_main(proj)
    P, b = proj.skip.params["weight"], proj.skip.params["bias"]
    np.testing.assert_allclose(gan.residual_forward(proj, x), x @ P.T + b, atol=1e-15)
    assert gan.ResidualBlock(64, 128, rng).forward(rng.normal(size=(3, 64))).shape == (3, 128)


def test_residual_shape_error():
    with pytest.raises(ConfigError):
        gan.ResidualBlock(4, 4, np.random.default_rng(0)).forward(np.zeros((2, 5)))


def test_discriminator_range_and_order():
    rng = np.random.default_rng(3)
    d = gan.DiscriminatorNet(seed=3).eval()
    veg, bare = rng.uniform(-1, 1, (6, 7)), rng.uniform(-1, 1, (6, 7))
    s = gan.discriminator_forward(d, veg, bare)
    assert s.shape == (6, 1) and np.all((s > 0) & (s < 1))
    assert not np.allclose(d.logits(veg, bare), d.logits(bare, veg))
    np.testing.assert_array_equal(d.forward(np.concatenate([veg, bare], axis=1)), s)


def test_discriminator_shape_error():
    d = gan.DiscriminatorNet()
    with pytest.raises(ConfigError):
        d.forward(np.zeros((2, 7)), np.zeros((2, 6)))


@pytest.mark.parametrize("which", ["generator", "discriminator"])
def test_network_grad_checks(which):
    from reflectgan import gradcheck
    (res,) = gradcheck.run_grad_checks(seed=4, only=[which])
    assert res.max_rel_error < 1e-4


def test_grad_check_harness_covers_components_and_detects_corruption():
    from reflectgan import gradcheck
    assert {"linear", "batchnorm", "relu", "leaky_relu", "tanh", "sigmoid", "bce", "mse",
            "residual_identity", "residual_projection", "generator", "discriminator"} <= set(gradcheck.COMPONENTS)
    with gradcheck.corrupted_backward(nn.BatchNorm):
        (res,) = gradcheck.run_grad_checks(only=["batchnorm"])
    assert not res.passed
    (res,) = gradcheck.run_grad_checks(only=["batchnorm"])
    assert res.passed


# -- losses --------------------------------------------------------------------------

def test_d_loss_values():
    half = np.full(4, 0.5)
    lr, lf, tot = gan.d_loss(half, half)
    assert tot == pytest.approx(2 * math.log(2), abs=1e-15)
    _, _, tot = gan.d_loss(np.ones(3), np.zeros(3))
    assert tot < 1e-6


def test_d_loss_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        r, f = rng.uniform(0.01, 0.99, 8), rng.uniform(0.01, 0.99, 8)
        lr, lf, tot = gan.d_loss(r, f)
        exp_r = -math.fsum(math.log(v) for v in r) / 8
        exp_f = -math.fsum(math.log(1 - v) for v in f) / 8
        assert lr == pytest.approx(exp_r, abs=1e-12)
        assert lf == pytest.approx(exp_f, abs=1e-12)
        assert abs(tot - (lr + lf)) <= 1e-12


def test_g_loss_values():
    assert gan.g_loss(np.full(3, 0.5)) == pytest.approx(math.log(2), abs=1e-15)
    assert gan.g_loss(np.full(3, 1 - 1e-9)) < 1e-6
    x = np.ones((2, 7)) * 0.3
    assert gan.g_loss(np.full(2, 0.7), x, x, l1_weight=1.0) == gan.g_loss(np.full(2, 0.7))
    assert gan.g_loss(np.full(2, 0.7), x + 0.1, x, l1_weight=2.0) == pytest.approx(
        gan.g_loss(np.full(2, 0.7)) + 0.2, abs=1e-12)


# -- training -------------------------------------------------------------------------

def test_config_validation():
    for bad in (dict(batch_size=1), dict(lr=0), dict(epochs=-1), dict(l1_weight=-1), dict(beta1=1.0)):
        with pytest.raises(ConfigError):
            gan.GanTrainConfig(**bad).validate()


def test_zero_epochs_returns_initialization():
    cfg = gan.GanTrainConfig(epochs=0, seed=3)
    g1, _, hist = gan.train(small_pairs(), cfg, hidden=8, blocks=SMALL_BLOCKS)
    g2, _, _ = gan.train(small_pairs(), cfg, hidden=8, blocks=SMALL_BLOCKS)
    assert hist == []
    assert not g1.training
    assert gan.dumps_weights(g1) == gan.dumps_weights(g2)


def test_too_few_pairs():
    with pytest.raises(ConfigError):
        gan.train(small_pairs(n=10), gan.GanTrainConfig(epochs=1))


def test_training_deterministic_and_history():
    cfg = gan.GanTrainConfig(epochs=3, batch_size=16, seed=7)
    g1, d1, h1 = gan.train(small_pairs(), cfg, hidden=8, blocks=SMALL_BLOCKS)
    g2, d2, h2 = gan.train(small_pairs(), cfg, hidden=8, blocks=SMALL_BLOCKS)
    assert len(h1) == 3
    assert gan.dumps_weights(g1) == gan.dumps_weights(g2)
    assert gan.dumps_weights(d1) == gan.dumps_weights(d2)
    for h in h1:
        assert abs(h.loss_d - (h.loss_d_real + h.loss_d_fake)) <= 1e-12
    assert not d1.training and not g1.training


def test_steps_do_not_leak_gradients():
    veg, bare = (gan.normalize_reflectance(a) for a in small_pairs(16))
    g = gan.GeneratorNet(hidden=8, blocks=SMALL_BLOCKS, seed=1)
    d = gan.DiscriminatorNet(seed=2)
    tr = gan.GanTrainer(g, d, gan.GanTrainConfig(l1_weight=5.0))
    for _, gr in g.parameters():
        gr[...] = 0.25
    g_params = [p.copy() for p, _ in g.parameters()]
    tr.discriminator_step(veg, bare)
    assert all(np.all(gr == 0.25) for _, gr in g.parameters())
    assert all(np.array_equal(a, p) for a, (p, _) in zip(g_params, g.parameters()))
    for _, gr in d.parameters():
        gr[...] = -0.5
    d_params = [p.copy() for p, _ in d.parameters()]
    tr.generator_step(veg, bare)
    assert all(np.all(gr == -0.5) for _, gr in d.parameters())
    assert all(np.array_equal(a, p) for a, (p, _) in zip(d_params, d.parameters()))


def test_generator_step_gradient_matches_loss():
    """The gradient the generator step feeds back equals d(total loss)/d(fake)."""
    veg, bare = (gan.normalize_reflectance(a) for a in small_pairs(8, seed=4))
    g = gan.GeneratorNet(hidden=8, blocks=SMALL_BLOCKS, seed=1)
    d = gan.DiscriminatorNet(seed=2, dropout=0.0)
    cfg = gan.GanTrainConfig(l1_weight=3.0)
    tr = gan.GanTrainer(g, d, cfg)
    fake = g.forward(veg) * 0.5
    n = veg.shape[0]

    def total():
        s = tr._joint_scores(veg, bare, fake)[n:]
        return gan.g_loss(s, fake, bare, cfg.l1_weight)

    s = tr._joint_scores(veg, bare, fake)
    dl = np.zeros_like(s)
    dl[n:] = nn.bce_logit_grad(s[n:], np.ones_like(s[n:]))
    _, db = d.backward_logits(dl, accumulate=False)
    analytic = db[n:] + cfg.l1_weight * np.sign(fake - bare) / fake.size
    assert nn.grad_check(total, [fake], [analytic], kink_fn=d.kink_signature) < 1e-4


def test_short_training_moves_toward_truth():
    samples, truth = ds.synth_generate(ds.SynthConfig(n_samples=600, seed=1))
    bare, veg = ds.classify_by_ndvi(samples)
    pairs = ds.pair_samples(veg, bare)
    g, _, _ = gan.train(pairs, gan.GanTrainConfig(epochs=15, seed=1))
    v = np.array([p.veg for p in pairs])
    t = np.array([truth[p.veg_id] for p in pairs])
    rec = gan.reconstruct(g, v)
    assert np.all((rec >= 0) & (rec <= 1))
    assert np.sqrt(((rec - t) ** 2).mean(0)).mean() < np.sqrt(((v - t) ** 2).mean(0)).mean()


# -- reconstruct and weights -----------------------------------------------------------------

def test_reconstruct_range_and_single_row():
    g = gan.GeneratorNet(seed=5).eval()
    x = np.random.default_rng(5).uniform(0, 1, (10, 7))
    out = gan.reconstruct(g, x)
    assert out.shape == (10, 7) and np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(gan.reconstruct(g, x[0]), out[0], atol=1e-15)


def test_reconstruct_requires_inference_mode():
    with pytest.raises(ConfigError):
        gan.reconstruct(gan.GeneratorNet(), np.zeros((2, 7)))


def test_weights_roundtrip_exact(tmp_path):
    g, d, _ = gan.train(small_pairs(), gan.GanTrainConfig(epochs=2, batch_size=16), hidden=8, blocks=SMALL_BLOCKS)
    for net, role in ((g, "generator"), (d, "discriminator")):
        p = tmp_path / f"{role}.txt"
        gan.save_weights(net, p, role)
        back = gan.load_weights(p, 7, role)
        assert gan.dumps_weights(back, role) == p.read_text()
        for (n1, a, _), (n2, b, _) in zip(net.named_parameters(), back.named_parameters()):
            assert n1 == n2 and np.array_equal(a, b)
    probe = np.random.default_rng(0).uniform(-1, 1, (5, 7))
    back = gan.load_weights(tmp_path / "generator.txt")
    assert np.array_equal(back.forward(probe), g.forward(probe))


def test_weights_load_errors(tmp_path):
    p = tmp_path / "g.txt"
    gan.save_weights(gan.GeneratorNet(hidden=8, blocks=SMALL_BLOCKS), p)
    with pytest.raises(ConfigError, match="bands"):
        gan.load_weights(p, n_bands=6)
    with pytest.raises(ConfigError, match="expected discriminator"):
        gan.load_weights(p, role="discriminator")
    p.write_text(p.read_text().replace(" v1 ", " v9 ", 1))
    with pytest.raises(ConfigError, match="version"):
        gan.load_weights(p)
    p.write_text("garbage\n")
    with pytest.raises(ConfigError):
        gan.load_weights(p)
