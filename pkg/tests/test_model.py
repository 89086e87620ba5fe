"""Policy network: adapter identity, partitions, heads, action interface."""

import numpy as np
import pytest

import anchornav.autodiff as ad
from anchornav.mixture import mixture_log_density
from anchornav.model import ModelConfig, PolicyModel

SMALL = ModelConfig(token_dim=16, n_layers=1, n_heads=2, ff_dim=32, context_k=2,
                    horizon=3, n_modes=3, raster_size=8)


def random_obs(rng, cfg, b=4):
    rasters = rng.random((b, cfg.context_k, cfg.raster_size, cfg.raster_size))
    goals = rng.normal(scale=3.0, size=(b, 2))
    return rasters, goals


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(token_dim=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(raster_size=12)
    with pytest.raises(ValueError):
        ModelConfig(n_modes=0)


def test_paper_scale_config():
    cfg = ModelConfig.paper_scale()
    assert cfg.token_dim == 768 and cfg.n_layers == 4
    assert cfg.n_heads == 8 and cfg.ff_dim == 3072


def test_head_shapes():
    shapes = SMALL.head_shapes()
    assert shapes["context"] == [3, 16]
    assert shapes["anchors"] == [3, 16]
    assert shapes["trajectory"] == [[3, 3, 2], [3, 3, 2]]
    assert shapes["score"] == [3, 1]
    assert shapes["velocity"] == [3, 1]


def test_config_digest_stable():
    assert ModelConfig().digest() == ModelConfig().digest()
    assert ModelConfig().digest() != ModelConfig(n_modes=4).digest()


# ---------------------------------------------------------------------------
# forward shape and distribution validity


def test_forward_shapes_and_validity():
    model = PolicyModel(SMALL, seed=0)
    rng = np.random.default_rng(0)
    rasters, goals = random_obs(rng, SMALL, b=5)
    with ad.no_grad():
        batch, value = model.forward(rasters, goals)
    assert batch.mu.shape == (5, 3, 3, 2)
    assert batch.sigma.shape == (5, 3, 3, 2)
    assert value.shape == (5,)
    for i in range(5):
        batch.row(i).validate()


def test_tokenize_input_validation():
    model = PolicyModel(SMALL, seed=0)
    with pytest.raises(ValueError):
        model.tokenize(np.zeros((2, 1, 8, 8)), np.zeros((2, 2)))  # wrong k
    with pytest.raises(ValueError):
        model.tokenize(np.zeros((2, 2, 16, 16)), np.zeros((2, 2)))  # wrong size


# ---------------------------------------------------------------------------
# adapter


def test_zero_init_adapter_identity():
    model = PolicyModel(SMALL, seed=1)
    rng = np.random.default_rng(2)
    rasters, goals = random_obs(rng, SMALL, b=8)
    with ad.no_grad():
        before, v_before = model.forward(rasters, goals)
    model.attach_ram()
    with ad.no_grad():
        after, v_after = model.forward(rasters, goals)
    for field in ("mu", "sigma", "rho", "scores", "vel"):
        dev = np.abs(getattr(after, field).data - getattr(before, field).data).max()
        assert dev <= 1e-12, f"{field} deviated by {dev}"
    assert np.abs(v_after.data - v_before.data).max() <= 1e-12


def test_adapter_attach_twice_raises():
    model = PolicyModel(SMALL, seed=0)
    model.attach_ram()
    with pytest.raises(RuntimeError):
        model.attach_ram()


def test_decode_requires_adapter():
    model = PolicyModel(SMALL, seed=0)
    rng = np.random.default_rng(0)
    rasters, goals = random_obs(rng, SMALL, b=1)
    with pytest.raises(RuntimeError):
        model.forward(rasters, goals, ram=True)


def test_adapter_clone_matches_base():
    model = PolicyModel(SMALL, seed=3)
    model.attach_ram()
    for l in range(SMALL.n_layers):
        for name, p in model.params.items():
            base = f"dec.{l}."
            if name.startswith(base):
                clone = model.params[f"ram.{l}.clone.{name[len(base):]}"]
                assert np.array_equal(clone.data, p.data)
        assert np.all(model.params[f"ram.{l}.z_in.w"].data == 0.0)
        assert np.all(model.params[f"ram.{l}.z_out.w"].data == 0.0)


def test_nonzero_adapter_changes_output():
    model = PolicyModel(SMALL, seed=4)
    rng = np.random.default_rng(5)
    rasters, goals = random_obs(rng, SMALL, b=2)
    model.attach_ram()
    model.params["ram.0.z_in.w"].data[:] = rng.normal(scale=0.1, size=(16, 16))
    model.params["ram.0.z_out.w"].data[:] = rng.normal(scale=0.1, size=(16, 16))
    with ad.no_grad():
        with_ram, _ = model.forward(rasters, goals, ram=True)
        without, _ = model.forward(rasters, goals, ram=False)
    assert np.abs(with_ram.mu.data - without.mu.data).max() > 1e-8


# ---------------------------------------------------------------------------
# partitions


def test_pretrain_partition_excludes_value_head():
    model = PolicyModel(SMALL, seed=0)
    part = model.pretrain_partition()
    assert part.frozen == frozenset(n for n in model.params if n.startswith("value."))
    part.validate_covers(model.params.keys())


def test_finetune_partition_contents():
    model = PolicyModel(SMALL, seed=0)
    with pytest.raises(RuntimeError):
        model.finetune_partition()
    model.attach_ram()
    part = model.finetune_partition()
    for name in part.adaptable:
        assert name.startswith(("ram.", "value.", "heads.sigma."))
    for name in model.params:
        if name.startswith(("ram.", "value.", "heads.sigma.")):
            assert name in part.adaptable
    part.validate_covers(model.params.keys())
    assert not (part.frozen & part.adaptable)


def test_apply_partition_sets_requires_grad():
    model = PolicyModel(SMALL, seed=0)
    model.attach_ram()
    part = model.finetune_partition()
    model.apply_partition(part)
    for name, p in model.params.items():
        assert p.requires_grad == (name in part.adaptable)


# ---------------------------------------------------------------------------
# sigma reinit


def test_reinit_logstd_gives_softplus_zero_sigma():
    model = PolicyModel(SMALL, seed=6)
    rng = np.random.default_rng(7)
    rasters, goals = random_obs(rng, SMALL, b=3)
    model.reinit_logstd()
    with ad.no_grad():
        batch, _ = model.forward(rasters, goals)
    expect = np.log(2.0) + 1e-4
    assert np.allclose(batch.sigma.data, expect, atol=1e-12)


def test_rho_fixed_zero():
    model = PolicyModel(SMALL, seed=8)
    rng = np.random.default_rng(9)
    rasters, goals = random_obs(rng, SMALL, b=2)
    model.rho_fixed_zero = True
    with ad.no_grad():
        batch, _ = model.forward(rasters, goals)
    assert np.all(batch.rho.data == 0.0)


# ---------------------------------------------------------------------------
# state I/O


def test_state_roundtrip_bit_exact():
    model = PolicyModel(SMALL, seed=10)
    arrays = model.state_arrays()
    other = PolicyModel(SMALL, seed=11)
    missing = other.load_state_arrays(arrays)
    assert missing == []
    for name, p in model.params.items():
        assert np.array_equal(other.params[name].data, p.data)


def test_pre_adapter_checkpoint_loads_into_adapter_model():
    base = PolicyModel(SMALL, seed=12)
    arrays = base.state_arrays()
    target = PolicyModel(SMALL, seed=13)
    target.attach_ram()
    missing = target.load_state_arrays(arrays)
    assert all(n.startswith("ram.") for n in missing)
    rng = np.random.default_rng(14)
    rasters, goals = random_obs(rng, SMALL, b=4)
    with ad.no_grad():
        b1, _ = base.forward(rasters, goals)
        b2, _ = target.forward(rasters, goals)
    assert np.abs(b1.mu.data - b2.mu.data).max() <= 1e-12


def test_load_unknown_name_raises():
    model = PolicyModel(SMALL, seed=0)
    arrays = model.state_arrays()
    arrays["bogus.w"] = np.zeros(3)
    with pytest.raises(ValueError):
        model.load_state_arrays(arrays)


def test_load_shape_mismatch_raises():
    model = PolicyModel(SMALL, seed=0)
    arrays = model.state_arrays()
    arrays["goal.w"] = np.zeros((3, 16))
    with pytest.raises(ValueError):
        model.load_state_arrays(arrays)


# ---------------------------------------------------------------------------
# action interface


def test_act_batch_deterministic():
    model = PolicyModel(SMALL, seed=15)
    rng = np.random.default_rng(16)
    rasters, goals = random_obs(rng, SMALL, b=6)
    out = model.act_batch(rasters, goals, deterministic=True)
    with ad.no_grad():
        batch, value = model.forward(rasters, goals)
    for i in range(6):
        p = batch.row(i)
        mode = int(np.argmax(p.scores))
        assert out["mode"][i] == mode
        assert np.allclose(out["w"][i], p.mu[mode, 0], atol=1e-12)
        assert np.isclose(out["vel"][i], p.vel[mode])
        assert np.allclose(out["action"][i], out["w"][i] * out["vel"][i])
        assert np.isclose(out["logp"][i], mixture_log_density(p, out["w"][i]), atol=1e-10)
    assert np.allclose(out["value"], value.data)


def test_act_batch_stochastic_reproducible():
    model = PolicyModel(SMALL, seed=17)
    rng = np.random.default_rng(18)
    rasters, goals = random_obs(rng, SMALL, b=6)
    a = model.act_batch(rasters, goals, rng=np.random.default_rng(5))
    b = model.act_batch(rasters, goals, rng=np.random.default_rng(5))
    assert np.array_equal(a["w"], b["w"]) and np.array_equal(a["mode"], b["mode"])
    c = model.act_batch(rasters, goals, rng=np.random.default_rng(6))
    assert not np.array_equal(a["w"], c["w"])


def test_act_batch_logp_is_full_mixture():
    # the sampled waypoint's log-prob integrates all modes, not just the drawn one
    model = PolicyModel(SMALL, seed=19)
    rng = np.random.default_rng(20)
    rasters, goals = random_obs(rng, SMALL, b=4)
    out = model.act_batch(rasters, goals, rng=np.random.default_rng(0))
    with ad.no_grad():
        batch, _ = model.forward(rasters, goals)
    for i in range(4):
        ref = mixture_log_density(batch.row(i), out["w"][i])
        assert np.isclose(out["logp"][i], ref, atol=1e-10)


def test_model_seed_determinism():
    a = PolicyModel(SMALL, seed=21)
    b = PolicyModel(SMALL, seed=21)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
