import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from gsaflow import tensor as T
from gsaflow.data import encode_caption, generate_dataset, make_group_batches, null_caption
from gsaflow.flow import (
    GroupBatch,
    SamplerConfig,
    apply_caption_dropout,
    euler_sample,
    interpolate,
    loss_flow_matching,
    loss_stage1,
    sample_timestep,
)
from gsaflow.model import DiT, ModelConfig
from gsaflow.tensor import ContractError, ShapeError, Tensor

SMALL = ModelConfig(hidden_dim=16, num_heads=2, depth=2, lora_rank=4, lora_alpha=4.0, ffn_mult=2)


class StubModel:
    """Velocity field given by a plain function of (z, t, caption, cache)."""

    def __init__(self, field, config=SMALL, dtype=np.float64):
        self.field = field
        self.config = config
        self.dtype = np.dtype(dtype)
        self.calls = []

    def velocity(self, z, t, c, cache=None):
        self.calls.append((np.array(c), cache))
        return Tensor._wrap(np.asarray(self.field(np.asarray(z), t, c, cache), dtype=self.dtype))

    def build_reference_cache(self, refs, captions=None):
        return ("cache", len(refs))


# time and interpolation ---------------------------------------------------------


def test_timestep_midpoint():
    class Zero:
        def standard_normal(self, size=None):
            return 0.0

    assert sample_timestep(Zero()) == 0.5


def test_timestep_distribution():
    t = sample_timestep(np.random.default_rng(0), 100_000)
    assert 0.49 <= np.median(t) <= 0.51
    p = 2 * norm.cdf(math.log(3)) - 1
    assert abs(np.mean((t > 0.25) & (t < 0.75)) - p) <= 0.01
    assert np.all((t > 0) & (t < 1))


def test_interpolate_endpoints_are_exact():
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=(8, 8, 4)), rng.normal(size=(8, 8, 4))
    assert np.array_equal(interpolate(z0, eps, 0.0).z_t, z0)
    assert np.array_equal(interpolate(z0, eps, 1.0).z_t, eps)
    s = interpolate(np.zeros(3), np.full(3, 2.0), 0.5)
    np.testing.assert_array_equal(s.z_t, [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(s.v_target, [2.0, 2.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(t=st.floats(0.0, 1.0), seed=st.integers(0, 2**16))
def test_interpolate_is_on_the_line(t, seed):
    rng = np.random.default_rng(seed)
    z0, eps = rng.normal(size=5), rng.normal(size=5)
    s = interpolate(z0, eps, t)
    np.testing.assert_array_equal(s.v_target, eps - z0)
    np.testing.assert_allclose(s.z_t, (1 - t) * z0 + t * eps, atol=1e-15)


def test_interpolate_contract():
    with pytest.raises(ShapeError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)
    with pytest.raises(ContractError):
        interpolate(np.zeros(3), np.zeros(3), 1.5)


def test_caption_dropout_rates():
    rng = np.random.default_rng(2)
    cap = encode_caption(1, 2, 3)
    assert all(np.array_equal(apply_caption_dropout(cap, 0.0, rng), cap) for _ in range(100))
    assert all(np.array_equal(apply_caption_dropout(cap, 1.0, rng), null_caption()) for _ in range(100))
    drops = sum(np.array_equal(apply_caption_dropout(cap, 0.1, rng), null_caption()) for _ in range(100_000))
    assert 0.09 <= drops / 100_000 <= 0.11
    with pytest.raises(ContractError):
        apply_caption_dropout(cap, 1.5, rng)


# losses ------------------------------------------------------------------------


def test_perfect_and_zero_predictors():
    rng = np.random.default_rng(3)
    s = interpolate(rng.normal(size=SMALL.latent_shape), rng.normal(size=SMALL.latent_shape), 0.3)
    perfect = StubModel(lambda z, t, c, cache: s.v_target)
    assert loss_flow_matching(perfect, s, None).item() == 0.0
    zero = StubModel(lambda z, t, c, cache: np.zeros_like(z))
    expect = np.mean((s.eps - s.z_0) ** 2)
    assert abs(loss_flow_matching(zero, s, None).item() - expect) < 1e-12


def test_group_batches_keep_references_clean():
    ds = generate_dataset(3, 5, 0)
    stream = make_group_batches(ds, 3, np.random.default_rng(4), 0.1)
    for _ in range(200):
        b = next(stream)
        assert b.group_size == 3 and b.reference_times == (0.0, 0.0)
        assert 0.0 < b.target.t < 1.0
        seq = next(s for s in ds if s.identity_id == b.identity_id)
        frames = [f.latent for f in seq.frames]
        assert any(np.array_equal(b.target.z_0, f) for f in frames)
        for r in b.references:
            assert any(np.array_equal(r, f) for f in frames)
            assert not np.array_equal(r, b.target.z_0)
    with pytest.raises(ContractError):
        GroupBatch(b.target, b.references, b.condition, 0, reference_times=(0.0, 0.2))


def test_stage1_without_references_is_plain_loss():
    model = DiT.create(SMALL, 0)
    b = next(make_group_batches(generate_dataset(2, 4, 0), 3, np.random.default_rng(5)))
    plain = loss_flow_matching(model, b.target, b.condition).item()
    alone = GroupBatch(b.target, [], b.condition, b.identity_id)
    assert loss_stage1(model, alone).item() == pytest.approx(plain, abs=1e-6)
    assert loss_stage1(model, b, use_references=False).item() == pytest.approx(plain, abs=1e-6)


def test_stage1_is_zero_for_a_perfect_stub():
    b = next(make_group_batches(generate_dataset(2, 4, 0), 3, np.random.default_rng(6)))
    stub = StubModel(lambda z, t, c, cache: b.target.v_target[None])
    assert loss_stage1(stub, [b]).item() == 0.0


def test_stage1_depends_on_references_but_not_through_them():
    model = DiT.create(SMALL, 1)
    rng = np.random.default_rng(7)
    for pair in model.adapters.phi_c.values():
        pair.B.data[...] = rng.normal(0, 0.05, pair.B.shape)
    b = next(make_group_batches(generate_dataset(2, 4, 0), 3, rng))
    other = GroupBatch(b.target, [b.references[0] + 1.0, b.references[1]], b.condition, b.identity_id)
    assert loss_stage1(model, b).item() != loss_stage1(model, other).item()

    model.adapters.set_trainable("phi_c", True)
    with T.Tape() as tape:
        loss = loss_stage1(model, b)
    tape.backward(loss)
    grads = [p.grad for p in model.adapters.parameters("phi_c")]
    assert all(g is not None for g in grads) and any(np.any(g) for g in grads)

    # the cache is a constant: the reference rows of the sample-index table get no gradient
    table = model.adapters.base["sample_embed"]
    table.requires_grad = True
    with T.Tape() as tape:
        loss = loss_stage1(model, b)
    tape.backward(loss)
    assert np.any(table.grad[0])
    assert not np.any(table.grad[1:])


# sampler -----------------------------------------------------------------------


@pytest.mark.parametrize("steps", [1, 7, 50, 100])
def test_constant_field_is_integrated_exactly(steps):
    k = np.random.default_rng(8).normal(size=SMALL.latent_shape)
    z_init = np.random.default_rng(9).normal(size=SMALL.latent_shape)
    stub = StubModel(lambda z, t, c, cache: k)
    out = euler_sample(stub, encode_caption(0, 0, 0), [], SamplerConfig(steps=steps), None, z_init=z_init)
    np.testing.assert_array_equal(out, z_init - k)


def test_doubling_steps_changes_nothing_on_constant_field():
    k = np.full(SMALL.latent_shape, 0.3)
    z_init = np.random.default_rng(10).normal(size=SMALL.latent_shape)
    stub = StubModel(lambda z, t, c, cache: k)
    a = euler_sample(stub, encode_caption(0, 0, 0), [], SamplerConfig(steps=25), None, z_init=z_init)
    b = euler_sample(stub, encode_caption(0, 0, 0), [], SamplerConfig(steps=50), None, z_init=z_init)
    assert a.tobytes() == b.tobytes()


def test_straight_path_recovers_the_data_point():
    rng = np.random.default_rng(11)
    z0, eps = rng.normal(size=SMALL.latent_shape), rng.normal(size=SMALL.latent_shape)
    stub = StubModel(lambda z, t, c, cache: eps - z0)
    out = euler_sample(stub, encode_caption(0, 0, 0), [], SamplerConfig(steps=50, cfg_scale=3.5), None, z_init=eps)
    assert np.max(np.abs(out - z0)) < 1e-5


def test_cfg_one_is_the_conditional_branch():
    model = DiT.create(SMALL, 2)
    cap = encode_caption(1, 2, 3)
    z_init = np.random.default_rng(12).normal(size=SMALL.latent_shape)
    out = euler_sample(model, cap, [], SamplerConfig(steps=5, cfg_scale=1.0), None, z_init=z_init)
    z = z_init.copy()
    ts = np.linspace(1, 0, 6)
    for i in range(5):
        v = model.velocity(z.astype(np.float32), ts[i], cap).data.astype(np.float64)
        z = z - (ts[i] - ts[i + 1]) * v
    np.testing.assert_allclose(out, z, atol=1e-12)

    # a model blind to the caption makes the guided mix collapse to v_c exactly
    class Blind:
        config, dtype = model.config, model.dtype

        def velocity(self, z, t, c, cache=None):
            return model.velocity(z, t, cap, cache)

    guided = euler_sample(Blind(), cap, [], SamplerConfig(steps=5, cfg_scale=3.5), None, z_init=z_init)
    assert guided.tobytes() == out.tobytes()

    seen = StubModel(lambda z, t, c, cache: np.ones_like(z))
    euler_sample(seen, cap, [], SamplerConfig(steps=3, cfg_scale=1.0), None, z_init=z_init)
    assert len(seen.calls) == 3 and all(np.array_equal(c, cap) for c, _ in seen.calls)


def test_guidance_mixes_conditional_and_null_branches():
    cap = encode_caption(1, 2, 3)

    def field(z, t, c, cache):
        return np.full(z.shape, 2.0 if np.array_equal(c, cap) else 1.0)

    stub = StubModel(field)
    z_init = np.zeros(SMALL.latent_shape)
    out = euler_sample(stub, cap, [np.zeros(SMALL.latent_shape)], SamplerConfig(steps=4, cfg_scale=3.5), None,
                       z_init=z_init)
    np.testing.assert_array_equal(out, np.full(SMALL.latent_shape, -(1.0 + 3.5 * (2.0 - 1.0))))
    # by default the unconditional branch sees neither caption nor references
    assert [cache for _, cache in stub.calls] == [("cache", 1), None] * 4
    stub.calls.clear()
    euler_sample(stub, cap, [np.zeros(SMALL.latent_shape)], SamplerConfig(steps=2, cfg_drop_refs=False), None,
                 z_init=z_init)
    assert all(cache == ("cache", 1) for _, cache in stub.calls)


def test_sampler_is_bit_deterministic():
    model = DiT.create(SMALL, 3)
    ref = generate_dataset(2, 4, 0)[0].frames[0].latent
    runs = [euler_sample(model, encode_caption(0, 1, 2), [ref], SamplerConfig(steps=4),
                         np.random.default_rng(13), batch=2) for _ in range(2)]
    assert runs[0].shape == (2,) + SMALL.latent_shape
    assert runs[0].tobytes() == runs[1].tobytes()


def test_sampler_contract():
    with pytest.raises(ContractError):
        SamplerConfig(steps=0)
    stub = StubModel(lambda z, t, c, cache: z)
    with pytest.raises(ShapeError):
        euler_sample(stub, encode_caption(0, 0, 0), [], SamplerConfig(steps=2), None, z_init=np.zeros((2, 2, 2)))
