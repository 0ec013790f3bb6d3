"""Finite-difference checks of the training losses on a tiny 64-bit model."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .data import generate_dataset, make_group_batches
from .dpo import build_preference_pools, loss_dpo, sample_pair
from .flow import interpolate, loss_flow_matching, loss_stage1
from .model import DiT, ModelConfig

TINY = ModelConfig(hidden_dim=16, num_heads=2, depth=2, latent_grid=8, latent_channels=4, patch_size=2,
                   lora_rank=4, lora_alpha=4.0, ffn_mult=2, ref_grad=True)
TOLERANCE = 1e-4


def _perturb_adapters(model: DiT, rng: np.random.Generator, scale: float = 0.1) -> None:
    # zero B would make every A gradient vanish, which checks nothing
    for s in ("phi_c", "phi_d"):
        for pair in model.adapters.sets[s].values():
            pair.B.data[...] = rng.normal(0.0, scale, pair.B.shape)


def _positions(x, rng: np.random.Generator, count: int):
    return rng.choice(x.size, size=min(count, x.size), replace=False)


def gradient_suite(seed: int = 0, coords: int = 12, config: ModelConfig = TINY) -> dict:
    """Worst relative error per (loss, parameter) over a few random coordinates.

    The reference cache is built with gradients enabled so that perturbing a
    weight moves both the target pass and the cached keys and values.
    """
    rng = np.random.default_rng(seed)
    config = dataclasses.replace(config, ref_grad=True)
    results = {}
    with T.precision(np.float64):
        model = DiT.create(config, seed).astype(np.float64)
        _perturb_adapters(model, rng)
        ds = generate_dataset(2, 4, seed)
        batch = next(make_group_batches(ds, 3, rng))
        frame = ds[0].frames[0]
        sample = interpolate(frame.latent.astype(np.float64), rng.standard_normal(frame.latent.shape), 0.37)
        layer = "blocks.0.q"
        for set_name in ("phi_c", "phi_d"):
            pair = model.adapters.sets[set_name][layer]
            for which, x in (("A", pair.A), ("B", pair.B)):
                idx = _positions(x, rng, coords)
                results[f"flow_matching/{set_name}.{layer}.{which}"] = T.grad_check(
                    lambda _: loss_flow_matching(model, sample, frame.caption), x, indices=idx)
                results[f"stage1/{set_name}.{layer}.{which}"] = T.grad_check(
                    lambda _: loss_stage1(model, batch), x, indices=idx)
        for name in ("blocks.1.mod.w", "blocks.0.k.w"):
            x = model.adapters.base[name]
            results[f"stage1/base.{name}"] = T.grad_check(
                lambda _: loss_stage1(model, batch), x, indices=_positions(x, rng, coords))
        pools = build_preference_pools(ds, 3, rng)
        pair = sample_pair(pools[0], rng)
        # a small beta keeps the sigmoid away from saturation
        for lname in ("blocks.0.v", "blocks.1.ffn2"):
            lora = model.adapters.phi_d[lname]
            for which, x in (("A", lora.A), ("B", lora.B)):
                results[f"dpo/phi_d.{lname}.{which}"] = T.grad_check(
                    lambda _: loss_dpo(model, pair, 5.0), x, indices=_positions(x, rng, coords))
    return results
