"""Rectified-flow pieces: interpolation, timestep draws, losses and the Euler sampler.

Time convention: ``t = 0`` is data and ``t = 1`` is pure noise, so
``z_t = (1 - t) z_0 + t eps`` and the regression target is ``eps - z_0``.
Sampling integrates from ``t = 1`` down to ``t = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .data import null_caption
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class FlowSample:
    z_0: np.ndarray
    eps: np.ndarray
    t: float
    z_t: np.ndarray
    v_target: np.ndarray


@dataclass
class GroupBatch:
    """One noised target (index 0) plus the clean latents of N-1 references."""

    target: FlowSample
    references: list
    condition: np.ndarray
    identity_id: int
    reference_times: tuple = field(default=())

    def __post_init__(self):
        if not self.reference_times:
            self.reference_times = tuple(0.0 for _ in self.references)
        if any(t != 0.0 for t in self.reference_times):
            raise ContractError("reference samples must sit at t = 0")

    @property
    def group_size(self) -> int:
        return 1 + len(self.references)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 3.5
    cfg_drop_refs: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError(f"sampler needs steps >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ContractError(f"cfg_scale must be >= 0, got {self.cfg_scale}")

    def grid(self) -> np.ndarray:
        """Uniform time grid from 1 down to 0, ``steps + 1`` points."""
        return np.linspace(1.0, 0.0, self.steps + 1)


def sample_timestep(rng: np.random.Generator, size=None):
    """Logit-normal time: ``sigmoid(g)`` with ``g ~ N(0, 1)``."""
    g = rng.standard_normal(size)
    t = 1.0 / (1.0 + np.exp(-g))
    # a float64 sigmoid only reaches 0 or 1 for |g| > 36
    t = np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(t) if size is None else t


def interpolate(z_0, eps, t: float) -> FlowSample:
    z_0, eps = np.asarray(z_0), np.asarray(eps)
    if z_0.shape != eps.shape:
        raise ShapeError(f"data {z_0.shape} and noise {eps.shape} differ in shape")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    dtype = np.result_type(z_0.dtype, eps.dtype)
    if t == 0.0:
        z_t = z_0.astype(dtype, copy=True)
    elif t == 1.0:
        z_t = eps.astype(dtype, copy=True)
    else:
        z_t = ((1.0 - t) * z_0 + t * eps).astype(dtype)
    return FlowSample(z_0=z_0, eps=eps, t=float(t), z_t=z_t, v_target=(eps - z_0).astype(dtype))


def apply_caption_dropout(caption, p: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``p`` replace the whole caption by the null caption."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1], got {p}")
    caption = np.asarray(caption)
    if p > 0.0 and rng.random() < p:
        return null_caption(caption.shape[-1])
    return caption


def loss_flow_matching(model, sample: FlowSample, c, cache=None) -> Tensor:
    """Mean squared error between the target velocity and the model's prediction."""
    pred = model.velocity(sample.z_t, sample.t, c, cache=cache)
    return T.mse(pred, np.asarray(sample.v_target, dtype=pred.dtype))


def collate(batches: Sequence[GroupBatch]) -> tuple:
    """Stack group batches sharing one group size into model-ready arrays."""
    if not batches:
        raise ContractError("no group batches to collate")
    n = batches[0].group_size
    if any(b.group_size != n for b in batches):
        raise ContractError("group batches in one step must share a group size")
    z_t = np.stack([b.target.z_t for b in batches])
    v = np.stack([b.target.v_target for b in batches])
    t = np.array([b.target.t for b in batches])
    c = np.stack([b.condition for b in batches])
    refs = [np.stack([b.references[j] for b in batches]) for j in range(n - 1)]
    return z_t, t, c, refs, v


def loss_stage1(model, batch: Union[GroupBatch, Sequence[GroupBatch]], use_references: bool = True) -> Tensor:
    """Flow-matching loss on the target only, conditioned on its clean references.

    Accepts one group batch or a list of them (averaged). With no references,
    or ``use_references=False``, this is the plain single-sample loss.
    """
    batches = [batch] if isinstance(batch, GroupBatch) else list(batch)
    z_t, t, c, refs, v = collate(batches)
    cache = model.build_reference_cache(refs) if (refs and use_references) else None
    pred = model.velocity(z_t, t, c, cache=cache)
    return T.mse(pred, v.astype(pred.dtype))


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def euler_sample(
    model,
    c,
    refs: Sequence[np.ndarray],
    cfg: SamplerConfig,
    rng: np.random.Generator,
    batch: Optional[int] = None,
    z_init: Optional[np.ndarray] = None,
    ref_captions: Optional[Sequence] = None,
) -> np.ndarray:
    """Integrate the guided velocity field from noise at ``t = 1`` to ``t = 0``.

    The guided velocity is ``v_u + s (v_c - v_u)`` where ``v_c`` conditions on
    the caption and the references and ``v_u`` on the null caption alone, so
    guidance pushes towards both. With ``cfg_drop_refs=False`` the
    unconditional branch keeps the references too. At ``s = 1`` the unconditional pass is
    skipped. Each Euler increment ``(t_i - t_{i+1}) v`` is accumulated as
    ``-t_i v + t_{i+1} v`` in a compensated float64 sum, so a constant field
    lands exactly on ``z_init - v`` for any step count.

    ``batch`` draws several samples at once; ``c`` and each reference may
    then be per-sample (leading axis) or shared.
    """
    if cfg.steps < 1:
        raise ContractError("sampler needs steps >= 1")
    shape = model.config.latent_shape
    lead = () if batch is None else (batch,)
    if z_init is None:
        z_init = rng.standard_normal(lead + shape)
    z_hi = np.array(z_init, dtype=np.float64)
    if z_hi.shape != lead + shape:
        raise ShapeError(f"initial latent {z_hi.shape} does not match {lead + shape}")
    z_lo = np.zeros_like(z_hi)
    c = np.asarray(c)
    c_null = null_caption(c.shape[-1])
    if batch is not None:
        c = np.broadcast_to(c, (batch, c.shape[-1]))
        c_null = np.broadcast_to(c_null, (batch, c.shape[-1]))
        refs = [np.broadcast_to(r, (batch,) + shape) if np.shape(r) == shape else r for r in refs]
    dtype = model.dtype
    with T.no_grad():
        cache = model.build_reference_cache(list(refs), ref_captions) if len(refs) else None
        ts = cfg.grid()
        for i in range(cfg.steps):
            t_now, t_next = ts[i], ts[i + 1]
            z = z_hi.astype(dtype)
            v = np.asarray(model.velocity(z, t_now, c, cache=cache).data, dtype=np.float64)
            if cfg.cfg_scale != 1.0:
                u_cache = None if cfg.cfg_drop_refs else cache
                v_u = np.asarray(model.velocity(z, t_now, c_null, cache=u_cache).data, dtype=np.float64)
                v = v_u + cfg.cfg_scale * (v - v_u)
            for term in (-t_now * v, t_next * v):
                z_hi, err = _two_sum(z_hi, term)
                z_lo = z_lo + err
            z_hi, z_lo = _two_sum(z_hi, z_lo)
    return z_hi
