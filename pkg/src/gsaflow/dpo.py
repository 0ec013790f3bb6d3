"""Preference alignment for a flow-matching model.

The policy is the full composition (base + phi_c + phi_d); the frozen
reference policy is the same weights with phi_d switched off. The implicit
log-likelihood ratio of an image is approximated by how much the policy
lowers its velocity-matching error relative to the reference policy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import LOSER_MODES, StorySequence, corrupt_to_loser, toy_identity_score
from .flow import sample_timestep
from .optim import AdamW
from .tensor import ContractError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreferencePool:
    """Winners and losers for one (caption, reference set) scenario."""

    scenario_id: int
    condition: np.ndarray
    references: tuple
    winners: tuple
    losers: tuple
    identity_id: int = -1

    def __post_init__(self):
        if not self.winners or not self.losers:
            raise ContractError(f"pool {self.scenario_id} needs at least one winner and one loser")
        shape = np.shape(self.winners[0])
        for x in (*self.winners, *self.losers, *self.references):
            if np.shape(x) != shape:
                raise ContractError(f"pool {self.scenario_id} mixes latent shapes {shape} and {np.shape(x)}")


@dataclass(frozen=True)
class PreferencePair:
    condition: np.ndarray
    references: tuple
    winner: np.ndarray
    loser: np.ndarray
    t: float
    eps_w: np.ndarray
    eps_l: np.ndarray

    def __post_init__(self):
        if np.array_equal(self.winner, self.loser):
            raise ContractError("winner and loser must be distinct images")


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 1800.0
    learning_rate: float = 5e-6
    steps: int = 2000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def __post_init__(self):
        if not self.beta > 0:
            raise ContractError(f"beta must be > 0, got {self.beta}")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")


def sample_pair(pool: PreferencePool, rng: np.random.Generator) -> PreferencePair:
    """Uniform draw from winners x losers with one shared t and fresh noise per image."""
    if not pool.winners or not pool.losers:
        raise ContractError("cannot sample from an empty pool")
    w = pool.winners[int(rng.integers(len(pool.winners)))]
    l = pool.losers[int(rng.integers(len(pool.losers)))]
    t = sample_timestep(rng)
    shape = np.shape(w)
    eps_w = rng.standard_normal(shape).astype(np.float32)
    eps_l = rng.standard_normal(shape).astype(np.float32)
    return PreferencePair(pool.condition, pool.references, w, l, t, eps_w, eps_l)


def matching_error(model, latent, noise, t, condition, references: Sequence, cache=None) -> Tensor:
    """Mean squared velocity error of the current policy on ``latent`` noised to ``t``.

    Batched inputs (leading axis on ``latent``, ``noise``, ``condition`` and
    each reference) return one error per sample.
    """
    latent = np.asarray(latent, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    t_arr = np.asarray(t, dtype=np.float64)
    tb = t_arr.reshape((-1,) + (1,) * 3) if latent.ndim == 4 else t_arr
    z_t = ((1.0 - tb) * latent + tb * noise).astype(model.dtype)
    v = (noise - latent).astype(model.dtype)
    if cache is None and len(references):
        cache = model.build_reference_cache(list(references))
    pred = model.velocity(z_t, t, condition, cache=cache)
    axes = None if latent.ndim == 3 else (1, 2, 3)
    return T.mse(pred, v, axis=axes)


def _pair_errors(model, pairs: Sequence[PreferencePair], with_grad: bool) -> tuple[Tensor, np.ndarray]:
    """Per-image errors of policy and reference policy; order is all winners then all losers."""
    latents = np.stack([p.winner for p in pairs] + [p.loser for p in pairs])
    noises = np.stack([p.eps_w for p in pairs] + [p.eps_l for p in pairs])
    ts = np.array([p.t for p in pairs] * 2)
    conds = np.stack([p.condition for p in pairs] * 2)
    n_refs = len(pairs[0].references)
    if any(len(p.references) != n_refs for p in pairs):
        raise ContractError("pairs evaluated together must share a reference count")
    refs = [np.stack([p.references[j] for p in pairs] * 2) for j in range(n_refs)]
    with T.no_grad(), model.adapters.using(phi_d=False):
        err_ref = matching_error(model, latents, noises, ts, conds, refs).data.astype(np.float64)
    if with_grad:
        err_theta = matching_error(model, latents, noises, ts, conds, refs)
    else:
        with T.no_grad():
            err_theta = matching_error(model, latents, noises, ts, conds, refs)
    return err_theta, err_ref


def log_ratio(model, latent, noise, t, condition, references: Sequence) -> Tensor:
    """``err_ref - err_theta`` on one image; both policies see the same ``z_t``, ``t``, caption and references."""
    with T.no_grad(), model.adapters.using(phi_d=False):
        err_ref = matching_error(model, latent, noise, t, condition, references).data
    err_theta = matching_error(model, latent, noise, t, condition, references)
    return T.neg(err_theta) + err_ref


def dpo_logit(model, pair: PreferencePair, beta: float) -> Tensor:
    """``beta * (log_ratio(winner) - log_ratio(loser))``."""
    err_theta, err_ref = _pair_errors(model, [pair], with_grad=True)
    ref_gap = err_ref[0] - err_ref[1]
    theta_gap = err_theta[0] - err_theta[1]
    return (T.neg(theta_gap) + ref_gap) * beta


def loss_dpo(model, pair: PreferencePair, beta: float) -> Tensor:
    """``-log sigmoid(beta * (log_ratio(I_w) - log_ratio(I_l)))``."""
    return T.neg(T.log_sigmoid(dpo_logit(model, pair, beta)))


def implicit_reward_accuracy(model, pairs: Sequence[PreferencePair], chunk: int = 32) -> float:
    """Fraction of pairs whose winner earns the larger implicit reward; ties count one half."""
    if not pairs:
        raise ContractError("implicit_reward_accuracy needs at least one pair")
    score = 0.0
    for start in range(0, len(pairs), chunk):
        part = pairs[start:start + chunk]
        err_theta, err_ref = _pair_errors(model, part, with_grad=False)
        delta = err_ref - err_theta.data.astype(np.float64)
        n = len(part)
        dw, dl = delta[:n], delta[n:]
        score += float(np.sum(dw > dl) + 0.5 * np.sum(dw == dl))
    return score / len(pairs)


def build_preference_pools(
    dataset: Sequence[StorySequence],
    group_size: int,
    rng: np.random.Generator,
    losers_per_mode: int = 1,
    modes: Sequence[str] = LOSER_MODES,
    max_tries: int = 16,
) -> list[PreferencePool]:
    """One pool per (story, target frame).

    References are the next ``group_size - 1`` frames of the story
    (cyclically); the winner is the ground-truth target and losers are
    corrupted copies. A loser scoring at least as well as the winner against
    the first reference is redrawn.
    """
    if group_size < 2:
        raise ContractError("group_size must be >= 2")
    pools = []
    sid = 0
    for seq in dataset:
        n = len(seq.frames)
        if n < group_size:
            log.warning("identity %d has too few frames for group size %d; skipped", seq.identity_id, group_size)
            continue
        for i, frame in enumerate(seq.frames):
            refs = tuple(seq.frames[(i + k) % n].latent for k in range(1, group_size))
            win_score = toy_identity_score(frame.latent, refs[0])
            losers = []
            for mode in modes:
                for _ in range(losers_per_mode):
                    for _ in range(max_tries):
                        cand = corrupt_to_loser(frame, mode, rng)
                        if toy_identity_score(cand, refs[0]) < win_score:
                            losers.append(cand)
                            break
                    else:
                        raise RuntimeError(f"could not build a sound {mode} loser for scenario {sid}")
            pools.append(PreferencePool(sid, frame.caption, refs, (frame.latent,), tuple(losers), seq.identity_id))
            sid += 1
    return pools


def split_pools(pools: Sequence[PreferencePool], holdout_per_identity: int) -> tuple[list, list]:
    """Hold out the last ``holdout_per_identity`` scenarios of each identity."""
    by_id: dict[int, list] = {}
    for p in pools:
        by_id.setdefault(p.identity_id, []).append(p)
    train, held = [], []
    for ident in sorted(by_id):
        group = by_id[ident]
        cut = len(group) - holdout_per_identity
        train.extend(group[:cut])
        held.extend(group[cut:])
    return train, held


def draw_pairs(pools: Sequence[PreferencePool], count: int, rng: np.random.Generator) -> list[PreferencePair]:
    return [sample_pair(pools[int(rng.integers(len(pools)))], rng) for _ in range(count)]


@dataclass
class Stage2Step:
    step: int
    loss: float
    logit: float
    pair_accuracy: float
    heldout_accuracy: Optional[float] = None


def train_stage2(
    model,
    pools: Sequence[PreferencePool],
    cfg: DpoConfig,
    rng: np.random.Generator,
    heldout: Optional[Sequence[PreferencePair]] = None,
    eval_every: int = 0,
    on_step: Optional[Callable[[Stage2Step], None]] = None,
) -> list[Stage2Step]:
    """Optimise phi_d only, one pair per step, with phi_c and the base frozen.

    ``phi_d`` must be freshly zero-initialised. Reports per-step loss, logit
    and pair accuracy (1, 0.5 or 0); with ``heldout`` and ``eval_every`` the
    held-out implicit-reward accuracy is added every ``eval_every`` steps and
    after the last step.
    """
    ad = model.adapters
    if any(np.any(pair.B.data != 0) for pair in ad.phi_d.values()):
        raise ContractError("stage 2 starts from a zero-initialised phi_d")
    if not pools:
        raise ContractError("stage 2 needs at least one preference pool")
    ad.set_trainable("phi_c", False)
    ad.set_trainable("phi_d", True)
    ad.set_active("phi_c", True)
    ad.set_active("phi_d", True)
    opt = AdamW(ad.parameters("phi_d"), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                weight_decay=cfg.weight_decay)
    history = []
    for step in range(1, cfg.steps + 1):
        pair = sample_pair(pools[int(rng.integers(len(pools)))], rng)
        with T.Tape() as tape:
            logit = dpo_logit(model, pair, cfg.beta)
            loss = T.neg(T.log_sigmoid(logit))
        tape.backward(loss)
        opt.step()
        x = logit.item()
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite DPO loss at step {step}")
        rec = Stage2Step(step, loss.item(), x, 1.0 if x > 0 else (0.5 if x == 0 else 0.0))
        if heldout and eval_every and (step % eval_every == 0 or step == cfg.steps):
            rec.heldout_accuracy = implicit_reward_accuracy(model, heldout)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
    ad.set_trainable("phi_d", False)
    return history
