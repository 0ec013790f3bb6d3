"""Synthetic identity-labelled story sequences and toy consistency metrics.

Frames live directly in the model's latent geometry (H, W, C), channel-last.
The top-left quadrant is the identity patch: a fixed linear rendering of the
character's identity code. The rest of the frame renders the scene. A
per-channel palette transform (the style) is applied to the whole frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

# caption vocabulary layout
PAD, NULL, BOS = 0, 1, 2
MAX_IDENTITIES = 24
NUM_SCENES = 16
NUM_STYLES = 4
IDENTITY_TOKEN0 = 3
SCENE_TOKEN0 = IDENTITY_TOKEN0 + MAX_IDENTITIES
STYLE_TOKEN0 = SCENE_TOKEN0 + NUM_SCENES
VOCAB_USED = STYLE_TOKEN0 + NUM_STYLES

CODE_DIM = 8
MAX_CODE_COSINE = 0.9
_RENDER_SEED = 20240917


@dataclass(frozen=True)
class LatentGeometry:
    grid: int = 8
    channels: int = 4

    @property
    def shape(self) -> tuple:
        return (self.grid, self.grid, self.channels)

    @property
    def half(self) -> int:
        return self.grid // 2

    def identity_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[: self.half, : self.half, :] = True
        return mask


DEFAULT_GEOMETRY = LatentGeometry()


def encode_caption(identity_id: int, scene_id: int, style_id: int, text_len: int = 8) -> np.ndarray:
    if not 0 <= identity_id < MAX_IDENTITIES:
        raise ContractError(f"identity_id {identity_id} outside [0, {MAX_IDENTITIES})")
    if not 0 <= scene_id < NUM_SCENES:
        raise ContractError(f"scene_id {scene_id} outside [0, {NUM_SCENES})")
    if not 0 <= style_id < NUM_STYLES:
        raise ContractError(f"style_id {style_id} outside [0, {NUM_STYLES})")
    if text_len < 4:
        raise ContractError("captions need text_len >= 4")
    tokens = np.full(text_len, PAD, dtype=np.int64)
    tokens[:4] = [BOS, IDENTITY_TOKEN0 + identity_id, SCENE_TOKEN0 + scene_id, STYLE_TOKEN0 + style_id]
    return tokens


def decode_caption(tokens) -> tuple[int, int, int]:
    """Inverse of :func:`encode_caption`: (identity_id, scene_id, style_id)."""
    tokens = np.asarray(tokens)
    if tokens.shape[0] < 4 or tokens[0] != BOS:
        raise ContractError(f"not an encoded caption: {tokens.tolist()}")
    return (
        int(tokens[1] - IDENTITY_TOKEN0),
        int(tokens[2] - SCENE_TOKEN0),
        int(tokens[3] - STYLE_TOKEN0),
    )


def null_caption(text_len: int = 8) -> np.ndarray:
    return np.full(text_len, NULL, dtype=np.int64)


def is_null_caption(tokens) -> bool:
    return bool(np.all(np.asarray(tokens) == NULL))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a.ravel(), b.ravel()) / (na * nb))


@lru_cache(maxsize=None)
def _identity_codes(count: int) -> np.ndarray:
    # codes are generated in id order; each id's code depends only on the id
    rng = np.random.default_rng(_RENDER_SEED)
    codes: list[np.ndarray] = []
    while len(codes) < count:
        cand = rng.uniform(-1.0, 1.0, CODE_DIM)
        patch = _render_matrix(DEFAULT_GEOMETRY) @ cand
        if all(_cosine(cand, c) < MAX_CODE_COSINE and _cosine(patch, _render_matrix(DEFAULT_GEOMETRY) @ c) < MAX_CODE_COSINE
               for c in codes):
            codes.append(cand)
    return np.stack(codes)


def identity_code(identity_id: int) -> np.ndarray:
    """Deterministic code in [-1, 1]^8 for an identity id."""
    if not 0 <= identity_id < MAX_IDENTITIES:
        raise ContractError(f"identity_id {identity_id} outside [0, {MAX_IDENTITIES})")
    return _identity_codes(MAX_IDENTITIES)[identity_id].copy()


@lru_cache(maxsize=None)
def _render_matrix(geom: LatentGeometry) -> np.ndarray:
    rng = np.random.default_rng(_RENDER_SEED + 1)
    n = geom.half * geom.half * geom.channels
    return rng.normal(0.0, math.sqrt(3.0 / CODE_DIM), size=(n, CODE_DIM))


@lru_cache(maxsize=None)
def _scene_patterns(geom: LatentGeometry) -> np.ndarray:
    rng = np.random.default_rng(_RENDER_SEED + 2)
    return rng.normal(0.0, 0.8, size=(NUM_SCENES, *geom.shape))


@lru_cache(maxsize=None)
def _palettes(channels: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_RENDER_SEED + 3)
    scale = rng.uniform(0.7, 1.3, size=(NUM_STYLES, channels))
    shift = rng.uniform(-0.25, 0.25, size=(NUM_STYLES, channels))
    return scale, shift


def apply_style(latent: np.ndarray, style_id: int) -> np.ndarray:
    scale, shift = _palettes(latent.shape[-1])
    return latent * scale[style_id] + shift[style_id]


def render_identity_patch(identity_id: int, style_id: int, geom: LatentGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Styled identity patch, shape (grid/2, grid/2, channels)."""
    h = geom.half
    raw = (_render_matrix(geom) @ identity_code(identity_id)).reshape(h, h, geom.channels)
    return apply_style(raw, style_id)


def render_frame(identity_id: int, scene_id: int, style_id: int, geom: LatentGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    h = geom.half
    raw = _scene_patterns(geom)[scene_id].copy()
    raw[:h, :h, :] = (_render_matrix(geom) @ identity_code(identity_id)).reshape(h, h, geom.channels)
    return apply_style(raw, style_id).astype(np.float32)


@dataclass(frozen=True)
class CharacterSpec:
    identity_id: int
    style_id: int

    @property
    def identity_code(self) -> np.ndarray:
        return identity_code(self.identity_id)


@dataclass(frozen=True)
class StoryFrame:
    latent: np.ndarray
    caption: np.ndarray
    scene_id: int


@dataclass(frozen=True)
class StorySequence:
    character: CharacterSpec
    frames: tuple

    def __post_init__(self):
        if len(self.frames) < 4:
            raise ContractError(f"a story needs at least 4 frames, got {len(self.frames)}")

    @property
    def identity_id(self) -> int:
        return self.character.identity_id


def generate_dataset(
    num_identities: int,
    frames_per_identity: int,
    seed: int,
    identity_offset: int = 0,
    text_len: int = 8,
    geom: LatentGeometry = DEFAULT_GEOMETRY,
) -> list[StorySequence]:
    """One story per identity ``identity_offset .. identity_offset + num_identities - 1``.

    Scenes within a story are distinct; style and scene draws come from ``seed``.
    """
    if num_identities < 2:
        raise ContractError("num_identities must be >= 2")
    if frames_per_identity < 4:
        raise ContractError("frames_per_identity must be >= 4")
    if frames_per_identity > NUM_SCENES:
        raise ContractError(f"frames_per_identity must be <= {NUM_SCENES} (distinct scenes)")
    if identity_offset < 0 or identity_offset + num_identities > MAX_IDENTITIES:
        raise ContractError(f"identities must fit in [0, {MAX_IDENTITIES})")
    rng = np.random.default_rng(seed)
    out = []
    for ident in range(identity_offset, identity_offset + num_identities):
        style = int(rng.integers(NUM_STYLES))
        scenes = rng.choice(NUM_SCENES, size=frames_per_identity, replace=False)
        frames = tuple(
            StoryFrame(render_frame(ident, int(s), style, geom), encode_caption(ident, int(s), style, text_len), int(s))
            for s in scenes
        )
        out.append(StorySequence(CharacterSpec(ident, style), frames))
    return out


def identity_patch(latent: np.ndarray) -> np.ndarray:
    h = latent.shape[-3] // 2
    return np.asarray(latent)[..., :h, :h, :]


def toy_identity_score(generated: np.ndarray, reference: np.ndarray) -> float:
    """Cosine similarity of the flattened identity patches."""
    generated, reference = np.asarray(generated, np.float64), np.asarray(reference, np.float64)
    if generated.shape != reference.shape:
        raise ContractError(f"shape mismatch {generated.shape} vs {reference.shape}")
    a, b = identity_patch(generated).ravel(), identity_patch(reference).ravel()
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        log.warning("zero-norm identity patch; score defined as 0")
        return 0.0
    return _cosine(a, b)


def style_signature(latent: np.ndarray) -> np.ndarray:
    x = np.asarray(latent, np.float64).reshape(-1, latent.shape[-1])
    return np.concatenate([x.mean(axis=0), x.var(axis=0)])


def toy_style_score(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine between per-channel (mean, variance) signatures."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    sa, sb = style_signature(a), style_signature(b)
    if np.linalg.norm(sa) == 0 or np.linalg.norm(sb) == 0:
        log.warning("zero-norm style signature; score defined as 0")
        return 0.0
    return _cosine(sa, sb)


def cross_score(score, generated: Sequence[np.ndarray], references: Sequence[np.ndarray]) -> float:
    """Mean score of every generated frame against every reference."""
    return float(np.mean([score(g, r) for g in generated for r in references]))


def self_score(score, generated: Sequence[np.ndarray]) -> float:
    """Mean pairwise score within one generated sequence."""
    vals = [score(generated[i], generated[j]) for i in range(len(generated)) for j in range(i + 1, len(generated))]
    if not vals:
        raise ContractError("self score needs at least two generated frames")
    return float(np.mean(vals))


def make_group_batches(
    dataset: Sequence[StorySequence],
    group_size: int,
    rng: np.random.Generator,
    caption_dropout: float = 0.0,
) -> Iterator["GroupBatch"]:
    """Endless stream of group batches.

    Each draw picks a story uniformly, then ``group_size`` distinct frames;
    the first is the noised target and its caption is the condition.
    """
    from .flow import GroupBatch, apply_caption_dropout, interpolate, sample_timestep

    if group_size < 2:
        raise ContractError("group_size must be >= 2")
    usable = []
    for seq in dataset:
        if len(seq.frames) < group_size:
            log.warning("identity %d has %d frames < group size %d; skipped", seq.identity_id, len(seq.frames), group_size)
        else:
            usable.append(seq)
    if not usable:
        raise ContractError(f"no identity has at least {group_size} frames")
    while True:
        seq = usable[int(rng.integers(len(usable)))]
        picks = rng.choice(len(seq.frames), size=group_size, replace=False)
        target = seq.frames[int(picks[0])]
        t = sample_timestep(rng)
        eps = rng.standard_normal(target.latent.shape).astype(np.float32)
        condition = apply_caption_dropout(target.caption, caption_dropout, rng)
        yield GroupBatch(
            target=interpolate(target.latent, eps, t),
            references=[seq.frames[int(j)].latent for j in picks[1:]],
            condition=condition,
            identity_id=seq.identity_id,
        )


LOSER_MODES = ("identity-swap", "noise-inject", "patch-scramble")


def corrupt_to_loser(
    frame: StoryFrame,
    mode: str,
    rng: np.random.Generator,
    noise_std: float = 0.5,
    style_id: Optional[int] = None,
) -> np.ndarray:
    """Damage the identity patch of ``frame``; the scene region is untouched.

    ``identity-swap`` renders another identity in the same style,
    ``noise-inject`` adds N(0, noise_std^2) and ``patch-scramble`` permutes
    the patch rows with a non-identity permutation.
    """
    latent = np.array(frame.latent, copy=True)
    h = latent.shape[0] // 2
    ident, _, style = decode_caption(frame.caption)
    if style_id is not None:
        style = style_id
    if mode == "identity-swap":
        other = int(rng.integers(MAX_IDENTITIES - 1))
        other += other >= ident
        geom = LatentGeometry(latent.shape[0], latent.shape[2])
        latent[:h, :h, :] = render_identity_patch(other, style, geom)
    elif mode == "noise-inject":
        latent[:h, :h, :] += rng.normal(0.0, noise_std, size=(h, h, latent.shape[2])).astype(latent.dtype)
    elif mode == "patch-scramble":
        perm = np.arange(h)
        while np.array_equal(perm, np.arange(h)):
            perm = rng.permutation(h)
        latent[:h, :h, :] = latent[:h, :h, :][perm]
    else:
        raise ContractError(f"unknown corruption mode {mode!r}; expected one of {LOSER_MODES}")
    return latent
