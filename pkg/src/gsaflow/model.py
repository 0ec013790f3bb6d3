"""Miniature joint text-image diffusion transformer with group-shared attention.

Weights are split into a frozen base set and two low-rank adapter sets
(``phi_c`` for consistency, ``phi_d`` for preference refinement). Every linear
layer inside a block is adapted; embeddings, the timestep MLP and the output
head stay base-only.

The target sample attends over its own text and image tokens plus the cached
image-token keys and values of clean reference samples.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor

ADAPTER_SETS = ("phi_c", "phi_d")
ADAPTED_LAYERS = ("mod", "q", "k", "v", "o", "ffn1", "ffn2")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    latent_grid: int = 8
    latent_channels: int = 4
    patch_size: int = 2
    text_len: int = 8
    vocab_size: int = 64
    lora_rank: int = 16
    lora_alpha: float = 16.0
    ffn_mult: int = 4
    max_references: int = 8
    # Reference handling is not pinned down by the method; these are switches.
    ref_sample_index: bool = True
    ref_text_context: bool = False
    ref_grad: bool = False

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ContractError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.latent_grid % self.patch_size:
            raise ContractError(f"latent_grid {self.latent_grid} not divisible by patch_size {self.patch_size}")
        if self.lora_rank < 1:
            raise ContractError("lora_rank must be >= 1")
        if not self.lora_alpha > 0:
            raise ContractError("lora_alpha must be > 0")
        for name in ("depth", "latent_channels", "text_len", "vocab_size", "ffn_mult", "max_references"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def grid_tokens(self) -> int:
        return self.latent_grid // self.patch_size

    @property
    def image_tokens(self) -> int:
        return self.grid_tokens**2

    @property
    def patch_features(self) -> int:
        return self.patch_size**2 * self.latent_channels

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    @property
    def latent_shape(self) -> tuple:
        return (self.latent_grid, self.latent_grid, self.latent_channels)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LoraPair:
    """Low-rank update ``B @ A`` with ``A`` (rank, in) and ``B`` (out, rank)."""

    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise ContractError(f"LoRA rank mismatch: A {self.A.shape}, B {self.B.shape}")


def lora_linear(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    pairs: Sequence[LoraPair] = (),
    scale: float = 1.0,
) -> Tensor:
    """``x @ W.T + b + scale * sum(x @ A.T @ B.T)`` over the given adapter pairs."""
    out = T.linear(x, weight, bias)
    for pair in pairs:
        if pair.A.shape[1] != weight.shape[1] or pair.B.shape[0] != weight.shape[0]:
            raise ContractError(
                f"LoRA pair A {pair.A.shape}, B {pair.B.shape} does not fit weight {weight.shape}"
            )
        out = out + T.linear(T.linear(x, pair.A), pair.B) * scale
    return out


class AdapterComposition:
    """Frozen base weights plus two LoRA adapter sets with activity/trainability flags.

    The effective weight of adapted layer ``name`` is
    ``W + s * B_c @ A_c * [phi_c active] + s * B_d @ A_d * [phi_d active]``
    with ``s = alpha / rank``.
    """

    def __init__(self, base: dict, phi_c: dict, phi_d: dict, scale: float):
        self.base = base
        self.sets = {"phi_c": phi_c, "phi_d": phi_d}
        self.scale = float(scale)
        self.active = {"phi_c": True, "phi_d": True}
        self.trainable = {"phi_c": False, "phi_d": False}
        for t in base.values():
            t.requires_grad = False
        for name in ADAPTER_SETS:
            self.set_trainable(name, False)

    @property
    def phi_c(self) -> dict:
        return self.sets["phi_c"]

    @property
    def phi_d(self) -> dict:
        return self.sets["phi_d"]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._check(name)
        self.trainable[name] = bool(flag)
        for pair in self.sets[name].values():
            pair.A.requires_grad = bool(flag)
            pair.B.requires_grad = bool(flag)

    def set_active(self, name: str, flag: bool) -> None:
        self._check(name)
        self.active[name] = bool(flag)

    @contextlib.contextmanager
    def using(self, **flags: bool) -> Iterator["AdapterComposition"]:
        """Temporarily override which adapter sets contribute."""
        saved = dict(self.active)
        for name, flag in flags.items():
            self.set_active(name, flag)
        try:
            yield self
        finally:
            self.active = saved

    def pairs(self, layer: str) -> list[LoraPair]:
        return [self.sets[n][layer] for n in ADAPTER_SETS if self.active[n] and layer in self.sets[n]]

    def linear(self, x: Tensor, layer: str) -> Tensor:
        return lora_linear(x, self.base[layer + ".w"], self.base.get(layer + ".b"), self.pairs(layer), self.scale)

    def effective_weight(self, layer: str) -> np.ndarray:
        w = self.base[layer + ".w"].data.copy()
        for pair in self.pairs(layer):
            w = w + self.scale * (pair.B.data @ pair.A.data)
        return w

    def named_tensors(self, set_name: str) -> list[tuple[str, Tensor]]:
        """Deterministically ordered (name, tensor) list of one set: base, phi_c or phi_d."""
        if set_name == "base":
            return sorted(self.base.items())
        self._check(set_name)
        out = []
        for layer, pair in sorted(self.sets[set_name].items()):
            out.append((layer + ".A", pair.A))
            out.append((layer + ".B", pair.B))
        return out

    def parameters(self, set_name: str) -> list[Tensor]:
        return [t for _, t in self.named_tensors(set_name)]

    def reset_phi_d(self, rng: np.random.Generator) -> None:
        """Fresh ``phi_d``: random ``A``, exactly zero ``B``."""
        self.sets["phi_d"] = _init_lora_set(self.sets["phi_d"].keys(), self.base, self._rank(), rng)
        self.set_trainable("phi_d", self.trainable["phi_d"])

    def astype(self, dtype) -> "AdapterComposition":
        base = {k: Tensor(v.data, dtype=dtype) for k, v in self.base.items()}
        sets = {
            n: {k: LoraPair(Tensor(p.A.data, dtype=dtype), Tensor(p.B.data, dtype=dtype)) for k, p in s.items()}
            for n, s in self.sets.items()
        }
        out = AdapterComposition(base, sets["phi_c"], sets["phi_d"], self.scale)
        out.active = dict(self.active)
        for n in ADAPTER_SETS:
            out.set_trainable(n, self.trainable[n])
        return out

    def _rank(self) -> int:
        for s in self.sets.values():
            for pair in s.values():
                return pair.A.shape[0]
        raise ContractError("adapter composition has no adapted layers")

    @staticmethod
    def _check(name: str) -> None:
        if name not in ADAPTER_SETS:
            raise ContractError(f"unknown adapter set {name!r}; expected one of {ADAPTER_SETS}")


def _init_lora_set(layers, base: dict, rank: int, rng: np.random.Generator) -> dict:
    out = {}
    for layer in sorted(layers):
        w = base[layer + ".w"]
        n_out, n_in = w.shape
        bound = 1.0 / math.sqrt(n_in)
        out[layer] = LoraPair(
            Tensor(rng.uniform(-bound, bound, size=(rank, n_in))),
            Tensor(np.zeros((n_out, rank))),
        )
    return out


def init_adapters(config: ModelConfig, rng: np.random.Generator) -> AdapterComposition:
    """Random base weights, random-A/zero-B adapters."""
    D, F = config.hidden_dim, config.hidden_dim * config.ffn_mult

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    base = {
        "text_embed": normal((config.vocab_size, D), 1.0),
        "text_pos": normal((config.text_len, D), 0.5),
        "patch_embed.w": normal((D, config.patch_features), 1.0 / math.sqrt(config.patch_features)),
        "patch_embed.b": Tensor(np.zeros(D)),
        "row_pos": normal((config.grid_tokens, D), 0.5),
        "col_pos": normal((config.grid_tokens, D), 0.5),
        "sample_embed": normal((config.max_references + 1, D), 0.5),
        "time_mlp.0.w": normal((D, D), 1.0 / math.sqrt(D)),
        "time_mlp.0.b": Tensor(np.zeros(D)),
        "time_mlp.1.w": normal((D, D), 1.0 / math.sqrt(D)),
        "time_mlp.1.b": Tensor(np.zeros(D)),
        "final_norm.scale": Tensor(np.ones(D)),
        "head.w": normal((config.patch_features, D), 1.0 / math.sqrt(D)),
        "head.b": Tensor(np.zeros(config.patch_features)),
    }
    shapes = {"mod": (6 * D, D), "q": (D, D), "k": (D, D), "v": (D, D), "o": (D, D), "ffn1": (F, D), "ffn2": (D, F)}
    for i in range(config.depth):
        for layer, (n_out, n_in) in shapes.items():
            std = 0.5 / math.sqrt(n_in) if layer == "mod" else 1.0 / math.sqrt(n_in)
            base[f"blocks.{i}.{layer}.w"] = normal((n_out, n_in), std)
            base[f"blocks.{i}.{layer}.b"] = Tensor(np.zeros(n_out))
    layers = [f"blocks.{i}.{layer}" for i in range(config.depth) for layer in ADAPTED_LAYERS]
    phi_c = _init_lora_set(layers, base, config.lora_rank, rng)
    phi_d = _init_lora_set(layers, base, config.lora_rank, rng)
    return AdapterComposition(base, phi_c, phi_d, config.lora_scale)


@dataclass
class TokenStream:
    """Embedded tokens of one (batched) sample: optional text followed by image patches.

    ``position_ids`` holds a (sample_index, row, col) triple per token; text
    tokens use row = col = -1.
    """

    text_tokens: Optional[Tensor]
    image_tokens: Tensor
    position_ids: np.ndarray

    @property
    def num_text(self) -> int:
        return 0 if self.text_tokens is None else self.text_tokens.shape[-2]

    @property
    def num_tokens(self) -> int:
        return self.num_text + self.image_tokens.shape[-2]

    def joined(self) -> Tensor:
        if self.text_tokens is None:
            return self.image_tokens
        return T.concat_seq([self.text_tokens, self.image_tokens])


@dataclass
class ReferenceCache:
    """Per-layer, per-reference image-token keys and values, shape (B, heads, S, head_dim)."""

    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)

    @classmethod
    def empty(cls, depth: int) -> "ReferenceCache":
        return cls([[] for _ in range(depth)], [[] for _ in range(depth)])

    @property
    def depth(self) -> int:
        return len(self.keys)

    @property
    def num_references(self) -> int:
        return len(self.keys[0]) if self.keys else 0

    def key_length(self, layer: int) -> int:
        return int(np.sum([k.shape[-2] for k in self.keys[layer]])) if self.keys[layer] else 0

    def layer(self, layer: int) -> tuple[list, list]:
        return self.keys[layer], self.values[layer]


def gsa_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    ref_keys: Sequence[Tensor] = (),
    ref_values: Sequence[Tensor] = (),
    return_weights: bool = False,
):
    """Target attention over its own tokens extended by reference image tokens.

    ``q``, ``k``, ``v`` are the target's per-head projections (..., heads, L, d)
    for its text tokens followed by its image tokens. The key/value context is
    ``[k] + ref_keys`` concatenated along the sequence axis and the result is
    ``softmax(q @ K.T / sqrt(d)) @ V`` per head. With no references this is
    ordinary joint self-attention.
    """
    if len(ref_keys) != len(ref_values):
        raise ContractError(f"{len(ref_keys)} reference key sets but {len(ref_values)} value sets")
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ContractError(f"target projections disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    for rk, rv in zip(ref_keys, ref_values):
        if rk.shape[-1] != d:
            raise ContractError(f"cached key head dim {rk.shape[-1]} != query head dim {d}")
        if rk.shape[:-1] != rv.shape[:-1]:
            raise ContractError(f"cached key {rk.shape} and value {rv.shape} disagree")
    k_ext = T.concat_seq([k, *ref_keys])
    v_ext = T.concat_seq([v, *ref_values])
    weights = T.softmax_rows(T.matmul(q, T.transpose(k_ext)) * (1.0 / math.sqrt(d)))
    out = T.matmul(weights, v_ext)
    return (out, weights) if return_weights else out


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t`` scaled to a 0-1000 range, (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((feats.shape[0], 1))], axis=-1)
    return feats


def patchify(z: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), row-major over patches."""
    B, H, W, C = z.shape
    g_h, g_w = H // patch, W // patch
    x = z.reshape(B, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g_h * g_w, patch * patch * C)


def unpatchify(x: Tensor, grid: int, patch: int, channels: int) -> Tensor:
    B = x.shape[0]
    x = T.reshape(x, (B, grid, grid, patch, patch, channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, grid * patch, grid * patch, channels))


class DiT:
    """Velocity network ``v(z_t, t, caption, references)`` over a latent grid."""

    def __init__(self, config: ModelConfig, adapters: AdapterComposition):
        self.config = config
        self.adapters = adapters

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "DiT":
        return cls(config, init_adapters(config, np.random.default_rng(seed)))

    def astype(self, dtype) -> "DiT":
        return DiT(self.config, self.adapters.astype(dtype))

    @property
    def dtype(self) -> np.dtype:
        return self.adapters.base["head.w"].dtype

    # embedding ---------------------------------------------------------------

    def _batched_latent(self, z) -> tuple[np.ndarray, bool]:
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=self.dtype)
        shape = self.config.latent_shape
        if z.shape == shape:
            return z[None], False
        if z.ndim == 4 and z.shape[1:] == shape:
            return z, True
        raise ShapeError(f"latent shape {z.shape} does not match {shape} or (B, *{shape})")

    def _batched_caption(self, caption, batch: int) -> np.ndarray:
        c = np.asarray(caption, dtype=np.int64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (batch, c.shape[0]))
        if c.shape != (batch, self.config.text_len):
            raise ShapeError(f"caption shape {c.shape} does not match ({batch}, {self.config.text_len})")
        return c

    def _batched_time(self, t, batch: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.size == 1:
            t = np.repeat(t, batch)
        if t.shape != (batch,) or not np.all(np.isfinite(t)):
            raise ShapeError(f"time values {t.shape} do not match batch {batch} or are not finite")
        return t

    def tokenize(self, z: np.ndarray, caption: Optional[np.ndarray], sample_index=0) -> TokenStream:
        """Embed a batched latent (B, H, W, C) and optional caption ids (B, text_len)."""
        cfg, base = self.config, self.adapters.base
        B = z.shape[0]
        g = cfg.grid_tokens
        index = np.broadcast_to(np.asarray(sample_index, dtype=np.int64), (B,))
        if index.max() > cfg.max_references:
            raise ContractError(f"sample index {index.max()} exceeds max_references {cfg.max_references}")
        patches = Tensor._wrap(patchify(z, cfg.patch_size))
        rows = np.repeat(np.arange(g), g)
        cols = np.tile(np.arange(g), g)
        pos = T.take_rows(base["row_pos"], rows) + T.take_rows(base["col_pos"], cols)
        img = T.linear(patches, base["patch_embed.w"], base["patch_embed.b"]) + pos
        img = img + T.reshape(T.take_rows(base["sample_embed"], index), (B, 1, cfg.hidden_dim))
        ids_img = np.stack([np.broadcast_to(index[:, None], (B, g * g)), np.broadcast_to(rows, (B, g * g)),
                            np.broadcast_to(cols, (B, g * g))], axis=-1)
        if caption is None:
            return TokenStream(None, img, ids_img)
        txt = T.take_rows(base["text_embed"], caption) + base["text_pos"]
        ids_txt = np.stack([np.broadcast_to(index[:, None], (B, cfg.text_len)),
                            np.full((B, cfg.text_len), -1), np.full((B, cfg.text_len), -1)], axis=-1)
        return TokenStream(txt, img, np.concatenate([ids_txt, ids_img], axis=1))

    def timestep_embed(self, t) -> Tensor:
        """Sinusoidal features through a two-layer SiLU MLP, (B, hidden_dim)."""
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if np.any((t < 0) | (t > 1)):
            raise ContractError("timesteps must lie in [0, 1]")
        base = self.adapters.base
        feats = Tensor._wrap(timestep_features(t, self.config.hidden_dim).astype(self.dtype))
        h = T.silu(T.linear(feats, base["time_mlp.0.w"], base["time_mlp.0.b"]))
        return T.linear(h, base["time_mlp.1.w"], base["time_mlp.1.b"])

    # transformer -------------------------------------------------------------

    def _split_heads(self, x: Tensor) -> Tensor:
        B, L, _ = x.shape
        x = T.reshape(x, (B, L, self.config.num_heads, self.config.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def _merge_heads(self, x: Tensor) -> Tensor:
        B, _, L, _ = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, L, self.config.hidden_dim))

    def _block(self, i: int, x: Tensor, cond: Tensor, n_text: int, cache: Optional[ReferenceCache],
               collect: Optional[tuple] = None, stop_after_kv: bool = False) -> Optional[Tensor]:
        ad, D = self.adapters, self.config.hidden_dim
        pre = f"blocks.{i}."
        mod = T.reshape(ad.linear(T.silu(cond), pre + "mod"), (x.shape[0], 1, 6 * D))
        shift1, scale1, gate1 = mod[..., 0:D], mod[..., D:2 * D], mod[..., 2 * D:3 * D]
        shift2, scale2, gate2 = mod[..., 3 * D:4 * D], mod[..., 4 * D:5 * D], mod[..., 5 * D:6 * D]

        h = T.layer_norm(x) * (scale1 + 1.0) + shift1
        q = self._split_heads(ad.linear(h, pre + "q"))
        k = self._split_heads(ad.linear(h, pre + "k"))
        v = self._split_heads(ad.linear(h, pre + "v"))
        if collect is not None:
            collect[0].append(k[:, :, n_text:, :])
            collect[1].append(v[:, :, n_text:, :])
            if stop_after_kv:
                return None
        refs_k, refs_v = cache.layer(i) if cache is not None else ((), ())
        a = self._merge_heads(gsa_attention(q, k, v, refs_k, refs_v))
        x = x + gate1 * ad.linear(a, pre + "o")

        h = T.layer_norm(x) * (scale2 + 1.0) + shift2
        h = ad.linear(T.gelu(ad.linear(h, pre + "ffn1")), pre + "ffn2")
        return x + gate2 * h

    def forward_tokens(self, stream: TokenStream, cond: Tensor, cache: Optional[ReferenceCache] = None,
                       collect: Optional[tuple] = None) -> Tensor:
        """Run all blocks; returns the final hidden states of the image tokens."""
        if cache is not None and cache.depth != self.config.depth:
            raise ContractError(f"cache has {cache.depth} layers, model has {self.config.depth}")
        x = stream.joined()
        for i in range(self.config.depth):
            x = self._block(i, x, cond, stream.num_text, cache, collect)
        return x[:, stream.num_text:, :]

    def velocity(self, z_t, t, caption, cache: Optional[ReferenceCache] = None, sample_index=0,
                 trace: Optional[dict] = None) -> Tensor:
        """Predicted velocity, same shape as ``z_t`` ((H, W, C) or (B, H, W, C)).

        ``caption`` may be None for an image-only pass. ``trace``, if given,
        receives per-layer image-token keys and values under ``"keys"`` and
        ``"values"``.
        """
        cfg, base = self.config, self.adapters.base
        z, batched = self._batched_latent(z_t)
        B = z.shape[0]
        cap = None if caption is None else self._batched_caption(caption, B)
        stream = self.tokenize(z, cap, sample_index)
        cond = self.timestep_embed(self._batched_time(t, B))
        collect = ([], []) if trace is not None else None
        h = self.forward_tokens(stream, cond, cache, collect)
        if trace is not None:
            trace["keys"], trace["values"] = collect
        out = T.linear(T.layer_norm(h, base["final_norm.scale"]), base["head.w"], base["head.b"])
        out = unpatchify(out, cfg.grid_tokens, cfg.patch_size, cfg.latent_channels)
        return out if batched else T.reshape(out, cfg.latent_shape)

    __call__ = velocity

    def build_reference_cache(self, refs: Sequence, captions: Optional[Sequence] = None) -> ReferenceCache:
        """Clean (t = 0) image-only local-attention pass over each reference.

        ``refs`` is a list of N-1 latents, each (H, W, C) or (B, H, W, C)
        matching the target batch. Reference ``j`` (1-based) carries sample
        index ``j``. Keys and values are treated as constants unless the
        config enables ``ref_grad``.
        """
        if len(refs) == 0:
            raise ContractError("no references: pass cache=None instead of building an empty cache")
        cfg = self.config
        if len(refs) > cfg.max_references:
            raise ContractError(f"{len(refs)} references exceed max_references {cfg.max_references}")
        batches = [self._batched_latent(r)[0] for r in refs]
        B = batches[0].shape[0]
        if any(b.shape[0] != B for b in batches):
            raise ShapeError("references must share one batch size")
        R = len(refs)
        z = np.concatenate(batches, axis=0)
        index = np.repeat(np.arange(1, R + 1), B) if cfg.ref_sample_index else np.zeros(R * B, dtype=np.int64)
        cap = None
        if cfg.ref_text_context:
            if captions is None or len(captions) != R:
                raise ContractError("ref_text_context needs one caption per reference")
            cap = np.concatenate([self._batched_caption(c, B) for c in captions], axis=0)
        scope = contextlib.nullcontext() if cfg.ref_grad else T.no_grad()
        with scope:
            stream = self.tokenize(z, cap, index)
            cond = self.timestep_embed(np.zeros(R * B))
            keys, values = [], []
            x = stream.joined()
            for i in range(cfg.depth):
                x = self._block(i, x, cond, stream.num_text, None, (keys, values), stop_after_kv=i == cfg.depth - 1)
        cache = ReferenceCache.empty(cfg.depth)
        for i in range(cfg.depth):
            for j in range(R):
                cache.keys[i].append(keys[i][j * B:(j + 1) * B])
                cache.values[i].append(values[i][j * B:(j + 1) * B])
        return cache
