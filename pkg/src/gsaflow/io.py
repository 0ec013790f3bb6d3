"""File formats: datasets, preference pools, checkpoints, latents, metrics and raster dumps.

All binary payloads are little-endian float32, row-major, channel-last.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Sequence, Union

import numpy as np

from .data import CharacterSpec, StoryFrame, StorySequence, decode_caption
from .dpo import PreferencePool
from .model import ADAPTER_SETS, AdapterComposition, DiT, LoraPair, ModelConfig
from .tensor import Tensor

PathLike = Union[str, Path]

DATASET_MAGIC = "GSAFLOW-DS v1"
CHECKPOINT_MAGIC = "GSAFLOW-CKPT v1"
LATENT_MAGIC = "GSAFLOW-LAT v1"
CHECKPOINT_VERSION = 1
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file does not follow the expected layout or fails its integrity check."""


def _line(f: BinaryIO) -> str:
    raw = f.readline()
    if not raw.endswith(b"\n"):
        raise FormatError("unexpected end of file")
    return raw[:-1].decode("utf-8")


def _ints(text: str, count: Optional[int] = None) -> list[int]:
    try:
        vals = [int(x) for x in text.split()]
    except ValueError:
        raise FormatError(f"expected integers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise FormatError(f"expected {count} integers, got {text!r}")
    return vals


def _payload(f: BinaryIO, shape: tuple) -> np.ndarray:
    n = int(np.prod(shape))
    raw = f.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError("truncated latent payload")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).astype(np.float32)


def _write_latent(f: BinaryIO, latent: np.ndarray) -> None:
    f.write(np.ascontiguousarray(latent, dtype=_F32).tobytes())


# datasets ----------------------------------------------------------------------


def save_dataset(path: PathLike, dataset: Sequence[StorySequence]) -> None:
    """Header ``GSAFLOW-DS v1``; a ``dataset H W C count`` line; then per story
    ``identity style frames`` and per frame a caption line plus its payload."""
    shape = dataset[0].frames[0].latent.shape
    with open(path, "wb") as f:
        f.write(f"{DATASET_MAGIC}\n".encode())
        f.write(f"dataset {shape[0]} {shape[1]} {shape[2]} {len(dataset)}\n".encode())
        for seq in dataset:
            f.write(f"{seq.character.identity_id} {seq.character.style_id} {len(seq.frames)}\n".encode())
            for frame in seq.frames:
                f.write((" ".join(str(int(x)) for x in frame.caption) + "\n").encode())
                _write_latent(f, frame.latent)


def load_dataset(path: PathLike) -> list[StorySequence]:
    with open(path, "rb") as f:
        if _line(f) != DATASET_MAGIC:
            raise FormatError(f"{path}: not a {DATASET_MAGIC} file")
        head = _line(f).split()
        if len(head) != 5 or head[0] != "dataset":
            raise FormatError(f"{path}: expected a dataset record, got {' '.join(head)!r}")
        h, w, c, count = _ints(" ".join(head[1:]), 4)
        out = []
        for _ in range(count):
            ident, style, n = _ints(_line(f), 3)
            frames = []
            for _ in range(n):
                caption = np.array(_ints(_line(f)), dtype=np.int64)
                latent = _payload(f, (h, w, c))
                frames.append(StoryFrame(latent, caption, decode_caption(caption)[1]))
            out.append(StorySequence(CharacterSpec(ident, style), tuple(frames)))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} stories")
    return out


def save_pools(path: PathLike, pools: Sequence[PreferencePool]) -> None:
    """Same container as datasets with a ``pools`` record; per pool
    ``scenario identity refs winners losers``, the caption line, then payloads
    (references, winners, losers)."""
    shape = np.shape(pools[0].winners[0])
    with open(path, "wb") as f:
        f.write(f"{DATASET_MAGIC}\n".encode())
        f.write(f"pools {shape[0]} {shape[1]} {shape[2]} {len(pools)}\n".encode())
        for p in pools:
            f.write(f"{p.scenario_id} {p.identity_id} {len(p.references)} {len(p.winners)} {len(p.losers)}\n".encode())
            f.write((" ".join(str(int(x)) for x in p.condition) + "\n").encode())
            for x in (*p.references, *p.winners, *p.losers):
                _write_latent(f, x)


def load_pools(path: PathLike) -> list[PreferencePool]:
    with open(path, "rb") as f:
        if _line(f) != DATASET_MAGIC:
            raise FormatError(f"{path}: not a {DATASET_MAGIC} file")
        head = _line(f).split()
        if len(head) != 5 or head[0] != "pools":
            raise FormatError(f"{path}: expected a pools record")
        h, w, c, count = _ints(" ".join(head[1:]), 4)
        out = []
        for _ in range(count):
            sid, ident, nr, nw, nl = _ints(_line(f), 5)
            cond = np.array(_ints(_line(f)), dtype=np.int64)
            lat = [_payload(f, (h, w, c)) for _ in range(nr + nw + nl)]
            out.append(PreferencePool(sid, cond, tuple(lat[:nr]), tuple(lat[nr:nr + nw]), tuple(lat[nr + nw:]), ident))
    return out


# checkpoints -------------------------------------------------------------------


def _checkpoint_tensors(adapters: AdapterComposition) -> list[tuple[str, str, Tensor]]:
    out = [("base", name, t) for name, t in adapters.named_tensors("base")]
    for s in ADAPTER_SETS:
        out.extend((s, name, t) for name, t in adapters.named_tensors(s))
    return out


def serialize_sets(adapters: AdapterComposition, sets: Iterable[str]) -> bytes:
    """Concatenated float32 bytes of the named sets, in checkpoint order."""
    wanted = set(sets)
    return b"".join(
        np.ascontiguousarray(t.data, dtype=_F32).tobytes() for s, _, t in _checkpoint_tensors(adapters) if s in wanted
    )


def sets_hash(adapters: AdapterComposition, sets: Iterable[str]) -> str:
    return hashlib.sha256(serialize_sets(adapters, sets)).hexdigest()


def save_checkpoint(path: PathLike, model: DiT, run_config: Optional[dict] = None, stage: int = 0) -> str:
    """Write a checkpoint; returns the payload hash.

    Layout: magic line, one JSON header line (version, config echo, adapter
    set names, tensor index with shapes and byte offsets, sha256 of the
    payload), then the raw payload.
    """
    entries, chunks, offset = [], [], 0
    for set_name, name, t in _checkpoint_tensors(model.adapters):
        raw = np.ascontiguousarray(t.data, dtype=_F32).tobytes()
        entries.append({"set": set_name, "name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": _model_config_dict(model.config),
        "run_config": run_config or {},
        "stage": stage,
        "adapter_sets": list(ADAPTER_SETS),
        "lora_scale": model.adapters.scale,
        "tensors": entries,
        "sha256": digest,
    }
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC}\n".encode())
        f.write((json.dumps(header, sort_keys=True) + "\n").encode())
        f.write(payload)
    return digest


def _model_config_dict(cfg: ModelConfig) -> dict:
    return {k: getattr(cfg, k) for k in ModelConfig.field_names()}


def read_checkpoint_header(path: PathLike) -> dict:
    with open(path, "rb") as f:
        if _line(f) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a {CHECKPOINT_MAGIC} file")
        return json.loads(_line(f))


def load_checkpoint(path: PathLike) -> tuple[DiT, dict]:
    """Returns ``(model, header)``; the payload hash is verified."""
    with open(path, "rb") as f:
        if _line(f) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a {CHECKPOINT_MAGIC} file")
        try:
            header = json.loads(_line(f))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt header") from exc
        payload = f.read()
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise FormatError(f"{path}: content hash mismatch")
    cfg = ModelConfig(**header["model_config"])
    tensors: dict[str, dict] = {"base": {}, "phi_c": {}, "phi_d": {}}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_F32).reshape(e["shape"])
        tensors[e["set"]][e["name"]] = Tensor(arr, dtype=np.float32)
    sets = {}
    for s in ADAPTER_SETS:
        layers = sorted({n.rsplit(".", 1)[0] for n in tensors[s]})
        sets[s] = {layer: LoraPair(tensors[s][layer + ".A"], tensors[s][layer + ".B"]) for layer in layers}
    adapters = AdapterComposition(tensors["base"], sets["phi_c"], sets["phi_d"], header["lora_scale"])
    return DiT(cfg, adapters), header


# latents, metrics, rasters -----------------------------------------------------


def save_latents(path: PathLike, latents: np.ndarray) -> None:
    latents = np.asarray(latents)
    n, h, w, c = latents.shape
    with open(path, "wb") as f:
        f.write(f"{LATENT_MAGIC}\n{n} {h} {w} {c}\n".encode())
        _write_latent(f, latents)


def load_latents(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        if _line(f) != LATENT_MAGIC:
            raise FormatError(f"{path}: not a {LATENT_MAGIC} file")
        n, h, w, c = _ints(_line(f), 4)
        return _payload(f, (n, h, w, c))


class MetricsWriter:
    """Append-only CSV with a fixed header; the header is written once per new file."""

    def __init__(self, path: PathLike, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = list(columns)
        if self.path.exists() and self.path.stat().st_size > 0:
            with open(self.path, newline="") as f:
                existing = next(csv.reader(f))
            if existing != self.columns:
                raise FormatError(f"{path}: header {existing} does not match {self.columns}")
        else:
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.columns)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_cell(row.get(c)) for c in self.columns])


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_ppm(path: PathLike, latent: np.ndarray, scale: int = 8, value_range: float = 3.0) -> None:
    """Binary PPM of the first three channels, upscaled, identity patch outlined in white."""
    latent = np.asarray(latent, dtype=np.float64)
    h, w, c = latent.shape
    rgb = np.zeros((h, w, 3))
    rgb[..., : min(c, 3)] = latent[..., : min(c, 3)]
    img = np.clip((rgb + value_range) / (2 * value_range) * 255.0, 0, 255).round().astype(np.uint8)
    img = img.repeat(scale, axis=0).repeat(scale, axis=1)
    edge = (h // 2) * scale
    img[0, :edge] = img[edge - 1, :edge] = 255
    img[:edge, 0] = img[:edge, edge - 1] = 255
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(img.tobytes())
