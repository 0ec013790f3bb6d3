"""Command-line entry points.

Exit codes: 0 success, 1 validation error (bad config, inputs or files),
2 numerical failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import ConfigError, RunConfig, load_config
from .data import decode_caption, encode_caption, generate_dataset
from .dpo import build_preference_pools, draw_pairs, implicit_reward_accuracy, split_pools, train_stage2
from .evaluate import METRIC_COLUMNS, consistency_report
from .flow import euler_sample
from .gradcheck import TOLERANCE, gradient_suite
from .model import DiT
from .tensor import ContractError, ShapeError
from .train import train_stage1

log = logging.getLogger("gsaflow")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
STAGE1_COLUMNS = ("step", "loss")
STAGE2_COLUMNS = ("step", "loss", "logit", "pair_accuracy", "heldout_accuracy")
EVAL_COLUMNS = ("variant",) + METRIC_COLUMNS


class NumericalFailure(RuntimeError):
    pass


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent, reproducible streams per purpose
    return np.random.default_rng([seed, stream])


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _fresh(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        path.unlink()
    return path


def cmd_gen_data(cfg: RunConfig, out: Path) -> list:
    dataset = generate_dataset(cfg.num_identities, cfg.frames_per_identity, cfg.seed,
                               identity_offset=cfg.identity_offset, text_len=cfg.text_len)
    io.save_dataset(_fresh(out), dataset)
    print(f"wrote {out}: {len(dataset)} stories, {sum(len(s.frames) for s in dataset)} frames")
    for seq in dataset:
        scenes = " ".join(str(f.scene_id) for f in seq.frames)
        print(f"  identity {seq.identity_id} style {seq.character.style_id} scenes {scenes}")
    return dataset


def cmd_train_stage1(cfg: RunConfig, dataset_path: Path, out: Path, metrics: Path) -> DiT:
    dataset = io.load_dataset(dataset_path)
    if not any(len(s.frames) >= cfg.group_size for s in dataset):
        raise ContractError(f"no story in {dataset_path} has group_size={cfg.group_size} frames")
    model = DiT.create(cfg.model_config(), cfg.model_seed)
    writer = io.MetricsWriter(_fresh(metrics), STAGE1_COLUMNS)
    report_every = max(1, cfg.stage1_steps // 20)

    def on_step(rec):
        writer.append({"step": rec.step, "loss": rec.loss})
        if rec.step % report_every == 0:
            log.info("stage1 step %d loss %.5f", rec.step, rec.loss)

    train_stage1(model, dataset, cfg.stage1_steps, _rng(cfg.seed, 1), lr=cfg.stage1_lr,
                 batch_size=cfg.stage1_batch, group_size=cfg.group_size, caption_dropout=cfg.caption_dropout,
                 use_references=cfg.use_gsa, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                 weight_decay=cfg.weight_decay, on_step=on_step)
    digest = io.save_checkpoint(_fresh(out), model, cfg.to_dict(), stage=1)
    print(f"wrote {out} sha256 {digest}")
    return model


def cmd_train_stage2(cfg: RunConfig, dataset_path: Path, checkpoint: Path, out: Path, metrics: Path) -> DiT:
    dataset = io.load_dataset(dataset_path)
    model, _ = io.load_checkpoint(checkpoint)
    model.adapters.reset_phi_d(_rng(cfg.seed, 2))
    pools = build_preference_pools(dataset, cfg.group_size, _rng(cfg.seed, 3), cfg.losers_per_mode)
    train_pools, held_pools = split_pools(pools, cfg.holdout_per_identity)
    heldout = draw_pairs(held_pools, cfg.heldout_pairs, _rng(cfg.seed, 4)) if held_pools else None
    writer = io.MetricsWriter(_fresh(metrics), STAGE2_COLUMNS)

    def on_step(rec):
        writer.append(vars(rec))
        if rec.heldout_accuracy is not None:
            log.info("stage2 step %d loss %.5f held-out accuracy %.3f", rec.step, rec.loss, rec.heldout_accuracy)

    log.info("stage2: %d training pools, %d held-out pools", len(train_pools), len(held_pools))
    history = train_stage2(model, train_pools, cfg.dpo_config(), _rng(cfg.seed, 5), heldout=heldout,
                           eval_every=cfg.eval_every, on_step=on_step)
    digest = io.save_checkpoint(_fresh(out), model, cfg.to_dict(), stage=2)
    if heldout:
        acc = history[-1].heldout_accuracy if history else implicit_reward_accuracy(model, heldout)
        print(f"held-out implicit reward accuracy {acc:.4f} over {len(heldout)} pairs")
    print(f"wrote {out} sha256 {digest}")
    return model


def _parse_caption(text: str, text_len: int) -> np.ndarray:
    try:
        ident, scene, style = (int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ContractError(f"caption must be 'identity scene style', got {text!r}") from None
    return encode_caption(ident, scene, style, text_len)


def cmd_sample(cfg: RunConfig, checkpoint: Path, dataset_path: Path, story: int, captions: Sequence[str],
               out_dir: Path, use_gsa: bool = True) -> np.ndarray:
    """Generate one frame per caption, all conditioned on the same references of one story."""
    model, _ = io.load_checkpoint(checkpoint)
    dataset = io.load_dataset(dataset_path)
    if not 0 <= story < len(dataset):
        raise ContractError(f"story index {story} out of range for {len(dataset)} stories")
    seq = dataset[story]
    num_refs = cfg.group_size - 1
    refs = [f.latent for f in seq.frames[:num_refs]]
    if captions:
        conds = np.stack([_parse_caption(c, model.config.text_len) for c in captions])
    else:
        conds = np.stack([f.caption for f in seq.frames[num_refs:]])
    gen = euler_sample(model, conds, refs if use_gsa else [], cfg.sampler_config(), _rng(cfg.seed, 6),
                       batch=len(conds)).astype(np.float32)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.save_latents(out_dir / "latents.lat", gen)
    for j, r in enumerate(refs):
        io.write_ppm(out_dir / f"reference_{j}.ppm", r)
    for i, (g, c) in enumerate(zip(gen, conds)):
        ident, scene, style = decode_caption(c)
        io.write_ppm(out_dir / f"sample_{i:02d}_id{ident}_scene{scene}_style{style}.ppm", g)
    print(f"wrote {len(gen)} samples to {out_dir}")
    return gen


def cmd_eval(cfg: RunConfig, checkpoint: Path, dataset_path: Path, variants: Sequence[str], out: Path) -> dict:
    """Consistency table, one row per variant (``with-gsa`` / ``without-gsa``)."""
    model, _ = io.load_checkpoint(checkpoint)
    dataset = io.load_dataset(dataset_path)
    writer = io.MetricsWriter(_fresh(out), EVAL_COLUMNS)
    rows = {}
    for variant in variants:
        report = consistency_report(model, dataset, cfg.group_size - 1, cfg.sampler_config(), cfg.seed,
                                    use_gsa=variant == "with-gsa")
        rows[variant] = report
        writer.append({"variant": variant, **report})
        print(f"{variant:12s} " + "  ".join(f"{k} {report[k]:.4f}" for k in METRIC_COLUMNS))
    return rows


def cmd_grad_check(cfg: RunConfig) -> dict:
    results = gradient_suite(cfg.seed)
    worst = max(results.values())
    for name, err in results.items():
        print(f"{'ok  ' if err < TOLERANCE else 'FAIL'} {name} {err:.3e}")
    if not worst < TOLERANCE:
        raise NumericalFailure(f"gradient check failed: worst relative error {worst:.3e} >= {TOLERANCE}")
    print(f"all {len(results)} checks below {TOLERANCE}")
    return results


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsaflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        return sp

    sp = command("gen-data", "write a synthetic story dataset")
    sp.add_argument("--out", type=Path, required=True)

    sp = command("train-stage1", "train the consistency adapters")
    sp.add_argument("--in", dest="inp", type=Path, required=True, help="dataset file")
    sp.add_argument("--out", type=Path, required=True, help="checkpoint file")
    sp.add_argument("--metrics", type=Path, help="CSV path (default: <out>.metrics.csv)")

    sp = command("train-stage2", "preference-align the refinement adapters")
    sp.add_argument("--in", dest="inp", type=Path, required=True, help="dataset file")
    sp.add_argument("--checkpoint", type=Path, required=True, help="stage-1 checkpoint")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--metrics", type=Path)

    sp = command("sample", "generate frames from one story's references")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--in", dest="inp", type=Path, required=True, help="dataset holding the references")
    sp.add_argument("--story", type=int, default=0)
    sp.add_argument("--caption", action="append", default=[], help="'identity scene style'; repeatable")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--without-gsa", action="store_true")

    sp = command("eval", "consistency report over a dataset")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--in", dest="inp", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="CSV report")
    sp.add_argument("--with-gsa", action="store_true")
    sp.add_argument("--without-gsa", action="store_true")

    command("grad-check", "finite-difference check of the training losses")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif args.command == "train-stage1":
            cmd_train_stage1(cfg, args.inp, args.out, args.metrics or Path(str(args.out) + ".metrics.csv"))
        elif args.command == "train-stage2":
            cmd_train_stage2(cfg, args.inp, args.checkpoint, args.out,
                             args.metrics or Path(str(args.out) + ".metrics.csv"))
        elif args.command == "sample":
            cmd_sample(cfg, args.checkpoint, args.inp, args.story, args.caption, args.out,
                       use_gsa=not args.without_gsa)
        elif args.command == "eval":
            variants = [v for v, on in (("with-gsa", args.with_gsa), ("without-gsa", args.without_gsa)) if on]
            cmd_eval(cfg, args.checkpoint, args.inp, variants or ["with-gsa", "without-gsa"], args.out)
        elif args.command == "grad-check":
            cmd_grad_check(cfg)
    except (ConfigError, ContractError, ShapeError, io.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
