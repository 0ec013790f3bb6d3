import csv
import json

import numpy as np
import pytest

from gsaflow import cli, io
from gsaflow.data import generate_dataset
from gsaflow.dpo import build_preference_pools
from gsaflow.evaluate import generate_story
from gsaflow.flow import SamplerConfig, euler_sample
from gsaflow.model import DiT, ModelConfig

SMALL = ModelConfig(hidden_dim=16, num_heads=2, depth=2, lora_rank=4, lora_alpha=4.0, ffn_mult=2)

TINY_RUN = """
hidden_dim = 16
num_heads = 2
depth = 2
lora_rank = 4
lora_alpha = 4.0
ffn_mult = 2
num_identities = 3
frames_per_identity = 5
stage1_steps = 12
stage1_batch = 2
dpo_steps = 6
eval_every = 3
heldout_pairs = 8
holdout_per_identity = 1
sampler_steps = 3
"""


def random_model(seed=0):
    model = DiT.create(SMALL, seed)
    rng = np.random.default_rng(seed)
    for s in ("phi_c", "phi_d"):
        for pair in model.adapters.sets[s].values():
            pair.B.data[...] = rng.normal(0.0, 0.1, pair.B.shape)
    return model


# formats -----------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(3, 5, 1)
    path = tmp_path / "ds.bin"
    io.save_dataset(path, ds)
    assert path.read_bytes().startswith(b"GSAFLOW-DS v1\n")
    back = io.load_dataset(path)
    assert [s.identity_id for s in back] == [s.identity_id for s in ds]
    for a, b in zip(ds, back):
        assert a.character == b.character
        for fa, fb in zip(a.frames, b.frames):
            assert fa.latent.tobytes() == fb.latent.tobytes()
            assert np.array_equal(fa.caption, fb.caption) and fa.scene_id == fb.scene_id


def test_dataset_payload_is_little_endian_float32(tmp_path):
    ds = generate_dataset(2, 4, 0)
    path = tmp_path / "ds.bin"
    io.save_dataset(path, ds)
    raw = path.read_bytes()
    first = ds[0].frames[0]
    header = b"GSAFLOW-DS v1\ndataset 8 8 4 2\n" + f"{ds[0].identity_id} {ds[0].character.style_id} 4\n".encode()
    header += (" ".join(str(x) for x in first.caption) + "\n").encode()
    assert raw.startswith(header)
    payload = np.frombuffer(raw[len(header):len(header) + 4 * first.latent.size], dtype="<f4")
    np.testing.assert_array_equal(payload, first.latent.ravel())


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_damaged_datasets_are_rejected(tmp_path, damage):
    path = tmp_path / "ds.bin"
    io.save_dataset(path, generate_dataset(2, 4, 0))
    raw = path.read_bytes()
    raw = {"magic": b"XX" + raw[2:], "truncate": raw[:-7], "trailing": raw + b"\0"}[damage]
    path.write_bytes(raw)
    with pytest.raises(io.FormatError):
        io.load_dataset(path)


def test_pool_round_trip(tmp_path):
    pools = build_preference_pools(generate_dataset(2, 4, 2), 3, np.random.default_rng(0))
    path = tmp_path / "pools.bin"
    io.save_pools(path, pools)
    back = io.load_pools(path)
    assert len(back) == len(pools)
    for a, b in zip(pools, back):
        assert (a.scenario_id, a.identity_id) == (b.scenario_id, b.identity_id)
        assert np.array_equal(a.condition, b.condition)
        for xa, xb in zip((*a.references, *a.winners, *a.losers), (*b.references, *b.winners, *b.losers)):
            assert np.asarray(xa, np.float32).tobytes() == xb.tobytes()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = random_model(1)
    path = tmp_path / "m.ckpt"
    digest = io.save_checkpoint(path, model, {"seed": 3}, stage=1)
    back, header = io.load_checkpoint(path)
    assert header["sha256"] == digest and header["run_config"] == {"seed": 3} and header["stage"] == 1
    assert back.config == model.config
    for s in ("base", "phi_c", "phi_d"):
        a, b = model.adapters.named_tensors(s), back.adapters.named_tensors(s)
        assert [n for n, _ in a] == [n for n, _ in b]
        assert all(x.data.tobytes() == y.data.tobytes() for (_, x), (_, y) in zip(a, b))
    z = np.random.default_rng(2).normal(size=SMALL.latent_shape)
    cap = generate_dataset(2, 4, 0)[0].frames[0].caption
    assert model.velocity(z, 0.5, cap).data.tobytes() == back.velocity(z, 0.5, cap).data.tobytes()
    io.save_checkpoint(tmp_path / "again.ckpt", back, {"seed": 3}, stage=1)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_indexes_every_tensor(tmp_path):
    model = random_model(2)
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, model)
    header = io.read_checkpoint_header(path)
    assert header["version"] == 1 and header["adapter_sets"] == ["phi_c", "phi_d"]
    end = 0
    for e in header["tensors"]:
        assert e["offset"] == end and e["nbytes"] == 4 * int(np.prod(e["shape"]))
        end += e["nbytes"]
    n_adapted = 7 * SMALL.depth
    assert sum(e["set"] == "phi_d" for e in header["tensors"]) == 2 * n_adapted


def test_corrupted_checkpoint_fails_hash_check(tmp_path):
    path = tmp_path / "m.ckpt"
    io.save_checkpoint(path, random_model(3))
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(io.FormatError, match="hash"):
        io.load_checkpoint(path)


def test_freeze_hash_only_sees_requested_sets():
    model = random_model(4)
    before = io.sets_hash(model.adapters, ("base", "phi_c"))
    model.adapters.phi_d["blocks.0.q"].B.data[0, 0] += 1.0
    assert io.sets_hash(model.adapters, ("base", "phi_c")) == before
    model.adapters.phi_c["blocks.0.q"].B.data[0, 0] += 1.0
    assert io.sets_hash(model.adapters, ("base", "phi_c")) != before


def test_latent_file_round_trip(tmp_path):
    x = np.random.default_rng(5).normal(size=(3, 8, 8, 4)).astype(np.float32)
    io.save_latents(tmp_path / "z.lat", x)
    assert io.load_latents(tmp_path / "z.lat").tobytes() == x.tobytes()


def test_metrics_writer_keeps_a_fixed_header(tmp_path):
    path = tmp_path / "m.csv"
    w = io.MetricsWriter(path, ["step", "loss"])
    w.append({"step": 1, "loss": 0.5})
    w.append({"step": 2})
    io.MetricsWriter(path, ["step", "loss"]).append({"step": 3, "loss": 0.25})
    rows = list(csv.reader(path.open()))
    assert rows == [["step", "loss"], ["1", "0.5"], ["2", ""], ["3", "0.25"]]
    with pytest.raises(io.FormatError):
        io.MetricsWriter(path, ["step", "accuracy"])


def test_ppm_dump_outlines_the_identity_patch(tmp_path):
    latent = np.zeros((8, 8, 4))
    io.write_ppm(tmp_path / "a.ppm", latent, scale=2)
    raw = (tmp_path / "a.ppm").read_bytes()
    head = b"P6\n16 16\n255\n"
    assert raw.startswith(head)
    img = np.frombuffer(raw[len(head):], np.uint8).reshape(16, 16, 3)
    assert np.all(img[0, :8] == 255) and np.all(img[:8, 7] == 255)
    assert np.all(img[12, 12] == 128)


# generation routing ----------------------------------------------------------------


def test_without_gsa_equals_single_sample_generation():
    model = random_model(6)
    seq = generate_dataset(2, 5, 3)[0]
    sampler = SamplerConfig(steps=3)
    gen, refs = generate_story(model, seq, 2, sampler, seed=9, use_gsa=False)
    z_init = np.random.default_rng(9).standard_normal((3,) + SMALL.latent_shape)
    for i, frame in enumerate(seq.frames[2:]):
        single = euler_sample(model, frame.caption, [], sampler, None, z_init=z_init[i])
        assert gen[i].tobytes() == single.astype(np.float32).tobytes()
    with_refs, _ = generate_story(model, seq, 2, sampler, seed=9, use_gsa=True)
    assert not np.array_equal(with_refs[0], gen[0])


# command line ------------------------------------------------------------------


@pytest.fixture
def run_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_RUN, encoding="utf-8")
    return path


def _pipeline(root, cfg, capsys):
    root.mkdir()
    c = ["--config", str(cfg), "--seed", "5"]
    assert cli.main(["gen-data", *c, "--out", str(root / "ds.bin")]) == 0
    assert "3 stories" in capsys.readouterr().out
    assert cli.main(["train-stage1", *c, "--in", str(root / "ds.bin"), "--out", str(root / "s1.ckpt")]) == 0
    assert cli.main(["train-stage2", *c, "--in", str(root / "ds.bin"), "--checkpoint", str(root / "s1.ckpt"),
                     "--out", str(root / "s2.ckpt")]) == 0
    assert cli.main(["sample", *c, "--checkpoint", str(root / "s2.ckpt"), "--in", str(root / "ds.bin"),
                     "--caption", "0 5 1", "--caption", "0 6 1", "--out", str(root / "samples")]) == 0
    assert cli.main(["eval", *c, "--checkpoint", str(root / "s2.ckpt"), "--in", str(root / "ds.bin"),
                     "--out", str(root / "eval.csv")]) == 0
    return sorted(p for p in root.rglob("*") if p.is_file())


def test_cli_pipeline_is_byte_reproducible(tmp_path, run_cfg, capsys):
    first = _pipeline(tmp_path / "a", run_cfg, capsys)
    second = _pipeline(tmp_path / "b", run_cfg, capsys)
    names = [p.relative_to(tmp_path / "a") for p in first]
    assert names == [p.relative_to(tmp_path / "b") for p in second]
    assert {str(n) for n in names} >= {"ds.bin", "s1.ckpt", "s1.ckpt.metrics.csv", "s2.ckpt",
                                       "s2.ckpt.metrics.csv", "eval.csv", "samples/latents.lat"}
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes(), a.name

    s1 = list(csv.DictReader((tmp_path / "a" / "s1.ckpt.metrics.csv").open()))
    assert len(s1) == 12 and list(s1[0]) == ["step", "loss"]
    s2 = list(csv.DictReader((tmp_path / "a" / "s2.ckpt.metrics.csv").open()))
    assert abs(float(s2[0]["loss"]) - np.log(2)) < 1e-6
    assert [r["heldout_accuracy"] != "" for r in s2] == [False, False, True, False, False, True]
    table = list(csv.DictReader((tmp_path / "a" / "eval.csv").open()))
    assert [r["variant"] for r in table] == ["with-gsa", "without-gsa"]
    assert list(table[0]) == ["variant", "CIDS_cross", "CIDS_self", "CSD_cross", "CSD_self"]
    assert io.load_latents(tmp_path / "a" / "samples" / "latents.lat").shape == (2, 8, 8, 4)

    h1 = io.read_checkpoint_header(tmp_path / "a" / "s1.ckpt")
    h2 = io.read_checkpoint_header(tmp_path / "a" / "s2.ckpt")
    assert h1["run_config"]["seed"] == 5 and h2["stage"] == 2
    phi = {e["name"]: e for e in h1["tensors"] if e["set"] != "phi_d"}
    assert phi == {e["name"]: e for e in h2["tensors"] if e["set"] != "phi_d"}


def test_frozen_sets_survive_the_stage2_command(tmp_path, run_cfg, capsys):
    _pipeline(tmp_path / "a", run_cfg, capsys)
    m1, _ = io.load_checkpoint(tmp_path / "a" / "s1.ckpt")
    m2, _ = io.load_checkpoint(tmp_path / "a" / "s2.ckpt")
    assert io.sets_hash(m1.adapters, ("base", "phi_c")) == io.sets_hash(m2.adapters, ("base", "phi_c"))
    assert io.sets_hash(m1.adapters, ("phi_d",)) != io.sets_hash(m2.adapters, ("phi_d",))


def test_validation_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 3\n", encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["train-stage1", "--in", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "m")]) == 1
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint\n")
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--in", str(tmp_path / "junk.ckpt"),
                     "--out", str(tmp_path / "e.csv")]) == 1
    small = tmp_path / "small.cfg"
    small.write_text("frames_per_identity = 4\ngroup_size = 5\nholdout_per_identity = 1\n", encoding="utf-8")
    assert cli.main(["gen-data", "--config", str(small), "--out", str(tmp_path / "ds.bin")]) == 0
    assert cli.main(["train-stage1", "--config", str(small), "--in", str(tmp_path / "ds.bin"),
                     "--out", str(tmp_path / "m")]) == 1


def test_grad_check_command(capsys, monkeypatch):
    assert cli.main(["grad-check", "--seed", "1"]) == 0
    assert "all" in capsys.readouterr().out
    monkeypatch.setattr(cli, "gradient_suite", lambda seed: {"stage1/x": 0.5})
    assert cli.main(["grad-check"]) == 2


def test_non_finite_loss_exits_2(tmp_path, run_cfg, capsys, monkeypatch):
    root = tmp_path / "r"
    root.mkdir()
    assert cli.main(["gen-data", "--config", str(run_cfg), "--out", str(root / "ds.bin")]) == 0
    monkeypatch.setattr("gsaflow.train.loss_stage1", lambda *a, **k: _nan_loss())
    assert cli.main(["train-stage1", "--config", str(run_cfg), "--in", str(root / "ds.bin"),
                     "--out", str(root / "m.ckpt")]) == 2


def _nan_loss():
    from gsaflow.tensor import Tensor

    return Tensor(np.nan, requires_grad=True)
