import csv
import json

import numpy as np
import pytest

from hybridmm.cli import main
from hybridmm.config import DEFAULTS, ConfigError, dump_config, load_config, stack_spec
from hybridmm.netpbm import encode_p6, write_p6
from hybridmm.vision import Image

SMALL = ["model.d_model=16", "model.n_heads=2", "model.d_state=4", "model.n_experts=2", "model.top_k=1",
         "vision.width=8", "vision.n_layers=1", "train.stage1.batch_size=2", "train.stage2.batch_size=2"]


def _sets(*extra):
    out = []
    for kv in SMALL + list(extra):
        out += ["--set", kv]
    return out


# -- config --------------------------------------------------------------------


def test_defaults_resolve():
    cfg = load_config(seed=0)
    assert cfg["model"]["pattern"] == "AMMM" and cfg["seed"] == 0
    assert stack_spec(cfg).d_model == 64


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(overrides=["model.colour=3"])
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  bogus: 1\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("model:\n  d_model: 32\n  pattern: AM\n")
    cfg = load_config(p, ["model.pattern=MMMA"], seed=4)
    assert cfg["model"]["d_model"] == 32 and cfg["model"]["pattern"] == "MMMA" and cfg["seed"] == 4


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv("HYBRIDMM_SEED", "17")
    assert load_config()["seed"] == 17
    assert load_config(seed=2)["seed"] == 2


def test_dump_roundtrip(tmp_path):
    cfg = load_config(seed=3)
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg


def test_every_section_has_defaults():
    assert set(DEFAULTS) >= {"model", "vision", "adapter", "train", "bench", "seed"}


# -- train ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def stage1(tmp_path_factory):
    out = tmp_path_factory.mktemp("s1")
    assert main(["train", "--stage", "1", "--out", str(out), "--steps", "3", "--seed", "0"] + _sets()) == 0
    return out


def test_train_outputs_and_manifest(stage1):
    files = sorted(p.name for p in stage1.iterdir())
    assert files == ["checkpoint.npz", "loss.csv", "manifest.json"]
    man = json.loads((stage1 / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 0
    assert man["config"]["model"]["d_model"] == 16
    rows = list(csv.reader((stage1 / "loss.csv").open()))
    # three steps plus the post-training evaluation of the last batch
    assert [r[1] for r in rows[1:]] == ["0", "1", "2", "eval"]


def test_train_rerun_from_manifest_is_byte_identical(stage1):
    before = (stage1 / "loss.csv").read_bytes()
    argv = json.loads((stage1 / "manifest.json").read_text())["argv"]
    assert main(argv) == 0
    assert (stage1 / "loss.csv").read_bytes() == before


def test_stage2_from_stage1(stage1, tmp_path):
    argv = ["train", "--stage", "2", "--init", str(stage1 / "checkpoint.npz"), "--out", str(tmp_path),
            "--steps", "2", "--seed", "0"] + _sets()
    assert main(argv) == 0
    assert (tmp_path / "checkpoint.npz").exists()


def test_stage2_requires_matching_model(stage1, tmp_path):
    argv = ["train", "--stage", "2", "--init", str(stage1 / "checkpoint.npz"), "--out", str(tmp_path),
            "--steps", "1"] + _sets("model.d_model=32")
    assert main(argv) == 1


@pytest.mark.parametrize("argv", [
    ["train", "--stage", "3", "--out", "x"],
    ["train", "--stage", "2", "--out", "x"],
    ["train", "--stage", "1", "--out", "x", "--set", "model.nope=1"],
    ["frobnicate"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


# -- tile ----------------------------------------------------------------------


def _ppm(path, w, h):
    rng = np.random.default_rng(0)
    write_p6(path, Image(rng.integers(0, 256, (h, w, 3)).astype(np.uint8)))
    return str(path)


def test_tile_672_with_global(tmp_path, capsys):
    img = _ppm(tmp_path / "a.ppm", 672, 672)
    out = tmp_path / "tiles"
    assert main(["tile", img, "--global", "--out", str(out)]) == 0
    assert "tokens 2880" in capsys.readouterr().out
    names = sorted(p.name for p in out.iterdir())
    assert names == ["global.ppm", "manifest.json", "tile_r0_c0.ppm", "tile_r0_c1.ppm", "tile_r1_c0.ppm",
                     "tile_r1_c1.ppm", "tiles.json"]


def test_tile_336_single(tmp_path, capsys):
    assert main(["tile", _ppm(tmp_path / "a.ppm", 336, 336)]) == 0
    assert "grid 1x1 tiles 1 global no tokens 576" in capsys.readouterr().out


def test_tile_max_res(tmp_path, capsys):
    assert main(["tile", _ppm(tmp_path / "a.ppm", 1344, 672), "--max-res", "672"]) == 0
    assert "grid 2x1" in capsys.readouterr().out


def test_tile_truncated_file(tmp_path, capsys):
    p = tmp_path / "bad.ppm"
    p.write_bytes(encode_p6(Image.solid(4, 4, (1, 2, 3)))[:-5])
    assert main(["tile", str(p)]) == 2
    assert "byte" in capsys.readouterr().err


def test_tile_missing_file(tmp_path):
    assert main(["tile", str(tmp_path / "none.ppm")]) == 2


# -- generate ------------------------------------------------------------------


def test_generate_text_only_is_deterministic(stage1, capsys):
    ck = str(stage1 / "checkpoint.npz")
    assert main(["generate", ck, "--prompt", "<bos> k1 v2", "--n-tokens", "4"]) == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert main(["generate", ck, "--prompt", "<bos> k1 v2", "--n-tokens", "4"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == first
    assert len(first.split()) == 4


def test_generate_frames(stage1, tmp_path, capsys):
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(20):
        write_p6(frames / f"f{i:03d}.ppm", Image.solid(28, 28, (i * 10, 0, 0)))
    ck = str(stage1 / "checkpoint.npz")
    assert main(["generate", ck, "--frames", str(frames), "--frames-n", "8", "--n-tokens", "2"]) == 0
    assert "frames sampled 8 of 20" in capsys.readouterr().out


def test_generate_image(stage1, tmp_path):
    img = _ppm(tmp_path / "a.ppm", 112, 56)
    assert main(["generate", str(stage1 / "checkpoint.npz"), "--image", img, "--n-tokens", "2"]) == 0


def test_generate_errors(stage1, tmp_path):
    ck = str(stage1 / "checkpoint.npz")
    assert main(["generate", ck, "--prompt", "notatoken"]) == 1
    bad = tmp_path / "bad.npz"
    np.savez(bad, a=np.zeros(1))
    assert main(["generate", str(bad)]) == 2


# -- bench ---------------------------------------------------------------------


def test_bench_two_by_three(tmp_path, capsys):
    cfg = tmp_path / "b.yaml"
    cfg.write_text(
        "model:\n  d_model: 16\n  n_heads: 2\n  d_state: 4\n"
        "bench:\n  configs:\n    - {name: attention, pattern: AA}\n    - {name: mamba, pattern: MM}\n"
        "  contexts: [8, 16, 32]\n  n_tokens: 2\n  repeats: 2\n  warmup: 0\n  model: {d_ff: 16, moe_positions: []}\n"
    )
    out = tmp_path / "r" / "bench.csv"
    assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert sum(r["repeat"] == "median" for r in rows) == 6
    assert (out.parent / "manifest.json").exists()
    text = capsys.readouterr().out
    assert "attention: t ~" in text and "mamba: t ~" in text


def test_bench_empty_grid(tmp_path):
    assert main(["bench", "--out", str(tmp_path / "b.csv"), "--set", "bench.configs=[]"]) == 1


# -- selfcheck -----------------------------------------------------------------


def test_selfcheck_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["selfcheck", "--out", str(a), "--seed", "5"]) == 0
    assert main(["selfcheck", "--out", str(b), "--seed", "5"]) == 0
    assert (a / "selfcheck.csv").read_bytes() == (b / "selfcheck.csv").read_bytes()
    assert (a / "manifest.json").exists()
