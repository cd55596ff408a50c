"""Command-line entry point: ``hybridmm {train,tile,generate,bench,selfcheck}``.

Exit codes: 0 success, 1 usage/config, 2 data/parse, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .layers import ConfigError
from .netpbm import NetPBMError, read_frames, read_p6, write_p6
from .numerics import NumericError, Rng
from .ssm import DomainError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("hybridmm")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def write_manifest(out_dir: Path, command: str, cfg: dict | None, seed: int, artifacts: list[str],
                   argv: list[str]) -> Path:
    """One manifest per output directory: enough to rerun the command."""
    doc = {
        "tool": "hybridmm",
        "version": _version(),
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": cfg,
        "artifacts": sorted(artifacts),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _config(args) -> dict:
    return cfgmod.load_config(args.config, args.set, args.seed)


# ---------------------------------------------------------------------------
# train


def cmd_train(args, argv) -> int:
    from .tasks import gen_synthetic
    from .training import (
        batches, load_checkpoint, model_from_config, restore_params, run_stage, save_checkpoint,
    )

    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init <stage-1 checkpoint>")
    cfg = _config(args)
    if args.steps is not None:
        cfg["train"][f"stage{args.stage}"]["steps"] = args.steps
    model = model_from_config(cfg)
    if args.init:
        ckpt = load_checkpoint(args.init)
        if ckpt.meta.get("config", {}).get("model") != cfg["model"]:
            raise ConfigError(f"{args.init}: model section differs from the current config")
        restore_params(model, ckpt)
    tc = cfgmod.train_config(cfg, args.stage)
    task, kw = cfgmod.task_kwargs(cfg)
    data = batches(gen_synthetic(task, Rng(cfg["seed"]).child(f"data/stage{args.stage}"), **kw), tc.batch_size)
    log = run_stage(args.stage, model, tc, data, log_every=args.log_every)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", model, cfg, log)
    (out / "loss.csv").write_text(log.to_csv())
    write_manifest(out, "train", cfg, cfg["seed"], ["checkpoint.npz", "loss.csv"], argv)
    print(f"stage {args.stage}: first loss {log.losses[0]:.4f}, last loss {log.losses[-1]:.4f}, "
          f"eval {log.final_eval_loss:.4f}")
    print(f"wrote {out / 'checkpoint.npz'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# tile


def cmd_tile(args, argv) -> int:
    from .vision import layout_for, resize_bilinear

    img = read_p6(args.image)
    if args.max_res is not None:
        if args.max_res < 1:
            raise UsageError("--max-res must be positive")
        longest = max(img.width, img.height)
        if longest > args.max_res:
            scale = args.max_res / longest
            img = resize_bilinear(img, max(1, round(img.width * scale)), max(1, round(img.height * scale)))
    phase = "train" if args.train else "inference"
    lay = layout_for(img, args.tile_size, args.patch, args.global_image, phase)
    cols, rows = lay.grid
    print(f"grid {cols}x{rows} tiles {len(lay.tiles)} global {'yes' if lay.global_image is not None else 'no'} "
          f"tokens {lay.token_count}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i, tile in enumerate(lay.tiles):
            name = f"tile_r{i // cols}_c{i % cols}.ppm"
            write_p6(out / name, tile)
            names.append(name)
        if lay.global_image is not None:
            write_p6(out / "global.ppm", lay.global_image)
            names.append("global.ppm")
        meta = {"grid": [cols, rows], "tile_size": args.tile_size, "patch": args.patch,
                "token_count": lay.token_count, "tiles": names}
        (out / "tiles.json").write_text(json.dumps(meta, indent=2) + "\n")
        write_manifest(out, "tile", None, 0, names + ["tiles.json"], argv)
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args, argv) -> int:
    from .inference import generate
    from .tasks import VOCAB, SyntheticSample
    from .training import load_checkpoint, model_from_config, restore_params
    from .vision import Image, sample_frames

    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.meta.get("config")
    if not isinstance(cfg, dict) or "model" not in cfg:
        raise ConfigError(f"{args.checkpoint}: checkpoint carries no model config")
    if cfg["model"]["vocab"] != len(VOCAB):
        raise ConfigError(f"checkpoint vocab {cfg['model']['vocab']} does not match tokenizer size {len(VOCAB)}")
    model = model_from_config(cfg)
    try:
        restore_params(model, ckpt)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not fit its config: {exc}") from exc

    words = args.prompt.split()
    unknown = [w for w in words if w not in VOCAB.ids]
    if unknown:
        raise UsageError(f"unknown prompt tokens {unknown}")
    prompt = VOCAB.encode(words)
    if args.image and args.frames:
        raise UsageError("pass --image or --frames, not both")
    visual = None
    if args.image:
        visual = read_p6(args.image)
    elif args.frames:
        paths = read_frames(args.frames)
        if not paths:
            raise DomainError(f"no .ppm frames in {args.frames}")
        visual = [read_p6(p) for p in sample_frames(paths, args.frames_n)]
        print(f"frames sampled {len(visual)} of {len(paths)}")
    vis = None
    if visual is not None:
        sample = SyntheticSample(visual, prompt, np.zeros_like(prompt))
        vis = model.visual_embeds([sample], phase="inference").data[0]
    tokens, res = generate(model.backbone, prompt, args.n_tokens, args.temperature, args.seed or cfg.get("seed", 0),
                           visual_embeds=vis, config_id=model.backbone.kinds)
    print(" ".join(VOCAB.decode(tokens)))
    print(res.line())
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def cmd_bench(args, argv) -> int:
    from .inference import efficiency_sweep

    cfg = _config(args)
    b = cfg["bench"]
    if args.contexts:
        b["contexts"] = [c if c.startswith("img:") else int(c) for c in args.contexts.split(",")]
    if args.repeats is not None:
        b["repeats"] = args.repeats
    if args.n_tokens is not None:
        b["n_tokens"] = args.n_tokens
    jobs = args.jobs if args.jobs is not None else b["jobs"]
    if not b["configs"] or not b["contexts"]:
        raise UsageError("bench grid is empty")
    res = efficiency_sweep(
        b["configs"], b["contexts"], n_tokens=b["n_tokens"], repeats=b["repeats"], warmup=b["warmup"],
        model=dict(cfg["model"], **b["model"]), seed=cfg["seed"], chunk=b["prefill_chunk"], jobs=jobs,
        progress=lambda r: print(r.line() if not r.failed else f"[{r.config}] context={r.context_tokens} FAILED",
                                 flush=True),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.to_csv())
    write_manifest(out.parent, "bench", cfg, cfg["seed"], [out.name], argv)
    for name, fit in res.fits().items():
        print(f"{name}: {fit.summary()}")
    ok = [r for r in res.medians() if not r.failed]
    if not ok:
        print("every cell failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# selfcheck


def cmd_selfcheck(args, argv) -> int:
    from .selfcheck import report_csv, run_checks

    seed = cfgmod.load_config(None, None, args.seed)["seed"]
    results = run_checks(seed)
    text = report_csv(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "selfcheck.csv").write_text(text)
    write_manifest(out, "selfcheck", None, seed, ["selfcheck.csv"], argv)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} value={r.value:.3e} tol={r.tolerance:.1e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: $HYBRIDMM_SEED or 0)")

    p = _Parser(prog="hybridmm", description="Hybrid attention/Mamba multimodal toolkit.")
    p.add_argument("--version", action="version", version=f"hybridmm {_version()}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. model.pattern=AMMM (repeatable)")

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    with_config(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--steps", type=int, help="override the stage's step count")
    t.add_argument("--log-every", type=int, default=0)

    ti = sub.add_parser("tile", parents=[common], help="AnyRes-tile a P6 image")
    ti.add_argument("image")
    ti.add_argument("--max-res", type=int, help="downscale so the longest side is at most this")
    ti.add_argument("--global", dest="global_image", action="store_true", help="append a global view")
    ti.add_argument("--train", action="store_true", help="match the training aspect set instead of ceil-division")
    ti.add_argument("--tile-size", type=int, default=336)
    ti.add_argument("--patch", type=int, default=14)
    ti.add_argument("--out", help="directory for tile files")

    g = sub.add_parser("generate", parents=[common], help="generate from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", default="<bos>", help="space-separated vocabulary tokens")
    g.add_argument("--image", help="P6 image")
    g.add_argument("--frames", help="directory of P6 frames, in name order")
    g.add_argument("--frames-n", type=int, default=8)
    g.add_argument("--n-tokens", type=int, default=16)
    g.add_argument("--temperature", type=float, default=0.0)

    b = sub.add_parser("bench", parents=[common], help="prefill/decode efficiency sweep")
    with_config(b)
    b.add_argument("--out", required=True, help="CSV path")
    b.add_argument("--jobs", type=int, help="parallel cells (default 1 for clean timings)")
    b.add_argument("--contexts", help="comma-separated context lengths or img:<res>")
    b.add_argument("--repeats", type=int)
    b.add_argument("--n-tokens", type=int)

    s = sub.add_parser("selfcheck", parents=[common], help="run the oracle/invariant suite")
    s.add_argument("--out", required=True, help="output directory")
    return p


COMMANDS = {"train": cmd_train, "tile": cmd_tile, "generate": cmd_generate, "bench": cmd_bench,
            "selfcheck": cmd_selfcheck}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NetPBMError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
