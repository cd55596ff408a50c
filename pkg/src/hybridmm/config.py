"""YAML run configuration.

Every key has a default below; unknown keys are rejected. Sections:

model    hybrid stack (pattern over {A, M}, MoE placement, widths)
vision   tile/patch geometry of the frozen encoder and the global-view flags
adapter  MLP hidden width and the video convolution kernel/stride
task     synthetic task and its generator parameters
train    per-stage optimiser settings plus shared AdamW/clip/sequence cap
bench    efficiency sweep grid
seed     master seed (falls back to $HYBRIDMM_SEED, then 0)
"""

from __future__ import annotations

import copy
import os
from pathlib import Path
from typing import Any

import yaml

from .layers import ConfigError, StackSpec

DEFAULTS: dict[str, Any] = {
    "model": {
        "pattern": "AMMM",
        "moe_positions": None,  # null: every attention layer
        "d_model": 64,
        "n_heads": 4,
        "n_experts": 4,
        "top_k": 2,
        "d_ff": None,  # null: 2 * d_model
        "d_state": 8,
        "vocab": 64,
        "tied": True,
        "rope": False,
        "expand": 2,
        "conv_width": 4,
        "simplified_b_bar": False,
        "moe_aux_coef": 0.0,
    },
    "vision": {
        # toy geometry: 56px tiles -> 16 tokens per tile; 336/14 gives the
        # 576-token tiles used for token accounting
        "tile_size": 56,
        "patch": 14,
        "width": 32,
        "n_layers": 2,
        "n_heads": 2,
        "include_global_train": False,
        "include_global_infer": True,
        "aspects": [[1, 1], [1, 2], [2, 1], [2, 2], [3, 1], [1, 3], [1, 4], [4, 1]],
    },
    "adapter": {"mlp_hidden": None, "video_kernel": 2, "video_stride": 2},
    "task": {
        "name": "patch-color",
        "cells": [2, 2],
        "cell_px": 28,
        "n_colors": 4,
        "n_frames": 8,
        "frame_px": 56,
        "seq_len": 64,
        "n_pairs": 8,
        "n_symbols": 8,
    },
    "train": {
        "stage1": {"lr": 1e-3, "steps": 300, "warmup": 10, "batch_size": 16},
        "stage2": {"lr": 1e-3, "steps": 1000, "warmup": 20, "batch_size": 16},
        "seq_cap": 64,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 0.01,
        "grad_clip": 1.0,
    },
    "bench": {
        "configs": [
            {"name": "attention", "pattern": "AAAA"},
            {"name": "hybrid", "pattern": "AMMM"},
            {"name": "mamba", "pattern": "MMMM"},
        ],
        "contexts": [256, 1024, 4096, 16384, "img:2688"],
        "n_tokens": 128,
        "repeats": 5,
        "warmup": 1,
        # no larger than the shortest context, so every cell runs the same
        # chunk shape and per-token cost does not depend on context length
        "prefill_chunk": 128,
        "model": {"d_ff": 64, "moe_positions": []},
        "jobs": 1,
    },
    "seed": None,
}

# sections whose values are open mappings/lists rather than fixed keys
_OPEN = {("bench", "configs"), ("bench", "model"), ("train", "stage1"), ("train", "stage2")}


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            where = ".".join(path + (k,))
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and path + (k,) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path + (k,))!r} must be a mapping")
            out[k] = _merge(base[k], v, path + (k,))
        elif isinstance(base[k], dict) and isinstance(v, dict) and path + (k,) in (("train", "stage1"), ("train", "stage2")):
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    value = yaml.safe_load(raw)
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, doc)
    for item in overrides or []:
        cfg = _merge(cfg, _parse_override(item))
    if seed is not None:
        cfg["seed"] = int(seed)
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get("HYBRIDMM_SEED", 0))
    stack_spec(cfg)  # validate early
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def stack_spec(cfg: dict, **override) -> StackSpec:
    m = dict(cfg["model"], **override)
    moe = m.pop("moe_positions")
    return StackSpec(moe_positions=None if moe is None else frozenset(moe), **m)


def vision_spec(cfg: dict):
    from .training import VisionSpec

    v = dict(cfg["vision"])
    v["aspects"] = tuple(tuple(a) for a in v["aspects"])
    return VisionSpec(**v)


def adapter_spec(cfg: dict):
    from .training import AdapterSpec

    return AdapterSpec(**cfg["adapter"])


def train_config(cfg: dict, stage: int):
    from .training import TrainConfig

    t = cfg["train"]
    s = t[f"stage{stage}"]
    unknown = set(s) - {"lr", "steps", "warmup", "batch_size"}
    if unknown:
        raise ConfigError(f"unknown keys in train.stage{stage}: {sorted(unknown)}")
    return TrainConfig(
        stage=stage, lr=float(s["lr"]), steps=int(s["steps"]), warmup=int(s["warmup"]),
        batch_size=int(s["batch_size"]), seq_cap=int(t["seq_cap"]), seed=int(cfg["seed"]),
        betas=tuple(t["betas"]), eps=float(t["eps"]), weight_decay=float(t["weight_decay"]),
        grad_clip=float(t["grad_clip"]),
    )


def task_kwargs(cfg: dict) -> tuple[str, dict]:
    t = cfg["task"]
    name = t["name"]
    if name == "patch-color":
        return name, {"cells": tuple(t["cells"]), "cell_px": t["cell_px"], "n_colors": t["n_colors"]}
    if name == "frame-order":
        return name, {"n_frames": t["n_frames"], "frame_px": t["frame_px"]}
    if name == "assoc-recall":
        return name, {"seq_len": t["seq_len"], "n_pairs": t["n_pairs"], "n_symbols": t["n_symbols"]}
    raise ConfigError(f"unknown task {name!r}")
