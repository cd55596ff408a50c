"""Two-stage training: adapter pretraining, then instruction fine-tuning."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .adapter import ConvAdapter, MLPAdapter
from .layers import StackSpec, build_stack
from .numerics import Module, NumericError, Parameter, Rng, Tensor, no_grad
from .numerics import functional as F
from .ssm import DomainError
from .tasks import SyntheticSample
from .vision import TRAIN_ASPECTS, PatchEncoder, encode_frames, layout_for

CKPT_FORMAT = "hybridmm-checkpoint"
CKPT_VERSION = 1


@dataclass
class VisionSpec:
    tile_size: int = 336
    patch: int = 14
    width: int = 32
    n_layers: int = 2
    n_heads: int = 2
    include_global_train: bool = False
    include_global_infer: bool = True
    aspects: tuple = TRAIN_ASPECTS


@dataclass
class AdapterSpec:
    mlp_hidden: int | None = None
    video_kernel: int = 2
    video_stride: int = 2


class MultimodalModel(Module):
    """Frozen encoder, separate image/video adapters, hybrid backbone."""

    GROUPS = ("encoder", "image_adapter", "video_adapter", "backbone")

    def __init__(self, stack: StackSpec, vision: VisionSpec, adapter: AdapterSpec, rng: Rng):
        self.stack_spec, self.vision_spec, self.adapter_spec = stack, vision, adapter
        self.encoder = PatchEncoder(rng.child("encoder"), vision.tile_size, vision.patch,
                                    vision.width, vision.n_layers, vision.n_heads)
        self.image_adapter = MLPAdapter(vision.width, stack.d_model, rng.child("image_adapter"), adapter.mlp_hidden)
        self.video_adapter = ConvAdapter(vision.width, stack.d_model, rng.child("video_adapter"),
                                         adapter.video_kernel, adapter.video_stride)
        self.backbone = build_stack(stack, rng.child("backbone"))

    def group_params(self, group: str) -> list[Parameter]:
        return getattr(self, group).parameters()

    def group_checksums(self) -> dict[str, str]:
        return {g: getattr(self, g).checksum() for g in self.GROUPS}

    # -- visual prefix ---------------------------------------------------------
    def visual_embeds(self, samples: Sequence[SyntheticSample], phase: str = "train") -> Tensor | None:
        kinds = {s.kind for s in samples}
        if len(kinds) != 1:
            raise ValueError(f"batch mixes sample kinds {sorted(kinds)}")
        kind = kinds.pop()
        if kind == "text":
            return None
        vs = self.vision_spec
        if kind == "image":
            glob = vs.include_global_train if phase == "train" else vs.include_global_infer
            feats = []
            for s in samples:
                lay = layout_for(s.visual, vs.tile_size, vs.patch, glob, phase, vs.aspects)
                feats.append(self.encoder(lay.images()).reshape(-1, self.encoder.width))
            if len({f.shape for f in feats}) != 1:
                raise ValueError("images in a batch must tile to the same token count")
            return self.image_adapter(Tensor(np.stack(feats)))
        grids = [encode_frames(self.encoder, s.visual) for s in samples]
        tokens = self.video_adapter(Tensor(np.concatenate(grids)))
        return tokens.reshape(len(samples), -1, tokens.shape[-1])


# ---------------------------------------------------------------------------
# freezing


def freeze_mask(stage: int) -> dict[str, bool]:
    if stage == 1:
        return {"encoder": False, "image_adapter": True, "video_adapter": True, "backbone": False}
    if stage == 2:
        return {"encoder": False, "image_adapter": True, "video_adapter": True, "backbone": True}
    raise ValueError(f"stage must be 1 or 2, got {stage}")


def apply_freeze(model: MultimodalModel, mask: dict[str, bool]) -> None:
    if mask.get("encoder"):
        raise ValueError("the vision encoder is never trainable")
    for g in model.GROUPS:
        getattr(model, g).set_trainable(bool(mask.get(g, False)))


# ---------------------------------------------------------------------------
# loss, optimiser, schedule


def causal_lm_loss(logits, targets, mask) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is set."""
    if not np.asarray(mask).any():
        raise DomainError("causal_lm_loss: every position is masked out")
    return F.cross_entropy(logits, targets, mask)


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0


# SSM decay rates keep their spread instead of being pulled toward |A| = 1
NO_DECAY_SUFFIXES = ("A_log",)


def adamw_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: AdamState,
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
               decay: Sequence[bool] | None = None) -> AdamState:
    """Decoupled-weight-decay Adam with bias correction, updating params in place.

    ``decay`` optionally flags, per parameter, whether weight decay applies.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        denom = np.sqrt(v / c2) + eps
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = np.where(denom > 0, (m / c1) / denom, 0.0)
        wd = weight_decay if decay is None or decay[i] else 0.0
        p.data = p.data - lr * wd * p.data - lr * upd
    return state


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0) -> float:
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return peak * step / warmup
    span = total - warmup
    if span <= 0:
        return peak
    progress = (step - warmup) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    samples: list[SyntheticSample]
    tokens: np.ndarray  # (B, T-1) model input text
    targets: np.ndarray  # (B, L') next-token ids per position
    mask: np.ndarray  # (B, L') supervised positions


def collate(samples: Sequence[SyntheticSample], n_visual: int) -> Batch:
    """Align next-token targets with a visual prefix of ``n_visual`` positions.

    The model sees [visual..., text[:-1]]; position k+i-1 predicts text[i].
    Visual and prompt positions are masked out of the loss.
    """
    texts = np.stack([s.text for s in samples])
    amask = np.stack([s.answer_mask for s in samples])
    B, T = texts.shape
    L = n_visual + T - 1
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.float64)
    pos = n_visual + np.arange(1, T) - 1
    targets[:, pos] = texts[:, 1:]
    mask[:, pos] = amask[:, 1:]
    return Batch(list(samples), texts[:, :-1], targets, mask)


def batch_loss(model: MultimodalModel, samples: Sequence[SyntheticSample], aux: bool = True,
               seq_cap: int | None = None) -> tuple[Tensor, Batch]:
    vis = model.visual_embeds(samples, "train")
    n_visual = 0 if vis is None else vis.shape[1]
    batch = collate(samples, n_visual)
    if seq_cap is not None and batch.targets.shape[1] > seq_cap:
        raise ValueError(f"sequence of {batch.targets.shape[1]} positions exceeds seq_cap {seq_cap}")
    logits = model.backbone(batch.tokens, vis)
    loss = causal_lm_loss(logits, batch.targets, batch.mask)
    extra = model.backbone.aux_loss() if aux else None
    if extra is not None:
        loss = loss + extra
    return loss, batch


def batches(gen: Iterator[SyntheticSample], size: int) -> Iterator[list[SyntheticSample]]:
    while True:
        yield [next(gen) for _ in range(size)]


# ---------------------------------------------------------------------------
# stage runner


@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 1e-3
    steps: int = 200
    warmup: int = 10
    batch_size: int = 16
    seq_cap: int = 64
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")


@dataclass
class TrainLog:
    stage: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    final_eval_loss: float | None = None
    last_batch: list[SyntheticSample] | None = None
    optimizer: AdamState | None = None
    param_names: list[str] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["stage,step,lr,loss"]
        rows += [f"{self.stage},{i},{lr!r},{loss!r}" for i, (lr, loss) in enumerate(zip(self.lrs, self.losses))]
        if self.final_eval_loss is not None:
            rows.append(f"{self.stage},eval,,{self.final_eval_loss!r}")
        return "\n".join(rows) + "\n"


def clip_grads(grads: list[np.ndarray | None], max_norm: float) -> list[np.ndarray | None]:
    if max_norm <= 0:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return [None if g is None else g * scale for g in grads]


def run_stage(stage: int, model: MultimodalModel, cfg: TrainConfig, data: Iterable[list[SyntheticSample]],
              log_every: int = 0, mask: dict[str, bool] | None = None) -> TrainLog:
    """Train the groups enabled for ``stage``; frozen groups stay bit-identical."""
    if cfg.stage != stage:
        raise ValueError(f"config is for stage {cfg.stage}, asked to run stage {stage}")
    apply_freeze(model, mask or freeze_mask(stage))
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    decay = [not n.endswith(NO_DECAY_SUFFIXES) for n, _ in named]
    state = AdamState()
    log = TrainLog(stage, param_names=[n for n, _ in named])
    it = iter(data)
    samples = None
    for step in range(cfg.steps):
        samples = next(it)
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup)
        for p in params:
            p.grad = None
        try:
            loss, _ = batch_loss(model, samples, seq_cap=cfg.seq_cap)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value}")
            loss.backward()
        except NumericError as exc:
            raise NumericError(f"stage {stage} step {step}: {exc}") from exc
        grads = clip_grads([p.grad for p in params], cfg.grad_clip)
        adamw_step(params, grads, state, lr, cfg.betas, cfg.eps, cfg.weight_decay, decay)
        log.losses.append(value)
        log.lrs.append(lr)
        if log_every and step % log_every == 0:
            print(f"stage {stage} step {step:5d} lr {lr:.2e} loss {value:.4f}", flush=True)
    for p in params:
        p.grad = None
    if samples is not None:
        with no_grad():
            log.final_eval_loss = float(batch_loss(model, samples)[0].data)
    log.last_batch = samples
    log.optimizer = state
    for p in model.parameters():
        p.requires_grad = False
    return log


def eval_loss(model: MultimodalModel, samples: Sequence[SyntheticSample]) -> float:
    with no_grad():
        return float(batch_loss(model, samples)[0].data)


def answer_accuracy(model: MultimodalModel, samples: Sequence[SyntheticSample]) -> float:
    """Fraction of supervised positions where the argmax prediction is the target."""
    with no_grad():
        vis = model.visual_embeds(samples, "train")
        batch = collate(samples, 0 if vis is None else vis.shape[1])
        pred = model.backbone(batch.tokens, vis).data.argmax(-1)
    sel = batch.mask > 0
    return float((pred[sel] == batch.targets[sel]).mean())


# ---------------------------------------------------------------------------
# checkpoints


def _pack_samples(samples: Sequence[SyntheticSample]) -> dict[str, np.ndarray]:
    out = {
        "batch/text": np.stack([s.text for s in samples]),
        "batch/answer_mask": np.stack([s.answer_mask for s in samples]),
    }
    kind = samples[0].kind
    if kind == "image":
        out["batch/images"] = np.stack([s.visual.pixels for s in samples])
    elif kind == "video":
        out["batch/frames"] = np.stack([np.stack([f.pixels for f in s.visual]) for s in samples])
    return out


def _unpack_samples(z) -> list[SyntheticSample] | None:
    from .vision import Image

    if "batch/text" not in z:
        return None
    texts, masks = z["batch/text"], z["batch/answer_mask"]
    out = []
    for i in range(len(texts)):
        vis = None
        if "batch/images" in z:
            vis = Image(z["batch/images"][i])
        elif "batch/frames" in z:
            vis = [Image(f) for f in z["batch/frames"][i]]
        out.append(SyntheticSample(vis, texts[i], masks[i]))
    return out


def save_checkpoint(path: str | os.PathLike, model: MultimodalModel, config: dict,
                    log: TrainLog | None = None) -> None:
    meta = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "config": config}
    arrays: dict[str, np.ndarray] = {}
    names = []
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
        names.append(name)
    if log is not None:
        meta["stage"] = log.stage
        meta["final_eval_loss"] = log.final_eval_loss
        if log.optimizer is not None:
            meta["adam_t"] = log.optimizer.t
            for i, m in log.optimizer.m.items():
                name = log.param_names[i]
                arrays[f"adam/m/{name}"] = m
                arrays[f"adam/v/{name}"] = log.optimizer.v[i]
        if log.last_batch is not None:
            arrays.update(_pack_samples(log.last_batch))
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    adam: AdamState | None  # m/v keyed by parameter name
    last_batch: list[SyntheticSample] | None

    def optimizer_for(self, names: Sequence[str]) -> AdamState | None:
        """Re-key the saved moments to positions in ``names``."""
        if self.adam is None:
            return None
        pos = {n: i for i, n in enumerate(names)}
        return AdamState({pos[n]: m.copy() for n, m in self.adam.m.items() if n in pos},
                         {pos[n]: v.copy() for n, v in self.adam.v.items() if n in pos}, self.adam.t)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z:
            raise ValueError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: unknown format {meta.get('format')!r}")
        if meta.get("version") != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        adam = None
        if "adam_t" in meta:
            adam = AdamState(t=meta["adam_t"])
            for k in z.files:
                if k.startswith("adam/m/"):
                    name = k[len("adam/m/"):]
                    adam.m[name] = z[k]
                    adam.v[name] = z[f"adam/v/{name}"]
        batch = _unpack_samples(z)
    return Checkpoint(meta, params, adam, batch)


def restore_params(model: Module, ckpt: Checkpoint) -> None:
    model.load_state_dict(ckpt.params)


def model_from_config(config: dict, rng: Rng | None = None) -> MultimodalModel:
    """Instantiate a model from a resolved config dict (see :mod:`hybridmm.config`)."""
    from .config import stack_spec, vision_spec, adapter_spec

    seed = config.get("seed", 0)
    return MultimodalModel(stack_spec(config), vision_spec(config), adapter_spec(config), rng or Rng(seed))
