"""Frozen vision-transformer backbone.

Pre-norm blocks over patch tokens plus a CLS token: the stream enters each
block, attention and MLP branches are applied with residuals, and the CLS
position is recorded at every level. forward_with_taps exposes a hook that
may swap the CLS token in the running stream between levels, which is how
adapters install their replacement token; the recorded trace always holds the
original emissions, taken before any swap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Dataset
from .optim import SgdConfig, lr_at, sgd_step
from .tensor import Parameter, Tape, Tensor, backward


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 4
    width: int = 32
    num_heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 4
    image_size: int = 16
    channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.num_heads != 0:
            raise ValueError(f"width {self.width} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


TOY = BackboneConfig()

# matches the 12x384 small-transformer shape used for parameter accounting
DEIT_SMALL_SHAPE = BackboneConfig(depth=12, width=384, num_heads=6, mlp_ratio=4,
                                  patch_size=16, image_size=224, channels=3)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    """Normal(0, std) with draws beyond bound*std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def xavier_normal(rng: np.random.Generator, shape):
    """Fan-scaled init for the block linear maps; keeps signal magnitude
    usable at small widths where a fixed std would be near-zero."""
    fan_in, fan_out = shape[0], shape[1]
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def init_block(rng: np.random.Generator, width: int, mlp_ratio: int, prefix: str,
               dtype=np.float32) -> dict[str, Parameter]:
    d, h = width, mlp_ratio * width

    def p(name, value):
        return Parameter(np.asarray(value, dtype=dtype), f"{prefix}.{name}")

    return {
        f"{prefix}.ln1.g": p("ln1.g", np.ones(d)),
        f"{prefix}.ln1.b": p("ln1.b", np.zeros(d)),
        f"{prefix}.attn.qkv.w": p("attn.qkv.w", xavier_normal(rng, (d, 3 * d))),
        f"{prefix}.attn.qkv.b": p("attn.qkv.b", np.zeros(3 * d)),
        f"{prefix}.attn.proj.w": p("attn.proj.w", xavier_normal(rng, (d, d))),
        f"{prefix}.attn.proj.b": p("attn.proj.b", np.zeros(d)),
        f"{prefix}.ln2.g": p("ln2.g", np.ones(d)),
        f"{prefix}.ln2.b": p("ln2.b", np.zeros(d)),
        f"{prefix}.mlp.fc1.w": p("mlp.fc1.w", xavier_normal(rng, (d, h))),
        f"{prefix}.mlp.fc1.b": p("mlp.fc1.b", np.zeros(h)),
        f"{prefix}.mlp.fc2.w": p("mlp.fc2.w", xavier_normal(rng, (h, d))),
        f"{prefix}.mlp.fc2.b": p("mlp.fc2.b", np.zeros(d)),
    }


def block_forward(params, prefix: str, z: Tensor, num_heads: int,
                  mlp_extra: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Pre-norm transformer block. mlp_extra(m_in) is added to the MLP branch
    output before its residual; adapters use it for parallel branches."""
    a = T.layer_norm(z, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    att = T.multi_head_attention(a, params[f"{prefix}.attn.qkv.w"], params[f"{prefix}.attn.qkv.b"],
                                 params[f"{prefix}.attn.proj.w"], params[f"{prefix}.attn.proj.b"],
                                 num_heads)
    z = T.add(z, att)
    m_in = T.layer_norm(z, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.gelu(T.add(T.matmul(m_in, params[f"{prefix}.mlp.fc1.w"]), params[f"{prefix}.mlp.fc1.b"]))
    m = T.add(T.matmul(h, params[f"{prefix}.mlp.fc2.w"]), params[f"{prefix}.mlp.fc2.b"])
    if mlp_extra is not None:
        m = T.add(m, mlp_extra(m_in))
    return T.add(z, m)


def init_backbone(cfg: BackboneConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 10)))
    d = cfg.width
    params = {
        "tok.w": Parameter(xavier_normal(rng, (cfg.patch_dim, d)).astype(dtype), "tok.w"),
        "tok.b": Parameter(np.zeros(d, dtype=dtype), "tok.b"),
        "cls": Parameter(rng.normal(0.0, 0.02, size=d).astype(dtype), "cls"),
        "pos": Parameter(rng.normal(0.0, 0.02, size=(cfg.num_patches + 1, d)).astype(dtype), "pos"),
    }
    for i in range(cfg.depth):
        params.update(init_block(rng, d, cfg.mlp_ratio, f"blocks.{i}", dtype))
    params["final_norm.g"] = Parameter(np.ones(d, dtype=dtype), "final_norm.g")
    params["final_norm.b"] = Parameter(np.zeros(d, dtype=dtype), "final_norm.b")
    return params


def extract_patches(x: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*P*P), patches in row-major order."""
    b, c, hh, ww = x.shape
    p = patch_size
    gh, gw = hh // p, ww // p
    out = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(out).reshape(b, gh * gw, c * p * p)


class ClsTrace:
    """Ordered original CLS emissions; index 0 is the tokenizer-level token,
    index l the emission of block l."""

    __slots__ = ("tokens",)

    def __init__(self, tokens=None):
        self.tokens = list(tokens) if tokens else []

    def append(self, tok: Tensor) -> None:
        self.tokens.append(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, i) -> Tensor:
        return self.tokens[i]

    @property
    def level(self) -> int:
        return len(self.tokens) - 1


TapFn = Callable[[int, ClsTrace], "Tensor | None"]


MlpExtraFn = Callable[[int, Tensor], Tensor]


def forward_with_taps(cfg: BackboneConfig, params, x: np.ndarray, upto_layer: int,
                      tap: TapFn | None = None, mlp_extra: MlpExtraFn | None = None,
                      replace_at_tokenizer: bool = True) -> tuple[Tensor, ClsTrace]:
    """Run the stream through blocks 1..upto_layer.

    After the tokenizer (level 0) and after each block below upto_layer the
    trace gains the level's CLS token and, if tap returns a replacement, the
    stream's CLS position is swapped before the next block. Computation never
    touches blocks above upto_layer, so exit-l results cannot depend on them.
    """
    if not (1 <= upto_layer <= cfg.depth):
        raise ValueError(f"upto_layer must be in [1, {cfg.depth}], got {upto_layer}")
    dtype = params["tok.w"].data.dtype
    if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError(f"input shape {x.shape[1:]} does not match backbone config")
    patches = extract_patches(np.asarray(x, dtype=dtype), cfg.patch_size)
    tok = T.add(T.matmul(Tensor(patches), params["tok.w"]), params["tok.b"])
    z = T.add(T.prepend_token(params["cls"], tok), params["pos"])

    trace = ClsTrace()
    trace.append(T.token_at(z, 0))
    if tap is not None and replace_at_tokenizer:
        repl = tap(0, trace)
        if repl is not None:
            z = T.with_token(z, 0, repl)

    for level in range(1, upto_layer + 1):
        extra = None
        if mlp_extra is not None:
            lv = level
            extra = lambda m_in, _lv=lv: mlp_extra(_lv, m_in)  # noqa: E731
        z = block_forward(params, f"blocks.{level - 1}", z, cfg.num_heads, mlp_extra=extra)
        trace.append(T.token_at(z, 0))
        if tap is not None and level < upto_layer:
            repl = tap(level, trace)
            if repl is not None:
                z = T.with_token(z, 0, repl)
    return z, trace


@dataclass
class FrozenBackbone:
    config: BackboneConfig
    params: dict[str, Parameter] = field(repr=False)

    def __post_init__(self):
        for p in self.params.values():
            if p.trainable:
                raise ValueError(f"backbone parameter {p.name} is trainable; freeze first")


def count_block_params(width: int, mlp_ratio: int) -> int:
    d, h = width, mlp_ratio * width
    attn = (d * 3 * d + 3 * d) + (d * d + d)
    mlp = (d * h + h) + (h * d + d)
    return 2 * d + attn + 2 * d + mlp


def count_backbone_params(cfg: BackboneConfig) -> int:
    d = cfg.width
    tok = cfg.patch_dim * d + d
    pos = (cfg.num_patches + 1) * d
    return tok + pos + d + cfg.depth * count_block_params(d, cfg.mlp_ratio) + 2 * d


def _cls_logits(cfg, params, head_w, head_b, x) -> Tensor:
    stream, _ = forward_with_taps(cfg, params, x, cfg.depth)
    cls = T.token_at(T.layer_norm(stream, params["final_norm.g"], params["final_norm.b"]), 0)
    return T.add(T.matmul(cls, head_w), head_b)


def pretrain_backbone(cfg: BackboneConfig, data: Dataset, *, epochs: int = 3,
                      batch_size: int = 32, base_lr: float = 0.1, min_lr: float = 0.0,
                      seed: int = 0, holdout_fraction: float = 0.1,
                      accuracy_floor: float = 0.90, dtype=np.float32,
                      ) -> tuple[FrozenBackbone, dict]:
    """Supervised pretraining on a synthetic task, then freeze.

    A temporary linear head is trained jointly and discarded. epochs=0 freezes
    the random initialization (ablation path). Falling short of accuracy_floor
    on the holdout warns; it does not fail.
    """
    if data.inputs.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ValueError("pretraining data does not match the backbone input shape")
    params = init_backbone(cfg, seed=seed, dtype=dtype)
    head_rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    head = {
        "pretrain_head.w": Parameter(
            trunc_normal(head_rng, (cfg.width, data.num_classes)).astype(dtype), "pretrain_head.w"),
        "pretrain_head.b": Parameter(np.zeros(data.num_classes, dtype=dtype), "pretrain_head.b"),
    }
    trainable = {**params, **head}

    split_rng = np.random.default_rng(np.random.SeedSequence((seed, 12)))
    perm = split_rng.permutation(len(data))
    n_hold = max(1, int(round(holdout_fraction * len(data))))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]

    steps_per_epoch = max(1, len(train_idx) // batch_size)
    sgd = SgdConfig(base_lr=base_lr, min_lr=min_lr, total_steps=max(1, epochs * steps_per_epoch))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))

    step = 0
    last_loss = float("nan")
    for _ in range(epochs):
        order = shuffle_rng.permutation(train_idx)
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            if idx.size == 0:
                continue
            with Tape() as tape:
                logits = _cls_logits(cfg, params, head["pretrain_head.w"],
                                     head["pretrain_head.b"], data.inputs[idx])
                loss = T.cross_entropy(logits, data.labels[idx])
            backward(tape, loss)
            sgd_step(trainable, lr_at(step, sgd))
            last_loss = loss.item()
            step += 1

    correct = 0
    for b in range(0, len(hold_idx), 256):
        idx = hold_idx[b:b + 256]
        logits = _cls_logits(cfg, params, head["pretrain_head.w"],
                             head["pretrain_head.b"], data.inputs[idx])
        correct += int((np.argmax(logits.data, axis=1) == data.labels[idx]).sum())
    acc = correct / max(1, len(hold_idx))
    if epochs > 0 and acc < accuracy_floor:
        warnings.warn(f"pretraining holdout accuracy {acc:.3f} below floor {accuracy_floor}")

    for p in params.values():
        p.freeze()
    metrics = {"holdout_accuracy": acc, "final_train_loss": last_loss, "steps": step}
    return FrozenBackbone(cfg, params), metrics
