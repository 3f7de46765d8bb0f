"""Adaptation methods over the frozen backbone.

The history accumulator is the centerpiece: a client token and the running
CLS history (each level's original emission plus a learned level embedding)
go through the adapter's own transformer block(s); the first output position
feeds the shared prediction head, the last one becomes the CLS replacement
installed into the backbone stream. Baselines: per-level linear or MLP heads,
parallel bottleneck branches inside each block's MLP, and full fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import (BackboneConfig, ClsTrace, FrozenBackbone, block_forward,
                       count_backbone_params, count_block_params, forward_with_taps,
                       init_block, trunc_normal)
from .tensor import Parameter, Tensor, clone_parameters

METHOD_NAMES = ("accumulator", "lw_linear", "lw_mlp", "full_finetune")

LW_MLP_DROPOUT = 0.1
PA_DEFAULT_SCALE = 4.0


def default_pa_rank(width: int) -> int:
    return max(1, round(width / 6))


@dataclass(frozen=True)
class AdapterMethod:
    """Which parameters adapt, plus the ablation knobs."""

    name: str
    with_pa: bool = False
    depth: int = 1                     # accumulator blocks
    replace_enabled: bool = True
    residual_enabled: bool = True
    head_kind: str = "mlp"             # accumulator's shared head
    pa_rank: int | None = None         # None -> round(width / 6)
    pa_scale: float = PA_DEFAULT_SCALE
    replace_at_tokenizer: bool = True

    def __post_init__(self):
        if self.name not in METHOD_NAMES:
            raise ValueError(f"unknown method {self.name!r}, expected one of {METHOD_NAMES}")
        if self.depth < 1:
            raise ValueError("accumulator depth must be >= 1")
        if self.head_kind not in ("mlp", "linear"):
            raise ValueError(f"head_kind must be 'mlp' or 'linear', got {self.head_kind!r}")
        if self.pa_rank is not None and self.pa_rank < 1:
            raise ValueError("pa_rank must be >= 1")


@dataclass
class AccumulatorParams:
    """Client token, per-level embeddings, and the adapter's own block(s)."""

    width: int
    levels: int                 # backbone depth; embedding table has levels+1 rows
    depth: int
    num_heads: int
    mlp_ratio: int
    params: dict[str, Parameter] = field(repr=False)

    @classmethod
    def init(cls, cfg: BackboneConfig, depth: int = 1, seed: int = 0,
             dtype=np.float32) -> "AccumulatorParams":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 20)))
        d = cfg.width
        params = {
            "acc.client": Parameter(rng.normal(0.0, 0.02, size=d).astype(dtype), "acc.client"),
            "acc.levels": Parameter(
                rng.normal(0.0, 0.02, size=(cfg.depth + 1, d)).astype(dtype), "acc.levels"),
        }
        for i in range(depth):
            params.update(init_block(rng, d, cfg.mlp_ratio, f"acc.blocks.{i}", dtype))
            # zero the residual-branch output maps so each adapter block starts
            # as the identity; the replacement token then begins as the original
            # stream token plus its small level embedding instead of noise
            params[f"acc.blocks.{i}.attn.proj.w"].data[:] = 0.0
            params[f"acc.blocks.{i}.mlp.fc2.w"].data[:] = 0.0
        return cls(d, cfg.depth, depth, cfg.num_heads, cfg.mlp_ratio, params)


@dataclass
class HeadParams:
    """The shared exit head: two-layer GELU MLP or a single linear map."""

    kind: str
    params: dict[str, Parameter] = field(repr=False)

    @classmethod
    def init(cls, cfg: BackboneConfig, num_classes: int, kind: str = "mlp",
             seed: int = 0, dtype=np.float32) -> "HeadParams":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 21)))
        d, h = cfg.width, cfg.mlp_ratio * cfg.width
        if kind == "linear":
            params = {
                "head.w": Parameter(trunc_normal(rng, (d, num_classes)).astype(dtype), "head.w"),
                "head.b": Parameter(np.zeros(num_classes, dtype=dtype), "head.b"),
            }
        else:
            params = {
                "head.fc1.w": Parameter(trunc_normal(rng, (d, h)).astype(dtype), "head.fc1.w"),
                "head.fc1.b": Parameter(np.zeros(h, dtype=dtype), "head.fc1.b"),
                "head.fc2.w": Parameter(trunc_normal(rng, (h, num_classes)).astype(dtype), "head.fc2.w"),
                "head.fc2.b": Parameter(np.zeros(num_classes, dtype=dtype), "head.fc2.b"),
            }
        return cls(kind, params)

    def forward(self, feat: Tensor) -> Tensor:
        p = self.params
        if self.kind == "linear":
            return T.add(T.matmul(feat, p["head.w"]), p["head.b"])
        h = T.gelu(T.add(T.matmul(feat, p["head.fc1.w"]), p["head.fc1.b"]))
        return T.add(T.matmul(h, p["head.fc2.w"]), p["head.fc2.b"])


@dataclass
class LayerwiseHeads:
    """One head per exit level (1..levels). MLP heads carry train-time dropout."""

    kind: str                   # "linear" | "mlp"
    levels: int
    dropout: float
    params: dict[str, Parameter] = field(repr=False)

    @classmethod
    def init(cls, cfg: BackboneConfig, num_classes: int, kind: str,
             seed: int = 0, dtype=np.float32) -> "LayerwiseHeads":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 22)))
        d, h = cfg.width, cfg.mlp_ratio * cfg.width
        params = {}
        for lv in range(1, cfg.depth + 1):
            if kind == "linear":
                params[f"lw.{lv}.w"] = Parameter(
                    trunc_normal(rng, (d, num_classes)).astype(dtype), f"lw.{lv}.w")
                params[f"lw.{lv}.b"] = Parameter(np.zeros(num_classes, dtype=dtype), f"lw.{lv}.b")
            else:
                params[f"lw.{lv}.fc1.w"] = Parameter(
                    trunc_normal(rng, (d, h)).astype(dtype), f"lw.{lv}.fc1.w")
                params[f"lw.{lv}.fc1.b"] = Parameter(np.zeros(h, dtype=dtype), f"lw.{lv}.fc1.b")
                params[f"lw.{lv}.fc2.w"] = Parameter(
                    trunc_normal(rng, (h, num_classes)).astype(dtype), f"lw.{lv}.fc2.w")
                params[f"lw.{lv}.fc2.b"] = Parameter(np.zeros(num_classes, dtype=dtype), f"lw.{lv}.fc2.b")
        return cls(kind, cfg.depth, LW_MLP_DROPOUT if kind == "mlp" else 0.0, params)

    def forward(self, level: int, feat: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        if not (1 <= level <= self.levels):
            raise ValueError(f"level must be in [1, {self.levels}], got {level}")
        p = self.params
        if self.kind == "linear":
            return T.add(T.matmul(feat, p[f"lw.{level}.w"]), p[f"lw.{level}.b"])
        h = T.gelu(T.add(T.matmul(feat, p[f"lw.{level}.fc1.w"]), p[f"lw.{level}.fc1.b"]))
        if train and self.dropout > 0.0:
            if rng is None:
                raise ValueError("training forward through an MLP head needs an rng for dropout")
            h = T.dropout(h, self.dropout, rng, training=True)
        return T.add(T.matmul(h, p[f"lw.{level}.fc2.w"]), p[f"lw.{level}.fc2.b"])


@dataclass
class ParallelAdapterParams:
    """Per-block bottleneck branches, up-projection zero-initialized so the
    branch starts as an exact no-op."""

    rank: int
    scale: float
    levels: int
    params: dict[str, Parameter] = field(repr=False)

    @classmethod
    def init(cls, cfg: BackboneConfig, rank: int | None = None,
             scale: float = PA_DEFAULT_SCALE, seed: int = 0,
             dtype=np.float32) -> "ParallelAdapterParams":
        r = default_pa_rank(cfg.width) if rank is None else rank
        rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
        d = cfg.width
        params = {}
        for i in range(cfg.depth):
            params[f"pa.{i}.down.w"] = Parameter(
                trunc_normal(rng, (d, r)).astype(dtype), f"pa.{i}.down.w")
            params[f"pa.{i}.down.b"] = Parameter(np.zeros(r, dtype=dtype), f"pa.{i}.down.b")
            params[f"pa.{i}.up.w"] = Parameter(np.zeros((r, d), dtype=dtype), f"pa.{i}.up.w")
            params[f"pa.{i}.up.b"] = Parameter(np.zeros(d, dtype=dtype), f"pa.{i}.up.b")
        return cls(r, scale, cfg.depth, params)


def pa_forward(pa: ParallelAdapterParams, level: int, x: Tensor) -> Tensor:
    """scale * Up(GELU(Down(x))) for the branch of block `level` (1-based)."""
    if not (1 <= level <= pa.levels):
        raise ValueError(f"level must be in [1, {pa.levels}], got {level}")
    p = pa.params
    i = level - 1
    h = T.gelu(T.add(T.matmul(x, p[f"pa.{i}.down.w"]), p[f"pa.{i}.down.b"]))
    return T.scale(T.add(T.matmul(h, p[f"pa.{i}.up.w"]), p[f"pa.{i}.up.b"]), pa.scale)


def accumulate(acc: AccumulatorParams, trace: ClsTrace) -> Tensor:
    """Adapter block(s) over [client, cls_0 + e_0, ..., cls_l + e_l] -> (B, l+2, d)."""
    if len(trace) == 0:
        raise ValueError("empty trace")
    if len(trace) > acc.levels + 1:
        raise ValueError(f"trace has {len(trace)} levels, adapter supports {acc.levels + 1}")
    b = trace[0].data.shape[0]
    toks = [T.expand_row(acc.params["acc.client"], b)]
    for j in range(len(trace)):
        toks.append(T.add(trace[j], T.take(acc.params["acc.levels"], j, axis=0)))
    h = T.stack_tokens(toks)
    for i in range(acc.depth):
        h = block_forward(acc.params, f"acc.blocks.{i}", h, acc.num_heads)
    return h


def replacement_token(h: Tensor) -> Tensor:
    """The last position of the accumulator output: the token installed back
    into the backbone stream."""
    return T.token_at(h, h.data.shape[-2] - 1)


def predict_at_exit(acc: AccumulatorParams, head: HeadParams, trace: ClsTrace,
                    residual_enabled: bool = True) -> Tensor:
    """Exit logits from a trace: head(lead [+ original CLS at the exit level])."""
    h = accumulate(acc, trace)
    lead = T.token_at(h, 0)
    feat = T.add(lead, trace[len(trace) - 1]) if residual_enabled else lead
    return head.forward(feat)


# ------------------------------------------------------------ param counting


def count_accumulator_params(cfg: BackboneConfig, depth: int = 1) -> int:
    d = cfg.width
    return d + (cfg.depth + 1) * d + depth * count_block_params(d, cfg.mlp_ratio)


def count_shared_head_params(cfg: BackboneConfig, num_classes: int, kind: str = "mlp") -> int:
    d, h = cfg.width, cfg.mlp_ratio * cfg.width
    if kind == "linear":
        return d * num_classes + num_classes
    return d * h + h + h * num_classes + num_classes


def count_lw_head_params(cfg: BackboneConfig, num_classes: int, kind: str) -> int:
    d, h = cfg.width, cfg.mlp_ratio * cfg.width
    if kind == "linear":
        per = d * num_classes + num_classes
    else:
        per = d * h + h + h * num_classes + num_classes
    return cfg.depth * per


def count_pa_params(cfg: BackboneConfig, rank: int | None = None) -> int:
    r = default_pa_rank(cfg.width) if rank is None else rank
    d = cfg.width
    return cfg.depth * (d * r + r + r * d + d)


def count_client_token_params(cfg: BackboneConfig) -> int:
    return cfg.width


def count_trainable_params(method: AdapterMethod, cfg: BackboneConfig, num_classes: int) -> int:
    """Trainable parameters a client holds and a round transmits, per method."""
    if method.name == "accumulator":
        n = (count_accumulator_params(cfg, method.depth)
             + count_shared_head_params(cfg, num_classes, method.head_kind))
    elif method.name == "lw_linear":
        n = count_lw_head_params(cfg, num_classes, "linear")
    elif method.name == "lw_mlp":
        n = count_lw_head_params(cfg, num_classes, "mlp")
    else:  # full_finetune
        n = count_backbone_params(cfg) + count_lw_head_params(cfg, num_classes, "mlp")
    if method.with_pa:
        n += count_pa_params(cfg, method.pa_rank)
    return n


def exit_budget(method: AdapterMethod, cfg: BackboneConfig, num_classes: int,
                level: int) -> dict[str, int]:
    """Parameters touched and MACs spent producing exit-`level` logits for one
    image. Both grow strictly with the level."""
    if not (1 <= level <= cfg.depth):
        raise ValueError(f"level must be in [1, {cfg.depth}], got {level}")
    d, ratio = cfg.width, cfg.mlp_ratio
    h = ratio * d
    t = cfg.num_patches + 1

    def block_macs(tokens: int) -> int:
        attn = tokens * d * 3 * d + 2 * tokens * tokens * d + tokens * d * d
        mlp = tokens * d * h + tokens * h * d
        return attn + mlp

    params = cfg.patch_dim * d + d + (cfg.num_patches + 1) * d + d  # tok + pos + cls
    params += level * count_block_params(d, ratio)
    macs = cfg.num_patches * cfg.patch_dim * d + level * block_macs(t)

    if method.name == "accumulator":
        params += d + (level + 1) * d  # client token + level embeddings 0..level
        params += method.depth * count_block_params(d, ratio)
        params += count_shared_head_params(cfg, num_classes, method.head_kind)
        start = 0 if method.replace_at_tokenizer else 1
        acc_levels = range(start, level + 1) if method.replace_enabled else [level]
        for lv in acc_levels:
            macs += method.depth * block_macs(lv + 2)
        if method.head_kind == "linear":
            macs += d * num_classes
        else:
            macs += d * h + h * num_classes
    else:
        kind = "linear" if method.name == "lw_linear" else "mlp"
        per = d * num_classes + num_classes if kind == "linear" else d * h + h + h * num_classes + num_classes
        params += per
        macs += d * num_classes if kind == "linear" else d * h + h * num_classes

    if method.with_pa:
        r = default_pa_rank(d) if method.pa_rank is None else method.pa_rank
        params += level * (d * r + r + r * d + d)
        macs += level * (t * d * r + t * r * d)
    return {"params": params, "macs": macs}


# ------------------------------------------------------------ model assembly


class AdapterModel:
    """One backbone plus one adaptation method; owns the trainable parameters.

    The backbone stays shared and frozen for every method except full
    fine-tuning, which clones it into trainable parameters.
    """

    def __init__(self, bb: FrozenBackbone, method: AdapterMethod, num_classes: int,
                 seed: int = 0, dtype=np.float32):
        self.config = bb.config
        self.method = method
        self.num_classes = num_classes
        self.acc: AccumulatorParams | None = None
        self.head: HeadParams | None = None
        self.lw: LayerwiseHeads | None = None
        self.pa: ParallelAdapterParams | None = None

        if method.name == "full_finetune":
            self.bb_params = clone_parameters(bb.params, trainable=True)
        else:
            self.bb_params = bb.params

        if method.name == "accumulator":
            self.acc = AccumulatorParams.init(bb.config, method.depth, seed=seed, dtype=dtype)
            self.head = HeadParams.init(bb.config, num_classes, method.head_kind,
                                        seed=seed, dtype=dtype)
        elif method.name == "lw_linear":
            self.lw = LayerwiseHeads.init(bb.config, num_classes, "linear", seed=seed, dtype=dtype)
        else:
            self.lw = LayerwiseHeads.init(bb.config, num_classes, "mlp", seed=seed, dtype=dtype)

        if method.with_pa:
            self.pa = ParallelAdapterParams.init(bb.config, method.pa_rank, method.pa_scale,
                                                 seed=seed, dtype=dtype)

    # -- parameter access

    def trainable_params(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for group in (self.bb_params,
                      self.acc.params if self.acc else {},
                      self.head.params if self.head else {},
                      self.lw.params if self.lw else {},
                      self.pa.params if self.pa else {}):
            for name, p in group.items():
                if p.trainable:
                    out[name] = p
        return out

    def count_trainable(self) -> int:
        return sum(p.data.size for p in self.trainable_params().values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.trainable_params().items()}

    def full_state(self) -> dict[str, np.ndarray]:
        """Snapshot of every method-owned parameter, trainable or not. The
        backbone is included only when this model holds its own copy."""
        out: dict[str, np.ndarray] = {}
        groups = [self.acc.params if self.acc else {},
                  self.head.params if self.head else {},
                  self.lw.params if self.lw else {},
                  self.pa.params if self.pa else {}]
        if any(p.trainable for p in self.bb_params.values()):
            groups.insert(0, self.bb_params)
        for group in groups:
            for name, p in group.items():
                out[name] = p.data.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.trainable_params()
        missing = sorted(set(own) - set(state))
        unknown = sorted(set(state) - set(own))
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {missing[:3]}, unknown {unknown[:3]}")
        for name, arr in state.items():
            p = own[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr

    # -- forward passes

    def _mlp_extra(self):
        if self.pa is None:
            return None
        return lambda level, m_in: pa_forward(self.pa, level, m_in)

    def logits_at_exit(self, x: np.ndarray, level: int, train: bool = False,
                       rng: np.random.Generator | None = None) -> Tensor:
        m = self.method
        if m.name == "accumulator":
            tap = None
            if m.replace_enabled:
                def tap(lv, trace):
                    return replacement_token(accumulate(self.acc, trace))
            _, trace = forward_with_taps(self.config, self.bb_params, x, level, tap=tap,
                                         mlp_extra=self._mlp_extra(),
                                         replace_at_tokenizer=m.replace_at_tokenizer)
            return predict_at_exit(self.acc, self.head, trace, m.residual_enabled)
        _, trace = forward_with_taps(self.config, self.bb_params, x, level,
                                     mlp_extra=self._mlp_extra())
        return self.lw.forward(level, trace[level], train=train, rng=rng)

    def logits_all_exits(self, x: np.ndarray, train: bool = False,
                         rng: np.random.Generator | None = None) -> list[Tensor]:
        """Logits for every exit 1..depth from one pass over the stream."""
        m = self.method
        depth = self.config.depth
        if m.name == "accumulator":
            hs: dict[int, Tensor] = {}

            def tap(lv, trace):
                h = accumulate(self.acc, trace)
                hs[lv] = h
                return replacement_token(h) if m.replace_enabled else None

            _, trace = forward_with_taps(self.config, self.bb_params, x, depth, tap=tap,
                                         mlp_extra=self._mlp_extra(),
                                         replace_at_tokenizer=m.replace_at_tokenizer)
            hs[depth] = accumulate(self.acc, trace)
            out = []
            for lv in range(1, depth + 1):
                h = hs.get(lv)
                if h is None:
                    h = accumulate(self.acc, ClsTrace(trace.tokens[:lv + 1]))
                lead = T.token_at(h, 0)
                feat = T.add(lead, trace[lv]) if m.residual_enabled else lead
                out.append(self.head.forward(feat))
            return out
        _, trace = forward_with_taps(self.config, self.bb_params, x, depth,
                                     mlp_extra=self._mlp_extra())
        return [self.lw.forward(lv, trace[lv], train=train, rng=rng)
                for lv in range(1, depth + 1)]

    def loss_at_exit(self, x: np.ndarray, y: np.ndarray, level: int, train: bool = True,
                     rng: np.random.Generator | None = None) -> Tensor:
        return T.cross_entropy(self.logits_at_exit(x, level, train=train, rng=rng), y)


def build_model(bb: FrozenBackbone, method: AdapterMethod, num_classes: int,
                seed: int = 0, dtype=np.float32) -> AdapterModel:
    return AdapterModel(bb, method, num_classes, seed=seed, dtype=dtype)


def method_from_name(name: str, **kw) -> AdapterMethod:
    return AdapterMethod(name=name, **kw)


def with_depth(method: AdapterMethod, depth: int) -> AdapterMethod:
    return replace(method, depth=depth)
