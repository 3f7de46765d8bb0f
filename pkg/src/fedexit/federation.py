"""Federated training over client shards.

Each round samples a fixed fraction of clients, runs local SGD on each
client's shard at the exit its profile dictates, and aggregates the updates
with a shard-size-weighted mean over the sampled clients. Aggregation is
anchored at the first update so that identical inputs reproduce bitwise.
Every client draws its randomness from (seed, round, client_id), so results
do not depend on worker-thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .adapters import AdapterMethod, AdapterModel, build_model
from .backbone import FrozenBackbone
from .data import ClientShard, CorruptionSpec, Dataset, corrupt
from .optim import SgdConfig, lr_at, sgd_step
from .tensor import NumericError, Tape, backward, clone_parameters

SETTINGS = ("conventional", "anytime", "multitier")
PERSONALIZATION_MODES = ("full_adapter", "client_token_only", "pa_only", "full_model")


@dataclass(frozen=True)
class ClientProfile:
    """tier is the deepest exit the client can run; exit_policy is how the
    training exit is drawn ('fixed' at tier, or 'uniform' over 1..tier)."""

    client_id: int
    tier: int
    exit_policy: str

    def __post_init__(self):
        if self.exit_policy not in ("fixed", "uniform"):
            raise ValueError(f"exit_policy must be 'fixed' or 'uniform', got {self.exit_policy!r}")
        if self.tier < 1:
            raise ValueError("tier must be >= 1")


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int
    rounds: int
    sample_fraction: float = 0.1
    local_epochs: int = 1
    batch_size: int = 10
    setting: str = "multitier"
    seed: int = 0
    eval_every: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")
        if self.eval_every < 1 or self.jobs < 1:
            raise ValueError("eval_every and jobs must be >= 1")


@dataclass
class GlobalState:
    round: int
    params: dict[str, np.ndarray] = field(repr=False)


@dataclass
class RoundReport:
    round: int
    client_ids: list[int]
    failed_clients: list[int]
    transmitted_params: int        # uplink + downlink for the round
    cumulative_oneway_params: int  # rounds so far x per-round parameter count
    mean_train_loss: float
    exit_accuracy: list[float] | None = None
    mean_accuracy: float | None = None


def sample_clients(num_clients: int, fraction: float, round_idx: int, seed: int) -> list[int]:
    """ceil(K * fraction) distinct ids for one round, keyed by (seed, round)."""
    # the 1e-9 slack keeps binary-float noise (0.1 * 100 == 10.000000000000002)
    # from inflating the ceil
    k = max(1, math.ceil(num_clients * fraction - 1e-9))
    k = min(k, num_clients)
    rng = np.random.default_rng(np.random.SeedSequence((seed, round_idx, 40)))
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


def assign_tiers(num_clients: int, depth: int, seed: int) -> list[int]:
    """Deterministic near-balanced tier assignment over 1..depth."""
    if num_clients < depth:
        raise ValueError(f"cannot spread {depth} tiers over {num_clients} clients")
    base, extra = divmod(num_clients, depth)
    counts = [base + (1 if t < extra else 0) for t in range(depth)]
    pool = [t + 1 for t, c in enumerate(counts) for _ in range(c)]
    rng = np.random.default_rng(np.random.SeedSequence((seed, 41)))
    return [int(pool[i]) for i in rng.permutation(num_clients)]


def make_profiles(fed: FederationConfig, depth: int) -> list[ClientProfile]:
    if fed.setting == "conventional":
        return [ClientProfile(i, depth, "fixed") for i in range(fed.num_clients)]
    if fed.setting == "anytime":
        return [ClientProfile(i, depth, "uniform") for i in range(fed.num_clients)]
    tiers = assign_tiers(fed.num_clients, depth, fed.seed)
    return [ClientProfile(i, tiers[i], "fixed") for i in range(fed.num_clients)]


def local_train(model: AdapterModel, ds: Dataset, shard: ClientShard,
                profile: ClientProfile, round_idx: int, fed: FederationConfig,
                sgd: SgdConfig) -> tuple[dict[str, np.ndarray], int, float]:
    """One client's local pass; returns (new state, shard size, mean loss)."""
    rng = np.random.default_rng(np.random.SeedSequence((fed.seed, round_idx, profile.client_id)))
    lr = lr_at(round_idx, sgd)
    trainable = model.trainable_params()
    losses = []
    velocity = None
    for _ in range(fed.local_epochs):
        order = shard.indices[rng.permutation(len(shard.indices))]
        for b in range(0, len(order), fed.batch_size):
            idx = order[b:b + fed.batch_size]
            if profile.exit_policy == "uniform":
                level = int(rng.integers(1, profile.tier + 1))
            else:
                level = profile.tier
            with Tape() as tape:
                loss = model.loss_at_exit(ds.inputs[idx], ds.labels[idx], level,
                                          train=True, rng=rng)
            backward(tape, loss)
            velocity = sgd_step(trainable, lr, momentum=sgd.momentum,
                                weight_decay=sgd.weight_decay, velocity=velocity)
            losses.append(loss.item())
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return model.state(), len(shard), mean_loss


def fedavg(updates: list[tuple[int, dict[str, np.ndarray], int]]) -> dict[str, np.ndarray]:
    """Shard-size-weighted mean of client states.

    Computed in float64 as anchor + sum_i w_i (x_i - anchor) with the anchor
    being the lowest client id's update: algebraically the weighted mean, and
    identical updates come back bitwise identical.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    ordered = sorted(updates, key=lambda u: u[0])
    ids = [u[0] for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in updates: {ids}")
    total = sum(u[2] for u in ordered)
    if total <= 0:
        raise ValueError("total weight must be positive")
    anchor = ordered[0][1]
    out = {}
    for name in sorted(anchor):
        base = anchor[name].astype(np.float64, copy=True)
        acc = np.zeros_like(base)
        for _, state, n in ordered[1:]:
            if name not in state:
                raise KeyError(f"update missing parameter {name!r}")
            acc += (n / total) * (state[name].astype(np.float64) - base)
        out[name] = (base + acc).astype(anchor[name].dtype)
    return out


def evaluate_all_exits(model: AdapterModel, ds: Dataset,
                       batch_size: int = 256) -> tuple[list[float], float]:
    """Accuracy at every exit over a dataset; ties in argmax resolve to the
    lowest class index."""
    depth = model.config.depth
    correct = np.zeros(depth, dtype=np.int64)
    for b in range(0, len(ds), batch_size):
        x = ds.inputs[b:b + batch_size]
        y = ds.labels[b:b + batch_size]
        for lv, logits in enumerate(model.logits_all_exits(x)):
            pred = np.argmax(logits.data, axis=1)
            correct[lv] += int((pred == y).sum())
    accs = [float(c) / len(ds) for c in correct]
    return accs, float(np.mean(accs))


def comms_cost(rounds: int, per_round_params: int) -> int:
    """Cumulative transmitted parameters, single direction."""
    return rounds * per_round_params


def format_comms(rounds: int, per_round_params: int) -> str:
    """rounds x millions-of-parameters, the shorthand used in result tables."""
    return f"{rounds}x{per_round_params / 1e6:.2f}"


def run_federation(bb: FrozenBackbone, method: AdapterMethod, num_classes: int,
                   train_ds: Dataset, shards: list[ClientShard], test_ds: Dataset | None,
                   fed: FederationConfig, sgd: SgdConfig, init_seed: int = 0,
                   dtype=np.float32,
                   on_round: Callable[[RoundReport], None] | None = None,
                   ) -> tuple[GlobalState, list[RoundReport]]:
    """The server loop. Returns the final global state and per-round reports."""
    if len(shards) != fed.num_clients:
        raise ValueError(f"{fed.num_clients} clients configured but {len(shards)} shards given")
    depth = bb.config.depth
    profiles = make_profiles(fed, depth)
    server = build_model(bb, method, num_classes, seed=init_seed, dtype=dtype)
    state = server.state()
    per_round = server.count_trainable()

    def client_task(round_idx: int, cid: int):
        m = build_model(bb, method, num_classes, seed=init_seed, dtype=dtype)
        m.load_state(state)
        return local_train(m, train_ds, shards[cid], profiles[cid], round_idx, fed, sgd)

    reports: list[RoundReport] = []
    for r in range(fed.rounds):
        ids = sample_clients(fed.num_clients, fed.sample_fraction, r, fed.seed)
        results: list[tuple[int, dict, int]] = []
        losses = []
        failed = []
        if fed.jobs > 1:
            with ThreadPoolExecutor(max_workers=fed.jobs) as pool:
                outs = list(pool.map(lambda c: _safe_task(client_task, r, c), ids))
        else:
            outs = [_safe_task(client_task, r, c) for c in ids]
        for cid, out in zip(ids, outs):
            if out is None:
                failed.append(cid)
                continue
            st, n, loss = out
            results.append((cid, st, n))
            losses.append(loss)
        if results:
            state = fedavg(results)
        report = RoundReport(
            round=r,
            client_ids=ids,
            failed_clients=failed,
            transmitted_params=2 * len(ids) * per_round,
            cumulative_oneway_params=comms_cost(r + 1, per_round),
            mean_train_loss=float(np.mean(losses)) if losses else float("nan"),
        )
        if test_ds is not None and ((r + 1) % fed.eval_every == 0 or r == fed.rounds - 1):
            server.load_state(state)
            report.exit_accuracy, report.mean_accuracy = evaluate_all_exits(server, test_ds)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return GlobalState(fed.rounds, state), reports


def _safe_task(fn, round_idx: int, cid: int):
    # a non-finite loss or gradient aborts the client's round, not the run
    try:
        return fn(round_idx, cid)
    except NumericError:
        return None


def select_personalization_clients(shards: list[ClientShard], count: int = 20) -> list[int]:
    """The `count` clients with the largest shards (ties to the lower id)."""
    ranked = sorted(shards, key=lambda s: (-len(s), s.client_id))
    return sorted(s.client_id for s in ranked[:count])


@dataclass
class PersonalizationResult:
    client_id: int
    mode: str
    exit_level: int
    n_train: int
    n_holdout: int
    trainable_count: int
    before_accuracy: float
    after_accuracy: float
    state: dict[str, np.ndarray] = field(repr=False)


def _personal_eval(model: AdapterModel, ds: Dataset, idx: np.ndarray, level: int) -> float:
    sub = ds.subset(idx)
    correct = 0
    for b in range(0, len(sub), 256):
        logits = model.logits_at_exit(sub.inputs[b:b + 256], level)
        correct += int((np.argmax(logits.data, axis=1) == sub.labels[b:b + 256]).sum())
    return correct / max(1, len(sub))


def personalize(bb: FrozenBackbone, method: AdapterMethod, num_classes: int,
                global_state: dict[str, np.ndarray], ds: Dataset, shard: ClientShard,
                profile: ClientProfile, mode: str, severity: int, seed: int,
                epochs: int = 10, batch_size: int = 10, base_lr: float = 5e-3,
                holdout_fraction: float = 1 / 3, init_seed: int = 0,
                dtype=np.float32) -> PersonalizationResult:
    """Adapt the global model to one client's corrupted local distribution.

    The client's shard is corrupted at the given severity, split train/holdout,
    and only the mode's parameter subset is trained for `epochs` local epochs
    at the client's tier exit.
    """
    if mode not in PERSONALIZATION_MODES:
        raise ValueError(f"mode must be one of {PERSONALIZATION_MODES}, got {mode!r}")
    if mode in ("full_adapter", "client_token_only") and method.name != "accumulator":
        raise ValueError(f"mode {mode!r} needs the accumulator method, not {method.name!r}")
    if mode == "pa_only" and not method.with_pa:
        raise ValueError("mode 'pa_only' needs a method with parallel branches enabled")

    cid = shard.client_id
    local = corrupt(ds.subset(shard.indices), CorruptionSpec(severity, seed=(seed, cid)))
    split_rng = np.random.default_rng(np.random.SeedSequence((seed, cid, 50)))
    perm = split_rng.permutation(len(local))
    n_hold = max(1, int(round(holdout_fraction * len(local))))
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if train_idx.size == 0:
        raise ValueError(f"client {cid}: shard too small to personalize")

    model = build_model(bb, method, num_classes, seed=init_seed, dtype=dtype)
    model.load_state(global_state)

    level = profile.tier
    before = _personal_eval(model, local, hold_idx, level)

    if mode == "full_model":
        model.bb_params = clone_parameters(bb.params, trainable=True)
    keep: Callable[[str], bool] = {
        "full_adapter": lambda n: n.startswith(("acc.", "head.", "lw.")),
        "client_token_only": lambda n: n == "acc.client",
        "pa_only": lambda n: n.startswith("pa."),
        "full_model": lambda n: True,
    }[mode]
    for name, p in model.trainable_params().items():
        if not keep(name):
            p.freeze()

    trainable = model.trainable_params()
    if not trainable:
        raise ValueError(f"mode {mode!r} selected no trainable parameters")
    steps_per_epoch = max(1, math.ceil(train_idx.size / batch_size))
    sgd = SgdConfig(base_lr=base_lr, total_steps=max(1, epochs * steps_per_epoch))
    rng = np.random.default_rng(np.random.SeedSequence((seed, cid, 51)))
    step = 0
    for _ in range(epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for b in range(0, order.size, batch_size):
            idx = order[b:b + batch_size]
            with Tape() as tape:
                loss = model.loss_at_exit(local.inputs[idx], local.labels[idx], level,
                                          train=True, rng=rng)
            backward(tape, loss)
            sgd_step(trainable, lr_at(step, sgd))
            step += 1

    after = _personal_eval(model, local, hold_idx, level)
    snapshot = model.full_state()
    return PersonalizationResult(
        client_id=cid, mode=mode, exit_level=level, n_train=int(train_idx.size),
        n_holdout=int(hold_idx.size), trainable_count=sum(p.data.size for p in trainable.values()),
        before_accuracy=before, after_accuracy=after, state=snapshot)
