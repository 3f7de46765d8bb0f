"""Command line entry points.

Subcommands: pretrain (build and freeze a backbone), train (federated rounds
over client shards), personalize (per-client local adaptation of a trained
global model), params (parameter and compute budgets), report (summarize a
finished run). All take --config plus repeatable --set dotted overrides.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 checkpoint, 6 numeric, 1 other.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from ._kernels import BACKEND
from .adapters import (METHOD_NAMES, AdapterMethod, build_model, count_trainable_params,
                       exit_budget, method_from_name)
from .backbone import FrozenBackbone, count_backbone_params, init_backbone, pretrain_backbone
from .config import ConfigError, ExperimentConfig, echo_config, load_config
from .data import Dataset, IdxError, load_idx, partition, synth_dataset
from .federation import (RoundReport, comms_cost, format_comms, make_profiles,
                         personalize, run_federation, select_personalization_clients)
from .optim import SgdConfig
from .tensor import NumericError

EXIT_CODES = {"config": 3, "data": 4, "checkpoint": 5, "numeric": 6, "other": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# -- dataset and backbone assembly


def _pretrain_dataset(cfg: ExperimentConfig) -> Dataset:
    bc, pc = cfg.backbone, cfg.pretrain
    return synth_dataset(pc.samples, pc.num_classes, image_size=bc.image_size,
                         channels=bc.channels, cluster_std=pc.cluster_std,
                         label_map_seed=pc.label_map_seed, noise_seed=pc.noise_seed,
                         dtype=cfg.np_dtype())


def _train_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    bc, dc = cfg.backbone, cfg.data
    if dc.source == "synth":
        train = synth_dataset(dc.samples, dc.num_classes, image_size=bc.image_size,
                              channels=bc.channels, cluster_std=dc.cluster_std,
                              label_map_seed=dc.label_map_seed, noise_seed=dc.noise_seed,
                              dtype=cfg.np_dtype())
        test = synth_dataset(dc.test_samples, dc.num_classes, image_size=bc.image_size,
                             channels=bc.channels, cluster_std=dc.cluster_std,
                             label_map_seed=dc.label_map_seed, noise_seed=dc.noise_seed + 1,
                             dtype=cfg.np_dtype())
        return train, test
    train = load_idx(dc.images, dc.labels, num_classes=dc.num_classes)
    test = load_idx(dc.test_images, dc.test_labels, num_classes=dc.num_classes)
    want = (bc.channels, bc.image_size, bc.image_size)
    for name, ds in (("train", train), ("test", test)):
        if ds.inputs.shape[1:] != want:
            raise CliError("data", f"{name} images {ds.inputs.shape[1:]} do not match "
                                   f"the backbone input {want}")
    return train, test


def _backbone_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.resolved_out_dir(), "backbone.ckpt")


def _global_path(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.resolved_out_dir(), "global.ckpt")


def _run_pretrain(cfg: ExperimentConfig) -> tuple[FrozenBackbone, dict]:
    pc = cfg.pretrain
    bb, metrics = pretrain_backbone(cfg.backbone, _pretrain_dataset(cfg),
                                    epochs=pc.epochs, batch_size=pc.batch_size,
                                    base_lr=pc.base_lr, min_lr=pc.min_lr, seed=pc.seed,
                                    accuracy_floor=pc.accuracy_floor, dtype=cfg.np_dtype())
    return bb, metrics


def _load_backbone(cfg: ExperimentConfig, path: str) -> FrozenBackbone:
    loaded = ckpt.load(path)
    expected = init_backbone(cfg.backbone, seed=cfg.pretrain.seed, dtype=cfg.np_dtype())
    if sorted(loaded) != sorted(expected):
        raise CliError("checkpoint", f"{path} does not hold this backbone's parameters")
    for name, p in expected.items():
        if loaded[name].data.shape != p.data.shape:
            raise CliError("checkpoint", f"{path}: {name} has shape "
                                         f"{loaded[name].data.shape}, expected {p.data.shape}")
        loaded[name].freeze()
    return FrozenBackbone(cfg.backbone, loaded)


def _load_or_pretrain_backbone(cfg: ExperimentConfig) -> FrozenBackbone:
    path = _backbone_path(cfg)
    if os.path.exists(path):
        print(f"backbone: loading {path}")
        return _load_backbone(cfg, path)
    bb, metrics = _run_pretrain(cfg)
    os.makedirs(cfg.resolved_out_dir(), exist_ok=True)
    ckpt.save(path, bb.params)
    print(f"backbone: pretrained (holdout_accuracy={metrics['holdout_accuracy']!r}) "
          f"and saved to {path}")
    return bb


# -- metrics formatting

_METRICS_HEADER = ("round\tclients\tfailed\ttransmitted_params\t"
                   "cumulative_oneway_params\ttrain_loss\tmean_acc\texit_acc")


def _metrics_row(rep: RoundReport) -> str:
    cells = [
        str(rep.round),
        ",".join(str(i) for i in rep.client_ids),
        ",".join(str(i) for i in rep.failed_clients),
        str(rep.transmitted_params),
        str(rep.cumulative_oneway_params),
        repr(rep.mean_train_loss),
        "" if rep.mean_accuracy is None else repr(rep.mean_accuracy),
        "" if rep.exit_accuracy is None else ",".join(repr(a) for a in rep.exit_accuracy),
    ]
    return "\t".join(cells)


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


# -- subcommands


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    print(echo_config(cfg), end="")
    bb, metrics = _run_pretrain(cfg)
    out_dir = cfg.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    path = _backbone_path(cfg)
    ckpt.save(path, bb.params)
    payload = {"backbone_params": count_backbone_params(cfg.backbone),
               "checkpoint": path, "kernel_backend": BACKEND, **metrics}
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_train(cfg: ExperimentConfig) -> int:
    print(echo_config(cfg), end="")
    out_dir = cfg.resolved_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    bb = _load_or_pretrain_backbone(cfg)
    train_ds, test_ds = _train_datasets(cfg)
    shards = partition(train_ds, cfg.partition_spec())
    fed, opt = cfg.federation, cfg.optim
    sgd = SgdConfig(base_lr=opt.base_lr, min_lr=opt.min_lr, total_steps=fed.rounds,
                    momentum=opt.momentum, weight_decay=opt.weight_decay)
    per_round = count_trainable_params(cfg.method, cfg.backbone, cfg.data.num_classes)

    metrics_path = os.path.join(out_dir, "metrics.tsv")
    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(_METRICS_HEADER + "\n")

        def on_round(rep: RoundReport) -> None:
            mf.write(_metrics_row(rep) + "\n")
            mf.flush()
            if rep.exit_accuracy is not None:
                print(f"round {rep.round + 1}/{fed.rounds} loss {rep.mean_train_loss!r} "
                      f"mean_acc {rep.mean_accuracy!r} "
                      f"comms {format_comms(rep.round + 1, per_round)}")

        state, reports = run_federation(bb, cfg.method, cfg.data.num_classes, train_ds,
                                        shards, test_ds, fed, sgd,
                                        init_seed=cfg.init_seed, dtype=cfg.np_dtype(),
                                        on_round=on_round)

    ckpt.save(_global_path(cfg), state.params)
    last_eval = next(r for r in reversed(reports) if r.exit_accuracy is not None)
    summary = {
        "experiment": cfg.experiment,
        "method": cfg.method.name,
        "setting": fed.setting,
        "dtype": cfg.dtype,
        "kernel_backend": BACKEND,
        "rounds": fed.rounds,
        "clients": fed.num_clients,
        "sample_fraction": fed.sample_fraction,
        "per_round_params": per_round,
        "cumulative_oneway_params": comms_cost(fed.rounds, per_round),
        "comms": format_comms(fed.rounds, per_round),
        "final_exit_accuracy": last_eval.exit_accuracy,
        "final_mean_accuracy": last_eval.mean_accuracy,
        "final_train_loss": reports[-1].mean_train_loss,
        "global_checkpoint": _global_path(cfg),
        "metrics": metrics_path,
    }
    _write_json(os.path.join(out_dir, "summary.json"), summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_personalize(cfg: ExperimentConfig) -> int:
    print(echo_config(cfg), end="")
    out_dir = cfg.resolved_out_dir()
    bpath, gpath = _backbone_path(cfg), _global_path(cfg)
    for path in (bpath, gpath):
        if not os.path.exists(path):
            raise CliError("checkpoint", f"{path} not found; run train first")
    bb = _load_backbone(cfg, bpath)
    global_state = {name: p.data for name, p in ckpt.load(gpath).items()}
    train_ds, _ = _train_datasets(cfg)
    shards = partition(train_ds, cfg.partition_spec())
    profiles = make_profiles(cfg.federation, cfg.backbone.depth)
    pc = cfg.personalize
    cohort = select_personalization_clients(shards, pc.clients)

    rows = []
    for cid in cohort:
        res = personalize(bb, cfg.method, cfg.data.num_classes, global_state, train_ds,
                          shards[cid], profiles[cid], pc.mode, pc.severity, pc.seed,
                          epochs=pc.epochs, batch_size=pc.batch_size, base_lr=pc.base_lr,
                          holdout_fraction=pc.holdout_fraction, init_seed=cfg.init_seed,
                          dtype=cfg.np_dtype())
        rows.append(res)
        print(f"client {cid} exit {res.exit_level} before {res.before_accuracy!r} "
              f"after {res.after_accuracy!r}")

    table = os.path.join(out_dir, "personalization.tsv")
    with open(table, "w", encoding="utf-8") as f:
        f.write("client\tmode\texit\tn_train\tn_holdout\ttrainable_params\tbefore\tafter\n")
        for r in rows:
            f.write(f"{r.client_id}\t{r.mode}\t{r.exit_level}\t{r.n_train}\t{r.n_holdout}\t"
                    f"{r.trainable_count}\t{r.before_accuracy!r}\t{r.after_accuracy!r}\n")
    improved = sum(1 for r in rows if r.after_accuracy > r.before_accuracy)
    summary = {
        "mode": pc.mode,
        "severity": pc.severity,
        "epochs": pc.epochs,
        "clients": len(rows),
        "improved": improved,
        "improved_fraction": improved / len(rows) if rows else 0.0,
        "mean_before": float(np.mean([r.before_accuracy for r in rows])) if rows else 0.0,
        "mean_after": float(np.mean([r.after_accuracy for r in rows])) if rows else 0.0,
        "trainable_params": rows[0].trainable_count if rows else 0,
        "table": table,
    }
    _write_json(os.path.join(out_dir, "personalization.json"), summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_params(cfg: ExperimentConfig) -> int:
    bc, classes = cfg.backbone, cfg.data.num_classes
    methods = {}
    for name in METHOD_NAMES:
        m = cfg.method if cfg.method.name == name else method_from_name(name)
        methods[name] = count_trainable_params(m, bc, classes)
    budgets = [dict(level=lv, **exit_budget(cfg.method, bc, classes, lv))
               for lv in range(1, bc.depth + 1)]
    payload = {
        "backbone_params": count_backbone_params(bc),
        "num_classes": classes,
        "configured_method": dataclasses.asdict(cfg.method),
        "trainable_params": methods,
        "per_exit_budget": budgets,
        "comms_per_round_example": format_comms(1, methods[cfg.method.name]),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    out_dir = cfg.resolved_out_dir()
    spath = os.path.join(out_dir, "summary.json")
    if not os.path.exists(spath):
        raise CliError("data", f"{spath} not found; run train first")
    with open(spath, "r", encoding="utf-8") as f:
        s = json.load(f)
    print(f"experiment: {s['experiment']}  method: {s['method']}  setting: {s['setting']}")
    print(f"rounds: {s['rounds']}  clients: {s['clients']}  "
          f"sample_fraction: {s['sample_fraction']}")
    print(f"per-round params: {s['per_round_params']}")
    print(f"comms (one way): {s['comms']} ({s['cumulative_oneway_params']} parameters)")
    accs = " ".join(f"{i + 1}:{a!r}" for i, a in enumerate(s["final_exit_accuracy"]))
    print(f"final exit accuracy: {accs}")
    print(f"final mean accuracy: {s['final_mean_accuracy']!r}")
    ppath = os.path.join(out_dir, "personalization.json")
    if os.path.exists(ppath):
        with open(ppath, "r", encoding="utf-8") as f:
            p = json.load(f)
        print(f"personalization ({p['mode']}, severity {p['severity']}): "
              f"{p['improved']}/{p['clients']} improved, "
              f"mean {p['mean_before']!r} -> {p['mean_after']!r}")
    return 0


# -- argument parsing


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedexit",
                                 description="Federated training of early-exit adapters "
                                             "on a frozen transformer.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("pretrain", cmd_pretrain), ("train", cmd_train),
                     ("personalize", cmd_personalize), ("params", cmd_params),
                     ("report", cmd_report)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted key")
        p.set_defaults(fn=fn)
        if name == "train":
            p.add_argument("--jobs", type=int, default=None,
                           help="worker threads for client training")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        try:
            cfg = load_config(args.config, args.set)
        except OSError as e:
            raise ConfigError(f"cannot read {args.config}: {e}") from e
        if getattr(args, "jobs", None) is not None:
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            cfg = dataclasses.replace(
                cfg, federation=dataclasses.replace(cfg.federation, jobs=args.jobs))
        return args.fn(cfg)
    except ConfigError as e:
        print(f"error:config: {e}", file=sys.stderr)
        return EXIT_CODES["config"]
    except IdxError as e:
        print(f"error:data: {e}", file=sys.stderr)
        return EXIT_CODES["data"]
    except ckpt.CheckpointError as e:
        print(f"error:checkpoint: {e}", file=sys.stderr)
        return EXIT_CODES["checkpoint"]
    except NumericError as e:
        print(f"error:numeric: {e}", file=sys.stderr)
        return EXIT_CODES["numeric"]
    except CliError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 1)
    except OSError as e:
        print(f"error:data: {e}", file=sys.stderr)
        return EXIT_CODES["data"]


if __name__ == "__main__":
    sys.exit(main())
