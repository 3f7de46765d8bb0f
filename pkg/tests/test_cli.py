"""End-to-end command line tests; everything runs in-process via main()."""

import json
import os

import pytest

from fedexit.cli import main

CONFIG = """
experiment: t
backbone: {{depth: 3, width: 16, num_heads: 2, patch_size: 4, image_size: 8, channels: 1}}
pretrain: {{epochs: 1, samples: 300, num_classes: 4, label_map_seed: 9, noise_seed: 9,
           accuracy_floor: 0.0}}
data: {{samples: 120, test_samples: 40, num_classes: 4, label_map_seed: 1, noise_seed: 1}}
partition: {{kind: iid, seed: 0}}
federation: {{num_clients: 6, rounds: 2, sample_fraction: 0.34, batch_size: 10,
             setting: multitier, eval_every: 2, seed: 3}}
optim: {{base_lr: 0.005}}
personalize: {{mode: client_token_only, severity: 2, epochs: 1, clients: 3, seed: 8}}
out_dir: {out}
"""


def write_config(tmp_path, name="cfg.yaml", out="run"):
    path = tmp_path / name
    path.write_text(CONFIG.format(out=tmp_path / out))
    return str(path)


def tail_json(out: str) -> dict:
    return json.loads(out[out.rindex("\n{"):])


def test_params_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["params", "--config", cfg]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload["trainable_params"]) == {"accumulator", "lw_linear",
                                                "lw_mlp", "full_finetune"}
    assert payload["trainable_params"]["full_finetune"] > payload["backbone_params"]
    budgets = payload["per_exit_budget"]
    assert [b["level"] for b in budgets] == [1, 2, 3]
    assert budgets[0]["macs"] < budgets[1]["macs"] < budgets[2]["macs"]
    assert "x" in payload["comms_per_round_example"]


def test_params_respects_set_overrides(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["params", "--config", cfg, "--set", "method.name=lw_linear"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["configured_method"]["name"] == "lw_linear"


def test_full_pipeline(tmp_path, capsys):
    cfg = write_config(tmp_path)
    run = tmp_path / "run"

    assert main(["pretrain", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert (run / "backbone.ckpt").exists()
    pre = tail_json(out)
    assert pre["steps"] > 0 and "holdout_accuracy" in pre

    assert main(["train", "--config", cfg]) == 0
    out = capsys.readouterr().out
    summary = tail_json(out)
    assert (run / "global.ckpt").exists()
    assert (run / "summary.json").exists()
    lines = (run / "metrics.tsv").read_text().splitlines()
    assert lines[0].startswith("round\t")
    assert len(lines) == 1 + 2
    assert summary["rounds"] == 2
    assert summary["cumulative_oneway_params"] == 2 * summary["per_round_params"]
    assert summary["comms"] == f"2x{summary['per_round_params'] / 1e6:.2f}"
    assert len(summary["final_exit_accuracy"]) == 3
    assert "backbone: loading" in out

    assert main(["personalize", "--config", cfg]) == 0
    out = capsys.readouterr().out
    psum = tail_json(out)
    assert psum["clients"] == 3
    assert psum["trainable_params"] == 16
    rows = (run / "personalization.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3

    assert main(["report", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "comms (one way): 2x" in out
    assert "final exit accuracy" in out
    assert "personalization (client_token_only, severity 2): " in out


def test_train_worker_count_does_not_change_results(tmp_path, capsys):
    cfg1 = write_config(tmp_path, "a.yaml", out="run1")
    cfg2 = write_config(tmp_path, "b.yaml", out="run2")
    assert main(["train", "--config", cfg1, "--jobs", "1"]) == 0
    assert main(["train", "--config", cfg2, "--jobs", "4"]) == 0
    capsys.readouterr()
    m1 = (tmp_path / "run1" / "metrics.tsv").read_bytes()
    m2 = (tmp_path / "run2" / "metrics.tsv").read_bytes()
    assert m1 == m2
    g1 = (tmp_path / "run1" / "global.ckpt").read_bytes()
    g2 = (tmp_path / "run2" / "global.ckpt").read_bytes()
    assert g1 == g2


def test_exit_codes(tmp_path, capsys):
    missing = str(tmp_path / "nope.yaml")
    assert main(["train", "--config", missing]) == 3
    assert "error:config" in capsys.readouterr().err

    bad = tmp_path / "bad.yaml"
    bad.write_text("method: {name: wizardry}\n")
    assert main(["train", "--config", str(bad)]) == 3
    assert "error:config" in capsys.readouterr().err

    cfg = write_config(tmp_path, out="empty")
    assert main(["personalize", "--config", cfg]) == 5
    assert "error:checkpoint" in capsys.readouterr().err

    assert main(["report", "--config", cfg]) == 4
    assert "error:data" in capsys.readouterr().err

    assert main(["train", "--config", cfg, "--jobs", "0"]) == 3
    assert "error:config" in capsys.readouterr().err


def test_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 2


def test_idx_shape_mismatch_reports_data_error(tmp_path, capsys):
    import struct
    import numpy as np
    imgs = tmp_path / "im.idx"
    labs = tmp_path / "lb.idx"
    x = (np.zeros((4, 5, 5)) * 255).astype(np.uint8)
    with open(imgs, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, 4, 5, 5))
        f.write(x.tobytes())
    with open(labs, "wb") as f:
        f.write(struct.pack(">II", 0x801, 4))
        f.write(bytes([0, 1, 0, 1]))
    cfg = tmp_path / "idx.yaml"
    cfg.write_text(f"""
backbone: {{depth: 3, width: 16, num_heads: 2, patch_size: 4, image_size: 8, channels: 1}}
pretrain: {{epochs: 0, label_map_seed: 9}}
data:
  source: idx
  num_classes: 2
  images: {imgs}
  labels: {labs}
  test_images: {imgs}
  test_labels: {labs}
federation: {{num_clients: 4, rounds: 1, setting: conventional}}
out_dir: {tmp_path / "runx"}
""")
    assert main(["train", "--config", str(cfg)]) == 4
    assert "error:data" in capsys.readouterr().err
