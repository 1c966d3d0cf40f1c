"""CLI contract: exit codes, artifacts, hash checks, idempotence."""

import json
import math
import os

import numpy as np
import pytest

from arpol import cli, nets, sim, train
from arpol.config import config_hash, load_config


def write_cfg(tmp_path, out_dir, **extra):
    sections = {
        "data": {"n_episodes": 6, "jitter_std": 0.1},
        "train": {"hidden_widths": "16,16", "latent_dim": 4, "phase1_steps": 60,
                  "phase2_steps": 40, "batch_size": 16},
        "eval": {"eval_seeds": 4},
        "run": {"output_dir": out_dir},
    }
    for section, kvs in extra.items():
        sections.setdefault(section, {}).update(kvs)
    lines = []
    for section, kvs in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in kvs.items())
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


@pytest.fixture()
def workdir(tmp_path):
    out = tmp_path / "out"
    cfg_path = write_cfg(tmp_path, out)
    return tmp_path, out, cfg_path


def run(args):
    return cli.main(args)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_writes_dataset_and_manifest(workdir):
    _, out, cfg_path = workdir
    assert run(["--config", cfg_path, "gen-data"]) == 0
    data_file = out / "dataset.jsonl"
    manifest = json.loads((out / "dataset_manifest.json").read_text())
    episodes, header = sim.load_dataset(data_file)
    assert len(episodes) == 6 == manifest["n_episodes"]
    assert header["config_hash"] == manifest["config_hash"]
    assert header["H"] == 8 and header["D_arm"] == 3


def test_gen_data_idempotent(workdir):
    _, out, cfg_path = workdir
    run(["--config", cfg_path, "gen-data"])
    first = (out / "dataset.jsonl").read_bytes()
    run(["--config", cfg_path, "gen-data"])
    assert (out / "dataset.jsonl").read_bytes() == first


def test_gen_data_zero_episodes_usage_error(tmp_path):
    cfg_path = write_cfg(tmp_path, tmp_path / "o", data={"n_episodes": 0})
    assert run(["--config", cfg_path, "gen-data"]) == 2


def test_output_root_env(tmp_path, monkeypatch):
    root = tmp_path / "root"
    cfg_path = write_cfg(tmp_path, "rel_out")
    monkeypatch.setenv("ARPOL_OUTPUT_ROOT", str(root))
    assert run(["--config", cfg_path, "gen-data"]) == 0
    assert (root / "rel_out" / "dataset.jsonl").exists()


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@pytest.fixture()
def trained(workdir):
    tmp_path, out, cfg_path = workdir
    assert run(["--config", cfg_path, "gen-data"]) == 0
    assert run(["--config", cfg_path, "train", "--phase", "1"]) == 0
    anchor = out / "anchor_Full_seed0.ckpt"
    assert run(["--config", cfg_path, "train", "--phase", "2",
                "--anchor", str(anchor)]) == 0
    refine = out / "refine_Full_seed0.ckpt"
    return tmp_path, out, cfg_path, anchor, refine


def test_train_phase1_checkpoint_valid(trained):
    _, out, cfg_path, anchor, _ = trained
    store, ck = nets.load_checkpoint(anchor)
    cfg = load_config(cfg_path)
    assert ck == config_hash(cfg)
    shapes = train.anchor_spec(cfg.train_config()).param_shapes("anchor")
    for name, shape in shapes.items():
        assert store[name].values.shape == tuple(shape)
    log, log_hash = train.read_loss_log(out / "loss_phase1_Full_seed0.csv")
    assert log_hash == ck and len(log) == 60


def test_train_phase2_requires_anchor(workdir):
    _, _, cfg_path = workdir
    run(["--config", cfg_path, "gen-data"])
    assert run(["--config", cfg_path, "train", "--phase", "2"]) == 2


def test_train_missing_dataset_usage_error(workdir):
    _, _, cfg_path = workdir
    assert run(["--config", cfg_path, "train", "--phase", "1"]) == 2


def test_train_deterministic_checkpoints(trained):
    _, out, cfg_path, anchor, refine = trained
    a_bytes = anchor.read_bytes()
    r_bytes = refine.read_bytes()
    assert run(["--config", cfg_path, "train", "--phase", "1"]) == 0
    assert run(["--config", cfg_path, "train", "--phase", "2",
                "--anchor", str(anchor)]) == 0
    assert anchor.read_bytes() == a_bytes
    assert refine.read_bytes() == r_bytes


def test_train_nonfinite_data_numeric_exit(workdir):
    _, out, cfg_path = workdir
    run(["--config", cfg_path, "gen-data"])
    # poison one observation in place
    path = out / "dataset.jsonl"
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["observations"][0][0] = float("nan")
    lines[1] = json.dumps(rec, sort_keys=True, separators=(",", ":"))
    path.write_text("\n".join(lines) + "\n")
    assert run(["--config", cfg_path, "train", "--phase", "1"]) == 3


def test_variant_changes_config_hash(tmp_path):
    cfg = load_config(write_cfg(tmp_path, tmp_path / "o"))
    naive = load_config(write_cfg(tmp_path, tmp_path / "o"),
                        {"variant": "NaiveGripMSE"})
    assert config_hash(cfg) != config_hash(naive)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_anchor_only_and_full_reports(trained):
    _, out, cfg_path, anchor, refine = trained
    assert run(["--config", cfg_path, "eval", "--anchor", str(anchor)]) == 0
    rep = json.loads((out / "eval_anchor_Full_seed0.json").read_text())
    assert "anchor_only" in rep and "full" not in rep
    assert sum(rep["anchor_only"]["histogram"].values()) == 4

    assert run(["--config", cfg_path, "eval", "--anchor", str(anchor),
                "--refine", str(refine)]) == 0
    rep = json.loads((out / "eval_full_Full_seed0.json").read_text())
    assert "anchor_only" in rep and "full" in rep


def test_eval_idempotent(trained):
    _, out, cfg_path, anchor, refine = trained
    run(["--config", cfg_path, "eval", "--anchor", str(anchor), "--refine", str(refine)])
    first = (out / "eval_full_Full_seed0.json").read_bytes()
    run(["--config", cfg_path, "eval", "--anchor", str(anchor), "--refine", str(refine)])
    assert (out / "eval_full_Full_seed0.json").read_bytes() == first


def test_eval_hash_mismatch_refused_unless_forced(trained, tmp_path):
    _, out, cfg_path, anchor, _ = trained
    other_cfg = write_cfg(tmp_path, out, data={"jitter_std": 0.2})
    assert run(["--config", other_cfg, "eval", "--anchor", str(anchor)]) == 2
    assert run(["--config", other_cfg, "eval", "--anchor", str(anchor), "--force"]) == 0


def test_eval_missing_checkpoint(workdir):
    _, out, cfg_path = workdir
    assert run(["--config", cfg_path, "eval", "--anchor", str(out / "nope.ckpt")]) == 2


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def test_analyze_residuals(trained):
    _, out, cfg_path, anchor, _ = trained
    assert run(["--config", cfg_path, "--emit-svg", "analyze", "--kind", "residuals",
                "--anchor", str(anchor)]) == 0
    rep = json.loads((out / "analysis_residuals.json").read_text())
    assert rep["mean_norm_raw"] > 0
    assert rep["norm_ratio"] == rep["mean_norm_res"] / rep["mean_norm_raw"]
    assert (out / "analysis_residuals.csv").exists()
    assert (out / "analysis_residuals.svg").read_text().startswith("<svg")


def test_analyze_transitions_identical_policies(trained):
    _, out, cfg_path, anchor, refine = trained
    # zero the refinement branch: the full policy degenerates to anchor-only
    store, ck = nets.load_checkpoint(refine)
    for name in store.names():
        if name.startswith("refine."):
            store[name].values[...] = 0.0
    zeroed = out / "refine_zeroed.ckpt"
    nets.save_checkpoint(zeroed, store, ck)
    assert run(["--config", cfg_path, "analyze", "--kind", "transitions",
                "--anchor", str(anchor), "--refine", str(zeroed)]) == 0
    rep = json.loads((out / "analysis_transitions.json").read_text())
    assert rep["fs"] == 0 and rep["sf"] == 0
    assert rep["total"] == 4


def test_analyze_grip_profile(trained):
    _, out, cfg_path, anchor, refine = trained
    assert run(["--config", cfg_path, "analyze", "--kind", "grip-profile",
                "--anchor", str(anchor), "--refine", str(refine)]) == 0
    rep = json.loads((out / "analysis_grip_profile.json").read_text())
    assert rep["threshold"] == 0.02
    assert len(rep["offsets"]) == len(rep["mean_dist"]) == len(rep["counts"])


def test_analyze_loss_dynamics_exponential_oracle(trained):
    tmp_path, out, cfg_path, _, _ = trained
    r = 0.01
    recs_a = [train.LossRecord(1, i, 0.0, 0.0, math.exp(-r * i)) for i in range(1200)]
    recs_b = [train.LossRecord(1, i, 0.0, 0.0, math.exp(-2 * r * i)) for i in range(1200)]
    la, lb = tmp_path / "a.csv", tmp_path / "b.csv"
    train.write_loss_log(la, recs_a, "x")
    train.write_loss_log(lb, recs_b, "x")
    assert run(["--config", cfg_path, "analyze", "--kind", "loss-dynamics",
                str(la), str(lb)]) == 0
    rep = json.loads((out / "analysis_loss_dynamics.json").read_text())
    # the faster curve crosses each fraction at roughly half the step count
    for f in ("0.5", "0.2", "0.1"):
        sa, sb = rep["crossings_a"][f], rep["crossings_b"][f]
        assert sb < sa
    assert run(["--config", cfg_path, "analyze", "--kind", "loss-dynamics",
                str(la)]) == 2


def test_analyze_unknown_kind_usage(workdir):
    _, _, cfg_path = workdir
    # argparse rejects the choice before our code runs
    assert run(["--config", cfg_path, "analyze", "--kind", "bogus"]) == 2


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def test_ablate_single_variant(workdir):
    _, out, cfg_path = workdir
    assert run(["--config", cfg_path, "ablate", "--variants", "Full", "--seeds", "1"]) == 0
    rep = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in rep["rows"]] == ["Full"]
    assert rep["rows"][0]["ref_sr"] == 82.3
    assert rep["rows"][0]["delta_vs_full"] == 0.0
    table = (out / "ablation.csv").read_text().splitlines()
    assert table[1].split(",")[0] == "variant"


def test_ablate_delta_arithmetic(workdir):
    _, out, cfg_path = workdir
    assert run(["--config", cfg_path, "ablate", "--variants", "Full,NoGripRefine",
                "--seeds", "2"]) == 0
    rep = json.loads((out / "ablation.json").read_text())
    per = rep["per_seed"]
    expect = sum(a - b for a, b in zip(per["NoGripRefine"], per["Full"])) / 2
    row = [r for r in rep["rows"] if r["variant"] == "NoGripRefine"][0]
    assert row["delta_vs_full"] == pytest.approx(expect, rel=1e-12)
    assert row["ref_delta"] == -3.8


def test_ablate_unknown_variant(workdir):
    _, _, cfg_path = workdir
    assert run(["--config", cfg_path, "ablate", "--variants", "Bogus"]) == 2


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[train]\nwat = 1\n")
    assert run(["--config", str(path), "gen-data"]) == 2


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[mystery]\nx = 1\n")
    assert run(["--config", str(path), "gen-data"]) == 2


def test_missing_config_file(tmp_path):
    assert run(["--config", str(tmp_path / "none.cfg"), "gen-data"]) == 2


def test_cli_seed_and_variant_overrides(tmp_path):
    out = tmp_path / "o"
    cfg_path = write_cfg(tmp_path, out)
    run(["--config", cfg_path, "gen-data"])
    assert run(["--config", cfg_path, "--seed", "5", "--variant", "NoGripRefine",
                "train", "--phase", "1"]) == 0
    assert (out / "anchor_NoGripRefine_seed5.ckpt").exists()
