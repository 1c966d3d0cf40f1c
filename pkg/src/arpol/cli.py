"""Command-line entry point for reproducible runs.

Subcommands: gen-data, train, eval, analyze, ablate. Every artifact
embeds the resolved config hash; identical configs produce byte-identical
outputs. Exit codes: 0 success, 2 usage/validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, nets, svg, train
from .config import (OUTPUT_ROOT_ENV, RunConfig, config_hash, load_config,
                     render_config)
from .errors import ConfigError, ContractError, NumericsError
from .sim import (ChunkDataset, OutcomeTag, generate_demos, load_dataset,
                  save_dataset)
from .train import Variant

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

# Published reference results for the ablation table (large-scale benchmark
# runs; annotation only, never a desk-scale expectation).
REFERENCE_SR = {
    "Full": (82.3, 0.0),
    "NoGripRefine": (78.5, -3.8),
    "NaiveGripMSE": (72.6, -9.7),
    "NoDetach": (75.7, -6.6),
    "ExplicitConcat": (79.6, -2.7),
    "AnchorOnlyDeep": (76.4, -5.9),
    "DirectActionPhase2": (73.6, -8.7),
}


def _resolve_output_dir(cfg: RunConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV, "")
    out = Path(cfg.output_dir)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.dataset_path) if cfg.dataset_path else out / "dataset.jsonl"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="ascii")


def _write_table(path: Path, header, rows, cfg_hash: str) -> None:
    lines = [f"# config_hash={cfg_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else (repr(v) if isinstance(v, float) else str(v))
                              for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def _load_dataset_for(cfg: RunConfig, out: Path) -> ChunkDataset:
    path = _dataset_path(cfg, out)
    if not path.exists():
        raise ConfigError(f"dataset not found at {path}; run gen-data first")
    episodes, header = load_dataset(path)
    if header["H"] != cfg.horizon or header["D_arm"] != cfg.arm_dim \
            or header["context_dim"] != 10 + cfg.num_tasks:
        raise ConfigError(f"dataset at {path} does not match the configured schema")
    return ChunkDataset.from_episodes(episodes, cfg.horizon)


def _load_checkpoint_checked(path: str, cfg: RunConfig, expected_shapes, force: bool):
    expected = None if force else config_hash(cfg)
    try:
        store, ck_hash = nets.load_checkpoint(path, expected_hash=expected,
                                              expected_shapes=expected_shapes)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    return store, ck_hash


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> int:
    out = _resolve_output_dir(cfg)
    if cfg.n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    task = cfg.task_spec()
    episodes = generate_demos(task, cfg.n_episodes, cfg.data_seed, cfg.jitter_std)
    path = _dataset_path(cfg, out)
    ch = config_hash(cfg)
    save_dataset(path, episodes, task, cfg.horizon, ch)
    manifest = {
        "config_hash": ch,
        "data_seed": cfg.data_seed,
        "jitter_std": cfg.jitter_std,
        "n_episodes": len(episodes),
        "n_samples": sum(ep.length for ep in episodes),
        "dataset_file": path.name,
    }
    _write_json(out / "dataset_manifest.json", manifest)
    print(f"wrote {path} ({len(episodes)} episodes)")
    return EXIT_OK


def _ckpt_paths(cfg: RunConfig, out: Path):
    v = cfg.variant
    s = cfg.seed
    return (out / f"anchor_{v}_seed{s}.ckpt", out / f"refine_{v}_seed{s}.ckpt",
            out / f"loss_phase1_{v}_seed{s}.csv", out / f"loss_phase2_{v}_seed{s}.csv")


def cmd_train(cfg: RunConfig, phase: int, anchor_path: str | None) -> int:
    out = _resolve_output_dir(cfg)
    data = _load_dataset_for(cfg, out)
    tc = cfg.train_config()
    ch = config_hash(cfg)
    anchor_ckpt, refine_ckpt, log1, log2 = _ckpt_paths(cfg, out)

    if phase == 1:
        res = train.train_phase1(tc, data)
        nets.save_checkpoint(anchor_ckpt, res.store, ch)
        train.write_loss_log(log1, res.log, ch)
        print(f"wrote {anchor_ckpt}")
        return EXIT_OK

    if anchor_path is None:
        raise ConfigError("phase 2 requires --anchor CKPT")
    a_shapes = train.anchor_spec(tc).param_shapes(train.ANCHOR)
    anchor_store, _ = _load_checkpoint_checked(anchor_path, cfg, a_shapes, force=False)
    res = train.train_phase2(tc, data, anchor_store)
    nets.save_checkpoint(refine_ckpt, res.store, ch)
    train.write_loss_log(log2, res.log, ch)
    print(f"wrote {refine_ckpt}")
    return EXIT_OK


def _policies_from_args(cfg: RunConfig, anchor_path: str, refine_path: str | None,
                        force: bool):
    tc = cfg.train_config()
    a_shapes = train.anchor_spec(tc).param_shapes(train.ANCHOR)
    anchor_store, _ = _load_checkpoint_checked(anchor_path, cfg, a_shapes, force)
    anchor_policy = train.ChunkPolicy(tc, anchor_store)
    full_policy = None
    if refine_path:
        r_shapes = dict(a_shapes)
        r_shapes.update(train.refine_spec(tc).param_shapes(train.REFINE))
        full_store, _ = _load_checkpoint_checked(refine_path, cfg, r_shapes, force)
        full_policy = train.ChunkPolicy(tc, full_store, full_store)
    return anchor_policy, full_policy


def cmd_eval(cfg: RunConfig, anchor_path: str, refine_path: str | None, force: bool) -> int:
    out = _resolve_output_dir(cfg)
    task = cfg.task_spec()
    seeds = cfg.eval_seed_list()
    exec_steps = cfg.execute_steps or None
    anchor_policy, full_policy = _policies_from_args(cfg, anchor_path, refine_path, force)
    ch = config_hash(cfg)

    report = {"config_hash": ch, "n_seeds": len(seeds)}
    anchor_rep = analysis.success_rate(anchor_policy, task, seeds, exec_steps)
    report["anchor_only"] = {
        "success_rate": anchor_rep.rate,
        "histogram": anchor_rep.histogram,
        "gripper_failure_share": anchor_rep.gripper_failure_share,
    }
    if full_policy is not None:
        full_rep = analysis.success_rate(full_policy, task, seeds, exec_steps)
        report["full"] = {
            "success_rate": full_rep.rate,
            "histogram": full_rep.histogram,
            "gripper_failure_share": full_rep.gripper_failure_share,
        }
    name = "eval_full" if full_policy is not None else "eval_anchor"
    _write_json(out / f"{name}_{cfg.variant}_seed{cfg.seed}.json", report)
    rows = [(k, report[k]["success_rate"]) for k in ("anchor_only", "full") if k in report]
    _write_table(out / f"{name}_{cfg.variant}_seed{cfg.seed}.csv",
                 ("policy", "success_rate"), rows, ch)
    for key in ("anchor_only", "full"):
        if key in report:
            print(f"{key}: success_rate={report[key]['success_rate']:.3f}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, kind: str, anchor_path: str | None,
                refine_path: str | None, inputs, force: bool) -> int:
    out = _resolve_output_dir(cfg)
    task = cfg.task_spec()
    tc = cfg.train_config()
    ch = config_hash(cfg)
    seeds = cfg.eval_seed_list()
    exec_steps = cfg.execute_steps or None

    if kind == "residuals":
        if not anchor_path:
            raise ConfigError("analyze residuals requires --anchor")
        data = _load_dataset_for(cfg, out)
        a_shapes = train.anchor_spec(tc).param_shapes(train.ANCHOR)
        store, _ = _load_checkpoint_checked(anchor_path, cfg, a_shapes, force)
        st = analysis.residual_stats(tc, store, data.contexts, data.arm)
        report = {
            "config_hash": ch, "n_samples": st.n_samples,
            "mean_norm_raw": st.mean_norm_raw, "mean_norm_res": st.mean_norm_res,
            "cov_trace_raw": st.cov_trace_raw, "cov_trace_res": st.cov_trace_res,
            "norm_ratio": st.mean_norm_res / st.mean_norm_raw if st.mean_norm_raw else None,
            "cov_ratio": st.cov_trace_res / st.cov_trace_raw if st.cov_trace_raw else None,
        }
        _write_json(out / "analysis_residuals.json", report)
        _write_table(out / "analysis_residuals.csv",
                     ("stat", "raw", "residual"),
                     [("mean_norm", st.mean_norm_raw, st.mean_norm_res),
                      ("cov_trace", st.cov_trace_raw, st.cov_trace_res)], ch)
        if cfg.emit_svg:
            svg.render_bar_chart(
                ["norm_raw", "norm_res", "cov_raw", "cov_res"],
                [st.mean_norm_raw, st.mean_norm_res, st.cov_trace_raw, st.cov_trace_res],
                out / "analysis_residuals.svg", title="Residual compactness")
        print(f"norm ratio {report['norm_ratio']:.4f}, cov ratio {report['cov_ratio']:.4f}")
        return EXIT_OK

    if kind == "transitions":
        if not (anchor_path and refine_path):
            raise ConfigError("analyze transitions requires --anchor and --refine")
        anchor_policy, full_policy = _policies_from_args(cfg, anchor_path, refine_path, force)
        tcounts = analysis.transition_analysis(anchor_policy, full_policy, task, seeds, exec_steps)
        report = {"config_hash": ch, "fs": tcounts.fs, "sf": tcounts.sf,
                  "ss": tcounts.ss, "ff": tcounts.ff, "total": tcounts.total}
        _write_json(out / "analysis_transitions.json", report)
        _write_table(out / "analysis_transitions.csv", ("transition", "count"),
                     [("fail_to_success", tcounts.fs), ("success_to_fail", tcounts.sf),
                      ("success_to_success", tcounts.ss), ("fail_to_fail", tcounts.ff)], ch)
        if cfg.emit_svg:
            svg.render_bar_chart(["F->S", "S->F", "S->S", "F->F"],
                                 [tcounts.fs, tcounts.sf, tcounts.ss, tcounts.ff],
                                 out / "analysis_transitions.svg",
                                 title="Outcome transitions (anchor vs full)")
        print(f"fs={tcounts.fs} sf={tcounts.sf} ss={tcounts.ss} ff={tcounts.ff}")
        return EXIT_OK

    if kind == "grip-profile":
        if not anchor_path:
            raise ConfigError("analyze grip-profile requires --anchor")
        anchor_policy, full_policy = _policies_from_args(cfg, anchor_path, refine_path, force)
        policy = full_policy if full_policy is not None else anchor_policy
        prof = analysis.gripper_error_profile(policy, task, seeds, cfg.profile_window,
                                              exec_steps)
        report = {"config_hash": ch, "offsets": prof.offsets, "mean_dist": prof.mean_dist,
                  "counts": prof.counts, "threshold": prof.threshold,
                  "empty": prof.empty,
                  "close_within_threshold": prof.close_within_threshold}
        _write_json(out / "analysis_grip_profile.json", report)
        _write_table(out / "analysis_grip_profile.csv", ("offset", "mean_dist", "count"),
                     list(zip(prof.offsets, prof.mean_dist, prof.counts)), ch)
        if cfg.emit_svg and not prof.empty:
            pts = [(o, d) for o, d in zip(prof.offsets, prof.mean_dist)]
            svg.render_line_chart(
                {"mean ee-obj distance": pts,
                 "grasp radius": [(prof.offsets[0], prof.threshold),
                                  (prof.offsets[-1], prof.threshold)]},
                out / "analysis_grip_profile.svg",
                title="Distance around first close command",
                x_label="offset from close step", y_label="distance (m)")
        print("empty profile" if prof.empty
              else f"distance at close: {prof.mean_dist[prof.offsets.index(0)]:.4f} "
                   f"(threshold {prof.threshold})")
        return EXIT_OK

    if kind == "loss-dynamics":
        if len(inputs) != 2:
            raise ConfigError("analyze loss-dynamics requires two loss-log paths")
        recs_a, _ = train.read_loss_log(inputs[0])
        recs_b, _ = train.read_loss_log(inputs[1])
        if not recs_a or not recs_b:
            raise ConfigError("loss logs must be non-empty")
        window = min(100, len(recs_a), len(recs_b))
        cmp = analysis.loss_dynamics_compare([r.total for r in recs_a],
                                             [r.total for r in recs_b], window=window)
        report = {"config_hash": ch, "window": cmp["window"],
                  "fractions": cmp["fractions"],
                  "crossings_a": {str(k): v for k, v in cmp["crossings_a"].items()},
                  "crossings_b": {str(k): v for k, v in cmp["crossings_b"].items()},
                  "log_a": str(inputs[0]), "log_b": str(inputs[1])}
        _write_json(out / "analysis_loss_dynamics.json", report)
        rows = [(f, cmp["crossings_a"][f], cmp["crossings_b"][f]) for f in cmp["fractions"]]
        _write_table(out / "analysis_loss_dynamics.csv",
                     ("fraction", "step_a", "step_b"), rows, ch)
        if cfg.emit_svg:
            norm_a = cmp["smoothed_a"][0] or 1.0
            norm_b = cmp["smoothed_b"][0] or 1.0
            svg.render_line_chart(
                {"log_a": [(i, v / norm_a) for i, v in enumerate(cmp["smoothed_a"])],
                 "log_b": [(i, v / norm_b) for i, v in enumerate(cmp["smoothed_b"])]},
                out / "analysis_loss_dynamics.svg",
                title="Self-normalized smoothed loss", x_label="step", y_label="loss / initial")
        for f in cmp["fractions"]:
            print(f"fraction {f}: log_a step {cmp['crossings_a'][f]}, "
                  f"log_b step {cmp['crossings_b'][f]}")
        return EXIT_OK

    raise ConfigError(f"unknown analysis kind {kind!r}")


def cmd_ablate(cfg: RunConfig, variants: list, n_seeds: int) -> int:
    out = _resolve_output_dir(cfg)
    for v in variants:
        if v not in [x.value for x in Variant]:
            raise ConfigError(f"unknown variant {v!r}")
    if n_seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    task = cfg.task_spec()
    eval_seeds = cfg.eval_seed_list()
    exec_steps = cfg.execute_steps or None
    ch = config_hash(cfg)

    data_path = _dataset_path(cfg, out)
    if not data_path.exists():
        episodes = generate_demos(task, cfg.n_episodes, cfg.data_seed, cfg.jitter_std)
        save_dataset(data_path, episodes, task, cfg.horizon, ch)
    data = _load_dataset_for(cfg, out)

    cells: dict = {v: [] for v in variants}
    failures = []
    for i in range(n_seeds):
        seed = cfg.seed + i
        shared_anchor = None
        for v in variants:
            tc = cfg.train_config()
            tc.seed = seed
            tc.variant = Variant(v)
            try:
                if tc.variant == Variant.ANCHOR_ONLY_DEEP:
                    p1 = train.train_phase1(tc, data)
                    policy = train.ChunkPolicy(tc, p1.store)
                else:
                    if shared_anchor is None:
                        base = cfg.train_config()
                        base.seed = seed
                        shared_anchor = train.train_phase1(base, data).store
                    p2 = train.train_phase2(tc, data, shared_anchor)
                    policy = train.ChunkPolicy(tc, p2.store, p2.store)
                rep = analysis.success_rate(policy, task, eval_seeds, exec_steps)
                cells[v].append(rep.rate)
            except (ConfigError, ContractError, NumericsError) as e:
                cells[v].append(None)
                failures.append(f"{v}/seed{seed}: {e}")

    def mean_sr(v):
        vals = [x for x in cells[v] if x is not None]
        return sum(vals) / len(vals) if vals else None

    # per-seed deltas against Full, then averaged
    deltas = {}
    for v in variants:
        if "Full" not in cells or v == "Full":
            deltas[v] = 0.0 if v == "Full" and mean_sr(v) is not None else None
            continue
        pairs = [(a, b) for a, b in zip(cells[v], cells["Full"])
                 if a is not None and b is not None]
        deltas[v] = sum(a - b for a, b in pairs) / len(pairs) if pairs else None

    header = ("variant", "mean_sr", "delta_vs_full", "ref_sr", "ref_delta")
    rows = []
    for v in variants:
        ref_sr, ref_delta = REFERENCE_SR[v]
        rows.append((v, mean_sr(v), deltas[v], ref_sr, ref_delta))
    _write_table(out / "ablation.csv", header, rows, ch)
    report = {
        "config_hash": ch,
        "note": ("ref_* columns are published reference results from the original "
                 "large-scale benchmark; annotations only, not desk-scale expectations"),
        "per_seed": cells,
        "rows": [dict(zip(header, r)) for r in rows],
        "failures": failures,
    }
    _write_json(out / "ablation.json", report)
    for r in rows:
        sr = "error" if r[1] is None else f"{r[1]:.3f}"
        print(f"{r[0]}: mean_sr={sr}")
    if failures:
        print(f"{len(failures)} sub-run failure(s)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arpol", description=__doc__)
    p.add_argument("--config", help="path to a key = value config file")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--variant", help="override the ablation variant")
    p.add_argument("--emit-svg", action="store_true", help="also render SVG charts")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the expert demonstration dataset")

    t = sub.add_parser("train", help="run one training phase")
    t.add_argument("--phase", type=int, choices=(1, 2), required=True)
    t.add_argument("--anchor", help="anchor checkpoint (required for phase 2)")

    e = sub.add_parser("eval", help="evaluate checkpoints on fresh seeds")
    e.add_argument("--anchor", required=True)
    e.add_argument("--refine")
    e.add_argument("--force", action="store_true",
                   help="skip the checkpoint/config hash check")

    a = sub.add_parser("analyze", help="run one mechanistic analysis")
    a.add_argument("--kind", required=True,
                   choices=("residuals", "transitions", "grip-profile", "loss-dynamics"))
    a.add_argument("--anchor")
    a.add_argument("--refine")
    a.add_argument("--force", action="store_true")
    a.add_argument("inputs", nargs="*", help="extra inputs (loss logs for loss-dynamics)")

    b = sub.add_parser("ablate", help="train+eval a sweep of ablation variants")
    b.add_argument("--variants", default=",".join(v.value for v in Variant),
                   help="comma-separated variant names")
    b.add_argument("--seeds", type=int, default=1, help="number of training seeds")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = {"seed": args.seed, "output_dir": args.output,
                     "variant": args.variant}
        if args.emit_svg:
            overrides["emit_svg"] = True
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.phase, args.anchor)
        if args.command == "eval":
            return cmd_eval(cfg, args.anchor, args.refine, args.force)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.kind, args.anchor, args.refine,
                               args.inputs, args.force)
        if args.command == "ablate":
            return cmd_ablate(cfg, [v.strip() for v in args.variants.split(",") if v.strip()],
                              args.seeds)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
