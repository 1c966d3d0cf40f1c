"""Closed-loop evaluation and the mechanistic analysis suite.

Rollouts execute predicted chunks open-loop (all H steps, or a
configurable prefix) before re-observing. Analyses: success rates with a
failure taxonomy, paired anchor-vs-full outcome transitions, residual
target compactness, gripper error profiles around the first close
command, and self-normalized loss-dynamics comparison.

Rollouts are embarrassingly parallel across seeds; aggregation always
uses the caller's seed order, so serial and sharded runs agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets, train
from .errors import ContractError
from .sim import (GRIPPER_RELATED, EpisodeRecorder, OutcomeTag, TaskSpec,
                  _dist)


@dataclass
class RolloutResult:
    seed: int
    outcome: OutcomeTag
    steps_used: int
    states: list
    gripper_switch_steps: list
    min_dist_at_close: float | None   # ee-obj distance at the first close command


def rollout(policy, task: TaskSpec, seed: int, execute_steps: int | None = None) -> RolloutResult:
    """Run one closed-loop episode: predict a chunk, execute it open-loop, repeat.

    execute_steps limits how many of the H predicted steps run before
    re-planning (defaults to the full chunk). Deterministic given
    (policy parameters, task, seed).
    """
    rec = EpisodeRecorder(task, seed)
    while not rec.done:
        chunk = policy(rec.observations[-1])
        k_max = chunk.horizon if execute_steps is None else min(execute_steps, chunk.horizon)
        for k in range(k_max):
            if rec.step(chunk.arm[k], int(chunk.grip[k])):
                break
    return RolloutResult(seed=seed, outcome=rec.outcome(), steps_used=rec.state.step_index,
                         states=rec.states, gripper_switch_steps=rec.switch_steps,
                         min_dist_at_close=rec.first_close_dist)


@dataclass
class SuccessReport:
    rate: float
    histogram: dict                    # OutcomeTag value -> count
    gripper_failure_share: float | None   # gripper-related failures / all failures

    @property
    def n_seeds(self) -> int:
        return sum(self.histogram.values())


def success_rate(policy, task: TaskSpec, seeds, execute_steps: int | None = None) -> SuccessReport:
    """Fraction of Success outcomes plus the outcome histogram over seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ContractError("need at least one seed")
    histogram = {tag.value: 0 for tag in OutcomeTag}
    for seed in seeds:
        out = rollout(policy, task, seed, execute_steps).outcome
        histogram[out.value] += 1
    n = len(seeds)
    successes = histogram[OutcomeTag.SUCCESS.value]
    failures = n - successes
    grip_fail = sum(histogram[t.value] for t in GRIPPER_RELATED)
    share = grip_fail / failures if failures else None
    return SuccessReport(rate=successes / n, histogram=histogram,
                         gripper_failure_share=share)


@dataclass
class TransitionCounts:
    fs: int   # anchor Fail -> full Success
    sf: int   # anchor Success -> full Fail
    ss: int
    ff: int

    @property
    def total(self) -> int:
        return self.fs + self.sf + self.ss + self.ff


def transition_analysis(anchor_policy, full_policy, task: TaskSpec, seeds,
                        execute_steps: int | None = None) -> TransitionCounts:
    """Paired per-seed outcome comparison between anchor-only and full policies."""
    fs = sf = ss = ff = 0
    for seed in seeds:
        a_ok = rollout(anchor_policy, task, seed, execute_steps).outcome == OutcomeTag.SUCCESS
        f_ok = rollout(full_policy, task, seed, execute_steps).outcome == OutcomeTag.SUCCESS
        if a_ok and f_ok:
            ss += 1
        elif a_ok:
            sf += 1
        elif f_ok:
            fs += 1
        else:
            ff += 1
    return TransitionCounts(fs=fs, sf=sf, ss=ss, ff=ff)


@dataclass
class ResidualStats:
    mean_norm_raw: float
    mean_norm_res: float
    cov_trace_raw: float
    cov_trace_res: float
    n_samples: int


def _norm_and_cov_trace(x: np.ndarray):
    norms = np.sqrt(np.sum(x * x, axis=1))
    return float(np.mean(norms)), float(np.sum(np.var(x, axis=0, ddof=1)))


def residual_stats(cfg: train.TrainConfig, anchor_store: nets.ParamStore,
                   contexts: np.ndarray, arm_targets: np.ndarray) -> ResidualStats:
    """Compactness of residual targets versus raw arm targets.

    Flattens each H x D target to a vector; reports mean L2 norm and the
    trace of the unbiased empirical covariance, before and after
    subtracting the anchor prediction.
    """
    n = contexts.shape[0]
    if n < 2:
        raise ContractError("need at least 2 samples for covariance statistics")
    raw = np.asarray(arm_targets, dtype=np.float64).reshape(n, -1)
    anc, _, _ = nets.forward(train.anchor_spec(cfg), anchor_store, train.ANCHOR, contexts)
    res = raw - anc.reshape(n, -1)
    mean_raw, cov_raw = _norm_and_cov_trace(raw)
    mean_res, cov_res = _norm_and_cov_trace(res)
    return ResidualStats(mean_norm_raw=mean_raw, mean_norm_res=mean_res,
                         cov_trace_raw=cov_raw, cov_trace_res=cov_res, n_samples=n)


@dataclass
class GripperErrorProfile:
    offsets: list          # step offsets relative to the first close command
    mean_dist: list        # mean ee-obj distance per offset (nan where no data)
    counts: list           # rollouts contributing per offset
    threshold: float       # the grasp radius
    empty: bool            # no rollout ever issued a close command
    close_within_threshold: bool | None   # mean distance at offset 0 below threshold


def gripper_error_profile(policy, task: TaskSpec, seeds, window: int,
                          execute_steps: int | None = None) -> GripperErrorProfile:
    """ee-obj distance aligned on the first close command, averaged over rollouts.

    Rollouts that never close are skipped; if all are skipped the profile
    comes back flagged empty.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    offsets = list(range(-window, window + 1))
    sums = np.zeros(len(offsets))
    counts = np.zeros(len(offsets), dtype=np.int64)
    for seed in seeds:
        r = rollout(policy, task, seed, execute_steps)
        close_steps = [t for t in r.gripper_switch_steps
                       if r.states[t].gripper == 0]   # switches that close
        if not close_steps:
            continue
        c = close_steps[0]
        dists = [_dist(s.ee, s.obj) for s in r.states]
        for j, off in enumerate(offsets):
            t = c + off
            if 0 <= t < len(dists):
                sums[j] += dists[t]
                counts[j] += 1
    empty = counts.sum() == 0
    mean = [float(sums[j] / counts[j]) if counts[j] else float("nan")
            for j in range(len(offsets))]
    zero_idx = offsets.index(0)
    close_ok = None if empty or counts[zero_idx] == 0 else bool(mean[zero_idx] <= task.grasp_radius)
    return GripperErrorProfile(offsets=offsets, mean_dist=mean,
                               counts=[int(c) for c in counts],
                               threshold=task.grasp_radius, empty=bool(empty),
                               close_within_threshold=close_ok)


# ---------------------------------------------------------------------------
# training dynamics
# ---------------------------------------------------------------------------

def moving_average(xs, window: int) -> np.ndarray:
    """Trailing full-window means; entry j covers steps j-window+1 .. j."""
    x = np.asarray(xs, dtype=np.float64)
    if window < 1 or window > x.size:
        raise ContractError(f"window {window} invalid for {x.size} records")
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def crossing_steps(losses, window: int, fractions) -> dict:
    """First step at which the smoothed loss falls to each fraction of its start.

    Self-normalized: the reference is the first full-window mean, so
    scaling a curve by any positive constant leaves crossings unchanged.
    Steps are indices into the raw loss sequence (window end); None when
    a fraction is never reached.
    """
    sm = moving_average(losses, window)
    initial = sm[0]
    out = {}
    for f in fractions:
        hit = np.nonzero(sm <= f * initial)[0]
        out[f] = int(hit[0] + window - 1) if hit.size else None
    return out


def loss_dynamics_compare(losses_a, losses_b, window: int = 100,
                          fractions=(0.5, 0.2, 0.1)) -> dict:
    """Step-aligned smoothed curves plus self-normalized crossing table.

    The two logs may come from objectives over different prediction
    targets; only the self-normalized crossings are comparable, never the
    absolute values.
    """
    return {
        "window": window,
        "fractions": list(fractions),
        "crossings_a": crossing_steps(losses_a, window, fractions),
        "crossings_b": crossing_steps(losses_b, window, fractions),
        "smoothed_a": moving_average(losses_a, window).tolist(),
        "smoothed_b": moving_average(losses_b, window).tolist(),
    }
