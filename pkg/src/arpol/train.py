"""Two-phase training of the anchor and refinement branches.

Phase 1 trains the anchor branch alone: arm chunks under MSE plus
gripper logits under BCE. Phase 2 freezes the anchor, initializes the
refinement latent tokens from the anchor's, and trains the refinement
branch on anchor-induced residual targets (arm) and boundary-aware
correction targets (gripper). The anchor enters Phase 2 only through the
targets, never as a refinement input (except in the explicit-concat
ablation).

All ablation variants are configuration, not forked code paths; see
Variant. Training is single-threaded and bit-deterministic given
(config, seed, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import core, nets
from .errors import ConfigError, ContractError, NumericsError
from .sim import ChunkDataset

ANCHOR = "anchor"
REFINE = "refine"

# Hidden-width multiplier for the capacity-matched anchor-only ablation.
DEEP_ANCHOR_SCALE = 1.5


class Variant(str, Enum):
    FULL = "Full"
    NO_GRIP_REFINE = "NoGripRefine"
    NAIVE_GRIP_MSE = "NaiveGripMSE"
    NO_DETACH = "NoDetach"
    EXPLICIT_CONCAT = "ExplicitConcat"
    ANCHOR_ONLY_DEEP = "AnchorOnlyDeep"
    DIRECT_ACTION_PHASE2 = "DirectActionPhase2"


# Variants whose Phase 2 must leave the anchor bit-identical.
FROZEN_ANCHOR_VARIANTS = (
    Variant.FULL, Variant.NO_GRIP_REFINE, Variant.NAIVE_GRIP_MSE,
    Variant.EXPLICIT_CONCAT, Variant.DIRECT_ACTION_PHASE2,
)


@dataclass
class TrainConfig:
    horizon: int = 8
    arm_dim: int = 3
    context_dim: int = 11
    latent_dim: int = 16
    hidden_widths: tuple = (128, 128)
    epsilon: float = core.DEFAULT_EPSILON
    lambda_grip: float = 0.01
    phase1_steps: int = 20000
    phase2_steps: int = 8000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    variant: Variant = Variant.FULL
    dataset_path: str = ""
    checkpoint_dir: str = ""

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.hidden_widths = tuple(int(w) for w in self.hidden_widths)
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")
        if self.lambda_grip < 0:
            raise ContractError("lambda_grip must be >= 0")
        if self.phase1_steps < 1 or self.phase2_steps < 1:
            raise ContractError("step counts must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def anchor_spec(cfg: TrainConfig) -> nets.NetSpec:
    widths = cfg.hidden_widths
    if cfg.variant == Variant.ANCHOR_ONLY_DEEP:
        widths = tuple(int(round(w * DEEP_ANCHOR_SCALE)) for w in widths)
    return nets.NetSpec(context_dim=cfg.context_dim, hidden_widths=widths,
                        horizon=cfg.horizon, arm_dim=cfg.arm_dim,
                        latent_dim=cfg.latent_dim)


def refine_spec(cfg: TrainConfig) -> nets.NetSpec:
    ctx_dim = cfg.context_dim
    if cfg.variant == Variant.EXPLICIT_CONCAT:
        ctx_dim += cfg.horizon * cfg.arm_dim + cfg.horizon
    return nets.NetSpec(context_dim=ctx_dim, hidden_widths=cfg.hidden_widths,
                        horizon=cfg.horizon, arm_dim=cfg.arm_dim,
                        latent_dim=cfg.latent_dim, grip_tanh=True,
                        include_grip=cfg.variant != Variant.NO_GRIP_REFINE)


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed % (1 << 64), stream]))


class _BatchIter:
    """Consecutive mini-batches over seeded shuffled epochs."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


@dataclass
class LossRecord:
    phase: int
    step: int
    arm_loss: float
    grip_loss: float
    total: float


def _check_dataset(cfg: TrainConfig, data: ChunkDataset) -> None:
    if data.horizon != cfg.horizon or data.arm_dim != cfg.arm_dim \
            or data.context_dim != cfg.context_dim:
        raise ConfigError(
            f"dataset schema (H={data.horizon}, D={data.arm_dim}, C={data.context_dim}) "
            f"does not match config (H={cfg.horizon}, D={cfg.arm_dim}, C={cfg.context_dim})"
        )


@dataclass
class Phase1Result:
    store: nets.ParamStore
    spec: nets.NetSpec
    log: list


def train_phase1(cfg: TrainConfig, data: ChunkDataset) -> Phase1Result:
    """Train the anchor branch: arm MSE plus gripper BCE, both batch means."""
    _check_dataset(cfg, data)
    spec = anchor_spec(cfg)
    store = nets.ParamStore()
    nets.init_params(spec, store, ANCHOR, _stream(cfg.seed, 0xA1))
    opt = nets.OptimState(learning_rate=cfg.learning_rate)
    batches = _BatchIter(data.n_samples, cfg.batch_size, _stream(cfg.seed, 0xA2))

    arm_tgt_all = data.arm.reshape(data.n_samples, -1)
    grip_tgt_all = data.grip.astype(np.float64)
    log = []
    for step in range(cfg.phase1_steps):
        idx = batches.next()
        b = idx.size
        ctx = data.contexts[idx]
        arm_tgt = arm_tgt_all[idx]
        grip_tgt = grip_tgt_all[idx]

        arm, logits, tape = nets.forward(spec, store, ANCHOR, ctx)
        arm_flat = arm.reshape(b, -1)
        diff = arm_flat - arm_tgt
        arm_l = float(np.mean(diff * diff))
        grip_l = core.gripper_bce_loss(logits.reshape(-1), grip_tgt.reshape(-1))
        total = arm_l + grip_l
        if not np.isfinite(total):
            raise NumericsError(f"phase 1 loss non-finite at step {step}")

        d_arm = 2.0 * diff / diff.size
        d_logits = (core.sigmoid(logits) - grip_tgt) / grip_tgt.size
        nets.backward(tape, store, d_arm.reshape(arm.shape), d_logits)
        nets.optim_step(store, opt)
        log.append(LossRecord(1, step, arm_l, grip_l, total))
    return Phase1Result(store=store, spec=spec, log=log)


@dataclass
class ResidualBatch:
    """Phase-2 supervision for one mini-batch, built from the frozen anchor.

    arm_target is the ground truth minus the anchor prediction (a plain
    constant array: the stop-gradient is structural). grip_target holds
    the per-step signed corrections; anchor outputs ride along for the
    explicit-concat input and for inference-style diagnostics.
    """

    arm_target: np.ndarray    # (B, H, D)
    grip_target: np.ndarray   # (B, H); zeros when the variant has no gripper branch
    anchor_arm: np.ndarray    # (B, H, D)
    anchor_q: np.ndarray      # (B, H), clamped into (0, 1)
    refine_context: np.ndarray  # (B, refine input dim)


def make_residual_batch(cfg: TrainConfig, anchor_store: nets.ParamStore,
                        a_spec: nets.NetSpec, ctx: np.ndarray,
                        arm_tgt: np.ndarray, grip_tgt: np.ndarray) -> ResidualBatch:
    """Run the anchor forward and build the residual-space supervision.

    The anchor output is treated as a constant everywhere: the arm target
    is gt - anchor, the gripper target is the boundary-aware correction
    for the anchor's probability. Pure given the anchor parameters, so
    batch order cannot change per-sample targets.
    """
    anc_arm, anc_logits, _ = nets.forward(a_spec, anchor_store, ANCHOR, ctx)
    if not (np.all(np.isfinite(anc_arm)) and np.all(np.isfinite(anc_logits))):
        raise NumericsError("anchor produced non-finite outputs while building targets")
    q = core.clamp_prob(core.sigmoid(anc_logits))
    variant = cfg.variant

    if variant == Variant.DIRECT_ACTION_PHASE2:
        arm_target = np.array(arm_tgt, dtype=np.float64)
    else:
        arm_target = arm_tgt - anc_arm

    if variant == Variant.NO_GRIP_REFINE:
        grip_target = np.zeros_like(q)
    elif variant == Variant.NAIVE_GRIP_MSE:
        # naive treatment: regress the label against the anchor logit
        grip_target = grip_tgt.astype(np.float64) - anc_logits
    else:
        grip_target = core.gripper_correction_target(grip_tgt, q, cfg.epsilon)

    refine_ctx = ctx
    if variant == Variant.EXPLICIT_CONCAT:
        b = ctx.shape[0]
        refine_ctx = np.concatenate([ctx, anc_arm.reshape(b, -1), q], axis=1)

    return ResidualBatch(arm_target=arm_target, grip_target=grip_target,
                         anchor_arm=anc_arm, anchor_q=q, refine_context=refine_ctx)


@dataclass
class Phase2Result:
    store: nets.ParamStore    # anchor.* plus refine.*
    anchor_spec: nets.NetSpec
    refine_spec: nets.NetSpec
    log: list
    anchor_hashes: list       # sha256 of anchor values at start and every 1000 steps


def train_phase2(cfg: TrainConfig, data: ChunkDataset,
                 anchor_store: nets.ParamStore,
                 detach_anchor_target: bool | None = None) -> Phase2Result:
    """Train the refinement branch against the (frozen) anchor.

    detach_anchor_target defaults per variant: everywhere True except
    NoDetach, where the anchor is left trainable and gradient flows into
    it through the arm residual target. Overriding it enables the paired
    control run (joint training WITH detach).
    """
    if cfg.variant == Variant.ANCHOR_ONLY_DEEP:
        raise ConfigError("AnchorOnlyDeep has no refinement phase")
    _check_dataset(cfg, data)
    a_spec = anchor_spec(cfg)
    r_spec = refine_spec(cfg)
    joint = cfg.variant == Variant.NO_DETACH
    if detach_anchor_target is None:
        detach_anchor_target = not joint

    store = nets.ParamStore()
    for name, p in anchor_store.items():
        if name.startswith(ANCHOR + "."):
            store.add(name, p.values.copy())
    nets.init_params(r_spec, store, REFINE, _stream(cfg.seed, 0xB1))
    # refinement latents start from the anchor's (same latent_dim by construction)
    if cfg.latent_dim > 0:
        store.clone_params(f"{ANCHOR}.latent", f"{REFINE}.latent")
    if not joint:
        store.freeze(ANCHOR + ".")
        anchor_snapshot = store.snapshot(ANCHOR + ".")
    opt = nets.OptimState(learning_rate=cfg.learning_rate)
    batches = _BatchIter(data.n_samples, cfg.batch_size, _stream(cfg.seed, 0xB2))

    grip_tgt_all = data.grip.astype(np.float64)
    log = []
    anchor_hashes = [store.values_hash(ANCHOR + ".")]
    has_grip = r_spec.include_grip
    for step in range(cfg.phase2_steps):
        idx = batches.next()
        b = idx.size
        ctx = data.contexts[idx]
        arm_tgt = data.arm[idx]
        grip_tgt = grip_tgt_all[idx]

        if joint:
            # anchor forward needs its own tape for the target-path gradient
            anc_arm, anc_logits, anc_tape = nets.forward(a_spec, store, ANCHOR, ctx)
            if not (np.all(np.isfinite(anc_arm)) and np.all(np.isfinite(anc_logits))):
                raise NumericsError(f"anchor outputs non-finite at phase-2 step {step}")
            q = core.clamp_prob(core.sigmoid(anc_logits))
            arm_target = arm_tgt - anc_arm
            grip_target = core.gripper_correction_target(grip_tgt, q, cfg.epsilon)
            refine_ctx = ctx
        else:
            rb = make_residual_batch(cfg, store, a_spec, ctx, arm_tgt, grip_tgt)
            arm_target, grip_target = rb.arm_target, rb.grip_target
            refine_ctx = rb.refine_context

        r_arm, r_grip, tape = nets.forward(r_spec, store, REFINE, refine_ctx)
        diff = r_arm - arm_target
        arm_l = float(np.mean(diff * diff))
        if has_grip:
            gdiff = r_grip - grip_target
            grip_l = float(np.sum(gdiff * gdiff) / b)   # batch mean of per-sample sums
        else:
            grip_l = 0.0
        total = arm_l + cfg.lambda_grip * grip_l
        if not np.isfinite(total):
            raise NumericsError(f"phase 2 loss non-finite at step {step}")

        d_arm = 2.0 * diff / diff.size
        d_grip = (2.0 * cfg.lambda_grip / b) * gdiff if has_grip else None
        nets.backward(tape, store, d_arm, d_grip)
        if joint and not detach_anchor_target:
            # d(loss)/d(anchor arm) equals d(loss)/d(residual prediction):
            # the target enters the squared error as -(gt - anchor)
            nets.backward(anc_tape, store, d_arm, None)
        nets.optim_step(store, opt)

        if not joint:
            if not store.equals_snapshot(anchor_snapshot):
                raise NumericsError(f"frozen anchor drifted at phase-2 step {step}")
            if (step + 1) % 1000 == 0:
                anchor_hashes.append(store.values_hash(ANCHOR + "."))
        log.append(LossRecord(2, step, arm_l, grip_l, total))
    return Phase2Result(store=store, anchor_spec=a_spec, refine_spec=r_spec,
                        log=log, anchor_hashes=anchor_hashes)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict(cfg: TrainConfig, anchor_store: nets.ParamStore,
            refine_store: nets.ParamStore | None, context) -> core.ActionChunk:
    """Compose the final action chunk from anchor and (optional) refinement.

    Anchor-only: thresholded anchor gripper, anchor arm. With refinement:
    arm = anchor + residual (or the refinement output alone under the
    direct-action ablation), gripper decided from the corrected
    probability. Arm outputs are clamped to [-1, 1] before execution.
    """
    ctx = np.asarray(context, dtype=np.float64)
    a_spec = anchor_spec(cfg)
    anc_arm, anc_logits, _ = nets.forward(a_spec, anchor_store, ANCHOR, ctx)
    q = core.clamp_prob(core.sigmoid(anc_logits))

    if refine_store is None:
        arm = anc_arm
        grip = (q > 0.5).astype(np.int64)
    else:
        r_spec = refine_spec(cfg)
        refine_ctx = ctx
        if cfg.variant == Variant.EXPLICIT_CONCAT:
            refine_ctx = np.concatenate([ctx, anc_arm.reshape(-1), q])
        r_arm, r_grip, _ = nets.forward(r_spec, refine_store, REFINE, refine_ctx)
        if cfg.variant == Variant.DIRECT_ACTION_PHASE2:
            arm = r_arm
        else:
            arm = core.compose_arm(anc_arm, r_arm)
        if cfg.variant == Variant.NO_GRIP_REFINE:
            grip = (q > 0.5).astype(np.int64)
        elif cfg.variant == Variant.NAIVE_GRIP_MSE:
            grip = (anc_logits + r_grip > 0.5).astype(np.int64)
        else:
            grip = core.gripper_decide(q, r_grip)
    return core.ActionChunk(arm=np.clip(arm, -1.0, 1.0), grip=np.asarray(grip))


class ChunkPolicy:
    """predict() bound to trained parameter stores, as a context -> chunk callable."""

    def __init__(self, cfg: TrainConfig, anchor_store: nets.ParamStore,
                 refine_store: nets.ParamStore | None = None):
        self.cfg = cfg
        self.anchor_store = anchor_store
        self.refine_store = refine_store

    def __call__(self, context) -> core.ActionChunk:
        return predict(self.cfg, self.anchor_store, self.refine_store, context)


# ---------------------------------------------------------------------------
# loss logs
# ---------------------------------------------------------------------------

LOSS_LOG_COLUMNS = ("phase", "step", "arm_loss", "grip_loss", "total")


def write_loss_log(path, records: list, config_hash: str, append: bool = False) -> None:
    """Append-only delimited text log, one row per training step."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="ascii") as f:
        if not append:
            f.write(f"# config_hash={config_hash}\n")
            f.write(",".join(LOSS_LOG_COLUMNS) + "\n")
        for r in records:
            f.write(f"{r.phase},{r.step},{r.arm_loss!r},{r.grip_loss!r},{r.total!r}\n")


def read_loss_log(path):
    """Read a loss log; returns (records, config_hash)."""
    records = []
    config_hash = ""
    with open(path, "r", encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# config_hash="):
                config_hash = line.split("=", 1)[1]
                continue
            if line.startswith("phase,"):
                continue
            ph, st, al, gl, tot = line.split(",")
            records.append(LossRecord(int(ph), int(st), float(al), float(gl), float(tot)))
    return records, config_hash
