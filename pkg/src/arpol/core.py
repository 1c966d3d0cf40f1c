"""Pure math of the anchor-residual action factorization.

Action chunks are H-step windows split into a continuous arm block
(H x D_arm, normalized per-step deltas) and a binary gripper block
(H values in {0, 1}). The arm side composes an anchor prediction with an
additive residual; the gripper side corrects the anchor's probability by
a signed, boundary-aware amount before thresholding at 0.5.

Everything here is side-effect free, double precision, and safe to call
from any number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

# Default margin by which a fired gripper correction crosses the 0.5
# boundary. Small relative to the probability range, large relative to
# float noise.
DEFAULT_EPSILON = 0.05

# Probabilities are clamped into the open interval only where they are
# consumed as probabilities (target construction, decisions, logging);
# losses always work on raw logits.
PROB_FLOOR = 1e-12


def _as_float_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ContractError(f"{name} must be non-empty")
    return arr


def _check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@dataclass
class ActionChunk:
    """An H-step action window: arm deltas (H x D_arm) plus binary grips (H)."""

    arm: np.ndarray
    grip: np.ndarray

    def __post_init__(self):
        self.arm = np.asarray(self.arm, dtype=np.float64)
        self.grip = np.asarray(self.grip)
        if self.arm.ndim != 2 or self.arm.shape[0] < 1 or self.arm.shape[1] < 1:
            raise ContractError(f"arm must be H x D with H,D >= 1, got {self.arm.shape}")
        if not np.all(np.isfinite(self.arm)):
            raise ContractError("arm entries must be finite")
        if self.grip.shape != (self.arm.shape[0],):
            raise ContractError(
                f"grip length {self.grip.shape} does not match horizon {self.arm.shape[0]}"
            )
        if not np.all((self.grip == 0) | (self.grip == 1)):
            raise ContractError("grip entries must be exactly 0 or 1")
        self.grip = self.grip.astype(np.int64)

    @property
    def horizon(self) -> int:
        return self.arm.shape[0]

    @property
    def arm_dim(self) -> int:
        return self.arm.shape[1]


@dataclass
class GripperHead:
    """Anchor-phase gripper outputs: per-step logits and their sigmoid probs."""

    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "GripperHead":
        g = np.asarray(logits, dtype=np.float64)
        if g.ndim != 1 or g.size < 1:
            raise ContractError("logits must be a non-empty vector")
        if not np.all(np.isfinite(g)):
            raise ContractError("logits must be finite")
        return cls(logits=g, probs=sigmoid(g))


@dataclass
class LossWeights:
    """Weights of the refinement objective; lambda_grip balances the gripper term."""

    lambda_grip: float = 0.01

    def __post_init__(self):
        if not (self.lambda_grip >= 0):
            raise ContractError(f"lambda_grip must be >= 0, got {self.lambda_grip}")


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_prob(q) -> np.ndarray:
    """Pull probabilities into the open interval (0, 1) by PROB_FLOOR."""
    return np.clip(q, PROB_FLOOR, 1.0 - PROB_FLOOR)


def compose_arm(anchor, residual) -> np.ndarray:
    """Final arm chunk: anchor prediction plus additive residual."""
    a = _as_float_matrix(anchor, "anchor")
    r = _as_float_matrix(residual, "residual")
    _check_same_shape(a, r, "compose_arm")
    return a + r


def residual_target(gt_arm, anchor_pred) -> np.ndarray:
    """Residual supervision target: ground truth minus the anchor prediction.

    The anchor prediction enters as a plain constant array, so no gradient
    path through it exists by construction. compose_arm(anchor, result)
    reproduces gt exactly for finite doubles.
    """
    gt = _as_float_matrix(gt_arm, "gt_arm")
    anc = _as_float_matrix(anchor_pred, "anchor_pred")
    _check_same_shape(gt, anc, "residual_target")
    return gt - anc


def gripper_direction(gt_grip, q_anc):
    """Directional correction signal in {-1, 0, +1}.

    gt - [q > 0.5] with a strictly-greater comparison; zero iff the hard
    anchor decision already matches the label. Accepts scalars or arrays
    (broadcast like a ufunc).
    """
    gt = np.asarray(gt_grip)
    q = np.asarray(q_anc, dtype=np.float64)
    if not np.all((gt == 0) | (gt == 1)):
        raise ContractError("gt_grip must be 0 or 1")
    if not np.all((q > 0.0) & (q < 1.0)):
        raise ContractError("q_anc must lie strictly inside (0, 1)")
    s = gt.astype(np.int64) - (q > 0.5).astype(np.int64)
    return int(s) if s.ndim == 0 else s


def gripper_correction_target(gt_grip, q_anc, epsilon):
    """Boundary-aware gripper correction target s * (|q - 0.5| + epsilon).

    Zero when the anchor decision is already right; otherwise a signed
    amount that carries q across the 0.5 boundary with margin epsilon.
    Accepts scalars or arrays.
    """
    if not np.all(np.asarray(epsilon) > 0):
        raise ContractError("epsilon must be > 0")
    s = gripper_direction(gt_grip, q_anc)
    q = np.asarray(q_anc, dtype=np.float64)
    t = np.asarray(s, dtype=np.float64) * (np.abs(q - 0.5) + epsilon)
    return float(t) if t.ndim == 0 else t


def gripper_decide(q_anc, r_hat):
    """Corrected gripper decision: 1 iff q + r > 0.5 (strictly).

    Positive corrections push toward closing, negative toward opening.
    Accepts scalars or arrays.
    """
    q = np.asarray(q_anc, dtype=np.float64)
    r = np.asarray(r_hat, dtype=np.float64)
    if not np.all((q > 0.0) & (q < 1.0)):
        raise ContractError("q_anc must lie strictly inside (0, 1)")
    if not np.all(np.isfinite(r)):
        raise ContractError("r_hat must be finite")
    d = (q + r > 0.5).astype(np.int64)
    return int(d) if d.ndim == 0 else d


def arm_loss(pred, target) -> float:
    """Mean squared error over all H x D_arm chunk entries."""
    p = _as_float_matrix(pred, "pred")
    t = _as_float_matrix(target, "target")
    _check_same_shape(p, t, "arm_loss")
    d = p - t
    return float(np.mean(d * d))


def gripper_refine_loss(pred, target) -> float:
    """Sum over the H steps of squared correction errors (sum, not mean)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractError(f"gripper_refine_loss: need equal-length vectors, got {p.shape} vs {t.shape}")
    d = p - t
    return float(np.sum(d * d))


def gripper_bce_loss(logits, labels) -> float:
    """Mean binary cross-entropy from logits, in the stable softplus form.

    BCE(g, y) = y*softplus(-g) + (1-y)*softplus(g); never overflows for
    |g| up to at least 500.
    """
    g = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if g.shape != y.shape:
        raise ContractError(f"gripper_bce_loss: shape mismatch {g.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary")
    # logaddexp(0, x) == softplus(x), computed without overflow
    per = y * np.logaddexp(0.0, -g) + (1.0 - y) * np.logaddexp(0.0, g)
    return float(np.mean(per))


def phase2_loss(arm_refine: float, grip_refine: float, weights: LossWeights) -> float:
    """Total refinement objective: arm term plus lambda-weighted gripper term."""
    if arm_refine < 0 or grip_refine < 0:
        raise ContractError("loss terms must be non-negative")
    return float(arm_refine + weights.lambda_grip * grip_refine)
