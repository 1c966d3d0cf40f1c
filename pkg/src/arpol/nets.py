"""Minimal gradient-based training stack for the two policy branches.

Small feed-forward approximators over [latent token vector || context],
with a shared trunk and two separate linear heads (arm block, gripper
block). Gradients are exact reverse-mode, computed from a per-forward
tape; parameters live in a named store that supports freezing, cloning
and bit-exact checkpointing.

Everything is float64. Iteration order over parameters is lexicographic
everywhere, which makes training bit-reproducible.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

CHECKPOINT_MAGIC = "ARCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

@dataclass
class Param:
    values: np.ndarray
    grad: np.ndarray
    frozen: bool = False


class ParamStore:
    """Named float64 parameter tensors with grads and freeze flags."""

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, values: np.ndarray) -> Param:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        v = np.array(values, dtype=np.float64)
        p = Param(values=v, grad=np.zeros_like(v))
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """Add into a parameter's grad; frozen entries stay at exactly zero."""
        p = self[name]
        if p.frozen:
            return
        p.grad += grad

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def _match(self, prefix: str) -> list[str]:
        hits = [n for n in self.names() if n.startswith(prefix)]
        if not hits:
            raise ContractError(f"prefix {prefix!r} matches no parameters")
        return hits

    def freeze(self, prefix: str) -> None:
        for n in self._match(prefix):
            p = self._entries[n]
            p.frozen = True
            p.grad[...] = 0.0

    def unfreeze(self, prefix: str) -> None:
        for n in self._match(prefix):
            self._entries[n].frozen = False

    def clone_params(self, src_prefix: str, dst_prefix: str) -> None:
        """Copy values from src entries into the same-suffix dst entries."""
        for src in self._match(src_prefix):
            dst = dst_prefix + src[len(src_prefix):]
            d = self[dst]
            if d.values.shape != self._entries[src].values.shape:
                raise ContractError(f"clone {src} -> {dst}: shape mismatch")
            d.values[...] = self._entries[src].values

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: p.values.copy() for n, p in self.items() if n.startswith(prefix)}

    def values_hash(self, prefix: str = "") -> str:
        """SHA-256 over the little-endian bytes of all matching values."""
        h = hashlib.sha256()
        for n, p in self.items():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(p.values.astype("<f8").tobytes())
        return h.hexdigest()

    def equals_snapshot(self, snap: dict[str, np.ndarray], prefix: str = "") -> bool:
        for n, v in snap.items():
            if not n.startswith(prefix):
                continue
            if n not in self._entries or not np.array_equal(self._entries[n].values, v):
                return False
        return True


# ---------------------------------------------------------------------------
# approximator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NetSpec:
    """Architecture of one branch: trunk widths plus arm/grip head split.

    The learnable latent token vector (length latent_dim) is concatenated
    in front of the context, so the first layer sees latent_dim +
    context_dim inputs. grip_tanh bounds the gripper head output to
    (-1, 1), used for the refinement branch where corrections are
    probability-scale; include_grip=False drops the gripper head entirely.
    """

    context_dim: int
    hidden_widths: tuple
    horizon: int
    arm_dim: int
    latent_dim: int = 16
    activation: str = "tanh"
    grip_tanh: bool = False
    include_grip: bool = True

    def __post_init__(self):
        if self.context_dim < 1 or self.horizon < 1 or self.arm_dim < 1:
            raise ContractError("context_dim, horizon and arm_dim must be >= 1")
        if self.latent_dim < 0:
            raise ContractError("latent_dim must be >= 0")
        if any(w < 1 for w in self.hidden_widths):
            raise ContractError("hidden widths must be >= 1")
        if self.activation not in ("tanh", "relu"):
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def in_features(self) -> int:
        return self.latent_dim + self.context_dim

    @property
    def arm_out(self) -> int:
        return self.horizon * self.arm_dim

    @property
    def grip_out(self) -> int:
        return self.horizon if self.include_grip else 0

    @property
    def output_dim(self) -> int:
        return self.arm_out + self.grip_out

    def param_shapes(self, prefix: str) -> dict[str, tuple]:
        shapes = {}
        if self.latent_dim > 0:
            shapes[f"{prefix}.latent"] = (self.latent_dim,)
        fan_in = self.in_features
        for i, w in enumerate(self.hidden_widths):
            shapes[f"{prefix}.layer{i}.weight"] = (w, fan_in)
            shapes[f"{prefix}.layer{i}.bias"] = (w,)
            fan_in = w
        shapes[f"{prefix}.head_arm.weight"] = (self.arm_out, fan_in)
        shapes[f"{prefix}.head_arm.bias"] = (self.arm_out,)
        if self.include_grip:
            shapes[f"{prefix}.head_grip.weight"] = (self.grip_out, fan_in)
            shapes[f"{prefix}.head_grip.bias"] = (self.grip_out,)
        return shapes


def init_params(spec: NetSpec, store: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    """Scaled-uniform fan-in init; biases zero; latent uniform at input scale."""
    for name, shape in spec.param_shapes(prefix).items():
        if name.endswith(".bias"):
            store.add(name, np.zeros(shape))
        elif name.endswith(".latent"):
            bound = 1.0 / np.sqrt(max(1, spec.latent_dim))
            store.add(name, rng.uniform(-bound, bound, size=shape))
        else:
            bound = 1.0 / np.sqrt(shape[1])
            store.add(name, rng.uniform(-bound, bound, size=shape))


@dataclass
class Tape:
    """Record of one forward pass, sufficient for exact reverse-mode grads."""

    spec: NetSpec
    prefix: str
    inputs: np.ndarray            # (B, in_features), latent columns included
    hiddens: list                 # post-activation per hidden layer, (B, w)
    grip_act: np.ndarray | None   # post-tanh gripper output when grip_tanh
    batched: bool
    consumed: bool = False


def forward(spec: NetSpec, store: ParamStore, prefix: str, context: np.ndarray):
    """Run the approximator on one context vector or a (B, context_dim) batch.

    Returns (arm, grip, tape): arm with shape (H, D) or (B, H, D); grip with
    shape (H,) or (B, H) (logits for anchor specs, tanh-bounded corrections
    when grip_tanh is set; None if the head is absent).
    """
    ctx = np.asarray(context, dtype=np.float64)
    batched = ctx.ndim == 2
    if not batched:
        if ctx.ndim != 1:
            raise ContractError(f"context must be 1-D or 2-D, got shape {ctx.shape}")
        ctx = ctx[None, :]
    if ctx.shape[1] != spec.context_dim:
        raise ContractError(f"context dim {ctx.shape[1]} != spec context_dim {spec.context_dim}")
    b = ctx.shape[0]

    if spec.latent_dim > 0:
        latent = store[f"{prefix}.latent"].values
        x = np.concatenate([np.broadcast_to(latent, (b, spec.latent_dim)), ctx], axis=1)
    else:
        x = ctx

    h = x
    hiddens = []
    for i in range(len(spec.hidden_widths)):
        w = store[f"{prefix}.layer{i}.weight"].values
        bias = store[f"{prefix}.layer{i}.bias"].values
        z = h @ w.T + bias
        h = np.tanh(z) if spec.activation == "tanh" else np.maximum(z, 0.0)
        hiddens.append(h)

    wa = store[f"{prefix}.head_arm.weight"].values
    ba = store[f"{prefix}.head_arm.bias"].values
    arm_flat = h @ wa.T + ba
    arm = arm_flat.reshape(b, spec.horizon, spec.arm_dim)

    grip = None
    grip_act = None
    if spec.include_grip:
        wg = store[f"{prefix}.head_grip.weight"].values
        bg = store[f"{prefix}.head_grip.bias"].values
        grip = h @ wg.T + bg
        if spec.grip_tanh:
            grip = np.tanh(grip)
            grip_act = grip

    tape = Tape(spec=spec, prefix=prefix, inputs=x, hiddens=hiddens,
                grip_act=grip_act, batched=batched)
    if not batched:
        arm = arm[0]
        grip = grip[0] if grip is not None else None
    return arm, grip, tape


def backward(tape: Tape, store: ParamStore, arm_grad: np.ndarray, grip_grad=None) -> None:
    """Accumulate d(loss)/d(params) given d(loss)/d(outputs).

    arm_grad matches the arm output shape; grip_grad matches the gripper
    output (or is None when the head is absent / receives no gradient).
    Frozen parameters accumulate exactly zero. A tape can back-propagate
    once; reuse raises.
    """
    if tape.consumed:
        raise ContractError("stale tape: backward already ran for this forward")
    tape.consumed = True
    spec, prefix = tape.spec, tape.prefix
    b = tape.inputs.shape[0]

    da = np.asarray(arm_grad, dtype=np.float64)
    if not tape.batched:
        da = da[None, ...]
    da = da.reshape(b, spec.arm_out)

    h_last = tape.hiddens[-1] if tape.hiddens else tape.inputs
    store.accumulate(f"{prefix}.head_arm.weight", da.T @ h_last)
    store.accumulate(f"{prefix}.head_arm.bias", da.sum(axis=0))
    dh = da @ store[f"{prefix}.head_arm.weight"].values

    if spec.include_grip and grip_grad is not None:
        dg = np.asarray(grip_grad, dtype=np.float64)
        if not tape.batched:
            dg = dg[None, ...]
        dg = dg.reshape(b, spec.grip_out)
        if spec.grip_tanh:
            dg = dg * (1.0 - tape.grip_act.reshape(b, spec.grip_out) ** 2)
        store.accumulate(f"{prefix}.head_grip.weight", dg.T @ h_last)
        store.accumulate(f"{prefix}.head_grip.bias", dg.sum(axis=0))
        dh = dh + dg @ store[f"{prefix}.head_grip.weight"].values

    for i in reversed(range(len(spec.hidden_widths))):
        h = tape.hiddens[i]
        if spec.activation == "tanh":
            dz = dh * (1.0 - h * h)
        else:
            dz = dh * (h > 0.0)
        layer_in = tape.hiddens[i - 1] if i > 0 else tape.inputs
        store.accumulate(f"{prefix}.layer{i}.weight", dz.T @ layer_in)
        store.accumulate(f"{prefix}.layer{i}.bias", dz.sum(axis=0))
        dh = dz @ store[f"{prefix}.layer{i}.weight"].values

    if spec.latent_dim > 0:
        store.accumulate(f"{prefix}.latent", dh[:, :spec.latent_dim].sum(axis=0))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Adaptive-moment (Adam) state; moments keyed per parameter name."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def optim_step(store: ParamStore, opt: OptimState) -> None:
    """One bias-corrected adaptive-moment update; frozen entries untouched.

    Grads are reset to zero afterwards.
    """
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for name, p in store.items():
        if p.frozen:
            p.grad[...] = 0.0
            continue
        g = p.grad
        m = opt.first_moment.setdefault(name, np.zeros_like(p.values))
        v = opt.second_moment.setdefault(name, np.zeros_like(p.values))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.values -= opt.learning_rate * (m / c1) / (np.sqrt(v / c2) + opt.eps_opt)
        p.grad[...] = 0.0


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(spec: NetSpec, store: ParamStore, prefix: str, context: np.ndarray,
               loss_fn, h: float = 1e-5) -> float:
    """Compare reverse-mode grads against central finite differences.

    loss_fn(arm, grip) must return (loss, arm_grad, grip_grad). Frozen
    entries are skipped. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    arm, grip, tape = forward(spec, store, prefix, context)
    _, arm_g, grip_g = loss_fn(arm, grip)
    store.zero_grads()
    backward(tape, store, arm_g, grip_g)
    analytic = {n: p.grad.copy() for n, p in store.items() if n.startswith(prefix + ".")}

    worst = 0.0
    for name, p in store.items():
        if not name.startswith(prefix + ".") or p.frozen:
            continue
        flat = p.values.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(*forward(spec, store, prefix, context)[:2])[0]
            flat[i] = orig - h
            lm = loss_fn(*forward(spec, store, prefix, context)[:2])[0]
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    store.zero_grads()
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, store: ParamStore, config_hash: str, prefix: str = "") -> None:
    """Write a bit-exact checkpoint: text manifest, separator, raw f64 blob."""
    names = [n for n in store.names() if n.startswith(prefix)]
    if not names:
        raise ContractError(f"no parameters under prefix {prefix!r}")
    lines = [CHECKPOINT_MAGIC, str(CHECKPOINT_VERSION), config_hash]
    blobs = []
    offset = 0
    for n in names:
        v = store[n].values
        raw = v.astype("<f8").tobytes()
        shape = ",".join(str(d) for d in v.shape)
        lines.append(f"{n} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("---")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path, expected_hash: str | None = None,
                    expected_shapes: dict | None = None):
    """Read a checkpoint back into a fresh ParamStore.

    Validates the magic/version, optionally the config hash, and
    optionally that the stored shapes match an architecture's expectation.
    Returns (store, config_hash).
    """
    with open(path, "rb") as f:
        data = f.read()
    sep = b"\n---\n"
    idx = data.find(sep)
    if idx < 0:
        raise ConfigError(f"{path}: missing manifest separator")
    header = data[:idx].decode("ascii").split("\n")
    blob = data[idx + len(sep):]
    if len(header) < 3 or header[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad magic, not a checkpoint")
    if int(header[1]) != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header[1]}")
    config_hash = header[2]
    if expected_hash is not None and config_hash != expected_hash:
        raise ConfigError(
            f"{path}: config hash {config_hash} does not match expected {expected_hash}"
        )
    store = ParamStore()
    seen = {}
    for line in header[3:]:
        name, shape_s, off_s, len_s = line.split(" ")
        shape = tuple(int(d) for d in shape_s.split(","))
        off, nbytes = int(off_s), int(len_s)
        raw = blob[off:off + nbytes]
        if len(raw) != nbytes:
            raise ConfigError(f"{path}: truncated blob for {name}")
        v = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        store.add(name, v)
        seen[name] = shape
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if seen.get(name) != tuple(shape):
                raise ConfigError(
                    f"{path}: parameter {name} has shape {seen.get(name)}, expected {tuple(shape)}"
                )
    return store, config_hash
