"""Run configuration: flat key = value text with sections, stable hashing.

Every run is driven by one RunConfig. The resolved values of the
training-relevant sections ([task], [data], [train]) are hashed to a
stable 64-bit identifier that gets embedded in every artifact (datasets,
checkpoints, logs, reports), so mismatched artifact/config pairs are
detectable. Evaluation-only keys stay outside the hash on purpose: the
same trained artifacts serve any evaluation setting.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .sim import TaskSpec
from .train import TrainConfig, Variant

# Evaluation seeds start here so they never collide with demo seeds.
EVAL_SEED_BASE = 1_000_000

OUTPUT_ROOT_ENV = "ARPOL_OUTPUT_ROOT"


@dataclass
class RunConfig:
    # [task]
    grasp_radius: float = 0.02
    goal_radius: float = 0.03
    max_step_len: float = 0.08
    max_steps: int = 120
    obj_spawn_region: tuple = (0.10, 0.55, 0.45, 0.90)
    goal_spawn_region: tuple = (0.55, 0.55, 0.90, 0.90)
    task_id: int = 0
    num_tasks: int = 1
    # [data]
    n_episodes: int = 200
    jitter_std: float = 0.15
    data_seed: int = 0
    dataset_path: str = ""      # empty means <output_dir>/dataset.jsonl
    # [train]
    horizon: int = 8
    arm_dim: int = 3
    latent_dim: int = 16
    hidden_widths: tuple = (128, 128)
    epsilon: float = 0.05
    lambda_grip: float = 0.01
    phase1_steps: int = 20000
    phase2_steps: int = 8000
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    variant: str = "Full"
    # [eval]
    eval_seeds: int = 200
    execute_steps: int = 0      # 0 means the full chunk
    profile_window: int = 10
    # [run]
    output_dir: str = "runs/default"
    emit_svg: bool = False

    def task_spec(self) -> TaskSpec:
        return TaskSpec(grasp_radius=self.grasp_radius, goal_radius=self.goal_radius,
                        max_step_len=self.max_step_len, max_steps=self.max_steps,
                        obj_spawn_region=tuple(self.obj_spawn_region),
                        goal_spawn_region=tuple(self.goal_spawn_region),
                        task_id=self.task_id, num_tasks=self.num_tasks)

    def train_config(self) -> TrainConfig:
        return TrainConfig(horizon=self.horizon, arm_dim=self.arm_dim,
                           context_dim=10 + self.num_tasks,
                           latent_dim=self.latent_dim,
                           hidden_widths=tuple(self.hidden_widths),
                           epsilon=self.epsilon, lambda_grip=self.lambda_grip,
                           phase1_steps=self.phase1_steps, phase2_steps=self.phase2_steps,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.seed, variant=Variant(self.variant))

    def eval_seed_list(self) -> list:
        return [EVAL_SEED_BASE + i for i in range(self.eval_seeds)]


_SECTIONS = {
    "task": ("grasp_radius", "goal_radius", "max_step_len", "max_steps",
             "obj_spawn_region", "goal_spawn_region", "task_id", "num_tasks"),
    "data": ("n_episodes", "jitter_std", "data_seed", "dataset_path"),
    "train": ("horizon", "arm_dim", "latent_dim", "hidden_widths", "epsilon",
              "lambda_grip", "phase1_steps", "phase2_steps", "batch_size",
              "learning_rate", "seed", "variant"),
    "eval": ("eval_seeds", "execute_steps", "profile_window"),
    "run": ("output_dir", "emit_svg"),
}

# Sections that determine training artifacts; only these enter the hash.
_HASHED_SECTIONS = ("task", "data", "train")
# Pure file-location keys never affect results, so they stay out of the hash.
_UNHASHED_KEYS = ("dataset_path",)

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[key]
    try:
        if key in ("obj_spawn_region", "goal_spawn_region", "hidden_widths"):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            if key == "hidden_widths":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        if ftype == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and overrides.

    Unknown sections or keys are rejected rather than ignored.
    """
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                values[key] = _parse_value(key, raw)
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = val
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_config(cfg: RunConfig) -> str:
    """Canonical text form: sections in fixed order, keys in declared order."""
    out = io.StringIO()
    for section, keys in _SECTIONS.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_format_value(getattr(cfg, key))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: RunConfig) -> str:
    """Stable 64-bit hash (16 hex chars) over the training-relevant sections."""
    h = hashlib.sha256()
    for section in _HASHED_SECTIONS:
        for key in _SECTIONS[section]:
            if key in _UNHASHED_KEYS:
                continue
            h.update(f"{section}.{key}={_format_value(getattr(cfg, key))}\n".encode())
    return h.hexdigest()[:16]
