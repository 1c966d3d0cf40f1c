"""Deterministic planar pick-and-place world, scripted expert, and datasets.

The world is pure kinematics on the unit square: a 3-DoF end effector
(x, y, heading) with a binary gripper must grasp an object and release it
inside a goal radius. Grasping only succeeds within a tight contact
radius, so coarse policies plausibly miss it while a scripted
coarse-to-fine expert never does. All randomness comes from counter-based
(Philox) generators keyed on integer seeds, so runs are bit-reproducible
and order-independent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import ActionChunk
from .errors import ConfigError, ContractError

DATASET_FORMAT_VERSION = 1

# Home pose of the end effector at reset.
HOME_EE = (0.5, 0.1)
HOME_HEADING = 0.0


class OutcomeTag(str, Enum):
    SUCCESS = "Success"
    GRIP_CLOSE_MISS = "GripCloseMiss"
    GRIP_EARLY_RELEASE = "GripEarlyRelease"
    GRIP_NEVER_CLOSED = "GripNeverClosed"
    ARM_NEVER_REACHED = "ArmNeverReached"
    TIMEOUT = "Timeout"


GRIPPER_RELATED = (OutcomeTag.GRIP_CLOSE_MISS, OutcomeTag.GRIP_EARLY_RELEASE,
                   OutcomeTag.GRIP_NEVER_CLOSED)


@dataclass(frozen=True)
class TaskSpec:
    grasp_radius: float = 0.02
    goal_radius: float = 0.03
    max_step_len: float = 0.08
    max_steps: int = 120
    obj_spawn_region: tuple = (0.10, 0.55, 0.45, 0.90)   # xmin, ymin, xmax, ymax
    goal_spawn_region: tuple = (0.55, 0.55, 0.90, 0.90)
    task_id: int = 0
    num_tasks: int = 1

    def __post_init__(self):
        if self.grasp_radius <= 0 or self.goal_radius <= 0 or self.max_step_len <= 0:
            raise ContractError("radii and max_step_len must be > 0")
        if self.max_steps < 1:
            raise ContractError("max_steps must be >= 1")
        for region in (self.obj_spawn_region, self.goal_spawn_region):
            x0, y0, x1, y1 = region
            if not (0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1):
                raise ContractError(f"spawn region {region} must lie inside the unit workspace")
        if not (0 <= self.task_id < self.num_tasks):
            raise ContractError("task_id must lie in [0, num_tasks)")

    @property
    def context_dim(self) -> int:
        return 10 + self.num_tasks


@dataclass(frozen=True)
class WorldState:
    ee: tuple          # (x, y), meters in [0, 1]^2
    heading: float     # radians in (-pi, pi]
    gripper: int       # 0 open, 1 closed
    held: bool
    obj: tuple
    goal: tuple
    step_index: int


@dataclass
class StepEvents:
    close_miss: bool = False
    released: bool = False
    success: bool = False
    within_grasp: bool = False   # ee within grasp_radius of the object, post-move


def _wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def _dist(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _episode_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed % (1 << 64)))


def _spawn(task: TaskSpec, rng: np.random.Generator):
    x0, y0, x1, y1 = task.obj_spawn_region
    obj = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
    x0, y0, x1, y1 = task.goal_spawn_region
    goal = (float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)))
    return obj, goal


def reset(task: TaskSpec, seed: int) -> WorldState:
    """Initial state: ee at home, obj/goal sampled from their spawn regions.

    Zero-area regions degrade to their corner. Same (task, seed) gives an
    identical state every time.
    """
    obj, goal = _spawn(task, _episode_rng(seed))
    return WorldState(ee=HOME_EE, heading=HOME_HEADING, gripper=0, held=False,
                      obj=obj, goal=goal, step_index=0)


def step_state(task: TaskSpec, state: WorldState, arm_delta, grip_cmd: int):
    """Advance one step. Pure: (task, state, action) fully determines the result.

    Movement applies first (clamped to the workspace, heading wrapped),
    then the gripper command. Closing within grasp_radius of the object
    grasps it (boundary inclusive); closing anywhere else records a
    close-miss. Opening while holding drops the object at the ee, which
    succeeds iff it lands within goal_radius of the goal.

    Returns (new_state, done, events).
    """
    d = np.asarray(arm_delta, dtype=np.float64)
    if d.shape != (3,) or not np.all(np.isfinite(d)):
        raise ContractError(f"arm_delta must be a finite 3-vector, got {arm_delta!r}")
    if grip_cmd not in (0, 1):
        raise ContractError(f"grip_cmd must be 0 or 1, got {grip_cmd!r}")

    step = d * task.max_step_len
    ee = (min(1.0, max(0.0, state.ee[0] + float(step[0]))),
          min(1.0, max(0.0, state.ee[1] + float(step[1]))))
    heading = _wrap_angle(state.heading + float(step[2]))
    held = state.held
    obj = ee if held else state.obj
    gripper = state.gripper
    ev = StepEvents()

    if grip_cmd == 1 and gripper == 0:
        if not held and _dist(ee, obj) <= task.grasp_radius:
            held = True
            obj = ee
        else:
            ev.close_miss = True
        gripper = 1
    elif grip_cmd == 0 and gripper == 1:
        gripper = 0
        if held:
            held = False
            ev.released = True
            ev.success = _dist(obj, state.goal) <= task.goal_radius
    ev.within_grasp = _dist(ee, obj) <= task.grasp_radius

    new = WorldState(ee=ee, heading=heading, gripper=gripper, held=held,
                     obj=obj, goal=state.goal, step_index=state.step_index + 1)
    done = ev.success or new.step_index >= task.max_steps
    return new, done, ev


def encode_context(task: TaskSpec, state: WorldState) -> np.ndarray:
    """Observation vector: pose, gripper/held flags, obj, goal, task one-hot.

    Positions are mapped from [0, 1] to [-1, 1]; heading enters as
    (sin, cos).
    """
    one_hot = [0.0] * task.num_tasks
    one_hot[task.task_id] = 1.0
    return np.array([
        state.ee[0] * 2.0 - 1.0, state.ee[1] * 2.0 - 1.0,
        math.sin(state.heading), math.cos(state.heading),
        float(state.gripper), float(state.held),
        state.obj[0] * 2.0 - 1.0, state.obj[1] * 2.0 - 1.0,
        state.goal[0] * 2.0 - 1.0, state.goal[1] * 2.0 - 1.0,
        *one_hot,
    ], dtype=np.float64)


def decode_context(task: TaskSpec, ctx, step_index: int = 0) -> WorldState:
    """Inverse of encode_context (exact up to float rounding in the heading)."""
    ctx = np.asarray(ctx, dtype=np.float64)
    if ctx.shape != (task.context_dim,):
        raise ContractError(f"context has shape {ctx.shape}, expected ({task.context_dim},)")
    return WorldState(
        ee=((ctx[0] + 1.0) / 2.0, (ctx[1] + 1.0) / 2.0),
        heading=math.atan2(ctx[2], ctx[3]),
        gripper=int(round(ctx[4])),
        held=bool(round(ctx[5])),
        obj=((ctx[6] + 1.0) / 2.0, (ctx[7] + 1.0) / 2.0),
        goal=((ctx[8] + 1.0) / 2.0, (ctx[9] + 1.0) / 2.0),
        step_index=step_index,
    )


def classify_trace(success: bool, close_miss: bool, early_release: bool,
                   ever_closed: bool, ever_within_grasp: bool) -> OutcomeTag:
    """Failure taxonomy; first matching rule in precedence order wins."""
    if success:
        return OutcomeTag.SUCCESS
    if close_miss:
        return OutcomeTag.GRIP_CLOSE_MISS
    if early_release:
        return OutcomeTag.GRIP_EARLY_RELEASE
    if not ever_closed and ever_within_grasp:
        return OutcomeTag.GRIP_NEVER_CLOSED
    if not ever_within_grasp:
        return OutcomeTag.ARM_NEVER_REACHED
    return OutcomeTag.TIMEOUT


class EpisodeRecorder:
    """Steps one episode while tracking the events the taxonomy needs.

    Shared by the expert data generator and by closed-loop policy rollout.
    """

    def __init__(self, task: TaskSpec, seed: int):
        self.task = task
        self.seed = seed
        self.state = reset(task, seed)
        self.states = [self.state]
        self.observations = [encode_context(task, self.state)]
        self.actions = []
        self.switch_steps = []
        self.first_close_dist = None
        self.done = False
        # taxonomy events
        self._success = False
        self._close_miss = False
        self._early_release = False
        self._ever_closed = False
        self._ever_within = _dist(self.state.ee, self.state.obj) <= task.grasp_radius

    def step(self, arm_delta, grip_cmd: int) -> bool:
        if self.done:
            raise ContractError("episode already terminated")
        if grip_cmd != self.state.gripper:
            self.switch_steps.append(len(self.actions))
        if grip_cmd == 1 and self.state.gripper == 0:
            self._ever_closed = True
            if self.first_close_dist is None:
                self.first_close_dist = _dist(self.state.ee, self.state.obj)
        self.actions.append((np.asarray(arm_delta, dtype=np.float64), int(grip_cmd)))
        self.state, self.done, ev = step_state(self.task, self.state, arm_delta, grip_cmd)
        self.states.append(self.state)
        self.observations.append(encode_context(self.task, self.state))
        self._success = self._success or ev.success
        self._close_miss = self._close_miss or ev.close_miss
        if ev.released and not ev.success:
            self._early_release = True
        self._ever_within = self._ever_within or ev.within_grasp
        return self.done

    def outcome(self) -> OutcomeTag:
        if not self.done:
            raise ContractError("outcome requested before termination")
        return classify_trace(self._success, self._close_miss, self._early_release,
                              self._ever_closed, self._ever_within)

    def to_episode(self) -> "Episode":
        return Episode(seed=self.seed, task_id=self.task.task_id,
                       observations=self.observations, actions=self.actions,
                       outcome=self.outcome(), gripper_switch_steps=self.switch_steps)


@dataclass
class Episode:
    seed: int
    task_id: int
    observations: list          # T+1 context vectors
    actions: list               # T tuples (arm_delta (3,), grip)
    outcome: OutcomeTag
    gripper_switch_steps: list  # action indices where the command flipped the gripper

    @property
    def length(self) -> int:
        return len(self.actions)


def classify_outcome(episode: Episode) -> OutcomeTag:
    return episode.outcome


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------

def expert_action(state: WorldState, task: TaskSpec):
    """Scripted coarse-to-fine controller.

    Proportional approach (full-speed transport far out, exact landing
    near the target), close when within half the grasp radius, release
    when the held object is within half the goal radius of the goal.
    Returns (arm_delta normalized to [-1,1]^3, grip_cmd).
    """
    target = state.goal if state.held else state.obj
    dx, dy = target[0] - state.ee[0], target[1] - state.ee[1]
    dist = math.hypot(dx, dy)

    if dist > 0.0:
        step_len = min(task.max_step_len, dist)
        move = (dx / dist * step_len / task.max_step_len,
                dy / dist * step_len / task.max_step_len)
        dtheta = _wrap_angle(math.atan2(dy, dx) - state.heading)
        dtheta = max(-task.max_step_len, min(task.max_step_len, dtheta)) / task.max_step_len
    else:
        move = (0.0, 0.0)
        dtheta = 0.0

    if state.held:
        grip = 0 if dist <= 0.5 * task.goal_radius else 1
    else:
        grip = 1 if dist <= 0.5 * task.grasp_radius else state.gripper

    return np.array([move[0], move[1], dtheta], dtype=np.float64), grip


def _expert_in_transport(state: WorldState, task: TaskSpec) -> bool:
    """Transport phase: the proportional step still saturates at max length."""
    target = state.goal if state.held else state.obj
    return _dist(state.ee, target) >= task.max_step_len


def run_expert_episode(task: TaskSpec, seed: int, jitter_std: float = 0.0) -> Episode:
    """Roll the expert to termination, recording observations and actions.

    Gaussian jitter (drawn after the spawn samples from the same Philox
    stream) perturbs arm deltas only while the controller is in its
    saturated transport phase, keeping terminal precision clean.
    """
    if jitter_std < 0:
        raise ContractError("jitter_std must be >= 0")
    rng = _episode_rng(seed)
    _spawn(task, rng)   # consume the reset draws so jitter continues the stream
    rec = EpisodeRecorder(task, seed)
    while not rec.done:
        arm, grip = expert_action(rec.state, task)
        if jitter_std > 0.0 and _expert_in_transport(rec.state, task):
            arm = np.clip(arm + rng.normal(0.0, jitter_std, size=3), -1.0, 1.0)
        rec.step(arm, grip)
    return rec.to_episode()


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def generate_demos(task: TaskSpec, n_episodes: int, seed: int,
                   jitter_std: float = 0.0) -> list:
    """Expert demonstrations: the first n_episodes successful episodes.

    Candidate seeds run in ascending order from `seed`; failures are
    dropped. If fewer than half of 4*n_episodes attempts succeed the task
    is considered unsolvable by the expert and a ConfigError is raised.
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    episodes = []
    attempts = 0
    next_seed = seed
    max_attempts = 4 * n_episodes
    while len(episodes) < n_episodes:
        if attempts >= max_attempts:
            rate = len(episodes) / attempts
            raise ConfigError(
                f"expert succeeded on {len(episodes)}/{attempts} attempts "
                f"({rate:.0%}); task not solvable under this configuration"
            )
        ep = run_expert_episode(task, next_seed, jitter_std)
        attempts += 1
        next_seed += 1
        if ep.outcome == OutcomeTag.SUCCESS:
            episodes.append(ep)
    return episodes


def slice_chunks(episodes: list, horizon: int):
    """Slice episodes into per-step (context, H-step action chunk) samples.

    Every step t of every episode yields one sample; chunks running past
    the episode end are padded by repeating the final action (with its
    final gripper state). Returns (contexts (N, C), arm (N, H, D),
    grip (N, H)).
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    contexts, arms, grips = [], [], []
    for ep in episodes:
        t_len = ep.length
        for t in range(t_len):
            arm = np.empty((horizon, 3), dtype=np.float64)
            grip = np.empty(horizon, dtype=np.int64)
            for k in range(horizon):
                a, g = ep.actions[min(t + k, t_len - 1)]
                arm[k] = a
                grip[k] = g
            contexts.append(np.asarray(ep.observations[t], dtype=np.float64))
            arms.append(arm)
            grips.append(grip)
    return (np.stack(contexts), np.stack(arms), np.stack(grips))


@dataclass
class ChunkDataset:
    contexts: np.ndarray   # (N, C)
    arm: np.ndarray        # (N, H, D)
    grip: np.ndarray       # (N, H)
    horizon: int
    arm_dim: int
    context_dim: int
    episodes: list

    @classmethod
    def from_episodes(cls, episodes: list, horizon: int) -> "ChunkDataset":
        contexts, arm, grip = slice_chunks(episodes, horizon)
        return cls(contexts=contexts, arm=arm, grip=grip, horizon=horizon,
                   arm_dim=arm.shape[2], context_dim=contexts.shape[1],
                   episodes=episodes)

    @property
    def n_samples(self) -> int:
        return self.contexts.shape[0]


def _episode_record(ep: Episode) -> dict:
    return {
        "seed": ep.seed,
        "task_id": ep.task_id,
        "observations": [[float(v) for v in obs] for obs in ep.observations],
        "actions": [{"arm": [float(v) for v in a], "grip": int(g)} for a, g in ep.actions],
        "outcome": ep.outcome.value,
        "gripper_switch_steps": list(ep.gripper_switch_steps),
    }


def save_dataset(path, episodes: list, task: TaskSpec, horizon: int,
                 config_hash: str) -> None:
    """Line-delimited dataset: one JSON header line, then one episode per line."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "H": horizon,
        "D_arm": 3,
        "context_dim": task.context_dim,
        "normalization": {"position_scale": 2.0, "position_offset": -1.0},
        "config_hash": config_hash,
        "n_episodes": len(episodes),
        "task": {
            "grasp_radius": task.grasp_radius,
            "goal_radius": task.goal_radius,
            "max_step_len": task.max_step_len,
            "max_steps": task.max_steps,
            "obj_spawn_region": list(task.obj_spawn_region),
            "goal_spawn_region": list(task.goal_spawn_region),
            "task_id": task.task_id,
            "num_tasks": task.num_tasks,
        },
    }
    with open(path, "w", encoding="ascii") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for ep in episodes:
            f.write(json.dumps(_episode_record(ep), sort_keys=True,
                               separators=(",", ":")) + "\n")


def load_dataset(path):
    """Read a dataset file back. Returns (episodes, header dict)."""
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format_version") != DATASET_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported dataset format {header.get('format_version')}")
    episodes = []
    for line in lines[1:]:
        rec = json.loads(line)
        episodes.append(Episode(
            seed=rec["seed"],
            task_id=rec["task_id"],
            observations=[np.array(o, dtype=np.float64) for o in rec["observations"]],
            actions=[(np.array(a["arm"], dtype=np.float64), int(a["grip"]))
                     for a in rec["actions"]],
            outcome=OutcomeTag(rec["outcome"]),
            gripper_switch_steps=list(rec["gripper_switch_steps"]),
        ))
    return episodes, header


def task_from_header(header: dict) -> TaskSpec:
    t = header["task"]
    return TaskSpec(grasp_radius=t["grasp_radius"], goal_radius=t["goal_radius"],
                    max_step_len=t["max_step_len"], max_steps=t["max_steps"],
                    obj_spawn_region=tuple(t["obj_spawn_region"]),
                    goal_spawn_region=tuple(t["goal_spawn_region"]),
                    task_id=t["task_id"], num_tasks=t["num_tasks"])


class ExpertChunkPolicy:
    """The scripted expert wrapped as a chunk policy over observations.

    Decodes the world state from the context vector, then simulates the
    expert forward for H steps to emit an action chunk. Used as the
    always-succeeding reference policy in evaluation tests.
    """

    def __init__(self, task: TaskSpec, horizon: int):
        self.task = task
        self.horizon = horizon

    def __call__(self, context):
        state = decode_context(self.task, context)
        arm = np.zeros((self.horizon, 3), dtype=np.float64)
        grip = np.zeros(self.horizon, dtype=np.int64)
        for k in range(self.horizon):
            a, g = expert_action(state, self.task)
            arm[k] = a
            grip[k] = g
            state, done, _ = step_state(self.task, state, a, g)
            if done:
                for j in range(k + 1, self.horizon):
                    arm[j] = a
                    grip[j] = g
                break
        return ActionChunk(arm=arm, grip=grip)
