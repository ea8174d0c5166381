"""Synthetic desk-scale tasks, scripted experts and closed-loop rollouts.

Two point-agent tasks on the unit square:

``reach``
    Start near the bottom, goal near the top, a disc obstacle in the
    middle. The expert passes it on the left (clockwise) or the right
    (counterclockwise) with equal probability, so the demonstrations are
    bimodal given the observation.
``waypoints``
    One waypoint pattern per task id: out from the centre along a
    task-specific heading, then a quarter turn. Task ids must be
    distinguished from the observation alone.

Actions are per-step displacements. Chunks are executed open loop.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

from .conditioning import Observation
from .dataset import Dataset, DatasetInfo, Episode
from .errors import ConfigError, RolloutError

ARENA_LOW = 0.0
ARENA_HIGH = 1.0
OBSTACLE_CENTER = np.array([0.5, 0.5])
OBSTACLE_RADIUS = 0.15
ACTION_CLIP = 0.2
SUCCESS_TOLERANCE = 0.05
MAX_CHUNKS = 16
DIVERGENCE_LIMIT = 10.0
ACTION_DIM = 2
FEATURE_DIM = 4
PROPRIO_DIM = 2

REACH_START = np.array([0.5, 0.15])
REACH_GOAL = np.array([0.5, 0.85])
REACH_JITTER = 0.05
SIDE_OFFSET = 0.3
# mode index -> (name, side of the obstacle the expert passes on)
MODES: Tuple[Tuple[str, float], ...] = (("cw", -1.0), ("ccw", 1.0))
STEP_LENGTH = 0.04

WAYPOINT_JITTER = 0.03
WAYPOINT_OUT = 0.35
WAYPOINT_TURN = 0.25
WAYPOINT_SEGMENT_STEPS = 8

TASKS = ("reach", "waypoints")


def _seeded(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def eased_segment(start: np.ndarray, end: np.ndarray, steps: int) -> np.ndarray:
    """``steps`` positions from ``start`` (exclusive) to ``end`` (inclusive).

    Cosine easing: slow at both ends, so the displacement profile is
    smooth and its coarse averages carry the shape of the motion.
    """
    u = np.arange(1, steps + 1) / steps
    ease = 0.5 - 0.5 * np.cos(np.pi * u)
    return start + np.outer(ease, end - start)


def segment_hits_disc(a: np.ndarray, b: np.ndarray, center: np.ndarray, radius: float) -> bool:
    """Whether the segment ``a -> b`` comes within ``radius`` of ``center``."""
    d = b - a
    denom = float(d @ d)
    t = 0.0 if denom == 0.0 else float(np.clip((center - a) @ d / denom, 0.0, 1.0))
    closest = a + t * d
    return bool(np.linalg.norm(closest - center) < radius)


def pad_to_chunks(displacements: np.ndarray, chunk_length: int) -> np.ndarray:
    """Zero-pad ``(n, A)`` displacements to a multiple of ``T`` and chunk them."""
    n, width = displacements.shape
    total = max(1, math.ceil(n / chunk_length)) * chunk_length
    padded = np.zeros((total, width))
    padded[:n] = displacements
    return padded.reshape(-1, chunk_length, width)


@dataclass
class EnvState:
    agent: np.ndarray
    goal: np.ndarray
    mode: int = -1
    step: int = 0
    waypoints: List[np.ndarray] = field(default_factory=list)
    next_waypoint: int = 0
    collisions: int = 0


class Environment:
    """Point agent on the unit square; subclasses define the task."""

    name = "base"
    has_obstacle = False

    def __init__(self, task_id: int = 0):
        self.task_id = task_id
        self.state = EnvState(agent=np.zeros(2), goal=np.zeros(2))

    def reset(self, rng: np.random.Generator) -> Observation:
        raise NotImplementedError

    @property
    def target(self) -> np.ndarray:
        """Goal, or the next unvisited waypoint."""
        s = self.state
        if s.waypoints and s.next_waypoint < len(s.waypoints):
            return s.waypoints[s.next_waypoint]
        return s.goal

    def observe(self) -> Observation:
        agent = self.state.agent
        return Observation(
            features=np.concatenate([agent, self.target]).astype(np.float32),
            proprio=agent.astype(np.float32),
            task_id=self.task_id,
        )

    @property
    def done(self) -> bool:
        s = self.state
        if s.waypoints and s.next_waypoint < len(s.waypoints):
            return False
        return bool(np.linalg.norm(s.agent - s.goal) <= SUCCESS_TOLERANCE)

    def step(self, action: np.ndarray) -> None:
        """Apply one clipped displacement."""
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise RolloutError(f"non-finite action {action.tolist()} at step {self.state.step}")
        move = np.clip(action, -ACTION_CLIP, ACTION_CLIP)
        s = self.state
        nxt = s.agent + move
        if np.any(np.abs(nxt) > DIVERGENCE_LIMIT):
            raise RolloutError(f"agent left the arena: {nxt.tolist()}")
        if self.has_obstacle and segment_hits_disc(s.agent, nxt, OBSTACLE_CENTER, OBSTACLE_RADIUS):
            s.collisions += 1
        else:
            s.agent = np.clip(nxt, ARENA_LOW, ARENA_HIGH)
        s.step += 1
        if s.waypoints and s.next_waypoint < len(s.waypoints):
            if np.linalg.norm(s.agent - s.waypoints[s.next_waypoint]) <= SUCCESS_TOLERANCE:
                s.next_waypoint += 1


class ReachEnv(Environment):
    name = "reach"
    has_obstacle = True

    def reset(self, rng: np.random.Generator) -> Observation:
        start = REACH_START + rng.uniform(-REACH_JITTER, REACH_JITTER, size=2)
        goal = REACH_GOAL + rng.uniform(-REACH_JITTER, REACH_JITTER, size=2)
        self.state = EnvState(agent=start, goal=goal)
        return self.observe()


class WaypointEnv(Environment):
    name = "waypoints"

    def __init__(self, task_id: int = 0, num_tasks: int = 2):
        if num_tasks < 2:
            raise ConfigError(f"waypoints task needs num_tasks >= 2, got {num_tasks}")
        if not 0 <= task_id < num_tasks:
            raise ConfigError(f"task id {task_id} outside [0, {num_tasks})")
        super().__init__(task_id)
        self.num_tasks = num_tasks

    def pattern(self, start: np.ndarray) -> List[np.ndarray]:
        phi = 2.0 * math.pi * self.task_id / self.num_tasks
        out = np.array([math.cos(phi), math.sin(phi)])
        turn = np.array([math.cos(phi + math.pi / 2), math.sin(phi + math.pi / 2)])
        first = start + WAYPOINT_OUT * out
        return [first, first + WAYPOINT_TURN * turn]

    def reset(self, rng: np.random.Generator) -> Observation:
        start = np.array([0.5, 0.5]) + rng.uniform(-WAYPOINT_JITTER, WAYPOINT_JITTER, size=2)
        waypoints = self.pattern(start)
        self.state = EnvState(agent=start, goal=waypoints[-1], waypoints=waypoints)
        return self.observe()


def make_env(task: str, task_id: int = 0, num_tasks: int = 2) -> Environment:
    if task == "reach":
        return ReachEnv(task_id)
    if task == "waypoints":
        return WaypointEnv(task_id, num_tasks)
    raise ConfigError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")


def plan_reach(start: np.ndarray, goal: np.ndarray, mode: int) -> np.ndarray:
    """Displacements around the obstacle on the side given by ``mode``."""
    side = MODES[mode][1]
    via = np.array([OBSTACLE_CENTER[0] + side * SIDE_OFFSET, OBSTACLE_CENTER[1]])
    points = [start]
    for a, b in ((start, via), (via, goal)):
        steps = max(2, math.ceil(float(np.linalg.norm(b - a)) / STEP_LENGTH))
        points.extend(eased_segment(a, b, steps))
    return np.diff(np.asarray(points), axis=0)


def plan_waypoints(start: np.ndarray, waypoints: List[np.ndarray]) -> np.ndarray:
    points = [start]
    prev = start
    for wp in waypoints:
        points.extend(eased_segment(prev, wp, WAYPOINT_SEGMENT_STEPS))
        prev = wp
    return np.diff(np.asarray(points), axis=0)


class Agent(Protocol):
    def reset(self, env: Environment) -> None: ...

    def act(self, observation: Observation) -> np.ndarray: ...


class ScriptedExpert:
    """Plans once per episode from the environment state and replays it.

    On the reach task the detour side is drawn from ``rng`` unless
    ``mode`` is fixed.
    """

    def __init__(
        self,
        chunk_length: int,
        rng: Optional[np.random.Generator] = None,
        mode: Optional[int] = None,
    ):
        self.chunk_length = chunk_length
        self.rng = rng or np.random.default_rng(0)
        self.fixed_mode = mode
        self.mode = -1
        self.chunks = np.zeros((0, chunk_length, ACTION_DIM))
        self.cursor = 0

    def reset(self, env: Environment) -> None:
        s = env.state
        if isinstance(env, ReachEnv):
            self.mode = (
                self.fixed_mode if self.fixed_mode is not None else int(self.rng.integers(len(MODES)))
            )
            s.mode = self.mode
            plan = plan_reach(s.agent, s.goal, self.mode)
        else:
            plan = plan_waypoints(s.agent, s.waypoints)
        self.chunks = pad_to_chunks(plan, self.chunk_length)
        self.cursor = 0

    def act(self, observation: Observation) -> np.ndarray:
        if self.cursor >= len(self.chunks):
            return np.zeros((self.chunk_length, ACTION_DIM))
        chunk = self.chunks[self.cursor]
        self.cursor += 1
        return chunk


class RandomAgent:
    """Uniform displacements within the action clip."""

    def __init__(self, chunk_length: int, rng: Optional[np.random.Generator] = None):
        self.chunk_length = chunk_length
        self.rng = rng or np.random.default_rng(0)

    def reset(self, env: Environment) -> None:
        pass

    def act(self, observation: Observation) -> np.ndarray:
        return self.rng.uniform(-ACTION_CLIP, ACTION_CLIP, size=(self.chunk_length, ACTION_DIM))


@dataclass
class RolloutOutcome:
    """Result of one closed-loop episode."""

    index: int
    task_id: int
    success: bool
    chunks_used: int
    collisions: int
    final_distance: float
    trajectory: List[List[float]]
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "task_id": self.task_id,
            "success": self.success,
            "chunks_used": self.chunks_used,
            "collisions": self.collisions,
            "final_distance": self.final_distance,
            "trajectory": self.trajectory,
            "error": self.error,
        }


def rollout(
    agent: Agent,
    env: Environment,
    rng: np.random.Generator,
    max_chunks: int = MAX_CHUNKS,
    index: int = 0,
) -> RolloutOutcome:
    """
    Run one episode open loop, chunk by chunk

    Success means the goal (after every waypoint, in order) is within
    tolerance at some step before the chunk budget runs out. Obstacle
    contact and divergence both end the episode as a failure.
    """
    env.reset(rng)
    agent.reset(env)
    trajectory = [env.state.agent.tolist()]
    chunks_used = 0
    error = None
    try:
        while chunks_used < max_chunks and not (env.done or env.state.collisions):
            chunk = np.asarray(agent.act(env.observe()))
            chunks_used += 1
            for action in chunk:
                env.step(action)
                trajectory.append(env.state.agent.tolist())
                if env.done or env.state.collisions:
                    break
    except RolloutError as exc:
        logging.warning("Rollout %d diverged: %s", index, exc)
        error = str(exc)

    s = env.state
    return RolloutOutcome(
        index=index,
        task_id=env.task_id,
        success=error is None and s.collisions == 0 and env.done,
        chunks_used=chunks_used,
        collisions=s.collisions,
        final_distance=float(np.linalg.norm(s.agent - s.goal)),
        trajectory=trajectory,
        error=error,
    )


def _record_episode(env: Environment, expert: ScriptedExpert, meta: Dict) -> Episode:
    features, proprio, chunks = [], [], []
    for chunk in expert.chunks:
        obs = env.observe()
        features.append(obs.features)
        proprio.append(obs.proprio)
        chunks.append(chunk)
        for action in chunk:
            env.step(action)
    meta["final"] = env.state.agent.tolist()
    return Episode(
        task_id=env.task_id,
        features=np.asarray(features),
        proprio=np.asarray(proprio),
        chunks=np.asarray(chunks),
        mode=expert.mode,
        metadata=meta,
    )


def gen_multimodal_reach(n_episodes: int, seed: int, chunk_length: int = 8) -> Dataset:
    """Reach demonstrations with an exactly balanced detour side.

    Each episode's side is a fair coin marginally; the sides are drawn as
    a shuffled half/half assignment so the two modes are equally common.
    """
    if n_episodes < 1:
        raise ConfigError(f"need at least one episode, got {n_episodes}")
    modes = _seeded(seed, 0).permutation(n_episodes) % len(MODES)
    episodes = []
    for k in range(n_episodes):
        env = ReachEnv()
        env.reset(_seeded(seed, 1, k))
        expert = ScriptedExpert(chunk_length, mode=int(modes[k]))
        expert.reset(env)
        meta = {
            "seed": seed,
            "index": k,
            "start": env.state.agent.tolist(),
            "goal": env.state.goal.tolist(),
            "mode": MODES[expert.mode][0],
        }
        episodes.append(_record_episode(env, expert, meta))
    info = DatasetInfo(chunk_length, ACTION_DIM, 1, FEATURE_DIM, PROPRIO_DIM)
    return Dataset.from_episodes(episodes, info)


def gen_multitask_waypoints(
    n_episodes: int, num_tasks: int, seed: int, chunk_length: int = 8
) -> Dataset:
    """Waypoint demonstrations; episode ``k`` belongs to task ``k % num_tasks``."""
    if num_tasks < 2:
        raise ConfigError(f"waypoints task needs num_tasks >= 2, got {num_tasks}")
    if n_episodes < 1:
        raise ConfigError(f"need at least one episode, got {n_episodes}")
    episodes = []
    for k in range(n_episodes):
        env = WaypointEnv(k % num_tasks, num_tasks)
        env.reset(_seeded(seed, 1, k))
        expert = ScriptedExpert(chunk_length)
        expert.reset(env)
        meta = {
            "seed": seed,
            "index": k,
            "start": env.state.agent.tolist(),
            "waypoints": [w.tolist() for w in env.state.waypoints],
        }
        episodes.append(_record_episode(env, expert, meta))
    info = DatasetInfo(chunk_length, ACTION_DIM, num_tasks, FEATURE_DIM, PROPRIO_DIM)
    return Dataset.from_episodes(episodes, info)


def generate(
    task: str, n_episodes: int, seed: int, chunk_length: int = 8, num_tasks: int = 2
) -> Dataset:
    if task == "reach":
        return gen_multimodal_reach(n_episodes, seed, chunk_length)
    if task == "waypoints":
        return gen_multitask_waypoints(n_episodes, num_tasks, seed, chunk_length)
    raise ConfigError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")


def task_centroids(dataset: Dataset) -> Dict[int, np.ndarray]:
    """Mean ``(T, A)`` action chunk of each task, over all its chunks."""
    out: Dict[int, np.ndarray] = {}
    for task_id in sorted({e.task_id for e in dataset}):
        chunks = np.concatenate([e.chunks for e in dataset if e.task_id == task_id])
        out[task_id] = chunks.astype(np.float64).mean(axis=0)
    return out


def mode_of_path(start: np.ndarray, points: np.ndarray, margin: float = 0.01) -> int:
    """Detour side of a path: 0 (left), 1 (right) or -1 (undecided)."""
    shift = float(points[-1][0] - start[0])
    if shift < -margin:
        return 0
    if shift > margin:
        return 1
    return -1


def path_crosses_obstacle(points: np.ndarray) -> bool:
    return any(
        segment_hits_disc(a, b, OBSTACLE_CENTER, OBSTACLE_RADIUS) for a, b in zip(points, points[1:])
    )


AgentFactory = Callable[[int], Agent]
