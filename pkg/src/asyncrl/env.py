"""Simulated multi-task grid manipulation with injectable long-tail latency.

A task instance lives on a small grid with an agent, an object, and a
goal cell, encoded as three stacked one-hot channels.  The policy acts in
chunks of K primitive tokens.  Episode reward is sparse binary: +1 exactly
once, at the transition into the task's success configuration.

Latency is where the asynchrony story lives: every decision step draws a
wall delay from a configurable distribution (constant, lognormal, or
bimodal straggler), which the caller elapses on its scheduler clock.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

Array = np.ndarray

UP, DOWN, LEFT, RIGHT, GRASP, RELEASE, NOOP = range(7)
N_ACTIONS = 7
ACTION_NAMES = ("up", "down", "left", "right", "grasp", "release", "noop")
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}

TASK_KINDS = ("reach", "fetch", "transport")


class UnknownTaskError(ValueError):
    pass


class IllegalTransitionError(RuntimeError):
    pass


class InvalidActionError(ValueError):
    pass


class LatencyConfigError(ValueError):
    pass


class UnsolvableInstanceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    """Flat 3*H*W grid encoding plus episode step index and task id."""

    vec: Array
    step: int
    task_id: int

    def __post_init__(self) -> None:
        v = np.asarray(self.vec, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "vec", v)


@dataclass(frozen=True)
class LatencyModel:
    """Wall-delay distribution for one env step, all durations in seconds.

    kind "constant": always `value`.
    kind "lognormal": median * exp(sigma * N(0,1)).
    kind "bimodal": `slow` with probability p_slow, else `fast`.
    `scale` multiplies every sample (per-worker heterogeneity knob).
    """

    kind: str = "constant"
    value: float = 0.0
    median: float = 0.005
    sigma: float = 1.0
    fast: float = 0.002
    slow: float = 0.2
    p_slow: float = 0.1
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "lognormal", "bimodal"):
            raise LatencyConfigError(f"unknown latency kind {self.kind!r}")
        if self.scale < 0:
            raise LatencyConfigError("scale must be >= 0")
        if self.kind == "constant" and self.value < 0:
            raise LatencyConfigError("constant latency must be >= 0")
        if self.kind == "lognormal" and (self.median <= 0 or self.sigma < 0):
            raise LatencyConfigError("lognormal needs median > 0 and sigma >= 0")
        if self.kind == "bimodal":
            if self.fast < 0 or self.slow < 0:
                raise LatencyConfigError("bimodal delays must be >= 0")
            if not 0.0 <= self.p_slow <= 1.0:
                raise LatencyConfigError("p_slow must be in [0, 1]")

    def scaled(self, factor: float) -> "LatencyModel":
        return replace(self, scale=self.scale * factor)


def sample_latency(model: LatencyModel, rng: np.random.Generator) -> float:
    if model.kind == "constant":
        return model.value * model.scale
    if model.kind == "lognormal":
        return model.median * float(np.exp(model.sigma * rng.standard_normal())) * model.scale
    # bimodal straggler
    delay = model.slow if rng.random() < model.p_slow else model.fast
    return delay * model.scale


@dataclass
class EnvState:
    """Mutable episode state; owned by exactly one worker at a time."""

    task_id: int
    kind: str
    height: int
    width: int
    agent: tuple[int, int]
    obj: tuple[int, int]
    goal: tuple[int, int]
    carrying: bool = False
    step_count: int = 0
    terminal: bool = False
    succeeded: bool = False
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def encode(self) -> Array:
        grid = np.zeros((3, self.height, self.width), dtype=np.float64)
        grid[0][self.agent] = 1.0
        grid[1][self.obj] = 2.0 if self.carrying else 1.0
        grid[2][self.goal] = 1.0
        # Boards of different kinds can render identically, so the kind
        # must be part of the observation for the policy to act on it.
        kind_block = np.zeros(len(TASK_KINDS), dtype=np.float64)
        kind_block[TASK_KINDS.index(self.kind)] = 1.0
        return np.concatenate([grid.ravel(), kind_block])

    def observation(self) -> Observation:
        return Observation(self.encode(), self.step_count, self.task_id)


@dataclass(frozen=True)
class StepResult:
    obs: Observation
    reward: float
    done: bool
    wall_delay: float


@dataclass(frozen=True)
class TaskSuiteConfig:
    height: int = 8
    width: int = 8
    num_tasks: int = 2
    horizon: int = 32          # max decisions (chunks) per episode
    chunk_len: int = 4
    kinds: tuple[str, ...] = ("reach", "fetch")
    latency: LatencyModel = field(default_factory=LatencyModel)

    def __post_init__(self) -> None:
        if self.num_tasks < 1:
            raise UnknownTaskError("num_tasks must be >= 1")
        if self.horizon < 1 or self.chunk_len < 1:
            raise ValueError("horizon and chunk_len must be >= 1")
        for k in self.kinds:
            if k not in TASK_KINDS:
                raise UnknownTaskError(f"unknown task kind {k!r} (valid: {TASK_KINDS})")

    @property
    def obs_dim(self) -> int:
        return 3 * self.height * self.width + len(TASK_KINDS)


class GridTaskSuite:
    """Factory for episodes across `num_tasks` tasks; stateless between calls."""

    def __init__(self, cfg: TaskSuiteConfig) -> None:
        self.cfg = cfg

    def task_kind(self, task_id: int) -> str:
        self._check_task(task_id)
        return self.cfg.kinds[task_id % len(self.cfg.kinds)]

    def _check_task(self, task_id: int) -> None:
        if not 0 <= task_id < self.cfg.num_tasks:
            raise UnknownTaskError(
                f"task_id {task_id} outside valid range [0, {self.cfg.num_tasks})"
            )

    def reset(self, task_id: int, seed: int) -> EnvState:
        """Deterministic in (task_id, seed); every instance is solvable
        within the horizon (breadth-first search on small grids, exact
        shortest-solution length otherwise)."""
        self._check_task(task_id)
        kind = self.task_kind(task_id)
        cfg = self.cfg
        layout_rng = np.random.default_rng(np.random.SeedSequence([task_id, seed]))
        n_cells = cfg.height * cfg.width
        if n_cells < 3:
            raise UnsolvableInstanceError("grid too small for distinct agent/object/goal")
        for _ in range(64):
            cells = layout_rng.choice(n_cells, size=3, replace=False)
            agent, obj, goal = (divmod(int(c), cfg.width) for c in cells)
            state = EnvState(
                task_id=task_id, kind=kind, height=cfg.height, width=cfg.width,
                agent=agent, obj=obj, goal=goal,
                rng=np.random.default_rng(np.random.SeedSequence([task_id, seed, 1])),
            )
            budget = cfg.horizon * cfg.chunk_len
            if n_cells <= 16:
                solution = bfs_shortest_solution(state, budget)
                if solution is not None:
                    return state
            else:
                if len(solve(state)) <= budget:
                    return state
        raise UnsolvableInstanceError(
            f"no solvable layout for task {task_id} seed {seed} within horizon"
        )

    def step(
        self,
        state: EnvState,
        chunk: Array | list[int],
        latency: LatencyModel | None = None,
    ) -> StepResult:
        """Apply one K-token action chunk; one decision step.

        Tokens after the success transition are discarded.  wall_delay is
        drawn here but elapsed by the caller (on whichever clock it runs).
        """
        cfg = self.cfg
        if state.terminal:
            raise IllegalTransitionError("step on terminal episode")
        tokens = np.asarray(chunk, dtype=np.int64)
        if tokens.shape != (cfg.chunk_len,):
            raise InvalidActionError(
                f"chunk must have exactly {cfg.chunk_len} tokens, got shape {tokens.shape}"
            )
        if np.any(tokens < 0) or np.any(tokens >= N_ACTIONS):
            raise InvalidActionError(f"token outside action vocabulary [0, {N_ACTIONS})")
        reward = 0.0
        for token in tokens:
            if state.succeeded:
                break
            apply_token(state, int(token))
            if is_success(state):
                state.succeeded = True
                reward = 1.0
        state.step_count += 1
        done = state.succeeded or state.step_count >= cfg.horizon
        state.terminal = done
        model = latency if latency is not None else cfg.latency
        delay = sample_latency(model, state.rng)
        return StepResult(state.observation(), reward, done, delay)

    def snap_observation(self, vec: Array) -> Array:
        """Project an arbitrary real vector onto the nearest valid encoding.

        Used on regression-model predictions so imagined frames stay in
        the same discrete observation family the policy trains on.
        """
        cfg = self.cfg
        flat = np.asarray(vec, dtype=np.float64)
        n_cells = 3 * cfg.height * cfg.width
        grid = flat[:n_cells].reshape(3, cfg.height, cfg.width)
        out = np.zeros_like(grid)
        agent_cell = np.unravel_index(int(np.argmax(grid[0])), grid[0].shape)
        out[0][agent_cell] = 1.0
        obj_flat = int(np.argmax(grid[1]))
        obj_cell = np.unravel_index(obj_flat, grid[1].shape)
        carried = grid[1].flat[obj_flat] > 1.5
        if carried:
            out[1][agent_cell] = 2.0  # a carried object rides the agent
        else:
            out[1][obj_cell] = 1.0
        goal_cell = np.unravel_index(int(np.argmax(grid[2])), grid[2].shape)
        out[2][goal_cell] = 1.0
        kind_block = np.zeros(len(TASK_KINDS), dtype=np.float64)
        kind_block[int(np.argmax(flat[n_cells:]))] = 1.0
        return np.concatenate([out.ravel(), kind_block])


def apply_token(state: EnvState, token: int) -> None:
    if token in _MOVES:
        dy, dx = _MOVES[token]
        ny = min(max(state.agent[0] + dy, 0), state.height - 1)
        nx = min(max(state.agent[1] + dx, 0), state.width - 1)
        state.agent = (ny, nx)
        if state.carrying:
            state.obj = state.agent
    elif token == GRASP:
        if not state.carrying and state.agent == state.obj:
            state.carrying = True
    elif token == RELEASE:
        if state.carrying:
            state.carrying = False
    elif token == NOOP:
        pass
    else:
        raise InvalidActionError(f"token {token} outside action vocabulary")


def is_success(state: EnvState) -> bool:
    if state.kind == "reach":
        return state.agent == state.goal
    if state.kind == "fetch":
        return state.carrying
    if state.kind == "transport":
        return state.obj == state.goal and not state.carrying
    raise UnknownTaskError(f"unknown task kind {state.kind!r}")


# --------------------------------------------------------------------------
# Solvers.  solve() composes a shortest token sequence analytically (the
# grid has no obstacles); bfs_shortest_solution() searches the primitive
# transition graph and is the reference used on small grids.


def _moves_between(src: tuple[int, int], dst: tuple[int, int]) -> list[int]:
    tokens: list[int] = []
    dy = dst[0] - src[0]
    dx = dst[1] - src[1]
    tokens += [DOWN if dy > 0 else UP] * abs(dy)
    tokens += [RIGHT if dx > 0 else LEFT] * abs(dx)
    return tokens


def solve(state: EnvState) -> list[int]:
    """Shortest primitive-token solution from the current configuration."""
    if state.kind == "reach":
        return _moves_between(state.agent, state.goal)
    if state.kind == "fetch":
        if state.carrying:
            return []
        return _moves_between(state.agent, state.obj) + [GRASP]
    if state.kind == "transport":
        if state.obj == state.goal and not state.carrying:
            return []
        if state.carrying:
            return _moves_between(state.agent, state.goal) + [RELEASE]
        return (
            _moves_between(state.agent, state.obj)
            + [GRASP]
            + _moves_between(state.obj, state.goal)
            + [RELEASE]
        )
    raise UnknownTaskError(f"unknown task kind {state.kind!r}")


def bfs_shortest_solution(state: EnvState, max_tokens: int) -> list[int] | None:
    """Breadth-first search over (agent, obj, carrying); None if unreachable
    within max_tokens primitive steps."""
    start = (state.agent, state.obj, state.carrying)
    seen = {start}
    frontier: deque[tuple[tuple, list[int]]] = deque([(start, [])])
    probe = EnvState(
        task_id=state.task_id, kind=state.kind, height=state.height, width=state.width,
        agent=state.agent, obj=state.obj, goal=state.goal, carrying=state.carrying,
    )
    while frontier:
        node, path = frontier.popleft()
        if len(path) > max_tokens:
            return None
        probe.agent, probe.obj, probe.carrying = node
        if is_success(probe):
            return path
        if len(path) == max_tokens:
            continue
        for token in range(N_ACTIONS):
            probe.agent, probe.obj, probe.carrying = node
            apply_token(probe, token)
            nxt = (probe.agent, probe.obj, probe.carrying)
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, path + [token]))
    return None


def scripted_chunk(
    suite: GridTaskSuite, state: EnvState, rng: np.random.Generator, noise: float = 0.0
) -> Array:
    """Next K tokens of the analytic solution, with per-token random noise.

    Used to script world-model pretraining data; never to train the policy.
    """
    plan = solve(state)
    k = suite.cfg.chunk_len
    tokens = (plan + [NOOP] * k)[:k]
    out = np.asarray(tokens, dtype=np.int64)
    if noise > 0.0:
        flip = rng.random(k) < noise
        out[flip] = rng.integers(0, N_ACTIONS, size=int(flip.sum()))
    return out
