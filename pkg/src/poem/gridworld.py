"""Crossing-wall mazes, egocentric observations and trajectory planners.

Coordinates are (x, y) with y growing downwards; ``cells[y, x]``. Directions
are N=0, E=1, S=2, W=3, so turning right adds one.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode, View
from .seeding import mix_seed, rng_for

EMPTY, WALL, START, GOAL = 0, 1, 2, 3
N_TYPES = 4
FORWARD = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}
_FX = np.array([FORWARD[d][0] for d in range(4)])
_FY = np.array([FORWARD[d][1] for d in range(4)])
ACTIONS = ("forward", "left", "right")
VIEW = 7
OBS_DIM = VIEW * VIEW * N_TYPES + 3

_MAZE_TAG = 0x4D415A
_EXPLORE_TAG = 0x455850


class MazeError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    cells: np.ndarray
    seed: int = 0

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def start(self) -> tuple[int, int]:
        return 1, 1

    @property
    def goal(self) -> tuple[int, int]:
        return self.width - 2, self.height - 2

    def passable(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y, x] != WALL


@dataclass(frozen=True)
class AgentState:
    x: int
    y: int
    dir: int

    @property
    def pose(self) -> tuple[int, int, int]:
        return self.x, self.y, self.dir


@dataclass(frozen=True)
class Observation:
    window: np.ndarray  # (7, 7, N_TYPES), row 0 farthest ahead, agent at row 6 col 3
    visible_mask: np.ndarray
    pose: tuple[int, int, int]
    grid_shape: tuple[int, int] = (11, 11)

    def pose_features(self) -> np.ndarray:
        h, w = self.grid_shape
        x, y, d = self.pose
        return np.array([x / (w - 1), y / (h - 1), d / 3.0])

    def features(self) -> np.ndarray:
        return np.concatenate([self.window.ravel(), self.pose_features()])

    def as_view(self, item: int) -> View:
        return View(self.window, self.pose_features(), item, centred=False)


def _reachable(cells: np.ndarray, start, goal) -> bool:
    h, w = cells.shape
    seen = {start}
    todo = deque([start])
    while todo:
        x, y = todo.popleft()
        if (x, y) == goal:
            return True
        for dx, dy in FORWARD.values():
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and cells[ny, nx] != WALL and (nx, ny) not in seen:
                seen.add((nx, ny))
                todo.append((nx, ny))
    return False


def gen_maze(seed: int, size: int = 11, max_retries: int = 100) -> Grid:
    """One horizontal and one vertical wall, each with a single gap, redrawn until solvable."""
    if size < 7 or size % 2 == 0:
        raise ValueError("maze size must be odd and at least 7")
    rng = rng_for(seed, _MAZE_TAG, size)
    lines = np.arange(2, size - 2, 2)
    for _ in range(max_retries):
        cells = np.zeros((size, size), dtype=np.int8)
        cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
        row, col = (int(v) for v in rng.choice(lines, size=2))
        cells[row, 1:-1] = WALL
        cells[1:-1, col] = WALL
        gap_x = int(rng.choice([x for x in range(1, size - 1) if x != col]))
        gap_y = int(rng.choice([y for y in range(1, size - 1) if y != row]))
        cells[row, gap_x] = EMPTY
        cells[gap_y, col] = EMPTY
        cells[1, 1] = START
        cells[size - 2, size - 2] = GOAL
        if _reachable(cells, (1, 1), (size - 2, size - 2)):
            cells.flags.writeable = False
            return Grid(cells, seed)
    raise MazeError(f"no solvable maze after {max_retries} attempts (seed {seed})")


def open_room(size: int = 7) -> Grid:
    cells = np.zeros((size, size), dtype=np.int8)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = WALL
    cells[1, 1], cells[-2, -2] = START, GOAL
    return Grid(cells)


def observe_many(grid: Grid, states: list[AgentState]) -> list[Observation]:
    """Observations for several poses of one grid, vectorised over the poses."""
    if not states:
        return []
    x = np.array([s.x for s in states])[:, None, None]
    y = np.array([s.y for s in states])[:, None, None]
    d = np.array([s.dir for s in states])
    fx, fy = _FX[d][:, None, None], _FY[d][:, None, None]
    ahead = (VIEW - 1) - np.arange(VIEW)[None, :, None]
    side = np.arange(VIEW)[None, None, :] - VIEW // 2
    wx = x + ahead * fx - side * fy  # the right-hand direction is (-fy, fx)
    wy = y + ahead * fy + side * fx
    inside = (wx >= 0) & (wx < grid.width) & (wy >= 0) & (wy < grid.height)
    types = np.full(inside.shape, -1, dtype=np.int64)
    types[inside] = grid.cells[wy[inside], wx[inside]]
    see = inside & (types != WALL)

    # light spreads sideways along a row in both directions, then one row further ahead
    vis = np.zeros(inside.shape, dtype=bool)
    vis[:, VIEW - 1, VIEW // 2] = True
    for i in range(VIEW - 1, -1, -1):
        for j in range(VIEW - 1):
            vis[:, i, j + 1] |= vis[:, i, j] & see[:, i, j] & inside[:, i, j + 1]
        for j in range(VIEW - 1, 0, -1):
            vis[:, i, j - 1] |= vis[:, i, j] & see[:, i, j] & inside[:, i, j - 1]
        if i > 0:
            vis[:, i - 1] |= vis[:, i] & see[:, i] & inside[:, i - 1]

    windows = np.zeros(inside.shape + (N_TYPES,))
    b, ii, jj = np.nonzero(vis)
    windows[b, ii, jj, types[b, ii, jj]] = 1.0
    shape = (grid.height, grid.width)
    return [Observation(windows[k], vis[k], s.pose, shape) for k, s in enumerate(states)]


def observe(grid: Grid, state: AgentState) -> Observation:
    return observe_many(grid, [state])[0]


def step(grid: Grid, state: AgentState, action: str) -> AgentState:
    if action == "left":
        return AgentState(state.x, state.y, (state.dir - 1) % 4)
    if action == "right":
        return AgentState(state.x, state.y, (state.dir + 1) % 4)
    fx, fy = FORWARD[state.dir]
    if grid.passable(state.x + fx, state.y + fy):
        return AgentState(state.x + fx, state.y + fy, state.dir)
    return state


def initial_state(grid: Grid) -> AgentState:
    return AgentState(*grid.start, 1)


def _transitions(grid: Grid) -> list[tuple[int, int, int]]:
    """Successor pose ids for each pose id under (forward, left, right).

    A pose id is (y * width + x) * 4 + dir; the planners work on these ints.
    """
    h, w = grid.cells.shape
    ys, xs = np.mgrid[0:h, 0:w]
    cell = ys * w + xs
    out = np.empty((h, w, 4, 3), dtype=np.int64)
    for d, (fx, fy) in FORWARD.items():
        nx, ny = xs + fx, ys + fy
        ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
        ok[ok] = grid.cells[ny[ok], nx[ok]] != WALL
        out[:, :, d, 0] = np.where(ok, ny * w + nx, cell) * 4 + d
        out[:, :, d, 1] = cell * 4 + (d - 1) % 4
        out[:, :, d, 2] = cell * 4 + (d + 1) % 4
    return [tuple(r) for r in out.reshape(-1, 3).tolist()]


def _state(grid: Grid, pid: int) -> AgentState:
    cell, d = divmod(pid, 4)
    y, x = divmod(cell, grid.width)
    return AgentState(x, y, d)


def _pose_id(grid: Grid, s: AgentState) -> int:
    return (s.y * grid.width + s.x) * 4 + s.dir


def _optimal_ids(grid: Grid, table) -> tuple[list[int], list[int]]:
    s0 = _pose_id(grid, initial_state(grid))
    gx, gy = grid.goal
    goal_cell = gy * grid.width + gx
    parent: dict[int, tuple[int, int] | None] = {s0: None}
    todo = deque([s0])
    while todo:
        s = todo.popleft()
        if s // 4 == goal_cell:
            states, actions = [s], []
            while parent[s] is not None:
                s, a = parent[s]
                states.append(s)
                actions.append(a)
            return states[::-1], actions[::-1]
        for a, n in enumerate(table[s]):
            if n not in parent:
                parent[n] = (s, a)
                todo.append(n)
    raise MazeError("goal unreachable")


def optimal_plan(grid: Grid) -> tuple[list[AgentState], list[str]]:
    """BFS over poses; neighbours expanded in the order forward, left, right."""
    ids, acts = _optimal_ids(grid, _transitions(grid))
    return [_state(grid, p) for p in ids], [ACTIONS[a] for a in acts]


def optimal_trajectory(grid: Grid) -> list[Observation]:
    return observe_many(grid, optimal_plan(grid)[0])


def _explore_ids(grid: Grid, table, budget: int, seed: int) -> tuple[list[int], list[int]]:
    rng = rng_for(seed, _EXPLORE_TAG)
    s = _pose_id(grid, initial_state(grid))
    counts = [0] * len(table)
    counts[s] = 1
    states, actions = [s], []
    for _ in range(budget):
        succ = table[s]
        c = [counts[n] for n in succ]
        low = min(c)
        best = [k for k in range(3) if c[k] == low]
        k = best[int(rng.integers(len(best)))] if len(best) > 1 else best[0]
        s = succ[k]
        counts[s] += 1
        states.append(s)
        actions.append(k)
    return states, actions


def exploratory_plan(grid: Grid, budget: int = 200, seed: int = 0) -> tuple[list[AgentState], list[str]]:
    """Greedy count-based explorer: move to the least-visited successor pose."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    ids, acts = _explore_ids(grid, _transitions(grid), budget, seed)
    return [_state(grid, p) for p in ids], [ACTIONS[a] for a in acts]


def exploratory_trajectory(grid: Grid, budget: int = 200, seed: int = 0) -> list[Observation]:
    return observe_many(grid, exploratory_plan(grid, budget, seed)[0])


def grid_onehot(grid: Grid) -> np.ndarray:
    """(H, W, N_TYPES) one-hot reconstruction target."""
    return np.eye(N_TYPES)[grid.cells]


def grid_to_json(grid: Grid, actions: list[str] | None = None) -> str:
    return json.dumps({"width": grid.width, "height": grid.height, "seed": int(grid.seed),
                       "cells": grid.cells.tolist(), "cell_types": ["empty", "wall", "start", "goal"],
                       "actions": list(actions or [])})


def grid_from_json(text: str) -> tuple[Grid, list[str]]:
    d = json.loads(text)
    return Grid(np.array(d["cells"], dtype=np.int8), d["seed"]), d["actions"]


@dataclass(frozen=True)
class EnvEpisodeConfig:
    n_envs: int = 5
    queries: int = 2
    budget: int = 200
    size: int = 11
    max_retries: int = 20


@dataclass
class EnvItem:
    grid: Grid
    support: list[AgentState]
    queries: list[AgentState] = field(default_factory=list)


def sample_env_item(env_seed: int, cfg: EnvEpisodeConfig) -> EnvItem:
    for retry in range(cfg.max_retries):
        seed = mix_seed(env_seed, retry)
        grid = gen_maze(seed, cfg.size)
        table = _transitions(grid)
        support = list(dict.fromkeys(_optimal_ids(grid, table)[0]))
        taken = set(support)
        explored = dict.fromkeys(_explore_ids(grid, table, cfg.budget, seed)[0])
        candidates = [p for p in explored if p not in taken]
        if len(candidates) >= cfg.queries:
            rng = rng_for(seed, 0x515259)
            picks = rng.choice(len(candidates), size=cfg.queries, replace=False)
            return EnvItem(grid, [_state(grid, p) for p in support],
                           [_state(grid, candidates[int(k)]) for k in picks])
    raise MazeError(f"fewer than {cfg.queries} query candidates after {cfg.max_retries} environments")


def sample_env_episode(master_seed: int, episode_index: int, cfg: EnvEpisodeConfig = EnvEpisodeConfig()) -> Episode:
    ep_seed = mix_seed(master_seed, episode_index)
    support, queries, targets, grids = [], [], [], []
    for m in range(cfg.n_envs):
        item = sample_env_item(mix_seed(ep_seed, m), cfg)
        obs = observe_many(item.grid, item.support + item.queries)
        support.append([o.as_view(m) for o in obs[:len(item.support)]])
        queries.extend(o.as_view(m) for o in obs[len(item.support):])
        targets.extend([m] * cfg.queries)
        grids.append(item.grid.seed)
    meta = {"ways": cfg.n_envs, "shots": [len(s) for s in support], "condition": "gridworld",
            "seed": int(ep_seed), "grid_seeds": [int(s) for s in grids]}
    return Episode(support, queries, np.array(targets, dtype=np.int64), meta)


class EnvEpisodeSampler:
    def __init__(self, master_seed: int, cfg: EnvEpisodeConfig = EnvEpisodeConfig()):
        self.master_seed = master_seed
        self.cfg = cfg

    @property
    def view_dim(self) -> int:
        return OBS_DIM

    def episode_seed(self, index: int) -> int:
        return mix_seed(self.master_seed, index)

    def __call__(self, index: int) -> Episode:
        return sample_env_episode(self.master_seed, index, self.cfg)
