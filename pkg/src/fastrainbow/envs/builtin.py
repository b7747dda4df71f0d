"""Desk-scale environments with exactly computable reference policies."""

from __future__ import annotations

import numpy as np

from fastrainbow.errors import ConfigError


class ChainMDP:
    """States ``0..N-1`` on a line; reaching ``N-1`` pays 1 and terminates.

    Action 0 moves left (clamped at 0), action 1 moves right. Observations are
    one-hot vectors, or an image strip when ``pixels=True``. Episodes are
    truncated after ``4 * N`` transitions.
    """

    profile = "vector"
    noop_action = 0
    LEFT, RIGHT = 0, 1

    def __init__(self, n: int = 8, pixels: bool = False, pixel_size: int = 24):
        if n < 2:
            raise ConfigError("chain length must be >= 2")
        self.n = n
        self.num_actions = 2
        self.cap = 4 * n
        self.pixels = pixels
        self.pixel_size = pixel_size
        if pixels:
            self.profile = "minicatch"
            self.raw_frame_shape = (pixel_size, pixel_size)
        else:
            self.raw_frame_shape = (n,)
        self.state = 0
        self.t = 0

    def _obs(self) -> np.ndarray:
        if not self.pixels:
            obs = np.zeros(self.n, dtype=np.float32)
            obs[self.state] = 1.0
            return obs
        img = np.zeros((self.pixel_size, self.pixel_size), dtype=np.uint8)
        lo = self.state * self.pixel_size // self.n
        hi = (self.state + 1) * self.pixel_size // self.n
        img[:, lo:hi] = 255
        return img

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = 0
        self.t = 0
        return self._obs()

    def step(self, action: int):
        if action == self.RIGHT:
            self.state = min(self.state + 1, self.n - 1)
        else:
            self.state = max(self.state - 1, 0)
        self.t += 1
        terminal = self.state == self.n - 1
        reward = 1.0 if terminal else 0.0
        truncated = (not terminal) and self.t >= self.cap
        return self._obs(), reward, terminal, truncated


def chain_value_iteration(n: int = 8, gamma: float = 0.99, tol: float = 1e-12,
                          max_iter: int = 10_000) -> np.ndarray:
    """Optimal action values ``Q[s, a]`` of the chain by value iteration."""
    q = np.zeros((n, 2))
    for _ in range(max_iter):
        v = q.max(axis=1)
        v[n - 1] = 0.0
        new = np.zeros_like(q)
        for s in range(n - 1):
            for a, s2 in ((0, max(s - 1, 0)), (1, min(s + 1, n - 1))):
                r = 1.0 if s2 == n - 1 else 0.0
                new[s, a] = r + (0.0 if s2 == n - 1 else gamma * v[s2])
        if np.max(np.abs(new - q)) < tol:
            return new
        q = new
    return q


class MiniCatch:
    """Catch a falling ball with a 3-wide paddle on a square grid.

    A ball spawns in row 0 at a uniformly random column and falls one row per
    transition. When it reaches the bottom row the step pays +1 if the paddle
    covers its column and -1 otherwise, and a new ball spawns. The episode
    ends after ``balls`` balls. Actions: 0 stay, 1 left, 2 right. The logical
    grid is upscaled by nearest neighbour to ``render_size`` pixels.
    """

    profile = "minicatch"
    noop_action = 0
    STAY, LEFT, RIGHT = 0, 1, 2

    def __init__(self, grid: int = 21, paddle: int = 3, balls: int = 10,
                 render_size: int = 84):
        if paddle % 2 != 1 or paddle > grid:
            raise ConfigError("paddle width must be odd and fit the grid")
        self.grid = grid
        self.half = paddle // 2
        self.balls = balls
        self.render_size = render_size
        self.num_actions = 3
        self.raw_frame_shape = (render_size, render_size)
        self.rng = None
        self.spawn_columns: list[int] = []

    def _spawn(self) -> None:
        self.ball_row = 0
        self.ball_col = int(self.rng.integers(0, self.grid))
        self.spawn_columns.append(self.ball_col)

    def grid_image(self) -> np.ndarray:
        img = np.zeros((self.grid, self.grid), dtype=np.uint8)
        img[self.ball_row, self.ball_col] = 255
        img[self.grid - 1, self.paddle - self.half:self.paddle + self.half + 1] = 255
        return img

    def render(self) -> np.ndarray:
        img = self.grid_image()
        idx = np.arange(self.render_size) * self.grid // self.render_size
        return img[np.ix_(idx, idx)]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.rng = rng
        self.paddle = self.grid // 2
        self.caught = 0
        self.dropped = 0
        self._spawn()
        return self.render()

    def step(self, action: int):
        if action == self.LEFT:
            self.paddle = max(self.half, self.paddle - 1)
        elif action == self.RIGHT:
            self.paddle = min(self.grid - 1 - self.half, self.paddle + 1)
        self.ball_row += 1
        reward = 0.0
        terminal = False
        if self.ball_row == self.grid - 1:
            if abs(self.ball_col - self.paddle) <= self.half:
                reward = 1.0
                self.caught += 1
            else:
                reward = -1.0
                self.dropped += 1
            if self.caught + self.dropped >= self.balls:
                terminal = True
            else:
                self._spawn()
        return self.render(), reward, terminal, False

    def oracle_action(self) -> int:
        """Greedy column tracking: move the paddle centre toward the ball."""
        if self.ball_col < self.paddle:
            return self.LEFT
        if self.ball_col > self.paddle:
            return self.RIGHT
        return self.STAY


def catch_random_policy_return(grid: int = 21, paddle: int = 3, balls: int = 10) -> float:
    """Exact expected episode return of the uniform-random policy.

    Propagates the distribution over paddle positions through each ball's
    fall; the paddle position carries over from one ball to the next.
    """
    half = paddle // 2
    lo, hi = half, grid - 1 - half
    positions = np.arange(grid)
    step = np.zeros((grid, grid))
    for p in range(lo, hi + 1):
        for q in (p, max(lo, p - 1), min(hi, p + 1)):
            step[p, q] += 1.0 / 3.0
    dist = np.zeros(grid)
    dist[grid // 2] = 1.0
    fall = np.linalg.matrix_power(step, grid - 1)
    expected = 0.0
    for _ in range(balls):
        dist = dist @ fall
        # ball column independent of paddle, uniform over the grid
        p_catch = sum(dist[p] * np.count_nonzero(np.abs(positions - p) <= half) / grid
                      for p in range(grid))
        expected += 2.0 * p_catch - 1.0
    return float(expected)
