"""Top-down lane-following game with a scripted expert.

The track is a bounded random walk of lane-center offsets, one value per
row; the car advances one row per frame and steers laterally in discrete
steps. Scoring follows the classic track-tile scheme: -0.1 per frame,
+1000/N for each of the N track tiles whose center row is first reached
while the car is on the road. Scores are accounted in integer tenths so
reward sums are exact.

Episode datasets persist as a directory: `manifest.json` plus one
`ep_NNNN.bin` per episode. Binary layout (little-endian):

    magic  b"PAEP"
    u32    version (1)
    u64    seed
    u32    T (number of steps == actions)
    u32    H, u32 W (frame size)
    i64    score_tenths
    u8     terminal flag
    T*H*W*3 bytes   pre-action frames, uint8 RGB row-major
    T bytes         action ids, uint8
    T*2 bytes       per-step reward tenths, int16

Frame t is the newest frame the policy saw when choosing action t; the
two-frame observation at step t stacks frames[t-1] (or frames[0] at the
start) with frames[t].
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractError

TRACK_ROWS = 200
TILE_ROWS = 8
N_TILES = TRACK_ROWS // TILE_ROWS  # 25, so 1000/N == 40.0 exactly
STEP_TENTHS = -1
TILE_TENTHS = 400

ROAD_HALF_WIDTH = 0.15
WALK_DELTA = 0.015
CENTER_LO, CENTER_HI = 0.2, 0.8

STEER_DELTA = 0.03
ACTION_LEFT, ACTION_STRAIGHT, ACTION_RIGHT = 0, 1, 2
ACTION_LABELS = ["LEFT", "STRAIGHT", "RIGHT"]

OFF_ROAD_LIMIT = 10      # done after this many consecutive off-road frames
EXPERT_LOOKAHEAD = 3
EXPERT_DEADBAND = 0.01

FRAME_SIZE = 64
CAR_SCREEN_ROW = 48
N_STACKED_FRAMES = 2

_VOID, _ROAD, _CAR = 25, 110, 230


def make_track(seed: int) -> np.ndarray:
    """Lane-center offset per row, bounded random walk in [0.2, 0.8]."""
    rng = np.random.default_rng(seed)
    centers = np.empty(TRACK_ROWS, dtype=np.float64)
    centers[0] = 0.5
    for r in range(1, TRACK_ROWS):
        step = rng.uniform(-WALK_DELTA, WALK_DELTA)
        centers[r] = min(max(centers[r - 1] + step, CENTER_LO), CENTER_HI)
    return centers


class LaneRacer:
    """Single-owner environment instance; reset(seed) then step(action)."""

    def __init__(self):
        self._track: np.ndarray | None = None
        self.done = True

    def reset(self, seed: int) -> np.ndarray:
        self.seed = seed
        self._track = make_track(seed)
        self.row = 0
        self.car_x = 0.5
        self.visited: set[int] = set()
        self.frames_elapsed = 0
        self.score_tenths = 0
        self._off_count = 0
        self.done = False
        frame = self.render_frame()
        self._prev_frame = frame
        self._cur_frame = frame
        return self.observation()

    @property
    def score(self) -> float:
        return self.score_tenths / 10.0

    def observation(self) -> np.ndarray:
        """uint8 [2, H, W, 3]: previous frame then current frame."""
        return np.stack([self._prev_frame, self._cur_frame])

    def render_frame(self) -> np.ndarray:
        """64x64 top-down view with the car on a fixed screen row."""
        s = FRAME_SIZE
        img = np.full((s, s), _VOID, dtype=np.uint8)
        screen_rows = np.arange(s)
        track_rows = self.row + (CAR_SCREEN_ROW - screen_rows)
        valid = (track_rows >= 0) & (track_rows < TRACK_ROWS)
        cols = (np.arange(s) + 0.5) / s
        centers = self._track[np.clip(track_rows, 0, TRACK_ROWS - 1)]
        road = np.abs(cols[None, :] - centers[:, None]) <= ROAD_HALF_WIDTH
        road &= valid[:, None]
        img[road] = _ROAD
        cc = int(np.clip(round(self.car_x * s - 0.5), 1, s - 2))
        img[CAR_SCREEN_ROW - 1 : CAR_SCREEN_ROW + 2, cc - 1 : cc + 2] = _CAR
        return np.repeat(img[:, :, None], 3, axis=2)

    def on_road(self) -> bool:
        return abs(self.car_x - self._track[self.row]) <= ROAD_HALF_WIDTH

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractError("step called on a finished episode")
        if action not in (ACTION_LEFT, ACTION_STRAIGHT, ACTION_RIGHT):
            raise ContractError(f"unknown action id {action}")
        if action == ACTION_LEFT:
            self.car_x = max(0.0, self.car_x - STEER_DELTA)
        elif action == ACTION_RIGHT:
            self.car_x = min(1.0, self.car_x + STEER_DELTA)
        self.row += 1
        self.frames_elapsed += 1
        tenths = STEP_TENTHS
        on = self.on_road()
        if on and self.row % TILE_ROWS == TILE_ROWS // 2:
            tile = self.row // TILE_ROWS
            if tile not in self.visited:
                self.visited.add(tile)
                tenths += TILE_TENTHS
        self._off_count = 0 if on else self._off_count + 1
        self.score_tenths += tenths
        if self._off_count > OFF_ROAD_LIMIT or self.row == TRACK_ROWS - 1:
            self.done = True
        self._prev_frame = self._cur_frame
        self._cur_frame = self.render_frame()
        return self.observation(), tenths / 10.0, self.done


def expert_policy(env: LaneRacer) -> int:
    """Proportional steer toward the lane center a few rows ahead."""
    target_row = min(env.row + EXPERT_LOOKAHEAD, TRACK_ROWS - 1)
    err = env.car_x - env._track[target_row]
    if abs(err) <= EXPERT_DEADBAND:
        return ACTION_STRAIGHT
    return ACTION_LEFT if err > 0 else ACTION_RIGHT


@dataclass
class Episode:
    seed: int
    frames: np.ndarray         # uint8 [T, H, W, 3], frame seen before action t
    actions: np.ndarray        # uint8 [T]
    reward_tenths: np.ndarray  # int16 [T]
    score_tenths: int
    terminal: bool

    def __len__(self) -> int:
        return len(self.actions)

    def observation(self, t: int) -> np.ndarray:
        """The stacked two-frame observation the policy saw at step t."""
        if not 0 <= t < len(self.actions):
            raise ContractError(f"step index {t} out of range")
        return np.stack([self.frames[max(t - 1, 0)], self.frames[t]])


def run_episode(seed: int, policy) -> Episode:
    """Roll one episode with `policy(env) -> action`, recording all pairs."""
    env = LaneRacer()
    env.reset(seed)
    frames, actions, tenths = [], [], []
    while not env.done:
        frames.append(env._cur_frame)
        a = policy(env)
        _, reward, _ = env.step(a)
        actions.append(a)
        tenths.append(round(reward * 10))
    return Episode(
        seed=seed,
        frames=np.stack(frames),
        actions=np.asarray(actions, dtype=np.uint8),
        reward_tenths=np.asarray(tenths, dtype=np.int16),
        score_tenths=env.score_tenths,
        terminal=True,
    )


def replay_score_tenths(seed: int, actions) -> tuple[int, list[int]]:
    """Re-run a recorded action sequence; used as the replay oracle."""
    env = LaneRacer()
    env.reset(seed)
    per_step = []
    for a in actions:
        _, reward, done = env.step(int(a))
        per_step.append(round(reward * 10))
        if done:
            break
    return env.score_tenths, per_step


def collect_imitation_dataset(n_episodes: int, seed_base: int) -> list[Episode]:
    """Expert rollouts on seeds seed_base .. seed_base + n_episodes - 1."""
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    return [run_episode(seed_base + i, expert_policy) for i in range(n_episodes)]


_EP_MAGIC = b"PAEP"
_EP_HEADER = struct.Struct("<4sIQIIIqB")


def save_episodes(directory, episodes: list[Episode], extra: dict | None = None):
    """Write manifest.json + per-episode binary records."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ep in enumerate(episodes):
        t, h, w, _ = ep.frames.shape
        name = f"ep_{i:04d}.bin"
        blob = _EP_HEADER.pack(
            _EP_MAGIC, 1, ep.seed, t, h, w, ep.score_tenths, int(ep.terminal)
        )
        blob += ep.frames.tobytes()
        blob += ep.actions.tobytes()
        blob += ep.reward_tenths.astype("<i2").tobytes()
        (directory / name).write_bytes(blob)
        names.append(name)
    manifest = {
        "version": 1,
        "n_episodes": len(episodes),
        "episodes": names,
        "seeds": [ep.seed for ep in episodes],
        "score_tenths": [ep.score_tenths for ep in episodes],
        "total_pairs": int(sum(len(ep) for ep in episodes)),
        "frame_hw": [FRAME_SIZE, FRAME_SIZE],
        "config_hash": hashlib.sha256(
            json.dumps(extra or {}, sort_keys=True).encode()
        ).hexdigest(),
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_episodes(directory) -> list[Episode]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != 1:
        raise CheckpointError(f"unsupported episode dataset version {manifest.get('version')}")
    episodes = []
    for name in manifest["episodes"]:
        blob = (directory / name).read_bytes()
        magic, version, seed, t, h, w, score, terminal = _EP_HEADER.unpack_from(blob)
        if magic != _EP_MAGIC:
            raise CheckpointError(f"{name}: bad magic {magic!r}")
        if version != 1:
            raise CheckpointError(f"{name}: unsupported version {version}")
        off = _EP_HEADER.size
        n_img = t * h * w * 3
        want = off + n_img + t + 2 * t
        if len(blob) != want:
            raise CheckpointError(f"{name}: truncated ({len(blob)} bytes, want {want})")
        frames = np.frombuffer(blob, dtype=np.uint8, count=n_img, offset=off)
        frames = frames.reshape(t, h, w, 3).copy()
        off += n_img
        actions = np.frombuffer(blob, dtype=np.uint8, count=t, offset=off).copy()
        off += t
        tenths = np.frombuffer(blob, dtype="<i2", count=t, offset=off).astype(np.int16)
        episodes.append(
            Episode(
                seed=seed,
                frames=frames,
                actions=actions,
                reward_tenths=tenths,
                score_tenths=score,
                terminal=bool(terminal),
            )
        )
    return episodes
