"""Trajectory containers, per-task normalization, and episode file IO.

An episode file is JSON-lines: one header line carrying task_id / seed /
episode_id, then one line per step with obs, action, done. Stats files map
task_id -> {action_mean, action_std, obs_mean, obs_std}.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Observation:
    features: np.ndarray
    task_id: int


@dataclass
class Action:
    values: np.ndarray


@dataclass
class Trajectory:
    """One demonstration. ``act[t]`` is the action taken at step t.

    ``times`` are source-frame indices; subsampled views keep them so the
    encoder's time code always measures real control steps, whatever the
    view rate.
    """

    obs: np.ndarray  # [T, D_obs]
    act: np.ndarray  # [T, D_a]
    task_id: int
    episode_id: str
    seed: int = 0
    meta: dict = field(default_factory=dict)
    times: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.times is None:
            self.times = np.arange(self.obs.shape[0])

    def __len__(self) -> int:
        return self.obs.shape[0]

    def frame_skip(self, k: int) -> "Trajectory":
        """Subsampled view taking every k-th step of both obs and actions.

        Episodes shorter than 2k keep at least their first and last frames so
        downstream per-timestep objectives always see two steps.
        """
        if k <= 1:
            return self
        n = len(self)
        idx = np.arange(0, n, k)
        if idx.shape[0] < 2 and n >= 2:
            idx = np.array([0, n - 1])
        return Trajectory(
            obs=self.obs[idx].copy(), act=self.act[idx].copy(),
            task_id=self.task_id, episode_id=self.episode_id, seed=self.seed,
            meta=dict(self.meta), times=self.times[idx].copy(),
        )


# std below this is treated as a constant dimension and left unscaled
STD_FLOOR = 1e-8


@dataclass
class TaskStats:
    action_mean: np.ndarray
    action_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray

    def _scale(self, std: np.ndarray) -> np.ndarray:
        return np.where(std > STD_FLOOR, std, 1.0)

    def normalize_act(self, a: np.ndarray) -> np.ndarray:
        return (a - self.action_mean) / self._scale(self.action_std)

    def denormalize_act(self, a: np.ndarray) -> np.ndarray:
        return a * self._scale(self.action_std) + self.action_mean

    def normalize_obs(self, o: np.ndarray) -> np.ndarray:
        return (o - self.obs_mean) / self._scale(self.obs_std)

    def denormalize_obs(self, o: np.ndarray) -> np.ndarray:
        return o * self._scale(self.obs_std) + self.obs_mean


def compute_stats(trajectories: list[Trajectory]) -> dict[int, TaskStats]:
    """Independent per-task mean/std over every step of the training split."""
    by_task: dict[int, list[Trajectory]] = {}
    for tr in trajectories:
        by_task.setdefault(tr.task_id, []).append(tr)
    stats = {}
    for task_id, trs in sorted(by_task.items()):
        acts = np.concatenate([t.act for t in trs], axis=0)
        obs = np.concatenate([t.obs for t in trs], axis=0)
        stats[task_id] = TaskStats(
            action_mean=acts.mean(axis=0), action_std=acts.std(axis=0),
            obs_mean=obs.mean(axis=0), obs_std=obs.std(axis=0),
        )
    return stats


def save_stats(path: str, stats: dict[int, TaskStats]) -> None:
    doc = {
        str(tid): {
            "action_mean": s.action_mean.tolist(), "action_std": s.action_std.tolist(),
            "obs_mean": s.obs_mean.tolist(), "obs_std": s.obs_std.tolist(),
        }
        for tid, s in sorted(stats.items())
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_stats(path: str) -> dict[int, TaskStats]:
    with open(path) as f:
        doc = json.load(f)
    return {
        int(tid): TaskStats(
            action_mean=np.asarray(d["action_mean"], dtype=np.float64),
            action_std=np.asarray(d["action_std"], dtype=np.float64),
            obs_mean=np.asarray(d["obs_mean"], dtype=np.float64),
            obs_std=np.asarray(d["obs_std"], dtype=np.float64),
        )
        for tid, d in doc.items()
    }


def save_episode(path: str, traj: Trajectory) -> None:
    with open(path, "w") as f:
        header = {"task_id": traj.task_id, "seed": traj.seed,
                  "episode_id": traj.episode_id}
        header.update(traj.meta)
        f.write(json.dumps(header, sort_keys=True) + "\n")
        n = len(traj)
        for t in range(n):
            row = {"obs": traj.obs[t].tolist(), "action": traj.act[t].tolist(),
                   "done": t == n - 1}
            f.write(json.dumps(row) + "\n")


def load_episode(path: str) -> Trajectory:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ValueError(f"empty episode file: {path}")
    header = json.loads(lines[0])
    obs, act = [], []
    for line in lines[1:]:
        row = json.loads(line)
        obs.append(row["obs"])
        act.append(row["action"])
    meta = {k: v for k, v in header.items()
            if k not in ("task_id", "seed", "episode_id")}
    return Trajectory(
        obs=np.asarray(obs, dtype=np.float64), act=np.asarray(act, dtype=np.float64),
        task_id=int(header["task_id"]), episode_id=str(header["episode_id"]),
        seed=int(header["seed"]), meta=meta,
    )


def load_dataset(data_dir: str) -> list[Trajectory]:
    """All episodes under data_dir/episodes/task_*/ in sorted order."""
    root = os.path.join(data_dir, "episodes")
    if not os.path.isdir(root):
        raise FileNotFoundError(f"no episodes directory under {data_dir}")
    out = []
    for task_dir in sorted(os.listdir(root)):
        full = os.path.join(root, task_dir)
        if not os.path.isdir(full):
            continue
        for name in sorted(os.listdir(full)):
            if name.endswith(".jsonl"):
                out.append(load_episode(os.path.join(full, name)))
    if not out:
        raise FileNotFoundError(f"no episode files under {root}")
    return out


def normalize_trajectory(traj: Trajectory, stats: dict[int, TaskStats]) -> Trajectory:
    s = stats[traj.task_id]
    return Trajectory(
        obs=s.normalize_obs(traj.obs), act=s.normalize_act(traj.act),
        task_id=traj.task_id, episode_id=traj.episode_id, seed=traj.seed,
        meta=dict(traj.meta), times=traj.times.copy(),
    )
