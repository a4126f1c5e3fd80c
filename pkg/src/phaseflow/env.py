"""Deterministic planar manipulation bench with scripted experts.

A point gripper moves in the unit square, can close over an object to carry
it, and pushes non-held objects out of its contact radius. Observations are
a fixed-width state vector with per-step resampled distractor dimensions that
carry no task information. Eight task classes over five behavior kinds give
the contrastive objectives real classes and the long-horizon class a genuine
multi-phase structure.

Everything is seed-pure: `step` is a function of (state, action) plus a
counter-derived noise stream, so replays are exact.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .trajectory import Trajectory, compute_stats, save_episode, save_stats

SPEED = 0.05            # max gripper displacement per step
GRASP_R = 0.095         # attach radius when closing
PUSH_R = 0.045          # solid radius: open gripper shoves objects out of it
REACH_EPS = 0.06        # reach-task success distance
PLACE_EPS = 0.06        # place-on-goal success distance
STACK_EPS = 0.08        # place-on-object success distance (> PUSH_R)
EPISODE_CAP = 200
N_DISTRACTORS = 4
D_OBS = 17              # grip(2) closed(1) obj1(3) obj2(3) goal1(2) goal2(2) noise(4)
D_ACT = 3               # velocity x/y + gripper command

KINDS = ("reach", "push", "pick_place", "stack", "long_horizon")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str
    name: str
    n_objects: int
    n_goals: int
    goal_lo: np.ndarray  # sampling box for goal 1
    goal_hi: np.ndarray
    eps: float


def task_table() -> list[TaskSpec]:
    box = lambda lo, hi: (np.array(lo), np.array(hi))
    specs = [
        ("reach", "reach_top", 0, 1, *box([0.15, 0.70], [0.85, 0.90]), REACH_EPS),
        ("reach", "reach_bottom", 0, 1, *box([0.15, 0.10], [0.85, 0.30]), REACH_EPS),
        ("push", "push_right", 1, 1, *box([0.65, 0.25], [0.90, 0.75]), PLACE_EPS),
        ("push", "push_left", 1, 1, *box([0.10, 0.25], [0.35, 0.75]), PLACE_EPS),
        ("pick_place", "pick_place_top", 1, 1, *box([0.15, 0.70], [0.85, 0.90]), PLACE_EPS),
        ("pick_place", "pick_place_bottom", 1, 1, *box([0.15, 0.10], [0.85, 0.30]), PLACE_EPS),
        ("stack", "stack", 2, 0, *box([0.0, 0.0], [1.0, 1.0]), STACK_EPS),
        ("long_horizon", "double_pick_place", 2, 2, *box([0.10, 0.55], [0.45, 0.90]), PLACE_EPS),
    ]
    return [
        TaskSpec(task_id=i, kind=k, name=n, n_objects=no, n_goals=ng,
                 goal_lo=lo, goal_hi=hi, eps=eps)
        for i, (k, n, no, ng, lo, hi, eps) in enumerate(specs)
    ]


TASKS = task_table()


@dataclass
class EnvState:
    grip: np.ndarray
    closed: bool
    objs: np.ndarray        # [2, 2]; absent slots are zero
    present: np.ndarray     # [2] bool
    goals: np.ndarray       # [2, 2]; absent slots are zero
    goals_present: np.ndarray
    held: int               # object index or -1
    seed: int
    t: int = 0
    distract: np.ndarray = field(default_factory=lambda: np.zeros(N_DISTRACTORS))


def _noise(seed: int, t: int) -> np.ndarray:
    return np.random.default_rng([seed, t, 0x5EED]).uniform(0.0, 1.0, N_DISTRACTORS)


def reset(spec: TaskSpec, seed: int) -> EnvState:
    """Sample a solvable layout; overlapping spawns are resampled, never emitted."""
    rng = np.random.default_rng([seed, spec.task_id, 0x1A1])
    margin, sep = 0.10, 0.18
    for _ in range(200):
        pts = [rng.uniform(margin, 1.0 - margin, 2)]  # gripper
        for _ in range(spec.n_objects):
            pts.append(rng.uniform(margin, 1.0 - margin, 2))
        goals = []
        for g in range(spec.n_goals):
            lo, hi = spec.goal_lo, spec.goal_hi
            if spec.kind == "long_horizon" and g == 1:
                lo, hi = 1.0 - spec.goal_hi, 1.0 - spec.goal_lo  # mirrored region
            goals.append(rng.uniform(np.maximum(lo, margin), np.minimum(hi, 1 - margin)))
        allpts = pts + goals
        ok = all(np.linalg.norm(a - b) >= sep
                 for i, a in enumerate(allpts) for b in allpts[i + 1:])
        if ok:
            break
    else:
        raise RuntimeError(f"could not sample a layout for {spec.name} seed {seed}")

    objs = np.zeros((2, 2))
    present = np.zeros(2, dtype=bool)
    for i in range(spec.n_objects):
        objs[i] = pts[1 + i]
        present[i] = True
    goal_arr = np.zeros((2, 2))
    goals_present = np.zeros(2, dtype=bool)
    for i, g in enumerate(goals):
        goal_arr[i] = g
        goals_present[i] = True
    state = EnvState(grip=pts[0], closed=False, objs=objs, present=present,
                     goals=goal_arr, goals_present=goals_present, held=-1, seed=seed)
    state.distract = _noise(seed, 0)
    return state


def make_obs(state: EnvState) -> np.ndarray:
    return np.concatenate([
        state.grip,
        [1.0 if state.closed else 0.0],
        state.objs[0], [1.0 if state.present[0] else 0.0],
        state.objs[1], [1.0 if state.present[1] else 0.0],
        state.goals[0], state.goals[1],
        state.distract,
    ]).astype(np.float64)


def step(state: EnvState, action: np.ndarray) -> EnvState:
    """Pure transition: clipped proportional motion, grasp/release, pushing."""
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    grip = np.clip(state.grip + SPEED * action[:2], 0.0, 1.0)

    closed = state.closed
    if action[2] > 0.5:
        closed = True
    elif action[2] < -0.5:
        closed = False

    held = state.held
    objs = state.objs.copy()
    if closed and not state.closed:
        dists = [np.linalg.norm(objs[i] - grip) if state.present[i] else np.inf
                 for i in range(2)]
        best = int(np.argmin(dists))
        held = best if dists[best] < GRASP_R else -1
    if not closed:
        held = -1

    for i in range(2):
        if not state.present[i]:
            continue
        if i == held:
            objs[i] = grip
            continue
        delta = objs[i] - grip
        d = np.linalg.norm(delta)
        if d < PUSH_R:
            direction = delta / d if d > 1e-9 else np.array([1.0, 0.0])
            objs[i] = np.clip(grip + direction * PUSH_R, 0.0, 1.0)

    t = state.t + 1
    return replace(state, grip=grip, closed=closed, objs=objs, held=held, t=t,
                   distract=_noise(state.seed, t))


def success(spec: TaskSpec, state: EnvState) -> bool:
    """Pure predicate over positions and gripper state."""
    if spec.kind == "reach":
        return bool(np.linalg.norm(state.grip - state.goals[0]) < spec.eps
                    and not state.closed)
    if spec.kind == "push":
        return bool(np.linalg.norm(state.objs[0] - state.goals[0]) < spec.eps)
    if spec.kind == "pick_place":
        return bool(np.linalg.norm(state.objs[0] - state.goals[0]) < spec.eps
                    and not state.closed)
    if spec.kind == "stack":
        return bool(np.linalg.norm(state.objs[0] - state.objs[1]) < spec.eps
                    and not state.closed)
    if spec.kind == "long_horizon":
        return bool(np.linalg.norm(state.objs[0] - state.goals[0]) < spec.eps
                    and np.linalg.norm(state.objs[1] - state.goals[1]) < spec.eps
                    and not state.closed)
    raise ValueError(f"unknown kind {spec.kind}")


# ---------------------------------------------------------------------------
# scripted experts: stateless proportional controllers with phase switching
# ---------------------------------------------------------------------------


@dataclass
class ObsView:
    """Expert-side parse of the observation vector."""

    grip: np.ndarray
    closed: bool
    objs: np.ndarray
    present: np.ndarray
    goals: np.ndarray

    @classmethod
    def parse(cls, obs: np.ndarray) -> "ObsView":
        return cls(
            grip=obs[0:2], closed=obs[2] > 0.5,
            objs=np.stack([obs[3:5], obs[6:8]]),
            present=np.array([obs[5] > 0.5, obs[8] > 0.5]),
            goals=np.stack([obs[9:11], obs[11:13]]),
        )


def _drive(grip: np.ndarray, target: np.ndarray, grip_cmd: float) -> np.ndarray:
    v = np.clip((target - grip) / SPEED, -1.0, 1.0)
    return np.array([v[0], v[1], grip_cmd])


def _route(grip: np.ndarray, target: np.ndarray, obstacle: np.ndarray,
           clearance: float) -> np.ndarray:
    """Waypoint that avoids shoving `obstacle` while traveling to `target`."""
    seg = target - grip
    seg_len = np.linalg.norm(seg)
    if seg_len < 1e-9:
        return target
    u = seg / seg_len
    proj = np.clip(np.dot(obstacle - grip, u), 0.0, seg_len)
    closest = grip + proj * u
    if np.linalg.norm(obstacle - closest) >= clearance or proj in (0.0, seg_len):
        return target
    perp = np.array([-u[1], u[0]])
    side = np.sign(np.dot(grip - obstacle, perp)) or 1.0
    return np.clip(obstacle + perp * side * (clearance + 0.02), 0.02, 0.98)


def _pick_place_action(view: ObsView, obj_i: int, target: np.ndarray,
                       eps: float, stop_at: Optional[float] = None,
                       avoid: Optional[np.ndarray] = None):
    """Shared grasp-carry-release controller; returns (action, phase).

    ``stop_at`` releases at that distance from the target instead of on top of
    it (placing next to a solid object); ``avoid`` routes around a position
    that must not be shoved in passing.
    """
    obj = view.objs[obj_i]
    holding = view.closed and np.linalg.norm(view.grip - obj) < 1e-6
    placed = np.linalg.norm(obj - target) < eps * 0.9
    if placed and not holding:
        return np.array([0.0, 0.0, -1.0]), "idle"
    if holding:
        release_at = stop_at if stop_at is not None else eps * 0.5
        if np.linalg.norm(view.grip - target) <= release_at:
            # open and retreat at full speed in one action: the gripper lets
            # go before it moves, so the object stays put and is not shoved
            away = view.grip - target
            away = away / max(np.linalg.norm(away), 1e-9)
            return np.array([away[0], away[1], -1.0]), "release"
        # drive point sits inside the release sphere so the threshold is
        # crossed robustly instead of being approached asymptotically
        goal_pt = target if stop_at is None else (
            target + (view.grip - target)
            / max(np.linalg.norm(view.grip - target), 1e-9) * (stop_at - 0.005))
        if avoid is not None:
            goal_pt = _route(view.grip, goal_pt, avoid, PUSH_R + 0.03)
        return _drive(view.grip, goal_pt, 1.0), "carry"
    if np.linalg.norm(view.grip - obj) < GRASP_R * 0.9:
        return np.array([0.0, 0.0, 1.0]), "grasp"
    waypoint = obj if avoid is None else _route(view.grip, obj, avoid, PUSH_R + 0.03)
    return _drive(view.grip, waypoint, -1.0), "approach"


def expert_action(spec: TaskSpec, obs: np.ndarray):
    """Scripted expert for every task kind; returns (action, phase label)."""
    view = ObsView.parse(obs)
    if spec.kind == "reach":
        if np.linalg.norm(view.grip - view.goals[0]) < spec.eps * 0.6:
            return np.array([0.0, 0.0, -1.0]), "idle"
        return _drive(view.grip, view.goals[0], -1.0), "approach"

    if spec.kind == "push":
        obj, goal = view.objs[0], view.goals[0]
        if np.linalg.norm(obj - goal) < spec.eps * 0.7:
            return np.array([0.0, 0.0, -1.0]), "idle"
        u = goal - obj
        u = u / max(np.linalg.norm(u), 1e-9)
        to_obj = obj - view.grip
        d_obj = np.linalg.norm(to_obj)
        cos = np.dot(to_obj / max(d_obj, 1e-9), u)
        if cos > 0.9 and d_obj < PUSH_R + 0.03:
            # drive into the object from behind; contact resolution shoves it
            # along grip->obj, i.e. toward the goal
            return _drive(view.grip, obj - u * 0.02, -1.0), "push"
        stand = obj - u * (PUSH_R + 0.02)
        waypoint = _route(view.grip, stand, obj, PUSH_R + 0.015)
        return _drive(view.grip, waypoint, -1.0), "approach"

    if spec.kind == "pick_place":
        action, phase = _pick_place_action(view, 0, view.goals[0], spec.eps)
        return action, phase

    if spec.kind == "stack":
        action, phase = _pick_place_action(
            view, 0, view.objs[1], spec.eps, stop_at=PUSH_R + 0.012)
        return action, phase

    if spec.kind == "long_horizon":
        first_done = np.linalg.norm(view.objs[0] - view.goals[0]) < spec.eps * 0.8
        if not first_done:
            action, phase = _pick_place_action(view, 0, view.goals[0], spec.eps,
                                               avoid=view.objs[1])
            return action, "first_" + phase
        action, phase = _pick_place_action(view, 1, view.goals[1], spec.eps,
                                           avoid=view.objs[0])
        return action, "second_" + phase

    raise ValueError(f"unknown kind {spec.kind}")


def run_episode(spec: TaskSpec, seed: int,
                policy: Callable[[np.ndarray], np.ndarray],
                cap: int = EPISODE_CAP):
    """Roll one episode; returns (Trajectory-ish dict, success flag, final state)."""
    state = reset(spec, seed)
    obs_list, act_list = [], []
    ok = False
    for _ in range(cap):
        obs = make_obs(state)
        action = np.asarray(policy(obs), dtype=np.float64)
        obs_list.append(obs)
        act_list.append(np.clip(action, -1.0, 1.0))
        state = step(state, action)
        if success(spec, state):
            ok = True
            break
    return np.asarray(obs_list), np.asarray(act_list), ok, state


def generate_dataset(out_dir: str, n_per_task: int, seed: int,
                     tasks: Optional[list[int]] = None,
                     action_noise: float = 0.15) -> dict:
    """Write expert episodes + per-task stats; deterministic given seed.

    ``action_noise`` adds a seeded uniform jitter to the recorded expert
    actions: the closed-loop controllers absorb it, and the demonstrations
    then cover a tube around the nominal trajectories instead of a line.
    Returns the manifest (also written to out_dir/manifest.json).
    """
    if n_per_task < 1:
        raise ValueError("n_per_task must be >= 1")
    task_ids = tasks if tasks is not None else [t.task_id for t in TASKS]
    os.makedirs(os.path.join(out_dir, "episodes"), exist_ok=True)
    trajectories = []
    for tid in task_ids:
        spec = TASKS[tid]
        tdir = os.path.join(out_dir, "episodes", f"task_{tid:02d}")
        os.makedirs(tdir, exist_ok=True)
        for i in range(n_per_task):
            ep_seed = seed * 1_000_000 + tid * 10_000 + i
            phases: list[str] = []
            noise_rng = np.random.default_rng([ep_seed, 0xA0])

            def policy(obs, spec=spec, phases=phases, noise_rng=noise_rng):
                action, phase = expert_action(spec, obs)
                phases.append(phase)
                if action_noise > 0:
                    action = action + noise_rng.uniform(
                        -action_noise, action_noise, action.shape)
                return action

            obs, act, ok, _ = run_episode(spec, ep_seed, policy)
            if not ok:
                raise RuntimeError(
                    f"expert failed on {spec.name} seed {ep_seed} (bug in expert)")
            switches = [[t, p] for t, p in enumerate(phases)
                        if t == 0 or phases[t - 1] != p]
            traj = Trajectory(obs=obs, act=act, task_id=tid,
                              episode_id=f"task{tid:02d}_ep{i:04d}", seed=ep_seed,
                              meta={"phase_switches": switches})
            save_episode(os.path.join(tdir, f"ep_{i:04d}.jsonl"), traj)
            trajectories.append(traj)

    stats = compute_stats(trajectories)
    save_stats(os.path.join(out_dir, "stats.json"), stats)
    digest = hashlib.sha256()
    for tr in trajectories:
        digest.update(tr.obs.tobytes())
        digest.update(tr.act.tobytes())
    manifest = {
        "n_per_task": n_per_task, "seed": seed, "tasks": task_ids,
        "n_episodes": len(trajectories), "fingerprint": digest.hexdigest(),
        "d_obs": D_OBS, "d_act": D_ACT,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


class ScriptedPolicy:
    """Expert wrapped in the rollout policy protocol."""

    def __init__(self):
        self._spec: Optional[TaskSpec] = None

    def reset(self, task_id: int, seed: int) -> None:
        self._spec = TASKS[task_id]

    def act(self, obs: np.ndarray) -> np.ndarray:
        action, _ = expert_action(self._spec, obs)
        return action


class RandomPolicy:
    """Uniform random actions, the measured floor for eval sanity checks."""

    def __init__(self):
        self._rng = np.random.default_rng(0)

    def reset(self, task_id: int, seed: int) -> None:
        self._rng = np.random.default_rng([seed, 0xBAD])

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, D_ACT)


def rollout_eval(policy, spec: TaskSpec, n_episodes: int, seed: int,
                 cap: int = EPISODE_CAP) -> dict:
    """Success rate, mean length, and per-episode phase traces (if exposed)."""
    succ, lengths, traces = [], [], []
    for i in range(n_episodes):
        ep_seed = seed * 1_000_000 + spec.task_id * 10_000 + i
        policy.reset(spec.task_id, ep_seed)
        state = reset(spec, ep_seed)
        ok = False
        t = 0
        for t in range(1, cap + 1):
            action = policy.act(make_obs(state))
            state = step(state, action)
            if success(spec, state):
                ok = True
                break
        succ.append(ok)
        lengths.append(t)
        trace = getattr(policy, "phase_trace", None)
        if ok and trace is not None and len(trace) > 3:
            traces.append(np.asarray(trace))
    return {
        "task": spec.name,
        "task_id": spec.task_id,
        "n_episodes": n_episodes,
        "success_rate": float(np.mean(succ)),
        "mean_episode_len": float(np.mean(lengths)),
        "phase_traces": traces,
    }
