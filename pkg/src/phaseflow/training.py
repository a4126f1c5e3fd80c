"""Two-phase training: the composite manifold objective (joint prediction,
supervised-contrastive prototype clustering, per-timestep progress InfoNCE)
with an EMA target for the observation features, then prior-guided policy
tuning of the decoder and flow head on latents cached from the frozen
encoder.

All losses return (scalar Tensor, stats dict); the stats feed the JSON-lines
metrics log.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bank import QueryHead
from .decoder import PbdParams, prior_nll, prior_params, progress_attention, unfold_anchors
from .encoder import BehaviorEncoder
from .flow import FlowParams, flow_target, inject_prior, vector_field
from .tensor import (
    Tensor,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    mul,
    silu,
    square,
    swap_last_axes,
    tmean,
    tsum,
)
from .trajectory import Trajectory, normalize_trajectory


class DegenerateBatchError(ValueError):
    pass


class CacheIntegrityError(KeyError):
    pass


NEG_INF = -1e30


class Mlp2:
    """Two-layer MLP head with SiLU hidden activation."""

    def __init__(self, rng, d_in, d_hidden, d_out, dtype=np.float64):
        self.w1 = Tensor(rng.normal(0, 1 / np.sqrt(d_in),
                                    (d_in, d_hidden)).astype(dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, 1 / np.sqrt(d_hidden),
                                    (d_hidden, d_out)).astype(dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return linear(silu(linear(x, self.w1, self.b1)), self.w2, self.b2)

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


class EmaTarget:
    """Exponential-moving-average copies of selected parameter groups.

    Holds plain arrays; forwards through them build constant tensors, so the
    target branch is structurally outside every gradient path.
    """

    def __init__(self, named_params: dict[str, Tensor], decay: float = 0.99):
        self.decay = decay
        self.values = {k: p.data.copy() for k, p in named_params.items()}

    def update(self, named_params: dict[str, Tensor]) -> None:
        d = self.decay
        for k, p in named_params.items():
            self.values[k] = d * self.values[k] + (1.0 - d) * p.data

    def tensor(self, key: str) -> Tensor:
        return Tensor(self.values[key])


@dataclass
class Phase1Batch:
    obs: np.ndarray        # [B, T, D_obs] padded
    act: np.ndarray        # [B, T, D_a] action taken at each (view) step
    mask: np.ndarray       # [B, T] validity floats
    task_ids: np.ndarray   # [B]
    times: Optional[np.ndarray] = None  # [B, T] source-frame indices

    @property
    def act_prev(self) -> np.ndarray:
        prev = np.zeros_like(self.act)
        prev[:, 1:] = self.act[:, :-1]
        return prev


def make_phase1_batch(trajs: list[Trajectory], stats, frame_skip: int,
                      dtype=np.float64) -> Phase1Batch:
    views = [normalize_trajectory(t, stats).frame_skip(frame_skip) for t in trajs]
    t_max = max(len(v) for v in views)
    bsz = len(views)
    obs = np.zeros((bsz, t_max, views[0].obs.shape[1]), dtype=dtype)
    act = np.zeros((bsz, t_max, views[0].act.shape[1]), dtype=dtype)
    mask = np.zeros((bsz, t_max), dtype=dtype)
    times = np.zeros((bsz, t_max))
    for i, v in enumerate(views):
        obs[i, :len(v)] = v.obs
        act[i, :len(v)] = v.act
        mask[i, :len(v)] = 1.0
        times[i, :len(v)] = v.times
        times[i, len(v):] = v.times[-1]  # padding value, masked everywhere
    return Phase1Batch(obs=obs, act=act, mask=mask,
                       task_ids=np.array([t.task_id for t in trajs]),
                       times=times)


class Phase1Model:
    """Encoder plus the heads the manifold objective needs."""

    def __init__(self, rng: np.random.Generator, d_obs: int, d_act: int,
                 num_tasks: int, d_model: int, n_blocks: int, d_state: int = 16,
                 d_conv: int = 4, expand: int = 2, head_hidden: int = 256,
                 head_out: int = 128, dtype=np.float64):
        self.encoder = BehaviorEncoder(rng, d_obs, d_act, num_tasks, d_model,
                                       n_blocks, d_state, d_conv, expand, dtype)
        self.act_head = Mlp2(rng, d_model, head_hidden, d_act, dtype)
        self.vis_head = Mlp2(rng, d_model, head_hidden, d_model, dtype)
        self.progress_head = Mlp2(rng, d_model, head_hidden, head_out, dtype)
        self.query_head = QueryHead(rng, d_model, dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, comp in (("encoder", self.encoder), ("act_head", self.act_head),
                             ("vis_head", self.vis_head),
                             ("progress_head", self.progress_head),
                             ("query_head", self.query_head)):
            for k, v in comp.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        # the query head is a fixed random projection over trained features:
        # no loss reaches it, and keeping it out of the optimizer also keeps
        # decoupled weight decay from eroding it
        return {k: v for k, v in self.parameters().items()
                if not k.startswith("query_head")}

    def make_ema(self, decay: float) -> EmaTarget:
        tracked = dict(self.encoder.obs_encoder_params())
        tracked.update({f"progress.{k}": v
                        for k, v in self.progress_head.parameters().items()})
        return EmaTarget(tracked, decay)


def ema_obs_features(ema: EmaTarget, obs: Tensor) -> Tensor:
    """Target-network observation features; constants on the tape."""
    hidden = silu(linear(obs, ema.tensor("obs.w1"), ema.tensor("obs.b1")))
    return linear(hidden, ema.tensor("obs.w2"), ema.tensor("obs.b2"))


def ema_progress_projection(ema: EmaTarget, tokens_const: Tensor) -> Tensor:
    hidden = silu(linear(tokens_const, ema.tensor("progress.w1"),
                         ema.tensor("progress.b1")))
    return linear(hidden, ema.tensor("progress.w2"), ema.tensor("progress.b2"))


# ---------------------------------------------------------------------------
# phase-1 losses
# ---------------------------------------------------------------------------


def loss_rec(model: Phase1Model, ema: EmaTarget, tokens: Tensor,
             batch: Phase1Batch):
    """Joint next-action and next-feature prediction with a stop-gradient
    target branch; masked mean over valid (t, t+1) pairs."""
    pair_mask = batch.mask[:, :-1] * batch.mask[:, 1:]
    n_pairs = pair_mask.sum()
    if n_pairs < 1:
        raise DegenerateBatchError("no valid (t, t+1) pairs in batch")
    m = Tensor(pair_mask[..., None])

    a_hat = model.act_head(tokens[:, :-1, :])
    a_target = Tensor(batch.act[:, 1:, :])
    term_a = tsum(mul(square(a_hat - a_target), m)) / float(n_pairs)

    v_hat = model.vis_head(tokens[:, :-1, :])
    v_target = ema_obs_features(ema, Tensor(batch.obs[:, 1:, :]))
    term_v = tsum(mul(square(v_hat - v_target), m)) / float(n_pairs)

    loss = term_a + term_v
    return loss, {"rec_action": term_a.item(), "rec_latent": term_v.item()}


def loss_global(z_protos: Tensor, labels: np.ndarray, gamma: float = 0.1):
    """Supervised contrastive clustering of L2-normalized prototypes.

    Positives share the anchor's label; the denominator runs over every other
    sample in the batch. Anchors without positives are excluded (and counted).
    """
    bsz = z_protos.shape[0]
    if bsz < 2:
        raise DegenerateBatchError("contrastive loss needs a batch of >= 2")
    labels = np.asarray(labels)
    z = l2_normalize(z_protos, axis=-1)
    sims = matmul(z, swap_last_axes(z)) * (1.0 / gamma)
    eye = np.eye(bsz)
    logp = log_softmax(sims + Tensor(eye * NEG_INF), axis=-1)
    pos = ((labels[:, None] == labels[None, :]) & ~np.eye(bsz, dtype=bool))
    counts = pos.sum(axis=1)
    contributing = counts > 0
    n_excluded = int(bsz - contributing.sum())
    if not contributing.any():
        return Tensor(np.zeros(())), {"excluded": n_excluded, "anchors": 0}
    weights = np.where(contributing[:, None] & pos,
                       1.0 / np.maximum(counts, 1)[:, None], 0.0)
    per_anchor = -tsum(mul(logp, Tensor(weights)))
    loss = per_anchor / float(contributing.sum())
    return loss, {"excluded": n_excluded, "anchors": int(contributing.sum())}


def loss_local(model: Phase1Model, ema: EmaTarget, tokens: Tensor,
               mask: np.ndarray, tau: float = 0.1, variant: str = "ema",
               targets: Optional[Tensor] = None):
    """Per-timestep progress InfoNCE within each sequence.

    variant "ema": the positive pairs an online projection with the EMA
    projection of the same timestep (a stop-gradient target); negatives are
    EMA projections of the other timesteps. variant "literal" keeps the
    printed same-vector numerator (constant after normalization, so only the
    denominator moves). ``targets`` overrides the target projections, which
    finite-difference checks need to hold the stop-gradient branch fixed.
    """
    if variant not in ("ema", "literal"):
        raise ValueError(f"unknown local-loss variant {variant!r}")
    bsz, t_len = mask.shape
    if np.any(mask.sum(axis=1) < 2):
        raise DegenerateBatchError("progress InfoNCE needs >= 2 valid steps")
    p = l2_normalize(model.progress_head(tokens), axis=-1)  # [B,T,K]
    if targets is not None:
        z = targets
    elif variant == "ema":
        z = l2_normalize(ema_progress_projection(ema, Tensor(tokens.data.copy())),
                         axis=-1)
    else:
        z = p
    sims = matmul(p, swap_last_axes(z)) * (1.0 / tau)  # [B,T,T']
    invalid = (1.0 - mask)[:, None, :] * NEG_INF  # hide padded keys
    logp = log_softmax(sims + Tensor(invalid), axis=-1)
    diag = np.eye(t_len)[None] * mask[:, None, :] * mask[:, :, None]
    per_row = -tsum(mul(logp, Tensor(diag)))
    loss = per_row / float(mask.sum())
    return loss, {"steps": float(mask.sum())}


def loss_stage1(model: Phase1Model, ema: EmaTarget, batch: Phase1Batch,
                alpha: float = 1.0, beta: float = 1.0, gamma: float = 0.1,
                tau: float = 0.1, local_variant: str = "ema",
                local_targets: Optional[Tensor] = None):
    """Composite manifold objective; encodes the batch once.

    ``local_targets`` freezes the progress-InfoNCE target branch (used by
    finite-difference oracles, which must not see through stop-gradients).
    """
    tokens, z_proto, _ = model.encoder.encode_batch(
        Tensor(batch.obs), Tensor(batch.act_prev), batch.task_ids, batch.mask,
        times=batch.times)
    l_rec, s_rec = loss_rec(model, ema, tokens, batch)
    stats = dict(s_rec)
    loss = l_rec
    stats["rec"] = l_rec.item()
    if alpha != 0.0:
        l_glob, s_glob = loss_global(z_proto, batch.task_ids, gamma)
        loss = loss + alpha * l_glob
        stats["global"] = l_glob.item()
        stats.update({f"global_{k}": v for k, v in s_glob.items()})
    if beta != 0.0:
        l_loc, _ = loss_local(model, ema, tokens, batch.mask, tau, local_variant,
                              targets=local_targets)
        loss = loss + beta * l_loc
        stats["local"] = l_loc.item()
    return loss, stats


# ---------------------------------------------------------------------------
# optimizer and EMA step
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    pass


class AdamW:
    """Decoupled-weight-decay Adam with joint global-norm clipping and
    longest-prefix learning-rate groups."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 lr_groups: Optional[dict[str, float]] = None,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, clip_norm: float = 1.0,
                 max_bad_steps: int = 10):
        self.params = dict(params)
        self.lr = lr
        self.lr_groups = dict(lr_groups or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.max_bad_steps = max_bad_steps
        self.t = 0
        self.skipped = 0
        self._consecutive_bad = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def lr_for(self, name: str) -> float:
        best, best_len = self.lr, -1
        for prefix, lr in self.lr_groups.items():
            if name.startswith(prefix) and len(prefix) > best_len:
                best, best_len = lr, len(prefix)
        return best

    def step(self, grads: dict[Tensor, np.ndarray]) -> dict:
        gvec = [grads[p] for p in self.params.values()]
        sq = sum(float((g * g).sum()) for g in gvec)
        if not np.isfinite(sq):
            self.skipped += 1
            self._consecutive_bad += 1
            if self._consecutive_bad > self.max_bad_steps:
                raise TrainingDiverged(
                    f"{self._consecutive_bad} consecutive non-finite gradients")
            return {"grad_norm": float("nan"), "skipped": True}
        self._consecutive_bad = 0
        norm = np.sqrt(sq)
        scale = min(1.0, self.clip_norm / max(norm, 1e-12))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[p] * scale
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            lr = self.lr_for(name)
            p.data -= lr * (update + self.weight_decay * p.data)
        return {"grad_norm": float(norm), "clip_scale": float(scale),
                "skipped": False}


# ---------------------------------------------------------------------------
# latent cache (phase 2 input)
# ---------------------------------------------------------------------------


class LatentCache:
    """Frozen-encoder latents keyed by (episode, frame).

    Per episode: z_phase and observation features at every full-rate frame,
    plus the frame-skip-view prototype. Stored float32; a cache hit is
    bit-identical to a fresh frozen forward at float32.
    """

    def __init__(self, data: dict[str, np.ndarray], meta: Optional[dict] = None):
        self._data = data
        self.meta = meta or {}

    @classmethod
    def build(cls, encoder: BehaviorEncoder, trajectories, stats,
              frame_skip: int = 4, meta: Optional[dict] = None) -> "LatentCache":
        data: dict[str, np.ndarray] = {}
        episodes = []
        for traj in trajectories:
            norm = normalize_trajectory(traj, stats)
            lat_full = encoder.encode_trajectory(norm.obs, norm.act, traj.task_id)
            phi = encoder.phi(Tensor(norm.obs), np.array([traj.task_id] * len(norm)))
            view = norm.frame_skip(frame_skip)
            lat_proto = encoder.encode_trajectory(view.obs, view.act,
                                                  traj.task_id, times=view.times)
            eid = traj.episode_id
            data[f"{eid}/z_phase"] = lat_full.tokens.data.astype(np.float32)
            data[f"{eid}/phi"] = phi.data.astype(np.float32)
            data[f"{eid}/z_proto"] = lat_proto.z_proto.data.astype(np.float32)
            episodes.append(eid)
        full_meta = {"episodes": episodes, "frame_skip": frame_skip}
        full_meta.update(meta or {})
        return cls(data, full_meta)

    def episodes(self) -> list[str]:
        return list(self.meta["episodes"])

    def _get(self, key: str) -> np.ndarray:
        if key not in self._data:
            raise CacheIntegrityError(f"latent cache miss for {key}")
        return self._data[key]

    def phase(self, episode_id: str, frame: int) -> np.ndarray:
        arr = self._get(f"{episode_id}/z_phase")
        if not (0 <= frame < arr.shape[0]):
            raise CacheIntegrityError(
                f"latent cache miss for ({episode_id}, frame {frame})")
        return arr[frame]

    def phi(self, episode_id: str, frame: int) -> np.ndarray:
        arr = self._get(f"{episode_id}/phi")
        if not (0 <= frame < arr.shape[0]):
            raise CacheIntegrityError(
                f"latent cache miss for ({episode_id}, frame {frame})")
        return arr[frame]

    def proto(self, episode_id: str) -> np.ndarray:
        return self._get(f"{episode_id}/z_proto")

    def n_frames(self, episode_id: str) -> int:
        return self._get(f"{episode_id}/z_phase").shape[0]

    def save(self, path: str) -> None:
        meta_arr = np.frombuffer(json.dumps(self.meta, sort_keys=True).encode(),
                                 dtype=np.uint8)
        np.savez(path, __meta__=meta_arr, **self._data)

    @classmethod
    def load(cls, path: str) -> "LatentCache":
        with np.load(path) as z:
            data = {k: z[k] for k in z.files if k != "__meta__"}
            meta = json.loads(bytes(z["__meta__"].tobytes()).decode())
        return cls(data, meta)


# ---------------------------------------------------------------------------
# phase-2 loss
# ---------------------------------------------------------------------------


@dataclass
class Phase2Batch:
    z_phase: np.ndarray   # [B, D]
    z_proto: np.ndarray   # [B, D]
    phi: np.ndarray       # [B, D]
    a0: np.ndarray        # [B, H, D_a] normalized expert chunks
    sigma: np.ndarray     # [B]
    a1: np.ndarray        # [B, H, D_a]
    m: np.ndarray         # [B] Bernoulli prior mask


class Phase2Sampler:
    """Uniform (episode, frame) sampler over the cache with chunk targets
    padded by repeating the final action."""

    def __init__(self, cache: LatentCache, trajectories, stats, horizon: int):
        self.cache = cache
        self.horizon = horizon
        self.acts = {}
        by_id = {t.episode_id: t for t in trajectories}
        for eid in cache.episodes():
            if eid not in by_id:
                raise CacheIntegrityError(f"latent cache miss for episode {eid}")
            self.acts[eid] = normalize_trajectory(by_id[eid], stats).act
        self.index = [(eid, t) for eid in cache.episodes()
                      for t in range(cache.n_frames(eid))]

    def chunk(self, eid: str, t: int) -> np.ndarray:
        acts = self.acts[eid]
        h = self.horizon
        chunk = acts[t:t + h]
        if chunk.shape[0] < h:
            pad = np.repeat(chunk[-1:], h - chunk.shape[0], axis=0)
            chunk = np.vstack([chunk, pad])
        return chunk

    def sample(self, rng: np.random.Generator, batch_size: int,
               p_drop: float = 0.5) -> Phase2Batch:
        picks = rng.integers(0, len(self.index), batch_size)
        rows = [self.index[i] for i in picks]
        z_phase = np.stack([self.cache.phase(e, t) for e, t in rows]).astype(np.float64)
        z_proto = np.stack([self.cache.proto(e) for e, t in rows]).astype(np.float64)
        phi = np.stack([self.cache.phi(e, t) for e, t in rows]).astype(np.float64)
        a0 = np.stack([self.chunk(e, t) for e, t in rows])
        d_a = a0.shape[-1]
        return Phase2Batch(
            z_phase=z_phase, z_proto=z_proto, phi=phi, a0=a0,
            sigma=rng.uniform(0.0, 1.0, batch_size),
            a1=rng.standard_normal((batch_size, self.horizon, d_a)),
            m=(rng.uniform(0, 1, batch_size) < p_drop).astype(np.float64),
        )


def loss_flow(flow: FlowParams, pbd: PbdParams, batch: Phase2Batch):
    """Flow-matching regression onto the OT velocity with per-sample Bernoulli
    prior injection; per-sample squared norms averaged over the batch."""
    anchors = unfold_anchors(pbd, Tensor(batch.z_proto))
    ctx, _ = progress_attention(pbd, Tensor(batch.z_phase), anchors)
    prior = prior_params(pbd, ctx)
    a_sigma, u = flow_target(batch.a0, batch.a1, batch.sigma[:, None, None])
    mask = Tensor(batch.m[:, None, None])
    h_sigma = inject_prior(flow, Tensor(a_sigma), prior.mu, mask)
    v = vector_field(flow, h_sigma, batch.sigma, Tensor(batch.phi),
                     Tensor(batch.z_proto))
    per_sample = tsum(square(v - Tensor(u)), axis=(1, 2))
    loss = tmean(per_sample)
    return loss, {"flow": loss.item(), "prior_mass": float(batch.m.mean())}, prior


def loss_stage2(flow: FlowParams, pbd: PbdParams, batch: Phase2Batch,
                lambda_prior: float = 0.1):
    l_flow, stats, prior = loss_flow(flow, pbd, batch)
    loss = l_flow
    if lambda_prior != 0.0:
        l_prior = prior_nll(prior, Tensor(batch.a0))
        loss = loss + lambda_prior * l_prior
        stats["prior_nll"] = l_prior.item()
    stats["total"] = loss.item()
    return loss, stats


def param_fingerprint(params: dict[str, Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(params[name].data.tobytes())
    return digest.hexdigest()


class JsonlLogger:
    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._f = open(path, "w")
        else:
            self._f = None

    def log(self, record: dict) -> None:
        if self._f:
            self._f.write(json.dumps(record, sort_keys=True) + "\n")
            self._f.flush()

    def close(self) -> None:
        if self._f:
            self._f.close()
