"""Causal three-stream behavior encoder.

Observation, action, and behavior streams each run a stack of selective-SSM
layers for temporal mixing; after every layer the streams fuse spatially at
each timestep: the observation and action tokens cross-attend to each other
(single key, so the score is degenerate but the value path is live), then the
behavior token queries the pair. Time mixing happens only inside the SSM, so
the whole encoder is causal.

Outputs per trajectory: the behavior token sequence, its masked temporal mean
(the global prototype), and the running last token (the phase state). The
incremental `phase_step` path reproduces the batched encode exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ssm import SsmLayerParams, SsmState, ssm_scan, ssm_step
from .tensor import (
    EvaluationError,
    Tensor,
    concat,
    embedding,
    layer_norm,
    linear,
    mul,
    silu,
    softmax,
    tsum,
)


def sinusoid_encoding(positions: np.ndarray, d: int) -> np.ndarray:
    """Classic sin/cos position code, defined for any real positions."""
    positions = np.asarray(positions, dtype=np.float64)
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = positions[..., None] * freqs
    out = np.zeros(positions.shape + (d,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)[..., : (d + 1) // 2]
    out[..., 1::2] = np.cos(ang)[..., : d // 2]
    return out


def _init_w(rng, d_in, d_out, dtype=np.float64):
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)).astype(dtype),
                  requires_grad=True)


class AttentionParams:
    """Single-head scaled-dot attention with pre-norms on query and key/value."""

    def __init__(self, rng, d: int, dtype=np.float64):
        self.d = d
        self.wq = _init_w(rng, d, d, dtype)
        self.wk = _init_w(rng, d, d, dtype)
        self.wv = _init_w(rng, d, d, dtype)
        self.lnq_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.lnq_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.lnkv_g = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.lnkv_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def parameters(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv,
                "lnq.g": self.lnq_g, "lnq.b": self.lnq_b,
                "lnkv.g": self.lnkv_g, "lnkv.b": self.lnkv_b}


def attend(attn: AttentionParams, query: Tensor, keys: list[Tensor],
           weights_out: Optional[list] = None) -> Tensor:
    """Residual-free readout of a small per-timestep key set.

    query: [B,T,D]; each key: [B,T,D]. Scores are scaled dot products over
    the key set; weights sum to 1 per (b, t).
    """
    q = linear(layer_norm(query, attn.lnq_g, attn.lnq_b), attn.wq)
    scores, values = [], []
    for k in keys:
        kn = layer_norm(k, attn.lnkv_g, attn.lnkv_b)
        scores.append(tsum(mul(q, linear(kn, attn.wk)), axis=-1, keepdims=True))
        values.append(linear(kn, attn.wv))
    s = concat(scores, axis=-1) * (1.0 / np.sqrt(attn.d))  # [B,T,K]
    w = softmax(s, axis=-1)
    if weights_out is not None:
        weights_out.append(w.data)
    out = mul(values[0], w[..., 0:1])
    for j in range(1, len(values)):
        out = out + mul(values[j], w[..., j:j + 1])
    return out


class EncoderBlock:
    """One stage: per-stream SSM, then per-timestep three-way fusion."""

    def __init__(self, rng, d: int, d_state: int, d_conv: int, expand: int,
                 dtype=np.float64):
        self.ssm_v = SsmLayerParams(rng, d, d_state, d_conv, expand, dtype)
        self.ssm_a = SsmLayerParams(rng, d, d_state, d_conv, expand, dtype)
        self.ssm_z = SsmLayerParams(rng, d, d_state, d_conv, expand, dtype)
        self.attn_va = AttentionParams(rng, d, dtype)  # obs queries action
        self.attn_av = AttentionParams(rng, d, dtype)  # action queries obs
        self.attn_z = AttentionParams(rng, d, dtype)   # behavior queries both

    def parameters(self):
        out = {}
        for name, comp in (("ssm_v", self.ssm_v), ("ssm_a", self.ssm_a),
                           ("ssm_z", self.ssm_z), ("attn_va", self.attn_va),
                           ("attn_av", self.attn_av), ("attn_z", self.attn_z)):
            for k, v in comp.parameters().items():
                out[f"{name}.{k}"] = v
        return out


def fuse_block(block: EncoderBlock, h_v: Tensor, h_a: Tensor, h_z: Tensor,
               weights_out: Optional[list] = None):
    """Per-timestep fusion; both mutual updates read pre-update values."""
    v_new = h_v + attend(block.attn_va, h_v, [h_a], weights_out)
    a_new = h_a + attend(block.attn_av, h_a, [h_v], weights_out)
    z_new = h_z + attend(block.attn_z, h_z, [v_new, a_new], weights_out)
    return v_new, a_new, z_new


@dataclass
class BehaviorLatent:
    tokens: Tensor   # [T, D] (or [B, T, D] for batched calls)
    z_proto: Tensor  # [D] / [B, D]: masked temporal mean of tokens
    z_phase: Tensor  # [D] / [B, D]: last valid token


@dataclass
class EncoderEpisodeState:
    """Per-episode incremental state: one SsmState per block and stream."""

    states: list  # [(v, a, z), ...] per block
    t: int = 0


class BehaviorEncoder:
    """Embedding stage + L three-stream blocks."""

    def __init__(self, rng: np.random.Generator, d_obs: int, d_act: int,
                 num_tasks: int, d_model: int = 256, n_blocks: int = 8,
                 d_state: int = 16, d_conv: int = 4, expand: int = 2,
                 dtype=np.float64):
        self.d_obs, self.d_act, self.num_tasks = d_obs, d_act, num_tasks
        self.d_model, self.n_blocks = d_model, n_blocks
        d = d_model
        self.obs_w1 = _init_w(rng, d_obs, d, dtype)
        self.obs_b1 = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.obs_w2 = _init_w(rng, d, d, dtype)
        self.obs_b2 = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.act_w = _init_w(rng, d_act, d, dtype)
        self.act_b = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.task_table = Tensor(rng.normal(0, 1.0, size=(num_tasks, d)).astype(dtype),
                                 requires_grad=True)
        self.start_token = Tensor(rng.normal(0, 1.0, size=d).astype(dtype),
                                  requires_grad=True)
        self.blocks = [EncoderBlock(rng, d, d_state, d_conv, expand, dtype)
                       for _ in range(n_blocks)]

    # -- parameter plumbing ---------------------------------------------------

    def obs_encoder_params(self) -> dict[str, Tensor]:
        """The observation feature MLP: the EMA target tracks exactly these."""
        return {"obs.w1": self.obs_w1, "obs.b1": self.obs_b1,
                "obs.w2": self.obs_w2, "obs.b2": self.obs_b2}

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.obs_encoder_params())
        out.update({"act.w": self.act_w, "act.b": self.act_b,
                    "task_table": self.task_table, "start_token": self.start_token})
        for i, block in enumerate(self.blocks):
            for k, v in block.parameters().items():
                out[f"blocks.{i}.{k}"] = v
        return out

    # -- embedding ------------------------------------------------------------

    def obs_features(self, obs: Tensor) -> Tensor:
        """2-layer MLP over the raw state vector (the stand-in for a vision
        backbone); no task information."""
        hidden = silu(linear(obs, self.obs_w1, self.obs_b1))
        return linear(hidden, self.obs_w2, self.obs_b2)

    def phi(self, obs: Tensor, task_ids: np.ndarray) -> Tensor:
        """Observation/instruction features: obs MLP + task embedding."""
        return self.obs_features(obs) + embedding(self.task_table, task_ids)

    def embed_inputs(self, obs: Tensor, act_prev: Tensor, task_ids: np.ndarray,
                     times: Optional[np.ndarray] = None, t0: int = 0):
        """Stream inputs for aligned sequences.

        obs: [B,T,d_obs]; act_prev: [B,T,d_act] where act_prev[:, t] is the
        action taken before observing obs[:, t] (zeros at t=0); task_ids: [B].
        ``times`` ([B,T] or [T]) are source-frame indices for the time code,
        so subsampled views and full-rate replay share one clock; default is
        t0, t0+1, ...
        """
        if obs.shape[:2] != act_prev.shape[:2]:
            raise ValueError(
                f"obs/action sequence lengths disagree: {obs.shape[:2]} vs "
                f"{act_prev.shape[:2]}")
        bsz, t_len = obs.shape[:2]
        if times is None:
            times = np.arange(t0, t0 + t_len)
        pe = sinusoid_encoding(np.asarray(times), self.d_model)
        if pe.ndim == 2:
            pe = pe[None]
        task_e = embedding(self.task_table, task_ids).reshape(bsz, 1, self.d_model)
        x_v = self.obs_features(obs) + task_e + Tensor(pe)
        x_a = linear(act_prev, self.act_w, self.act_b) + Tensor(pe)
        x_z = self.start_token.reshape(1, 1, self.d_model) + Tensor(
            np.broadcast_to(pe, (bsz, t_len, self.d_model)).copy())
        return x_v, x_a, x_z

    # -- full-sequence encode ---------------------------------------------------

    def encode_batch(self, obs: Tensor, act_prev: Tensor, task_ids: np.ndarray,
                     mask: Optional[np.ndarray] = None,
                     times: Optional[np.ndarray] = None,
                     weights_out: Optional[list] = None):
        """Returns (tokens [B,T,D], z_proto [B,D], v_tokens [B,T,D]).

        mask: [B,T] validity floats; padding is excluded from the prototype
        pool (causality already keeps it out of valid tokens).
        """
        h_v, h_a, h_z = self.embed_inputs(obs, act_prev, task_ids, times)
        for i, block in enumerate(self.blocks):
            try:
                h_v = ssm_scan(block.ssm_v, h_v)
                h_a = ssm_scan(block.ssm_a, h_a)
                h_z = ssm_scan(block.ssm_z, h_z)
            except EvaluationError as e:
                raise EvaluationError(f"encoder block {i}: {e}") from e
            h_v, h_a, h_z = fuse_block(block, h_v, h_a, h_z, weights_out)
        bsz, t_len = obs.shape[:2]
        if mask is None:
            mask = np.ones((bsz, t_len))
        m = Tensor(np.asarray(mask, dtype=h_z.dtype)[..., None])
        denom = tsum(m, axis=1)  # [B,1]
        z_proto = tsum(mul(h_z, m), axis=1) / denom
        return h_z, z_proto, h_v

    def encode_trajectory(self, obs_seq: np.ndarray, act_seq: np.ndarray,
                          task_id: int,
                          times: Optional[np.ndarray] = None) -> BehaviorLatent:
        """Single normalized trajectory -> tokens, prototype, phase state.

        act_seq[t] is the action taken at step t; it is shifted internally so
        the action stream sees the previous action.
        """
        t_len = obs_seq.shape[0]
        if t_len < 1:
            raise ValueError("encode_trajectory needs T >= 1")
        act_prev = np.zeros_like(act_seq)
        act_prev[1:] = act_seq[:-1]
        tokens, z_proto, _ = self.encode_batch(
            Tensor(obs_seq[None]), Tensor(act_prev[None]), np.array([task_id]),
            times=None if times is None else np.asarray(times)[None])
        return BehaviorLatent(tokens=tokens[0], z_proto=z_proto[0],
                              z_phase=tokens[0, t_len - 1])

    # -- incremental encode -----------------------------------------------------

    def init_episode(self, batch: int = 1, dtype=np.float64) -> EncoderEpisodeState:
        states = [tuple(SsmState.zeros(s, batch, dtype)
                        for s in (b.ssm_v, b.ssm_a, b.ssm_z))
                  for b in self.blocks]
        return EncoderEpisodeState(states=states)

    def phase_step(self, ep: EncoderEpisodeState, obs_t: np.ndarray,
                   a_prev: np.ndarray, task_id: int):
        """One incremental step; returns (z_phase_t [D], new state).

        Matches encode_trajectory's token at position ep.t on the running
        prefix. The passed state is not mutated.
        """
        if ep is None:
            raise RuntimeError("phase_step needs a state from init_episode")
        x_v, x_a, x_z = self.embed_inputs(
            Tensor(obs_t[None, None, :]), Tensor(a_prev[None, None, :]),
            np.array([task_id]), t0=ep.t)
        h_v = x_v.reshape(1, self.d_model)
        h_a = x_a.reshape(1, self.d_model)
        h_z = x_z.reshape(1, self.d_model)
        new_states = []
        for block, (sv, sa, sz) in zip(self.blocks, ep.states):
            h_v, sv = ssm_step(block.ssm_v, sv, h_v)
            h_a, sa = ssm_step(block.ssm_a, sa, h_a)
            h_z, sz = ssm_step(block.ssm_z, sz, h_z)
            new_states.append((sv, sa, sz))
            v3 = h_v.reshape(1, 1, self.d_model)
            a3 = h_a.reshape(1, 1, self.d_model)
            z3 = h_z.reshape(1, 1, self.d_model)
            v3, a3, z3 = fuse_block(block, v3, a3, z3)
            h_v = v3.reshape(1, self.d_model)
            h_a = a3.reshape(1, self.d_model)
            h_z = z3.reshape(1, self.d_model)
        return h_z[0], EncoderEpisodeState(states=new_states, t=ep.t + 1)
