"""End-to-end pipeline stages shared by the CLI and the acceptance suite:
dataset generation, phase-1 manifold training, bank building, latent
extraction, phase-2 policy tuning, evaluation, sweeps, and gradient checks.

Every artifact embeds the producing run configuration plus content hashes of
its inputs, and loaders validate those before use.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from typing import Optional

import numpy as np

from . import env
from .bank import MemoryBank, build_bank, load_bank, save_bank
from .checkpoint import (
    CheckpointFormatError,
    assign_params,
    load_checkpoint,
    save_checkpoint,
)
from .config import RunConfig
from .decoder import ActionPrior, PbdParams, prior_nll
from .flow import FlowParams, FlowPolicy, PolicyBundle
from .analysis import phase_probe_score
from .tensor import Tensor, grad_check, l2_normalize
from .training import (
    AdamW,
    JsonlLogger,
    LatentCache,
    Phase1Model,
    Phase2Batch,
    Phase2Sampler,
    ema_progress_projection,
    loss_flow,
    loss_global,
    loss_local,
    loss_rec,
    loss_stage1,
    loss_stage2,
    make_phase1_batch,
    param_fingerprint,
)
from .trajectory import TaskStats, load_dataset, load_stats

NUM_TASKS = len(env.TASKS)


def _file_hash(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _stats_to_doc(stats: dict[int, TaskStats]) -> dict:
    return {str(tid): {"action_mean": s.action_mean.tolist(),
                       "action_std": s.action_std.tolist(),
                       "obs_mean": s.obs_mean.tolist(),
                       "obs_std": s.obs_std.tolist()}
            for tid, s in stats.items()}


def _stats_from_doc(doc: dict) -> dict[int, TaskStats]:
    return {int(tid): TaskStats(
        action_mean=np.asarray(d["action_mean"]),
        action_std=np.asarray(d["action_std"]),
        obs_mean=np.asarray(d["obs_mean"]),
        obs_std=np.asarray(d["obs_std"])) for tid, d in doc.items()}


def build_phase1_model(cfg: RunConfig, seed_offset: int = 1) -> Phase1Model:
    rng = np.random.default_rng([cfg.seed, seed_offset])
    m = cfg.model
    return Phase1Model(
        rng, d_obs=env.D_OBS, d_act=env.D_ACT, num_tasks=NUM_TASKS,
        d_model=m.d_model, n_blocks=m.n_blocks, d_state=m.d_state,
        d_conv=m.d_conv, expand=m.expand, head_hidden=m.head_hidden,
        head_out=m.head_out, dtype=cfg.np_dtype())


def _load_data(data_dir: str):
    trajs = load_dataset(data_dir)
    stats = load_stats(os.path.join(data_dir, "stats.json"))
    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    return trajs, stats, manifest


def cmd_gen_data(cfg: RunConfig, out_dir: str) -> dict:
    manifest = env.generate_dataset(out_dir, n_per_task=cfg.env.n_per_task,
                                    seed=cfg.seed, tasks=cfg.env.tasks)
    with open(os.path.join(out_dir, "manifest.json")) as f:
        doc = json.load(f)
    doc["run_config"] = cfg.to_dict()
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def cmd_train_phase1(cfg: RunConfig, data_dir: str, out_dir: str,
                     log_path: Optional[str] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    trajs, stats, manifest = _load_data(data_dir)
    model = build_phase1_model(cfg)
    ema = model.make_ema(cfg.phase1.ema_decay)
    params = model.trainable_parameters()
    opt = AdamW(params, lr=cfg.phase1.lr_backbone,
                lr_groups={"encoder.obs.": cfg.phase1.lr_obs_encoder},
                weight_decay=cfg.phase1.weight_decay,
                clip_norm=cfg.phase1.clip_norm)
    logger = JsonlLogger(log_path or os.path.join(out_dir, "phase1_metrics.jsonl"))
    from .tensor import Tape

    p1 = cfg.phase1
    dtype = cfg.np_dtype()
    step = 0
    t0 = time.time()
    for epoch in range(p1.epochs):
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(len(trajs))
        for lo in range(0, len(order), p1.batch_size):
            picks = order[lo:lo + p1.batch_size]
            if picks.shape[0] < 2:
                continue
            batch = make_phase1_batch([trajs[i] for i in picks], stats,
                                      p1.frame_skip, dtype=dtype)
            with Tape() as tape:
                loss, stats_d = loss_stage1(
                    model, ema, batch, alpha=p1.alpha, beta=p1.beta,
                    gamma=p1.gamma, tau=p1.tau, local_variant=p1.local_variant)
                grads = tape.backward(loss, params.values())
            info = opt.step(grads)
            ema.update({k: v for k, v in model.encoder.obs_encoder_params().items()})
            ema.update({f"progress.{k}": v
                        for k, v in model.progress_head.parameters().items()})
            step += 1
            logger.log({"step": step, "epoch": epoch, "loss": loss.item(),
                        "grad_norm": info["grad_norm"], **stats_d})
    logger.close()

    ckpt_path = os.path.join(out_dir, "phase1.bvla")
    meta = {
        "run_config": cfg.to_dict(),
        "stage": "phase1",
        "data": {"d_obs": env.D_OBS, "d_act": env.D_ACT, "num_tasks": NUM_TASKS,
                 "fingerprint": manifest["fingerprint"]},
        "norm_stats": _stats_to_doc(stats),
        "wall_seconds": time.time() - t0,
    }
    save_checkpoint(ckpt_path, model.parameters(), config=meta)
    return ckpt_path


def load_phase1(ckpt_path: str):
    params, meta = load_checkpoint(ckpt_path)
    if meta is None or "run_config" not in meta:
        raise CheckpointFormatError("checkpoint carries no run configuration")
    cfg = RunConfig.from_dict(meta["run_config"])
    model = build_phase1_model(cfg)
    assign_params(params, model.parameters())
    stats = _stats_from_doc(meta["norm_stats"])
    return model, cfg, stats, meta


def cmd_build_bank(checkpoint: str, data_dir: str, out_path: str,
                   kappa: Optional[float] = None,
                   frame_skip: Optional[int] = None) -> MemoryBank:
    model, cfg, stats, meta = load_phase1(checkpoint)
    trajs, data_stats, manifest = _load_data(data_dir)
    bank = build_bank(
        model.encoder, model.query_head, trajs, stats,
        kappa=kappa if kappa is not None else cfg.retrieval.kappa,
        frame_skip=frame_skip if frame_skip is not None else cfg.phase1.frame_skip,
        built_from=manifest["fingerprint"],
        config={"run_config": cfg.to_dict(), "checkpoint": _file_hash(checkpoint)})
    save_bank(out_path, bank)
    return bank


def cmd_extract_latents(checkpoint: str, data_dir: str, out_path: str) -> LatentCache:
    model, cfg, stats, meta = load_phase1(checkpoint)
    trajs, _, manifest = _load_data(data_dir)
    cache = LatentCache.build(
        model.encoder, trajs, stats, frame_skip=cfg.phase1.frame_skip,
        meta={"run_config": cfg.to_dict(), "checkpoint": _file_hash(checkpoint),
              "dataset_fingerprint": manifest["fingerprint"]})
    cache.save(out_path)
    return cache


def cmd_train_phase2(cfg_override: Optional[RunConfig], phase1_ckpt: str,
                     cache_path: str, data_dir: str, out_dir: str,
                     log_path: Optional[str] = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    model, cfg, stats, meta = load_phase1(phase1_ckpt)
    if cfg_override is not None:
        cfg.phase2 = cfg_override.phase2
    trajs, _, manifest = _load_data(data_dir)
    cache = LatentCache.load(cache_path)

    # the encoder is never forwarded here; the fingerprint audit makes the
    # freeze contract checkable from the outside
    encoder_params = {f"encoder.{k}": v
                      for k, v in model.encoder.parameters().items()}
    fp_before = param_fingerprint(encoder_params)

    rng = np.random.default_rng([cfg.seed, 3])
    dtype = cfg.np_dtype()
    m = cfg.model
    pbd = PbdParams(rng, d_model=m.d_model, horizon=m.horizon, d_act=env.D_ACT,
                    dtype=dtype)
    flow = FlowParams(rng, d_model=m.d_model, horizon=m.horizon, d_act=env.D_ACT,
                      n_blocks=m.flow_blocks, dtype=dtype)
    sampler = Phase2Sampler(cache, trajs, stats, horizon=m.horizon)
    params = {**{f"pbd.{k}": v for k, v in pbd.parameters().items()},
              **{f"flow.{k}": v for k, v in flow.parameters().items()}}
    opt = AdamW(params, lr=cfg.phase2.lr, weight_decay=cfg.phase2.weight_decay,
                clip_norm=cfg.phase2.clip_norm)
    logger = JsonlLogger(log_path or os.path.join(out_dir, "phase2_metrics.jsonl"))
    from .tensor import Tape

    t0 = time.time()
    for step in range(1, cfg.phase2.steps + 1):
        batch = sampler.sample(np.random.default_rng([cfg.seed, 4, step]),
                               cfg.phase2.batch_size, cfg.phase2.p_drop)
        with Tape() as tape:
            loss, stats_d = loss_stage2(flow, pbd, batch,
                                        lambda_prior=cfg.phase2.lambda_prior)
            grads = tape.backward(loss, params.values())
        info = opt.step(grads)
        if step % 25 == 0 or step == 1:
            logger.log({"step": step, "loss": loss.item(),
                        "grad_norm": info["grad_norm"], **stats_d})
    logger.close()

    fp_after = param_fingerprint(encoder_params)
    if fp_before != fp_after:
        raise RuntimeError("frozen-encoder audit failed: parameters moved")

    all_params = {f"phase1.{k}": v for k, v in model.parameters().items()}
    all_params.update({f"pbd.{k}": v for k, v in pbd.parameters().items()})
    all_params.update({f"flow.{k}": v for k, v in flow.parameters().items()})
    ckpt_path = os.path.join(out_dir, "policy.bvla")
    save_checkpoint(ckpt_path, all_params, config={
        "run_config": cfg.to_dict(),
        "stage": "policy",
        "data": meta["data"],
        "norm_stats": meta["norm_stats"],
        "encoder_fingerprint": fp_after,
        "dataset_fingerprint": manifest["fingerprint"],
        "phase1_checkpoint": _file_hash(phase1_ckpt),
        "wall_seconds": time.time() - t0,
    })
    return ckpt_path


def load_policy(policy_ckpt: str, bank_path: str) -> tuple[PolicyBundle, RunConfig]:
    params, meta = load_checkpoint(policy_ckpt)
    if meta is None or meta.get("stage") != "policy":
        raise CheckpointFormatError("not a policy checkpoint")
    cfg = RunConfig.from_dict(meta["run_config"])
    model = build_phase1_model(cfg)
    rng = np.random.default_rng([cfg.seed, 3])
    m = cfg.model
    pbd = PbdParams(rng, d_model=m.d_model, horizon=m.horizon, d_act=env.D_ACT)
    flow = FlowParams(rng, d_model=m.d_model, horizon=m.horizon, d_act=env.D_ACT,
                      n_blocks=m.flow_blocks)
    targets = {f"phase1.{k}": v for k, v in model.parameters().items()}
    targets.update({f"pbd.{k}": v for k, v in pbd.parameters().items()})
    targets.update({f"flow.{k}": v for k, v in flow.parameters().items()})
    assign_params(params, targets)
    bank = load_bank(bank_path)
    if bank.d_value != m.d_model or bank.d_key != m.d_model:
        raise CheckpointFormatError(
            f"bank width (key {bank.d_key}, value {bank.d_value}) does not "
            f"match checkpoint d_model {m.d_model}")
    stats = _stats_from_doc(meta["norm_stats"])
    bundle = PolicyBundle(encoder=model.encoder, query_head=model.query_head,
                          pbd=pbd, flow=flow, bank=bank, stats=stats,
                          config=cfg.to_dict())
    return bundle, cfg


def cmd_eval(policy_ckpt: str, bank_path: str, lambda_guidance: Optional[float],
             flow_steps: Optional[int], episodes: Optional[int], seed: int,
             tasks: Optional[list[int]] = None, k: Optional[int] = None,
             proto_mode: str = "retrieved") -> dict:
    bundle, cfg = load_policy(policy_ckpt, bank_path)
    lam = cfg.phase2.lambda_guidance if lambda_guidance is None else lambda_guidance
    steps = cfg.phase2.flow_steps if flow_steps is None else flow_steps
    n_eps = cfg.env.eval_episodes if episodes is None else episodes
    kk = cfg.retrieval.k if k is None else k
    task_ids = tasks if tasks is not None else (
        cfg.env.eval_tasks or [t.task_id for t in env.TASKS])

    policy = FlowPolicy(bundle, lambda_guidance=lam, flow_steps=steps,
                        k_retrieve=kk, exec_horizon=cfg.phase2.exec_horizon,
                        proto_mode=proto_mode)
    per_task = {}
    all_traces = []
    lengths = []
    for tid in task_ids:
        metrics = env.rollout_eval(policy, env.TASKS[tid], n_eps, seed)
        all_traces.extend(metrics.pop("phase_traces"))
        per_task[env.TASKS[tid].name] = metrics["success_rate"]
        lengths.append(metrics["mean_episode_len"])
    if len(all_traces) >= 4:
        half = len(all_traces) // 2
        drift = phase_probe_score(all_traces[:half], all_traces[half:])
    else:
        drift = None
    return {
        "success_rate": float(np.mean(list(per_task.values()))),
        "per_task": per_task,
        "phase_drift": drift,
        "mean_episode_len": float(np.mean(lengths)),
        "config": {
            "lambda_guidance": lam, "flow_steps": steps, "episodes": n_eps,
            "seed": seed, "k": kk, "proto_mode": proto_mode,
            "tasks": list(task_ids), "run_config": cfg.to_dict(),
            "checkpoint": _file_hash(policy_ckpt), "bank": _file_hash(bank_path),
        },
    }


def cmd_sweep(policy_ckpt: str, bank_path: str, axis: str, values: list[float],
              episodes: int, seed: int, tasks: Optional[list[int]] = None) -> list[dict]:
    rows = []
    for v in values:
        if axis == "lambda":
            metrics = cmd_eval(policy_ckpt, bank_path, lambda_guidance=v,
                               flow_steps=None, episodes=episodes, seed=seed,
                               tasks=tasks)
        elif axis == "k":
            metrics = cmd_eval(policy_ckpt, bank_path, lambda_guidance=None,
                               flow_steps=None, episodes=episodes, seed=seed,
                               tasks=tasks, k=int(v))
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        p = metrics["success_rate"]
        n = episodes * len(metrics["per_task"])
        rows.append({axis: v, "success_rate": p,
                     "stderr": float(np.sqrt(max(p * (1 - p), 0.0) / n))})
    return rows


def write_sweep_csv(path: str, axis: str, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(f"{axis},success_rate,stderr\n")
        for row in rows:
            f.write(f"{row[axis]},{row['success_rate']:.6f},{row['stderr']:.6f}\n")


# ---------------------------------------------------------------------------
# gradient checks over every public loss
# ---------------------------------------------------------------------------


def gradcheck_all(rng_seed: int = 0, max_rel_err: float = 1e-3) -> dict:
    """Central-difference checks for every public loss at float64.

    Each loss is scaled by 1e-3 before differencing so the finite-difference
    roundoff stays below the 1e-8 denominator floor of the relative error on
    coordinates whose true gradient vanishes; relative comparisons are
    scale-free, so this changes conditioning only.
    """
    from .training import Phase1Batch

    rng = np.random.default_rng(rng_seed)
    results = {}

    model = Phase1Model(rng, d_obs=9, d_act=3, num_tasks=4, d_model=12,
                        n_blocks=1, d_state=4, head_hidden=12, head_out=8)
    ema = model.make_ema(0.99)
    batch = Phase1Batch(obs=rng.standard_normal((3, 5, 9)),
                        act=rng.standard_normal((3, 5, 3)),
                        mask=np.ones((3, 5)),
                        task_ids=np.array([0, 0, 1]))
    params = list(model.trainable_parameters().values())

    def encode():
        return model.encoder.encode_batch(
            Tensor(batch.obs), Tensor(batch.act_prev), batch.task_ids, batch.mask)

    def count(ps, mc):
        return int(sum(min(p.size, mc) for p in ps))

    def f_rec():
        tokens, _, _ = encode()
        return loss_rec(model, ema, tokens, batch)[0] * 1e-3

    results["loss_rec"] = {"err": grad_check(f_rec, params, step=1e-5, max_coords=3,
                                             rng=np.random.default_rng(1)),
                           "coords": count(params, 3)}

    z = Tensor(rng.standard_normal((8, 16)), requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2, 3, 3])
    results["loss_global"] = {
        "err": grad_check(lambda: loss_global(z, labels)[0] * 1e-3, [z],
                          step=1e-5, max_coords=128,
                          rng=np.random.default_rng(2)),
        "coords": count([z], 128)}

    tokens_in = Tensor(rng.standard_normal((2, 6, 12)), requires_grad=True)
    mask = np.ones((2, 6))
    frozen = Tensor(l2_normalize(
        ema_progress_projection(ema, Tensor(tokens_in.data.copy())), axis=-1).data)
    local_params = [tokens_in] + list(model.progress_head.parameters().values())
    results["loss_local"] = {
        "err": grad_check(
            lambda: loss_local(model, ema, tokens_in, mask, targets=frozen)[0] * 1e-3,
            local_params, step=1e-5, max_coords=30,
            rng=np.random.default_rng(3)),
        "coords": count(local_params, 30)}

    tokens0, _, _ = encode()
    frozen1 = Tensor(l2_normalize(
        ema_progress_projection(ema, Tensor(tokens0.data.copy())), axis=-1).data)
    results["loss_stage1"] = {
        "err": grad_check(
            lambda: loss_stage1(model, ema, batch, local_targets=frozen1)[0] * 1e-3,
            params, step=1e-5, max_coords=3, rng=np.random.default_rng(4)),
        "coords": count(params, 3)}

    pbd = PbdParams(rng, d_model=10, horizon=4, d_act=3)
    flow = FlowParams(rng, d_model=10, horizon=4, d_act=3, n_blocks=1)
    p2 = Phase2Batch(
        z_phase=rng.standard_normal((4, 10)), z_proto=rng.standard_normal((4, 10)),
        phi=rng.standard_normal((4, 10)), a0=rng.standard_normal((4, 4, 3)),
        sigma=rng.uniform(0, 1, 4), a1=rng.standard_normal((4, 4, 3)),
        m=np.array([0.0, 1.0, 0.0, 1.0]))
    p2_params = list(pbd.parameters().values()) + list(flow.parameters().values())
    results["loss_flow"] = {
        "err": grad_check(lambda: loss_flow(flow, pbd, p2)[0] * 1e-3, p2_params,
                          step=1e-5, max_coords=5, rng=np.random.default_rng(5)),
        "coords": count(p2_params, 5)}

    mu = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    ls = Tensor(rng.uniform(-1, 1, (8, 5)), requires_grad=True)
    a0 = Tensor(rng.standard_normal((8, 5)), requires_grad=True)
    nll_params = [mu, ls, a0]
    results["prior_nll"] = {
        "err": grad_check(
            lambda: prior_nll(ActionPrior(mu=mu, log_sigma=ls), a0) * 1e-3,
            nll_params, step=1e-5, max_coords=40,
            rng=np.random.default_rng(6)),
        "coords": count(nll_params, 40)}

    results["loss_stage2"] = {
        "err": grad_check(lambda: loss_stage2(flow, pbd, p2)[0] * 1e-3, p2_params,
                          step=1e-5, max_coords=5, rng=np.random.default_rng(7)),
        "coords": count(p2_params, 5)}

    for name, res in results.items():
        res["pass"] = bool(res["err"] < max_rel_err)
    return results
