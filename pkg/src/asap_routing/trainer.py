"""PPO training with POMO rollouts, GAE and checkpointing."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, List, Optional

import torch

from . import env as routing_env
from .baselines import build_solution
from .env import InstanceBatch, tours_from_visits
from .errors import (ConfigurationError, IncompatibilityError, IntegrityError, ShapeError,
                     TrainingAborted)
from .fileio import atomic_write_bytes, atomic_write_text
from .instance import GenerationConfig, Instance, generate_instance
from .numerics import AdamState, ParamStore, backward, clip_grad_norm, entropy, log_softmax, optimizer_step
from .policy import AttentionPolicy, EncodedGraph, PolicyConfig, rollout_episode

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["update", "mean_return", "mean_distance", "mean_served_demand", "mean_vehicles_used",
                  "policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl", "wallclock_s"]
EVAL_COLUMNS = ["update", "mean_objective", "mean_episode_objective", "mean_distance",
                "mean_served_demand", "mean_vehicles_used", "wallclock_s"]


@dataclass(frozen=True)
class TrainConfig:
    num_customers: int = 10
    num_envs: int = 64
    steps_per_rollout: int = 100
    global_updates: int = 300
    minibatches: int = 8
    update_epochs: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.2
    ent_coef: float = 0.01
    vf_coef: float = 0.5
    learning_rate: float = 2.5e-4
    max_grad_norm: float = 0.5
    norm_adv: bool = True
    ratio_direction: str = "new_over_old"   # or "old_over_new" (literal ablation)
    value_target: str = "returns"           # or "old_values" (literal ablation)
    penalty: float = routing_env.DEFAULT_PENALTY
    eval_every: int = 100
    eval_instances: int = 32
    eval_seed: int = 4321
    seed: int = 1234
    record_wallclock: bool = True

    def __post_init__(self):
        if self.num_envs % self.minibatches:
            raise ConfigurationError(f"num_envs {self.num_envs} not divisible by minibatches {self.minibatches}")
        if min(self.num_customers, self.num_envs, self.steps_per_rollout, self.minibatches,
               self.update_epochs, self.eval_every, self.eval_instances) < 1:
            raise ConfigurationError("counts in TrainConfig must be positive")
        if self.global_updates < 0:
            raise ConfigurationError("global_updates must be >= 0")
        if not (0 <= self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise ConfigurationError("gamma and gae_lambda must lie in [0, 1]")
        if not self.clip_coef > 0 or self.ent_coef < 0 or self.vf_coef < 0 or not self.learning_rate > 0:
            raise ConfigurationError("clip_coef, learning_rate must be positive; coefficients nonnegative")
        if self.ratio_direction not in ("new_over_old", "old_over_new"):
            raise ConfigurationError(f"unknown ratio_direction {self.ratio_direction!r}")
        if self.value_target not in ("returns", "old_values"):
            raise ConfigurationError(f"unknown value_target {self.value_target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def train_instance_seed(seed: int, counter: int) -> int:
    return seed * 10_000_019 + counter


def eval_instance_set(config: TrainConfig, gen: GenerationConfig = GenerationConfig()) -> List[Instance]:
    return [generate_instance(config.num_customers, train_instance_seed(config.eval_seed, i), gen)
            for i in range(config.eval_instances)]


# -- advantage estimation -----------------------------------------------------

def compute_gae(rewards, values, dones, next_values, gamma: float, lam: float):
    """Generalized advantage estimation, time-major ``(T, ...)``.

    ``dones[t]`` marks that the transition at ``t`` ended the episode; the
    recursion then stops bootstrapping (``A_t = r_t - v_t``).
    """
    if not (rewards.shape == values.shape == dones.shape) or next_values.shape != rewards.shape[1:]:
        raise ShapeError(f"GAE shapes disagree: rewards {tuple(rewards.shape)}, values {tuple(values.shape)}, "
                         f"dones {tuple(dones.shape)}, next_values {tuple(next_values.shape)}")
    T = rewards.shape[0]
    adv = torch.zeros_like(rewards)
    last = torch.zeros_like(next_values)
    notdone = 1.0 - dones.to(rewards.dtype)
    for t in reversed(range(T)):
        nv = next_values if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * nv * notdone[t] - values[t]
        last = delta + gamma * lam * notdone[t] * last
        adv[t] = last
    return adv, adv + values


# -- rollout buffer -----------------------------------------------------------

@dataclass
class RolloutBuffer:
    """Time-major ``(T, B, traj)`` record plus what is needed to re-run the policy."""
    coords: torch.Tensor        # (M, N, 2) every instance seen in the rollout
    demand: torch.Tensor        # (M, N)
    instance_index: torch.Tensor  # (T, B)
    current_node: torch.Tensor  # (T, B, traj)
    load: torch.Tensor
    vehicles: torch.Tensor
    feasible: torch.Tensor      # (T, B, traj, N)
    urgency: torch.Tensor       # (T, B, traj, N)
    actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    entropies: torch.Tensor
    train_mask: torch.Tensor    # False for forced POMO steps and frozen trajectories
    next_values: torch.Tensor   # (B, traj)
    advantages: Optional[torch.Tensor] = None
    returns: Optional[torch.Tensor] = None

    @property
    def shape(self):
        return tuple(self.actions.shape)

    def finalize(self, gamma: float, lam: float) -> "RolloutBuffer":
        self.advantages, self.returns = compute_gae(self.rewards, self.values, self.dones,
                                                    self.next_values, gamma, lam)
        return self


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    optimizer_steps: int
    minibatch_stats: List[dict] = field(default_factory=list)


class VectorRollout:
    """``num_envs`` POMO environments that restart with fresh instances when finished."""

    def __init__(self, policy: AttentionPolicy, config: TrainConfig, gen: GenerationConfig = GenerationConfig()):
        self.policy = policy
        self.config = config
        self.gen = gen
        self.counter = 0
        self.generator = torch.Generator().manual_seed(config.seed)
        insts = [self._next_instance() for _ in range(config.num_envs)]
        self.instances = list(insts)
        self.state = routing_env.reset(insts, config.num_customers, track_visits=False)
        self.enc = None
        B, T = config.num_envs, config.num_customers
        self._acc = {k: torch.zeros(B, T, dtype=torch.float64) for k in ("ret", "dist", "served", "veh")}
        self.completed: List[dict] = []

    def _next_instance(self) -> Instance:
        inst = generate_instance(self.config.num_customers,
                                 train_instance_seed(self.config.seed, self.counter), self.gen)
        self.counter += 1
        return inst

    @torch.no_grad()
    def _encode_rows(self, rows: Optional[torch.Tensor] = None) -> None:
        if rows is None or self.enc is None:
            self.enc = self.policy.encode(self.policy.embed_nodes(self.state.instances), training=False)
            return
        sub = InstanceBatch(*(getattr(self.state.instances, f.name)[rows]
                              for f in fields(InstanceBatch)))
        enc_rows = self.policy.encode(self.policy.embed_nodes(sub), training=False)
        for name in ("node_embeddings", "graph_context", "glimpse_keys", "glimpse_values", "pointer_keys"):
            getattr(self.enc, name)[rows] = getattr(enc_rows, name)

    @torch.no_grad()
    def collect(self, steps: int) -> RolloutBuffer:
        cfg, policy = self.config, self.policy
        self._encode_rows()
        B = cfg.num_envs
        coords = [self.state.instances.coords.clone()]
        demand = [self.state.instances.demand.clone()]
        index = torch.arange(B)
        next_index = B
        keys = ("instance_index", "current_node", "load", "vehicles", "feasible", "urgency", "actions",
                "log_probs", "values", "rewards", "dones", "entropies", "train_mask")
        rec = {k: [] for k in keys}
        self.completed = []
        for _ in range(steps):
            st = self.state
            urgency, _ = routing_env.compute_urgency(st)
            feasible = routing_env.feasible_actions(st, urgency)
            urg = urgency.to(policy.dtype)
            out = policy.decode(self.enc, st.current_node, st.load, st.vehicles_remaining, feasible, urg)
            actions, logp, ent = policy.act(out.logits, "sample", self.generator)
            first = st.step == 0  # (B, traj); whole env rows start together
            if bool(first.any()):
                rows = first.all(-1)
                forced = routing_env.force_pomo_starts(_rows_state(st, rows))
                actions = actions.clone()
                actions[rows] = forced
                logp_all = log_softmax(out.logits, -1)
                logp = torch.gather(logp_all, -1, actions[..., None])[..., 0]
            value = policy.critic_value(out.glimpse)
            live = ~st.done
            new, outcome = routing_env.step(st, actions, penalty=cfg.penalty, feasible=feasible)
            self._track(st, new, outcome, live)
            for k, v in (("instance_index", index.clone()), ("current_node", st.current_node),
                         ("load", st.load.to(policy.dtype)), ("vehicles", st.vehicles_remaining),
                         ("feasible", feasible), ("urgency", urg), ("actions", actions),
                         ("log_probs", logp), ("values", value), ("rewards", outcome.reward.to(policy.dtype)),
                         ("dones", outcome.done), ("entropies", ent), ("train_mask", live & ~first)):
                rec[k].append(v)
            self.state = new
            finished = new.done.all(-1)
            if bool(finished.any()):
                rows = finished.nonzero()[:, 0]
                fresh = [self._next_instance() for _ in range(len(rows))]
                for r, inst in zip(rows.tolist(), fresh):
                    self.instances[r] = inst
                self.state = routing_env.reset_rows(self.state, rows, fresh)
                self._encode_rows(rows)
                coords.append(self.state.instances.coords[rows].clone())
                demand.append(self.state.instances.demand[rows].clone())
                index = index.clone()
                index[rows] = torch.arange(next_index, next_index + len(rows))
                next_index += len(rows)
        st = self.state
        urgency, _ = routing_env.compute_urgency(st)
        feasible = routing_env.feasible_actions(st, urgency)
        out = policy.decode(self.enc, st.current_node, st.load, st.vehicles_remaining, feasible,
                            urgency.to(policy.dtype))
        next_values = policy.critic_value(out.glimpse)
        stacked = {k: torch.stack(v) for k, v in rec.items()}
        return RolloutBuffer(coords=torch.cat(coords), demand=torch.cat(demand), next_values=next_values,
                             **stacked)

    def _track(self, before, after, outcome, live):
        acc = self._acc
        acc["ret"] += outcome.reward
        acc["dist"] += after.fleet_distance - before.fleet_distance
        acc["veh"] += outcome.returned_to_depot.double()
        delivered = (before.load - after.load).clamp_min(0) * (~outcome.returned_to_depot & live)
        acc["served"] += delivered
        ended = live & after.done
        if bool(ended.any()):
            self.completed.append({k: acc[k][ended].clone() for k in acc})
            for k in acc:
                acc[k][ended] = 0.0


def _rows_state(state, rows):
    """Restrict a state to batch rows (boolean mask) for POMO start forcing."""
    inst = InstanceBatch(*(getattr(state.instances, f.name)[rows] for f in fields(InstanceBatch)))
    return routing_env.EnvState(instances=inst, step=state.step[rows], current_node=state.current_node[rows],
                                load=state.load[rows], vehicles_remaining=state.vehicles_remaining[rows],
                                fleet_distance=state.fleet_distance[rows], mask=state.mask[rows],
                                done=state.done[rows])


# -- PPO update ---------------------------------------------------------------

def _masked_mean(x, w, n):
    return (x * w).sum() / n


def evaluate_buffer(policy: AttentionPolicy, buf: RolloutBuffer, sample_index: torch.Tensor):
    """Re-run the policy on flattened (time*env) samples; returns new log-probs, entropies, values."""
    T, B = buf.instance_index.shape
    t_idx, b_idx = sample_index // B, sample_index % B
    inst_ids = buf.instance_index[t_idx, b_idx]
    uniq, inverse = torch.unique(inst_ids, return_inverse=True)
    emb = policy.embed_nodes((buf.coords[uniq], buf.demand[uniq]))
    enc = policy.encode(emb, training=False).select(inverse)
    out = policy.decode(enc, buf.current_node[t_idx, b_idx], buf.load[t_idx, b_idx],
                        buf.vehicles[t_idx, b_idx], buf.feasible[t_idx, b_idx], buf.urgency[t_idx, b_idx])
    logp_all = log_softmax(out.logits, -1)
    actions = buf.actions[t_idx, b_idx]
    new_logp = torch.gather(logp_all, -1, actions[..., None])[..., 0]
    return new_logp, entropy(logp_all), policy.critic_value(out.glimpse)


def normalize_advantages(adv, w, n):
    """Zero mean, unit std over the weighted (non-excluded) entries."""
    mean = _masked_mean(adv, w, n)
    var = _masked_mean((adv - mean) ** 2, w, n)
    return (adv - mean) / (var.sqrt() + 1e-8)


def clipped_surrogate(ratio, adv, clip_coef, w, n):
    """``mean(max(-ratio * A, -clip(ratio, 1 +- eps) * A))`` over weighted entries."""
    pg1 = -adv * ratio
    pg2 = -adv * ratio.clamp(1 - clip_coef, 1 + clip_coef)
    return _masked_mean(torch.maximum(pg1, pg2), w, n)


def minibatch_losses(policy: AttentionPolicy, buf: RolloutBuffer, idx: torch.Tensor, config: TrainConfig):
    """Total PPO loss on the flattened samples ``idx`` plus detached statistics."""
    B = buf.instance_index.shape[1]
    t_idx, b_idx = idx // B, idx % B
    w = buf.train_mask[t_idx, b_idx].to(policy.dtype)
    n = w.sum().clamp_min(1.0)
    new_logp, ent, new_v = evaluate_buffer(policy, buf, idx)
    old_logp = buf.log_probs[t_idx, b_idx]
    logratio = new_logp - old_logp
    if config.ratio_direction == "old_over_new":
        logratio = -logratio
    # excluded entries may hold -inf - (-inf); neutralize before exp
    logratio = torch.where(w > 0, logratio, torch.zeros_like(logratio))
    ratio = logratio.exp()
    adv = buf.advantages[t_idx, b_idx]
    if config.norm_adv:
        adv = normalize_advantages(adv, w, n)
    policy_loss = clipped_surrogate(ratio, adv, config.clip_coef, w, n)
    target = buf.returns if config.value_target == "returns" else buf.values
    value_loss = _masked_mean(0.5 * (new_v - target[t_idx, b_idx]) ** 2, w, n)
    ent_mean = _masked_mean(ent, w, n)
    loss = policy_loss - config.ent_coef * ent_mean + config.vf_coef * value_loss
    with torch.no_grad():
        stats = {"policy_loss": policy_loss.item(), "value_loss": value_loss.item(),
                 "entropy": ent_mean.item(),
                 "clip_fraction": _masked_mean(((ratio - 1).abs() > config.clip_coef).to(w.dtype), w, n).item(),
                 "approx_kl": _masked_mean((ratio - 1) - logratio, w, n).item(),
                 "max_ratio_deviation": ((ratio - 1).abs() * w).max().item() if w.numel() else 0.0,
                 "samples": int(w.sum().item())}
    return loss, stats


def ppo_update(buf: RolloutBuffer, policy: AttentionPolicy, config: TrainConfig, opt: AdamState,
               generator: Optional[torch.Generator] = None,
               on_step: Optional[Callable[[], None]] = None) -> LossReport:
    """Clipped-surrogate PPO over shuffled minibatches of (time, env) samples."""
    if buf.advantages is None:
        raise ValueError("buffer must be finalized (advantages computed) before the update")
    T, B = buf.instance_index.shape
    total = T * B
    mb_size = total // config.minibatches
    if mb_size < 1:
        raise ConfigurationError("fewer samples than minibatches")
    stats = []
    for _ in range(config.update_epochs):
        perm = torch.randperm(total, generator=generator)
        for m in range(config.minibatches):
            loss, mb = minibatch_losses(policy, buf, perm[m * mb_size:(m + 1) * mb_size], config)
            if not torch.isfinite(loss):
                raise FloatingPointError(json.dumps({k: mb[k] for k in ("policy_loss", "value_loss", "entropy")}))
            backward(loss)
            clip_grad_norm(policy.params, config.max_grad_norm)
            optimizer_step(policy.params, opt, config.learning_rate)
            if on_step is not None:
                on_step()
            stats.append(mb)
    mean = {k: sum(s[k] for s in stats) / len(stats) for k in ("policy_loss", "value_loss", "entropy",
                                                                 "clip_fraction", "approx_kl")}
    return LossReport(optimizer_steps=len(stats), minibatch_stats=stats, **mean)


# -- evaluation -----------------------------------------------------------------

@torch.no_grad()
def evaluate_policy(policy: AttentionPolicy, instances: List[Instance], penalty: float,
                    mode: str = "greedy") -> dict:
    """Greedy POMO evaluation: best-of-trajectories and per-episode averages."""
    record, state = rollout_episode(policy, instances, mode=mode, penalty=penalty)
    episode_obj = -record.returns  # (B, traj)
    best, dist, served, veh = [], [], [], []
    for b, inst in enumerate(instances):
        k = int(torch.argmin(episode_obj[b]))
        sol = build_solution(tours_from_visits(state.visit_order(b, k)), inst, penalty)
        best.append(sol.objective)
        dist.append(sol.total_distance)
        served.append(sol.served_demand)
        veh.append(sol.vehicles_used)
    n = len(instances)
    return {"mean_objective": sum(best) / n, "mean_episode_objective": episode_obj.mean().item(),
            "mean_distance": sum(dist) / n, "mean_served_demand": sum(served) / n,
            "mean_vehicles_used": sum(veh) / n}


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"ASAPCKPT"
CKPT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def save_checkpoint(policy: AttentionPolicy, path, train_config: Optional[TrainConfig] = None,
                    update: int = 0) -> None:
    """Write magic, version, JSON header, parameter payload and a CRC32 trailer."""
    header = json.dumps({"policy_config": policy.config.to_dict(),
                         "train_config": train_config.to_dict() if train_config else None,
                         "update": update,
                         "dtype": str(policy.dtype).replace("torch.", "")}, sort_keys=True).encode()
    payload = policy.params.to_bytes()
    body = (struct.pack("<HI", CKPT_VERSION, len(header)) + header
            + struct.pack("<Q", len(payload)) + payload)
    atomic_write_bytes(path, CKPT_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect: Optional[PolicyConfig] = None):
    """Return ``(policy, info)`` where info holds the train config and update counter."""
    data = Path(path).read_bytes()
    if len(data) < len(CKPT_MAGIC) or data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint (bad magic)")
    body = data[len(CKPT_MAGIC):]
    if len(body) < 6:
        raise IntegrityError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", body, 0)
    if version != CKPT_VERSION:
        raise IncompatibilityError(f"{path}: checkpoint format version {version}, expected {CKPT_VERSION}")
    pos = 6
    if len(body) < pos + hlen + 8:
        raise IntegrityError(f"{path}: truncated checkpoint header")
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (plen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    if len(body) != pos + plen + 4:
        raise IntegrityError(f"{path}: checkpoint length {len(data)} does not match its header")
    payload = body[pos:pos + plen]
    (crc,) = struct.unpack_from("<I", body, pos + plen)
    if zlib.crc32(body[:pos + plen]) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    cfg = PolicyConfig(**header["policy_config"])
    if expect is not None:
        for name in ("embed_dim", "heads", "encoder_layers", "ff_dim", "critic_hidden", "residual"):
            if getattr(cfg, name) != getattr(expect, name):
                raise IncompatibilityError(f"{path}: checkpoint {name}={getattr(cfg, name)} "
                                           f"but runtime config has {name}={getattr(expect, name)}")
    dtype = _DTYPES[header.get("dtype", "float32")]
    params = ParamStore.from_bytes(payload, dtype=dtype)
    policy = AttentionPolicy(cfg, dtype=dtype, params=params)
    tc = header.get("train_config")
    return policy, {"train_config": TrainConfig(**tc) if tc else None, "update": header.get("update", 0)}


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainedCheckpoint:
    path: Path
    policy: AttentionPolicy
    metrics_path: Path
    eval_path: Path
    eval_rows: List[dict]


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.10g}" if isinstance(row[k], float) else row[k]) for k in columns})
    atomic_write_text(path, buf.getvalue())


def train(config: TrainConfig, out_dir, policy_config: PolicyConfig = PolicyConfig(embed_dim=64, ff_dim=256),
          gen: GenerationConfig = GenerationConfig(), on_eval: Optional[Callable[[dict], None]] = None,
          policy: Optional[AttentionPolicy] = None) -> TrainedCheckpoint:
    """Alternate rollout collection and PPO updates for ``global_updates`` rounds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    if policy is None:
        policy = AttentionPolicy(policy_config, seed=config.seed)
    rollout = VectorRollout(policy, config, gen)
    opt = AdamState()
    shuffle = torch.Generator().manual_seed(config.seed + 1)
    eval_set = eval_instance_set(config, gen)
    ckpt = out_dir / "checkpoint.ckpt"
    metrics_path, eval_path = out_dir / "metrics.csv", out_dir / "eval.csv"
    metrics, evals = [], []
    t0 = time.perf_counter()

    def clock():
        return time.perf_counter() - t0 if config.record_wallclock else 0.0

    def run_eval(update):
        row = {"update": update, **evaluate_policy(policy, eval_set, config.penalty), "wallclock_s": clock()}
        evals.append(row)
        _write_csv(eval_path, EVAL_COLUMNS, evals)
        save_checkpoint(policy, ckpt, config, update)
        log.info("update %d: eval objective %.4f (episode mean %.4f, distance %.4f)", update,
                 row["mean_objective"], row["mean_episode_objective"], row["mean_distance"])
        if on_eval is not None:
            on_eval(row)

    policy.refresh_norm_stats(rollout.state.instances)
    run_eval(0)
    for update in range(1, config.global_updates + 1):
        policy.refresh_norm_stats(rollout.state.instances)
        buf = rollout.collect(config.steps_per_rollout).finalize(config.gamma, config.gae_lambda)
        try:
            report = ppo_update(buf, policy, config, opt, shuffle)
        except FloatingPointError as exc:
            diag = out_dir / "diagnostics.json"
            atomic_write_text(diag, json.dumps({"update": update, "losses": json.loads(str(exc)),
                                                "config": config.to_dict()}, indent=1))
            raise TrainingAborted(f"non-finite loss at update {update}; diagnostics in {diag}", diag) from exc
        done = rollout.completed
        def mean_of(key):
            vals = torch.cat([c[key] for c in done]) if done else torch.zeros(0)
            return vals.mean().item() if vals.numel() else float("nan")
        metrics.append({"update": update, "mean_return": mean_of("ret"), "mean_distance": mean_of("dist"),
                        "mean_served_demand": mean_of("served"), "mean_vehicles_used": mean_of("veh"),
                        "policy_loss": report.policy_loss, "value_loss": report.value_loss,
                        "entropy": report.entropy, "clip_fraction": report.clip_fraction,
                        "approx_kl": report.approx_kl, "wallclock_s": clock()})
        _write_csv(metrics_path, METRIC_COLUMNS, metrics)
        if update % config.eval_every == 0:
            run_eval(update)
    if not evals or evals[-1]["update"] != config.global_updates:
        save_checkpoint(policy, ckpt, config, config.global_updates)
    if not metrics:
        _write_csv(metrics_path, METRIC_COLUMNS, metrics)
    return TrainedCheckpoint(ckpt, policy, metrics_path, eval_path, evals)
