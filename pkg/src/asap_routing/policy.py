"""Attention encoder-decoder policy with urgency-augmented pointer logits."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import torch

from . import env as routing_env
from .env import EnvState, InstanceBatch
from .errors import ConfigurationError, ContractViolation, ShapeError
from .numerics import (ParamStore, batch_norm, categorical_sample, entropy, linear,
                       log_softmax, multi_head_attention, relu)


@dataclass(frozen=True)
class PolicyConfig:
    embed_dim: int = 128
    heads: int = 8
    encoder_layers: int = 3
    ff_dim: int = 512
    clip_C: float = 10.0
    critic_hidden: int = 128
    residual: bool = True
    bn_momentum: float = 0.1
    context_extra: int = 2  # load, vehicles remaining

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.ff_dim < self.embed_dim:
            raise ConfigurationError(f"ff_dim {self.ff_dim} must be >= embed_dim {self.embed_dim}")
        if self.encoder_layers < 1 or self.critic_hidden < 1:
            raise ConfigurationError("encoder_layers and critic_hidden must be positive")
        if self.context_extra != 2:
            raise ConfigurationError("context_extra is fixed at 2 (load, vehicles)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncodedGraph:
    node_embeddings: torch.Tensor  # (B, N, d)
    graph_context: torch.Tensor    # (B, d), already projected
    glimpse_keys: torch.Tensor     # (B, N, d)
    glimpse_values: torch.Tensor   # (B, N, d)
    pointer_keys: torch.Tensor     # (B, N, d)

    def select(self, index: torch.Tensor) -> "EncodedGraph":
        return EncodedGraph(*(t[index] for t in (self.node_embeddings, self.graph_context,
                                                  self.glimpse_keys, self.glimpse_values,
                                                  self.pointer_keys)))


@dataclass
class DecodeOutput:
    logits: torch.Tensor   # (B, T, N), -inf where infeasible
    glimpse: torch.Tensor  # (B, T, d)


def _node_features(instances):
    if isinstance(instances, tuple):
        return instances
    if isinstance(instances, EnvState):
        instances = instances.instances
    if not isinstance(instances, InstanceBatch):
        instances = InstanceBatch.from_instances(instances)
    return instances.coords, instances.demand


class AttentionPolicy:
    def __init__(self, config: PolicyConfig = PolicyConfig(), seed: int = 0, dtype=torch.float32,
                 params: Optional[ParamStore] = None):
        self.config = config
        self.dtype = dtype
        self.params = params if params is not None else self._init_params(config, seed, dtype)

    @staticmethod
    def _init_params(cfg: PolicyConfig, seed: int, dtype) -> ParamStore:
        d, ff, hid = cfg.embed_dim, cfg.ff_dim, cfg.critic_hidden
        ps = ParamStore(dtype=dtype, seed=seed)
        ps.add("embed.depot.W", (2, d), fan_in=2)
        ps.add("embed.depot.b", (d,), fan_in=2)
        ps.add("embed.customer.W", (3, d), fan_in=3)
        ps.add("embed.customer.b", (d,), fan_in=3)
        for layer in range(cfg.encoder_layers):
            p = f"encoder.{layer}."
            for w in ("Wq", "Wk", "Wv", "Wout"):
                ps.add(p + w, (d, d), fan_in=d)
            for bn in ("bn1", "bn2"):
                ps.add(p + bn + ".gamma", (d,), fill=1.0)
                ps.add(p + bn + ".beta", (d,), fill=0.0)
                ps.add_buffer(p + bn + ".running_mean", torch.zeros(d))
                ps.add_buffer(p + bn + ".running_var", torch.ones(d))
            ps.add(p + "ff1.W", (d, ff), fan_in=d)
            ps.add(p + "ff1.b", (ff,), fan_in=d)
            ps.add(p + "ff2.W", (ff, d), fan_in=ff)
            ps.add(p + "ff2.b", (d,), fan_in=ff)
        ps.add("decoder.W_graph", (d, d), fan_in=d)
        ps.add("decoder.W_nodes", (d, 3 * d), fan_in=d)
        ps.add("decoder.W_context", (d + cfg.context_extra, d), fan_in=d + cfg.context_extra)
        ps.add("decoder.W_glimpse_out", (d, d), fan_in=d)
        ps.add("critic.W1", (d, hid), fan_in=d)
        ps.add("critic.b1", (hid,), fan_in=d)
        ps.add("critic.W2", (hid, 1), fan_in=hid)
        ps.add("critic.b2", (1,), fan_in=hid)
        return ps

    # -- encoder ---------------------------------------------------------
    def embed_nodes(self, instances) -> torch.Tensor:
        """Static embedding from coordinates and demand only (no end-times).

        Accepts Instances, an InstanceBatch, an EnvState or a ``(coords, demand)`` pair.
        """
        coords, demand = _node_features(instances)
        coords = coords.to(self.dtype)
        demand = demand.to(self.dtype)
        p = self.params
        depot = linear(coords[:, :1], p["embed.depot.W"], p["embed.depot.b"])
        cust = torch.cat([coords[:, 1:], demand[:, 1:, None]], -1)
        cust = linear(cust, p["embed.customer.W"], p["embed.customer.b"])
        return torch.cat([depot, cust], 1)

    def _bn(self, x, prefix, training, update_stats):
        p = self.params
        return batch_norm(x, p[prefix + ".gamma"], p[prefix + ".beta"],
                          p[prefix + ".running_mean"], p[prefix + ".running_var"],
                          training=training, momentum=self.config.bn_momentum,
                          update_stats=update_stats)

    def encode(self, emb: torch.Tensor, training: bool = False, update_stats: bool = True) -> EncodedGraph:
        cfg, p = self.config, self.params
        d = cfg.embed_dim
        if emb.dim() != 3 or emb.shape[-1] != d:
            raise ShapeError(f"encode expects (B, N, {d}) embeddings, got {tuple(emb.shape)}")
        h = emb
        for layer in range(cfg.encoder_layers):
            pre = f"encoder.{layer}."
            q = linear(h, p[pre + "Wq"])
            k = linear(h, p[pre + "Wk"])
            v = linear(h, p[pre + "Wv"])
            att = multi_head_attention(q, k, v, cfg.heads, w_out=p[pre + "Wout"])
            h1 = self._bn(h + att if cfg.residual else att, pre + "bn1", training, update_stats)
            ff = linear(relu(linear(h1, p[pre + "ff1.W"], p[pre + "ff1.b"])), p[pre + "ff2.W"], p[pre + "ff2.b"])
            h = self._bn(h1 + ff if cfg.residual else ff, pre + "bn2", training, update_stats)
        graph = linear(h.mean(1), p["decoder.W_graph"])
        gk, gv, kl = linear(h, p["decoder.W_nodes"]).split(d, dim=-1)
        return EncodedGraph(h, graph, gk, gv, kl)

    def encode_instances(self, instances, training: bool = False) -> EncodedGraph:
        return self.encode(self.embed_nodes(instances), training=training)

    @torch.no_grad()
    def refresh_norm_stats(self, instances) -> None:
        """Move batch-norm running statistics towards the given instances."""
        self.encode(self.embed_nodes(instances), training=True, update_stats=True)

    # -- decoder ---------------------------------------------------------
    def decode(self, enc: EncodedGraph, current_node, load, vehicles, feasible, urgency) -> DecodeOutput:
        """Pointer logits for every trajectory.

        ``feasible`` (B, T, N) bool, ``urgency`` (B, T, N) with missed entries
        already excluded by ``feasible``. Finite logits are
        ``C * (tanh(score) + clamp(urgency, 0, 1))``.
        """
        cfg, p = self.config, self.params
        d = cfg.embed_dim
        if bool((~feasible.any(-1)).any()):
            raise ContractViolation("decode: a trajectory has no feasible node")
        idx = current_node[..., None].expand(-1, -1, d)
        h_cur = torch.gather(enc.node_embeddings, 1, idx)
        ctx = torch.cat([h_cur, load.to(self.dtype)[..., None], vehicles.to(self.dtype)[..., None]], -1)
        query = enc.graph_context[:, None, :] + linear(ctx, p["decoder.W_context"])
        glimpse = multi_head_attention(query, enc.glimpse_keys, enc.glimpse_values, cfg.heads,
                                       mask=~feasible, w_out=p["decoder.W_glimpse_out"])
        score = glimpse @ enc.pointer_keys.transpose(-1, -2) / math.sqrt(d)
        fu = torch.where(feasible, urgency.to(self.dtype).clamp(0.0, 1.0), torch.zeros_like(score))
        logits = (torch.tanh(score) + fu) * cfg.clip_C
        logits = logits.masked_fill(~feasible, float("-inf"))
        return DecodeOutput(logits, glimpse)

    def decode_step(self, enc: EncodedGraph, state: EnvState, urgency=None, feasible=None) -> DecodeOutput:
        if urgency is None:
            urgency, _ = routing_env.compute_urgency(state)
        if feasible is None:
            feasible = routing_env.feasible_actions(state, urgency)
        return self.decode(enc, state.current_node, state.load, state.vehicles_remaining, feasible, urgency)

    def critic_value(self, glimpse: torch.Tensor) -> torch.Tensor:
        p = self.params
        if glimpse.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"critic expects trailing dim {self.config.embed_dim}, got {tuple(glimpse.shape)}")
        hidden = relu(linear(glimpse, p["critic.W1"], p["critic.b1"]))
        return linear(hidden, p["critic.W2"], p["critic.b2"])[..., 0]

    @staticmethod
    def act(logits: torch.Tensor, mode: str = "sample", generator: Optional[torch.Generator] = None):
        """Return ``(actions, log_probs, entropy)``; greedy ties go to the lowest index."""
        if mode == "sample":
            return categorical_sample(logits, generator)
        if mode != "greedy":
            raise ValueError(f"unknown decode mode {mode!r}")
        if bool((~torch.isfinite(logits).any(-1)).any()):
            raise ContractViolation("act: a row has no finite logit")
        logp = log_softmax(logits, -1)
        actions = torch.argmax(logits, -1)
        return actions, torch.gather(logp, -1, actions[..., None])[..., 0], entropy(logp)


@dataclass
class EpisodeRecord:
    """Time-major record ``(T, B, traj)`` of one batch of POMO episodes."""
    actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    entropies: torch.Tensor
    forced: torch.Tensor   # (T,) bool; True for the forced first step
    live: torch.Tensor     # trajectory was live before the step
    logits: Optional[torch.Tensor] = None  # (T, B, traj, N) when traced

    @property
    def returns(self) -> torch.Tensor:
        return self.rewards.sum(0)


@torch.no_grad()
def rollout_episode(policy: AttentionPolicy, instances, mode: str = "greedy",
                    generator: Optional[torch.Generator] = None, penalty: float = routing_env.DEFAULT_PENALTY,
                    max_steps: Optional[int] = None, trace: bool = False):
    """Run POMO episodes (one trajectory per customer) to completion.

    Encodes once, forces the distinct first customers, then alternates
    decode / act / step. Returns ``(EpisodeRecord, final EnvState)``.
    """
    batch = instances if isinstance(instances, InstanceBatch) else InstanceBatch.from_instances(instances)
    state = routing_env.reset(batch, batch.num_nodes - 1)
    enc = policy.encode(policy.embed_nodes(batch), training=False)
    if max_steps is None:
        max_steps = 2 * (batch.num_nodes + int(batch.fleet_size.max()))
    rec: dict = {k: [] for k in ("actions", "log_probs", "values", "rewards", "dones",
                                 "entropies", "live", "logits")}
    forced_flags: List[bool] = []
    t = 0
    while not bool(state.done.all()) and t < max_steps:
        urgency, _ = routing_env.compute_urgency(state)
        feasible = routing_env.feasible_actions(state, urgency)
        out = policy.decode(enc, state.current_node, state.load, state.vehicles_remaining, feasible, urgency)
        if t == 0:
            actions = routing_env.force_pomo_starts(state)
            logp_all = log_softmax(out.logits, -1)
            logp = torch.gather(logp_all, -1, actions[..., None])[..., 0]
            ent = entropy(logp_all)
        else:
            actions, logp, ent = policy.act(out.logits, mode, generator)
        value = policy.critic_value(out.glimpse)
        live = ~state.done
        state, outcome = routing_env.step(state, actions, penalty=penalty, feasible=feasible)
        rec["actions"].append(actions)
        rec["log_probs"].append(logp)
        rec["values"].append(value)
        rec["rewards"].append(outcome.reward)
        rec["dones"].append(outcome.done)
        rec["entropies"].append(ent)
        rec["live"].append(live)
        if trace:
            rec["logits"].append(out.logits)
        forced_flags.append(t == 0)
        t += 1
    traced = rec.pop("logits")
    logits = torch.stack(traced) if trace else None
    stacked = {k: torch.stack(v) for k, v in rec.items()}
    return EpisodeRecord(forced=torch.tensor(forced_flags, dtype=torch.bool), logits=logits, **stacked), state
