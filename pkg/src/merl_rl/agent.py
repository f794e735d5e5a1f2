"""Policy and value networks with the auxiliary heads on the value embedding.

Two layouts:

``separate``
    policy MLP ``S -> 64 -> 64 -> A`` and value trunk ``S -> 64 -> 64``
    (tanh embedding). Value, VE and FS heads are one linear layer each on
    the value embedding, so head losses never reach the policy weights.
``shared``
    one trunk feeds the policy layer as well as the value and aux heads.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .diffcore import (
    ConfigurationError,
    ForwardCache,
    MlpParams,
    backward,
    forward,
    init_mlp,
    mlp_from_dict,
    mlp_to_dict,
)
from .envs import ActionSpec

AGENT_FORMAT = "merl-agent"
AGENT_FORMAT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)

_VALUE_PARTS = ("value_trunk", "value_head", "ve_head", "fs_head")


@dataclass(frozen=True, eq=False)
class AgentParams:
    architecture: str
    action: ActionSpec
    policy_net: MlpParams
    value_trunk: MlpParams
    value_head: MlpParams
    ve_head: Optional[MlpParams] = None
    fs_head: Optional[MlpParams] = None
    log_std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.architecture not in ("separate", "shared"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        emb = self.value_trunk.out_dim
        obs_dim = self.value_trunk.in_dim
        if self.value_head.sizes != [emb, 1]:
            raise ConfigurationError("value head must be a single E->1 layer")
        if self.ve_head is not None and self.ve_head.sizes != [emb, 1]:
            raise ConfigurationError("VE head must be a single E->1 layer")
        if self.fs_head is not None and self.fs_head.sizes != [emb, obs_dim]:
            raise ConfigurationError("FS head must be a single E->S layer")
        expected_in = obs_dim if self.architecture == "separate" else emb
        if self.policy_net.in_dim != expected_in:
            raise ConfigurationError(f"policy input {self.policy_net.in_dim} != {expected_in}")
        if self.architecture == "shared" and len(self.policy_net.layers) != 1:
            raise ConfigurationError("shared layout uses a single policy layer on the trunk")
        if self.action.is_discrete:
            if self.policy_net.out_dim != self.action.n:
                raise ConfigurationError("policy output must equal the number of actions")
        else:
            if self.policy_net.out_dim != self.action.dim:
                raise ConfigurationError("policy output must equal the action dimension")
            if self.log_std is None or self.log_std.shape != (self.action.dim,):
                raise ConfigurationError("continuous policy needs a log_std vector")

    @property
    def obs_dim(self) -> int:
        return self.value_trunk.in_dim

    @property
    def embedding_dim(self) -> int:
        return self.value_trunk.out_dim

    # Parameter groups: "policy" (theta), "value" (phi and phi^h), "all".
    def _parts(self, group: str) -> list[str]:
        policy = ["policy_net"] + ([] if self.log_std is None else ["log_std"])
        value = [p for p in _VALUE_PARTS if getattr(self, p) is not None]
        if group == "policy":
            return policy
        if group == "value":
            return value
        if group == "all":
            return policy + value
        raise ConfigurationError(f"unknown parameter group {group!r}")

    def arrays(self, group: str = "all") -> list[np.ndarray]:
        out = []
        for name in self._parts(group):
            part = getattr(self, name)
            out.extend([part] if name == "log_std" else part.arrays())
        return out

    def with_arrays(self, arrays, group: str = "all") -> "AgentParams":
        arrays = list(arrays)
        changes = {}
        k = 0
        for name in self._parts(group):
            part = getattr(self, name)
            if name == "log_std":
                changes[name] = arrays[k]
                k += 1
            else:
                n = len(part.layers) * 2
                changes[name] = part.with_arrays(arrays[k:k + n])
                k += n
        if k != len(arrays):
            raise ConfigurationError("array count does not match parameter group")
        return replace(self, **changes)

    def zeros_like(self) -> "AgentParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def group(self, name: str) -> "ParamGroup":
        return ParamGroup(self, name)


@dataclass(frozen=True, eq=False)
class ParamGroup:
    """View of one parameter group, shaped for :func:`diffcore.adam_step`."""

    params: AgentParams
    name: str

    def arrays(self):
        return self.params.arrays(self.name)

    def with_arrays(self, arrays):
        return ParamGroup(self.params.with_arrays(arrays, self.name), self.name)


def init_agent(
    obs_dim: int,
    action: ActionSpec,
    architecture: str = "separate",
    hidden: tuple[int, ...] = (64, 64),
    ve_head: bool = True,
    fs_head: bool = True,
    seed: int = 0,
) -> AgentParams:
    """Fresh parameters.

    Policy, value and head weights draw from independent child streams of
    ``seed``, so toggling a head never shifts the other initial weights.
    """
    policy_ss, value_ss, heads_ss = np.random.SeedSequence(int(seed)).spawn(3)
    rng_p = np.random.default_rng(policy_ss)
    rng_v = np.random.default_rng(value_ss)
    ve_ss, fs_ss = heads_ss.spawn(2)
    out_dim = action.n if action.is_discrete else action.dim
    emb = hidden[-1]
    trunk = init_mlp([obs_dim, *hidden], rng_v, output_activation="tanh")
    value_head = init_mlp([emb, 1], rng_v)
    if architecture == "separate":
        policy = init_mlp([obs_dim, *hidden, out_dim], rng_p, output_scale=0.01)
    elif architecture == "shared":
        policy = init_mlp([emb, out_dim], rng_p, output_scale=0.01)
    else:
        raise ConfigurationError(f"unknown architecture {architecture!r}")
    return AgentParams(
        architecture=architecture,
        action=action,
        policy_net=policy,
        value_trunk=trunk,
        value_head=value_head,
        ve_head=init_mlp([emb, 1], np.random.default_rng(ve_ss)) if ve_head else None,
        fs_head=init_mlp([emb, obs_dim], np.random.default_rng(fs_ss)) if fs_head else None,
        log_std=None if action.is_discrete else np.zeros(action.dim),
    )


# -- distributions ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolicyDistribution:
    """Diagonal Gaussian (``mean``, ``log_std``) or categorical (``logits``).

    Fields may be batched along the first axis; ``log_std`` is shared across
    the batch.
    """

    kind: str
    mean: Optional[np.ndarray] = None
    log_std: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None

    def __getitem__(self, i) -> "PolicyDistribution":
        if self.kind == "discrete":
            return PolicyDistribution("discrete", logits=self.logits[i])
        return PolicyDistribution("continuous", mean=self.mean[i], log_std=self.log_std)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(dist: PolicyDistribution, action) -> np.ndarray | float:
    """Exact log density (Gaussian) or log mass (categorical)."""
    if dist.kind == "discrete":
        logp = _log_softmax(dist.logits)
        a = np.asarray(action, dtype=np.int64)
        if logp.ndim == 1:
            return float(logp[int(a)])
        return logp[np.arange(len(a)), a]
    a = np.asarray(action, dtype=np.float64)
    z = (a - dist.mean) / np.exp(dist.log_std)
    out = -0.5 * np.sum(z * z, axis=-1) - np.sum(dist.log_std) - 0.5 * dist.log_std.size * LOG_2PI
    return float(out) if np.ndim(out) == 0 else out


def entropy(dist: PolicyDistribution) -> np.ndarray | float:
    if dist.kind == "discrete":
        logp = _log_softmax(dist.logits)
        out = -np.sum(np.exp(logp) * logp, axis=-1)
        return float(out) if np.ndim(out) == 0 else out
    per_dim = float(np.sum(dist.log_std)) + 0.5 * dist.log_std.size * (LOG_2PI + 1.0)
    if dist.mean.ndim == 1:
        return per_dim
    return np.full(dist.mean.shape[0], per_dim)


def sample_action(dist: PolicyDistribution, rng: np.random.Generator):
    """Draw one action from an unbatched distribution; returns ``(action, log_prob)``."""
    if dist.kind == "discrete":
        z = dist.logits - dist.logits.max()
        p = np.exp(z)
        cdf = np.cumsum(p / p.sum())
        a = min(int(np.searchsorted(cdf, rng.random(), side="right")), len(cdf) - 1)
        return a, log_prob(dist, a)
    a = dist.mean + np.exp(dist.log_std) * rng.standard_normal(dist.mean.shape)
    return a, log_prob(dist, a)


# -- forward / backward -------------------------------------------------------


@dataclass(eq=False)
class AgentOutputs:
    dist: Optional[PolicyDistribution]
    value: Optional[np.ndarray]
    ve_pred: Optional[np.ndarray]
    fs_pred: Optional[np.ndarray]
    embedding: Optional[np.ndarray]
    caches: dict


def _check_obs(params: AgentParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != params.obs_dim or obs.ndim not in (1, 2):
        raise ConfigurationError(f"observation shape {obs.shape} does not match S={params.obs_dim}")
    return obs


def _make_dist(params: AgentParams, out: np.ndarray) -> PolicyDistribution:
    if params.action.is_discrete:
        return PolicyDistribution("discrete", logits=out)
    return PolicyDistribution("continuous", mean=out, log_std=params.log_std)


def agent_forward(params: AgentParams, obs, policy=True, value=True, heads=True) -> AgentOutputs:
    """Evaluate the requested outputs once, keeping caches for :func:`agent_backward`."""
    obs = _check_obs(params, obs)
    caches: dict[str, ForwardCache] = {}
    emb = None
    if value or heads or params.architecture == "shared":
        emb, caches["value_trunk"] = forward(params.value_trunk, obs)
    dist = v = ve = fs = None
    if policy:
        src = obs if params.architecture == "separate" else emb
        out, caches["policy_net"] = forward(params.policy_net, src)
        dist = _make_dist(params, out)
    if value:
        out, caches["value_head"] = forward(params.value_head, emb)
        v = out[..., 0]
    if heads and (params.ve_head is not None or params.fs_head is not None):
        ve, fs, caches["aux"] = _aux_forward(params, emb)
    return AgentOutputs(dist, v, ve, fs, emb, caches)


def _aux_weights(params: AgentParams):
    layers = [h.layers[0] for h in (params.ve_head, params.fs_head) if h is not None]
    if len(layers) == 1:
        return layers[0]
    return np.concatenate([w for w, _ in layers]), np.concatenate([b for _, b in layers])


def _aux_forward(params: AgentParams, emb: np.ndarray):
    """Both auxiliary heads are single linear maps of the embedding; evaluate them as one."""
    w, b = _aux_weights(params)
    out = emb @ w.T
    out += b
    ve = out[..., 0] if params.ve_head is not None else None
    fs = out[..., 0 if params.ve_head is None else 1:] if params.fs_head is not None else None
    return ve, fs, (emb, w, out)


def _aux_backward(params: AgentParams, cache, d_ve, d_fs, d_aux=None):
    emb, w, _ = cache
    cols = [] if d_aux is None else [np.asarray(d_aux, dtype=np.float64)]
    if d_aux is None and params.ve_head is not None:
        cols.append(np.zeros(emb.shape[:-1] + (1,)) if d_ve is None else np.asarray(d_ve, dtype=np.float64)[..., None])
    if d_aux is None and params.fs_head is not None:
        cols.append(np.zeros(emb.shape[:-1] + (w.shape[0] - len(cols),)) if d_fs is None
                    else np.asarray(d_fs, dtype=np.float64))
    d_out = cols[0] if len(cols) == 1 else np.concatenate(cols, axis=-1)
    d2, e2 = (d_out[None], emb[None]) if emb.ndim == 1 else (d_out, emb)
    gw, gb = d2.T @ e2, np.add.reduce(d2, axis=0)
    grads, k = {}, 0
    for name in ("ve_head", "fs_head"):
        head = getattr(params, name)
        if head is not None:
            n = head.out_dim
            grads[name] = MlpParams(((gw[k:k + n], gb[k:k + n]),), head.hidden_activation, head.output_activation)
            k += n
    return grads, d_out @ w


def agent_backward(
    params: AgentParams,
    outputs: AgentOutputs,
    d_policy_out=None,
    d_log_std=None,
    d_value=None,
    d_ve=None,
    d_fs=None,
    d_aux=None,
) -> AgentParams:
    """Accumulate output gradients into an :class:`AgentParams`-shaped gradient.

    Outputs without a gradient contribute nothing; parameters untouched by
    any supplied gradient come back as exact zeros. ``d_aux`` is a gradient
    for the VE and FS outputs stacked column-wise and replaces ``d_ve``/``d_fs``.
    """
    grads = {name: None for name in ("policy_net", *_VALUE_PARTS)}
    caches = outputs.caches
    d_emb = None

    def add(a, b):
        return b if a is None else a + b

    if d_value is not None and "value_head" in caches:
        grads["value_head"], d_emb = backward(params.value_head, caches["value_head"], np.asarray(d_value)[..., None])
    if (d_ve is not None or d_fs is not None or d_aux is not None) and "aux" in caches:
        aux, d_in = _aux_backward(params, caches["aux"], d_ve, d_fs, d_aux)
        grads.update(aux)
        d_emb = add(d_emb, d_in)
    if d_policy_out is not None:
        g, d_in = backward(params.policy_net, caches["policy_net"], d_policy_out)
        grads["policy_net"] = g
        if params.architecture == "shared":
            d_emb = add(d_emb, d_in)
    if d_emb is not None:
        grads["value_trunk"], _ = backward(params.value_trunk, caches["value_trunk"], d_emb)

    changes = {}
    for name, g in grads.items():
        part = getattr(params, name)
        if part is not None:
            changes[name] = g if g is not None else part.zeros_like()
    if params.log_std is not None:
        changes["log_std"] = np.zeros_like(params.log_std) if d_log_std is None else np.asarray(d_log_std, dtype=np.float64)
    return replace(params, **changes)


def add_grads(a: AgentParams, b: AgentParams) -> AgentParams:
    return a.with_arrays([x + y for x, y in zip(a.arrays(), b.arrays())])


def policy_distribution(params: AgentParams, obs) -> PolicyDistribution:
    return agent_forward(params, obs, policy=True, value=False, heads=False).dist


def value_and_heads(params: AgentParams, obs):
    """``(value, ve_pred, fs_pred, embedding)`` from one trunk evaluation.

    A missing head yields ``None`` for its prediction.
    """
    out = agent_forward(params, obs, policy=False, value=True, heads=True)
    return out.value, out.ve_pred, out.fs_pred, out.embedding


# -- checkpoints --------------------------------------------------------------


def agent_to_dict(params: AgentParams) -> dict:
    nets = {"policy_net": mlp_to_dict(params.policy_net)}
    for name in _VALUE_PARTS:
        part = getattr(params, name)
        if part is not None:
            nets[name] = mlp_to_dict(part)
    a = params.action
    return {
        "format": AGENT_FORMAT,
        "version": AGENT_FORMAT_VERSION,
        "architecture": params.architecture,
        "action": {"kind": a.kind, "dim": a.dim, "low": list(a.low), "high": list(a.high), "n": a.n},
        "log_std": None if params.log_std is None else [float(x) for x in params.log_std],
        "networks": nets,
    }


def agent_from_dict(data: dict) -> AgentParams:
    if data.get("format") != AGENT_FORMAT or data.get("version") != AGENT_FORMAT_VERSION:
        raise ConfigurationError("not a supported agent checkpoint")
    a = data["action"]
    action = ActionSpec(a["kind"], dim=a["dim"], low=tuple(a["low"]), high=tuple(a["high"]), n=a["n"])
    nets = {k: mlp_from_dict(v) for k, v in data["networks"].items()}
    return AgentParams(
        architecture=data["architecture"],
        action=action,
        policy_net=nets["policy_net"],
        value_trunk=nets["value_trunk"],
        value_head=nets["value_head"],
        ve_head=nets.get("ve_head"),
        fs_head=nets.get("fs_head"),
        log_std=None if data["log_std"] is None else np.asarray(data["log_std"], dtype=np.float64),
    )


def agent_to_json(params: AgentParams) -> str:
    return json.dumps(agent_to_dict(params), sort_keys=True)


def param_hash(params: AgentParams) -> str:
    return hashlib.sha256(agent_to_json(params).encode()).hexdigest()
