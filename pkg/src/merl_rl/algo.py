"""PPO with the auxiliary head losses added to the value update.

One iteration: collect ``num_actors * horizon`` transitions with frozen
parameters, compute GAE advantages, returns and the aux targets once, then
run ``epochs`` passes of shuffled minibatches. The policy ascends the
clipped surrogate; the value trunk and heads descend
``value_coef * MSE + c_ve * L_VE + c_fs * L_FS``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import kernels
from .agent import (
    AgentParams,
    agent_backward,
    agent_forward,
    entropy,
    log_prob,
    sample_action,
)
from .diffcore import AdamState, ConfigurationError, NumericalError, adam_step, clip_by_global_norm
from .envs import Env
from .merl import COSINE_EPS, MerlTargets, build_merl_targets, episode_ends, segment_rollout


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    horizon: int = 2048
    epochs: int = 10
    minibatch_size: int = 64
    lr: float = 3e-4
    value_coef: float = 0.5
    c_ve: float = 0.5
    c_fs: float = 0.01
    num_actors: int = 1
    total_steps: int = 1_000_000
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5
    entropy_coef: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lam must lie in [0, 1]")
        if not self.clip_eps > 0:
            raise ConfigurationError("clip_eps must be positive")
        if self.horizon < 1 or self.num_actors < 1 or self.epochs < 0 or self.minibatch_size < 1:
            raise ConfigurationError("horizon, num_actors, minibatch_size must be >= 1 and epochs >= 0")
        if (self.num_actors * self.horizon) % self.minibatch_size:
            raise ConfigurationError("minibatch_size must divide num_actors * horizon")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if min(self.value_coef, self.c_ve, self.c_fs, self.entropy_coef) < 0:
            raise ConfigurationError("loss coefficients must be non-negative")

    @property
    def batch_size(self) -> int:
        return self.num_actors * self.horizon

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# Hyperparameter presets for the two desk-scale regimes.
PROFILES = {
    "control": dict(horizon=2048, lr=3e-4, epochs=10, minibatch_size=64, num_actors=1, clip_eps=0.2),
    "shared": dict(horizon=128, lr=2.5e-4, epochs=3, minibatch_size=32, num_actors=4, clip_eps=0.1),
}


def profile_hyper(name: str, **overrides) -> HyperParams:
    if name not in PROFILES:
        raise ConfigurationError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return HyperParams(**{**PROFILES[name], **overrides})


@dataclass(eq=False)
class RolloutBatch:
    """Actor-major transitions: actor 0's ``horizon`` steps, then actor 1's, ..."""

    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    terminals: np.ndarray
    truncated: np.ndarray
    next_observations: np.ndarray
    next_values: np.ndarray  # V(s_{t+1}) at collection time; bootstrap at cuts
    horizon: int
    num_actors: int = 1
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def bootstrapped(self) -> bool:
        """True when the rollout stops mid-episode for some actor."""
        last = np.arange(self.num_actors) * self.horizon + self.horizon - 1
        return bool(np.any(~self.terminals[last]))


class RolloutCollector:
    """Keeps environments, current observations and episode bookkeeping across rollouts.

    Each actor owns two child streams of ``seed``: one for action sampling,
    one for episode reset seeds.
    """

    def __init__(self, envs: list[Env], seed):
        if not envs:
            raise ConfigurationError("need at least one environment")
        specs = [e.spec() for e in envs]
        if any(s != specs[0] for s in specs):
            raise ConfigurationError("all actor environments must share one spec")
        self.envs = envs
        self.spec = specs[0]
        streams = np.random.SeedSequence(seed).spawn(len(envs))
        self.action_rngs = []
        self.reset_rngs = []
        for ss in streams:
            a, r = ss.spawn(2)
            self.action_rngs.append(np.random.default_rng(a))
            self.reset_rngs.append(np.random.default_rng(r))
        self.obs = np.stack([e.reset(self._next_seed(i)) for i, e in enumerate(envs)])
        self.running_returns = np.zeros(len(envs))
        self.episode_returns: list[float] = []

    def _next_seed(self, i: int) -> int:
        return int(self.reset_rngs[i].integers(2**31 - 1))

    def collect(self, params: AgentParams, horizon: int) -> RolloutBatch:
        n_act = len(self.envs)
        s_dim = self.spec.observation.dim
        discrete = self.spec.action.is_discrete
        obs = np.zeros((n_act, horizon, s_dim))
        next_obs = np.zeros((n_act, horizon, s_dim))
        actions = np.zeros((n_act, horizon), dtype=np.int64) if discrete else np.zeros((n_act, horizon, self.spec.action.dim))
        logp = np.zeros((n_act, horizon))
        rewards = np.zeros((n_act, horizon))
        values = np.zeros((n_act, horizon))
        terms = np.zeros((n_act, horizon), dtype=bool)
        truncs = np.zeros((n_act, horizon), dtype=bool)
        for t in range(horizon):
            out = agent_forward(params, self.obs, policy=True, value=True, heads=False)
            values[:, t] = out.value
            obs[:, t] = self.obs
            for i, env in enumerate(self.envs):
                a, lp = sample_action(out.dist[i], self.action_rngs[i])
                try:
                    res = env.step(a)
                except Exception as exc:
                    raise RuntimeError(f"actor {i} env step failed at rollout step {t}: {exc}") from exc
                actions[i, t] = a
                logp[i, t] = lp
                rewards[i, t] = res.reward
                terms[i, t] = res.terminal
                truncs[i, t] = res.truncated
                next_obs[i, t] = res.observation
                self.running_returns[i] += res.reward
                if res.terminal or res.truncated:
                    self.episode_returns.append(float(self.running_returns[i]))
                    self.running_returns[i] = 0.0
                    self.obs[i] = env.reset(self._next_seed(i))
                else:
                    self.obs[i] = res.observation

        # V(s_{t+1}) is values[t+1] inside an episode; cut points need a fresh evaluation.
        next_values = np.zeros((n_act, horizon))
        next_values[:, :-1] = values[:, 1:]
        cut = truncs.copy()
        cut[:, -1] = ~terms[:, -1]
        if cut.any():
            boot = agent_forward(params, next_obs[cut], policy=False, value=True, heads=False).value
            next_values[cut] = boot
        next_values[terms] = 0.0

        def flat(x):
            return x.reshape(n_act * horizon, *x.shape[2:])

        return RolloutBatch(
            observations=flat(obs), actions=flat(actions), old_log_probs=flat(logp),
            rewards=flat(rewards), values=flat(values), terminals=flat(terms),
            truncated=flat(truncs), next_observations=flat(next_obs),
            next_values=flat(next_values), horizon=horizon, num_actors=n_act,
        )


def collect_rollout(envs: list[Env], params: AgentParams, horizon: int, seed: int) -> RolloutBatch:
    """One-shot collection from freshly reset environments."""
    return RolloutCollector(envs, seed).collect(params, horizon)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> np.ndarray:
    """GAE advantages; the recursion restarts at every episode or actor boundary."""
    ends = episode_ends(batch.terminals, batch.truncated, batch.horizon)
    return kernels.gae(batch.rewards, batch.values, batch.next_values, batch.terminals, ends, gamma, lam)


def compute_returns(batch: RolloutBatch) -> np.ndarray:
    if batch.advantages is None:
        raise ConfigurationError("advantages must be computed before returns")
    return batch.advantages + batch.values


def prepare_batch(batch: RolloutBatch, hyper: HyperParams) -> tuple[RolloutBatch, MerlTargets]:
    """Advantages, returns and aux targets, computed once per rollout."""
    batch.advantages = compute_gae(batch, hyper.gamma, hyper.lam)
    batch.returns = compute_returns(batch)
    return batch, build_merl_targets(batch, segment_rollout(batch))


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def clip_g(eps: float, adv):
    """``(1 + eps) A`` for non-negative advantages, ``(1 - eps) A`` otherwise."""
    adv = np.asarray(adv, dtype=np.float64)
    out = np.where(adv >= 0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    return float(out) if out.ndim == 0 else out


# -- losses -------------------------------------------------------------------


def _policy_terms(dist, actions, old_logp, adv, eps, entropy_coef=0.0):
    """Clipped surrogate (to maximize) plus gradients of the *loss* ``-obj - c_ent * H``
    w.r.t. the policy outputs and ``log_std``."""
    m = len(adv)
    new_logp = log_prob(dist, actions)
    log_ratio = new_logp - old_logp
    ratio = np.exp(log_ratio)
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise NumericalError("non-finite probability ratio", location=f"minibatch index {bad}")
    unclipped = ratio * adv
    clipped = clip_g(eps, adv)
    per = np.minimum(unclipped, clipped)
    objective = float(per.mean())
    # min() follows the unclipped branch where it is the smaller one.
    active = unclipped <= clipped
    d_logp = np.where(active, adv * ratio, 0.0) / m

    ent = entropy(dist)
    if dist.kind == "discrete":
        logp_all = dist.logits - dist.logits.max(axis=1, keepdims=True)
        logp_all = logp_all - np.log(np.exp(logp_all).sum(axis=1, keepdims=True))
        probs = np.exp(logp_all)
        onehot = np.zeros_like(probs)
        onehot[np.arange(m), actions] = 1.0
        d_out = -d_logp[:, None] * (onehot - probs)
        if entropy_coef:
            d_ent = -probs * (logp_all + ent[:, None])
            d_out = d_out - entropy_coef * d_ent / m
        d_log_std = None
    else:
        inv_var = np.exp(-2.0 * dist.log_std)
        diff = actions - dist.mean
        d_out = -d_logp[:, None] * diff * inv_var
        d_log_std = -np.sum(d_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
        if entropy_coef:
            d_log_std = d_log_std - entropy_coef * np.ones_like(dist.log_std)
    stats = {
        "policy_objective": objective,
        "entropy": float(np.mean(ent)),
        "ratio_mean": float(ratio.mean()),
        "ratio_max": float(ratio.max()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return objective, d_out, d_log_std, stats


def _batch_advantages(batch: RolloutBatch, advantages):
    return batch.advantages if advantages is None else advantages


def ppo_policy_objective(batch: RolloutBatch, params: AgentParams, idx, eps: float, advantages=None):
    """Mean clipped surrogate over the minibatch ``idx``; returns ``(objective, stats)``."""
    adv = _batch_advantages(batch, advantages)[idx]
    dist = agent_forward(params, batch.observations[idx], policy=True, value=False, heads=False).dist
    obj, _, _, stats = _policy_terms(dist, batch.actions[idx], batch.old_log_probs[idx], adv, eps)
    return obj, stats


def value_loss_combined(batch: RolloutBatch, params: AgentParams, targets: MerlTargets, idx,
                        value_coef: float, c_ve: float, c_fs: float):
    """``value_coef * MSE(V, R) + c_ve * L_VE + c_fs * L_FS``; returns ``(loss, stats)``.

    A head that is not attached contributes nothing.
    """
    out = agent_forward(params, batch.observations[idx], policy=False, value=True, heads=True)
    loss, _, stats = _value_terms(out, batch.returns[idx], targets, idx, value_coef, c_ve, c_fs)
    return loss, stats


def _value_terms(out, returns, targets, idx, value_coef, c_ve, c_fs):
    m = len(returns)
    err = out.value - returns
    mse = float(np.mean(err * err))
    grads = {"d_value": (2.0 * value_coef / m) * err}
    stats = {"value_mse": mse, "ve_loss": 0.0, "fs_loss": 0.0}
    loss = value_coef * mse
    if "aux" in out.caches:
        aux_out = out.caches["aux"][2]
        has_ve = out.ve_pred is not None
        rows = np.arange(len(targets.vex_valid_mask))[idx]
        ve, fs, grads["d_aux"] = kernels.aux_losses(
            aux_out, rows, targets.vex_per_timestep, targets.vex_valid_mask, targets.unit_next_obs,
            targets.fs_valid_mask, c_ve, c_fs, 0 if has_ve else -1,
            (1 if has_ve else 0) if out.fs_pred is not None else -1, COSINE_EPS,
        )
        if has_ve:
            loss += c_ve * ve
            stats["ve_loss"] = ve
        if out.fs_pred is not None:
            loss += c_fs * fs
            stats["fs_loss"] = fs
    return loss, grads, stats


def loss_and_grad(batch: RolloutBatch, targets: MerlTargets, params: AgentParams, idx,
                  hyper: HyperParams, advantages=None):
    """Total minimized loss ``-surrogate - c_ent*H + value terms`` with its gradient.

    In the separate layout the policy and value groups share no parameters,
    so one backward pass yields both update directions.
    """
    adv = _batch_advantages(batch, advantages)[idx]
    out = agent_forward(params, batch.observations[idx], policy=True, value=True, heads=True)
    obj, d_pol, d_log_std, pstats = _policy_terms(
        out.dist, batch.actions[idx], batch.old_log_probs[idx], adv, hyper.clip_eps, hyper.entropy_coef
    )
    vloss, vgrads, vstats = _value_terms(
        out, batch.returns[idx], targets, idx, hyper.value_coef, hyper.c_ve, hyper.c_fs
    )
    grads = agent_backward(params, out, d_policy_out=d_pol, d_log_std=d_log_std, **vgrads)
    loss = -obj - hyper.entropy_coef * pstats["entropy"] + vloss
    return loss, grads, {**pstats, **vstats, "value_loss": vloss}


# -- update -------------------------------------------------------------------


def optimizer_groups(params: AgentParams) -> tuple[str, ...]:
    return ("policy", "value") if params.architecture == "separate" else ("all",)


def init_optimizer(params: AgentParams) -> dict[str, AdamState]:
    return {g: AdamState.zeros(params.arrays(g)) for g in optimizer_groups(params)}


_STAT_KEYS = ("policy_objective", "entropy", "ratio_mean", "clip_fraction",
              "value_mse", "ve_loss", "fs_loss", "value_loss")


def update(batch: RolloutBatch, targets: MerlTargets, params: AgentParams,
           opt: dict[str, AdamState], hyper: HyperParams, rng: np.random.Generator):
    """``epochs`` passes of shuffled minibatch Adam steps.

    Returns ``(params, opt, stats)``. The shuffle stream is consumed the same
    way whichever heads are attached.
    """
    n = len(batch)
    adv = normalize_advantages(batch.advantages) if hyper.normalize_advantages else batch.advantages
    sums = {k: 0.0 for k in _STAT_KEYS}
    ratio_max = 0.0
    norms = {g: 0.0 for g in opt}
    count = 0
    for _ in range(hyper.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, hyper.minibatch_size):
            idx = perm[start:start + hyper.minibatch_size]
            loss, grads, stats = loss_and_grad(batch, targets, params, idx, hyper, advantages=adv)
            if not np.isfinite(loss):
                raise NumericalError("non-finite loss in update", stats=stats)
            for group in opt:
                g, norm = clip_by_global_norm(grads.arrays(group), hyper.max_grad_norm)
                view, opt[group] = adam_step(params.group(group), g, opt[group], hyper.lr)
                params = view.params
                norms[group] += norm
            for k in _STAT_KEYS:
                sums[k] += stats[k]
            ratio_max = max(ratio_max, stats["ratio_max"])
            count += 1
    out = {k: (sums[k] / count if count else 0.0) for k in _STAT_KEYS}
    out["ratio_max"] = ratio_max
    out.update({f"grad_norm_{g}": (v / count if count else 0.0) for g, v in norms.items()})
    out["minibatches"] = count
    return params, opt, out
