"""Analytic vs. central-difference gradients for every loss in the update."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .agent import AgentParams, init_agent, log_prob, policy_distribution
from .algo import HyperParams, RolloutBatch, loss_and_grad, ppo_policy_objective, value_loss_combined
from .diffcore import finite_difference_gradient, max_relative_error
from .envs import ActionSpec
from .merl import MerlTargets

TOLERANCE = 1e-4
FD_STEP = 1e-5
# Entries whose analytic and numeric magnitudes are both below this are
# compared in absolute terms; central differences carry ~1e-10 noise here.
REL_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    max_error: dict[str, float] = field(default_factory=dict)
    instances: int = 0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_error.values())

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_error.items():
            mark = "PASS" if err <= self.tolerance else "FAIL"
            out.append(f"{mark} {name:<24} max rel err {err:.3e} over {self.instances} instances")
        return out


def random_instance(rng: np.random.Generator, obs_dim=3, hidden=(5, 4), act_dim=2, n_actions=0,
                    architecture="separate", m=8):
    """Small random agent, minibatch and aux targets.

    Old log-probs are the current ones plus noise, so both clip branches and
    both advantage signs show up.
    """
    action = (ActionSpec("discrete", n=n_actions) if n_actions
              else ActionSpec("continuous", dim=act_dim, low=(-1.0,) * act_dim, high=(1.0,) * act_dim))
    params = init_agent(obs_dim, action, architecture, hidden, seed=int(rng.integers(2**31)))
    # Move every parameter off its init so no gradient is trivially zero.
    params = params.with_arrays([a + 0.3 * rng.standard_normal(a.shape) for a in params.arrays()])
    obs = rng.standard_normal((m, obs_dim))
    if n_actions:
        actions = rng.integers(0, n_actions, size=m)
    else:
        actions = rng.standard_normal((m, act_dim))
    old_logp = log_prob(policy_distribution(params, obs), actions) + 0.3 * rng.standard_normal(m)
    batch = RolloutBatch(
        observations=obs, actions=actions, old_log_probs=old_logp,
        rewards=np.zeros(m), values=np.zeros(m),
        terminals=rng.random(m) < 0.2, truncated=np.zeros(m, dtype=bool),
        next_observations=rng.standard_normal((m, obs_dim)), next_values=np.zeros(m),
        horizon=m, advantages=rng.standard_normal(m), returns=rng.standard_normal(m),
    )
    targets = MerlTargets(
        vex_per_timestep=rng.uniform(-2.0, 1.0, size=m),
        vex_valid_mask=rng.random(m) < 0.8,
        next_obs=batch.next_observations,
        fs_valid_mask=~batch.terminals,
        segment_vex=np.zeros(0), segment_valid=np.zeros(0, dtype=bool),
    )
    return params, batch, targets, np.arange(m)


def _check(params: AgentParams, group: str, loss_fn: Callable[[AgentParams], float],
           analytic: AgentParams, corrupt: Optional[Callable] = None) -> float:
    g_analytic = analytic.arrays(group)
    if corrupt is not None:
        g_analytic = corrupt(g_analytic)
    numeric = finite_difference_gradient(lambda view: loss_fn(view.params), params.group(group), FD_STEP)
    return max_relative_error(g_analytic, numeric.arrays(), floor=REL_FLOOR)


def check_instance(rng: np.random.Generator, corrupt: Optional[dict] = None, **sizes) -> dict[str, float]:
    """Max relative error per loss on one random instance."""
    corrupt = corrupt or {}
    errors = {}
    base = HyperParams(horizon=8, minibatch_size=8, value_coef=0.5, c_ve=0.5, c_fs=0.01, entropy_coef=0.0)
    only_policy = replace(base, value_coef=0.0, c_ve=0.0, c_fs=0.0)

    params, batch, targets, idx = random_instance(rng, **sizes)
    eps = base.clip_eps

    _, g, _ = loss_and_grad(batch, targets, params, idx, only_policy)
    errors["policy_clip"] = _check(
        params, "policy", lambda p: -ppo_policy_objective(batch, p, idx, eps)[0], g, corrupt.get("policy_clip"))

    for name, coefs in (("value_mse", (0.5, 0.0, 0.0)), ("ve_loss", (0.0, 1.0, 0.0)),
                        ("fs_loss", (0.0, 0.0, 1.0)), ("combined", (0.5, 0.5, 0.01))):
        hp = replace(base, value_coef=coefs[0], c_ve=coefs[1], c_fs=coefs[2])
        _, g, _ = loss_and_grad(batch, targets, params, idx, hp)
        errors[name] = _check(
            params, "value",
            lambda p, c=coefs: value_loss_combined(batch, p, targets, idx, *c)[0],
            g, corrupt.get(name))

    # Shared trunk, discrete actions, entropy bonus: the whole loss through one trunk.
    params, batch, targets, idx = random_instance(rng, obs_dim=sizes.get("obs_dim", 3),
                                                  hidden=sizes.get("hidden", (5, 4)),
                                                  n_actions=4, architecture="shared")
    hp = replace(base, entropy_coef=0.01)
    _, g, _ = loss_and_grad(batch, targets, params, idx, hp)
    errors["shared_total"] = _check(
        params, "all", lambda p: loss_and_grad(batch, targets, p, idx, hp)[0], g, corrupt.get("shared_total"))
    return errors


def run_gradcheck(seed: int = 0, instances: int = 50, corrupt: Optional[dict] = None, **sizes) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport(instances=instances)
    for _ in range(instances):
        for name, err in check_instance(rng, corrupt, **sizes).items():
            report.max_error[name] = max(report.max_error.get(name, 0.0), err)
    return report
