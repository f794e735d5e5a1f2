"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The long-running training criteria (6, 7) are marked ``slow`` but still run
by default; deselect them with ``-m "not slow"``.
"""

import json
import math
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from merl_rl import kernels
from merl_rl.agent import agent_from_dict, init_agent, log_prob, policy_distribution
from merl_rl.algo import HyperParams, RolloutBatch, loss_and_grad, ppo_policy_objective, profile_hyper
from merl_rl.envs import ActionSpec, PointMass2D
from merl_rl.gradcheck import TOLERANCE, run_gradcheck
from merl_rl.harness import (
    Trainer,
    aggregate_seeds,
    default_config,
    format_score,
    read_metrics,
    run_ablation,
    run_experiment,
    run_transfer,
)
from merl_rl.merl import MerlTargets, compute_vex
from oracles import gae_double_sum, r_squared


# -- 1. V^ex oracle --------------------------------------------------------------


def test_criterion_01_vex_oracle(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = worst_inv = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        r = rng.standard_normal(n) * rng.uniform(0.5, 5.0)
        v = r + rng.standard_normal(n) * rng.uniform(0.05, 3.0)
        got = compute_vex(r, v)
        worst = max(worst, abs(got - r_squared(r.tolist(), v.tolist())))
        shift, scale = rng.uniform(-100, 100), rng.uniform(0.01, 100)
        worst_inv = max(worst_inv, abs(compute_vex(r + shift, v + shift) - got),
                        abs(compute_vex(scale * r, scale * v) - got))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and worst_inv <= 1e-9 and elapsed < 1.0
    acceptance(1, ok, f"max |err| {worst:.2e} (<=1e-12), invariance {worst_inv:.2e} (<=1e-9), {elapsed:.2f}s (<1s)")
    assert ok


# -- 2. gradient suite -----------------------------------------------------------


def test_criterion_02_gradient_suite(acceptance):
    t0 = time.perf_counter()
    report = run_gradcheck(seed=0, instances=50)
    elapsed = time.perf_counter() - t0
    worst = max(report.max_error.values())
    ok = report.passed and report.instances >= 50 and elapsed < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in report.max_error.items())
    acceptance(2, ok, f"max rel err {worst:.2e} (<={TOLERANCE:g}) over 50 instances [{detail}], {elapsed:.1f}s (<30s)")
    assert ok, report.lines()


# -- 3. GAE oracle -----------------------------------------------------------------


def _segmented_fixtures():
    """(rewards, values, next_values, terminals, ends) with boundaries at known places."""
    r = np.array([1.0, 0.0, 2.0, -1.0, 0.5, 0.5, 3.0, 0.0, 1.0, -2.0])
    v = np.array([0.3, -0.2, 0.9, 0.1, 0.0, 0.4, -0.6, 0.2, 0.8, 0.5])
    nv = np.append(v[1:], 7.0)
    term = np.zeros(10, bool)
    term[2] = True           # episode ends in a terminal at t=2
    trunc = np.zeros(10, bool)
    trunc[6] = True          # time limit at t=6: bootstrap from a fresh value
    nv[6] = -1.5
    ends = term | trunc
    ends[-1] = True          # rollout edge
    return r, v, nv, term, ends


def test_criterion_03_gae_oracle(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for backend, impl in kernels.available_backends().items():
        for lam in (0.0, 0.5, 0.95, 1.0):
            for _ in range(200):
                n = int(rng.integers(1, 21))
                term = rng.random(n) < 0.15
                ends = term | (rng.random(n) < 0.05)
                ends[-1] = True
                r, v, nv = rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal(n)
                got = kernels.gae(r, v, nv, term, ends, 0.99, lam, impl=impl)
                worst = max(worst, float(np.max(np.abs(got - gae_double_sum(r, v, nv, term, ends, 0.99, lam)))))
    # Segmented fixture: each episode piece on its own must equal the joined call.
    r, v, nv, term, ends = _segmented_fixtures()
    seg_ok = True
    for lam in (0.0, 0.5, 0.95, 1.0):
        joined = kernels.gae(r, v, nv, term, ends, 0.99, lam)
        start = 0
        for stop in np.flatnonzero(ends):
            sl = slice(start, stop + 1)
            alone = gae_double_sum(r[sl], v[sl], nv[sl], term[sl], ends[sl], 0.99, lam)
            seg_ok &= bool(np.max(np.abs(joined[sl] - alone)) <= 1e-10)
            start = stop + 1
        # Nothing leaks backwards across a boundary: perturbing a later episode leaves earlier ones alone.
        r2 = r.copy()
        r2[7:] += 100.0
        seg_ok &= kernels.gae(r2, v, nv, term, ends, 0.99, lam)[:7].tobytes() == joined[:7].tobytes()
    ok = worst <= 1e-10 and seg_ok
    acceptance(3, ok, f"max |err| {worst:.2e} (<=1e-10) over lambda {{0,.5,.95,1}}, "
                      f"segment resets {'ok' if seg_ok else 'BROKEN'}")
    assert ok


# -- 4. reduction ------------------------------------------------------------------


def _same_core(a, b):
    """Bitwise equality of every parameter both agents share."""
    pairs = [(a.policy_net, b.policy_net), (a.value_trunk, b.value_trunk), (a.value_head, b.value_head)]
    same = all(x.tobytes() == y.tobytes() for p, q in pairs for x, y in zip(p.arrays(), q.arrays()))
    return same and a.log_std.tobytes() == b.log_std.tobytes()


def test_criterion_04_reduction(acceptance, tmp_path):
    cfg = default_config("control")
    cfg = replace(cfg, out_dir=str(tmp_path), hyper=replace(cfg.hyper, c_ve=0.0, c_fs=0.0))
    merl = Trainer(cfg, seed=0, ve_head=True, fs_head=True)
    base = Trainer(cfg, seed=0, ve_head=False, fs_head=False)
    identical = []
    for _ in range(10):
        rec_m, _ = merl.iterate()
        rec_b, _ = base.iterate()
        identical.append(_same_core(merl.params, base.params) and rec_m["mean_return"] == rec_b["mean_return"])
    moved = not _same_core(merl.params, Trainer(cfg, seed=0).params)
    ok = all(identical) and moved
    acceptance(4, ok, f"PointMass2D control profile, c_VE=c_FS=0: bit-identical after "
                      f"{sum(identical)}/10 updates")
    assert ok


# -- 5. clip semantics -------------------------------------------------------------


def test_criterion_05_clip_semantics(acceptance):
    action = ActionSpec("continuous", dim=2, low=(-1.0, -1.0), high=(1.0, 1.0))
    p = init_agent(4, action, hidden=(16, 16), seed=5)
    rng = np.random.default_rng(5)
    m = 32
    obs = rng.standard_normal((m, 4))
    act = rng.standard_normal((m, 2))
    logp = log_prob(policy_distribution(p, obs), act)

    def batch(old, adv):
        return RolloutBatch(obs, act, old, np.zeros(m), np.zeros(m), np.zeros(m, bool), np.zeros(m, bool),
                            rng.standard_normal((m, 4)), np.zeros(m), horizon=m, advantages=adv,
                            returns=np.zeros(m))

    targets = MerlTargets(np.zeros(m), np.zeros(m, bool), obs, np.ones(m, bool), np.zeros(0), np.zeros(0, bool))
    hp = HyperParams(horizon=m, minibatch_size=m, value_coef=0.0, c_ve=0.0, c_fs=0.0, clip_eps=0.2)
    idx = np.arange(m)
    adv = np.abs(rng.standard_normal(m)) + 0.05
    zero = []
    # A > 0 with ratio > 1 + eps, then A < 0 with ratio < 1 - eps.
    for old, a in ((logp - 0.4, adv), (logp + 0.4, -adv)):
        _, g, _ = loss_and_grad(batch(old, a), targets, p, idx, hp)
        zero.append(max(float(np.max(np.abs(x))) for x in g.arrays("policy")))
    anchor_adv = rng.standard_normal(m)
    obj, _ = ppo_policy_objective(batch(logp, anchor_adv), p, idx, 0.2)
    anchor_err = abs(obj - anchor_adv.mean())
    ok = zero == [0.0, 0.0] and anchor_err <= 1e-12
    acceptance(5, ok, f"clipped-region policy grad max {max(zero):.1e} (==0), anchor |obj - mean A| "
                      f"{anchor_err:.1e} (<=1e-12)")
    assert ok


# -- 6. learning sanity ------------------------------------------------------------

POINTMASS_SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def pointmass_runs(tmp_path_factory):
    cfg = replace(default_config("control"), seeds=POINTMASS_SEEDS, out_dir=str(tmp_path_factory.mktemp("pm")))
    t0 = time.perf_counter()
    results = run_ablation(cfg, variants=("none", "ve_fs"))
    return cfg, results, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_06_learning_sanity(acceptance, pointmass_runs):
    cfg, results, elapsed = pointmass_runs
    thr = PointMass2D.SOLVED_THRESHOLD
    hits = {"none": [], "ve_fs": []}
    for res in results:
        recs = read_metrics(res.metrics_path)
        first = next((r["step"] for r in recs if r["mean_return"] is not None and r["mean_return"] >= thr), None)
        hits[res.name.split("_seed")[0]].append(first)
    counts = {arm: sum(s is not None for s in steps) for arm, steps in hits.items()}
    ok = all(c >= 4 for c in counts.values()) and elapsed <= 15 * 60
    detail = "; ".join(f"{arm} {counts[arm]}/5 first-hit steps {hits[arm]}" for arm in hits)
    acceptance(6, ok, f"threshold {thr:g} within {cfg.total_steps} steps: {detail}; {elapsed / 60:.1f} min (<=15)")
    assert ok


# -- 7. directional comparison on the sparse task ------------------------------------

SPARSE_SEEDS = list(range(7))


@pytest.mark.slow
def test_criterion_07_sparse_direction(acceptance, tmp_path):
    cfg = replace(default_config("control"), env_id="SparseCar", seeds=SPARSE_SEEDS, out_dir=str(tmp_path))
    results = run_ablation(cfg, variants=("none", "ve_fs"))
    assert all(r.status == "ok" for r in results)
    base = aggregate_seeds(sorted(tmp_path.glob("none_seed*.metrics.jsonl")))
    merl = aggregate_seeds(sorted(tmp_path.glob("ve_fs_seed*.metrics.jsonl")))
    pooled = math.sqrt((base.final_std**2 + merl.final_std**2) / 2.0)
    bar = base.final_mean - 0.5 * pooled
    ok = merl.final_mean >= bar
    acceptance(7, ok, f"SparseCar {len(SPARSE_SEEDS)} seeds, {cfg.total_steps} steps: "
                      f"baseline {format_score(base.final_mean, base.final_std)} {base.finals}, "
                      f"MERL {format_score(merl.final_mean, merl.final_std)} {merl.finals}; "
                      f"MERL mean {merl.final_mean:.2f} vs bar {bar:.2f}")
    assert ok


# -- 8. overhead -----------------------------------------------------------------------


def test_criterion_08_overhead(acceptance):
    """Both arms advance in lockstep and each round is compared as a pair, so
    slow phases of a shared machine hit numerator and denominator alike."""
    cfg = default_config("control")
    ratios, update_ratios = [], []
    for seed in (0, 1, 2):
        arms = {"none": Trainer(cfg, seed, ve_head=False, fs_head=False),
                "ve_fs": Trainer(cfg, seed, ve_head=True, fs_head=True)}
        for i in range(8):
            t = {}
            for k in (("none", "ve_fs") if i % 2 == 0 else ("ve_fs", "none")):
                t[k] = arms[k].iterate()[1]
            ratios.append(t["ve_fs"]["iteration_ms"] / t["none"]["iteration_ms"])
            update_ratios.append(t["ve_fs"]["update_ms"] / t["none"]["update_ms"])
    overhead = statistics.median(ratios) - 1.0
    upd_overhead = statistics.median(update_ratios) - 1.0
    ok = overhead < 0.15
    acceptance(8, ok, f"VE+FS vs none per iteration {100 * overhead:+.1f}% (<15%, median of {len(ratios)} paired "
                      f"rounds); optimisation phase alone {100 * upd_overhead:+.1f}%")
    assert ok


# -- 9. transfer protocol and ablation grid --------------------------------------------


def test_criterion_09_transfer_and_grid(acceptance, tmp_path):
    hyper = profile_hyper("shared", total_steps=4096)
    cfg = replace(default_config("shared"), hyper=hyper, switch_step=2048, seeds=[0, 1], out_dir=str(tmp_path / "tr"))
    results = {r.name: r for r in run_transfer(cfg)}
    continuity, phases, controls = True, True, True
    for s in cfg.seeds:
        run = results[f"ve_fs_transfer_seed{s}"]
        sw = json.loads((tmp_path / "tr" / f"ve_fs_transfer_seed{s}.switch.json").read_text())
        continuity &= run.extra["continuous"] and sw["before"] == sw["after"] and sw["switch_step"] == 2048
        recs = read_metrics(run.metrics_path)
        phases &= [r["phase"] for r in recs] == ["pre"] * 4 + ["post"] * 4
        phases &= all((r["step"] <= 2048) == (r["phase"] == "pre") for r in recs)
        ctrl = read_metrics(results[f"control_seed{s}"].metrics_path)
        controls &= [r["phase"] for r in ctrl] == ["control"] * 4 and ctrl[0]["step"] == 2048 + 512

    grid_cfg = replace(cfg, out_dir=str(tmp_path / "grid"), seeds=[0, 1, 2], switch_step=None,
                       hyper=replace(hyper, total_steps=2048))
    grid = run_ablation(grid_cfg)
    files = sorted(p.name for p in (tmp_path / "grid").glob("*.metrics.jsonl"))
    want = sorted(f"{v}_seed{s}.metrics.jsonl" for v in ("none", "ve", "fs", "ve_fs") for s in grid_cfg.seeds)
    grid_ok = files == want and all(r.status == "ok" for r in grid)

    # The "none" arm equals a heads-on run whose coefficients are zero.
    zero_cfg = replace(grid_cfg, out_dir=str(tmp_path / "zero"),
                       hyper=replace(grid_cfg.hyper, c_ve=0.0, c_fs=0.0))
    reduction = True
    for s in grid_cfg.seeds:
        run_experiment(zero_cfg, s, name=f"zero_seed{s}")
        a = agent_from_dict(json.loads((tmp_path / "grid" / f"none_seed{s}.final.json").read_text()))
        b = agent_from_dict(json.loads((tmp_path / "zero" / f"zero_seed{s}.final.json").read_text()))
        same = all(x.tobytes() == y.tobytes() for x, y in zip(a.arrays("all"), b.arrays("all")[:len(a.arrays("all"))]))
        ra = [r["mean_return"] for r in read_metrics(tmp_path / "grid" / f"none_seed{s}.metrics.jsonl")]
        rb = [r["mean_return"] for r in read_metrics(tmp_path / "zero" / f"zero_seed{s}.metrics.jsonl")]
        reduction &= same and ra == rb
    ok = continuity and phases and controls and grid_ok and reduction
    acceptance(9, ok, f"continuity {'ok' if continuity else 'BROKEN'}, phase tags {'ok' if phases else 'BAD'}, "
                      f"control runs {'ok' if controls else 'BAD'}, grid {len(files)} files (4 variants x 3 seeds), "
                      f"none arm reduction {'ok' if reduction else 'BROKEN'}")
    assert ok


# -- 10. determinism -------------------------------------------------------------------


def test_criterion_10_determinism(acceptance, tmp_path):
    cases = [
        ("control", replace(default_config("control"), hyper=profile_hyper("control", total_steps=3 * 2048))),
        ("shared", replace(default_config("shared"), hyper=profile_hyper("shared", total_steps=4 * 512))),
    ]
    same = []
    for label, cfg in cases:
        digests = []
        for rep in ("a", "b"):
            res = run_experiment(replace(cfg, out_dir=str(tmp_path / label / rep)), seed=7)
            final = tmp_path / label / rep / "ve_fs_seed7.final.json"
            digests.append((res.metrics_path.read_bytes(), final.read_bytes()))
        same.append(digests[0] == digests[1])
    ok = all(same)
    acceptance(10, ok, f"metrics and final checkpoint byte-identical on rerun: "
                       f"control {'yes' if same[0] else 'NO'}, shared {'yes' if same[1] else 'NO'}")
    assert ok
