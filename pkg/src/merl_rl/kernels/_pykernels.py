"""Pure-Python kernels, used when the compiled extension is unavailable.

Loop order and arithmetic mirror ``_ckernels.pyx`` so both backends agree
bit for bit.
"""

import math

import numpy as np


def gae(rewards, values, next_values, terminals, ends, gamma, lam):
    r = rewards.tolist()
    v = values.tolist()
    nv = next_values.tolist()
    term = terminals.tolist()
    end = ends.tolist()
    n = len(r)
    adv = [0.0] * n
    running = 0.0
    for t in range(n - 1, -1, -1):
        if end[t]:
            running = 0.0
        boot = 0.0 if term[t] else nv[t]
        delta = r[t] + gamma * boot - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return np.array(adv, dtype=np.float64)


def segment_vex(returns, values, starts, ends, tol):
    ret = returns.tolist()
    val = values.tolist()
    nseg = len(starts)
    vex = [0.0] * nseg
    valid = [0] * nseg
    for k, (a, b) in enumerate(zip(starts.tolist(), ends.tolist())):
        if b - a + 1 < 2:
            continue
        mean = 0.0
        for t in range(a, b + 1):
            mean += ret[t]
        mean = mean / (b - a + 1)
        ss_res = 0.0
        ss_tot = 0.0
        for t in range(a, b + 1):
            d = ret[t] - val[t]
            ss_res += d * d
            d = ret[t] - mean
            ss_tot += d * d
        if ss_tot < tol:
            continue
        vex[k] = 1.0 - ss_res / ss_tot
        valid[k] = 1
    return np.array(vex, dtype=np.float64), np.array(valid, dtype=np.uint8)


def adam(p, g, m, v, lr, b1, b2, eps, c1, c2):
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * (g * g)
    return p - lr * (m / c1) / (np.sqrt(v / c2) + eps), m, v


def aux_losses(out, idx, vex, vex_valid, unit, fs_valid, c_ve, c_fs, ve_col, fs_col, eps):
    m, width = out.shape
    rows = out.tolist()
    ids = idx.tolist()
    d = [[0.0] * width for _ in range(m)]
    ve_rows = [i for i in range(m) if ve_col >= 0 and vex_valid[ids[i]]]
    fs_rows = [i for i in range(m) if fs_col >= 0 and fs_valid[ids[i]]]
    ve_sum = fs_sum = 0.0
    if ve_rows:
        k_ve = c_ve * (2.0 / len(ve_rows))
        for i in ve_rows:
            diff = rows[i][ve_col] - float(vex[ids[i]])
            ve_sum += diff * diff
            d[i][ve_col] = k_ve * diff
    if fs_rows:
        w = 1.0 / len(fs_rows)
        k_fs = c_fs * w
        for i in fs_rows:
            p = rows[i][fs_col:]
            u = unit[ids[i]].tolist()
            pn = 0.0
            dot = 0.0
            for j in range(len(u)):
                pn += p[j] * p[j]
                dot += p[j] * u[j]
            pn = math.sqrt(pn)
            a = pn + eps
            cos = dot / a
            fs_sum += 1.0 - cos
            along = cos / (a * pn) if pn > 0.0 else 0.0
            for j in range(len(u)):
                d[i][fs_col + j] = k_fs * (along * p[j] - u[j] / a)
    ve_loss = ve_sum / len(ve_rows) if ve_rows else 0.0
    fs_loss = fs_sum / len(fs_rows) if fs_rows else 0.0
    return ve_loss, fs_loss, np.array(d, dtype=np.float64).reshape(m, width)
