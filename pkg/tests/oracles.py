"""Independent reference implementations used by the tests.

Each one follows the textbook definition directly and shares no code with
the package.
"""

import math


def gae_double_sum(rewards, values, next_values, terminals, ends, gamma, lam):
    """A_t = sum_l (gamma*lam)^l * delta_{t+l}, summed up to the end of t's segment."""
    n = len(rewards)
    deltas = []
    for t in range(n):
        boot = 0.0 if terminals[t] else next_values[t]
        deltas.append(rewards[t] + gamma * boot - values[t])
    out = []
    for t in range(n):
        stop = t
        while not ends[stop]:
            stop += 1
        out.append(math.fsum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, stop + 1)))
    return out


def discounted_to_go(rewards, gamma):
    return [math.fsum(gamma ** (k - t) * rewards[k] for k in range(t, len(rewards)))
            for t in range(len(rewards))]


def r_squared(returns, values):
    """Coefficient of determination, two-pass with exactly rounded sums."""
    n = len(returns)
    mean = math.fsum(returns) / n
    ss_tot = math.fsum((r - mean) ** 2 for r in returns)
    ss_res = math.fsum((r - v) ** 2 for r, v in zip(returns, values))
    return 1.0 - ss_res / ss_tot
