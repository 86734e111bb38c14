"""Reference valuations written independently of the package solvers."""

import math

import numpy as np


def crr_american_put(s0, strike, rate, vol, T, n):
    """Cox-Ross-Rubinstein tree with exercise compared at every node."""
    dt = T / n
    up = math.exp(vol * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(rate * dt) - down) / (up - down)
    disc = math.exp(-rate * dt)
    j = np.arange(n + 1)
    values = np.maximum(strike - s0 * up ** (n - 2 * j), 0.0)
    for i in range(n - 1, -1, -1):
        j = np.arange(i + 1)
        hold = disc * (p * values[:-1] + (1 - p) * values[1:])
        values = np.maximum(hold, strike - s0 * up ** (i - 2 * j))
    return float(values[0])


def crr_european_put(s0, strike, rate, vol, T, n):
    dt = T / n
    up = math.exp(vol * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(rate * dt) - down) / (up - down)
    j = np.arange(n + 1)
    logw = (np.array([math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1) for k in j])
            + (n - j) * math.log(p) + j * math.log(1 - p))
    payoff = np.maximum(strike - s0 * up ** (n - 2 * j), 0.0)
    return float(math.exp(-rate * T) * np.sum(np.exp(logw) * payoff))
