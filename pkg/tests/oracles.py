"""Independent reference implementations used to check the library.

These are deliberately naive (explicit loops, pairwise comparisons, finite
differences) so they share no code path with what they check.
"""

from __future__ import annotations

import math

import numpy as np

FD_STEP = 1e-5
# Central differences at h=1e-5 carry ~1e-10 absolute error, so relative error is
# measured against max(|a| + |n|, REL_FLOOR) to avoid dividing by vanishing gradients.
REL_FLOOR = 1e-6


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), REL_FLOOR)))


def pool_reference(h, w, valid):
    """Per-dimension softmax pooling written out with scalar loops.

    ``h`` and ``w`` are (slots, D); invalid slots are skipped entirely.
    """
    S, D = len(h), len(h[0])
    h_bar = [0.0] * D
    beta = [[0.0] * D for _ in range(S)]
    for k in range(D):
        idx = [t for t in range(S) if valid[t]]
        m = max(w[t][k] for t in idx)
        z = sum(math.exp(w[t][k] - m) for t in idx)
        for t in idx:
            beta[t][k] = math.exp(w[t][k] - m) / z
            h_bar[k] += beta[t][k] * h[t][k]
    return np.array(h_bar), np.array(beta)


def gae_bruteforce(rewards, values, dones, last_value, gamma, lam):
    """A_t = sum_l (gamma*lam)^l delta_{t+l}, truncated after the first terminal."""
    T = len(rewards)
    nxt = [values[t + 1] if t + 1 < T else last_value for t in range(T)]
    delta = [rewards[t] + gamma * nxt[t] * (1.0 - dones[t]) - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        total, coef = 0.0, 1.0
        for l in range(t, T):
            total += coef * delta[l]
            if dones[l]:
                break
            coef *= gamma * lam
        adv.append(total)
    adv = np.array(adv)
    return adv, adv + np.asarray(values, dtype=np.float64)


def auc_pairwise(scores, labels) -> float:
    """Mann-Whitney statistic over all positive/negative pairs; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))
