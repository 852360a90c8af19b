"""Fixed 5-state / 4-action MDP with a value-iteration oracle."""

import random

import numpy as np

from vanet_hil.agent import update

N_S, N_A = 5, 4
GAMMA = 0.9


def fixed_mdp(seed: int = 2024):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(N_S), size=(N_S, N_A))  # P[s, a, s']
    R = rng.uniform(-1.0, 1.0, size=(N_S, N_A))  # expected reward of (s, a)
    return P, R


def value_iteration(P, R, gamma=GAMMA, tol=1e-12):
    v = np.zeros(N_S)
    while True:
        q = R + gamma * P @ v
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() < tol:
            return v_new, q
        v = v_new


def policy_value(P, R, policy, gamma=GAMMA):
    idx = np.arange(N_S)
    P_pi = P[idx, policy]
    R_pi = R[idx, policy]
    return np.linalg.solve(np.eye(N_S) - gamma * P_pi, R_pi)


def train_q(P, R, steps=200_000, gamma=GAMMA, seed=7):
    """Off-policy Q-learning along a uniformly random behaviour trajectory."""
    rng = random.Random(seed)
    q = np.zeros((N_S, N_A))
    visits = np.zeros((N_S, N_A), dtype=np.int64)
    cum = np.cumsum(P, axis=2)
    s = 0
    for _ in range(steps):
        a = rng.randrange(N_A)
        s_next = int(np.searchsorted(cum[s, a], rng.random(), side="right"))
        s_next = min(s_next, N_S - 1)
        visits[s, a] += 1
        update(q, s, a, R[s, a], s_next, alpha=1.0 / visits[s, a], gamma=gamma)
        s = s_next
    return q
