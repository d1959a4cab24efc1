"""Brute-force optimal-return oracles for the toy environments."""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

from .envs import Formation, Harvest, Sacrifice, TwoState, make_env


def sacrifice_search():
    """Exhaustive forward search over joint plans, merging permuted states.

    Returns ``(best_return, plan)`` where ``plan`` is a list of joint actions.
    """
    env = Sacrifice
    joint = [np.array(a) for a in itertools.product(range(env.n_actions), repeat=env.n_agents)]
    start = tuple([0] * env.n_agents)
    frontier = {tuple(sorted(start)): (start, [])}
    for _ in range(env.horizon):
        nxt = {}
        for pos, plan in frontier.values():
            for a in joint:
                new, _ = env.transition(np.array(pos), a)
                key = tuple(sorted(new.tolist()))
                if key not in nxt:
                    nxt[key] = (tuple(new.tolist()), plan + [a])
        frontier = nxt
    best, best_plan = -1.0, None
    for key, (pos, plan) in frontier.items():
        value = 0.25 * key.count(env.goal)
        if value > best:
            best, best_plan = value, plan
    return best, best_plan


def formation_step_bounds():
    """Upper bound on occupied target slots after each step (bipartite matching)."""
    env = Formation
    start = np.array(env.start)
    slots = np.array(env.targets)
    bounds = []
    for t in range(1, env.horizon + 1):
        reachable = np.abs(start[:, None] - slots[None, :]) <= t
        rows, cols = linear_sum_assignment(-reachable.astype(float))
        bounds.append(int(reachable[rows, cols].sum()))
    return bounds


def formation_plan():
    """Order-preserving assignment of agents to slots, each walking straight there."""
    env = Formation
    start = np.array(env.start)
    order = np.argsort(start, kind="stable")
    goal = np.empty_like(start)
    goal[order] = np.array(env.targets)
    pos = start.copy()
    plan = []
    for _ in range(env.horizon):
        a = np.where(goal < pos, 0, np.where(goal > pos, 1, 2))
        pos = pos + env._moves[a]
        plan.append(a)
    return plan


def harvest_resource_bounds():
    """Max picks per resource: earliest arrival then one pick per respawn period.

    Found by enumerating every pick schedule of a single resource.
    """
    env = Harvest
    start = np.array(env.start)
    out = []
    for r, c, _ in env.resources:
        arrival = abs(r - start[0]) + abs(c - start[1])
        steps = range(arrival, env.horizon)
        best = 0
        # longest schedule with consecutive picks >= respawn apart
        for k in range(len(steps), 0, -1):
            if any(all(b - a >= env.respawn for a, b in zip(s, s[1:])) for s in itertools.combinations(steps, k)):
                best = k
                break
        out.append(best)
    return out


def harvest_plan():
    """Each agent walks to its own-class resource, then alternates pick and wait."""
    env = Harvest
    # agent -> resource index: A agents to the west cells, B to the east
    targets = [0, 1, 2, 3]
    plans = []
    for i, r in enumerate(targets):
        row, col, _ = env.resources[r]
        moves = []
        dr, dc = row - env.start[0], col - env.start[1]
        moves += [0 if dr < 0 else 1] * abs(dr)
        moves += [2 if dc < 0 else 3] * abs(dc)
        while len(moves) < env.horizon:
            moves.append(4)
        plans.append(moves[: env.horizon])
    return [np.array(step) for step in zip(*plans)]


def rollout_plan(kind, plan, seed=None):
    env = make_env(kind)
    env.reset(seed)
    total = 0.0
    for a in plan:
        total += env.step(np.asarray(a)).reward
    return total


def twostate_q_star(gamma=0.99):
    """Finite-horizon optimal Q by value iteration, indexed ``[t, s, a]``."""
    env = TwoState
    q = np.zeros((env.horizon + 1, 2, 2))
    for t in range(env.horizon - 1, -1, -1):
        for s in range(2):
            for a in range(2):
                nxt = s ^ a
                cont = 0.0 if t == env.horizon - 1 else gamma * q[t + 1, nxt].max()
                q[t, s, a] = env.rewards[s, a] + cont
    return q[: env.horizon]


def optimal_return_oracle(kind: str) -> float:
    """Maximal undiscounted episode return, established by search."""
    if kind == "sacrifice":
        return sacrifice_search()[0]
    if kind == "formation":
        achieved = rollout_plan("formation", formation_plan())
        bound = sum(b / len(Formation.targets) - 0.01 for b in formation_step_bounds())
        if not np.isclose(achieved, bound, rtol=0, atol=1e-12):
            raise RuntimeError(f"formation plan {achieved} falls short of the matching bound {bound}")
        return achieved
    if kind == "harvest":
        achieved = rollout_plan("harvest", harvest_plan())
        bound = float(sum(harvest_resource_bounds()))
        if achieved != bound:
            raise RuntimeError(f"harvest plan {achieved} falls short of the per-resource bound {bound}")
        return achieved
    raise ValueError(f"no oracle for env kind {kind!r}")


def conditional_mi(joint):
    """I(rho; tau | o) for a joint probability table indexed ``[rho, tau, o]``."""
    p_o = joint.sum(axis=(0, 1))
    p_rho_o = joint.sum(axis=1)
    p_tau_o = joint.sum(axis=0)
    ratio = joint * p_o[None, None, :] / (p_rho_o[:, None, :] * p_tau_o[None, :, :])
    return float((joint * np.log(ratio)).sum())


def variational_value(joint, q):
    """E[log q(rho | tau, o) - log p(rho | o)] under ``joint``; ``q`` is indexed like the joint."""
    p_rho_given_o = joint.sum(axis=1) / joint.sum(axis=(0, 1))[None, :]
    return float((joint * (np.log(q) - np.log(p_rho_given_o)[:, None, :])).sum())


def true_posterior(joint):
    """p(rho | tau, o) from the joint table."""
    return joint / joint.sum(axis=0, keepdims=True)
