"""TD loss, identifiability loss, specialization loss and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffValue, Tape
from .mixing import mix
from .model import BatchForward, ModelSpec, forward_batch, time_major
from .roles import (
    RoleDistribution,
    dissimilarity_pairs,
    gaussian_kl,
    gaussian_log_prob,
    trajectory_posterior,
)

U_CAP = 1.0


@dataclass
class LossBreakdown:
    l_td: float
    l_i: float
    l_d: float
    total: float
    total_node: DiffValue | None = None
    diagnostics: dict = field(default_factory=dict)


def minmax_normalize(values) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("minmax_normalize needs at least one value")
    if not np.all(np.isfinite(v)):
        raise ValueError("minmax_normalize got a non-finite value")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _minmax_per_step(values, mask):
    """Per-timestep (lo, hi) over valid episodes; values [T,B,K], mask [T,B]."""
    t_max = values.shape[0]
    lo = np.zeros(t_max)
    hi = np.zeros(t_max)
    for t in range(t_max):
        v = values[t][mask[t] > 0]
        if v.size:
            lo[t], hi[t] = v.min(), v.max()
    return lo, hi


def _normalize_node(tape: Tape, x, lo, hi, rows_per_step):
    """(x - lo_t) / (hi_t - lo_t) with constants treated as fixed (no gradient)."""
    span = hi - lo
    inv = np.where(span > 0, 1.0 / np.where(span > 0, span, 1.0), 0.0)
    lo_full = np.repeat(lo, rows_per_step)
    inv_full = np.repeat(inv, rows_per_step)
    return tape.mul(tape.sub(x, tape.const(lo_full)), tape.const(inv_full))


def ordered_pairs(n):
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    index = {pr: k for k, pr in enumerate(pairs)}
    swap = np.array([index[(j, i)] for i, j in pairs], dtype=np.intp)
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]), swap


def pair_rows(groups, n):
    """Row indices of ordered pairs inside each of ``groups`` blocks of ``n`` rows."""
    pi, pj, swap = ordered_pairs(n)
    k = len(pi)
    base = np.arange(groups)[:, None] * n
    rows_i = (base + pi[None, :]).reshape(-1)
    rows_j = (base + pj[None, :]).reshape(-1)
    rows_swap = (np.arange(groups)[:, None] * k + swap[None, :]).reshape(-1)
    return rows_i, rows_j, rows_swap


def step_mask_rows(mask):
    """[B,T] mask -> time-major [T*B]."""
    return time_major(mask).reshape(-1).astype(np.float64)


def _masked_mean(tape: Tape, x, mask_rows):
    count = mask_rows.sum()
    if count == 0:
        raise ValueError("no valid steps in batch")
    return tape.scale(tape.sum(tape.mul(x, tape.const(mask_rows))), 1.0 / count)


def td_targets(target_params, spec: ModelSpec, batch, gamma):
    """r_t + gamma * Q_tot'(s_{t+1}, greedy a') with per-agent greedy max under the target net.

    Returns time-major targets [T*B]. A step whose successor is masked is terminal.
    """
    b, t_max = batch.rewards.shape
    tape = Tape(record=False)
    p = tape.params(target_params, requires_grad=False)
    fwd = forward_batch(tape, p, spec, batch.obs, batch.actions, batch.noise)
    q_max = fwd.q_all.data.max(axis=1).reshape(t_max * b, spec.n_agents)
    states = time_major(batch.states).reshape(t_max * b, -1)
    q_next_tot = mix(tape, p, tape.const(q_max), tape.const(states)).data.reshape(t_max, b)
    mask = time_major(batch.mask).astype(np.float64)
    cont = np.zeros((t_max, b))
    cont[:-1] = mask[1:] * q_next_tot[1:]
    y = time_major(batch.rewards) + gamma * cont
    return y.reshape(-1)


def chosen_q_tot(tape: Tape, p, spec: ModelSpec, batch, fwd: BatchForward):
    b, t_max = batch.rewards.shape
    actions = time_major(batch.actions).reshape(-1)
    q_taken = tape.reshape(tape.take(fwd.q_all, actions), (t_max * b, spec.n_agents))
    states = tape.const(time_major(batch.states).reshape(t_max * b, -1))
    return mix(tape, p, q_taken, states)


def td_loss(tape: Tape, p, target_params, spec: ModelSpec, batch, gamma=0.99, fwd=None):
    """Masked mean squared TD error of Q_tot."""
    if batch.rewards.size == 0 or batch.mask.sum() == 0:
        raise ValueError("td_loss: empty batch")
    if fwd is None:
        fwd = forward_batch(tape, p, spec, batch.obs, batch.actions, batch.noise)
    q_tot = chosen_q_tot(tape, p, spec, batch, fwd)
    y = td_targets(target_params, spec, batch, gamma)
    err = tape.square(tape.sub(q_tot, tape.const(y)))
    return _masked_mean(tape, err, step_mask_rows(batch.mask))


def posterior_for(tape: Tape, p, spec: ModelSpec, fwd: BatchForward) -> RoleDistribution:
    if "posterior" not in fwd.extras:
        fwd.extras["posterior"] = trajectory_posterior(
            tape, p, tape.const(fwd.h_prev), tape.const(fwd.obs_rows), spec.role_dim
        )
    return fwd.extras["posterior"]


def loss_identifiable(tape: Tape, p, spec: ModelSpec, batch, fwd: BatchForward):
    """Mean KL(p(rho|o) || q_xi(rho|tau, o)) over agents and valid steps."""
    post = posterior_for(tape, p, spec, fwd)
    kl = gaussian_kl(tape, fwd.role, post)
    agent_mask = np.repeat(step_mask_rows(batch.mask), spec.n_agents)
    return _masked_mean(tape, kl, agent_mask)


def loss_specialize(tape: Tape, p, spec: ModelSpec, batch, fwd: BatchForward, norm=None):
    """Frobenius norm of the normalized dissimilarity matrix minus the capped
    pairwise sum of normalized cross log-density and dissimilarity.

    Normalization is min-max per timestep over every valid episode and ordered
    pair of the batch. Pass ``norm`` (as returned in the second slot) to reuse
    fixed normalization constants. Returns ``(loss, norm, diagnostics)``.
    """
    n = spec.n_agents
    b, t_max = batch.rewards.shape
    if n == 1:
        return tape.const(0.0), None, {}
    groups = t_max * b
    rows_i, rows_j, rows_swap = pair_rows(groups, n)
    k = n * (n - 1)

    post = posterior_for(tape, p, spec, fwd)
    post_j = RoleDistribution(tape.gather(post.mu, rows_j), tape.gather(post.sigma2, rows_j))
    cross = gaussian_log_prob(tape, post_j, tape.gather(fwd.rho, rows_i))
    d = dissimilarity_pairs(tape, p, tape.const(fwd.h_prev), rows_i, rows_j, rows_swap)

    mask_tb = time_major(batch.mask).astype(np.float64)
    if norm is None:
        norm = {
            "cross": _minmax_per_step(cross.data.reshape(t_max, b, k), mask_tb),
            "dissim": _minmax_per_step(d.data.reshape(t_max, b, k), mask_tb),
        }
    c_n = _normalize_node(tape, cross, *norm["cross"], b * k)
    d_n = _normalize_node(tape, d, *norm["dissim"], b * k)

    frob = tape.frobenius_norm(tape.reshape(d_n, (groups, k)), axis=-1)
    capped = tape.sum(tape.reshape(tape.scalar_min(tape.add(c_n, d_n), U_CAP), (groups, k)), axis=-1)
    loss = _masked_mean(tape, tape.sub(frob, capped), step_mask_rows(batch.mask))
    diag = {"cross_norm": c_n.data.reshape(t_max, b, k), "dissim_norm": d_n.data.reshape(t_max, b, k)}
    return loss, norm, diag


def total_loss(
    tape: Tape,
    p,
    target_params,
    spec: ModelSpec,
    batch,
    lambda_i=1e-4,
    lambda_d=1e-2,
    gamma=0.99,
    norm=None,
) -> LossBreakdown:
    """L_TD + lambda_i * L_I + lambda_d * L_D in one graph.

    A regularizer whose weight is zero (or a model without roles) is not
    evaluated and reported as 0.
    """
    fwd = forward_batch(tape, p, spec, batch.obs, batch.actions, batch.noise)
    l_td = td_loss(tape, p, target_params, spec, batch, gamma, fwd=fwd)
    total = l_td
    l_i_val = l_d_val = 0.0
    diag = {}
    roles = spec.mode == "roles"
    if roles and lambda_i != 0:
        l_i = loss_identifiable(tape, p, spec, batch, fwd)
        l_i_val = l_i.item()
        total = tape.add(total, tape.scale(l_i, lambda_i))
    if roles and lambda_d != 0:
        l_d, used, diag = loss_specialize(tape, p, spec, batch, fwd, norm=norm)
        diag["norm"] = used
        l_d_val = l_d.item()
        total = tape.add(total, tape.scale(l_d, lambda_d))
    return LossBreakdown(l_td.item(), l_i_val, l_d_val, total.item(), total, diag)
