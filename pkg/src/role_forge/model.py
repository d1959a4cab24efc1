"""Whole-team network assembly: parameter layout, batched sequence forward
used for training, and the per-step forward used for acting.

Training tensors are laid out time-major: row ``(t * B + b) * n + i`` holds
agent ``i`` of episode ``b`` at step ``t``. That keeps each GRU step a
contiguous row block and lets every non-recurrent network run once over the
whole batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffValue, Tape
from .mixing import (
    HIDDEN_DIM,
    apply_head,
    init_head_params,
    init_mixer_params,
    init_utility_params,
    utility_forward,
)
from .nn import ParamSet, gru_input_proj, gru_step, linear
from .roles import (
    ROLE_DIM,
    RoleDistribution,
    init_role_params,
    role_decode,
    role_encode,
    role_sample,
)

MODES = ("roles", "shared_head", "nps")


@dataclass(frozen=True)
class ModelSpec:
    n_agents: int
    obs_dim: int
    state_dim: int
    n_actions: int
    mode: str = "roles"
    hidden_dim: int = HIDDEN_DIM
    role_dim: int = ROLE_DIM
    last_action_input: bool = True
    agent_id_input: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def input_dim(self) -> int:
        d = self.obs_dim
        if self.last_action_input:
            d += self.n_actions
        if self.agent_id_input:
            d += self.n_agents
        return d


def init_model_params(spec: ModelSpec, rng) -> ParamSet:
    p = {}
    if spec.mode == "nps":
        for i in range(spec.n_agents):
            pre = f"agent{i}/utility"
            p.update(init_utility_params(rng, spec.input_dim, spec.hidden_dim, prefix=pre))
            p.update(init_head_params(rng, spec.hidden_dim, spec.n_actions, prefix=pre))
    else:
        p.update(init_utility_params(rng, spec.input_dim, spec.hidden_dim))
        if spec.mode == "shared_head":
            p.update(init_head_params(rng, spec.hidden_dim, spec.n_actions))
        else:
            p.update(init_role_params(rng, spec.obs_dim, spec.hidden_dim, spec.n_actions, spec.role_dim))
    p.update(init_mixer_params(rng, spec.state_dim, spec.n_agents))
    return ParamSet(p)


def build_inputs(spec: ModelSpec, obs, actions):
    """Utility-network inputs for ``obs [B,T,n,od]`` and ``actions [B,T,n]``.

    Appends the previous action (zeros at t=0) and the agent id as one-hots.
    """
    b, t, n, _ = obs.shape
    parts = [obs]
    if spec.last_action_input:
        prev = np.zeros((b, t, n, spec.n_actions))
        if t > 1:
            prev[:, 1:] = np.eye(spec.n_actions)[actions[:, :-1]]
        parts.append(prev)
    if spec.agent_id_input:
        parts.append(np.broadcast_to(np.eye(n), (b, t, n, n)))
    return np.concatenate(parts, axis=-1)


def step_inputs(spec: ModelSpec, obs, last_actions):
    """Per-step inputs for ``obs [K,n,od]`` and ``last_actions [K,n]`` (-1 = none)."""
    k, n, _ = obs.shape
    parts = [obs]
    if spec.last_action_input:
        oh = np.zeros((k, n, spec.n_actions))
        valid = last_actions >= 0
        oh[valid] = np.eye(spec.n_actions)[last_actions[valid]]
        parts.append(oh)
    if spec.agent_id_input:
        parts.append(np.broadcast_to(np.eye(n), (k, n, n)))
    return np.concatenate(parts, axis=-1).reshape(k * n, -1)


def time_major(x):
    """[B,T,...] -> [T,B,...]"""
    return np.swapaxes(x, 0, 1)


@dataclass
class BatchForward:
    q_all: DiffValue  # [T*B*n, A]
    h_all: np.ndarray  # [T*B*n, H], GRU output at each step
    h_prev: np.ndarray  # [T*B*n, H], GRU state entering each step (zeros at t=0)
    obs_rows: np.ndarray  # [T*B*n, od]
    role: RoleDistribution | None = None
    rho: DiffValue | None = None
    extras: dict = field(default_factory=dict)


def _unroll_rows(tape: Tape, p, prefix, x_rows, steps, width, hidden_dim):
    """Run FC1 + GRU over time-major rows; returns list of per-step hidden nodes."""
    feat = tape.relu(linear(tape, p, f"{prefix}/fc1", x_rows))
    proj = gru_input_proj(tape, p, f"{prefix}/gru", feat)
    h = tape.const(np.zeros((width, hidden_dim)))
    hs = []
    for t in range(steps):
        rows = (slice(t * width, (t + 1) * width), slice(None))
        h = gru_step(tape, p, f"{prefix}/gru", tuple(tape.slice(x, rows) for x in proj), h)
        hs.append(h)
    return hs


def forward_batch(tape: Tape, p, spec: ModelSpec, obs, actions, noise=None, greedy=False) -> BatchForward:
    """Local utilities for every (t, b, i) of an episode batch.

    ``obs [B,T,n,od]``, ``actions [B,T,n]``, ``noise [B,T,n,role_dim]``.
    With ``greedy`` the role mean is used instead of a sample.
    """
    b, t_max, n, _ = obs.shape
    width = b * n
    x_rows = time_major(build_inputs(spec, obs, actions)).reshape(t_max * width, -1)
    obs_rows = time_major(obs).reshape(t_max * width, -1)
    x = tape.const(x_rows)

    if spec.mode == "nps":
        q_parts = []
        h_parts = []
        for i in range(n):
            idx = np.arange(t_max * b) * n + i
            pre = f"agent{i}/utility"
            hs = _unroll_rows(tape, p, pre, tape.gather(x, idx), t_max, b, spec.hidden_dim)
            h_cat = tape.concat(hs, axis=0)
            q_parts.append(linear(tape, p, f"{pre}/head", h_cat))
            h_parts.append(h_cat.data)
        q_all = tape.reshape(tape.concat(q_parts, axis=-1), (t_max * width, spec.n_actions))
        h_all = np.stack(h_parts, axis=1).reshape(t_max * width, spec.hidden_dim)
        return BatchForward(q_all, h_all, _shift_hidden(h_all, width), obs_rows)

    hs = _unroll_rows(tape, p, "utility", x, t_max, width, spec.hidden_dim)
    h_cat = tape.concat(hs, axis=0)
    h_all = h_cat.data
    h_prev = _shift_hidden(h_all, width)
    if spec.mode == "shared_head":
        return BatchForward(linear(tape, p, "utility/head", h_cat), h_all, h_prev, obs_rows)

    role = role_encode(tape, p, tape.const(obs_rows), spec.role_dim)
    if greedy:
        rho = role.mu
    else:
        rows_noise = time_major(noise).reshape(t_max * width, spec.role_dim)
        rho = role_sample(tape, role, rows_noise).rho
    head = role_decode(tape, p, rho, spec.hidden_dim, spec.n_actions)
    q_all = apply_head(tape, h_cat, *head)
    return BatchForward(q_all, h_all, h_prev, obs_rows, role=role, rho=rho)


def _shift_hidden(h_all, width):
    out = np.zeros_like(h_all)
    out[width:] = h_all[:-width]
    return out


def step_forward(tape: Tape, p, spec: ModelSpec, inputs, obs_rows, h_prev, noise=None, greedy=False):
    """Per-step utilities for ``K*n`` agent rows laid out ``(k, i)``.

    Returns ``(q [K*n, A], h [K*n, H], role or None)``. Reads only the
    utility, role-encoder and role-decoder parameters; never the mixer.
    """
    rows = inputs.shape[0]
    n = spec.n_agents
    if spec.mode == "nps":
        q = np.zeros((rows, spec.n_actions))
        h = np.zeros((rows, spec.hidden_dim))
        for i in range(n):
            idx = np.arange(i, rows, n)
            qi, hi = utility_forward(
                tape, p, tape.const(inputs[idx]), tape.const(h_prev[idx]), None, prefix=f"agent{i}/utility"
            )
            q[idx] = qi.data
            h[idx] = hi.data
        return q, h, None
    if spec.mode == "shared_head":
        q, h = utility_forward(tape, p, tape.const(inputs), tape.const(h_prev), None)
        return q.data, h.data, None
    role = role_encode(tape, p, tape.const(obs_rows), spec.role_dim)
    rho = role.mu if greedy else role_sample(tape, role, noise).rho
    head = role_decode(tape, p, rho, spec.hidden_dim, spec.n_actions)
    q, h = utility_forward(tape, p, tape.const(inputs), tape.const(h_prev), head)
    return q.data, h.data, role


def actor_param_names(spec: ModelSpec, params) -> list[str]:
    """Parameters that decentralized execution is allowed to read."""
    return [k for k in params.keys() if not k.startswith("mixer/")]
