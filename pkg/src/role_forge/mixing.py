"""Role-conditioned local utilities and the monotonic state-conditioned mixer."""
from __future__ import annotations

from dataclasses import dataclass

from .autodiff import DiffValue, ShapeError, Tape
from .nn import GRUSpec, LayerSpec, gru_cell, init_mlp, init_params, linear, mlp_forward

HIDDEN_DIM = 64
MIX_EMBED = 32
HYPER_HIDDEN = 32


@dataclass
class MixingParams:
    w1: DiffValue  # [G, n, 32], non-negative
    b1: DiffValue  # [G, 1, 32]
    w2: DiffValue  # [G, 32, 1], non-negative
    b2: DiffValue  # [G, 1, 1]


def init_utility_params(rng, input_dim, hidden_dim=HIDDEN_DIM, prefix="utility"):
    p = init_params(LayerSpec(input_dim, hidden_dim, "relu"), rng, f"{prefix}/fc1")
    p.update(init_params(GRUSpec(hidden_dim, hidden_dim), rng, f"{prefix}/gru"))
    return p


def init_head_params(rng, hidden_dim, n_actions, prefix="utility"):
    return init_params(LayerSpec(hidden_dim, n_actions), rng, f"{prefix}/head")


def init_mixer_params(rng, state_dim, n_agents, embed=MIX_EMBED, hyper=HYPER_HIDDEN):
    p = {}
    p.update(init_mlp([state_dim, hyper, n_agents * embed], rng, "mixer/hyper_w1"))
    p.update(init_mlp([state_dim, hyper, embed], rng, "mixer/hyper_w2"))
    p.update(init_params(LayerSpec(state_dim, embed), rng, "mixer/hyper_b1"))
    p.update(init_mlp([state_dim, hyper, 1], rng, "mixer/hyper_b2"))
    return p


def apply_head(tape: Tape, h, w, b):
    """``q = h W + b`` with a per-row generated head (``w`` is [N, H, A])."""
    n, hid = h.shape
    if w.shape[:2] != (n, hid):
        raise ShapeError(f"head: hidden {h.shape} does not match generated weights {w.shape}")
    q = tape.bmm(tape.reshape(h, (n, 1, hid)), w)
    return tape.add(tape.reshape(q, (n, w.shape[2])), b)


def utility_forward(tape: Tape, p, x, h_prev, head, prefix="utility"):
    """One step of the local utility: FC1+ReLU, GRU, then the (generated) head.

    ``head`` is either a ``(W [N,H,A], b [N,A])`` pair from the role decoder
    or ``None`` to use the shared ``<prefix>/head`` layer.
    """
    w = p[f"{prefix}/fc1/W"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"utility: input {x.shape} does not match fc1 {w.shape}")
    feat = tape.relu(linear(tape, p, f"{prefix}/fc1", x))
    h = gru_cell(tape, p, f"{prefix}/gru", feat, h_prev)
    if head is None:
        q = linear(tape, p, f"{prefix}/head", h)
    else:
        q = apply_head(tape, h, *head)
    return q, h


def mixing_hypernet(tape: Tape, p, state, n_agents, embed=MIX_EMBED) -> MixingParams:
    g = state.shape[0]
    if state.shape[-1] != p["mixer/hyper_w1/fc1/W"].shape[0]:
        raise ShapeError(f"mixer: state {state.shape} does not match hypernet input {p['mixer/hyper_w1/fc1/W'].shape}")
    w1 = tape.abs(mlp_forward(tape, p, "mixer/hyper_w1", state))
    w2 = tape.abs(mlp_forward(tape, p, "mixer/hyper_w2", state))
    b1 = linear(tape, p, "mixer/hyper_b1", state)
    b2 = mlp_forward(tape, p, "mixer/hyper_b2", state)
    return MixingParams(
        tape.reshape(w1, (g, n_agents, embed)),
        tape.reshape(b1, (g, 1, embed)),
        tape.reshape(w2, (g, embed, 1)),
        tape.reshape(b2, (g, 1, 1)),
    )


def mix_with(tape: Tape, mp: MixingParams, q_locals) -> DiffValue:
    """relu(q W1 + b1) W2 + b2 for each of G rows; q_locals is [G, n]."""
    g, n = q_locals.shape
    if mp.w1.shape[:2] != (g, n):
        raise ShapeError(f"mix: q_locals {q_locals.shape} do not match W1 {mp.w1.shape}")
    hidden = tape.relu(tape.add(tape.bmm(tape.reshape(q_locals, (g, 1, n)), mp.w1), mp.b1))
    out = tape.add(tape.bmm(hidden, mp.w2), mp.b2)
    return tape.reshape(out, (g,))


def mix(tape: Tape, p, q_locals, state) -> DiffValue:
    return mix_with(tape, mixing_hypernet(tape, p, state, q_locals.shape[1]), q_locals)
