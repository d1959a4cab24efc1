"""Role machinery: encoder, reparameterized sampling, diagonal-Gaussian
utilities, trajectory posterior, pairwise dissimilarity and role decoder.

All functions are row-batched: a distribution holds ``mu`` and ``sigma2`` of
shape ``[N, role_dim]`` and scalar-valued results have shape ``[N]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DiffValue, Tape
from .nn import init_mlp, mlp_forward

ROLE_DIM = 3
VAR_FLOOR = 0.1
ROLE_HIDDEN = 12
LOG_2PI = math.log(2 * math.pi)


@dataclass
class RoleDistribution:
    mu: DiffValue
    sigma2: DiffValue

    @classmethod
    def from_arrays(cls, mu, sigma2):
        mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
        return cls(DiffValue(mu), DiffValue(sigma2))


@dataclass
class RoleSample:
    rho: DiffValue
    noise: np.ndarray


def init_role_params(rng, obs_dim, hidden_dim, n_actions, role_dim=ROLE_DIM):
    """theta_rho, xi, phi and theta_h, keyed by net name."""
    p = {}
    p.update(init_mlp([obs_dim, ROLE_HIDDEN, 2 * role_dim], rng, "role_encoder"))
    p.update(init_mlp([hidden_dim + obs_dim, ROLE_HIDDEN, 2 * role_dim], rng, "traj_encoder"))
    p.update(init_mlp([2 * hidden_dim, ROLE_HIDDEN, 1], rng, "dissim"))
    p.update(init_mlp([role_dim, ROLE_HIDDEN, hidden_dim * n_actions + n_actions], rng, "role_decoder"))
    return p


def _gaussian_head(tape: Tape, out, role_dim):
    mu = tape.slice(out, (slice(None), slice(0, role_dim)))
    raw = tape.slice(out, (slice(None), slice(role_dim, 2 * role_dim)))
    sigma2 = tape.clamp_min(tape.square(raw), VAR_FLOOR)
    return RoleDistribution(mu, sigma2)


def _check_finite(dist, p, prefix):
    if not (np.all(np.isfinite(dist.mu.data)) and np.all(np.isfinite(dist.sigma2.data))):
        norms = {k: float(np.linalg.norm(v.data)) for k, v in p.items() if k.startswith(prefix)}
        raise FloatingPointError(f"{prefix} produced non-finite output; parameter norms: {norms}")


def role_encode(tape: Tape, p, obs, role_dim=ROLE_DIM) -> RoleDistribution:
    """Observation -> (mu, sigma2) through a 12-unit ReLU MLP.

    Variance head is ``max(x**2, 0.1)`` on the raw output.
    """
    dist = _gaussian_head(tape, mlp_forward(tape, p, "role_encoder", obs), role_dim)
    _check_finite(dist, p, "role_encoder")
    return dist


def role_sample(tape: Tape, dist: RoleDistribution, noise) -> RoleSample:
    noise = np.asarray(noise, dtype=np.float64).reshape(dist.mu.shape)
    rho = tape.add(dist.mu, tape.mul(tape.sqrt(dist.sigma2), tape.const(noise)))
    return RoleSample(rho, noise)


def gaussian_log_prob(tape: Tape, dist: RoleDistribution, x) -> DiffValue:
    """Diagonal-Gaussian log density summed over the last axis."""
    norm = tape.scale(tape.shift(tape.log(dist.sigma2), LOG_2PI), -0.5)
    quad = tape.scale(tape.div(tape.square(tape.sub(x, dist.mu)), dist.sigma2), -0.5)
    return tape.sum(tape.add(norm, quad), axis=-1)


def gaussian_kl(tape: Tape, p: RoleDistribution, q: RoleDistribution) -> DiffValue:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    log_ratio = tape.scale(tape.sub(tape.log(q.sigma2), tape.log(p.sigma2)), 0.5)
    num = tape.add(p.sigma2, tape.square(tape.sub(p.mu, q.mu)))
    quad = tape.scale(tape.div(num, q.sigma2), 0.5)
    return tape.sum(tape.shift(tape.add(log_ratio, quad), -0.5), axis=-1)


def gaussian_entropy(tape: Tape, dist: RoleDistribution) -> DiffValue:
    per_dim = tape.scale(tape.shift(tape.log(dist.sigma2), LOG_2PI + 1.0), 0.5)
    return tape.sum(per_dim, axis=-1)


def trajectory_posterior(tape: Tape, p, h, obs, role_dim=ROLE_DIM) -> RoleDistribution:
    """q_xi(rho | tau^{t-1}, o^t) from the utility GRU state and the current observation."""
    dist = _gaussian_head(tape, mlp_forward(tape, p, "traj_encoder", tape.concat([h, obs], axis=-1)), role_dim)
    _check_finite(dist, p, "traj_encoder")
    return dist


def dissimilarity_raw(tape: Tape, p, h_i, h_j) -> DiffValue:
    out = mlp_forward(tape, p, "dissim", tape.concat([h_i, h_j], axis=-1))
    return tape.reshape(out, (out.shape[0],))


def dissimilarity(tape: Tape, p, h_i, h_j) -> DiffValue:
    """Symmetrized d(h_i, h_j) = (raw(h_i, h_j) + raw(h_j, h_i)) / 2, shape [N]."""
    both = tape.add(dissimilarity_raw(tape, p, h_i, h_j), dissimilarity_raw(tape, p, h_j, h_i))
    return tape.scale(both, 0.5)


def dissimilarity_pairs(tape: Tape, p, h, pair_i, pair_j, swap) -> DiffValue:
    """Symmetrized dissimilarity for every listed ordered pair in one pass.

    ``swap[k]`` is the position of pair ``(j, i)`` for pair ``k = (i, j)``; the
    raw net runs once over all ordered pairs and is averaged with its mirror.
    """
    raw = dissimilarity_raw(tape, p, tape.gather(h, pair_i), tape.gather(h, pair_j))
    return tape.scale(tape.add(raw, tape.gather(raw, swap)), 0.5)


def role_decode(tape: Tape, p, rho, hidden_dim, n_actions):
    """Hypernetwork: role -> utility head ``W [N, hidden, A]`` and ``b [N, A]``."""
    out = mlp_forward(tape, p, "role_decoder", rho)
    n = out.shape[0]
    w = tape.reshape(tape.slice(out, (slice(None), slice(0, hidden_dim * n_actions))), (n, hidden_dim, n_actions))
    b = tape.slice(out, (slice(None), slice(hidden_dim * n_actions, None)))
    return w, b
