"""Parameter sets and network building blocks (MLP, GRU cell/unroll)."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape


class ParamSet:
    """Named, versioned collection of fp64 parameter tensors.

    Names follow ``<net>/<layer>/<W|b>``. ``version`` increments on every
    in-place update so snapshots can be told apart.
    """

    def __init__(self, tensors=None, version=0):
        self.tensors: dict[str, np.ndarray] = {}
        for k, v in (tensors or {}).items():
            self.tensors[k] = np.array(v, dtype=np.float64)
        self.version = version

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = np.array(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors)

    def keys(self):
        return self.tensors.keys()

    def items(self):
        return self.tensors.items()

    def update(self, other):
        for k, v in dict(other).items():
            self[k] = v

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, version=self.version)

    def select(self, prefix) -> list[str]:
        return [k for k in self.tensors if k.startswith(prefix)]

    def n_elements(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def equals(self, other) -> bool:
        return self.keys() == other.keys() and all(
            np.array_equal(self[k], other[k]) for k in self.tensors
        )


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass(frozen=True)
class GRUSpec:
    input_dim: int
    hidden_dim: int = 64

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ValueError("GRU dims must be positive")


GRU_GATES = ("r", "z", "h")


def init_params(spec, rng, prefix) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    ``prefix`` is ``<net>/<layer>``. A GRU yields ``W_<g>``, ``U_<g>`` and
    ``b_<g>`` for the reset, update and candidate gates.
    """
    if isinstance(spec, LayerSpec):
        bound = 1.0 / np.sqrt(spec.in_dim)
        return {
            f"{prefix}/W": rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)),
            f"{prefix}/b": np.zeros(spec.out_dim),
        }
    if isinstance(spec, GRUSpec):
        out = {}
        bw = 1.0 / np.sqrt(spec.input_dim)
        bu = 1.0 / np.sqrt(spec.hidden_dim)
        for g in GRU_GATES:
            out[f"{prefix}/W_{g}"] = rng.uniform(-bw, bw, size=(spec.input_dim, spec.hidden_dim))
        for g in GRU_GATES:
            out[f"{prefix}/U_{g}"] = rng.uniform(-bu, bu, size=(spec.hidden_dim, spec.hidden_dim))
        for g in GRU_GATES:
            out[f"{prefix}/b_{g}"] = np.zeros(spec.hidden_dim)
        return out
    raise TypeError(f"unknown spec {spec!r}")


def init_mlp(dims, rng, prefix, activation="relu") -> dict[str, np.ndarray]:
    """Stack of LayerSpecs ``dims[0] -> dims[1] -> ...`` named fc1, fc2, ..."""
    out = {}
    for k in range(len(dims) - 1):
        act = activation if k < len(dims) - 2 else "none"
        out.update(init_params(LayerSpec(dims[k], dims[k + 1], act), rng, f"{prefix}/fc{k + 1}"))
    return out


def linear(tape: Tape, p, prefix, x):
    return tape.add(tape.matmul(x, p[f"{prefix}/W"]), p[f"{prefix}/b"])


def mlp_forward(tape: Tape, p, prefix, x, n_layers=2, activation="relu"):
    """``act(x W1 + b1) W2 + b2`` for 2 layers; ReLU between layers, none on output."""
    w = p[f"{prefix}/fc1/W"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"mlp {prefix}: input {x.shape} does not match weight {w.shape}")
    for k in range(1, n_layers + 1):
        x = linear(tape, p, f"{prefix}/fc{k}", x)
        if k < n_layers and activation == "relu":
            x = tape.relu(x)
    return x


def gru_input_proj(tape: Tape, p, prefix, x):
    """Input-side gate pre-activations ``(x W_r, x W_z, x W_h)``.

    Split out so a whole sequence can be projected in one call; the
    recurrent half then runs per step.
    """
    if x.shape[-1] != p[f"{prefix}/W_r"].shape[0]:
        raise ShapeError(f"gru {prefix}: input {x.shape} does not match W_r {p[f'{prefix}/W_r'].shape}")
    return tuple(tape.matmul(x, p[f"{prefix}/W_{g}"]) for g in GRU_GATES)


def gru_step(tape: Tape, p, prefix, proj, h_prev):
    xr, xz, xh = proj
    if h_prev.shape[-1] != p[f"{prefix}/U_r"].shape[0] or h_prev.shape[0] != xr.shape[0]:
        raise ShapeError(f"gru {prefix}: hidden {h_prev.shape} incompatible with input rows {xr.shape}")
    r = tape.sigmoid(tape.add(tape.add(xr, tape.matmul(h_prev, p[f"{prefix}/U_r"])), p[f"{prefix}/b_r"]))
    z = tape.sigmoid(tape.add(tape.add(xz, tape.matmul(h_prev, p[f"{prefix}/U_z"])), p[f"{prefix}/b_z"]))
    cand = tape.tanh(
        tape.add(tape.add(xh, tape.matmul(tape.mul(r, h_prev), p[f"{prefix}/U_h"])), p[f"{prefix}/b_h"])
    )
    # (1 - z) * h_prev + z * cand  ==  h_prev + z * (cand - h_prev)
    return tape.add(h_prev, tape.mul(z, tape.sub(cand, h_prev)))


def gru_cell(tape: Tape, p, prefix, x_t, h_prev):
    """One GRU step.

    r = sigmoid(x W_r + h U_r + b_r), z = sigmoid(x W_z + h U_z + b_z),
    c = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * c.
    """
    return gru_step(tape, p, prefix, gru_input_proj(tape, p, prefix, x_t), h_prev)


def gru_unroll(tape: Tape, p, prefix, xs, h0):
    if len(xs) == 0:
        raise ValueError("gru_unroll needs at least one step")
    hs = []
    h = h0
    for x in xs:
        h = gru_cell(tape, p, prefix, x, h)
        hs.append(h)
    return hs
