"""Quantum-to-classical weight generation.

Every CNN parameter theta_i is produced from the QNN measurement distribution:

    x_i     = [bits of i (big-endian, N entries), p_i]
    g_i     = w2 . tanh(W1 x_i + b1) + b2            (mapping model)
    theta_i = scale[l] * g_i + shift[l]              (scaling model, l = layer group of i)

Basis states with index >= M are simulated but unused.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import CnnArchitecture, count_cnn_params
from .qsim import QnnConfig, grad_probabilities, run_qnn

N_GROUPS = 4


class CapacityError(ValueError):
    """The QNN register has fewer basis states than the target has parameters."""


class MissingCacheError(RuntimeError):
    pass


def required_qubits(m: int) -> int:
    if m < 1:
        raise ValueError(f"parameter count must be positive, got {m}")
    return max(1, (m - 1).bit_length())


def basis_bits(n_qubits: int, count: int | None = None) -> np.ndarray:
    """Rows of big-endian bits for basis indices 0..count-1."""
    count = (1 << n_qubits) if count is None else count
    idx = np.arange(count)[:, None]
    shifts = np.arange(n_qubits - 1, -1, -1)[None, :]
    return ((idx >> shifts) & 1).astype(np.float64)


def build_mapping_input(basis_index: int, probability: float, n_qubits: int) -> np.ndarray:
    if not 0 <= basis_index < (1 << n_qubits):
        raise ValueError(f"basis_index {basis_index} out of range for {n_qubits} qubits")
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {probability}")
    bits = [(basis_index >> (n_qubits - 1 - k)) & 1 for k in range(n_qubits)]
    return np.array(bits + [probability], dtype=np.float64)


@dataclass
class MappingModel:
    """Two-layer tanh network from N+1 inputs to one output."""

    w1: np.ndarray  # (H, N+1)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return mapping_param_count(self.n_inputs - 1, self.hidden)

    @classmethod
    def zeros(cls, n_qubits: int, hidden: int) -> "MappingModel":
        return cls(np.zeros((hidden, n_qubits + 1)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @classmethod
    def init(cls, n_qubits: int, hidden: int, rng: np.random.Generator) -> "MappingModel":
        a1 = np.sqrt(6.0 / (n_qubits + 1 + hidden))
        a2 = np.sqrt(6.0 / (hidden + 1))
        return cls(
            rng.uniform(-a1, a1, size=(hidden, n_qubits + 1)),
            np.zeros(hidden),
            rng.uniform(-a2, a2, size=hidden),
            0.0,
        )

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_vector(cls, gamma, n_qubits: int, hidden: int) -> "MappingModel":
        gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
        n_in = n_qubits + 1
        expect = mapping_param_count(n_qubits, hidden)
        if gamma.shape[0] != expect:
            raise ValueError(f"gamma has {gamma.shape[0]} entries, expected {expect}")
        i = hidden * n_in
        return cls(
            gamma[:i].reshape(hidden, n_in).copy(),
            gamma[i:i + hidden].copy(),
            gamma[i + hidden:i + 2 * hidden].copy(),
            float(gamma[-1]),
        )


def mapping_param_count(n_qubits: int, hidden: int) -> int:
    return (n_qubits + 1) * hidden + hidden + hidden + 1


@dataclass
class ScalingModel:
    scale: np.ndarray  # (4,)
    shift: np.ndarray  # (4,)

    @classmethod
    def identity(cls) -> "ScalingModel":
        return cls(np.ones(N_GROUPS), np.zeros(N_GROUPS))

    @classmethod
    def calibrated(cls, g, arch: CnnArchitecture) -> "ScalingModel":
        """Scale/shift that give each layer group zero mean and the He-uniform spread.

        ``g`` holds the mapping outputs for all M indices at initialisation.
        Groups whose mapping outputs are constant keep scale 1.
        """
        g = np.asarray(g, dtype=np.float64)
        groups = _group_index(arch)
        scale, shift = np.ones(N_GROUPS), np.zeros(N_GROUPS)
        for l, fan_in in enumerate(arch.group_fan_in()):
            vals = g[groups == l]
            if vals.size == 0:
                continue
            std = vals.std()
            target = np.sqrt(2.0 / fan_in) if fan_in else 0.0
            if std > 0:
                scale[l] = target / std
            shift[l] = -scale[l] * vals.mean()
        return cls(scale, shift)

    @property
    def n_params(self) -> int:
        return self.scale.size + self.shift.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.scale, self.shift])

    @classmethod
    def from_vector(cls, s) -> "ScalingModel":
        s = np.asarray(s, dtype=np.float64).reshape(-1)
        if s.shape[0] != 2 * N_GROUPS:
            raise ValueError(f"scaling vector must have {2 * N_GROUPS} entries, got {s.shape[0]}")
        return cls(s[:N_GROUPS].copy(), s[N_GROUPS:].copy())


def mapping_forward(model: MappingModel, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.n_inputs:
        raise ValueError(f"mapping input has width {x.shape[0]}, model expects {model.n_inputs}")
    return float(model.w2 @ np.tanh(model.w1 @ x + model.b1) + model.b2)


def _group_index(layout: CnnArchitecture | Sequence[int]) -> np.ndarray:
    sizes = layout.group_sizes() if isinstance(layout, CnnArchitecture) else tuple(layout)
    if len(sizes) != N_GROUPS:
        raise ValueError(f"expected {N_GROUPS} layer groups, got {len(sizes)}")
    return np.repeat(np.arange(N_GROUPS), sizes)


@dataclass
class Generation:
    """Forward values kept for the backward pass."""

    config: QnnConfig
    phi: np.ndarray
    mapping: MappingModel
    scaling: ScalingModel
    groups: np.ndarray
    probs: np.ndarray   # (2^N,)
    inputs: np.ndarray  # (M, N+1)
    hidden: np.ndarray  # (M, H)
    g: np.ndarray       # (M,) mapping outputs
    theta: np.ndarray   # (M,)


def forward_generation(config: QnnConfig, phi, mapping: MappingModel, scaling: ScalingModel,
                       layout: CnnArchitecture | Sequence[int]) -> Generation:
    groups = _group_index(layout)
    m = groups.shape[0]
    if config.dim < m:
        raise CapacityError(
            f"{config.n_qubits} qubits give {config.dim} basis states, need at least {m}"
        )
    if mapping.n_inputs != config.n_qubits + 1:
        raise ValueError(
            f"mapping model takes {mapping.n_inputs} inputs, {config.n_qubits} qubits need {config.n_qubits + 1}"
        )
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    probs = run_qnn(config, phi)
    inputs = np.empty((m, config.n_qubits + 1))
    inputs[:, :-1] = basis_bits(config.n_qubits, m)
    inputs[:, -1] = probs[:m]
    hidden = np.tanh(inputs @ mapping.w1.T + mapping.b1)
    g = hidden @ mapping.w2 + mapping.b2
    theta = scaling.scale[groups] * g + scaling.shift[groups]
    return Generation(config, phi, mapping, scaling, groups, probs, inputs, hidden, g, theta)


def generate_theta(config: QnnConfig, phi, mapping: MappingModel, scaling: ScalingModel,
                   layout: CnnArchitecture | Sequence[int]) -> np.ndarray:
    return forward_generation(config, phi, mapping, scaling, layout).theta


def backprop_generation(dl_dtheta, cache: Generation | None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain dL/dtheta back to (dL/dphi, dL/dgamma, dL/dscaling).

    The gamma gradient is laid out like ``MappingModel.to_vector`` and the
    scaling gradient like ``ScalingModel.to_vector``.
    """
    if cache is None:
        raise MissingCacheError("backprop_generation needs the cache from forward_generation")
    dth = np.asarray(dl_dtheta, dtype=np.float64).reshape(-1)
    if dth.shape != cache.theta.shape:
        raise ValueError(f"gradient length {dth.shape[0]} != M = {cache.theta.shape[0]}")

    groups = cache.groups
    d_shift = np.bincount(groups, weights=dth, minlength=N_GROUPS)
    d_scale = np.bincount(groups, weights=dth * cache.g, minlength=N_GROUPS)

    dg = dth * cache.scaling.scale[groups]
    mp = cache.mapping
    d_w2 = cache.hidden.T @ dg
    d_b2 = dg.sum()
    d_pre = np.outer(dg, mp.w2) * (1.0 - cache.hidden ** 2)
    d_w1 = d_pre.T @ cache.inputs
    d_b1 = d_pre.sum(axis=0)
    d_gamma = np.concatenate([d_w1.ravel(), d_b1, d_w2, [d_b2]])

    d_probs = np.zeros(cache.config.dim)
    d_probs[: dth.shape[0]] = d_pre @ mp.w1[:, -1]
    d_phi = grad_probabilities(cache.config, cache.phi, d_probs)
    return d_phi, d_gamma, np.concatenate([d_scale, d_shift])


def count_qt_params(config: QnnConfig, mapping: MappingModel, scaling: ScalingModel) -> int:
    return config.n_params + mapping.n_params + scaling.n_params


def qt_config_for(arch: CnnArchitecture, n_blocks: int) -> QnnConfig:
    return QnnConfig(required_qubits(count_cnn_params(arch)), n_blocks)
