"""Real-amplitude statevector simulator for the Ry / linear-CNOT block ansatz.

Basis index ``i`` is read big-endian: qubit 0 is the most significant bit, so
the bitstring ``0100100`` written left to right is qubit 0 ... qubit 6.

Only Ry and CNOT are supported. Both have real matrix entries, so every
amplitude stays real and the simulator works in float64 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import cos, sin, pi

import numpy as np


@dataclass(frozen=True)
class QnnConfig:
    n_qubits: int
    n_blocks: int

    def __post_init__(self):
        if self.n_qubits < 1 or self.n_blocks < 1:
            raise ValueError(
                f"n_qubits and n_blocks must be >= 1, got {self.n_qubits}, {self.n_blocks}"
            )

    @property
    def n_params(self) -> int:
        return self.n_qubits * self.n_blocks

    @property
    def dim(self) -> int:
        return 1 << self.n_qubits


@dataclass(frozen=True)
class Statevector:
    amplitudes: np.ndarray
    n_qubits: int

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        if amps.shape != (1 << self.n_qubits,):
            raise ValueError(
                f"expected {1 << self.n_qubits} amplitudes for {self.n_qubits} qubits, got {amps.shape}"
            )
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, n_qubits: int) -> "Statevector":
        amps = np.zeros(1 << n_qubits)
        amps[0] = 1.0
        return cls(amps, n_qubits)

    @classmethod
    def basis(cls, n_qubits: int, index: int) -> "Statevector":
        amps = np.zeros(1 << n_qubits)
        amps[index] = 1.0
        return cls(amps, n_qubits)

    def probabilities(self) -> np.ndarray:
        return self.amplitudes * self.amplitudes

    def norm(self) -> float:
        return float(np.dot(self.amplitudes, self.amplitudes))


# -- in-place kernels on a flat float64 buffer --------------------------------

def _ry_inplace(psi: np.ndarray, n: int, qubit: int, angle: float) -> None:
    c, s = cos(angle / 2), sin(angle / 2)
    view = psi.reshape(1 << qubit, 2, 1 << (n - qubit - 1))
    a0 = view[:, 0, :].copy()
    a1 = view[:, 1, :]
    view[:, 0, :] = c * a0 - s * a1
    view[:, 1, :] = s * a0 + c * a1


def _ry_deriv(psi: np.ndarray, n: int, qubit: int, angle: float) -> np.ndarray:
    """Return dRy(angle)/d(angle) applied to ``psi`` (a new array)."""
    c, s = 0.5 * cos(angle / 2), 0.5 * sin(angle / 2)
    view = psi.reshape(1 << qubit, 2, 1 << (n - qubit - 1))
    out = np.empty_like(view)
    out[:, 0, :] = -s * view[:, 0, :] - c * view[:, 1, :]
    out[:, 1, :] = c * view[:, 0, :] - s * view[:, 1, :]
    return out.reshape(-1)


def _cnot_inplace(psi: np.ndarray, n: int, control: int, target: int) -> None:
    view = psi.reshape((2,) * n)
    idx0 = [slice(None)] * n
    idx1 = [slice(None)] * n
    idx0[control] = idx1[control] = 1
    idx0[target], idx1[target] = 0, 1
    idx0, idx1 = tuple(idx0), tuple(idx1)
    tmp = view[idx0].copy()
    view[idx0] = view[idx1]
    view[idx1] = tmp


def _check_qubit(q: int, n: int) -> None:
    if not 0 <= q < n:
        raise ValueError(f"qubit index {q} out of range for {n} qubits")


# -- public gate API -----------------------------------------------------------

def apply_ry(state: Statevector, qubit: int, angle: float) -> Statevector:
    _check_qubit(qubit, state.n_qubits)
    psi = state.amplitudes.copy()
    _ry_inplace(psi, state.n_qubits, qubit, float(angle))
    return Statevector(psi, state.n_qubits)


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    _check_qubit(control, state.n_qubits)
    _check_qubit(target, state.n_qubits)
    if control == target:
        raise ValueError(f"control and target must differ, both are {control}")
    psi = state.amplitudes.copy()
    _cnot_inplace(psi, state.n_qubits, control, target)
    return Statevector(psi, state.n_qubits)


# -- ansatz --------------------------------------------------------------------

def _as_phi(config: QnnConfig, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if phi.shape[0] != config.n_params:
        raise ValueError(
            f"phi has {phi.shape[0]} angles, config needs {config.n_params} "
            f"({config.n_qubits} qubits x {config.n_blocks} blocks)"
        )
    return phi


def _forward_inplace(psi: np.ndarray, config: QnnConfig, phi: np.ndarray) -> None:
    n = config.n_qubits
    for b in range(config.n_blocks):
        for q in range(n):
            _ry_inplace(psi, n, q, phi[b * n + q])
        for k in range(n - 1):
            _cnot_inplace(psi, n, k, k + 1)


def simulate(config: QnnConfig, phi) -> Statevector:
    """Run the block ansatz from |0...0> and return the final state.

    Each block is one Ry layer over qubits 0..N-1 in ascending order followed
    by the open CNOT chain k -> k+1. ``phi`` is ordered block-major.
    """
    phi = _as_phi(config, phi)
    psi = np.zeros(config.dim)
    psi[0] = 1.0
    _forward_inplace(psi, config, phi)
    return Statevector(psi, config.n_qubits)


def run_qnn(config: QnnConfig, phi) -> np.ndarray:
    return simulate(config, phi).probabilities()


def grad_probabilities(config: QnnConfig, phi, cotangent) -> np.ndarray:
    """Vector-Jacobian product of ``run_qnn`` with respect to ``phi``.

    Adjoint method: one forward pass, then a single reverse sweep that undoes
    each gate on the state and the adjoint vector while accumulating
    ``<lambda | dG | psi>`` for every rotation.
    """
    phi = _as_phi(config, phi)
    cot = np.asarray(cotangent, dtype=np.float64).reshape(-1)
    if cot.shape[0] != config.dim:
        raise ValueError(f"cotangent length {cot.shape[0]} != 2^N = {config.dim}")
    if not np.all(np.isfinite(cot)):
        raise ValueError("cotangent contains non-finite entries")

    n = config.n_qubits
    grad = np.zeros(config.n_params)
    if not np.any(cot):
        return grad

    psi = np.zeros(config.dim)
    psi[0] = 1.0
    _forward_inplace(psi, config, phi)
    # p = psi**2 so dL/dpsi = 2 * cot * psi
    lam = 2.0 * cot * psi

    for b in reversed(range(config.n_blocks)):
        for k in reversed(range(n - 1)):
            _cnot_inplace(psi, n, k, k + 1)
            _cnot_inplace(lam, n, k, k + 1)
        for q in reversed(range(n)):
            j = b * n + q
            _ry_inplace(psi, n, q, -phi[j])
            grad[j] = np.dot(lam, _ry_deriv(psi, n, q, phi[j]))
            _ry_inplace(lam, n, q, -phi[j])
    return grad


def grad_parameter_shift(config: QnnConfig, phi, param_index: int, basis_index: int) -> float:
    phi = _as_phi(config, phi)
    if not 0 <= param_index < config.n_params:
        raise ValueError(f"param_index {param_index} out of range [0, {config.n_params})")
    if not 0 <= basis_index < config.dim:
        raise ValueError(f"basis_index {basis_index} out of range [0, {config.dim})")
    plus = phi.copy()
    minus = phi.copy()
    plus[param_index] += pi / 2
    minus[param_index] -= pi / 2
    return float(run_qnn(config, plus)[basis_index] - run_qnn(config, minus)[basis_index]) / 2


def sample_shots(probabilities, n_shots: int, seed: int) -> np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if n_shots < 1:
        raise ValueError(f"n_shots must be positive, got {n_shots}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-8:
        raise ValueError(f"probabilities must be non-negative and sum to 1 (sum={p.sum()!r})")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n_shots, p / p.sum())
    return counts / n_shots
