"""Functional 1-D CNN (parameters passed in as one flat vector), BCE loss, Adam.

Input windows have shape (window, n_features). The window frames act as the
input channels of the first convolution, which slides along the feature axis:

    conv1 -> ReLU -> maxpool2 -> conv2 -> ReLU -> maxpool2
          -> flatten -> fc1 -> ReLU -> fc2 -> sigmoid
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-12

# layer groups shared by the scaling model: weights and bias of a layer share a group
GROUPS = ("conv1", "conv2", "fc1", "fc2")


class NumericError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class CnnArchitecture:
    window: int = 5
    n_features: int = 26
    conv1_channels: int = 13
    conv1_kernel: int = 3
    conv2_channels: int = 2
    conv2_kernel: int = 3
    hidden: int = 257

    def __post_init__(self):
        if self.window < 1 or self.n_features < 1:
            raise ValueError("window and n_features must be positive")
        if self.conv2_length < 1:
            raise ValueError(
                f"feature width {self.n_features} too short for kernels "
                f"{self.conv1_kernel}/{self.conv2_kernel} with two 2x pools"
            )

    @property
    def conv1_length(self) -> int:
        return self.n_features - self.conv1_kernel + 1

    @property
    def conv2_length(self) -> int:
        return self.conv1_length // 2 - self.conv2_kernel + 1

    @property
    def flat_size(self) -> int:
        return self.conv2_channels * (self.conv2_length // 2)

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        """(group, name, shape) for every tensor, in flattened theta order."""
        c1, c2 = self.conv1_channels, self.conv2_channels
        return [
            ("conv1", "conv1.weight", (c1, self.window, self.conv1_kernel)),
            ("conv1", "conv1.bias", (c1,)),
            ("conv2", "conv2.weight", (c2, c1, self.conv2_kernel)),
            ("conv2", "conv2.bias", (c2,)),
            ("fc1", "fc1.weight", (self.hidden, self.flat_size)),
            ("fc1", "fc1.bias", (self.hidden,)),
            ("fc2", "fc2.weight", (1, self.hidden)),
            ("fc2", "fc2.bias", (1,)),
        ]

    def group_sizes(self) -> tuple[int, ...]:
        sizes = dict.fromkeys(GROUPS, 0)
        for group, _, shape in self.layer_shapes():
            sizes[group] += int(np.prod(shape))
        return tuple(sizes[g] for g in GROUPS)

    def group_fan_in(self) -> tuple[int, ...]:
        return (self.window * self.conv1_kernel, self.conv1_channels * self.conv2_kernel,
                self.flat_size, self.hidden)

    def to_dict(self) -> dict:
        return asdict(self)


def count_layer_params(shapes) -> int:
    return sum(int(np.prod(s)) for s in shapes)


def count_cnn_params(arch: CnnArchitecture) -> int:
    return count_layer_params(shape for _, _, shape in arch.layer_shapes())


def unflatten(arch: CnnArchitecture, theta) -> dict[str, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    m = count_cnn_params(arch)
    if theta.shape[0] != m:
        raise ValueError(f"theta has {theta.shape[0]} entries, architecture needs {m}")
    out, pos = {}, 0
    for _, name, shape in arch.layer_shapes():
        size = int(np.prod(shape))
        out[name] = theta[pos:pos + size].reshape(shape)
        pos += size
    return out


def flatten(arch: CnnArchitecture, tensors: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([tensors[name].reshape(-1) for _, name, _ in arch.layer_shapes()])


def init_theta(arch: CnnArchitecture, seed: int) -> np.ndarray:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for _, name, shape in arch.layer_shapes():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in) if fan_in else 0.0
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return flatten(arch, tensors)


# -- layers --------------------------------------------------------------------

def _conv_forward(x, w, b):
    # x: (B, C_in, L), w: (C_out, C_in, k) -> (B, C_out, L - k + 1)
    k = w.shape[2]
    cols = sliding_window_view(x, k, axis=2)  # (B, C_in, L_out, k)
    return np.einsum("bclk,ock->bol", cols, w, optimize=True) + b[None, :, None], cols


def _conv_backward(dout, cols, w, x_shape):
    dw = np.einsum("bol,bclk->ock", dout, cols, optimize=True)
    db = dout.sum(axis=(0, 2))
    k = w.shape[2]
    l_out = dout.shape[2]
    dx = np.zeros(x_shape)
    contrib = np.einsum("bol,ock->bclk", dout, w, optimize=True)
    for j in range(k):
        dx[:, :, j:j + l_out] += contrib[:, :, :, j]
    return dx, dw, db


def _pool_forward(x):
    # floor on odd lengths: the trailing element is dropped
    n = x.shape[2] // 2
    pairs = x[:, :, : 2 * n].reshape(x.shape[0], x.shape[1], n, 2)
    pick = pairs.argmax(axis=3)
    return np.take_along_axis(pairs, pick[..., None], axis=3)[..., 0], pick


def _pool_backward(dout, pick, x_shape):
    n = dout.shape[2]
    dpairs = np.zeros((x_shape[0], x_shape[1], n, 2))
    np.put_along_axis(dpairs, pick[..., None], dout[..., None], axis=3)
    dx = np.zeros(x_shape)
    dx[:, :, : 2 * n] = dpairs.reshape(x_shape[0], x_shape[1], 2 * n)
    return dx


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _check_batch(arch: CnnArchitecture, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (arch.window, arch.n_features):
        raise ValueError(
            f"batch must have shape (B, {arch.window}, {arch.n_features}), got {x.shape}"
        )
    return x


def _forward(arch, theta, batch):
    p = unflatten(arch, theta)
    x = _check_batch(arch, batch)
    z1, cols1 = _conv_forward(x, p["conv1.weight"], p["conv1.bias"])
    a1 = np.maximum(z1, 0.0)
    h1, pick1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(h1, p["conv2.weight"], p["conv2.bias"])
    a2 = np.maximum(z2, 0.0)
    h2, pick2 = _pool_forward(a2)
    flat = h2.reshape(x.shape[0], -1)
    z3 = flat @ p["fc1.weight"].T + p["fc1.bias"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["fc2.weight"][0] + p["fc2.bias"][0]
    cache = dict(p=p, x=x, z1=z1, cols1=cols1, a1=a1, pick1=pick1, h1=h1, z2=z2, cols2=cols2,
                 a2=a2, pick2=pick2, h2=h2, flat=flat, z3=z3, a3=a3)
    return logits, cache


def cnn_forward(arch: CnnArchitecture, theta, batch) -> np.ndarray:
    """Per-sample probability of class 1."""
    logits, _ = _forward(arch, theta, batch)
    return _sigmoid(logits)


def bce_loss(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise ValueError(f"label/prediction length mismatch: {y.shape[0]} vs {y_hat.shape[0]}")
    if y.size == 0:
        raise ValueError("empty batch")
    p = np.clip(y_hat, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def _check_labels(labels, n) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.shape[0] != n:
        raise ValueError(f"{y.shape[0]} labels for a batch of {n}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def cnn_backward(arch: CnnArchitecture, theta, batch, labels) -> tuple[float, np.ndarray]:
    """Mean BCE loss over the batch and its gradient with respect to theta."""
    logits, c = _forward(arch, theta, batch)
    y = _check_labels(labels, logits.shape[0])
    y_hat = _sigmoid(logits)
    loss = bce_loss(y, y_hat)
    p = c["p"]
    bsz = logits.shape[0]

    dlogit = (y_hat - y) / bsz
    g = {
        "fc2.weight": (dlogit @ c["a3"])[None, :],
        "fc2.bias": np.array([dlogit.sum()]),
    }
    dz3 = np.outer(dlogit, p["fc2.weight"][0]) * (c["z3"] > 0)
    g["fc1.weight"] = dz3.T @ c["flat"]
    g["fc1.bias"] = dz3.sum(axis=0)
    dh2 = (dz3 @ p["fc1.weight"]).reshape(c["h2"].shape)
    dz2 = _pool_backward(dh2, c["pick2"], c["a2"].shape) * (c["z2"] > 0)
    dh1, g["conv2.weight"], g["conv2.bias"] = _conv_backward(dz2, c["cols2"], p["conv2.weight"], c["h1"].shape)
    dz1 = _pool_backward(dh1, c["pick1"], c["a1"].shape) * (c["z1"] > 0)
    _, g["conv1.weight"], g["conv1.bias"] = _conv_backward(dz1, c["cols1"], p["conv1.weight"], c["x"].shape)
    return loss, flatten(arch, g)


# -- optimizer -----------------------------------------------------------------

@dataclass
class TrainState:
    """Adam moment accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "TrainState":
        return cls(m=np.zeros(n), v=np.zeros(n), lr=lr, **kw)


def adam_step(state: TrainState, params, grads) -> tuple[np.ndarray, TrainState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NumericError(
            f"non-finite gradient at step {state.step + 1}: {idx.size} entries, first index {idx[0]}"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grads * grads)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = TrainState(m=m, v=v, step=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return new_params, new_state
