"""
Dense-tensor layers with hand-written reverse-mode adjoints.

Parameters live in one flat name -> ndarray mapping owned by the model;
layers are stateless descriptors that read their tensors by prefix. Every
forward returns a cache that its backward consumes (backpropagation
through time for the GRU). Sequences are laid out (batch, time, features)
in 64-bit floats.

Forward products are accumulated in a fixed order over the input
dimension, so each row of a batched forward is bitwise equal to the same
row run on its own.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

Params = Dict[str, np.ndarray]


class ShapeError(ValueError):
    """A tensor does not have the shape its layer declares."""


# -- Activations ------------------------------------------------------------------------

def sigmoid(x):
    """Logistic function, finite for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """log(1 + e^x) in the overflow-safe form max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def tanh(x):
    return np.tanh(np.asarray(x, dtype=np.float64))


def softplus_inverse(y: float) -> float:
    """Pre-activation giving softplus(x) == y, for y > 0."""
    return float(y + np.log(-np.expm1(-y)))


# -- Products ---------------------------------------------------------------------------

def ordered_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x (..., D) @ w (D, H), summed over D in index order."""
    out = np.zeros(x.shape[:-1] + (w.shape[1],))
    for i in range(w.shape[0]):
        out = out + x[..., i, None] * w[i]
    return out


def _flat_t(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Sum over all leading axes of outer(x, dy): the weight gradient of x @ W."""
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _check(name: str, array: np.ndarray, shape: Tuple[int, ...]):
    if array.shape != shape:
        raise ShapeError(f"{name}: expected shape {shape}, got {array.shape}")


# -- Dense ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    name: str
    in_features: int
    out_features: int

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            f"{self.name}.W": (self.in_features, self.out_features),
            f"{self.name}.b": (self.out_features,),
        }

    def forward(self, params: Params, x: np.ndarray):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected {self.in_features} input features, got {x.shape[-1]}")
        w = params[f"{self.name}.W"]
        return ordered_matmul(x, w) + params[f"{self.name}.b"], x

    def backward(self, params: Params, cache: np.ndarray, dy: np.ndarray):
        x = cache
        grads = {
            f"{self.name}.W": _flat_t(x, dy),
            f"{self.name}.b": dy.reshape(-1, dy.shape[-1]).sum(axis=0),
        }
        return dy @ params[f"{self.name}.W"].T, grads


# -- Convolution ------------------------------------------------------------------------

def conv1d_forward(x_seq: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Same-length, zero-padded 1-D convolution along the time axis.

    x_seq is (T, D_in) or (B, T, D_in); kernel is (K, D_in, F) with K odd.
    Output position t mixes inputs t - K//2 .. t + K//2.
    """
    squeeze = x_seq.ndim == 2
    x = x_seq[None] if squeeze else x_seq
    k_size, d_in, filters = kernel.shape
    if k_size % 2 == 0:
        raise ShapeError(f"conv kernel size must be odd, got {k_size}")
    if x.shape[-1] != d_in:
        raise ShapeError(f"conv: expected {d_in} input features, got {x.shape[-1]}")
    _check("conv bias", bias, (filters,))

    steps = x.shape[1]
    pad = k_size // 2
    xpad = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    y = np.zeros(x.shape[:2] + (filters,)) + bias
    for k in range(k_size):
        y = y + ordered_matmul(xpad[:, k:k + steps], kernel[k])
    return y[0] if squeeze else y


@dataclass(frozen=True)
class Conv1D:
    name: str
    in_features: int
    filters: int
    kernel_size: int

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {
            f"{self.name}.kernel": (self.kernel_size, self.in_features, self.filters),
            f"{self.name}.bias": (self.filters,),
        }

    def forward(self, params: Params, x: np.ndarray):
        y = conv1d_forward(x, params[f"{self.name}.kernel"], params[f"{self.name}.bias"])
        return y, x

    def backward(self, params: Params, cache: np.ndarray, dy: np.ndarray):
        x = cache
        kernel = params[f"{self.name}.kernel"]
        steps = x.shape[1]
        pad = self.kernel_size // 2
        xpad = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        dxpad = np.zeros_like(xpad)
        dkernel = np.zeros_like(kernel)
        for k in range(self.kernel_size):
            dkernel[k] = _flat_t(xpad[:, k:k + steps], dy)
            dxpad[:, k:k + steps] += dy @ kernel[k].T
        grads = {
            f"{self.name}.kernel": dkernel,
            f"{self.name}.bias": dy.sum(axis=(0, 1)),
        }
        return dxpad[:, pad:pad + steps], grads


# -- GRU --------------------------------------------------------------------------------

GATES = ("z", "r", "h")


@dataclass(frozen=True)
class GRULayer:
    """
    One-directional gated recurrent layer:

        z_t = sigmoid(x_t W_z + h_{t-1} U_z + b_z)
        r_t = sigmoid(x_t W_r + h_{t-1} U_r + b_r)
        g_t = tanh(x_t W_h + (r_t * h_{t-1}) U_h + b_h)
        h_t = (1 - z_t) * h_{t-1} + z_t * g_t
    """
    name: str
    in_features: int
    hidden: int

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for gate in GATES:
            shapes[f"{self.name}.W_{gate}"] = (self.in_features, self.hidden)
            shapes[f"{self.name}.U_{gate}"] = (self.hidden, self.hidden)
            shapes[f"{self.name}.b_{gate}"] = (self.hidden,)
        return shapes

    def _p(self, params: Params, key: str) -> np.ndarray:
        return params[f"{self.name}.{key}"]

    def forward(self, params: Params, x: np.ndarray, h0: Optional[np.ndarray] = None):
        if x.ndim != 3 or x.shape[-1] != self.in_features:
            raise ShapeError(f"{self.name}: expected (batch, time, {self.in_features}) input, got {x.shape}")
        batch, steps, _ = x.shape
        if steps < 1:
            raise ShapeError(f"{self.name}: empty sequence")
        h = np.zeros((batch, self.hidden)) if h0 is None else np.asarray(h0, dtype=np.float64)
        _check(f"{self.name} h0", h, (batch, self.hidden))

        W = {g: self._p(params, f"W_{g}") for g in GATES}
        U = {g: self._p(params, f"U_{g}") for g in GATES}
        b = {g: self._p(params, f"b_{g}") for g in GATES}

        h_prev_seq, z_seq, r_seq, g_seq, hs = [], [], [], [], []
        for t in range(steps):
            x_t = x[:, t]
            z = sigmoid(ordered_matmul(x_t, W["z"]) + ordered_matmul(h, U["z"]) + b["z"])
            r = sigmoid(ordered_matmul(x_t, W["r"]) + ordered_matmul(h, U["r"]) + b["r"])
            g = np.tanh(ordered_matmul(x_t, W["h"]) + ordered_matmul(r * h, U["h"]) + b["h"])
            h_prev_seq.append(h)
            z_seq.append(z)
            r_seq.append(r)
            g_seq.append(g)
            h = (1.0 - z) * h + z * g
            hs.append(h)

        cache = (x, h_prev_seq, z_seq, r_seq, g_seq)
        return np.stack(hs, axis=1), cache

    def backward(self, params: Params, cache, dh_seq: np.ndarray):
        """
        Backpropagation through time.

        Returns (dx, grads, dh0) for the adjoint `dh_seq` of every hidden state.
        """
        x, h_prev_seq, z_seq, r_seq, g_seq = cache
        W = {g: self._p(params, f"W_{g}") for g in GATES}
        U = {g: self._p(params, f"U_{g}") for g in GATES}
        grads = {f"{self.name}.{k}": np.zeros_like(self._p(params, k)) for k in
                 [f"{p}_{g}" for g in GATES for p in ("W", "U", "b")]}

        dx = np.zeros_like(x)
        carry = np.zeros_like(h_prev_seq[0])
        for t in reversed(range(x.shape[1])):
            h_prev, z, r, g = h_prev_seq[t], z_seq[t], r_seq[t], g_seq[t]
            x_t = x[:, t]
            dh = dh_seq[:, t] + carry

            dg = dh * z
            dz = dh * (g - h_prev)
            dh_prev = dh * (1.0 - z)

            da_h = dg * (1.0 - g * g)
            rh = r * h_prev
            drh = da_h @ U["h"].T
            dr = drh * h_prev
            dh_prev = dh_prev + drh * r

            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)

            for gate, da, h_in in (("h", da_h, rh), ("r", da_r, h_prev), ("z", da_z, h_prev)):
                grads[f"{self.name}.W_{gate}"] += x_t.T @ da
                grads[f"{self.name}.U_{gate}"] += h_in.T @ da
                grads[f"{self.name}.b_{gate}"] += da.sum(axis=0)
                dx[:, t] += da @ W[gate].T

            dh_prev = dh_prev + da_r @ U["r"].T + da_z @ U["z"].T
            carry = dh_prev

        return dx, grads, carry


def gru_layer_forward(x_seq: np.ndarray, h0: Optional[np.ndarray], params: Params,
                      name: str = "gru") -> np.ndarray:
    """
    Run one GRU layer over an unbatched (T, D_in) sequence and return all
    hidden states (T, H). h0 defaults to zeros.
    """
    w_z = params[f"{name}.W_z"]
    layer = GRULayer(name=name, in_features=w_z.shape[0], hidden=w_z.shape[1])
    for key, shape in layer.param_shapes().items():
        _check(key, params[key], shape)
    h = None if h0 is None else np.asarray(h0, dtype=np.float64).reshape(1, -1)
    h_seq, _ = layer.forward(params, np.asarray(x_seq, dtype=np.float64)[None], h)
    return h_seq[0]


# -- Initialisation ---------------------------------------------------------------------

def glorot_uniform(shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); conv kernels count taps."""
    if len(shape) == 3:
        taps, d_in, d_out = shape
        fan_in, fan_out = taps * d_in, taps * d_out
    else:
        fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator) -> Params:
    """Glorot-uniform weights, zero biases, drawn in sorted name order."""
    params = {}
    for key in sorted(shapes):
        shape = shapes[key]
        params[key] = np.zeros(shape) if len(shape) == 1 else glorot_uniform(shape, rng)
    return params
