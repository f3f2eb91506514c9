"""Fixed-architecture MLP deformation field with hand-written backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from numpy.typing import ArrayLike

from ..errors import DataError, NonFiniteError

DEFAULT_WIDTHS = (2,) + (512,) * 7 + (3,)
DEFAULT_SKIP_LAYER = 4
NEGATIVE_SLOPE = 0.01
# Rows are pushed through BLAS in zero-padded blocks of this many rows so that
# every sample sees an identically shaped gemm call; OpenBLAS switches kernels
# (and rounding) for very short matrices.
ROW_BLOCK = 512


def _matmul_rows(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    m = x.shape[0]
    out = np.empty((m, w.shape[1]), dtype=np.result_type(x, w))
    full = m - m % ROW_BLOCK
    for s in range(0, full, ROW_BLOCK):
        np.matmul(x[s:s + ROW_BLOCK], w, out=out[s:s + ROW_BLOCK])
    if full < m:
        pad = np.zeros((ROW_BLOCK, x.shape[1]), dtype=x.dtype)
        pad[: m - full] = x[full:]
        out[full:] = (pad @ w)[: m - full]
    if bias is not None:
        out += bias
    return out


def parameter_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


class DeformField:
    """phi: [0,1]^2 -> R^3, an MLP stored as one flat parameter vector.

    Layer ``k`` (1-based) computes ``z_k = h_{k-1} @ W_k + b_k``; hidden layers
    apply LeakyReLU, and layer ``skip_layer`` additionally adds its own input
    to its activated output. The last layer is linear.

    ``W_k`` and ``b_k`` are views into :attr:`params`, so optimisers update the
    flat vector in place.
    """

    def __init__(
        self,
        widths=DEFAULT_WIDTHS,
        *,
        skip_layer: int | None = DEFAULT_SKIP_LAYER,
        negative_slope: float = NEGATIVE_SLOPE,
        dtype=np.float32,
        params: ArrayLike | None = None,
        seed: int | None = 0,
    ):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2 or self.widths[0] != 2 or self.widths[-1] != 3:
            raise DataError(f"field must map 2 -> 3, got widths {self.widths}")
        n_layers = len(self.widths) - 1
        if skip_layer is not None:
            if not 1 <= skip_layer < n_layers:
                raise DataError(f"skip layer {skip_layer} must be a hidden layer")
            if self.widths[skip_layer - 1] != self.widths[skip_layer]:
                raise DataError("residual layer needs equal input and output width")
        self.skip_layer = skip_layer
        self.negative_slope = float(negative_slope)
        if not 0.0 <= self.negative_slope < 1.0:
            raise DataError("negative slope must lie in [0, 1)")
        self.dtype = np.dtype(dtype)
        n = parameter_count(self.widths)
        if params is None:
            self.params = np.empty(n, dtype=self.dtype)
            self.reset_parameters(seed)
        else:
            self.params = np.array(params, dtype=self.dtype).ravel()
        assert self.params.size == n, f"parameter vector has {self.params.size} entries, architecture needs {n}"
        self._bind_views()
        self._cache = None

    def _bind_views(self) -> None:
        self.weights, self.biases = [], []
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self.weights.append(self.params[off:off + a * b].reshape(a, b))
            off += a * b
            self.biases.append(self.params[off:off + b])
            off += b

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def reset_parameters(self, seed: int | None = 0) -> None:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        rng = np.random.Generator(np.random.Philox(seed))
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            bound = 1.0 / np.sqrt(a)
            k = a * b + b
            self.params[off:off + k] = rng.uniform(-bound, bound, size=k)
            off += k

    def copy(self) -> "DeformField":
        return DeformField(
            self.widths,
            skip_layer=self.skip_layer,
            negative_slope=self.negative_slope,
            dtype=self.dtype,
            params=self.params.copy(),
        )

    def forward(self, p: ArrayLike, *, cache: bool = True) -> np.ndarray:
        """Evaluate the field on an (N, 2) batch of square coordinates.

        Inputs outside [0, 1]^2 are evaluated as given (the network simply
        extrapolates). With ``cache`` the activations are kept for
        :meth:`backward`.
        """
        if not np.isfinite(self.params).all():
            raise NonFiniteError("field parameters are not finite")
        h = np.asarray(p, dtype=self.dtype).reshape(-1, 2)
        inputs, slopes = [], []
        s = self.negative_slope
        last = self.n_layers - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = _matmul_rows(h, W, b)
            if cache:
                inputs.append(h)
            if k == last:
                h = z
                break
            if cache:
                # mask of the units on the negative slope, used by backward
                neg = z > 0
                np.logical_not(neg, out=neg)
                slopes.append(neg)
            # LeakyReLU in place: max(z, s z) for 0 < s < 1
            np.maximum(z, z * self.dtype.type(s), out=z)
            if self.skip_layer is not None and k == self.skip_layer - 1:
                z += h
            h = z
        self._cache = (inputs, slopes) if cache else None
        return h

    __call__ = forward

    def backward(self, grad_out: ArrayLike) -> np.ndarray:
        """Gradient of sum_i <out_i, grad_out_i> w.r.t. :attr:`params`."""
        if self._cache is None:
            raise DataError("backward() needs a cached forward pass")
        inputs, slopes = self._cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != (inputs[0].shape[0], 3):
            raise DataError(f"output gradient has shape {g.shape}, expected {(inputs[0].shape[0], 3)}")
        grad = np.zeros_like(self.params)
        gw, gb = [], []
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            gw.append(grad[off:off + a * b].reshape(a, b))
            off += a * b
            gb.append(grad[off:off + b])
            off += b
        s = self.dtype.type(self.negative_slope)
        last = self.n_layers - 1
        skip = -1 if self.skip_layer is None else self.skip_layer - 1
        g_act = g
        for k in range(last, -1, -1):
            if k == last:
                gz = g_act
            else:
                # g_act is a fresh buffer except at the residual layer, which reuses it below
                gz = g_act.copy() if k == skip else g_act
                np.multiply(gz, s, out=gz, where=slopes[k])
            np.matmul(inputs[k].T, gz, out=gw[k])
            gb[k][:] = gz.sum(axis=0)
            if k == 0:
                break
            g_in = _matmul_rows(gz, self.weights[k].T)
            if k == skip:
                g_in += g_act
            g_act = g_in
        return grad


@dataclass
class Adam:
    """Adam with bias correction, updating a flat parameter vector in place."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = dc_field(default=None, repr=False)
    v: np.ndarray | None = dc_field(default=None, repr=False)

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * (grad * grad)
        mhat_scale = self.lr / (1 - self.beta1 ** t)
        vhat_scale = 1.0 / (1 - self.beta2 ** t)
        denom = np.sqrt(self.v * vhat_scale)
        denom += self.eps
        params -= (mhat_scale * self.m / denom).astype(params.dtype, copy=False)
