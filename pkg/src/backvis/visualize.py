"""Saliency map, DeconvNet and guided backpropagation as one backward pass.

The three methods share every linear transpose (dense, conv, flatten,
pool routing) and differ only in how a gradient crosses a ReLU. Writing
R for the gradient arriving at the ReLU output and y for its recorded
pre-activation, the gradient leaving the ReLU is ``h(R) * g'(y)`` with

=========  ===========  ============
method     h(R)         g'(y)
=========  ===========  ============
saliency   R            1[y > 0]
deconvnet  max(R, 0)    1
gbp        max(R, 0)    1[y > 0]
=========  ===========  ============

Indicators are strict, so a zero pre-activation or a zero gradient blocks.
"""
from dataclasses import dataclass
import enum

import numpy as np

from . import kernels
from .network import Conv, Dense, Flatten, MaxPool, ReLU, check_trace
from .tensor import l2_norm, minmax_rescale


class VisMethod(enum.Enum):
    SALIENCY = "saliency"
    DECONVNET = "deconvnet"
    GBP = "gbp"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"sal": "saliency", "deconv": "deconvnet", "guided": "gbp"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown method {value!r}; choose saliency, deconvnet or gbp") from None

    @property
    def backward_relu(self):
        """True when negative top gradients are clamped (h = max(., 0))."""
        return self is not VisMethod.SALIENCY

    @property
    def forward_relu(self):
        """True when the pre-activation sign gates the gradient (g = ReLU)."""
        return self is not VisMethod.DECONVNET


METHODS = tuple(VisMethod)


def relu_rule(R, y, method):
    R = np.asarray(R, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = np.ones(np.broadcast(R, y).shape, dtype=bool)
    if method.backward_relu:
        keep &= R > 0
    if method.forward_relu:
        keep &= y > 0
    out = np.where(keep, R, 0.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class VisResult:
    map: np.ndarray
    raw: np.ndarray
    target_logit: int
    method: VisMethod
    z_k: float


def propagate(net, trace, seed, method, param_grads=False, record=False):
    """Push ``seed`` ([B, K] or [K]) from the logits back to the input.

    Returns ``(input_grad, grads, records)``: ``grads[l]`` is a tuple of
    parameter gradients for layer ``l`` (only with ``param_grads``), and
    ``records[l]`` is ``(R, T)`` for each ReLU layer (only with ``record``).
    """
    method = VisMethod.parse(method)
    check_trace(net, trace)
    g = np.asarray(seed, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    B = trace.batch_size
    if g.shape != (B, net.num_logits):
        raise ValueError(f"seed must have shape {(B, net.num_logits)}, got {g.shape}")
    grads = [()] * len(net.specs)
    records = {}
    for layer in reversed(range(len(net.specs))):
        spec = net.specs[layer]
        x_in = trace.inputs[layer]
        params = net.params[layer]
        if isinstance(spec, Dense):
            if param_grads:
                dw = x_in.T @ g
                grads[layer] = (dw, g.sum(axis=0)) if spec.bias else (dw,)
            g = g @ params[0].T
        elif isinstance(spec, Flatten):
            H, W, C = net.in_shape(layer)
            g = np.ascontiguousarray(g.reshape(B, C, H, W).transpose(0, 2, 3, 1))
        elif isinstance(spec, MaxPool):
            g = kernels.maxpool_backward(g, trace.argmax[layer], net.in_shape(layer))
        elif isinstance(spec, ReLU):
            t = relu_rule(g, x_in, method)
            if record:
                records[layer] = (g, t)
            g = t
        elif isinstance(spec, Conv):
            plan = net.plan(layer)
            G = g.reshape(B, plan.patch_count, spec.out_channels)
            w = params[0].reshape(plan.patch_size, spec.out_channels)
            if param_grads:
                patches = kernels.gather_patches(x_in.reshape(B, -1), plan.index)
                dw = np.einsum("bjp,bjn->pn", patches, G).reshape(params[0].shape)
                grads[layer] = (dw, G.sum(axis=(0, 1))) if spec.bias else (dw,)
            rows = G @ w.T
            g = kernels.scatter_patches(rows, plan.index, plan.input_size).reshape(
                (B,) + tuple(plan.input_dims))
    if not trace.batched:
        g = g[0]
    return g, grads, records


def backward(net, trace, k, method):
    """Visualization of logit ``k`` for the single input recorded in ``trace``."""
    method = VisMethod.parse(method)
    if trace.batched:
        raise ValueError("backward() visualizes one input; use propagate() for batches")
    K = net.num_logits
    if not 0 <= k < K:
        raise IndexError(f"target logit {k} out of range for {K} logits")
    seed = np.zeros(K)
    seed[k] = 1.0
    raw, _, _ = propagate(net, trace, seed, method)
    z = max(l2_norm(raw), 1.0)
    return VisResult(raw / z, raw, int(k), method, z)


def normalize_for_display(m):
    return minmax_rescale(m)
