"""Patch plans, seeded sampling and small vector helpers.

Tensors are plain C-contiguous ``float64`` numpy arrays. Images use HWC
layout and filter banks use ``[kH, kW, Cin, Cout]``; a patch is read in
``(kh, kw, c)`` order so that it lines up with a reshaped filter column.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape an operation expects."""

    def __init__(self, what, expected, actual):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


@dataclass(frozen=True, eq=False)
class PatchPlan:
    """Receptive-field bookkeeping for one convolution geometry.

    ``index[j]`` lists the flat input positions read by patch ``j`` (the rows
    selected by D_j); ``-1`` marks a zero-padding tap.
    """

    input_dims: tuple
    filter_dims: tuple
    stride: int
    padding: str
    out_dims: tuple
    index: np.ndarray

    @property
    def patch_count(self):
        return self.index.shape[0]

    @property
    def patch_size(self):
        return self.index.shape[1]

    @property
    def input_size(self):
        H, W, C = self.input_dims
        return H * W * C

    @classmethod
    def build(cls, input_dims, filter_dims, stride=1, padding="valid"):
        return _build_plan(tuple(int(v) for v in input_dims),
                           tuple(int(v) for v in filter_dims), int(stride), padding)

    @classmethod
    def line(cls, d, p, stride=1, padding="valid"):
        """A 1-D plan over a length-``d`` signal with width-``p`` patches."""
        return cls.build((1, d, 1), (1, p), stride, padding)

    def coverage(self):
        """Number of patches that read each input position."""
        idx = self.index[self.index >= 0]
        return np.bincount(idx, minlength=self.input_size).astype(np.float64)

    def selection_matrix(self, j):
        """Dense p x d matrix D_j for patch ``j``."""
        D = np.zeros((self.patch_size, self.input_size))
        for t, k in enumerate(self.index[j]):
            if k >= 0:
                D[t, k] = 1.0
        return D


def _out_extent(n, k, s, padding):
    if padding == "valid":
        if k > n:
            return 0, 0
        return (n - k) // s + 1, 0
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2


@lru_cache(maxsize=128)
def _build_plan(input_dims, filter_dims, stride, padding):
    if padding not in ("valid", "same"):
        raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    H, W, C = input_dims
    kH, kW = filter_dims
    Ho, pad_h = _out_extent(H, kH, stride, padding)
    Wo, pad_w = _out_extent(W, kW, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError("filter larger than input", (kH, kW), (H, W))
    oh, ow = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
    a, e, c = np.meshgrid(np.arange(kH), np.arange(kW), np.arange(C), indexing="ij")
    rows = oh.reshape(-1, 1) * stride - pad_h + a.reshape(1, -1)
    cols = ow.reshape(-1, 1) * stride - pad_w + e.reshape(1, -1)
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    index = np.where(inside, (rows * W + cols) * C + c.reshape(1, -1), -1).astype(np.intp)
    index.setflags(write=False)
    return PatchPlan(input_dims, filter_dims, stride, padding, (Ho, Wo), index)


def _as_batch(x, plan):
    x = np.asarray(x, dtype=np.float64)
    d = plan.input_size
    if x.shape == tuple(plan.input_dims) or (x.ndim == 1 and x.size == d):
        return x.reshape(1, d), False
    if x.ndim >= 2 and x.shape[1:] in (tuple(plan.input_dims), (d,)):
        return x.reshape(x.shape[0], d), True
    raise ShapeError("input does not match patch plan", plan.input_dims, x.shape)


def gather_patches(x, plan):
    """Patch matrix [J, p] (or [B, J, p] for a batch) with row j = D_j x."""
    xb, batched = _as_batch(x, plan)
    out = kernels.gather_patches(xb, plan.index)
    return out if batched else out[0]


def scatter_patches(rows, plan):
    """Sum_j D_j^T rows_j, returned in the plan's input shape."""
    rows = np.asarray(rows, dtype=np.float64)
    J, p = plan.index.shape
    if rows.shape == (J, p):
        return kernels.scatter_patches(rows[None], plan.index, plan.input_size)[0].reshape(
            plan.input_dims)
    if rows.ndim == 3 and rows.shape[1:] == (J, p):
        out = kernels.scatter_patches(rows, plan.index, plan.input_size)
        return out.reshape((rows.shape[0],) + tuple(plan.input_dims))
    raise ShapeError("patch rows do not match plan", (J, p), rows.shape)


@dataclass(frozen=True)
class RngSpec:
    """Seeded weight distribution.

    ``kind`` is ``"gaussian"`` or ``"truncated"``; the truncated variant
    redraws any value further than two standard deviations from the mean.
    """

    seed: int
    kind: str = "truncated"
    mean: float = 0.0
    std: float = 0.1

    def __post_init__(self):
        if self.kind not in ("gaussian", "truncated"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if not self.std > 0:
            raise ValueError(f"std must be positive, got {self.std}")

    def child(self, key):
        """Independent stream derived from this seed and an integer key."""
        state = np.random.SeedSequence([self.seed & (2**63 - 1), int(key)]).generate_state(1, np.uint64)
        return RngSpec(int(state[0] >> np.uint64(1)), self.kind, self.mean, self.std)

    def with_seed(self, seed):
        return RngSpec(int(seed), self.kind, self.mean, self.std)


def sample(spec, shape):
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal(shape)
    if spec.kind == "truncated":
        bad = np.abs(z) > 2.0
        n_bad = int(bad.sum())
        while n_bad:
            z[bad] = rng.standard_normal(n_bad)
            bad = np.abs(z) > 2.0
            n_bad = int(bad.sum())
    return spec.mean + spec.std * z


def l2_norm(a):
    return float(np.sqrt(np.sum(np.square(a))))


def cosine(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def unit(a):
    n = l2_norm(a)
    return np.asarray(a, dtype=np.float64) / n if n > 0 else np.zeros_like(a, dtype=np.float64)


def minmax_rescale(a):
    """Affine map of the whole tensor onto [0, 1]; a constant tensor maps to 0.5."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if not hi > lo:
        return np.full_like(a, 0.5)
    return (a - lo) / (hi - lo)
