"""Layer specs, parameter initialization, forward pass and persistence."""
from dataclasses import dataclass, field, replace
import struct

import numpy as np

from . import kernels
from .tensor import PatchPlan, RngSpec, ShapeError, sample


class SpecError(ValueError):
    """Raised for layer sequences that do not compose."""


@dataclass(frozen=True)
class Conv:
    kernel: tuple
    out_channels: int
    stride: int = 1
    padding: str = "valid"
    bias: bool = False

    def __post_init__(self):
        k = self.kernel
        object.__setattr__(self, "kernel", (int(k), int(k)) if np.isscalar(k) else tuple(int(v) for v in k))


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: tuple
    stride: tuple = None

    def __post_init__(self):
        w = self.window
        w = (int(w), int(w)) if np.isscalar(w) else tuple(int(v) for v in w)
        s = self.stride
        s = w if s is None else ((int(s), int(s)) if np.isscalar(s) else tuple(int(v) for v in s))
        object.__setattr__(self, "window", w)
        object.__setattr__(self, "stride", s)


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int
    bias: bool = False


PARAMETERIZED = (Conv, Dense)


def _describe(spec):
    return spec_to_line(spec)


def infer_shapes(specs, input_shape):
    """Output shape of every layer; raises SpecError naming the offending pair."""
    specs = tuple(specs)
    if not specs:
        raise SpecError("network needs at least one layer")
    if not isinstance(specs[-1], Dense):
        raise SpecError(f"last layer must be Dense (the logits), got {_describe(specs[-1])}")
    shapes = []
    shape = tuple(int(v) for v in input_shape)
    for i, spec in enumerate(specs):
        prev = "input" if i == 0 else _describe(specs[i - 1])
        where = f"layer {i - 1} ({prev}) -> layer {i} ({_describe(spec)})"
        if isinstance(spec, Conv):
            if len(shape) != 3:
                raise SpecError(f"{where}: conv needs an HxWxC input, got {shape}")
            try:
                plan = PatchPlan.build(shape, spec.kernel, spec.stride, spec.padding)
            except ShapeError as exc:
                raise SpecError(f"{where}: {exc}") from None
            shape = plan.out_dims + (spec.out_channels,)
        elif isinstance(spec, MaxPool):
            if len(shape) != 3:
                raise SpecError(f"{where}: max-pool needs an HxWxC input, got {shape}")
            (wh, ww), (sh, sw) = spec.window, spec.stride
            if wh > shape[0] or ww > shape[1] or min(wh, ww, sh, sw) < 1:
                raise SpecError(f"{where}: pool window {spec.window} does not fit {shape}")
            shape = ((shape[0] - wh) // sh + 1, (shape[1] - ww) // sw + 1, shape[2])
        elif isinstance(spec, Flatten):
            if len(shape) != 3:
                raise SpecError(f"{where}: flatten needs an HxWxC input, got {shape}")
            shape = (int(np.prod(shape)),)
        elif isinstance(spec, Dense):
            if len(shape) != 1:
                raise SpecError(f"{where}: dense needs a flat input, got {shape}; add Flatten")
            shape = (spec.out_features,)
        elif not isinstance(spec, ReLU):
            raise SpecError(f"unknown layer spec {spec!r}")
        shapes.append(shape)
    return shapes


def param_shapes(specs, input_shape):
    """Per layer, the list of parameter shapes (weight first, then bias)."""
    shapes = infer_shapes(specs, input_shape)
    out = []
    for i, spec in enumerate(specs):
        in_shape = tuple(input_shape) if i == 0 else shapes[i - 1]
        if isinstance(spec, Conv):
            group = [spec.kernel + (in_shape[2], spec.out_channels)]
            n_out = spec.out_channels
        elif isinstance(spec, Dense):
            group = [(in_shape[0], spec.out_features)]
            n_out = spec.out_features
        else:
            out.append([])
            continue
        out.append(group + [(n_out,)] if spec.bias else group)
    return out


@dataclass(frozen=True, eq=False)
class Network:
    specs: tuple
    input_shape: tuple
    params: tuple
    init: RngSpec = None
    trained: bool = False
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "shapes", tuple(infer_shapes(self.specs, self.input_shape)))
        params = tuple(tuple(p) for p in self.params)
        if len(params) != len(self.specs):
            raise SpecError(f"{len(params)} parameter groups for {len(self.specs)} layers")
        for i, (p, expected) in enumerate(zip(params, param_shapes(self.specs, self.input_shape))):
            got = [np.shape(a) for a in p]
            if got != expected:
                raise ShapeError(f"layer {i} parameters", expected, got)
        object.__setattr__(self, "params", params)

    @property
    def num_logits(self):
        return self.specs[-1].out_features

    def in_shape(self, layer):
        return self.input_shape if layer == 0 else self.shapes[layer - 1]

    def plan(self, layer):
        spec = self.specs[layer]
        return PatchPlan.build(self.in_shape(layer), spec.kernel, spec.stride, spec.padding)

    def param_shapes(self, layer):
        return param_shapes(self.specs, self.input_shape)[layer]

    @property
    def has_bias(self):
        return any(getattr(s, "bias", False) for s in self.specs)

    def layers_of(self, kind):
        return [i for i, s in enumerate(self.specs) if isinstance(s, kind)]

    def with_params(self, params, trained=None):
        return replace(self, params=tuple(params),
                       trained=self.trained if trained is None else trained)

    def param_count(self):
        return sum(a.size for p in self.params for a in p)


def build(specs, input_shape, init):
    """Sample every weight tensor i.i.d. from ``init``.

    Layer ``l`` draws from ``init.child(l)``, so a layer's weights do not
    depend on the sizes of the others. Biases, when enabled, start at zero.
    """
    specs = tuple(specs)
    params = []
    for i, (spec, shapes) in enumerate(zip(specs, param_shapes(specs, input_shape))):
        group = [sample(init.child(i), shapes[0])] if shapes else []
        if len(shapes) == 2:
            group.append(np.zeros(shapes[1]))
        params.append(tuple(group))
    return Network(specs, input_shape, params, init=init)


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Per-layer inputs and outputs of one forward pass (batched internally).

    For a ReLU layer ``inputs[l]`` is the pre-activation y and
    ``outputs[l]`` the activation o. ``argmax[l]`` holds, for each pooling
    window of layer ``l``, the flat per-image index of the selected element.
    """

    inputs: tuple
    outputs: tuple
    argmax: dict
    batched: bool

    @property
    def logits(self):
        out = self.outputs[-1]
        return out if self.batched else out[0]

    @property
    def batch_size(self):
        return self.inputs[0].shape[0]

    def pre_activation(self, layer):
        out = self.inputs[layer]
        return out if self.batched else out[0]


def _layer_forward(net, layer, h):
    spec = net.specs[layer]
    p = net.params[layer]
    B = h.shape[0]
    if isinstance(spec, Conv):
        plan = net.plan(layer)
        patches = kernels.gather_patches(h.reshape(B, -1), plan.index)
        out = patches @ p[0].reshape(plan.patch_size, spec.out_channels)
        if spec.bias:
            out = out + p[1]
        return out.reshape((B,) + net.shapes[layer]), None
    if isinstance(spec, ReLU):
        return np.maximum(h, 0.0), None
    if isinstance(spec, MaxPool):
        return kernels.maxpool_forward(h, spec.window, spec.stride)
    if isinstance(spec, Flatten):
        # channel-major order: position (c, h, w) -> c*H*W + h*W + w, so that a
        # conv output flattens to the per-filter, per-patch indexing i*J + j
        return np.ascontiguousarray(h.transpose(0, 3, 1, 2)).reshape(B, -1), None
    out = h @ p[0]
    if spec.bias:
        out = out + p[1]
    return out, None


def forward(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        h, batched = x[None], False
    elif x.ndim == len(net.input_shape) + 1 and x.shape[1:] == net.input_shape:
        h, batched = x, True
    else:
        raise ShapeError("network input", net.input_shape, x.shape)
    inputs, outputs, argmax = [], [], {}
    for layer in range(len(net.specs)):
        inputs.append(h)
        h, arg = _layer_forward(net, layer, h)
        if arg is not None:
            argmax[layer] = arg
        outputs.append(h)
    return ForwardTrace(tuple(inputs), tuple(outputs), argmax, batched)


def replay(net, trace):
    """Recompute every layer from its recorded input; returns the logits."""
    check_trace(net, trace)
    for layer in range(len(net.specs)):
        out, arg = _layer_forward(net, layer, trace.inputs[layer])
        if not np.array_equal(out, trace.outputs[layer]):
            raise AssertionError(f"layer {layer} output differs on replay")
        if arg is not None and not np.array_equal(arg, trace.argmax[layer]):
            raise AssertionError(f"layer {layer} pooling argmax differs on replay")
    return trace.logits


def check_trace(net, trace):
    if len(trace.inputs) != len(net.specs):
        raise ValueError(f"trace has {len(trace.inputs)} layers, network has {len(net.specs)}")
    for layer, out in enumerate(trace.outputs):
        if out.shape[1:] != net.shapes[layer]:
            raise ShapeError(f"trace layer {layer}", net.shapes[layer], out.shape[1:])


@dataclass(frozen=True)
class UpTo:
    """Trained parameters for layers ``<= layer``, random ones after it."""
    layer: int


@dataclass(frozen=True)
class ExceptFor:
    """Trained parameters everywhere except ``layer``."""
    layer: int


def splice_weights(trained, random, mode):
    if trained.specs != random.specs or trained.input_shape != random.input_shape:
        raise SpecError("splice needs two networks with identical specs")
    layer = mode.layer
    if not 0 <= layer < len(trained.specs):
        raise IndexError(f"layer {layer} out of range for {len(trained.specs)} layers")
    if not isinstance(trained.specs[layer], PARAMETERIZED):
        raise SpecError(f"layer {layer} ({_describe(trained.specs[layer])}) has no parameters")
    if isinstance(mode, UpTo):
        use_trained = [i <= layer for i in range(len(trained.specs))]
    elif isinstance(mode, ExceptFor):
        use_trained = [i != layer for i in range(len(trained.specs))]
    else:
        raise TypeError(f"unknown splice mode {mode!r}")
    params = [t if keep else r for t, r, keep in zip(trained.params, random.params, use_trained)]
    return replace(trained, params=tuple(params), trained=True)


# --- text form of layer specs -------------------------------------------------

def spec_to_line(spec):
    if isinstance(spec, Conv):
        return (f"conv {spec.kernel[0]} {spec.kernel[1]} {spec.out_channels} "
                f"{spec.stride} {spec.padding} {int(spec.bias)}")
    if isinstance(spec, ReLU):
        return "relu"
    if isinstance(spec, MaxPool):
        return f"maxpool {spec.window[0]} {spec.window[1]} {spec.stride[0]} {spec.stride[1]}"
    if isinstance(spec, Flatten):
        return "flatten"
    if isinstance(spec, Dense):
        return f"dense {spec.out_features} {int(spec.bias)}"
    raise SpecError(f"unknown layer spec {spec!r}")


def spec_from_line(line):
    parts = line.split()
    if not parts:
        raise SpecError("empty layer line")
    kind, args = parts[0], parts[1:]
    try:
        if kind == "conv":
            kh, kw, n, s, pad, b = args
            return Conv((int(kh), int(kw)), int(n), int(s), pad, bool(int(b)))
        if kind == "relu" and not args:
            return ReLU()
        if kind == "maxpool":
            wh, ww, sh, sw = (int(a) for a in args)
            return MaxPool((wh, ww), (sh, sw))
        if kind == "flatten" and not args:
            return Flatten()
        if kind == "dense":
            k, b = args
            return Dense(int(k), bool(int(b)))
    except ValueError:
        pass
    raise SpecError(f"cannot parse layer line {line!r}")


# --- binary container ------------------------------------------------------------

MAGIC = b"BVNET1"


def save(net, path):
    lines = [MAGIC.decode(), "input " + " ".join(str(v) for v in net.input_shape)]
    if net.init is None:
        lines.append("init none")
    else:
        i = net.init
        lines.append(f"init {i.kind} {i.mean!r} {i.std!r} {i.seed}")
    lines.append(f"trained {int(net.trained)}")
    lines.append(f"layers {len(net.specs)}")
    lines.extend(spec_to_line(s) for s in net.specs)
    arrays = [a for p in net.params for a in p]
    lines.append(f"params {len(arrays)}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def next_line():
        nonlocal pos
        end = blob.index(b"\n", pos)
        line = blob[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        if next_line() != MAGIC.decode():
            raise ValueError(f"{path}: not a network file (bad magic)")
        key, *dims = next_line().split()
        input_shape = tuple(int(v) for v in dims)
        init_parts = next_line().split()
        init = None
        if init_parts[1] != "none":
            init = RngSpec(int(init_parts[4]), init_parts[1], float(init_parts[2]), float(init_parts[3]))
        trained = bool(int(next_line().split()[1]))
        n_layers = int(next_line().split()[1])
        specs = [spec_from_line(next_line()) for _ in range(n_layers)]
        n_arrays = int(next_line().split()[1])
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            count = int(np.prod(shape))
            a = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64)
            pos += 8 * count
            arrays.append(a.reshape(shape))
    except (IndexError, struct.error) as exc:
        raise ValueError(f"{path}: truncated or malformed network file ({exc})") from None
    if pos != len(blob):
        raise ValueError(f"{path}: {len(blob) - pos} trailing bytes")
    it = iter(arrays)
    params = [tuple(next(it) for _ in shapes) for shapes in param_shapes(specs, input_shape)]
    return Network(specs, input_shape, params, init=init, trained=trained)


# --- architectures used by the experiments ---------------------------------------

def three_layer_cnn(filter_size=7, n_filters=256, stride=2, n_logits=10, pool=None):
    """Conv -> ReLU [-> MaxPool] -> Flatten -> Dense, bias-free."""
    specs = [Conv(filter_size, n_filters, stride), ReLU()]
    if pool:
        specs.append(MaxPool(pool))
    return specs + [Flatten(), Dense(n_logits)]


def fcn(hidden, n_logits=10):
    return [Flatten(), Dense(hidden), ReLU(), Dense(n_logits)]


def deep_cnn(channels=(256, 128, 128, 128, 128), filter_size=3, pool_after=(1, 2, 3, 4),
             n_logits=10, padding="same"):
    """Stack of 3x3 conv/ReLU blocks with 2x2 pooling after the listed blocks."""
    specs = []
    for i, ch in enumerate(channels):
        specs += [Conv(filter_size, ch, 1, padding), ReLU()]
        if i in pool_after:
            specs.append(MaxPool(2))
    return specs + [Flatten(), Dense(n_logits)]


def tiny_cnn(n_logits=4, channels=(8, 8, 16, 16)):
    """Four 3x3 conv/ReLU layers with three 2x2 pools, for 32x32x1 inputs."""
    a, b, c, d = channels
    return [Conv(3, a, padding="same", bias=True), ReLU(),
            Conv(3, b, padding="same", bias=True), ReLU(), MaxPool(2),
            Conv(3, c, padding="same", bias=True), ReLU(), MaxPool(2),
            Conv(3, d, padding="same", bias=True), ReLU(), MaxPool(2),
            Flatten(), Dense(n_logits, bias=True)]
