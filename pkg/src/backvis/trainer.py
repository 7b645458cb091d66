"""Softmax/cross-entropy SGD, FGSM, IDX files and a synthetic shape dataset."""
from dataclasses import dataclass
import struct

import numpy as np

from .network import forward
from .tensor import RngSpec, ShapeError
from .visualize import VisMethod, propagate


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ShapeError("images must be [n, H, W, C]", ("n", "H", "W", "C"), images.shape)
        if labels.shape != (images.shape[0],):
            raise ShapeError("one label per image", (images.shape[0],), labels.shape)
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.size

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 5
    seed: int = 0
    weight_init: RngSpec = RngSpec(0)
    l2_penalty: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.l2_penalty < 0:
            raise ValueError("learning rate and l2 penalty must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    n = logits.shape[0]
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def loss_and_grads(net, images, labels, l2_penalty=0.0):
    trace = forward(net, images)
    loss, seed = softmax_xent(trace.outputs[-1], labels)
    _, grads, _ = propagate(net, trace, seed, VisMethod.SALIENCY, param_grads=True)
    if l2_penalty:
        loss += 0.5 * l2_penalty * sum(float(np.sum(p[0] ** 2)) for p in net.params if p)
        grads = [tuple(g + (l2_penalty * p[0] if i == 0 else 0) for i, g in enumerate(gs))
                 if gs else gs for gs, p in zip(grads, net.params)]
    return loss, grads


def train(net, data, cfg, log=None):
    """Plain minibatch SGD on softmax cross-entropy; returns a new network."""
    if net.num_logits != data.class_count:
        raise ShapeError("logits vs classes", (data.class_count,), (net.num_logits,))
    if data.images.shape[1:] != net.input_shape:
        raise ShapeError("dataset images", net.input_shape, data.images.shape[1:])
    rng = np.random.default_rng(cfg.seed)
    params = [tuple(np.array(a) for a in p) for p in net.params]
    current = net.with_params(params)
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(current, data.images[idx], data.labels[idx], cfg.l2_penalty)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step} "
                                    f"(learning rate {cfg.learning_rate})")
            params = [tuple(a - cfg.learning_rate * g for a, g in zip(p, gs)) if p else p
                      for p, gs in zip(params, grads)]
            current = net.with_params(params)
        if log is not None:
            log(epoch, loss)
    return net.with_params(params, trained=cfg.epochs > 0 and n > 0)


def accuracy(net, data):
    if len(data) == 0:
        return float("nan")
    logits = forward(net, data.images).logits
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def predict(net, images):
    return np.argmax(forward(net, images).logits, axis=1)


def input_gradient(net, x, label):
    """Gradient of the cross-entropy loss with respect to one input."""
    trace = forward(net, x)
    _, seed = softmax_xent(trace.outputs[-1], np.array([label]))
    g, _, _ = propagate(net, trace, seed[0], VisMethod.SALIENCY)
    return g


def fgsm(net, x, true_label, epsilon):
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError("fgsm input", net.input_shape, x.shape)
    g = input_gradient(net, x, true_label)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


# --- IDX files -------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxError(ValueError):
    pass


def _read_idx(path, magic, ndim):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 * ndim:
        raise IdxError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise IdxError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:4 + 4 * ndim])
    body = blob[4 + 4 * ndim:]
    count = int(np.prod(dims))
    if len(body) != count:
        raise IdxError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(path_images, path_labels, class_count=10):
    images = _read_idx(path_images, IDX_IMAGES, 3)
    labels = _read_idx(path_labels, IDX_LABELS, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    class_count = max(class_count, int(labels.max()) + 1) if labels.size else class_count
    return Dataset(images[..., None] / 255.0, labels.astype(np.int64), class_count)


def write_idx(path_images, path_labels, images, labels):
    """Write uint8 images [n, H, W] (or [n, H, W, 1] in [0, 1]) and labels."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[..., 0]
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES, *images.shape))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS, labels.shape[0]))
        fh.write(labels.tobytes())


# --- synthetic shapes ------------------------------------------------------------

SHAPES = ("bar", "cross", "blob", "ring")


def render_shape(kind, size, cy, cx, scale, intensity):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.sqrt(dy**2 + dx**2)
    half = 0.18 * scale * size
    thick = max(1.0, 0.06 * size)
    if kind == "bar":
        mask = (np.abs(dx) <= thick) & (np.abs(dy) <= half * 1.6)
    elif kind == "cross":
        mask = ((np.abs(dx) <= thick * 0.75) & (np.abs(dy) <= half)) | \
               ((np.abs(dy) <= thick * 0.75) & (np.abs(dx) <= half))
    elif kind == "blob":
        mask = r <= half * 0.8
    elif kind == "ring":
        mask = (r <= half) & (r >= half - thick * 1.2)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return intensity * mask


def shape_params(n, seed, size=32):
    """Per image: (label, cy, cx, scale, intensity, noise seed)."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPES))
    margin = 0.3 * size
    out = []
    for label in labels:
        out.append((int(label), rng.uniform(margin, size - margin), rng.uniform(margin, size - margin),
                    rng.uniform(0.8, 1.2), rng.uniform(0.6, 1.0), int(rng.integers(2**31))))
    return out


def synth_shapes(n, seed, size=32, noise=0.1):
    """Deterministic, class-balanced 4-class dataset of 1-channel shapes."""
    images = np.zeros((n, size, size, 1))
    labels = np.zeros(n, dtype=np.int64)
    for i, (label, cy, cx, scale, intensity, nseed) in enumerate(shape_params(n, seed, size)):
        img = render_shape(SHAPES[label], size, cy, cx, scale, intensity)
        img = img + noise * np.random.default_rng(nseed).random((size, size))
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = label
    return Dataset(images, labels, len(SHAPES))
