"""Experiment registry, config files, and CSV/image outputs.

Each experiment is a function ``(ctx, seed) -> None`` that records metric
rows and images through an :class:`_Context`. Seeds run in order and every
random draw is keyed by the seed, so a rerun writes byte-identical files.
"""
from dataclasses import dataclass, field
import csv
import functools
import io
import os
from pathlib import Path
import platform

import numpy as np

from . import __version__, kernels
from .images import KINDS, desk_batch, desk_image, preprocess
from .netpbm import read_image, write_image
from .network import (Dense, ExceptFor, MaxPool, UpTo, build, deep_cnn, forward,
                      splice_weights, three_layer_cnn, tiny_cnn)
from .tensor import RngSpec, cosine, l2_norm, unit
from .theory import deconv_pool_equals_gbp_check, gbp_theorem1_oracle, independence_stat_check, \
    streamed_fcn_maps
from .trainer import TrainConfig, accuracy, fgsm, predict, synth_shapes, train
from .visualize import VisMethod, backward

CSV_HEADER = ("experiment", "seed", "method", "target_logit", "metric", "value")
DEFAULT_OUT = "backvis-out"


class ConfigError(ValueError):
    pass


# --- knob parsing ----------------------------------------------------------------

def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _str(v):
    return v.strip()


def _int_list(v):
    return tuple(int(t) for t in v.split(",") if t.strip())


def _float_list(v):
    return tuple(float(t) for t in v.split(",") if t.strip())


def _bool(v):
    key = v.strip().lower()
    if key in ("1", "yes", "true", "on"):
        return True
    if key in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"expected yes/no, got {v!r}")


def _methods(v):
    return tuple(VisMethod.parse(t) for t in v.split(",") if t.strip())


def _target(v):
    v = v.strip().lower()
    return "max" if v == "max" else int(v)


def _choice(*options):
    def parse(v):
        v = v.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return parse


def _str_list(v):
    return tuple(t.strip() for t in v.split(",") if t.strip())


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(t) for t in v)
    if isinstance(v, VisMethod):
        return v.value
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


@dataclass(frozen=True)
class Knob:
    parse: object
    default: object
    help: str = ""


COMMON = {
    "input": Knob(_str, "scene:0", "desk image kind[:seed], shapes[:index], or a PGM/PPM path"),
    "size": Knob(_int, 64, "side length of built-in desk images"),
    "prep": Knob(_choice("center", "scale", "none"), "center",
                 "center: per-channel mean removal then unit norm; scale: unit norm only"),
    "seeds": Knob(_int_list, (0,), "network seeds, run in order"),
    "methods": Knob(_methods, tuple(VisMethod), "visualization methods"),
    "target": Knob(_target, "max", "target logit: max or an index"),
    "images": Knob(_bool, True, "write PGM/PPM map images"),
}

_THREE = {
    "n_filters": Knob(_int, 256),
    "filter_size": Knob(_int, 7),
    "stride": Knob(_int, 2),
    "logits": Knob(_int, 10),
}

_TRAIN = {
    "n_train": Knob(_int, 1024, "synthetic training images"),
    "noise": Knob(_float, 0.3, "uniform background noise of the shapes"),
    "epochs": Knob(_int, 8),
    "learning_rate": Knob(_float, 0.05),
    "batch_size": Knob(_int, 32),
}


@dataclass(frozen=True)
class Experiment:
    name: str
    run: object
    knobs: dict
    summary: str
    defaults: dict = field(default_factory=dict)


REGISTRY = {}


def register(name, knobs, summary, **defaults):
    def deco(fn):
        REGISTRY[name] = Experiment(name, fn, knobs, summary, defaults)
        return fn
    return deco


# --- config ------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    values: dict
    out: Path

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self):
        return [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]


def parse_config_text(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def unknown_experiment(name):
    return ConfigError(f"unknown experiment {name!r}; registry: {', '.join(REGISTRY)}")


def make_config(experiment, raw=None, out=None, seed=None):
    """Validate ``raw`` string values against the experiment's knobs.

    Output directory precedence: ``out`` argument, the config's ``out``
    key, ``$BACKVIS_OUT``, then ``./backvis-out``.
    """
    if experiment not in REGISTRY:
        raise unknown_experiment(experiment)
    exp = REGISTRY[experiment]
    raw = dict(raw or {})
    named = raw.pop("experiment", experiment)
    if named != experiment:
        raise ConfigError(f"config is for {named!r} but {experiment!r} was requested")
    cfg_out = raw.pop("out", None)
    knobs = {**COMMON, **exp.knobs}
    unknown = sorted(set(raw) - set(knobs))
    if unknown:
        raise ConfigError(f"unknown key(s) for {experiment}: {', '.join(unknown)}; "
                          f"allowed: {', '.join(sorted(knobs))}")
    values = {}
    for key, knob in knobs.items():
        if key in raw:
            try:
                values[key] = knob.parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key} = {raw[key]!r}: {exc}") from None
        else:
            values[key] = exp.defaults.get(key, knob.default)
    if seed is not None:
        values["seeds"] = (int(seed),)
    if not values["seeds"]:
        raise ConfigError("seeds must list at least one seed")
    out = Path(out or cfg_out or os.environ.get("BACKVIS_OUT") or DEFAULT_OUT)
    return ExperimentConfig(experiment, values, out)


def load_config(experiment, path, out=None, seed=None):
    text = Path(path).read_text()
    return make_config(experiment, parse_config_text(text, str(path)), out, seed)


# --- inputs ------------------------------------------------------------------------

def load_input(spec, size=64, channels=3):
    """Raw [H, W, C] image in [0, 1] from an input spec string."""
    kind, _, arg = spec.partition(":")
    if kind in KINDS:
        return desk_image(kind, size, channels, int(arg or 0))
    if kind == "shapes":
        return synth_shapes(int(arg or 0) + 1, seed=7, size=size).images[-1]
    if Path(spec).is_file():
        return read_image(spec)
    raise ConfigError(f"input {spec!r} is neither a built-in ({', '.join(KINDS)}, shapes) nor a file")


def prepare(x, prep):
    if prep == "none":
        return np.asarray(x, dtype=np.float64)
    return preprocess(x, center=(prep == "center"))


# --- run context -------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    seed: int
    method: str
    target_logit: object
    metric: str
    value: float

    def cells(self):
        return [self.experiment, str(self.seed), self.method,
                "" if self.target_logit is None else str(self.target_logit),
                self.metric, f"{float(self.value):.12g}"]


class _Context:
    def __init__(self, cfg, out_dir):
        self.cfg = cfg
        self.out_dir = out_dir
        self.rows = []
        self.files = []
        self.seed = None

    def row(self, metric, value, method=None, k=None):
        m = method.value if isinstance(method, VisMethod) else (method or "")
        self.rows.append(MetricsRow(self.cfg.experiment, self.seed, m, k, metric, value))

    def image(self, tag, img, rescale=True):
        if not self.cfg.images:
            return
        img = np.asarray(img)
        ext = "pgm" if img.ndim == 2 or img.shape[-1] == 1 else "ppm"
        name = f"{self.cfg.experiment}_s{self.seed}_{tag}.{ext}"
        write_image(img, self.out_dir / name, rescale=rescale)
        self.files.append(name)

    def input(self, channels=3):
        return load_input(self.cfg.input, self.cfg.size, channels)

    def target(self, logits):
        t = self.cfg.target
        k = int(np.argmax(logits)) if t == "max" else t
        if not 0 <= k < len(logits):
            raise ConfigError(f"target logit {k} out of range for {len(logits)} logits")
        return k


@dataclass(frozen=True)
class RunResult:
    out_dir: Path
    rows: tuple
    files: tuple

    def metric(self, name, method=None, seed=None):
        """Values of one metric in row order, optionally filtered."""
        m = method.value if isinstance(method, VisMethod) else method
        return [r.value for r in self.rows if r.metric == name
                and (m is None or r.method == m) and (seed is None or r.seed == seed)]


def csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def run(cfg):
    """Run every seed of ``cfg`` and write metrics.csv, images and a manifest."""
    if cfg.experiment not in REGISTRY:
        raise unknown_experiment(cfg.experiment)
    out_dir = Path(cfg.out) / cfg.experiment
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg, out_dir)
    for seed in cfg.seeds:
        ctx.seed = seed
        REGISTRY[cfg.experiment].run(ctx, seed)
    (out_dir / "metrics.csv").write_text(csv_text(ctx.rows))
    manifest = [f"experiment = {cfg.experiment}", f"engine = backvis {__version__}",
                f"kernels = {kernels.BACKEND}", f"numpy = {np.__version__}",
                f"python = {platform.python_version()}", *cfg.echo(),
                f"files = {','.join(['metrics.csv'] + ctx.files)}"]
    (out_dir / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return RunResult(out_dir, tuple(ctx.rows), tuple(ctx.files))


# --- shared pieces -----------------------------------------------------------------

def _three_layer(ctx, x, seed, n_filters=None, pool=None):
    c = ctx.cfg
    specs = three_layer_cnn(c.filter_size, n_filters or c.n_filters, c.stride, c.logits, pool)
    return build(specs, x.shape, RngSpec(seed))


def _maps(net, x, k, methods):
    trace = forward(net, x)
    return {m: backward(net, trace, k, m).raw for m in methods}


@functools.lru_cache(maxsize=4)
def trained_tiny(seed, n_train, noise, epochs, learning_rate, batch_size):
    """Tiny CNN trained on synthetic shapes; returns (net, train data)."""
    data = synth_shapes(n_train, seed=2 * seed, noise=noise)
    init = RngSpec(seed)
    net = build(tiny_cnn(data.class_count), data.images.shape[1:], init)
    cfg = TrainConfig(learning_rate, batch_size, epochs, seed, init)
    return train(net, data, cfg), data


def _train_from(ctx, seed):
    c = ctx.cfg
    return trained_tiny(seed, c.n_train, c.noise, c.epochs, c.learning_rate, c.batch_size)


def _held_out(ctx, seed, n):
    return synth_shapes(n, seed=2 * seed + 1, noise=ctx.cfg.noise)


# --- experiments -------------------------------------------------------------------

@register("cnn-vs-fcn", {**_THREE, "hidden": Knob(_int, 4096), "chunk": Knob(_int, 1024)},
          "three-layer CNN vs fully connected net on one input")
def _cnn_vs_fcn(ctx, seed):
    c = ctx.cfg
    x = prepare(ctx.input(), c.prep)
    net = _three_layer(ctx, x, seed)
    trace = forward(net, x)
    k = ctx.target(trace.logits)
    oracle = gbp_theorem1_oracle(x, net.plan(0)) if np.any(x) else None
    for m in c.methods:
        r = backward(net, trace, k, m).raw
        ctx.row("cnn.cosine_input", cosine(r, x), m, k)
        if m is VisMethod.GBP and oracle is not None:
            ctx.row("cnn.cosine_oracle", cosine(r, oracle), m, k)
        ctx.image(f"cnn_{m.value}", r)
    maps, kf, _ = streamed_fcn_maps(x, c.hidden, RngSpec(seed), c.logits, c.target, c.methods,
                                    c.chunk)
    for m in c.methods:
        ctx.row("fcn.cosine_input", cosine(maps[m], x), m, kf)
        ctx.image(f"fcn_{m.value}", maps[m])


@register("filters-sweep", {**_THREE, "filters": Knob(_int_list, (8, 16, 32, 64, 128, 256)),
                            "hidden": Knob(_int_list, (5000, 10000, 40000)),
                            "chunk": Knob(_int, 1024)},
          "GBP cosine against filter count (CNN) and hidden width (FCN)",
          methods=(VisMethod.GBP,))
def _filters_sweep(ctx, seed):
    c = ctx.cfg
    x = prepare(ctx.input(), c.prep)
    plan = None
    for n in c.filters:
        net = _three_layer(ctx, x, seed, n_filters=n)
        plan = net.plan(0)
        trace = forward(net, x)
        k = ctx.target(trace.logits)
        oracle = gbp_theorem1_oracle(x, plan) if np.any(x) else None
        for m in c.methods:
            r = backward(net, trace, k, m).raw
            ctx.row(f"cnn.N={n}.cosine_input", cosine(r, x), m, k)
            if oracle is not None:
                ctx.row(f"cnn.N={n}.cosine_oracle", cosine(r, oracle), m, k)
            ctx.image(f"cnn_N{n}_{m.value}", r)
    for h in c.hidden:
        maps, kf, _ = streamed_fcn_maps(x, h, RngSpec(seed), c.logits, c.target, c.methods, c.chunk)
        for m in c.methods:
            ctx.row(f"fcn.Nh={h}.cosine_input", cosine(maps[m], x), m, kf)
            ctx.image(f"fcn_Nh{h}_{m.value}", maps[m])


@register("maxpool", {**_THREE, "pool": Knob(_int, 2)},
          "effect of a max-pool after the ReLU on each method")
def _maxpool(ctx, seed):
    c = ctx.cfg
    x = prepare(ctx.input(), c.prep)
    pooled = _three_layer(ctx, x, seed, pool=c.pool)
    plain = _three_layer(ctx, x, seed)
    tp, tn = forward(pooled, x), forward(plain, x)
    kp, kn = ctx.target(tp.logits), ctx.target(tn.logits)
    maps = {}
    for m in c.methods:
        maps[m] = backward(pooled, tp, kp, m).raw
        ctx.row("pool.cosine_input", cosine(maps[m], x), m, kp)
        ctx.row("nopool.cosine_input", cosine(backward(plain, tn, kn, m).raw, x), m, kn)
        ctx.image(f"pool_{m.value}", maps[m])
    ctx.row("deconv_gbp_cosine", deconv_pool_equals_gbp_check(pooled, x, kp), VisMethod.DECONVNET, kp)
    ctx.row("gbp_pool_vs_nopool", cosine(backward(pooled, tp, kp, VisMethod.GBP).raw,
                                         backward(plain, tn, kn, VisMethod.GBP).raw),
            VisMethod.GBP, kp)
    if np.any(x):
        ctx.row("pool.cosine_oracle", cosine(backward(pooled, tp, kp, VisMethod.GBP).raw,
                                             gbp_theorem1_oracle(x, pooled.plan(0))),
                VisMethod.GBP, kp)


@register("depth", {"channels": Knob(_int_list, (256, 128, 128, 128, 128)),
                    "pool_after": Knob(_int_list, (1, 2, 3, 4)), "filter_size": Knob(_int, 3),
                    "logits": Knob(_int, 10), "resamples": Knob(_int, 0)},
          "random five-conv-layer CNN with pooling")
def _depth(ctx, seed):
    c = ctx.cfg
    x = prepare(ctx.input(), c.prep)
    net = build(deep_cnn(c.channels, c.filter_size, c.pool_after, c.logits), x.shape, RngSpec(seed))
    trace = forward(net, x)
    k = ctx.target(trace.logits)
    for m in c.methods:
        r = backward(net, trace, k, m).raw
        ctx.row("cosine_input", cosine(r, x), m, k)
        if m is VisMethod.GBP and np.any(x):
            ctx.row("cosine_oracle", cosine(r, gbp_theorem1_oracle(x, net.plan(0))), m, k)
        ctx.image(m.value, r)
    if any(isinstance(s, MaxPool) for s in net.specs):
        ctx.row("deconv_gbp_cosine", deconv_pool_equals_gbp_check(net, x, k), VisMethod.DECONVNET, k)
    if c.resamples:
        for m in c.methods:
            rep = independence_stat_check(net, x, m, k, c.resamples, seed=seed)
            ctx.row("independence.p95_abs_corr", rep.estimate, m, k)
            ctx.row("independence.pass", float(rep.passed), m, k)


@register("l2-stats", {"n_images": Knob(_int, 100), "image_size": Knob(_int, 32),
                       "channels": Knob(_int_list, (256, 128, 128, 128, 128)),
                       "pool_after": Knob(_int_list, (0, 1, 2, 3)), "logits": Knob(_int, 10),
                       "nets": Knob(_str_list, ("random",)), **_TRAIN},
          "mean L2 distance between maps of two random logits")
def _l2_stats(ctx, seed):
    c = ctx.cfg
    for kind in c.nets:
        if kind == "random":
            X = [preprocess(x) for x in desk_batch(c.n_images, c.image_size, 3, seed)]
            net = build(deep_cnn(c.channels, 3, c.pool_after, c.logits), X[0].shape, RngSpec(seed))
        elif kind == "trained":
            net, _ = _train_from(ctx, seed)
            X = list(_held_out(ctx, seed, c.n_images).images)
        else:
            raise ConfigError(f"nets entries must be random or trained, got {kind!r}")
        rng = np.random.default_rng(seed)
        dist = {m: [] for m in c.methods}
        for x in X:
            trace = forward(net, x)
            k1, k2 = (int(v) for v in rng.choice(net.num_logits, 2, replace=False))
            for m in c.methods:
                a = backward(net, trace, k1, m).raw
                b = backward(net, trace, k2, m).raw
                dist[m].append(l2_norm(unit(a) - unit(b)))
        for m in c.methods:
            ctx.row(f"{kind}.mean_l2", float(np.mean(dist[m])), m)
            ctx.row(f"{kind}.std_l2", float(np.std(dist[m])), m)


@register("fgsm", {**_TRAIN, "n_eval": Knob(_int, 100),
                   "epsilon": Knob(_str, "auto", "a value, or auto: smallest grid value flipping half"),
                   "eps_grid": Knob(_float_list, tuple(round(0.01 * i, 2) for i in range(1, 31)))},
          "map change under a one-step sign-gradient attack on a trained tiny CNN")
def _fgsm(ctx, seed):
    c = ctx.cfg
    net, data = _train_from(ctx, seed)
    held = _held_out(ctx, seed, c.n_eval)
    clean_pred = predict(net, held.images)
    ctx.row("train_accuracy", accuracy(net, data))
    ctx.row("eval_accuracy", accuracy(net, held))

    def attack(eps):
        adv = np.stack([fgsm(net, x, y, eps) for x, y in zip(held.images, held.labels)])
        return adv, float(np.mean(predict(net, adv) != clean_pred))

    if c.epsilon == "auto":
        for eps in c.eps_grid:
            adv, flips = attack(eps)
            if flips >= 0.5:
                break
    else:
        eps = float(c.epsilon)
        adv, flips = attack(eps)
    ctx.row("epsilon", eps)
    ctx.row("flip_rate", flips)
    change = {m: [] for m in c.methods}
    for i, (x, xa) in enumerate(zip(held.images, adv)):
        tc, ta = forward(net, x), forward(net, xa)
        kc, ka = int(np.argmax(tc.logits)), int(np.argmax(ta.logits))
        for m in c.methods:
            a = backward(net, tc, kc, m).raw
            b = backward(net, ta, ka, m).raw
            change[m].append(l2_norm(unit(a) - unit(b)))
            if i == 0:
                ctx.image(f"clean_{m.value}", a)
                ctx.image(f"adv_{m.value}", b)
        if i == 0:
            ctx.image("clean_input", x, rescale=False)
            ctx.image("adv_input", xa, rescale=False)
    for m in c.methods:
        ctx.row("mean_l2_change", float(np.mean(change[m])), m)


@register("splice", {**_TRAIN, "layers": Knob(_int_list, ()), "image": Knob(_int, 0)},
          "GBP maps of trained/random weight splices", methods=(VisMethod.GBP,))
def _splice(ctx, seed):
    c = ctx.cfg
    net, _ = _train_from(ctx, seed)
    random = build(net.specs, net.input_shape, RngSpec(seed + 1_000_000))
    x = _held_out(ctx, seed, c.image + 1).images[c.image]
    layers = c.layers or tuple(i for i, p in enumerate(net.params) if p)
    trace = forward(net, x)
    k = ctx.target(trace.logits)
    ref = {m: backward(net, trace, k, m).raw for m in c.methods}
    for tag, model in (("trained", net), ("random", random)):
        mean, low = column_histogram_overlap(model.params[model.layers_of(Dense)[0]][0])
        ctx.row(f"{tag}.dense_hist_overlap_mean", mean)
        ctx.row(f"{tag}.dense_hist_overlap_min", low)
    ctx.image("input", x, rescale=False)
    for m in c.methods:
        ctx.image(f"trained_{m.value}", ref[m])
    for mode in (UpTo, ExceptFor):
        tag = mode.__name__.lower()
        for layer in layers:
            spliced = splice_weights(net, random, mode(layer))
            for m, r in _maps(spliced, x, k, c.methods).items():
                ctx.row(f"{tag}.{layer}.cosine_input", cosine(r, x), m, k)
                ctx.row(f"{tag}.{layer}.cosine_trained", cosine(r, ref[m]), m, k)
                ctx.image(f"{tag}{layer}_{m.value}", r)


def column_histogram_overlap(W, bins=30):
    """Mean and minimum pairwise histogram intersection of the columns of ``W``.

    Each column (the weights feeding one logit) is binned on a shared range;
    1 means identical histograms.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] < 2 or W.min() == W.max():
        return 1.0, 1.0
    edges = np.linspace(W.min(), W.max(), bins + 1)
    hist = np.stack([np.histogram(col, edges)[0] / col.size for col in W.T])
    pairs = [np.minimum(hist[a], hist[b]).sum()
             for a in range(len(hist)) for b in range(a + 1, len(hist))]
    return float(np.mean(pairs)), float(np.min(pairs))


def left_difference(x):
    """Each pixel minus its left neighbour; the first column is zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    out[:, 1:] = x[:, 1:] - x[:, :-1]
    return out


@register("edge-detector", _THREE, "left-difference edge map next to the GBP map",
          input="step", methods=(VisMethod.GBP,))
def _edge_detector(ctx, seed):
    c = ctx.cfg
    raw = ctx.input()
    edge = left_difference(raw)
    x = prepare(raw, c.prep)
    net = _three_layer(ctx, x, seed)
    trace = forward(net, x)
    k = ctx.target(trace.logits)
    cols = np.flatnonzero(np.any(edge != 0, axis=(0, 2)))
    ctx.row("edge.nonzero_columns", cols.size)
    ctx.image("edge", edge)
    for m in c.methods:
        r = backward(net, trace, k, m).raw
        ctx.row("cosine_edge", cosine(r, edge), m, k)
        ctx.row("cosine_input", cosine(r, x), m, k)
        ctx.image(m.value, r)
