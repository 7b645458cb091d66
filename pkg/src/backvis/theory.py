"""Closed-form and Monte-Carlo oracles for the random-network predictions.

Everything here is written independently of the engine's backward pass:
the three-layer formula is evaluated with explicit selection matrices and
per-filter sums, so agreement with :func:`backvis.visualize.backward` is a
genuine cross-check rather than a restatement.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .network import Conv, Dense, Flatten, MaxPool, Network, ReLU, build, forward
from .tensor import PatchPlan, RngSpec, ShapeError, cosine, gather_patches, sample
from .visualize import VisMethod, backward, propagate


@dataclass
class StatReport:
    estimate: object
    analytic: object
    n_samples: int
    standard_error: object
    tol: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self):
        est = np.asarray(self.estimate, dtype=np.float64)
        ana = np.asarray(self.analytic, dtype=np.float64)
        bound = self.tol * np.maximum(1.0, np.abs(ana))
        return bool(np.all(np.abs(est - ana) <= bound))

    CSV_FIELDS = ("estimate", "analytic", "n_samples", "standard_error", "pass")

    def csv_row(self):
        def fmt(v):
            a = np.asarray(v, dtype=np.float64).ravel()
            return ";".join(f"{t:.12g}" for t in a)
        return [fmt(self.estimate), fmt(self.analytic), str(self.n_samples),
                fmt(self.standard_error), str(int(self.passed))]


@dataclass(frozen=True, eq=False)
class ThreeLayerModel:
    """Random conv -> ReLU -> dense model in matrix form.

    ``W`` is [p, N] with one filter per column; ``V`` is [N*J, K] and row
    ``i*J + j`` connects filter ``i`` at patch ``j`` to the logits.
    """

    W: np.ndarray
    V: np.ndarray
    plan: PatchPlan
    c: float = 0.1

    def __post_init__(self):
        p, N = self.W.shape
        J = self.plan.patch_count
        if p != self.plan.patch_size:
            raise ShapeError("filter size vs patch size", (self.plan.patch_size,), (p,))
        if self.V.shape[0] != N * J:
            raise ShapeError("dense rows must equal N*J", (N * J, self.V.shape[1]), self.V.shape)

    @property
    def n_filters(self):
        return self.W.shape[1]

    @classmethod
    def from_network(cls, net, c=None):
        specs = net.specs
        if not (len(specs) == 4 and isinstance(specs[0], Conv) and isinstance(specs[1], ReLU)
                and isinstance(specs[2], Flatten) and isinstance(specs[3], Dense)):
            raise ValueError("expected a Conv -> ReLU -> Flatten -> Dense network")
        if net.has_bias:
            raise ValueError("closed form assumes a bias-free network")
        plan = net.plan(0)
        W = net.params[0][0].reshape(plan.patch_size, -1)
        c = c if c is not None else (net.init.std if net.init else 0.1)
        return cls(W, net.params[3][0], plan, c)


def _h(t, method):
    return np.maximum(t, 0.0) if method.backward_relu else t


def closed_form(model, x, k, method):
    """Unnormalized sum_j D_j^T sum_i h(V[i*J+j, k]) w~(i, j)."""
    method = VisMethod.parse(method)
    plan = model.plan
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != plan.input_size:
        raise ShapeError("input", (plan.input_size,), x.shape)
    J, N = plan.patch_count, model.n_filters
    out = np.zeros(plan.input_size)
    for j in range(J):
        D = plan.selection_matrix(j)
        y = D @ x
        acc = np.zeros(plan.patch_size)
        for i in range(N):
            w = model.W[:, i]
            coef = _h(model.V[i * J + j, k], method)
            if method.forward_relu and not w @ y > 0:
                continue
            acc += coef * w
        out += D.T @ acc
    return out.reshape(plan.input_dims)


def rectified_gaussian_mean(c):
    """Mean of max(Z, 0) for Z ~ N(0, c^2)."""
    return c / math.sqrt(2.0 * math.pi)


def expected_rectified_direction(y, c=1.0, n_samples=10**6, seed=0, tol=None, chunk=200_000):
    """Monte-Carlo E[w 1(w.y > 0)] for w ~ N(0, c^2 I) against c/sqrt(2 pi) * y/|y|.

    ``tol`` defaults to four standard errors of the largest coordinate.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    ny = float(np.linalg.norm(y))
    if ny == 0.0:
        raise ValueError("direction y must be nonzero")
    if n_samples < 10**4:
        raise ValueError("need at least 10^4 samples")
    rng = np.random.default_rng(seed)
    s1 = np.zeros(y.size)
    s2 = np.zeros(y.size)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        w = c * rng.standard_normal((m, y.size))
        wt = w * (w @ y > 0)[:, None]
        s1 += wt.sum(axis=0)
        s2 += (wt * wt).sum(axis=0)
        done += m
    mean = s1 / n_samples
    se = np.sqrt(np.maximum(s2 / n_samples - mean**2, 0.0) / n_samples)
    analytic = rectified_gaussian_mean(c) * y / ny
    if tol is None:
        tol = 4.0 * float(se.max())
    return StatReport(mean, analytic, n_samples, se, tol)


def _unit_patches(x, plan):
    Y = gather_patches(np.asarray(x, dtype=np.float64).ravel(), plan)
    norms = np.linalg.norm(Y, axis=1)
    live = norms > 0
    return Y, norms, live


def gbp_direction_sum(x, plan):
    """sum_j D_j^T y_j / |y_j| over nonzero patches (unnormalized)."""
    Y, norms, live = _unit_patches(x, plan)
    out = np.zeros(plan.input_size)
    for j in np.flatnonzero(live):
        idx = plan.index[j]
        ok = idx >= 0
        np.add.at(out, idx[ok], Y[j, ok] / norms[j])
    return out, int(live.sum())


def gbp_theorem1_oracle(x, plan):
    """Unit-norm large-N limit direction of the GBP map."""
    out, n_live = gbp_direction_sum(x, plan)
    if n_live == 0:
        raise ValueError("every patch of the input is zero")
    return (out / np.linalg.norm(out)).reshape(plan.input_dims)


def gbp_expected_map(x, plan, c, n_filters):
    """Expected unnormalized GBP map of a random three-layer CNN.

    Each of the N filters contributes E[relu(V)] E[w~] per patch, i.e.
    N c^2 / (2 pi) * y_j / |y_j|.
    """
    out, _ = gbp_direction_sum(x, plan)
    return (n_filters * rectified_gaussian_mean(c) ** 2 * out).reshape(plan.input_dims)


def gbp_normalizer(c, p, patch_norm):
    """Coefficient that turns the equal-patch-norm GBP limit into x itself."""
    return 2.0 * math.pi * patch_norm / (c * c * p)


def saliency_normalizer(c, n_filters, p):
    return c * c * math.sqrt(n_filters * p)


@dataclass(frozen=True, eq=False)
class NoiseCovariance:
    """I - Lambda / (2p) together with Lambda and the patch bookkeeping."""

    matrix: np.ndarray
    lam: np.ndarray
    d: int
    patches_used: int
    p: int

    def trace(self):
        return float(np.trace(self.matrix))

    def predicted_trace(self):
        return self.d - self.patches_used / (2.0 * self.p)


def saliency_covariance_oracle(x, plan, p=None, max_dim=2048):
    p = plan.patch_size if p is None else int(p)
    d = plan.input_size
    if d > max_dim:
        raise ValueError(f"d = {d} too large for a dense d x d covariance (limit {max_dim})")
    Y, norms, live = _unit_patches(x, plan)
    lam = np.zeros((d, d))
    for j in np.flatnonzero(live):
        v = np.zeros(d)
        idx = plan.index[j]
        ok = idx >= 0
        v[idx[ok]] = Y[j, ok] / norms[j]
        lam += np.outer(v, v)
    return NoiseCovariance(np.eye(d) - lam / (2.0 * p), lam, d, int(live.sum()), p)


def saliency_exact_variance(x, plan, n_filters, c, Z=None):
    """Per-pixel variance of the Z-scaled saliency map of a Gaussian random 3-layer CNN.

    Every (filter, patch) term is V * w * 1[w.y > 0] with E[V] = 0, so terms
    are uncorrelated and E[w w^T 1[w.y > 0]] = c^2 I / 2 by the symmetry
    w -> -w. The covariance is therefore (N c^4 / 2 Z^2) sum_j D_j^T D_j,
    which is diagonal and does not depend on x.
    """
    Z = saliency_normalizer(c, n_filters, plan.patch_size) if Z is None else Z
    return (0.5 * n_filters * c**4 / Z**2 * plan.coverage()).reshape(plan.input_dims)


def streamed_fcn_maps(x, hidden, init, n_logits=10, target="max", methods=tuple(VisMethod),
                      chunk=2048):
    """Maps of a bias-free Flatten -> Dense(hidden) -> ReLU -> Dense(K) network.

    The first weight matrix is never materialized: it is drawn column block
    by column block from ``init.child(1000 + b)``; the dense output layer
    comes from ``init.child(1)``. Every logit's map is accumulated in one
    pass, then the target (``"max"`` or an index) is selected.
    Returns ``(maps, k, logits)`` with ``maps`` keyed by method.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W_, C = x.shape
    flat = x.transpose(2, 0, 1).ravel()  # channel-major, as Flatten
    d = flat.size
    V = sample(init.child(1), (hidden, n_logits))
    methods = [VisMethod.parse(m) for m in methods]
    acc = {m: np.zeros((d, n_logits)) for m in methods}
    logits = np.zeros(n_logits)
    for b, start in enumerate(range(0, hidden, chunk)):
        stop = min(start + chunk, hidden)
        W = sample(init.child(1000 + b), (d, stop - start))
        pre = flat @ W
        Vb = V[start:stop]
        logits += np.maximum(pre, 0.0) @ Vb
        for m in methods:
            coef = _h(Vb, m)
            if m.forward_relu:
                coef = coef * (pre > 0)[:, None]
            acc[m] += W @ coef
    k = int(np.argmax(logits)) if target == "max" else int(target)
    maps = {m: acc[m][:, k].reshape(C, H, W_).transpose(1, 2, 0) for m in methods}
    return maps, k, logits


def independence_stat_check(net, x, method=VisMethod.GBP, k=0, n_resamples=200, n_pairs=50,
                            layer=None, seed=0):
    """Resample a random network's weights and test the entries of the
    gradient reaching the first ReLU for zero mean and zero correlation.

    The report's estimate is the 95th percentile of |pairwise correlation|
    with analytic value 0 and tolerance 4/sqrt(n_resamples); it passes when
    at least 95% of the sampled pairs fall inside that band.
    """
    method = VisMethod.parse(method)
    if net.trained:
        raise ValueError("independence check applies to random (untrained) networks only")
    relus = net.layers_of(ReLU)
    if not relus:
        raise ValueError("network has no ReLU layer")
    layer = relus[0] if layer is None else layer
    if layer not in relus:
        raise ValueError(f"layer {layer} is not a ReLU layer")
    init = net.init if net.init is not None else RngSpec(0)
    seed_vec = np.zeros(net.num_logits)
    seed_vec[k] = 1.0
    samples = []
    for r in range(n_resamples):
        resampled = build(net.specs, net.input_shape, init.with_seed(seed * 1_000_003 + r))
        trace = forward(resampled, x)
        _, _, records = propagate(resampled, trace, seed_vec, method, record=True)
        samples.append(records[layer][0].ravel())
    S = np.array(samples)
    var = S.var(axis=0)
    live = np.flatnonzero(var > 0)
    bound = 4.0 / math.sqrt(n_resamples)
    if live.size < 2:
        rep = StatReport(np.inf, 0.0, n_resamples, np.nan, bound,
                         {"degenerate": True, "live_entries": int(live.size)})
        return rep
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n_pairs:
        a, b = rng.choice(live, size=2, replace=False)
        pairs.append((a, b))
    corr = np.array([np.corrcoef(S[:, a], S[:, b])[0, 1] for a, b in pairs])
    zmean = S[:, live].mean(axis=0) / np.sqrt(var[live] / n_resamples)
    details = {
        "degenerate": False,
        "live_entries": int(live.size),
        "fraction_within": float(np.mean(np.abs(corr) <= bound)),
        "max_abs_corr": float(np.abs(corr).max()),
        "mean_z_fraction_within_4": float(np.mean(np.abs(zmean) <= 4.0)),
        "correlations": corr,
    }
    return StatReport(float(np.quantile(np.abs(corr), 0.95)), 0.0, n_resamples,
                      1.0 / math.sqrt(n_resamples), bound, details)


def deconv_pool_equals_gbp_check(net, x, k):
    """Cosine similarity between the DeconvNet and GBP maps of a pooled net."""
    relus = net.layers_of(ReLU)
    pools = net.layers_of(MaxPool)
    if not relus or not any(p > relus[0] for p in pools):
        raise ValueError("network needs a max-pool layer after its first ReLU")
    trace = forward(net, x)
    d = backward(net, trace, k, VisMethod.DECONVNET).raw
    g = backward(net, trace, k, VisMethod.GBP).raw
    return cosine(d, g)
