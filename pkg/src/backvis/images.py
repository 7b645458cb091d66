"""Built-in desk images and input preprocessing.

Scenes combine a 1/f ("pink") texture, which has the power spectrum of
natural photographs, with a few hard-edged objects and a lighting gradient.
All generators are deterministic in their seed and return HxWxC arrays in
[0, 1].
"""
import numpy as np

KINDS = ("scene", "texture", "constant", "step", "zeros")


def pink_noise(shape, rng, exponent=1.0):
    H, W = shape
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = np.inf
    spectrum = (rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W))) / f**exponent
    field = np.real(np.fft.ifft2(spectrum))
    return (field - field.mean()) / field.std()


def _rescale(x):
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def texture(size=64, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    lum = pink_noise((size, size), rng)
    chroma = [0.35 * pink_noise((size, size), rng) for _ in range(channels)]
    return _rescale(np.stack([lum + c for c in chroma], axis=-1))


def scene(size=64, channels=3, seed=0):
    """Textured background, a lit gradient, a disk and two bars."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.25 * texture(size, channels, int(rng.integers(2**31)))
    base += 0.3 * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1))[..., None]
    cy, cx, r = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.15, 0.3)
    disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < r**2
    base += disk[..., None] * rng.uniform(0.3, 0.8, channels)
    for _ in range(2):
        if rng.random() < 0.5:
            lo = rng.uniform(0.05, 0.8)
            bar = (xx > lo) & (xx < lo + rng.uniform(0.05, 0.15))
        else:
            lo = rng.uniform(0.05, 0.8)
            bar = (yy > lo) & (yy < lo + rng.uniform(0.05, 0.15))
        base += bar[..., None] * rng.uniform(-0.6, 0.6, channels)
    return _rescale(base)


def step(size=64, channels=3, column=None):
    """Dark left half, bright right half: a single vertical edge."""
    column = size // 2 if column is None else column
    x = np.zeros((size, size, channels))
    x[:, column:, :] = 1.0
    return x


def desk_image(kind="scene", size=64, channels=3, seed=0):
    if kind == "scene":
        return scene(size, channels, seed)
    if kind == "texture":
        return texture(size, channels, seed)
    if kind == "constant":
        return np.full((size, size, channels), 0.5)
    if kind == "step":
        return step(size, channels)
    if kind == "zeros":
        return np.zeros((size, size, channels))
    raise ValueError(f"unknown desk image {kind!r}; choose from {KINDS}")


def desk_batch(n, size=32, channels=3, seed=0):
    return np.stack([scene(size, channels, seed * 100003 + i) for i in range(n)])


def preprocess(x, center=True):
    """Per-channel mean removal followed by scaling to unit L2 norm.

    An all-zero input is returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if center:
        x = x - x.mean(axis=tuple(range(x.ndim - 1)), keepdims=True)
    n = np.sqrt(np.sum(x * x))
    return x / n if n > 0 else x
