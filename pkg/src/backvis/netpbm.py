"""Binary PGM (P5) and PPM (P6) images with maxval 255."""
import numpy as np

from .tensor import minmax_rescale


class NetpbmError(ValueError):
    pass


def _tokens(blob, count, pos):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(blob)
    while len(out) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace() and blob[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(blob[start:pos])
    return out, pos


def read_image(path):
    """Return an [H, W, C] float array in [0, 1] (C = 1 for PGM, 3 for PPM)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    try:
        (w, h, maxval), pos = _tokens(blob, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise NetpbmError(f"{path}: maxval {maxval} unsupported; only 8-bit (maxval 255) images are read")
    if w <= 0 or h <= 0:
        raise NetpbmError(f"{path}: bad dimensions {w}x{h}")
    channels = 1 if magic == b"P5" else 3
    body = blob[pos + 1:]
    size = w * h * channels
    if len(body) < size:
        raise NetpbmError(f"{path}: expected {size} pixel bytes, found {len(body)}")
    data = np.frombuffer(body[:size], dtype=np.uint8).reshape(h, w, channels)
    return data / 255.0


def to_bytes(x):
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(img, path, rescale=False):
    """Write [H, W], [H, W, 1] or [H, W, 3] values in [0, 1].

    With ``rescale`` the array is first min-max scaled, which is how maps
    are displayed.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise NetpbmError(f"cannot store an image of shape {img.shape}")
    if rescale:
        img = minmax_rescale(img)
    h, w, c = img.shape
    header = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(header + f"\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(img).tobytes())
