"""Shared plumbing: seed derivation, optimizer step, image resampling, PGM io."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of keys (ints, strings).

    The documented split function for all per-view / per-sample RNG streams:
    independent streams come from distinct key tuples, never from sequential
    draws, so parallel schedules cannot change results.
    """
    payload = "\x1f".join(str(p) for p in parts).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def rng_from(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> np.ndarray:
    """One Adam update with decoupled weight decay; mutates m and v, returns
    the new parameter value. ``t`` is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    out = param - lr * (mhat / (np.sqrt(vhat) + eps))
    if weight_decay:
        out = out - lr * weight_decay * param
    return out


def stable_hash(obj) -> str:
    """Hex digest of a JSON-serializable object with sorted keys."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# small image helpers (grayscale float64 in [0, 1])
# ---------------------------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with corner-aligned bilinear sampling.

    Equal input and output sizes reproduce the input bitwise, which the view
    pipeline relies on for its identity cases.
    """
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    return _sample_bilinear(img, *np.meshgrid(rows, cols, indexing="ij"))


def _sample_bilinear(img: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Sample `img` at float coordinates with clamp-to-edge boundaries."""
    h, w = img.shape
    rr = np.clip(rr, 0.0, h - 1.0)
    cc = np.clip(cc, 0.0, w - 1.0)
    r0 = np.floor(rr).astype(np.intp)
    c0 = np.floor(cc).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rr - r0
    fc = cc - c0
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bot = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center, bilinear sampling, clamp-to-edge fill."""
    h, w = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    yc, xc = yy - cy, xx - cx
    src_r = cy + yc * np.cos(theta) - xc * np.sin(theta)
    src_c = cx + yc * np.sin(theta) + xc * np.cos(theta)
    return _sample_bilinear(img, src_r, src_c)


def translate_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer shift with replicated edges."""
    h, w = img.shape
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return img.copy()
    padded = np.pad(img, pad, mode="edge")
    return padded[pad - dy:pad - dy + h, pad - dx:pad - dx + w].copy()


def box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 mean filter with replicated edges."""
    p = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += p[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return out / 9.0


def write_pgm(path, img: np.ndarray) -> None:
    """Dump a 2D array as binary 8-bit PGM, min-max normalized."""
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    norm = (img - lo) / span if span > 0 else np.zeros_like(img)
    data = np.round(norm * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())
