"""CLS-to-patch attribution maps from captured attention.

Two variants share the same skeleton: build one transition matrix per block
(identity plus a clamped, head-averaged weighting of the attention), multiply
transitions across blocks, then read off the CLS row. The gradient-weighted
variant weights attention entries by their own gradients over all blocks; the
token-weighted variant scales attention columns by per-source-token gradient
contributions and keeps only the last two blocks, averaged for stability.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .model import EncoderCapture, Model, target_logit
from .tensor import ShapeMismatchError, backward
from .util import write_pgm

log = logging.getLogger(__name__)


@dataclass
class AttentionMap:
    """Nonnegative G x G attribution grid for one view."""

    grid: np.ndarray
    variant: str = "refined"
    view_id: int | None = None

    def __post_init__(self):
        g = self.grid
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeMismatchError("AttentionMap", g.shape, detail="square grid required")

    def normalized(self) -> np.ndarray:
        """L1-normalized copy; an all-zero grid normalizes to uniform."""
        total = self.grid.sum()
        if total <= 0.0:
            log.warning("attention map sums to zero; treating as uniform")
            return np.full(self.grid.shape, 1.0 / self.grid.size)
        return self.grid / total


def _check_attn_pair(op: str, attn: np.ndarray, other: np.ndarray):
    if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise ShapeMismatchError(op, attn.shape, detail="expected (heads, s, s)")
    if attn.shape != other.shape:
        raise ShapeMismatchError(op, attn.shape, other.shape)


def _row_normalize(mat: np.ndarray) -> np.ndarray:
    return mat / mat.sum(axis=1, keepdims=True)


def gar_transition(attn: np.ndarray, attn_grad: np.ndarray,
                   normalize_rows: bool = True) -> np.ndarray:
    """Identity plus the clamped head-mean of gradient-times-attention."""
    _check_attn_pair("gar_transition", attn, attn_grad)
    weighted = np.maximum((attn_grad * attn).mean(axis=0), 0.0)
    trans = np.eye(attn.shape[1]) + weighted
    return _row_normalize(trans) if normalize_rows else trans


def token_weights(tokens: np.ndarray, token_grad: np.ndarray) -> np.ndarray:
    """Per-source-token weights: clamped token-gradient inner products,
    L1-normalized over all tokens (CLS included).

    Falls back to uniform when every contribution clamps to zero.
    """
    if tokens.ndim != 2 or tokens.shape != token_grad.shape:
        raise ShapeMismatchError("token_weights", tokens.shape, token_grad.shape)
    q = np.einsum("sd,sd->s", tokens, token_grad)
    a = np.maximum(q, 0.0)
    z = a.sum()
    if z <= 0.0:
        log.warning("token_weights: all contributions clamped to zero; using uniform")
        return np.full(tokens.shape[0], 1.0 / tokens.shape[0])
    return a / z


def refined_transition(attn: np.ndarray, weights: np.ndarray,
                       normalize_rows: bool = True) -> np.ndarray:
    """Identity plus the head-mean of column-scaled attention."""
    if attn.ndim != 3 or attn.shape[1] != attn.shape[2]:
        raise ShapeMismatchError("refined_transition", attn.shape, detail="expected (heads, s, s)")
    if weights.shape != (attn.shape[1],):
        raise ShapeMismatchError("refined_transition", attn.shape, weights.shape)
    scaled = (attn * weights).mean(axis=0)
    clamped = np.maximum(scaled, 0.0)
    # nonnegative attention times nonnegative weights: the clamp must not bite
    assert np.array_equal(clamped, scaled), "refined_transition: negative entries"
    trans = np.eye(attn.shape[1]) + clamped
    return _row_normalize(trans) if normalize_rows else trans


def _cls_row_to_grid(rollout: np.ndarray, variant: str, view_id) -> AttentionMap:
    cls = rollout[0, 1:]
    side = math.isqrt(cls.size)
    if side * side != cls.size:
        raise ShapeMismatchError("rollout", rollout.shape, detail="patch count not square")
    return AttentionMap(grid=cls.reshape(side, side).copy(), variant=variant, view_id=view_id)


def gar_rollout(capture: EncoderCapture, normalize_rows: bool = True,
                view_id: int | None = None) -> AttentionMap:
    """Gradient-weighted rollout across all blocks; later blocks compose on
    the left, so the CLS row attributes the final representation to inputs."""
    if not capture.has_grads():
        raise RuntimeError("gar_rollout: capture has no gradients; run backward first")
    rollout = None
    for b in range(capture.n_blocks):
        trans = gar_transition(capture.attention[b].data, capture.attention_grad(b),
                               normalize_rows=normalize_rows)
        rollout = trans if rollout is None else trans @ rollout
    return _cls_row_to_grid(rollout, "gar", view_id)


def refined_rollout(capture: EncoderCapture, normalize_rows: bool = True,
                    view_id: int | None = None) -> AttentionMap:
    """Token-weighted rollout over the last two blocks with their average as
    the stabilizing right factor."""
    if capture.n_blocks < 2:
        raise ValueError("refined_rollout requires at least two blocks")
    if not capture.has_grads():
        raise RuntimeError("refined_rollout: capture has no gradients; run backward first")
    trans = []
    for b in (capture.n_blocks - 2, capture.n_blocks - 1):
        w = token_weights(capture.tokens[b].data, capture.token_grad(b))
        trans.append(refined_transition(capture.attention[b].data, w,
                                        normalize_rows=normalize_rows))
    avg = (trans[0] + trans[1]) / 2.0
    return _cls_row_to_grid(trans[1] @ avg, "refined", view_id)


def attention_distance(map_a: AttentionMap, map_b: AttentionMap) -> float:
    """L1 distance between L1-normalized maps; ranges over [0, 2]."""
    if map_a.grid.shape != map_b.grid.shape:
        raise ShapeMismatchError("attention_distance", map_a.grid.shape, map_b.grid.shape)
    return float(np.abs(map_a.normalized() - map_b.normalized()).sum())


def rollout_map(model: Model, image, variant: str = "refined",
                P: np.ndarray | None = None, target: int | None = None,
                normalize_rows: bool = True, view_id: int | None = None) -> AttentionMap:
    """Attribution map for one image: forward with capture, backward from the
    class score (argmax by default), then the requested rollout."""
    if variant not in ("gar", "refined"):
        raise ValueError(f"unknown attribution variant {variant!r}")
    S, cap, _, graph = target_logit(model, image, P=P, target=target)
    backward(graph, S)
    if variant == "gar":
        return gar_rollout(cap, normalize_rows=normalize_rows, view_id=view_id)
    return refined_rollout(cap, normalize_rows=normalize_rows, view_id=view_id)


def map_to_pgm(amap: AttentionMap, path) -> None:
    write_pgm(path, amap.grid)


def map_to_csv(amap: AttentionMap, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(amap.grid.tolist())
