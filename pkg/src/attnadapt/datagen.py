"""Synthetic fine-grained classification data and toy pretraining.

Every class shares the same background family (smoothed noise) and differs
only by a small high-intensity glyph stamped at a jittered position, so the
class signal lives in one compact region. Images regenerate bitwise from
(spec, seed); the canonical artifact is the spec JSON, never image files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .attribution import AttentionMap
from .augment import upsample_nearest
from .model import Model, batch_cross_entropy, class_embeddings, encode_batch, features_to_probs
from .tensor import Graph, backward
from .util import adam_step, bilinear_resize, rng_from, stable_hash, write_pgm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    train_per_class: int = 500
    test_per_class: int = 200
    image_size: int = 32
    glyph_size: int = 8
    margin: int = 2
    bg_grid: int = 8
    bg_lo: float = 0.2
    bg_hi: float = 0.7
    noise: float = 0.03
    glyph_intensity: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.glyph_size > self.image_size - 2 * self.margin:
            raise ValueError("glyph does not fit in the image")
        if self.glyph_size ** 2 > 0.1 * self.image_size ** 2:
            raise ValueError("glyph exceeds 10% of the image area")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "SyntheticSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray  # (n, 4) glyph bounds: r0, c0, r1, c1 (exclusive)
    split: str
    spec_hash: str

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n], self.boxes[:n],
                       self.split, self.spec_hash)


def _glyph_mask(cls: int, g: int) -> np.ndarray:
    """Procedural glyph for one class on a g x g stencil: bars, diagonals,
    crosses, rings, discs, corners."""
    rr, cc = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    mid0, mid1 = g // 2 - 1, g // 2
    center = (g - 1) / 2.0
    dist = np.sqrt((rr - center) ** 2 + (cc - center) ** 2)
    band = (rr == mid0) | (rr == mid1)
    pole = (cc == mid0) | (cc == mid1)
    diag = np.abs(rr - cc) <= 1
    anti = np.abs(rr + cc - (g - 1)) <= 1
    shapes = [
        band,                                   # 0 horizontal bar
        pole,                                   # 1 vertical bar
        diag,                                   # 2 diagonal bar
        anti,                                   # 3 anti-diagonal bar
        band | pole,                            # 4 plus
        diag | anti,                            # 5 x-cross
        (dist >= center - 1.6) & (dist <= center - 0.1),  # 6 ring
        dist <= center - 1.2,                   # 7 disc
        (cc <= 1) | (rr >= g - 2),              # 8 corner L
        (rr <= 1) | pole,                       # 9 T shape
    ]
    return shapes[cls % len(shapes)].astype(np.float64)


def _render(spec: SyntheticSpec, cls: int, split: str, idx: int,
            erase_glyph: bool = False) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    rng = rng_from(spec.seed, split, cls, idx)
    coarse = rng.uniform(0.0, 1.0, (spec.bg_grid, spec.bg_grid))
    bg = bilinear_resize(coarse, spec.image_size, spec.image_size)
    img = spec.bg_lo + bg * (spec.bg_hi - spec.bg_lo)
    img += rng.normal(0.0, spec.noise, img.shape)
    lo, hi = spec.margin, spec.image_size - spec.glyph_size - spec.margin
    r0 = int(rng.integers(lo, hi + 1))
    c0 = int(rng.integers(lo, hi + 1))
    if not erase_glyph:
        mask = _glyph_mask(cls, spec.glyph_size)
        patch = img[r0:r0 + spec.glyph_size, c0:c0 + spec.glyph_size]
        wobble = rng.normal(0.0, 0.01, mask.shape)
        img[r0:r0 + spec.glyph_size, c0:c0 + spec.glyph_size] = np.where(
            mask > 0, spec.glyph_intensity + wobble, patch)
    return np.clip(img, 0.0, 1.0), (r0, c0, r0 + spec.glyph_size, c0 + spec.glyph_size)


def generate(spec: SyntheticSpec, erase_glyphs: bool = False) -> tuple[Dataset, Dataset]:
    """Build the train and test splits, class-interleaved so any prefix of a
    split is class-balanced (up to a multiple of the class count)."""
    shash = stable_hash(spec.to_dict())[:16]
    out = []
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        n = per_class * spec.classes
        images = np.empty((n, spec.image_size, spec.image_size))
        labels = np.empty(n, dtype=int)
        boxes = np.empty((n, 4), dtype=int)
        for i in range(n):
            cls, idx = i % spec.classes, i // spec.classes
            images[i], boxes[i] = _render(spec, cls, split, idx, erase_glyphs)
            labels[i] = cls
        out.append(Dataset(images, labels, boxes, split, shash))
    return out[0], out[1]


def export_pgm(ds: Dataset, out_dir, count: int = 16) -> list[Path]:
    paths = []
    for i in range(min(count, len(ds))):
        p = Path(out_dir) / f"{ds.split}_{i:04d}_c{ds.labels[i]}.pgm"
        write_pgm(p, ds.images[i])
        paths.append(p)
    return paths


def localization_score(amap: AttentionMap, box, image_hw: tuple[int, int]) -> float:
    """Fraction of normalized attention mass inside the glyph box."""
    h, w = image_hw
    r0, c0, r1, c1 = (int(v) for v in box)
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"localization_score: box {box} outside {image_hw}")
    total = amap.grid.sum()
    if total <= 0.0:
        log.warning("localization_score: zero-mass map")
        return 0.0
    up = upsample_nearest(amap.grid, h, w)
    return float(up[r0:r1, c0:c1].sum() / up.sum())


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def zero_shot_accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
                       chunk: int = 64) -> float:
    """Accuracy of the frozen zero-shot path; chunk size is fixed so every
    caller computes bit-identical scores."""
    gcs = model.default_class_embeddings()
    hits = 0
    for i in range(0, len(images), chunk):
        feats = encode_batch(model, images[i:i + chunk]).data
        probs = features_to_probs(feats, gcs, model.tau)
        hits += int((probs.argmax(axis=1) == labels[i:i + chunk]).sum())
    return hits / len(images)


def pretrain(model: Model, train: Dataset, *, epochs: int, lr: float = 1e-3,
             batch_size: int = 16, seed: int = 0,
             eval_data: Dataset | None = None) -> tuple[Model, dict]:
    """Jointly train encoder, text head, class tokens, and default prompts by
    cross-entropy over the cosine scores.

    Divergence (non-finite loss) aborts and returns the last epoch-end
    snapshot. Records per-epoch losses and, at the end, the zero-shot test
    accuracy that the evaluation path reproduces exactly.
    """
    model = model.copy()
    metrics: dict = {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                     "train_seed": seed, "epoch_loss": []}
    if epochs <= 0:
        if eval_data is not None:
            model.invalidate_cache()
            metrics["clean_test_acc"] = zero_shot_accuracy(
                model, eval_data.images, eval_data.labels)
        model.manifest.update({"pretrain": metrics})
        return model, metrics

    rng = np.random.default_rng(seed)
    moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in model.params.items()}
    step = 0
    last_good = {k: v.copy() for k, v in model.params.items()}
    diverged = False
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start:start + batch_size]
            graph = Graph()
            leaves = {k: graph.leaf(v) for k, v in model.params.items()}
            gcs = class_embeddings(model, leaves["prompt_default"], params=leaves)
            feats = encode_batch(model, train.images[sel], params=leaves)
            loss = batch_cross_entropy(feats, tc.stack(gcs), train.labels[sel], model.tau)
            if not np.isfinite(loss.data):
                log.error("pretrain: non-finite loss at epoch %d; reverting to last snapshot", epoch)
                model.params = last_good
                diverged = True
                break
            grads = backward(graph, loss)
            step += 1
            for name, leaf in leaves.items():
                m, v = moments[name]
                model.params[name] = adam_step(model.params[name], grads[leaf],
                                               m, v, step, lr)
            losses.append(float(loss.data))
        if diverged:
            break
        metrics["epoch_loss"].append(float(np.mean(losses)))
        last_good = {k: v.copy() for k, v in model.params.items()}
        log.info("pretrain epoch %d/%d: loss %.4f", epoch + 1, epochs,
                 metrics["epoch_loss"][-1])
    metrics["diverged"] = diverged
    model.invalidate_cache()
    if eval_data is not None:
        metrics["clean_test_acc"] = zero_shot_accuracy(
            model, eval_data.images, eval_data.labels)
        log.info("pretrain: clean test accuracy %.4f", metrics["clean_test_acc"])
    model.manifest.update({"pretrain": metrics})
    return model, metrics
