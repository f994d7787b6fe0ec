"""L-infinity bounded adversarial examples against the zero-shot classifier.

The attack loss is cross-entropy of the cosine-score probabilities against
the true label, taken with the pretrained default prompts (prompts are reset
and tuned only after attacks). Batched variants share the arithmetic of the
single-sample contract functions: per-image gradients inside a batch differ
only by a positive scale, which sign steps ignore.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .model import Model, batch_cross_entropy, encode_batch, encode_image, predict_probs
from .tensor import Graph, Tensor, backward
from .util import stable_hash

log = logging.getLogger(__name__)

CACHE_MAGIC = b"ADVBATCH"


class NonFiniteGradientError(RuntimeError):
    """Raised when an attack encounters a non-finite input gradient."""


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"                 # "fgsm" | "pgd" | "none"
    eps: float = 4.0 / 255.0          # pixel-unit L-infinity budget
    steps: int = 20
    alpha: float = 0.0                # 0 means the 2.5*eps/steps default
    random_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd", "none"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be positive when steps > 0")
        if self.kind == "pgd" and self.steps > 0 and self.step_size <= 0:
            raise ValueError("alpha must be positive when steps > 0")

    @property
    def step_size(self) -> float:
        if self.alpha > 0:
            return self.alpha
        return 2.5 * self.eps / self.steps if self.steps else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _input_gradient(model: Model, image: np.ndarray, label: int) -> np.ndarray:
    graph = Graph()
    leaf = graph.leaf(image)
    feat, _ = encode_image(model, leaf)
    gcs = [Tensor(g) for g in model.default_class_embeddings()]
    probs = predict_probs(feat, gcs, model.tau)
    onehot = np.zeros(len(gcs))
    onehot[label] = 1.0
    loss = tc.scale(tc.log(tc.sum_axis(tc.hadamard(probs, onehot))), -1.0)
    grad = backward(graph, loss)[leaf]
    if not np.isfinite(grad).all():
        raise NonFiniteGradientError("attack loss gradient is not finite")
    return grad


def _batch_input_gradient(model: Model, images: np.ndarray, labels) -> np.ndarray:
    graph = Graph()
    leaf = graph.leaf(images)
    feats = encode_batch(model, leaf)
    loss = batch_cross_entropy(feats, model.default_class_embeddings(), labels, model.tau)
    grad = backward(graph, loss)[leaf]
    if not np.isfinite(grad).all():
        raise NonFiniteGradientError("attack loss gradient is not finite")
    return grad


def fgsm(image: np.ndarray, label: int, model: Model, eps: float) -> np.ndarray:
    """One sign step of size eps along the loss gradient, clipped to [0, 1]."""
    grad = _input_gradient(model, image, label)
    return np.clip(image + eps * np.sign(grad), 0.0, 1.0)


def pgd(image: np.ndarray, label: int, model: Model, cfg: AttackConfig) -> np.ndarray:
    """Iterated sign ascent projected onto the eps ball and the pixel range."""
    adv = image.copy()
    if cfg.random_init and cfg.eps > 0:
        rng = np.random.default_rng(cfg.seed)
        adv = np.clip(image + rng.uniform(-cfg.eps, cfg.eps, image.shape), 0.0, 1.0)
    for _ in range(cfg.steps):
        grad = _input_gradient(model, adv, label)
        adv = adv + cfg.step_size * np.sign(grad)
        adv = image + np.clip(adv - image, -cfg.eps, cfg.eps)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


def attack_batch(model: Model, images: np.ndarray, labels: np.ndarray,
                 cfg: AttackConfig) -> np.ndarray:
    """Attack a stack of samples with shared forward passes."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if cfg.kind == "none" or cfg.eps == 0.0:
        return images.copy()
    if cfg.kind == "fgsm":
        grad = _batch_input_gradient(model, images, labels)
        return np.clip(images + cfg.eps * np.sign(grad), 0.0, 1.0)
    adv = images.copy()
    if cfg.random_init:
        rng = np.random.default_rng(cfg.seed)
        adv = np.clip(images + rng.uniform(-cfg.eps, cfg.eps, images.shape), 0.0, 1.0)
    for _ in range(cfg.steps):
        grad = _batch_input_gradient(model, adv, labels)
        adv = adv + cfg.step_size * np.sign(grad)
        adv = images + np.clip(adv - images, -cfg.eps, cfg.eps)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


# ---------------------------------------------------------------------------
# attack cache: tensor container + JSON manifest keyed to its inputs
# ---------------------------------------------------------------------------

def cache_key(dataset_seed: int, model_hash: str, cfg: AttackConfig) -> str:
    return stable_hash({"dataset_seed": dataset_seed, "model": model_hash,
                        "attack": cfg.to_dict()})[:16]


def save_attack_batch(path, adv: np.ndarray, labels: np.ndarray,
                      dataset_seed: int, model_hash: str, cfg: AttackConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        for name, arr in (("adv_images", adv), ("labels", labels.astype(np.float64))):
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    manifest = {"dataset_seed": dataset_seed, "model": model_hash,
                "attack": cfg.to_dict(), "count": int(adv.shape[0]),
                "key": cache_key(dataset_seed, model_hash, cfg)}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_attack_batch(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path}: not an attack cache file")
        arrays = {}
        for _ in range(2):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
    manifest = json.loads(path.with_suffix(".json").read_text())
    return arrays["adv_images"], arrays["labels"].astype(int), manifest


def get_or_make_attacks(cache_dir, model: Model, images: np.ndarray,
                        labels: np.ndarray, dataset_seed: int,
                        cfg: AttackConfig, force: bool = False) -> np.ndarray:
    """Load cached adversarial inputs for (dataset seed, model, attack), or
    generate and cache them."""
    key = cache_key(dataset_seed, model.content_hash(), cfg)
    path = Path(cache_dir) / f"attack_{key}.bin"
    if path.exists() and not force:
        adv, cached_labels, manifest = load_attack_batch(path)
        if manifest["count"] == len(images) and np.array_equal(cached_labels, labels):
            log.info("attack cache hit: %s", path.name)
            return adv
        log.warning("attack cache mismatch at %s; regenerating", path.name)
    adv = attack_batch(model, images, labels, cfg)
    save_attack_batch(path, adv, np.asarray(labels), dataset_seed,
                      model.content_hash(), cfg)
    return adv
