"""Tiny dual encoder: a patch vision transformer with capturable internals and
a prompt-conditioned class-embedding head scored by temperature-softmaxed
cosine similarity.

The vision side produces a global feature and, on request, an
:class:`EncoderCapture` holding every block's post-softmax attention tensor
and the token matrix entering each block, all registered as watched graph
nodes so their gradients are available after one backward pass.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .tensor import Graph, Tensor

CHECKPOINT_MAGIC = b"DUALENC1"


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the dual encoder. ``tokens`` counts CLS plus patches."""

    image_size: int = 32
    patch_size: int = 4
    blocks: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: float = 2.0
    feature_dim: int = 64
    text_dim: int = 64
    text_heads: int = 2
    n_prompts: int = 4
    n_classes: int = 10

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        side = self.image_size // self.patch_size
        if int(math.isqrt(side * side)) ** 2 != side * side:
            raise ValueError("patch grid must be square")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.text_dim % self.text_heads != 0:
            raise ValueError(f"text_heads {self.text_heads} must divide text_dim {self.text_dim}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return 1 + self.grid * self.grid

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


class EncoderCapture:
    """Per-block attention tensors and entering-token matrices of one forward
    pass; gradients become available after backward on the same graph."""

    def __init__(self, blocks: int):
        self.n_blocks = blocks
        self.attention: list[Tensor] = []
        self.tokens: list[Tensor] = []

    def attention_grad(self, b: int) -> np.ndarray:
        g = self.attention[b].grad
        if g is None:
            raise RuntimeError("attention gradients not populated; run backward first")
        return g

    def token_grad(self, b: int) -> np.ndarray:
        g = self.tokens[b].grad
        if g is None:
            raise RuntimeError("token gradients not populated; run backward first")
        return g

    def has_grads(self) -> bool:
        return all(t.grad is not None for t in self.attention + self.tokens)


@dataclass
class PromptState:
    """Learnable prompt vectors plus optimizer moments, reset per test sample."""

    P: np.ndarray
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step: int = 0

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.P)
        if self.v is None:
            self.v = np.zeros_like(self.P)

    @classmethod
    def fresh(cls, model: "Model") -> "PromptState":
        return cls(P=model.params["prompt_default"].copy())


def _linear_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.w", f"{prefix}.b"


def _block_param_names(prefix: str) -> list[str]:
    names = [f"{prefix}.ln1.g", f"{prefix}.ln1.b"]
    for proj in ("q", "k", "v", "o"):
        names += list(_linear_names(f"{prefix}.{proj}"))
    names += [f"{prefix}.ln2.g", f"{prefix}.ln2.b"]
    names += list(_linear_names(f"{prefix}.fc1"))
    names += list(_linear_names(f"{prefix}.fc2"))
    return names


class Model:
    """Config, named parameter arrays, temperature, and manifest metadata."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray],
                 tau: float = 0.05, manifest: dict | None = None):
        if tau <= 0:
            raise ValueError("tau must be positive")
        self.config = config
        self.params = params
        self.tau = tau
        self.manifest = manifest or {}
        self._default_gcs: np.ndarray | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, tau: float = 0.05) -> "Model":
        rng = np.random.default_rng(seed)
        c = config
        d, dt = c.embed_dim, c.text_dim
        dm = int(d * c.mlp_ratio)
        dmt = int(dt * c.mlp_ratio)
        p: dict[str, np.ndarray] = {}

        def lin(prefix, n_in, n_out):
            p[f"{prefix}.w"] = rng.normal(0.0, 0.02, (n_in, n_out))
            p[f"{prefix}.b"] = np.zeros(n_out)

        def block(prefix, dim, dmlp):
            p[f"{prefix}.ln1.g"] = np.ones(dim)
            p[f"{prefix}.ln1.b"] = np.zeros(dim)
            for proj in ("q", "k", "v", "o"):
                lin(f"{prefix}.{proj}", dim, dim)
            p[f"{prefix}.ln2.g"] = np.ones(dim)
            p[f"{prefix}.ln2.b"] = np.zeros(dim)
            lin(f"{prefix}.fc1", dim, dmlp)
            lin(f"{prefix}.fc2", dmlp, dim)

        lin("patch_proj", c.patch_size * c.patch_size, d)
        p["cls"] = rng.normal(0.0, 0.02, (1, d))
        p["pos"] = rng.normal(0.0, 0.02, (c.tokens, d))
        for b in range(c.blocks):
            block(f"vis{b}", d, dm)
        p["vis_final_ln.g"] = np.ones(d)
        p["vis_final_ln.b"] = np.zeros(d)
        p["vis_proj.w"] = rng.normal(0.0, 0.02, (d, c.feature_dim))

        p["class_embed"] = rng.normal(0.0, 0.02, (c.n_classes, dt))
        p["prompt_default"] = rng.normal(0.0, 0.02, (c.n_prompts, dt))
        p["txt_pos"] = rng.normal(0.0, 0.02, (c.n_prompts + 1, dt))
        block("txt0", dt, dmt)
        p["txt_final_ln.g"] = np.ones(dt)
        p["txt_final_ln.b"] = np.zeros(dt)
        p["txt_proj.w"] = rng.normal(0.0, 0.02, (dt, c.feature_dim))
        return cls(config, p, tau=tau, manifest={"init_seed": seed})

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()},
                     tau=self.tau, manifest=dict(self.manifest))

    # -- default class embeddings (frozen path, cached) ---------------------

    def default_class_embeddings(self) -> np.ndarray:
        """Class embeddings under the pretrained default prompts, cached."""
        if self._default_gcs is None:
            gcs = class_embeddings(self, self.params["prompt_default"])
            self._default_gcs = np.stack([g.data for g in gcs])
            self._default_gcs.flags.writeable = False
        return self._default_gcs

    def invalidate_cache(self):
        self._default_gcs = None

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> Path:
        """Write the little-endian binary checkpoint plus a JSON manifest
        sidecar (config, tau, seed, metrics)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cfg_blob = json.dumps({"config": self.config.to_dict(), "tau": self.tau},
                              sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(cfg_blob)))
            fh.write(cfg_blob)
            fh.write(struct.pack("<I", len(self.params)))
            for name in self.param_names():
                arr = np.ascontiguousarray(self.params[name], dtype="<f8")
                nb = name.encode()
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
                fh.write(arr.tobytes())
        manifest = dict(self.manifest)
        manifest.update({"config": self.config.to_dict(), "tau": self.tau,
                         "format": CHECKPOINT_MAGIC.decode()})
        with open(path.with_suffix(".json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a model checkpoint (bad magic {magic!r})")
            (cfg_len,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(cfg_len))
            config = EncoderConfig.from_dict(header["config"])
            (count,) = struct.unpack("<I", fh.read(4))
            params = {}
            for _ in range(count):
                (nlen,) = struct.unpack("<I", fh.read(4))
                name = fh.read(nlen).decode()
                (rank,) = struct.unpack("<I", fh.read(4))
                shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
                n = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
                params[name] = np.array(arr)
        manifest = {}
        side = path.with_suffix(".json")
        if side.exists():
            manifest = json.loads(side.read_text())
        return cls(config, params, tau=header["tau"], manifest=manifest)

    def content_hash(self) -> str:
        """Digest of config and weights; keys attack caches to the model."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        h.update(struct.pack("<d", self.tau))
        for name in self.param_names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _transformer_block(x: Tensor, getp, prefix: str, heads: int,
                       capture: EncoderCapture | None = None,
                       attn_override: np.ndarray | None = None) -> Tensor:
    """Pre-norm attention + MLP block; optionally records the entering tokens
    and attention tensor, or substitutes a fixed attention tensor."""
    s, d = x.shape
    dh = d // heads
    if capture is not None:
        capture.tokens.append(x.watch())

    h1 = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(x), getp(f"{prefix}.ln1.g")),
                       getp(f"{prefix}.ln1.b"))
    heads_of = {}
    for proj in ("q", "k", "v"):
        y = tc.add_rowvec(tc.matmul(h1, getp(f"{prefix}.{proj}.w")), getp(f"{prefix}.{proj}.b"))
        heads_of[proj] = tc.transpose(tc.reshape(y, (s, heads, dh)), (1, 0, 2))
    scores = tc.scale(tc.matmul(heads_of["q"], tc.transpose(heads_of["k"], (0, 2, 1))),
                      1.0 / math.sqrt(dh))
    attn = tc.softmax_rows(scores)
    if attn_override is not None:
        attn = Tensor(attn_override) if not isinstance(attn_override, Tensor) else attn_override
    if capture is not None:
        capture.attention.append(attn.watch())
    ctx = tc.reshape(tc.transpose(tc.matmul(attn, heads_of["v"]), (1, 0, 2)), (s, d))
    out = tc.add_rowvec(tc.matmul(ctx, getp(f"{prefix}.o.w")), getp(f"{prefix}.o.b"))
    x = tc.add(x, out)

    h2 = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(x), getp(f"{prefix}.ln2.g")),
                       getp(f"{prefix}.ln2.b"))
    h2 = tc.add_rowvec(tc.matmul(h2, getp(f"{prefix}.fc1.w")), getp(f"{prefix}.fc1.b"))
    h2 = tc.gelu(h2)
    h2 = tc.add_rowvec(tc.matmul(h2, getp(f"{prefix}.fc2.w")), getp(f"{prefix}.fc2.b"))
    return tc.add(x, h2)


def encode_image(model: Model, image, *, capture: bool = False,
                 params=None, attention_override: dict[int, np.ndarray] | None = None,
                 token_override: dict[int, np.ndarray] | None = None):
    """Run the vision encoder on one [0,1] grayscale image.

    Returns ``(feature, capture_or_None)``. ``image`` may be a raw array or a
    graph-attached Tensor (for input gradients). ``params`` substitutes
    graph-attached parameter tensors during pretraining. The override hooks
    replace one block's attention tensor or entering tokens with a fixed
    value, which is what lets finite differences treat them as free inputs.
    """
    c = model.config
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if img.shape != (c.image_size, c.image_size):
        raise tc.ShapeMismatchError("encode_image", img.shape,
                                    (c.image_size, c.image_size))
    lookup = params or model.params

    def getp(name):
        return lookup[name]

    g_side = c.grid
    ps = c.patch_size
    patches = tc.reshape(
        tc.transpose(tc.reshape(img, (g_side, ps, g_side, ps)), (0, 2, 1, 3)),
        (g_side * g_side, ps * ps))
    tokens = tc.add_rowvec(tc.matmul(patches, getp("patch_proj.w")), getp("patch_proj.b"))
    tokens = tc.concat_rows(getp("cls"), tokens)
    tokens = tc.add(tokens, getp("pos"))

    cap = EncoderCapture(c.blocks) if capture else None
    for b in range(c.blocks):
        if token_override and b in token_override:
            tokens = Tensor(token_override[b])
        tokens = _transformer_block(
            tokens, getp, f"vis{b}", c.heads, capture=cap,
            attn_override=attention_override.get(b) if attention_override else None)

    tokens = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(tokens), getp("vis_final_ln.g")),
                           getp("vis_final_ln.b"))
    cls_row = tc.slice_rows(tokens, 0, 1)
    feat = tc.reshape(tc.matmul(cls_row, getp("vis_proj.w")), (c.feature_dim,))
    return feat, cap


def _transformer_block_batched(x: Tensor, getp, prefix: str, heads: int) -> Tensor:
    """Same block as :func:`_transformer_block` over a (n, s, d) stack; batch
    and head axes are merged for the attention matmuls. No capture hooks."""
    n, s, d = x.shape
    dh = d // heads
    h1 = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(x), getp(f"{prefix}.ln1.g")),
                       getp(f"{prefix}.ln1.b"))
    heads_of = {}
    for proj in ("q", "k", "v"):
        y = tc.add_rowvec(tc.matmul(h1, getp(f"{prefix}.{proj}.w")), getp(f"{prefix}.{proj}.b"))
        heads_of[proj] = tc.reshape(
            tc.transpose(tc.reshape(y, (n, s, heads, dh)), (0, 2, 1, 3)), (n * heads, s, dh))
    scores = tc.scale(tc.matmul(heads_of["q"], tc.transpose(heads_of["k"], (0, 2, 1))),
                      1.0 / math.sqrt(dh))
    attn = tc.softmax_rows(scores)
    ctx = tc.reshape(
        tc.transpose(tc.reshape(tc.matmul(attn, heads_of["v"]), (n, heads, s, dh)),
                     (0, 2, 1, 3)), (n, s, d))
    out = tc.add_rowvec(tc.matmul(ctx, getp(f"{prefix}.o.w")), getp(f"{prefix}.o.b"))
    x = tc.add(x, out)
    h2 = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(x), getp(f"{prefix}.ln2.g")),
                       getp(f"{prefix}.ln2.b"))
    h2 = tc.add_rowvec(tc.matmul(h2, getp(f"{prefix}.fc1.w")), getp(f"{prefix}.fc1.b"))
    h2 = tc.gelu(h2)
    h2 = tc.add_rowvec(tc.matmul(h2, getp(f"{prefix}.fc2.w")), getp(f"{prefix}.fc2.b"))
    return tc.add(x, h2)


def encode_batch(model: Model, images, *, params=None) -> Tensor:
    """Vision features for a stack of images in one pass, shape (n, feature_dim).

    Functionally the per-image encoder; used where nothing needs capturing
    (pretraining steps, view scoring, batched attacks).
    """
    c = model.config
    imgs = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
    if imgs.data.ndim != 3 or imgs.shape[1:] != (c.image_size, c.image_size):
        raise tc.ShapeMismatchError("encode_batch", imgs.shape,
                                    (-1, c.image_size, c.image_size))
    lookup = params or model.params

    def getp(name):
        return lookup[name]

    n = imgs.shape[0]
    g_side, ps = c.grid, c.patch_size
    patches = tc.reshape(
        tc.transpose(tc.reshape(imgs, (n, g_side, ps, g_side, ps)), (0, 1, 3, 2, 4)),
        (n * g_side * g_side, ps * ps))
    tokens = tc.reshape(
        tc.add_rowvec(tc.matmul(patches, getp("patch_proj.w")), getp("patch_proj.b")),
        (n, g_side * g_side, c.embed_dim))
    cls = getp("cls")
    cls_vec = tc.reshape(cls, (c.embed_dim,)) if isinstance(cls, Tensor) else cls.reshape(-1)
    tokens = tc.prepend_row(tokens, cls_vec)
    tokens = tc.add_mat(tokens, getp("pos"))
    for b in range(c.blocks):
        tokens = _transformer_block_batched(tokens, getp, f"vis{b}", c.heads)
    tokens = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(tokens), getp("vis_final_ln.g")),
                           getp("vis_final_ln.b"))
    cls_rows = tc.reshape(tc.slice_rows(tc.transpose(tokens, (1, 0, 2)), 0, 1),
                          (n, c.embed_dim))
    return tc.matmul(cls_rows, getp("vis_proj.w"))


def features_to_probs(features: np.ndarray, gcs: np.ndarray, tau: float) -> np.ndarray:
    """Canonical batched scoring: softmaxed cosine/tau over classes.

    This is the probability path every selection and ensembling stage uses,
    so different callers agree bitwise on the same inputs.
    """
    f = np.asarray(features, dtype=np.float64)
    squeeze = f.ndim == 1
    if squeeze:
        f = f[None, :]
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    gn = np.linalg.norm(gcs, axis=1, keepdims=True)
    if fn.min() == 0.0 or gn.min() == 0.0:
        raise tc.ZeroNormError("features_to_probs: zero-norm vector")
    ghat_t = np.ascontiguousarray((gcs / gn).T)
    fhat = f / fn
    # row-at-a-time product: the result must not depend on how callers batch
    # their views, and stacked BLAS kernels round differently than gemv
    logits = np.stack([row @ ghat_t for row in fhat]) / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    return p[0] if squeeze else p


def batch_cross_entropy(features: Tensor, gcs, labels, tau: float) -> Tensor:
    """Mean cross-entropy of cosine/tau scores against integer labels,
    differentiable through ``features`` and (when on-graph) ``gcs``."""
    n = features.shape[0]
    n_classes = gcs.shape[0] if not isinstance(gcs, Tensor) else gcs.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), np.asarray(labels, dtype=int)] = 1.0
    fhat = tc.normalize_rows(features)
    ghat = tc.normalize_rows(gcs)
    logits = tc.scale(tc.matmul(fhat, tc.transpose(ghat)), 1.0 / tau)
    logp = tc.log(tc.softmax_rows(logits))
    return tc.scale(tc.sum_axis(tc.hadamard(logp, onehot)), -1.0 / n)


def class_embeddings(model: Model, P, *, params=None) -> list[Tensor]:
    """Map prompts plus each class token through the text head to one
    feature-space embedding per class; differentiable w.r.t. ``P``."""
    c = model.config
    lookup = params or model.params

    def getp(name):
        return lookup[name]

    P_t = P if isinstance(P, Tensor) else Tensor(np.asarray(P, dtype=np.float64))
    if P_t.shape != (c.n_prompts, c.text_dim):
        raise tc.ShapeMismatchError("class_embeddings", P_t.shape, (c.n_prompts, c.text_dim))
    class_embed = getp("class_embed")
    gcs = []
    for cid in range(c.n_classes):
        e_row = (tc.slice_rows(class_embed, cid, cid + 1) if isinstance(class_embed, Tensor)
                 else Tensor(class_embed[cid:cid + 1]))
        seq = tc.concat_rows(P_t, e_row)
        seq = tc.add(seq, getp("txt_pos"))
        seq = _transformer_block(seq, getp, "txt0", c.text_heads)
        seq = tc.add_rowvec(tc.mul_rowvec(tc.layer_norm(seq), getp("txt_final_ln.g")),
                            getp("txt_final_ln.b"))
        pooled = tc.reshape(tc.mean_axis(seq, axis=0), (1, c.text_dim))
        gcs.append(tc.reshape(tc.matmul(pooled, getp("txt_proj.w")), (c.feature_dim,)))
    return gcs


def predict_probs(feature, gcs, tau: float) -> Tensor:
    """Temperature-softmaxed cosine scores: a probability vector over classes."""
    if tau <= 0:
        raise ValueError("predict_probs: tau must be positive")
    cos = [tc.cosine_similarity(feature, g) for g in gcs]
    row = tc.reshape(tc.scale(tc.stack(cos), 1.0 / tau), (1, len(cos)))
    return tc.reshape(tc.softmax_rows(row), (len(cos),))


def zero_shot_probs(model: Model, image) -> np.ndarray:
    """Probability vector for one image under the default prompts (no graph)."""
    feat, _ = encode_image(model, image)
    gcs = [Tensor(g) for g in model.default_class_embeddings()]
    return predict_probs(feat, gcs, model.tau).data


def target_logit(model: Model, image, P: np.ndarray | None = None,
                 target: int | None = None):
    """Score one class for one image on a fresh graph with capture enabled.

    The returned scalar is cos(feature, g_target)/tau. When ``target`` is
    omitted it defaults to the argmax prediction, the only label-free choice
    at test time. Returns ``(S, capture, target, graph)``; the caller runs
    backward to populate gradients.
    """
    c = model.config
    graph = Graph()
    img_leaf = graph.leaf(np.asarray(image, dtype=np.float64))
    feat, cap = encode_image(model, img_leaf, capture=True)
    if P is None:
        gcs = [Tensor(g) for g in model.default_class_embeddings()]
    else:
        gcs = class_embeddings(model, P)
    cos = [tc.cosine_similarity(feat, g) for g in gcs]
    if target is None:
        target = int(np.argmax([x.data for x in cos]))
    if not (0 <= target < c.n_classes):
        raise ValueError(f"target_logit: class id {target} out of range")
    S = tc.scale(cos[target], 1.0 / model.tau)
    return S, cap, target, graph
