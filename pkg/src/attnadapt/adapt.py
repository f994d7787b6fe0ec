"""Test-time adaptation for one sample: score all views, keep the confident
ones, take optimizer steps on the prompts against the mean prediction
entropy, then ensemble the selected views weighted by how smooth their
attribution maps are.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .attribution import AttentionMap, rollout_map
from .augment import build_viewset
from .model import Model, PromptState, class_embeddings, encode_batch, features_to_probs, predict_probs
from .tensor import Graph, Tensor, backward
from .util import adam_step

log = logging.getLogger(__name__)


@dataclass
class SelectionResult:
    """Low-entropy view choice: ids kept (ascending), all entropies, ratio."""

    ids: list[int]
    entropies: np.ndarray
    ratio: float


@dataclass
class EnsembleWeights:
    """Per-view smoothness scores and the softmax weights they induce."""

    tvs: np.ndarray
    weights: np.ndarray


@dataclass
class AdaptConfig:
    """Knobs of the per-sample pipeline (defaults are the shipped settings)."""

    n_views: int = 64
    mask_ratio: float = 0.2
    m_high: float = 0.8
    m_low: float = 0.2
    select_ratio: float = 0.1
    tune_steps: int = 1
    tune_lr: float = 0.005
    optimizer: str = "adamw"
    weight_decay: float = 1e-4
    refine: bool = True
    guided_aug: bool = True
    tv_weight: bool = True
    swap_mix_strengths: bool = False
    tv_on_raw: bool = False
    normalize_rows: bool = True

    @property
    def variant(self) -> str:
        return "refined" if self.refine else "gar"

    def flags(self) -> dict:
        return {"refine": self.refine, "guided_aug": self.guided_aug,
                "tv_weight": self.tv_weight}


def entropy(p) -> float:
    """Shannon entropy in nats with the 0*log(0) := 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def select_low_entropy(probs: np.ndarray, ratio: float) -> SelectionResult:
    """Keep the max(1, ceil(ratio * V)) most confident views; ties at the
    cut go to the lower view id; kept ids are reported in ascending order."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError("select_low_entropy: need a (views, classes) array")
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"select_low_entropy: ratio must be in (0, 1], got {ratio}")
    ents = np.array([entropy(p) for p in probs])
    k = max(1, math.ceil(ratio * probs.shape[0]))
    order = np.lexsort((np.arange(len(ents)), ents))
    ids = sorted(int(i) for i in order[:k])
    return SelectionResult(ids=ids, entropies=ents, ratio=ratio)


def entropy_loss(prob_tensors: list[Tensor]) -> Tensor:
    """Mean per-view entropy as a graph scalar (the tuning objective)."""
    if not prob_tensors:
        raise ValueError("entropy_loss: empty selection")
    ents = [tc.scale(tc.sum_axis(tc.hadamard(p, tc.log(p))), -1.0) for p in prob_tensors]
    return tc.mean_axis(tc.stack(ents))


def tune_prompts(model: Model, state: PromptState, features: np.ndarray,
                 steps: int, lr: float, optimizer: str = "adamw",
                 weight_decay: float = 1e-4) -> PromptState:
    """Run `steps` optimizer updates of the prompts against the mean entropy
    of the given view features (the image encoder does not depend on the
    prompts, so fixed features make the loss exact, not an approximation).

    Mutates and returns `state`; a non-finite loss aborts and leaves the
    prompts as they were.
    """
    if optimizer not in ("adamw", "sgd"):
        raise ValueError(f"tune_prompts: unknown optimizer {optimizer!r}")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    for _ in range(int(steps)):
        graph = Graph()
        P = graph.leaf(state.P)
        gcs = class_embeddings(model, P)
        probs = [predict_probs(Tensor(f), gcs, model.tau) for f in features]
        loss = entropy_loss(probs)
        if not np.isfinite(loss.data):
            log.warning("tune_prompts: non-finite loss %s; aborting tuning", loss.data)
            return state
        grad = backward(graph, loss)[P]
        state.step += 1
        if optimizer == "sgd":
            state.P = state.P - lr * grad
        else:
            state.P = adam_step(state.P, grad, state.m, state.v, state.step,
                                lr, weight_decay=weight_decay)
    return state


def tv(amap: AttentionMap, on_raw: bool = False) -> float:
    """Anisotropic total variation: absolute differences between vertical and
    horizontal neighbors, over the L1-normalized map unless `on_raw`."""
    grid = amap.grid if on_raw else amap.normalized()
    vert = np.abs(np.diff(grid, axis=0)).sum()
    horiz = np.abs(np.diff(grid, axis=1)).sum()
    return float(vert + horiz)


def tv_weights(tvs) -> EnsembleWeights:
    """Softmax over negated variation scores, max-subtracted for stability;
    smoother maps get strictly larger weight."""
    tvs = np.asarray(tvs, dtype=np.float64)
    if tvs.ndim != 1 or tvs.size < 1:
        raise ValueError("tv_weights: need at least one score")
    z = -tvs
    z = z - z.max()
    e = np.exp(z)
    return EnsembleWeights(tvs=tvs, weights=e / e.sum())


def ensemble_predict(probs: np.ndarray, weights: np.ndarray) -> tuple[int, np.ndarray]:
    """Weighted class mixture and its argmax (ties to the lower class id)."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (probs.shape[0],):
        raise ValueError(f"ensemble_predict: {weights.shape} weights for {probs.shape[0]} views")
    combined = weights @ probs
    return int(np.argmax(combined)), combined


@dataclass
class SampleDiagnostics:
    """One JSON-ready record per adapted sample."""

    pred: int
    selected: list[int]
    entropies: list[float]
    tvs: list[float] | None
    weights: list[float]
    combined_probs: list[float]
    flags: dict
    n_views: int
    master_seed: int
    excluded: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def adapt_and_predict(model: Model, image: np.ndarray, cfg: AdaptConfig,
                      master_seed: int) -> tuple[int, SampleDiagnostics]:
    """Full per-sample pipeline; with every component flag off this is the
    plain low-entropy ensemble baseline.

    Stages: build views (attention-guided mixing when enabled), score them
    under the default prompts, select the low-entropy subset, tune prompts,
    re-score the subset, weight views by attribution smoothness (uniform when
    disabled), and return the weighted argmax plus diagnostics.
    """
    vs = build_viewset(image, model, cfg.n_views, cfg.mask_ratio, cfg.m_high,
                       cfg.m_low, master_seed, guided=cfg.guided_aug,
                       variant=cfg.variant, swap_mix_strengths=cfg.swap_mix_strengths,
                       normalize_rows=cfg.normalize_rows)
    features = encode_batch(model, np.stack(vs.mixed)).data
    probs = features_to_probs(features, model.default_class_embeddings(), model.tau)
    selection = select_low_entropy(probs, cfg.select_ratio)

    state = PromptState.fresh(model)
    if cfg.tune_steps > 0:
        tune_prompts(model, state, features[selection.ids], cfg.tune_steps,
                     cfg.tune_lr, cfg.optimizer, cfg.weight_decay)
    gcs_tuned = np.stack([g.data for g in class_embeddings(model, state.P)])
    probs_tuned = features_to_probs(features[selection.ids], gcs_tuned, model.tau)

    kept = list(range(len(selection.ids)))
    excluded: list[int] = []
    tvs_list = None
    if cfg.tv_weight:
        tvs_list = []
        kept = []
        for pos, vid in enumerate(selection.ids):
            try:
                amap = rollout_map(model, vs.mixed[vid], variant=cfg.variant,
                                   P=state.P, normalize_rows=cfg.normalize_rows,
                                   view_id=vid)
                tvs_list.append(tv(amap, on_raw=cfg.tv_on_raw))
                kept.append(pos)
            except Exception as exc:  # a broken view never aborts the sample
                log.warning("view %d excluded from ensemble: %s", vid, exc)
                excluded.append(vid)
        if not kept:
            log.warning("all selected views failed attribution; using uniform weights")
            kept = list(range(len(selection.ids)))
            tvs_list = None

    if tvs_list is not None:
        ew = tv_weights(tvs_list)
    else:
        k = len(kept)
        ew = EnsembleWeights(tvs=np.array([]), weights=np.full(k, 1.0 / k))
    pred, combined = ensemble_predict(probs_tuned[kept], ew.weights)

    diag = SampleDiagnostics(
        pred=pred,
        selected=[selection.ids[p] for p in kept],
        entropies=[float(e) for e in selection.entropies],
        tvs=None if tvs_list is None else [float(t) for t in tvs_list],
        weights=[float(w) for w in ew.weights],
        combined_probs=[float(p) for p in combined],
        flags=cfg.flags(),
        n_views=cfg.n_views,
        master_seed=int(master_seed),
        excluded=excluded,
    )
    return pred, diag
