"""Adaptation stages: entropy values, selection rules, tuning behavior, the
variation score against its brute-force oracle, and pipeline reductions."""

import math

import numpy as np
import pytest

from attnadapt import adapt
from attnadapt.adapt import (
    AdaptConfig,
    SampleDiagnostics,
    adapt_and_predict,
    ensemble_predict,
    entropy,
    entropy_loss,
    select_low_entropy,
    tune_prompts,
    tv,
    tv_weights,
)
from attnadapt.attribution import AttentionMap
from attnadapt.model import EncoderConfig, Model, PromptState, class_embeddings, predict_probs
from attnadapt.tensor import Graph, Tensor, backward, finite_difference_grad
from attnadapt.util import derive_seed

MINI = EncoderConfig(image_size=8, patch_size=2, blocks=2, heads=2, embed_dim=8,
                     mlp_ratio=2.0, feature_dim=8, text_dim=8, text_heads=2,
                     n_prompts=2, n_classes=3)


@pytest.fixture(scope="module")
def mini():
    return Model.init(MINI, seed=11)


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------------------
# entropy and selection
# ---------------------------------------------------------------------------

def test_entropy_values():
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy(np.full(10, 0.1)) == pytest.approx(math.log(10.0), rel=1e-12)
    assert entropy([0.5, 0.5]) == pytest.approx(math.log(2.0), rel=1e-12)


def test_select_single_minimum():
    rng = np.random.default_rng(derive_seed("select-min"))
    probs = rng.dirichlet(np.ones(5), size=10)
    sel = select_low_entropy(probs, 0.1)
    assert len(sel.ids) == 1
    assert sel.ids[0] == int(np.argmin(sel.entropies))


def test_select_all_views():
    probs = np.full((7, 4), 0.25)
    sel = select_low_entropy(probs, 1.0)
    assert sel.ids == list(range(7))


def test_select_tie_breaks_to_lower_id():
    probs = np.array([[0.5, 0.5], [0.9, 0.1], [0.5, 0.5], [0.9, 0.1]])
    sel = select_low_entropy(probs, 0.3)  # ceil(1.2) = 2, both low rows tie
    assert sel.ids == [1, 3]
    sel2 = select_low_entropy(probs, 0.8)  # ceil(3.2) = 4 -> everything
    assert sel2.ids == [0, 1, 2, 3]


def test_select_invariants():
    rng = np.random.default_rng(derive_seed("select-inv"))
    for _ in range(50):
        v = int(rng.integers(1, 30))
        ratio = float(rng.uniform(0.05, 1.0))
        probs = rng.dirichlet(np.ones(6), size=v)
        sel = select_low_entropy(probs, ratio)
        assert len(sel.ids) == max(1, math.ceil(ratio * v))
        chosen = sel.entropies[sel.ids]
        others = np.delete(sel.entropies, sel.ids)
        if others.size:
            assert chosen.max() <= others.min() + 1e-15


def test_select_permutation_equivariant():
    rng = np.random.default_rng(derive_seed("select-perm"))
    probs = rng.dirichlet(np.ones(4), size=12)
    sel = select_low_entropy(probs, 0.25)
    perm = rng.permutation(12)
    sel_p = select_low_entropy(probs[perm], 0.25)
    assert sorted(sel.entropies[sel.ids].tolist()) == \
        pytest.approx(sorted(sel_p.entropies[sel_p.ids].tolist()), abs=0)


def test_select_validation():
    with pytest.raises(ValueError):
        select_low_entropy(np.ones((0, 3)), 0.5)
    with pytest.raises(ValueError):
        select_low_entropy(np.ones((3, 3)) / 3.0, 0.0)


# ---------------------------------------------------------------------------
# entropy loss and prompt tuning
# ---------------------------------------------------------------------------

def test_entropy_loss_mean_of_entropies():
    p1 = Tensor(np.array([0.9, 0.1]))
    p2 = Tensor(np.array([0.6, 0.4]))
    expected = (entropy([0.9, 0.1]) + entropy([0.6, 0.4])) / 2.0
    assert entropy_loss([p1, p2]).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        entropy_loss([])


def test_entropy_loss_near_zero_for_confident_views():
    p = Tensor(np.array([1.0 - 1e-12, 1e-12]))
    assert entropy_loss([p]).item() < 1e-10


def test_prompt_gradient_matches_finite_differences(mini):
    rng = np.random.default_rng(derive_seed("grad-LH"))
    feats = rng.normal(size=(3, MINI.feature_dim))

    def loss_of(P_val):
        gcs = class_embeddings(mini, P_val)
        probs = [predict_probs(Tensor(f), gcs, mini.tau) for f in feats]
        return float(entropy_loss(probs).data)

    P0 = mini.params["prompt_default"]
    graph = Graph()
    P = graph.leaf(P0)
    gcs = class_embeddings(mini, P)
    probs = [predict_probs(Tensor(f), gcs, mini.tau) for f in feats]
    analytic = backward(graph, entropy_loss(probs))[P]
    numeric = finite_difference_grad(loss_of, P0, step=1e-6)
    assert rel_err(analytic, numeric).max() < 1e-4


def test_tune_zero_lr_keeps_prompts_bitwise(mini):
    rng = np.random.default_rng(derive_seed("tune-zero"))
    feats = rng.normal(size=(2, MINI.feature_dim))
    state = PromptState.fresh(mini)
    before = state.P.copy()
    tune_prompts(mini, state, feats, steps=3, lr=0.0)
    assert np.array_equal(state.P, before)
    assert state.step == 3


def test_tune_descent_small_sgd_step(mini):
    rng = np.random.default_rng(derive_seed("tune-descent"))

    def loss_at(P_val, feats):
        gcs = class_embeddings(mini, P_val)
        probs = [predict_probs(Tensor(f), gcs, mini.tau) for f in feats]
        return float(entropy_loss(probs).data)

    for trial in range(50):
        feats = rng.normal(size=(2, MINI.feature_dim))
        state = PromptState.fresh(mini)
        before = loss_at(state.P, feats)
        tune_prompts(mini, state, feats, steps=1, lr=1e-4, optimizer="sgd")
        after = loss_at(state.P, feats)
        assert after <= before + 1e-12


def test_tune_two_steps_equals_two_calls(mini):
    rng = np.random.default_rng(derive_seed("tune-carry"))
    feats = rng.normal(size=(2, MINI.feature_dim))
    s1 = PromptState.fresh(mini)
    tune_prompts(mini, s1, feats, steps=2, lr=0.01)
    s2 = PromptState.fresh(mini)
    tune_prompts(mini, s2, feats, steps=1, lr=0.01)
    tune_prompts(mini, s2, feats, steps=1, lr=0.01)
    assert np.array_equal(s1.P, s2.P)
    assert s1.step == s2.step == 2


def test_tune_nonfinite_loss_aborts(mini, caplog):
    feats = np.full((1, MINI.feature_dim), np.nan)
    state = PromptState.fresh(mini)
    before = state.P.copy()
    with caplog.at_level("WARNING"):
        tune_prompts(mini, state, feats, steps=1, lr=0.01)
    assert np.array_equal(state.P, before)
    assert any("non-finite" in r.message for r in caplog.records)


def test_tune_rejects_unknown_optimizer(mini):
    with pytest.raises(ValueError):
        tune_prompts(mini, PromptState.fresh(mini), np.zeros((1, 8)), 1, 0.1,
                     optimizer="lion")


# ---------------------------------------------------------------------------
# total variation and weights
# ---------------------------------------------------------------------------

def tv_bruteforce(grid):
    h, w = grid.shape
    total = 0.0
    for u in range(h - 1):
        for v in range(w):
            total += abs(grid[u + 1, v] - grid[u, v])
    for u in range(h):
        for v in range(w - 1):
            total += abs(grid[u, v + 1] - grid[u, v])
    return total


def test_tv_constant_map_zero():
    assert tv(AttentionMap(np.full((5, 5), 0.3))) == 0.0


def test_tv_raw_worked_example():
    amap = AttentionMap(np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert tv(amap, on_raw=True) == 2.0


def test_tv_matches_bruteforce_oracle():
    rng = np.random.default_rng(derive_seed("tv-oracle"))
    for _ in range(300):
        grid = rng.uniform(0, 1, (8, 8))
        amap = AttentionMap(grid)
        assert abs(tv(amap, on_raw=True) - tv_bruteforce(grid)) <= 1e-12
        norm = grid / grid.sum()
        assert abs(tv(amap) - tv_bruteforce(norm)) <= 1e-12


def test_tv_weights_uniform_for_equal_scores():
    ew = tv_weights([0.7, 0.7, 0.7])
    assert np.array_equal(ew.weights, np.full(3, 1.0 / 3.0))


def test_tv_weights_worked_example():
    ew = tv_weights([1.0, 3.0])
    expected = 1.0 / (1.0 + math.exp(-2.0))
    assert ew.weights[0] == pytest.approx(expected, rel=1e-12)
    assert ew.weights[0] == pytest.approx(0.8807970779778823, rel=1e-12)
    assert ew.weights[1] == pytest.approx(1.0 - expected, rel=1e-12)


def test_tv_weights_singleton():
    assert np.array_equal(tv_weights([2.4]).weights, [1.0])


def test_tv_weights_simplex_and_monotone():
    rng = np.random.default_rng(derive_seed("tvw-props"))
    for _ in range(50):
        tvs = rng.uniform(0, 4, size=int(rng.integers(1, 10)))
        w = tv_weights(tvs).weights
        assert w.min() >= 0.0
        assert abs(w.sum() - 1.0) < 1e-9
        order = np.argsort(tvs)
        paired = w[order]
        for i in range(len(paired) - 1):
            if tvs[order[i]] < tvs[order[i + 1]]:
                assert paired[i] > paired[i + 1]


def test_tv_weights_shift_invariance():
    tvs = np.array([0.3, 1.1, 2.2])
    w1 = tv_weights(tvs).weights
    w2 = tv_weights(tvs + 5.0).weights
    np.testing.assert_allclose(w1, w2, rtol=1e-12)


def test_ensemble_predict_cases():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    cid, combined = ensemble_predict(p[:1], np.array([1.0]))
    assert cid == 1
    cid, _ = ensemble_predict(p, np.array([0.0, 1.0]))
    assert cid == 0
    cid, combined = ensemble_predict(p, np.full(2, 0.5))
    np.testing.assert_allclose(combined, [0.4, 0.6], rtol=1e-15)
    assert cid == 1
    with pytest.raises(ValueError):
        ensemble_predict(p, np.ones(3))


def test_ensemble_tie_breaks_low_class():
    p = np.array([[0.5, 0.5]])
    cid, _ = ensemble_predict(p, np.array([1.0]))
    assert cid == 0


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

def _mini_cfg(**kw):
    base = dict(n_views=6, mask_ratio=0.2, m_high=0.8, m_low=0.2,
                select_ratio=0.25, tune_steps=1, tune_lr=0.005)
    base.update(kw)
    return AdaptConfig(**base)


def test_pipeline_deterministic(mini):
    img = np.random.default_rng(derive_seed("pipe-det")).uniform(0, 1, (8, 8))
    cfg = _mini_cfg()
    p1, d1 = adapt_and_predict(mini, img, cfg, master_seed=5)
    p2, d2 = adapt_and_predict(mini, img, cfg, master_seed=5)
    assert p1 == p2
    assert d1.to_json() == d2.to_json()
    assert d1.n_views == 6 and len(d1.entropies) == 7


def test_pipeline_baseline_matches_reference(mini):
    from reference_tpt import reference_tpt_ensemble
    rng = np.random.default_rng(derive_seed("pipe-base"))
    cfg = _mini_cfg(refine=False, guided_aug=False, tv_weight=False)
    for trial in range(5):
        img = rng.uniform(0, 1, (8, 8))
        pred, diag = adapt_and_predict(mini, img, cfg, master_seed=trial)
        ref_pred, ref_avg = reference_tpt_ensemble(
            mini, img, n_views=6, select_ratio=0.25, tune_steps=1,
            tune_lr=0.005, weight_decay=1e-4, master_seed=trial)
        assert pred == ref_pred
        assert np.array_equal(np.array(diag.combined_probs), ref_avg)


def test_pipeline_flags_reported(mini):
    img = np.random.default_rng(derive_seed("pipe-flags")).uniform(0, 1, (8, 8))
    _, diag = adapt_and_predict(mini, img, _mini_cfg(tv_weight=False), master_seed=1)
    assert diag.flags == {"refine": True, "guided_aug": True, "tv_weight": False}
    assert diag.tvs is None
    assert np.allclose(diag.weights, 1.0 / len(diag.selected))


def test_pipeline_tv_weights_on_selected(mini):
    img = np.random.default_rng(derive_seed("pipe-tv")).uniform(0, 1, (8, 8))
    _, diag = adapt_and_predict(mini, img, _mini_cfg(), master_seed=2)
    assert diag.tvs is not None
    assert len(diag.tvs) == len(diag.selected) == len(diag.weights)
    assert abs(sum(diag.weights) - 1.0) < 1e-9


def test_pipeline_view_failure_excludes_not_aborts(mini, monkeypatch, caplog):
    import attnadapt.adapt as adapt_mod
    real = adapt_mod.rollout_map
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("synthetic view failure")
        return real(*args, **kw)

    monkeypatch.setattr(adapt_mod, "rollout_map", flaky)
    img = np.random.default_rng(derive_seed("pipe-fail")).uniform(0, 1, (8, 8))
    with caplog.at_level("WARNING"):
        pred, diag = adapt_and_predict(mini, img, _mini_cfg(guided_aug=False),
                                       master_seed=3)
    assert len(diag.excluded) == 1
    assert 0 <= pred < MINI.n_classes
    assert any("excluded" in r.message for r in caplog.records)


def test_pipeline_shift_invariant_ensemble(mini):
    # adding a constant to every TV leaves the weighted argmax unchanged
    tvs = np.array([0.5, 1.5, 0.9])
    probs = np.random.default_rng(derive_seed("shift")).dirichlet(np.ones(4), size=3)
    w1 = tv_weights(tvs).weights
    w2 = tv_weights(tvs + 3.3).weights
    p1, _ = ensemble_predict(probs, w1)
    p2, _ = ensemble_predict(probs, w2)
    assert p1 == p2
