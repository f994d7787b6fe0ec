"""Dual-encoder contracts: determinism, capture, probability simplex,
differentiability of the score w.r.t. attention/token/input leaves."""

import math

import numpy as np
import pytest

from attnadapt import tensor as tc
from attnadapt.model import (
    EncoderConfig,
    Model,
    PromptState,
    batch_cross_entropy,
    class_embeddings,
    encode_batch,
    encode_image,
    features_to_probs,
    predict_probs,
    target_logit,
    zero_shot_probs,
)
from attnadapt.tensor import Graph, Tensor, ZeroNormError, backward, finite_difference_grad

MINI = EncoderConfig(image_size=8, patch_size=4, blocks=2, heads=2, embed_dim=8,
                     mlp_ratio=2.0, feature_dim=8, text_dim=8, text_heads=2,
                     n_prompts=2, n_classes=3)


@pytest.fixture(scope="module")
def mini():
    return Model.init(MINI, seed=42)


@pytest.fixture(scope="module")
def toy():
    return Model.init(EncoderConfig(), seed=7)


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(image_size=30, patch_size=4)
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=65, heads=4)
    cfg = EncoderConfig()
    assert cfg.tokens == 65 and cfg.grid == 8


def test_encode_deterministic(mini):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (8, 8))
    f1, _ = encode_image(mini, img)
    f2, _ = encode_image(mini, img)
    assert np.array_equal(f1.data, f2.data)


def test_encode_shape_check(mini):
    with pytest.raises(tc.ShapeMismatchError):
        encode_image(mini, np.zeros((9, 8)))


def test_capture_rows_stochastic(toy):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (32, 32))
    _, cap = encode_image(toy, img, capture=True)
    assert len(cap.attention) == toy.config.blocks
    assert len(cap.tokens) == toy.config.blocks
    for att in cap.attention:
        assert att.data.shape == (4, 65, 65)
        assert np.abs(att.data.sum(axis=-1) - 1.0).max() < 1e-9
        assert att.data.min() >= 0.0


def test_capture_does_not_change_features(toy):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, (32, 32))
    f_plain, _ = encode_image(toy, img)
    f_cap, _ = encode_image(toy, img, capture=True)
    assert np.array_equal(f_plain.data, f_cap.data)


def test_batched_encode_matches_per_image(toy):
    rng = np.random.default_rng(3)
    imgs = rng.uniform(0, 1, (5, 32, 32))
    fb = encode_batch(toy, imgs).data
    for i in range(5):
        fi, _ = encode_image(toy, imgs[i])
        np.testing.assert_allclose(fb[i], fi.data, rtol=1e-12, atol=1e-14)


def test_feature_gradient_wrt_input(mini):
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (8, 8))
    w = rng.normal(size=MINI.feature_dim)

    def f(x):
        feat, _ = encode_image(mini, x)
        return float(feat.data @ w)

    g = Graph()
    leaf = g.leaf(img)
    feat, _ = encode_image(mini, leaf)
    out = tc.sum_axis(tc.hadamard(feat, w))
    analytic = backward(g, out)[leaf]
    numeric = finite_difference_grad(f, img, step=1e-6)
    assert rel_err(analytic, numeric).max() < 1e-4


# ---------------------------------------------------------------------------
# text head
# ---------------------------------------------------------------------------

def test_default_class_embeddings_cached_bit_equal(mini):
    cached = mini.default_class_embeddings()
    fresh = np.stack([g.data for g in class_embeddings(mini, mini.params["prompt_default"])])
    assert np.array_equal(cached, fresh)


def test_perturbing_prompts_changes_embeddings(mini):
    base = mini.default_class_embeddings()
    P = mini.params["prompt_default"] + 0.1
    moved = np.stack([g.data for g in class_embeddings(mini, P)])
    assert np.abs(moved - base).max() > 0


def test_zeroed_head_weights_degenerate(mini):
    z = Model.init(MINI, seed=42)
    for name in list(z.params):
        if name.startswith("txt") and name != "txt_pos":
            z.params[name] = np.zeros_like(z.params[name])
    z.params["class_embed"] = z.params["class_embed"].copy()  # classes still differ
    z.invalidate_cache()
    gcs = z.default_class_embeddings()
    for c in range(1, MINI.n_classes):
        assert np.array_equal(gcs[0], gcs[c])


def test_prompt_state_reset(mini):
    ps = PromptState.fresh(mini)
    assert np.array_equal(ps.P, mini.params["prompt_default"])
    ps.P += 1.0
    ps2 = PromptState.fresh(mini)
    assert np.array_equal(ps2.P, mini.params["prompt_default"])
    assert ps2.step == 0 and not ps2.m.any() and not ps2.v.any()


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def test_predict_probs_symmetric_two_class():
    f = np.array([1.0, 0.0])
    gcs = [Tensor(np.array([1.0, 1.0])), Tensor(np.array([1.0, -1.0]))]
    for tau in (1.0, 0.3, 0.05):
        p = predict_probs(Tensor(f), gcs, tau).data
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)


def test_predict_probs_known_value():
    # cosines (1, 0) at tau=1: softmax -> (e/(e+1), 1/(e+1))
    f = np.array([1.0, 0.0])
    gcs = [Tensor(np.array([2.0, 0.0])), Tensor(np.array([0.0, 3.0]))]
    p = predict_probs(Tensor(f), gcs, 1.0).data
    e = math.e
    np.testing.assert_allclose(p, [e / (e + 1.0), 1.0 / (e + 1.0)], rtol=1e-12)
    np.testing.assert_allclose(p, [0.7310585786300049, 0.2689414213699951], rtol=1e-12)


def test_predict_probs_temperature_monotone():
    rng = np.random.default_rng(5)
    f = rng.normal(size=6)
    gcs = [Tensor(rng.normal(size=6)) for _ in range(4)]
    tops = []
    for tau in (1.0, 0.1, 0.01):
        p = predict_probs(Tensor(f), gcs, tau).data
        tops.append(p.max())
    assert tops[0] < tops[1] < tops[2]
    assert tops[2] > 0.99


def test_predict_probs_simplex_and_scale_invariance():
    rng = np.random.default_rng(6)
    for _ in range(50):
        f = rng.normal(size=5)
        gcs = [Tensor(rng.normal(size=5)) for _ in range(7)]
        p = predict_probs(Tensor(f), gcs, 0.05).data
        assert p.min() >= 0.0
        assert abs(p.sum() - 1.0) < 1e-12
        alpha = float(rng.uniform(0.1, 10.0))
        p2 = predict_probs(Tensor(alpha * f), gcs, 0.05).data
        assert np.abs(p2 - p).max() < 1e-12


def test_predict_probs_zero_norm_errors():
    gcs = [Tensor(np.ones(3)), Tensor(np.ones(3))]
    with pytest.raises(ZeroNormError):
        predict_probs(Tensor(np.zeros(3)), gcs, 1.0)


def test_features_to_probs_matches_batched_and_single():
    rng = np.random.default_rng(7)
    feats = rng.normal(size=(4, 6))
    gcs = rng.normal(size=(3, 6))
    batched = features_to_probs(feats, gcs, 0.1)
    assert batched.shape == (4, 3)
    np.testing.assert_allclose(batched.sum(axis=1), 1.0, atol=1e-12)
    for i in range(4):
        row = features_to_probs(feats[i], gcs, 0.1)
        assert np.array_equal(row, batched[i])


# ---------------------------------------------------------------------------
# target logit and its gradients
# ---------------------------------------------------------------------------

def test_target_logit_defaults_to_argmax(mini):
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (8, 8))
    probs = zero_shot_probs(mini, img)
    S, cap, target, graph = target_logit(mini, img)
    assert target == int(np.argmax(probs))
    assert S.data.shape == ()
    backward(graph, S)
    assert cap.has_grads()
    assert cap.attention_grad(0).shape == (2, 5, 5)
    assert cap.token_grad(1).shape == (5, 8)


def test_target_logit_identical_embeddings_equal_scores(mini):
    m = Model.init(MINI, seed=42)
    m.params["class_embed"] = np.tile(m.params["class_embed"][:1], (MINI.n_classes, 1))
    m.invalidate_cache()
    img = np.random.default_rng(9).uniform(0, 1, (8, 8))
    scores = [target_logit(m, img, target=c)[0].data for c in range(MINI.n_classes)]
    assert np.array_equal(scores[0], scores[1]) and np.array_equal(scores[1], scores[2])


def test_target_logit_rejects_bad_class(mini):
    img = np.random.default_rng(10).uniform(0, 1, (8, 8))
    with pytest.raises(ValueError):
        target_logit(mini, img, target=99)


def _score_with_attention(model, img, block, A_val, target):
    feat, _ = encode_image(model, img, attention_override={block: A_val})
    gcs = [Tensor(g) for g in model.default_class_embeddings()]
    cos = tc.cosine_similarity(feat, gcs[target])
    return float(cos.data) / model.tau


def _score_with_tokens(model, img, block, T_val, target):
    feat, _ = encode_image(model, img, token_override={block: T_val})
    gcs = [Tensor(g) for g in model.default_class_embeddings()]
    cos = tc.cosine_similarity(feat, gcs[target])
    return float(cos.data) / model.tau


def test_attention_gradient_matches_finite_differences(mini):
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(5):
        img = rng.uniform(0, 1, (8, 8))
        S, cap, target, graph = target_logit(mini, img)
        backward(graph, S)
        for block in range(MINI.blocks):
            A0 = cap.attention[block].data
            analytic = cap.attention_grad(block)
            coords = rng.choice(A0.size, size=12, replace=False)
            numeric = finite_difference_grad(
                lambda A: _score_with_attention(mini, img, block, A, target),
                A0, step=1e-6, coords=coords)
            err = rel_err(analytic.ravel()[coords], numeric.ravel()[coords])
            worst = max(worst, err.max())
    assert worst < 1e-4, worst


def test_token_gradient_matches_finite_differences(mini):
    rng = np.random.default_rng(12)
    worst = 0.0
    for trial in range(5):
        img = rng.uniform(0, 1, (8, 8))
        S, cap, target, graph = target_logit(mini, img)
        backward(graph, S)
        for block in range(MINI.blocks):
            T0 = cap.tokens[block].data
            analytic = cap.token_grad(block)
            coords = rng.choice(T0.size, size=12, replace=False)
            numeric = finite_difference_grad(
                lambda T: _score_with_tokens(mini, img, block, T, target),
                T0, step=1e-6, coords=coords)
            err = rel_err(analytic.ravel()[coords], numeric.ravel()[coords])
            worst = max(worst, err.max())
    assert worst < 1e-4, worst


def test_batch_cross_entropy_matches_manual(mini):
    rng = np.random.default_rng(13)
    imgs = rng.uniform(0, 1, (4, 8, 8))
    labels = np.array([0, 1, 2, 0])
    feats = encode_batch(mini, imgs)
    loss = batch_cross_entropy(feats, mini.default_class_embeddings(), labels, mini.tau)
    probs = features_to_probs(feats.data, mini.default_class_embeddings(), mini.tau)
    manual = -np.mean(np.log(probs[np.arange(4), labels]))
    assert loss.item() == pytest.approx(manual, rel=1e-12)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, mini):
    path = tmp_path / "model.bin"
    mini.manifest["metrics"] = {"clean_test_acc": 0.5}
    mini.save(path)
    loaded = Model.load(path)
    assert loaded.config == mini.config
    assert loaded.tau == mini.tau
    assert loaded.param_names() == mini.param_names()
    for name in mini.param_names():
        assert np.array_equal(loaded.params[name], mini.params[name])
    assert loaded.manifest["metrics"]["clean_test_acc"] == 0.5
    assert loaded.content_hash() == mini.content_hash()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTAMODELxxxx")
    with pytest.raises(ValueError):
        Model.load(p)
