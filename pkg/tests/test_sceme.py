import math

import numpy as np
import pytest

from contextguard.errors import CorpusFormatError
from contextguard.numkit import attention_weights, grad_check, gru_step
from contextguard.sceme import (
    ScemeConfig,
    ScemeModel,
    ScemeTrainConfig,
    _forward,
    _heads,
    classifier_accuracy,
    classifier_quality,
    extract_context_profiles,
    load_model,
    message_pass,
    profiles_to_array,
    save_model,
    scene_loss_and_grads,
    train_sceme,
)
from contextguard.synthworld import (
    clone_scene,
    default_world_config,
    detect_batch,
    generate_corpus,
    make_world,
)


@pytest.fixture(scope="module")
def tiny_world():
    cfg = default_world_config(
        num_categories=3,
        feature_dim=8,
        seed=11,
        objects_per_scene=(2, 3),
        proposals_per_object=(1, 3),
        background_rate=1.0,
        noise_scale=1.0,
    )
    return make_world(cfg, seed=11)


@pytest.fixture(scope="module")
def tiny_corpus(tiny_world):
    return generate_corpus(tiny_world, 160, seed=5)


@pytest.fixture(scope="module")
def tiny_model(tiny_world):
    cfg = ScemeConfig(
        feature_dim=8, num_categories=3, attention_dim=6, appearance_dim=4
    )
    return ScemeModel.initialize(cfg, seed=2)


def scene_with_n_regions(corpus, n):
    for scene in corpus.scenes:
        if len(scene.proposals) == n:
            return scene
    raise AssertionError(f"no scene with {n} proposals in fixture corpus")


# ---------------------------------------------------------------------------
# Forward behavior
# ---------------------------------------------------------------------------


def test_single_region_scene_gets_zero_message(tiny_world, tiny_model):
    cfg = default_world_config(
        num_categories=3,
        feature_dim=8,
        seed=1,
        objects_per_scene=(1, 1),
        proposals_per_object=(1, 1),
        background_rate=0.0,
    )
    world = make_world(cfg, seed=1)
    scene = generate_corpus(world, 1, seed=0).scenes[0]
    assert len(scene.proposals) == 1
    pairs = message_pass(tiny_model, scene)
    updated, profile = pairs[0]
    assert np.all(np.isfinite(updated))
    mat = profile.to_matrix()
    assert mat.shape == (5, 8)
    assert np.all(np.isfinite(mat))
    # zero message: the region cell saw a zero vector, equivalent to
    # gru_step on (own features, zeros)
    nxt, reset, update = gru_step(
        scene.proposals[0].node_features, np.zeros(8), tiny_model.region_gru
    )
    np.testing.assert_allclose(profile.gamma_r1, reset, atol=1e-12)
    np.testing.assert_allclose(profile.gamma_u1, update, atol=1e-12)


def test_two_identical_regions_attend_fully_and_match(tiny_corpus, tiny_model):
    scene = clone_scene(scene_with_n_regions(tiny_corpus, 2))
    src = scene.proposals[0]
    dst = scene.proposals[1]
    dst.bbox = src.bbox.copy()
    dst.node_features = src.node_features.copy()
    dst.gt_label = src.gt_label
    dst.pred_label = src.pred_label
    dst.pred_confidence = src.pred_confidence
    x = scene.features_matrix()
    bboxes = np.stack([p.bbox for p in scene.proposals])
    confs = np.array([p.pred_confidence for p in scene.proposals])
    cache = _forward(tiny_model, x, bboxes, confs, scene.scene_features)
    np.testing.assert_allclose(cache["attn"], [[0, 1], [1, 0]], atol=1e-12)
    pairs = message_pass(tiny_model, scene)
    np.testing.assert_array_equal(
        pairs[0][1].to_matrix(), pairs[1][1].to_matrix()
    )


def test_three_region_composition_matches_stepwise_oracle(tiny_corpus, tiny_model):
    scene = scene_with_n_regions(tiny_corpus, 3)
    m = tiny_model
    pairs = message_pass(m, scene)
    x = scene.features_matrix()
    s = scene.scene_features
    encs = []
    for p in scene.proposals:
        geo = [
            p.bbox[0],
            p.bbox[1],
            math.log(p.bbox[2]),
            math.log(p.bbox[3]),
            p.pred_confidence,
        ]
        encs.append(np.concatenate([geo, m.w_appearance @ p.node_features]))
    for i in range(3):
        others = [j for j in range(3) if j != i]
        q = m.w_query @ encs[i]
        keys = [m.w_key @ encs[j] for j in others]
        w = attention_weights(q, keys)
        v = sum(wj * x[j] for wj, j in zip(w, others))
        r1, gr1, gu1 = gru_step(x[i], v, m.region_gru)
        r2, gr2, gu2 = gru_step(x[i], s, m.scene_gru)
        updated, profile = pairs[i]
        np.testing.assert_allclose(updated, 0.5 * (r1 + r2), atol=1e-9)
        np.testing.assert_allclose(profile.gamma_r1, gr1, atol=1e-9)
        np.testing.assert_allclose(profile.gamma_u1, gu1, atol=1e-9)
        np.testing.assert_allclose(profile.gamma_r2, gr2, atol=1e-9)
        np.testing.assert_allclose(profile.gamma_u2, gu2, atol=1e-9)


def test_proposal_permutation_permutes_outputs(tiny_corpus, tiny_model):
    scene = scene_with_n_regions(tiny_corpus, 4)
    perm = [2, 0, 3, 1]
    shuffled = clone_scene(scene)
    shuffled.proposals = [shuffled.proposals[i] for i in perm]
    base = message_pass(tiny_model, scene)
    moved = message_pass(tiny_model, shuffled)
    for new_idx, old_idx in enumerate(perm):
        np.testing.assert_allclose(
            moved[new_idx][0], base[old_idx][0], atol=1e-12
        )
        np.testing.assert_allclose(
            moved[new_idx][1].r, base[old_idx][1].r, atol=1e-12
        )


def test_attention_rows_sum_to_one(tiny_corpus, tiny_model):
    scene = scene_with_n_regions(tiny_corpus, 4)
    x = scene.features_matrix()
    bboxes = np.stack([p.bbox for p in scene.proposals])
    confs = np.array([p.pred_confidence for p in scene.proposals])
    cache = _forward(tiny_model, x, bboxes, confs, scene.scene_features)
    np.testing.assert_allclose(cache["attn"].sum(axis=1), np.ones(4), atol=1e-9)
    assert np.all(np.diag(cache["attn"]) == 0)


def test_profile_gates_in_open_unit_interval(tiny_corpus, tiny_model):
    for scene in tiny_corpus.scenes[:20]:
        for _, profile in message_pass(tiny_model, scene):
            for g in (
                profile.gamma_u1,
                profile.gamma_r1,
                profile.gamma_u2,
                profile.gamma_r2,
            ):
                assert np.all(g > 0) and np.all(g < 1)


def test_updated_is_mean_of_exactly_two_branches(tiny_corpus, tiny_model):
    scene = scene_with_n_regions(tiny_corpus, 3)
    x = scene.features_matrix()
    bboxes = np.stack([p.bbox for p in scene.proposals])
    confs = np.array([p.pred_confidence for p in scene.proposals])
    cache = _forward(tiny_model, x, bboxes, confs, scene.scene_features)
    np.testing.assert_allclose(
        cache["updated"], 0.5 * (cache["region_out"] + cache["scene_out"]), atol=0
    )


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("with_dropout", [False, True])
def test_full_composite_gradient(tiny_corpus, tiny_model, with_dropout):
    scene = scene_with_n_regions(tiny_corpus, 4)
    model = tiny_model
    mask = None
    if with_dropout:
        rng = np.random.default_rng(77)
        mask = (rng.random((4, 8)) >= 0.3) / 0.7

    def objective(params):
        loss, _, _ = scene_loss_and_grads(model, scene, dropout_mask=mask)
        return loss

    loss, grads, _ = scene_loss_and_grads(model, scene, dropout_mask=mask)
    err = grad_check(objective, model.parameters(), grads, epsilon=1e-5)
    assert err < 1e-4


def test_gradient_on_single_region_scene(tiny_model):
    cfg = default_world_config(
        num_categories=3,
        feature_dim=8,
        seed=1,
        objects_per_scene=(1, 1),
        proposals_per_object=(1, 1),
        background_rate=0.0,
    )
    world = make_world(cfg, seed=1)
    scene = generate_corpus(world, 1, seed=3).scenes[0]

    def objective(params):
        loss, _, _ = scene_loss_and_grads(tiny_model, scene)
        return loss

    _, grads, _ = scene_loss_and_grads(tiny_model, scene)
    err = grad_check(objective, tiny_model.parameters(), grads, epsilon=1e-5)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tiny_world, tiny_corpus):
    hyper = ScemeTrainConfig(
        epochs=10,
        learning_rate=5e-4,
        dropout_rate=0.3,
        attention_dim=6,
        appearance_dim=4,
        seed=9,
    )
    return train_sceme(tiny_corpus, tiny_world.stub, hyper)


def test_training_loss_halves(trained):
    assert trained.epoch_losses[-1] <= 0.5 * trained.epoch_losses[0]


def test_trained_classifier_tracks_stub_accuracy(trained, tiny_world):
    heldout = generate_corpus(tiny_world, 60, seed=99)
    feats = np.concatenate([s.features_matrix() for s in heldout.scenes])
    gts = np.concatenate(
        [[p.gt_label for p in s.proposals] for s in heldout.scenes]
    )
    stub_pred, _ = detect_batch(tiny_world.stub, feats)
    stub_acc = float((stub_pred == gts).mean())
    model_acc = classifier_accuracy(trained.model, heldout)
    assert model_acc >= stub_acc - 0.02


def test_zero_epochs_returns_initialized_model(tiny_world, tiny_corpus):
    hyper = ScemeTrainConfig(
        epochs=0, attention_dim=6, appearance_dim=4, seed=9
    )
    result = train_sceme(tiny_corpus, tiny_world.stub, hyper)
    fresh = ScemeModel.initialize(result.model.cfg, seed=9)
    for name, arr in result.model.parameters().items():
        np.testing.assert_array_equal(arr, fresh.parameters()[name])
    assert result.epoch_losses == []


def test_stub_predictions_identical_before_and_after_training(
    tiny_world, tiny_corpus
):
    feats = np.concatenate([s.features_matrix() for s in tiny_corpus.scenes[:40]])
    before_labels, before_conf = detect_batch(tiny_world.stub, feats)
    hyper = ScemeTrainConfig(epochs=2, attention_dim=6, appearance_dim=4, seed=1)
    train_sceme(tiny_corpus, tiny_world.stub, hyper)
    after_labels, after_conf = detect_batch(tiny_world.stub, feats)
    np.testing.assert_array_equal(before_labels, after_labels)
    np.testing.assert_array_equal(before_conf, after_conf)


def test_dropout_model_relies_more_on_context(tiny_world, tiny_corpus):
    # Accuracy sits at ceiling on clean worlds, so the degradation is
    # measured as the cross-entropy increase under corpus-wide context
    # shuffling (both neighbor features and scene node).
    heldout = generate_corpus(tiny_world, 80, seed=42)
    degradation = {}
    for rate in (0.0, 0.5):
        hyper = ScemeTrainConfig(
            epochs=12,
            dropout_rate=rate,
            attention_dim=6,
            appearance_dim=4,
            seed=3,
        )
        model = train_sceme(tiny_corpus, tiny_world.stub, hyper).model
        _, ce_clean = classifier_quality(model, heldout)
        _, ce_shuffled = classifier_quality(model, heldout, shuffle_context_seed=7)
        degradation[rate] = ce_shuffled - ce_clean
    assert degradation[0.5] >= degradation[0.0]


# ---------------------------------------------------------------------------
# Profile extraction
# ---------------------------------------------------------------------------


def test_profile_count_matches_proposal_count(trained, tiny_world, tiny_corpus):
    groups = extract_context_profiles(
        trained.model, tiny_corpus, tiny_world.stub
    )
    assert sum(len(v) for v in groups.values()) == tiny_corpus.total_proposals()


def test_extraction_deterministic(trained, tiny_world, tiny_corpus):
    sub = type(tiny_corpus)(config=tiny_corpus.config, scenes=tiny_corpus.scenes[:10])
    a = extract_context_profiles(trained.model, sub, tiny_world.stub)
    b = extract_context_profiles(trained.model, sub, tiny_world.stub)
    for cat in a:
        assert len(a[cat]) == len(b[cat])
        if a[cat]:
            np.testing.assert_array_equal(
                profiles_to_array(a[cat]), profiles_to_array(b[cat])
            )


def test_grouping_matches_ground_truth_when_stub_is_perfect(tiny_model):
    cfg = default_world_config(
        num_categories=3, feature_dim=8, seed=2, noise_scale=0.2
    )
    world = make_world(cfg, seed=2)
    corpus = generate_corpus(world, 40, seed=1)
    feats = np.concatenate([s.features_matrix() for s in corpus.scenes])
    gts = np.concatenate([[p.gt_label for p in s.proposals] for s in corpus.scenes])
    pred, _ = detect_batch(world.stub, feats)
    assert np.array_equal(pred, gts)  # the low-noise world makes the stub exact
    cfg_model = ScemeConfig(
        feature_dim=8, num_categories=3, attention_dim=6, appearance_dim=4
    )
    model = ScemeModel.initialize(cfg_model, seed=0)
    groups = extract_context_profiles(model, corpus, world.stub)
    counts = {c: int((gts == c).sum()) for c in range(4)}
    assert {c: len(v) for c, v in groups.items()} == counts


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_model_roundtrip(trained, tmp_path):
    path = tmp_path / "model.cgb"
    save_model(trained.model, path)
    again = load_model(path)
    for name, arr in trained.model.parameters().items():
        np.testing.assert_array_equal(arr, again.parameters()[name])
    assert again.cfg == trained.model.cfg


def test_model_load_rejects_dimension_mismatch(trained, tmp_path):
    from contextguard.bundle import read_bundle, write_bundle

    path = tmp_path / "model.cgb"
    save_model(trained.model, path)
    meta, arrays = read_bundle(path)
    arrays["w_query"] = arrays["w_query"][:, :-1]
    bad = tmp_path / "bad.cgb"
    write_bundle(bad, meta, arrays)
    with pytest.raises(CorpusFormatError):
        load_model(bad)
