import numpy as np
import pytest

from contextguard.errors import CorpusFormatError, DegenerateWorldError
from contextguard.synthworld import (
    Corpus,
    DetectorStub,
    WorldConfig,
    default_world_config,
    detect_batch,
    detect_second_stage,
    generate_corpus,
    iou,
    load_corpus,
    load_world,
    make_world,
    save_corpus,
    save_world,
)


@pytest.fixture(scope="module")
def small_world():
    cfg = default_world_config(num_categories=4, feature_dim=16, seed=3)
    return make_world(cfg, seed=3)


def corpora_equal(a: Corpus, b: Corpus) -> bool:
    if len(a.scenes) != len(b.scenes):
        return False
    for sa, sb in zip(a.scenes, b.scenes):
        if sa.scene_id != sb.scene_id or sa.anchor_category != sb.anchor_category:
            return False
        if not np.array_equal(sa.scene_features, sb.scene_features):
            return False
        if len(sa.objects) != len(sb.objects) or len(sa.proposals) != len(sb.proposals):
            return False
        for oa, ob in zip(sa.objects, sb.objects):
            if oa.category != ob.category or not np.array_equal(oa.bbox, ob.bbox):
                return False
        for pa, pb in zip(sa.proposals, sb.proposals):
            if (
                pa.gt_label != pb.gt_label
                or pa.pred_label != pb.pred_label
                or pa.object_index != pb.object_index
                or pa.pred_confidence != pb.pred_confidence
                or not np.array_equal(pa.bbox, pb.bbox)
                or not np.array_equal(pa.node_features, pb.node_features)
            ):
                return False
    return True


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------


def test_degenerate_configs_rejected():
    with pytest.raises(DegenerateWorldError):
        default_world_config(num_categories=1).validate()
    cfg = default_world_config(num_categories=4)
    bad = WorldConfig(**{**cfg.__dict__, "noise_scale": 0.0})
    with pytest.raises(DegenerateWorldError):
        bad.validate()
    asym = np.asarray(cfg.cooccurrence).copy()
    asym[0, 1] = 0.2
    with pytest.raises(DegenerateWorldError):
        WorldConfig(**{**cfg.__dict__, "cooccurrence": asym}).validate()
    with pytest.raises(DegenerateWorldError):
        WorldConfig(**{**cfg.__dict__, "objects_per_scene": (3, 2)}).validate()


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def test_same_seed_identical_corpora(small_world):
    a = generate_corpus(small_world, 20, seed=5)
    b = generate_corpus(small_world, 20, seed=5)
    assert corpora_equal(a, b)
    c = generate_corpus(small_world, 20, seed=6)
    assert not corpora_equal(a, c)


def test_minimal_scene_has_one_object_proposal_and_separate_scene_node():
    cfg = default_world_config(
        num_categories=3,
        feature_dim=8,
        seed=1,
        objects_per_scene=(1, 1),
        proposals_per_object=(1, 1),
        background_rate=0.0,
    )
    world = make_world(cfg, seed=1)
    corpus = generate_corpus(world, 10, seed=0)
    for scene in corpus.scenes:
        assert len(scene.proposals) == 1
        assert scene.proposals[0].object_index == 0
        assert scene.scene_features.shape == (8,)


def test_cooccurrence_conditional_frequency():
    # One isolated strong pair: P(1 | 0 present) works out to
    # 2p/(1+p) = 0.947 for p = 0.9 when no other pair can introduce 0.
    c = 4
    co = np.zeros((c, c))
    co[0, 1] = co[1, 0] = 0.9
    np.fill_diagonal(co, 1.0)
    # objects_per_scene must not bind from below, otherwise partner trimming
    # distorts the conditional; (c, c) pads with duplicates instead.
    cfg = default_world_config(num_categories=c, feature_dim=8, seed=2)
    cfg = WorldConfig(
        **{
            **cfg.__dict__,
            "cooccurrence": co,
            "objects_per_scene": (c, c),
            "background_rate": 0.0,
        }
    )
    world = make_world(cfg, seed=2)
    corpus = generate_corpus(world, 1000, seed=9)
    with_first = [
        s for s in corpus.scenes if any(o.category == 0 for o in s.objects)
    ]
    both = [
        s for s in with_first if any(o.category == 1 for o in s.objects)
    ]
    assert len(with_first) > 200
    assert len(both) / len(with_first) >= 0.85


def test_anchor_conditional_rates_match_config_within_3_sigma():
    cfg = default_world_config(
        num_categories=4,
        feature_dim=8,
        seed=5,
        objects_per_scene=(4, 4),
        background_rate=0.0,
    )
    world = make_world(cfg, seed=5)
    corpus = generate_corpus(world, 1000, seed=4)
    co = np.asarray(cfg.cooccurrence)
    for a in range(4):
        anchored = [s for s in corpus.scenes if s.anchor_category == a]
        n = len(anchored)
        assert n > 100
        for c in range(4):
            if c == a:
                continue
            p = co[a, c]
            rate = np.mean(
                [any(o.category == c for o in s.objects) for s in anchored]
            )
            sd = np.sqrt(p * (1 - p) / n)
            assert abs(rate - p) <= 3 * sd + 1e-9


def test_same_object_proposals_overlap(small_world):
    corpus = generate_corpus(small_world, 60, seed=2)
    for scene in corpus.scenes:
        by_object: dict[int, list] = {}
        for p in scene.proposals:
            if p.object_index is not None:
                by_object.setdefault(p.object_index, []).append(p)
        for props in by_object.values():
            for i in range(len(props)):
                for j in range(i + 1, len(props)):
                    assert iou(props[i].bbox, props[j].bbox) >= 0.5


def test_bboxes_normalized(small_world):
    corpus = generate_corpus(small_world, 40, seed=8)
    for scene in corpus.scenes:
        for p in scene.proposals:
            cx, cy, w, h = p.bbox
            assert w > 0 and h > 0
            assert 0 <= cx - w / 2 and cx + w / 2 <= 1
            assert 0 <= cy - h / 2 and cy + h / 2 <= 1
            assert 0 <= p.gt_label <= small_world.config.background_index


def test_scene_features_composition(small_world):
    corpus = generate_corpus(small_world, 10, seed=3)
    for scene in corpus.scenes:
        present = sorted({o.category for o in scene.objects})
        expected = scene.features_matrix().mean(axis=0)
        expected = expected + small_world.scene_signatures[present].sum(axis=0)
        np.testing.assert_allclose(scene.scene_features, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# Detector stub
# ---------------------------------------------------------------------------


def test_stub_accuracy_on_heldout_regions(small_world):
    corpus = generate_corpus(small_world, 500, seed=123)
    feats, gts = [], []
    for scene in corpus.scenes:
        for p in scene.proposals:
            feats.append(p.node_features)
            gts.append(p.gt_label)
        if len(feats) >= 5000:
            break
    pred, _ = detect_batch(small_world.stub, np.stack(feats))
    assert (pred == np.array(gts)).mean() >= 0.95


def test_exact_prototype_classified_confidently(small_world):
    stub = small_world.stub
    for c in range(stub.num_categories + 1):
        label, conf = detect_second_stage(stub, stub.prototypes[c])
        assert label == c
        assert conf > 0.9


def test_background_prototype_maps_to_background(small_world):
    stub = small_world.stub
    bg = stub.num_categories
    label, _ = detect_second_stage(stub, stub.prototypes[bg])
    assert label == bg


def test_tie_breaks_to_lowest_index():
    stub = DetectorStub(
        prototypes=np.zeros((3, 4)),
        classifier_w=np.zeros((3, 4)),
        classifier_b=np.zeros(3),
    )
    label, conf = detect_second_stage(stub, np.ones(4))
    assert label == 0
    assert conf == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_corpus_roundtrip(small_world, tmp_path):
    corpus = generate_corpus(small_world, 15, seed=7)
    path = tmp_path / "corpus.cgb"
    save_corpus(corpus, path)
    again = load_corpus(path)
    assert corpora_equal(corpus, again)


def test_empty_corpus_roundtrip(small_world, tmp_path):
    corpus = Corpus(config=small_world.config, scenes=[])
    path = tmp_path / "empty.cgb"
    save_corpus(corpus, path)
    again = load_corpus(path)
    assert len(again.scenes) == 0
    assert again.config.num_categories == small_world.config.num_categories


def test_truncated_corpus_errors(small_world, tmp_path):
    corpus = generate_corpus(small_world, 5, seed=7)
    path = tmp_path / "corpus.cgb"
    save_corpus(corpus, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-40])
    with pytest.raises(CorpusFormatError):
        load_corpus(path)


def test_world_roundtrip(small_world, tmp_path):
    path = tmp_path / "world.cgb"
    save_world(small_world, path)
    again = load_world(path)
    np.testing.assert_array_equal(again.stub.prototypes, small_world.stub.prototypes)
    np.testing.assert_array_equal(
        again.scene_signatures, small_world.scene_signatures
    )
    assert again.config.num_categories == small_world.config.num_categories
