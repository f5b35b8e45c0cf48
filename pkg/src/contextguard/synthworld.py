"""Synthetic scene corpora with controllable co-occurrence and spatial
structure, plus the frozen detector stand-in that supplies region features
and per-region predictions.

A scene holds objects (category + box), proposals (jittered boxes with
noisy prototype features), optional background regions, and a scene-level
feature vector. Feature space replaces pixels: each category has a
prototype in R^D and region features are prototype plus Gaussian noise, so
the interesting machinery starts where RoI pooling would normally end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bundle import read_bundle, write_bundle
from .errors import CorpusFormatError, DegenerateWorldError, ShapeMismatchError
from .numkit import softmax

CORPUS_FORMAT = "corpus"
WORLD_FORMAT = "world"

# Same-object proposal jitter: center within 7% of the box size, scale
# within 7%. Kept under 10% so any two proposals of one object are
# guaranteed pairwise IoU >= 0.5 in the worst case.
JITTER_CENTER = 0.07
JITTER_SCALE = 0.07


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic world.

    cooccurrence[a, c] is the probability that category c joins a scene
    anchored at category a (each scene draws one uniform anchor category
    and then includes the others independently). The matrix must be
    symmetric with entries in [0, 1]; the diagonal is ignored.
    """

    num_categories: int
    feature_dim: int
    cooccurrence: np.ndarray  # (C, C)
    spatial_offsets: np.ndarray  # (C, C, 2) mean placement relative to the anchor
    objects_per_scene: tuple[int, int] = (2, 4)
    proposals_per_object: tuple[int, int] = (1, 6)
    background_rate: float = 2.0
    noise_scale: float = 1.0
    overlap_fraction: float = 0.5  # share of background boxes placed against an object

    @property
    def background_index(self) -> int:
        return self.num_categories

    def validate(self) -> None:
        c = self.num_categories
        if c < 2:
            raise DegenerateWorldError("need at least 2 categories")
        if self.feature_dim < 4:
            raise DegenerateWorldError("feature_dim must be at least 4")
        if self.noise_scale <= 0:
            raise DegenerateWorldError("noise_scale must be positive")
        co = np.asarray(self.cooccurrence, dtype=float)
        if co.shape != (c, c):
            raise DegenerateWorldError(f"cooccurrence must be ({c}, {c})")
        if np.any(co < 0) or np.any(co > 1):
            raise DegenerateWorldError("cooccurrence entries must lie in [0, 1]")
        if not np.allclose(co, co.T, atol=1e-12):
            raise DegenerateWorldError("cooccurrence matrix must be symmetric")
        if np.asarray(self.spatial_offsets).shape != (c, c, 2):
            raise DegenerateWorldError(f"spatial_offsets must be ({c}, {c}, 2)")
        lo, hi = self.objects_per_scene
        if not (1 <= lo <= hi):
            raise DegenerateWorldError("objects_per_scene range is empty or zero")
        plo, phi = self.proposals_per_object
        if not (1 <= plo <= phi):
            raise DegenerateWorldError("proposals_per_object range is empty or zero")
        if self.background_rate < 0:
            raise DegenerateWorldError("background_rate must be >= 0")
        if not (0.0 <= self.overlap_fraction <= 1.0):
            raise DegenerateWorldError("overlap_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "num_categories": self.num_categories,
            "feature_dim": self.feature_dim,
            "cooccurrence": np.asarray(self.cooccurrence).tolist(),
            "spatial_offsets": np.asarray(self.spatial_offsets).tolist(),
            "objects_per_scene": list(self.objects_per_scene),
            "proposals_per_object": list(self.proposals_per_object),
            "background_rate": self.background_rate,
            "noise_scale": self.noise_scale,
            "overlap_fraction": self.overlap_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        cfg = cls(
            num_categories=int(d["num_categories"]),
            feature_dim=int(d["feature_dim"]),
            cooccurrence=np.asarray(d["cooccurrence"], dtype=float),
            spatial_offsets=np.asarray(d["spatial_offsets"], dtype=float),
            objects_per_scene=tuple(d["objects_per_scene"]),
            proposals_per_object=tuple(d["proposals_per_object"]),
            background_rate=float(d["background_rate"]),
            noise_scale=float(d["noise_scale"]),
            overlap_fraction=float(d["overlap_fraction"]),
        )
        cfg.validate()
        return cfg


def default_world_config(
    num_categories: int = 6,
    feature_dim: int = 32,
    seed: int = 7,
    **overrides,
) -> WorldConfig:
    """Structured default: categories pair up into strongly co-occurring
    couples (0-1, 2-3, ...) with weak cross-pair affinity, and every ordered
    pair gets a stable relative-placement prior."""
    rng = np.random.default_rng(seed)
    c = num_categories
    co = np.full((c, c), 0.15)
    for i in range(0, c - 1, 2):
        co[i, i + 1] = co[i + 1, i] = 0.9
    np.fill_diagonal(co, 1.0)
    offsets = np.zeros((c, c, 2))
    for i in range(c):
        for j in range(i + 1, c):
            angle = rng.uniform(0, 2 * math.pi)
            radius = rng.uniform(0.18, 0.30)
            offsets[i, j] = (radius * math.cos(angle), radius * math.sin(angle))
            offsets[j, i] = -offsets[i, j]
    cfg = WorldConfig(
        num_categories=c,
        feature_dim=feature_dim,
        cooccurrence=co,
        spatial_offsets=offsets,
        **overrides,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Scene data
# ---------------------------------------------------------------------------


@dataclass
class SceneObject:
    category: int
    bbox: np.ndarray  # (4,) cx, cy, w, h, normalized


@dataclass
class RegionProposal:
    bbox: np.ndarray  # (4,) cx, cy, w, h in [0, 1]
    node_features: np.ndarray  # (D,)
    gt_label: int  # category id; background == num_categories
    pred_label: int
    pred_confidence: float
    object_index: int | None  # None for background regions


@dataclass
class Scene:
    scene_id: int
    objects: list[SceneObject]
    proposals: list[RegionProposal]
    scene_features: np.ndarray  # (D,)
    anchor_category: int

    def features_matrix(self) -> np.ndarray:
        return np.stack([p.node_features for p in self.proposals])


@dataclass
class Corpus:
    config: WorldConfig
    scenes: list[Scene]

    def __len__(self) -> int:
        return len(self.scenes)

    def total_proposals(self) -> int:
        return sum(len(s.proposals) for s in self.scenes)


# ---------------------------------------------------------------------------
# Detector stub and world constants
# ---------------------------------------------------------------------------

PROTOTYPE_MIN_MARGIN = 4.0  # in units of noise_scale
STUB_MIN_ACCURACY = 0.95


@dataclass
class DetectorStub:
    """Frozen stand-in for the second stage of a two-stage detector:
    per-category feature prototypes plus an affine classifier head."""

    prototypes: np.ndarray  # (C+1, D); last row is the background prototype
    classifier_w: np.ndarray  # (C+1, D)
    classifier_b: np.ndarray  # (C+1,)

    @property
    def num_categories(self) -> int:
        return self.prototypes.shape[0] - 1

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def margin(self) -> float:
        """Minimum pairwise L2 distance between prototypes."""
        p = self.prototypes
        dists = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        dists[np.diag_indices_from(dists)] = np.inf
        return float(dists.min())


@dataclass
class World:
    """Everything that must be shared by corpora drawn from one world:
    the config, the frozen detector, and per-category scene signatures."""

    config: WorldConfig
    stub: DetectorStub
    scene_signatures: np.ndarray  # (C, D), added to scene features per present category


def detect_second_stage(stub: DetectorStub, features: np.ndarray) -> tuple[int, float]:
    """Classify one region's features. Returns (label, confidence).

    Ties resolve to the lowest category index (argmax picks the first max).
    """
    features = np.asarray(features, dtype=float)
    if features.shape != (stub.feature_dim,):
        raise ShapeMismatchError(
            f"features {features.shape}, expected ({stub.feature_dim},)"
        )
    scores = stub.classifier_w @ features + stub.classifier_b
    probs = softmax(scores)
    label = int(np.argmax(probs))
    return label, float(probs[label])


def detect_batch(
    stub: DetectorStub, features: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized detect_second_stage over (N, D) features."""
    scores = features @ stub.classifier_w.T + stub.classifier_b
    probs = softmax(scores, axis=-1)
    labels = np.argmax(probs, axis=-1)
    confs = probs[np.arange(len(labels)), labels]
    return labels, confs


def make_world(cfg: WorldConfig, seed: int, margin_factor: float = 1.6) -> World:
    """Build the frozen detector and scene signatures for a config.

    Prototypes are Gaussian draws rescaled so the minimum pairwise margin
    is margin_factor * PROTOTYPE_MIN_MARGIN * noise_scale (the factor must
    keep the margin at or above the required minimum); the derived
    classifier is the exact maximum-likelihood rule for prototype+noise
    features. Generation fails if the classifier cannot reach the required
    clean accuracy on a probe sample.
    """
    cfg.validate()
    if margin_factor < 1.0:
        raise DegenerateWorldError("margin_factor must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    c, d = cfg.num_categories, cfg.feature_dim
    prototypes = rng.normal(0.0, 1.0, size=(c + 1, d))
    required = PROTOTYPE_MIN_MARGIN * cfg.noise_scale
    dists = np.linalg.norm(
        prototypes[:, None, :] - prototypes[None, :, :], axis=-1
    )
    dists[np.diag_indices_from(dists)] = np.inf
    current = float(dists.min())
    if current <= 0:
        raise DegenerateWorldError("degenerate prototype draw")
    prototypes *= margin_factor * required / current
    stub = DetectorStub(
        prototypes=prototypes,
        classifier_w=prototypes.copy(),
        classifier_b=-0.5 * (prototypes**2).sum(axis=1),
    )
    if stub.margin() < required:
        raise DegenerateWorldError(
            f"prototype margin {stub.margin():.3f} below required {required:.3f}"
        )
    signatures = rng.normal(0.0, 0.5 * cfg.noise_scale, size=(c, d))
    world = World(config=cfg, stub=stub, scene_signatures=signatures)

    acc = _probe_accuracy(world, rng, n_samples=2000)
    if acc < STUB_MIN_ACCURACY:
        raise DegenerateWorldError(
            f"stub accuracy {acc:.3f} below {STUB_MIN_ACCURACY} on probe sample"
        )
    return world


def _probe_accuracy(world: World, rng: np.random.Generator, n_samples: int) -> float:
    cfg = world.config
    labels = rng.integers(0, cfg.num_categories + 1, size=n_samples)
    base = world.stub.prototypes[labels] + rng.normal(
        0.0, cfg.noise_scale, size=(n_samples, cfg.feature_dim)
    )
    feats = base + rng.normal(
        0.0, 0.5 * cfg.noise_scale, size=(n_samples, cfg.feature_dim)
    )
    pred, _ = detect_batch(world.stub, feats)
    return float((pred == labels).mean())


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------


def iou(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax1, ay1 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx1, by1 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return float(inter / union) if union > 0 else 0.0


def _clip_box(cx: float, cy: float, w: float, h: float) -> np.ndarray:
    w = float(np.clip(w, 0.02, 0.9))
    h = float(np.clip(h, 0.02, 0.9))
    cx = float(np.clip(cx, w / 2 + 0.01, 0.99 - w / 2))
    cy = float(np.clip(cy, h / 2 + 0.01, 0.99 - h / 2))
    return np.array([cx, cy, w, h])


def _base_size(category: int) -> float:
    return 0.12 + 0.03 * (category % 3)


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


def generate_corpus(world: World, n_scenes: int, seed: int) -> Corpus:
    """Draw `n_scenes` scenes from the world, fully determined by `seed`.

    Per scene: a uniform anchor category, co-occurring partners per the
    config matrix, instance counts clamped to objects_per_scene, spatially
    structured placement, per-object jittered proposals sharing a feature
    base, Poisson background regions, and scene features equal to the mean
    proposal feature plus the signatures of the present categories.
    """
    if n_scenes < 1:
        raise DegenerateWorldError("n_scenes must be >= 1")
    cfg = world.config
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0]))
    scenes = [_generate_scene(world, i, rng) for i in range(n_scenes)]
    return Corpus(config=cfg, scenes=scenes)


def _generate_scene(world: World, scene_id: int, rng: np.random.Generator) -> Scene:
    cfg = world.config
    c, d, sigma = cfg.num_categories, cfg.feature_dim, cfg.noise_scale
    bg = cfg.background_index

    anchor = int(rng.integers(0, c))
    present = [anchor]
    for cat in range(c):
        if cat != anchor and rng.random() < cfg.cooccurrence[anchor, cat]:
            present.append(cat)

    lo, hi = cfg.objects_per_scene
    target = int(rng.integers(lo, hi + 1))
    categories = list(present)
    if len(categories) > target:
        keep = list(rng.choice(len(categories) - 1, size=target - 1, replace=False) + 1)
        categories = [categories[0]] + [categories[i] for i in sorted(keep)]
    while len(categories) < target:
        categories.append(int(rng.choice(present)))

    # Placement: anchor roams the middle, everything else sits at its
    # configured offset from the anchor. Retry placements that overlap an
    # existing object too much so benign scenes stay mostly disjoint.
    objects: list[SceneObject] = []
    anchor_center = rng.uniform(0.3, 0.7, size=2)
    for idx, cat in enumerate(categories):
        size = _base_size(cat) * (1.0 + rng.uniform(-0.2, 0.2))
        placed = None
        for _ in range(8):
            if idx == 0:
                center = anchor_center + rng.normal(0.0, 0.02, size=2)
            else:
                center = (
                    anchor_center
                    + cfg.spatial_offsets[anchor, cat]
                    + rng.normal(0.0, 0.05, size=2)
                )
            box = _clip_box(center[0], center[1], size, size)
            if all(iou(box, o.bbox) <= 0.3 for o in objects):
                placed = box
                break
        objects.append(SceneObject(category=cat, bbox=placed if placed is not None else box))

    proposals: list[RegionProposal] = []
    plo, phi = cfg.proposals_per_object
    for obj_idx, obj in enumerate(objects):
        base_feat = world.stub.prototypes[obj.category] + rng.normal(0, sigma, size=d)
        n_prop = int(rng.integers(plo, phi + 1))
        for _ in range(n_prop):
            cx = obj.bbox[0] + rng.uniform(-JITTER_CENTER, JITTER_CENTER) * obj.bbox[2]
            cy = obj.bbox[1] + rng.uniform(-JITTER_CENTER, JITTER_CENTER) * obj.bbox[3]
            w = obj.bbox[2] * (1.0 + rng.uniform(-JITTER_SCALE, JITTER_SCALE))
            h = obj.bbox[3] * (1.0 + rng.uniform(-JITTER_SCALE, JITTER_SCALE))
            feat = base_feat + rng.normal(0, 0.5 * sigma, size=d)
            proposals.append(
                RegionProposal(
                    bbox=np.array([cx, cy, w, h]),
                    node_features=feat,
                    gt_label=obj.category,
                    pred_label=-1,
                    pred_confidence=0.0,
                    object_index=obj_idx,
                )
            )

    n_bg = int(rng.poisson(cfg.background_rate))
    for _ in range(n_bg):
        if objects and rng.random() < cfg.overlap_fraction:
            obj = objects[int(rng.integers(0, len(objects)))]
            target_iou = rng.uniform(0.05, 0.55)
            # For equal boxes shifted along one axis, IoU = (1-s)/(1+s)
            # with s the shift in box units; invert for the target.
            shift = (1.0 - target_iou) / (1.0 + target_iou)
            direction = rng.integers(0, 4)
            dx = shift * obj.bbox[2] * (1 if direction == 0 else -1 if direction == 1 else 0)
            dy = shift * obj.bbox[3] * (1 if direction == 2 else -1 if direction == 3 else 0)
            box = _clip_box(
                obj.bbox[0] + dx, obj.bbox[1] + dy, obj.bbox[2], obj.bbox[3]
            )
        else:
            size = rng.uniform(0.08, 0.2)
            box = _clip_box(rng.uniform(0, 1), rng.uniform(0, 1), size, size)
        feat = world.stub.prototypes[bg] + rng.normal(0, sigma, size=d)
        proposals.append(
            RegionProposal(
                bbox=box,
                node_features=feat,
                gt_label=bg,
                pred_label=-1,
                pred_confidence=0.0,
                object_index=None,
            )
        )

    features = np.stack([p.node_features for p in proposals])
    labels, confs = detect_batch(world.stub, features)
    for p, lab, conf in zip(proposals, labels, confs):
        p.pred_label = int(lab)
        p.pred_confidence = float(conf)

    present_set = sorted(set(categories))
    scene_features = features.mean(axis=0) + world.scene_signatures[present_set].sum(
        axis=0
    )
    return Scene(
        scene_id=scene_id,
        objects=objects,
        proposals=proposals,
        scene_features=scene_features,
        anchor_category=anchor,
    )


def refresh_predictions(scene: Scene, stub: DetectorStub, indices=None) -> None:
    """Re-run the frozen detector over (a subset of) a scene's proposals."""
    which = range(len(scene.proposals)) if indices is None else indices
    for i in which:
        p = scene.proposals[i]
        label, conf = detect_second_stage(stub, p.node_features)
        p.pred_label = label
        p.pred_confidence = conf


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _corpus_arrays(corpus: Corpus) -> tuple[dict, dict[str, np.ndarray]]:
    scenes = corpus.scenes
    prop_counts = [len(s.proposals) for s in scenes]
    obj_counts = [len(s.objects) for s in scenes]
    if scenes:
        bboxes = np.concatenate([[p.bbox for p in s.proposals] for s in scenes])
        feats = np.concatenate([s.features_matrix() for s in scenes])
        gt = np.concatenate([[p.gt_label for p in s.proposals] for s in scenes])
        pred = np.concatenate([[p.pred_label for p in s.proposals] for s in scenes])
        conf = np.concatenate(
            [[p.pred_confidence for p in s.proposals] for s in scenes]
        )
        obj_idx = np.concatenate(
            [
                [-1 if p.object_index is None else p.object_index for p in s.proposals]
                for s in scenes
            ]
        )
        obj_cat = np.concatenate([[o.category for o in s.objects] for s in scenes])
        obj_box = np.concatenate([[o.bbox for o in s.objects] for s in scenes])
        scene_feats = np.stack([s.scene_features for s in scenes])
        scene_ids = np.array([s.scene_id for s in scenes])
        anchors = np.array([s.anchor_category for s in scenes])
    else:
        d = corpus.config.feature_dim
        bboxes = np.zeros((0, 4))
        feats = np.zeros((0, d))
        gt = pred = obj_idx = obj_cat = np.zeros(0, dtype=np.int64)
        conf = np.zeros(0)
        obj_box = np.zeros((0, 4))
        scene_feats = np.zeros((0, d))
        scene_ids = anchors = np.zeros(0, dtype=np.int64)
    arrays = {
        "prop_bbox": bboxes,
        "prop_features": feats,
        "prop_gt": np.asarray(gt, dtype=np.int64),
        "prop_pred": np.asarray(pred, dtype=np.int64),
        "prop_conf": conf,
        "prop_object": np.asarray(obj_idx, dtype=np.int64),
        "prop_offsets": np.cumsum([0] + prop_counts).astype(np.int64),
        "obj_category": np.asarray(obj_cat, dtype=np.int64),
        "obj_bbox": obj_box,
        "obj_offsets": np.cumsum([0] + obj_counts).astype(np.int64),
        "scene_features": scene_feats,
        "scene_ids": scene_ids,
        "anchors": anchors,
    }
    meta = {"config": corpus.config.to_dict(), "n_scenes": len(scenes)}
    return meta, arrays


def corpus_payload(corpus: Corpus) -> tuple[dict, dict[str, np.ndarray]]:
    """Meta and arrays for embedding a corpus in a container file."""
    return _corpus_arrays(corpus)


def corpus_from_payload(meta: dict, arrays: dict[str, np.ndarray]) -> Corpus:
    cfg = WorldConfig.from_dict(meta["config"])
    scenes = []
    po, oo = arrays["prop_offsets"], arrays["obj_offsets"]
    for i in range(int(meta["n_scenes"])):
        objs = [
            SceneObject(category=int(c), bbox=b.copy())
            for c, b in zip(
                arrays["obj_category"][oo[i] : oo[i + 1]],
                arrays["obj_bbox"][oo[i] : oo[i + 1]],
            )
        ]
        props = []
        for j in range(po[i], po[i + 1]):
            oidx = int(arrays["prop_object"][j])
            props.append(
                RegionProposal(
                    bbox=arrays["prop_bbox"][j].copy(),
                    node_features=arrays["prop_features"][j].copy(),
                    gt_label=int(arrays["prop_gt"][j]),
                    pred_label=int(arrays["prop_pred"][j]),
                    pred_confidence=float(arrays["prop_conf"][j]),
                    object_index=None if oidx < 0 else oidx,
                )
            )
        scenes.append(
            Scene(
                scene_id=int(arrays["scene_ids"][i]),
                objects=objs,
                proposals=props,
                scene_features=arrays["scene_features"][i].copy(),
                anchor_category=int(arrays["anchors"][i]),
            )
        )
    return Corpus(config=cfg, scenes=scenes)


def save_corpus(corpus: Corpus, path) -> None:
    meta, arrays = _corpus_arrays(corpus)
    meta["format"] = CORPUS_FORMAT
    write_bundle(path, meta, arrays)


def load_corpus(path) -> Corpus:
    meta, arrays = read_bundle(path, expect_format=CORPUS_FORMAT)
    return corpus_from_payload(meta, arrays)


def save_world(world: World, path) -> None:
    meta = {"format": WORLD_FORMAT, "config": world.config.to_dict()}
    write_bundle(
        path,
        meta,
        {
            "prototypes": world.stub.prototypes,
            "classifier_w": world.stub.classifier_w,
            "classifier_b": world.stub.classifier_b,
            "scene_signatures": world.scene_signatures,
        },
    )


def load_world(path) -> World:
    meta, arrays = read_bundle(path, expect_format=WORLD_FORMAT)
    cfg = WorldConfig.from_dict(meta["config"])
    stub = DetectorStub(
        prototypes=arrays["prototypes"],
        classifier_w=arrays["classifier_w"],
        classifier_b=arrays["classifier_b"],
    )
    expected = (cfg.num_categories + 1, cfg.feature_dim)
    if stub.prototypes.shape != expected:
        raise CorpusFormatError(
            f"world prototypes shape {stub.prototypes.shape}, expected {expected}"
        )
    return World(config=cfg, stub=stub, scene_signatures=arrays["scene_signatures"])


def clone_scene(scene: Scene) -> Scene:
    """Deep copy; attack code mutates the clone, never the source."""
    return Scene(
        scene_id=scene.scene_id,
        objects=[SceneObject(o.category, o.bbox.copy()) for o in scene.objects],
        proposals=[
            RegionProposal(
                bbox=p.bbox.copy(),
                node_features=p.node_features.copy(),
                gt_label=p.gt_label,
                pred_label=p.pred_label,
                pred_confidence=p.pred_confidence,
                object_index=p.object_index,
            )
            for p in scene.proposals
        ],
        scene_features=scene.scene_features.copy(),
        anchor_category=scene.anchor_category,
    )
