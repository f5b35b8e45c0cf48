"""Context model over region proposals.

Each scene becomes a fully connected graph of its proposals plus a scene
node. A region's features are rebuilt along two paths: an attention-
weighted sum of the other regions' features drives a region-level gated
cell, and the scene node features drive a scene-level gated cell; the two
outputs are averaged into the updated feature vector that feeds the
classification and box-refinement heads. The four gate activations of the
two cells, together with the raw region features, form the region's
context profile.

Gradients are derived by hand; `scene_loss_and_grads` is validated against
central differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import read_bundle, write_bundle
from .errors import CorpusFormatError, DivergenceError
from .numkit import (
    GruCellParams,
    OptimizerState,
    gru_backward,
    gru_forward,
    init_weight,
    log_softmax,
    optimizer_step,
    smooth_l1,
    smooth_l1_grad,
    softmax,
)
from .synthworld import Corpus, DetectorStub, Scene, detect_batch

MODEL_FORMAT = "context-model"
GEO_DIM = 5  # cx, cy, log w, log h, confidence


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ScemeConfig:
    feature_dim: int
    num_categories: int
    attention_dim: int = 16
    appearance_dim: int = 8
    dropout_rate: float = 0.3

    @property
    def encoding_dim(self) -> int:
        return GEO_DIM + self.appearance_dim

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "num_categories": self.num_categories,
            "attention_dim": self.attention_dim,
            "appearance_dim": self.appearance_dim,
            "dropout_rate": self.dropout_rate,
        }


@dataclass
class ScemeModel:
    cfg: ScemeConfig
    region_gru: GruCellParams
    scene_gru: GruCellParams
    w_query: np.ndarray  # (Da, G)
    w_key: np.ndarray  # (Da, G)
    w_appearance: np.ndarray  # (A, D)
    w_classifier: np.ndarray  # (C+1, D)
    b_classifier: np.ndarray  # (C+1,)
    w_bbox: np.ndarray  # (4, D)
    b_bbox: np.ndarray  # (4,)

    @classmethod
    def initialize(cls, cfg: ScemeConfig, seed: int) -> "ScemeModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE]))
        d, g = cfg.feature_dim, cfg.encoding_dim
        return cls(
            cfg=cfg,
            region_gru=GruCellParams.initialize(d, rng),
            scene_gru=GruCellParams.initialize(d, rng),
            w_query=init_weight(rng, cfg.attention_dim, g),
            w_key=init_weight(rng, cfg.attention_dim, g),
            w_appearance=init_weight(rng, cfg.appearance_dim, d),
            w_classifier=init_weight(rng, cfg.num_categories + 1, d),
            b_classifier=np.zeros(cfg.num_categories + 1),
            w_bbox=init_weight(rng, 4, d),
            b_bbox=np.zeros(4),
        )

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references for in-place optimizer updates."""
        out = self.region_gru.param_dict("region_gru.")
        out.update(self.scene_gru.param_dict("scene_gru."))
        out.update(
            {
                "w_query": self.w_query,
                "w_key": self.w_key,
                "w_appearance": self.w_appearance,
                "w_classifier": self.w_classifier,
                "b_classifier": self.b_classifier,
                "w_bbox": self.w_bbox,
                "b_bbox": self.b_bbox,
            }
        )
        return out


@dataclass
class ContextProfile:
    """The anomaly-scoring unit for one region: its raw features plus the
    gate activations of the region cell (index 1) and scene cell (index 2)."""

    r: np.ndarray
    gamma_u1: np.ndarray
    gamma_r1: np.ndarray
    gamma_u2: np.ndarray
    gamma_r2: np.ndarray
    predicted_category: int
    scene_id: int
    region_index: int

    def to_matrix(self) -> np.ndarray:
        """(5, D) stacking in scoring order: r, u1, u2, r1, r2."""
        return np.stack(
            [self.r, self.gamma_u1, self.gamma_u2, self.gamma_r1, self.gamma_r2]
        )


def profiles_to_array(profiles: list[ContextProfile]) -> np.ndarray:
    """(B, 5, D) stack of profile matrices."""
    return np.stack([p.to_matrix() for p in profiles])


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def geometry_features(bboxes: np.ndarray, confidences: np.ndarray) -> np.ndarray:
    """(N, 5): location, log scale, and detector confidence per region."""
    b = np.asarray(bboxes, dtype=float)
    return np.column_stack(
        [b[:, 0], b[:, 1], np.log(b[:, 2]), np.log(b[:, 3]), np.asarray(confidences)]
    )


def _forward(
    model: ScemeModel,
    features: np.ndarray,
    bboxes: np.ndarray,
    confidences: np.ndarray,
    scene_features: np.ndarray,
    context_features: np.ndarray | None = None,
) -> dict:
    """Message passing over one scene; returns a cache of intermediates.

    `features` are the (possibly dropout-scaled) node features, (N, D).
    When `context_features` is given, the attention keys' appearance part
    and the attention values come from it instead; training always uses the
    shared path.
    """
    n, d = features.shape
    shared = context_features is None
    ctx = features if shared else context_features
    da = model.cfg.attention_dim

    geo = geometry_features(bboxes, confidences)
    enc_q = np.concatenate([geo, features @ model.w_appearance.T], axis=1)
    enc_k = enc_q if shared else np.concatenate(
        [geo, ctx @ model.w_appearance.T], axis=1
    )
    q = enc_q @ model.w_query.T
    k = enc_k @ model.w_key.T

    if n >= 2:
        scores = (q @ k.T) / math.sqrt(da)
        np.fill_diagonal(scores, -np.inf)
        attn = softmax(scores, axis=1)
        messages = attn @ ctx
    else:
        attn = np.zeros((1, 1))
        messages = np.zeros((1, d))

    scene_in = np.tile(np.asarray(scene_features, dtype=float), (n, 1))
    region_out, region_cache = gru_forward(features, messages, model.region_gru)
    scene_out, scene_cache = gru_forward(features, scene_in, model.scene_gru)
    updated = 0.5 * (region_out + scene_out)

    return {
        "n": n,
        "shared": shared,
        "features": features,
        "ctx": ctx,
        "enc": enc_q,
        "q": q,
        "k": k,
        "attn": attn,
        "messages": messages,
        "region_cache": region_cache,
        "scene_cache": scene_cache,
        "region_out": region_out,
        "scene_out": scene_out,
        "updated": updated,
    }


def _heads(model: ScemeModel, updated: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = updated @ model.w_classifier.T + model.b_classifier
    boxes = updated @ model.w_bbox.T + model.b_bbox
    return logits, boxes


def _bbox_targets(scene: Scene, background: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard box-refinement parametrization against the owning object."""
    n = len(scene.proposals)
    targets = np.zeros((n, 4))
    fg = []
    for i, p in enumerate(scene.proposals):
        if p.gt_label == background or p.object_index is None:
            continue
        ob = scene.objects[p.object_index].bbox
        pb = p.bbox
        targets[i] = [
            (ob[0] - pb[0]) / pb[2],
            (ob[1] - pb[1]) / pb[3],
            math.log(ob[2] / pb[2]),
            math.log(ob[3] / pb[3]),
        ]
        fg.append(i)
    return targets, np.array(fg, dtype=int)


def _dropout_mask(
    shape: tuple[int, int], rate: float, rng: np.random.Generator
) -> np.ndarray:
    if rate <= 0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def scene_loss_and_grads(
    model: ScemeModel,
    scene: Scene,
    dropout_mask: np.ndarray | None = None,
    bbox_weight: float = 1.0,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Detection objective on one scene: mean cross-entropy of the
    classifier head plus SmoothL1 box refinement on foreground regions.

    Returns (loss, grads keyed like model.parameters(), logits).
    """
    background = model.cfg.num_categories
    x0 = scene.features_matrix()
    x = x0 if dropout_mask is None else x0 * dropout_mask
    bboxes = np.stack([p.bbox for p in scene.proposals])
    confs = np.array([p.pred_confidence for p in scene.proposals])
    labels = np.array([p.gt_label for p in scene.proposals])
    n = len(labels)

    cache = _forward(model, x, bboxes, confs, scene.scene_features)
    updated = cache["updated"]
    logits, boxes = _heads(model, updated)

    logp = log_softmax(logits, axis=1)
    loss_cls = float(-logp[np.arange(n), labels].mean())
    targets, fg = _bbox_targets(scene, background)
    if fg.size:
        loss_box = smooth_l1(boxes[fg], targets[fg])
    else:
        loss_box = 0.0
    loss = loss_cls + bbox_weight * loss_box

    # Heads backward.
    probs = np.exp(logp)
    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n
    d_boxes = np.zeros_like(boxes)
    if fg.size:
        d_boxes[fg] = bbox_weight * smooth_l1_grad(boxes[fg], targets[fg])
    grads = {
        "w_classifier": d_logits.T @ updated,
        "b_classifier": d_logits.sum(axis=0),
        "w_bbox": d_boxes.T @ updated,
        "b_bbox": d_boxes.sum(axis=0),
    }
    d_updated = d_logits @ model.w_classifier + d_boxes @ model.w_bbox

    # Mean pooling of the two cell outputs.
    d_branch = 0.5 * d_updated
    d_messages, _, g_region = gru_backward(
        d_branch, cache["region_cache"], model.region_gru
    )
    _, _, g_scene = gru_backward(d_branch, cache["scene_cache"], model.scene_gru)
    for key, val in g_region.items():
        grads[f"region_gru.{key}"] = val
    for key, val in g_scene.items():
        grads[f"scene_gru.{key}"] = val

    # Attention backward (no-op for single-region scenes).
    da = model.cfg.attention_dim
    if cache["n"] >= 2:
        attn, q, k, enc = cache["attn"], cache["q"], cache["k"], cache["enc"]
        d_attn = d_messages @ x.T
        d_scores = attn * (d_attn - (attn * d_attn).sum(axis=1, keepdims=True))
        d_q = d_scores @ k / math.sqrt(da)
        d_k = d_scores.T @ q / math.sqrt(da)
        d_enc = d_q @ model.w_query + d_k @ model.w_key
        grads["w_query"] = d_q.T @ enc
        grads["w_key"] = d_k.T @ enc
        grads["w_appearance"] = d_enc[:, GEO_DIM:].T @ x
    else:
        grads["w_query"] = np.zeros_like(model.w_query)
        grads["w_key"] = np.zeros_like(model.w_key)
        grads["w_appearance"] = np.zeros_like(model.w_appearance)

    return loss, grads, logits


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def message_pass(
    model: ScemeModel,
    scene: Scene,
    dropout_on: bool = False,
    seed: int = 0,
) -> list[tuple[np.ndarray, ContextProfile]]:
    """Run one round of message passing over a scene.

    Returns, per region, the updated feature vector and the region's
    context profile. Profiles always record the pre-dropout features; the
    gates of single-region scenes see a zero message on the region path.
    """
    if not scene.proposals:
        raise ValueError("message_pass requires at least one proposal")
    x0 = scene.features_matrix()
    if dropout_on and model.cfg.dropout_rate > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, scene.scene_id]))
        x = x0 * _dropout_mask(x0.shape, model.cfg.dropout_rate, rng)
    else:
        x = x0
    bboxes = np.stack([p.bbox for p in scene.proposals])
    confs = np.array([p.pred_confidence for p in scene.proposals])
    cache = _forward(model, x, bboxes, confs, scene.scene_features)
    rc, sc = cache["region_cache"], cache["scene_cache"]
    out = []
    for i in range(cache["n"]):
        profile = ContextProfile(
            r=x0[i].copy(),
            gamma_u1=rc["update"][i].copy(),
            gamma_r1=rc["reset"][i].copy(),
            gamma_u2=sc["update"][i].copy(),
            gamma_r2=sc["reset"][i].copy(),
            predicted_category=scene.proposals[i].pred_label,
            scene_id=scene.scene_id,
            region_index=i,
        )
        out.append((cache["updated"][i].copy(), profile))
    return out


@dataclass
class ScemeTrainConfig:
    epochs: int = 6
    learning_rate: float = 5e-4
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_interval: int | None = 80_000
    dropout_rate: float = 0.3
    bbox_weight: float = 1.0
    attention_dim: int = 16
    appearance_dim: int = 8
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainResult:
    model: ScemeModel
    epoch_losses: list[float] = field(default_factory=list)


def train_sceme(
    corpus: Corpus, stub: DetectorStub, hyper: ScemeTrainConfig
) -> TrainResult:
    """Train the context model on a clean corpus with the detection
    objective. The detector stub is frozen throughout; only the context
    model's own parameters are updated."""
    if not corpus.scenes:
        raise ValueError("training corpus is empty")
    cfg = ScemeConfig(
        feature_dim=corpus.config.feature_dim,
        num_categories=corpus.config.num_categories,
        attention_dim=hyper.attention_dim,
        appearance_dim=hyper.appearance_dim,
        dropout_rate=hyper.dropout_rate,
    )
    model = ScemeModel.initialize(cfg, seed=hyper.seed)
    params = model.parameters()
    state = OptimizerState(
        kind="momentum",
        learning_rate=hyper.learning_rate,
        momentum=hyper.momentum,
        decay_factor=hyper.decay_factor,
        decay_interval=hyper.decay_interval,
    )
    rng = np.random.default_rng(np.random.SeedSequence([hyper.seed, 0x7841]))
    losses: list[float] = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(corpus.scenes))
        total = 0.0
        for si in order:
            scene = corpus.scenes[si]
            mask = _dropout_mask(
                (len(scene.proposals), cfg.feature_dim), hyper.dropout_rate, rng
            )
            loss, grads, _ = scene_loss_and_grads(
                model, scene, dropout_mask=mask, bbox_weight=hyper.bbox_weight
            )
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss diverged at epoch {epoch} scene {scene.scene_id} "
                    f"step {state.step} (seed {hyper.seed})"
                )
            optimizer_step(params, grads, state)
            total += loss
        losses.append(total / len(corpus.scenes))
    return TrainResult(model=model, epoch_losses=losses)


def extract_context_profiles(
    model: ScemeModel, corpus: Corpus, stub: DetectorStub
) -> dict[int, list[ContextProfile]]:
    """Profiles for every proposal, grouped by the frozen detector's
    predicted category (not ground truth). Dropout is off, so repeated
    calls are identical."""
    groups: dict[int, list[ContextProfile]] = {
        c: [] for c in range(stub.num_categories + 1)
    }
    for scene in corpus.scenes:
        labels, _ = detect_batch(stub, scene.features_matrix())
        for (_, profile), label in zip(message_pass(model, scene), labels):
            profile.predicted_category = int(label)
            groups[int(label)].append(profile)
    return groups


def classifier_quality(
    model: ScemeModel, corpus: Corpus, shuffle_context_seed: int | None = None
) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) of the classifier head over a corpus.

    With `shuffle_context_seed`, all context a region sees is shuffled
    across the corpus: neighbor-visible features are replaced by random
    proposals from other scenes and the scene node features by another
    scene's, while every region keeps its own features on the memory path.
    This measures how much the model leans on scene-consistent context.
    Cross-entropy is the sensitive signal since clean worlds sit near
    accuracy ceiling by construction.
    """
    rng = (
        np.random.default_rng(shuffle_context_seed)
        if shuffle_context_seed is not None
        else None
    )
    pool = scene_pool = None
    if rng is not None:
        pool = np.concatenate([s.features_matrix() for s in corpus.scenes])
        scene_pool = np.stack([s.scene_features for s in corpus.scenes])
    correct = total = 0
    ce_sum = 0.0
    for idx, scene in enumerate(corpus.scenes):
        x = scene.features_matrix()
        ctx = None
        scene_feats = scene.scene_features
        if rng is not None:
            ctx = pool[rng.integers(0, len(pool), size=len(scene.proposals))]
            other = int(rng.integers(0, len(scene_pool)))
            if other == idx:
                other = (other + 1) % len(scene_pool)
            scene_feats = scene_pool[other]
        bboxes = np.stack([p.bbox for p in scene.proposals])
        confs = np.array([p.pred_confidence for p in scene.proposals])
        cache = _forward(
            model, x, bboxes, confs, scene_feats, context_features=ctx
        )
        logits, _ = _heads(model, cache["updated"])
        pred = np.argmax(logits, axis=1)
        labels = np.array([p.gt_label for p in scene.proposals])
        logp = log_softmax(logits, axis=1)
        ce_sum += float(-logp[np.arange(len(labels)), labels].sum())
        correct += int((pred == labels).sum())
        total += len(labels)
    return correct / total, ce_sum / total


def classifier_accuracy(
    model: ScemeModel, corpus: Corpus, shuffle_context_seed: int | None = None
) -> float:
    return classifier_quality(model, corpus, shuffle_context_seed)[0]


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model: ScemeModel, path) -> None:
    meta = {"format": MODEL_FORMAT, "config": model.cfg.to_dict()}
    write_bundle(path, meta, model.parameters())


def load_model(path) -> ScemeModel:
    meta, arrays = read_bundle(path, expect_format=MODEL_FORMAT)
    c = meta["config"]
    cfg = ScemeConfig(
        feature_dim=int(c["feature_dim"]),
        num_categories=int(c["num_categories"]),
        attention_dim=int(c["attention_dim"]),
        appearance_dim=int(c["appearance_dim"]),
        dropout_rate=float(c["dropout_rate"]),
    )
    model = ScemeModel.initialize(cfg, seed=0)
    params = model.parameters()
    for name, ref in params.items():
        if name not in arrays:
            raise CorpusFormatError(f"model file missing parameter {name!r}")
        if arrays[name].shape != ref.shape:
            raise CorpusFormatError(
                f"model parameter {name!r}: shape {arrays[name].shape}, "
                f"expected {ref.shape}"
            )
        ref[...] = arrays[name]
    return model
