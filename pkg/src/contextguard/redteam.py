"""Gradient-sign perturbations against the frozen detector, in feature
space: one-step and iterative variants of three goals (miscategorize,
hide, appear), with an optional coordinate mask emulating a physically
constrained sticker.

The update ascends the log-probability of the goal class by the sign of
its gradient, projected onto the L-infinity budget ball and the mask.
Every jittered sibling proposal of the attacked object receives the same
perturbation, since they image the same object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bundle import read_bundle, write_bundle
from .errors import AttackError
from .numkit import softmax
from .synthworld import (
    Corpus,
    DetectorStub,
    Scene,
    clone_scene,
    corpus_from_payload,
    corpus_payload,
    detect_second_stage,
)

ATTACKED_FORMAT = "attacked-corpus"

GOALS = ("miscategorize", "hide", "appear")


@dataclass(frozen=True)
class AttackSpec:
    """One attack family: goal, budget, and iteration schedule.

    epsilon is the L-infinity budget in feature units (0 means a null
    attack that only checks whether the detector already errs). A None
    target_category is drawn per scene. mask=None perturbs every
    coordinate; a boolean mask restricts the attack to a subset, the
    physical-sticker analog.
    """

    goal: str
    epsilon: float
    steps: int = 1
    step_size: float | None = None
    target_category: int | None = None
    mask: np.ndarray | None = None
    confidence_cutoff: float = 0.5  # a hide also succeeds below this confidence

    def __post_init__(self) -> None:
        if self.goal not in GOALS:
            raise AttackError(f"unknown attack goal {self.goal!r}")
        if self.epsilon < 0:
            raise AttackError("epsilon must be >= 0")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        # Cover the ball with some slack by default.
        return 1.5 * self.epsilon / self.steps if self.epsilon > 0 else 0.0


def block_mask(dim: int, fraction: float = 0.25, start: int = 0) -> np.ndarray:
    """Contiguous boolean coordinate block, the sticker-style restriction."""
    width = max(1, int(round(dim * fraction)))
    mask = np.zeros(dim, dtype=bool)
    mask[start : start + width] = True
    return mask


@dataclass
class AttackAnnotation:
    """What was attacked in one retained scene."""

    scene_id: int
    goal: str
    target_category: int | None
    object_index: int | None  # None for appear attacks on background regions
    region_indices: list[int]  # the perturbed (positive) regions
    success: bool
    epsilon: float
    steps: int
    masked: bool


@dataclass
class AttackedCorpus:
    corpus: Corpus
    annotations: list[AttackAnnotation]

    def positive_indices(self, scene_pos: int) -> set[int]:
        return set(self.annotations[scene_pos].region_indices)


@dataclass
class AttackLog:
    attempted: int = 0
    retained: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.retained / self.attempted if self.attempted else 0.0

    def to_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "retained": self.retained,
            "success_rate": self.success_rate,
            "failures": list(self.failures),
        }


# ---------------------------------------------------------------------------
# Single-region attack
# ---------------------------------------------------------------------------


def _goal_class(
    stub: DetectorStub, scene: Scene, region_index: int, spec: AttackSpec,
    rng: np.random.Generator,
) -> int:
    region = scene.proposals[region_index]
    bg = stub.num_categories
    if spec.goal == "hide":
        if region.gt_label == bg:
            raise AttackError("hide attacks target object regions, not background")
        return bg
    if spec.goal == "appear":
        if region.gt_label != bg:
            raise AttackError("appear attacks apply only to background regions")
        if spec.target_category is not None:
            return spec.target_category
        return int(rng.integers(0, stub.num_categories))
    # miscategorize
    if region.gt_label == bg:
        raise AttackError("miscategorize attacks target object regions")
    if spec.target_category is not None:
        if spec.target_category == region.gt_label:
            raise AttackError("miscategorize target must differ from ground truth")
        return spec.target_category
    choices = [c for c in range(stub.num_categories) if c != region.gt_label]
    return int(rng.choice(choices))


def _goal_achieved(
    stub: DetectorStub, features: np.ndarray, spec: AttackSpec, target: int
) -> bool:
    label, conf = detect_second_stage(stub, features)
    if spec.goal == "hide":
        return label == stub.num_categories or conf < spec.confidence_cutoff
    return label == target


def attack_region(
    stub: DetectorStub,
    scene: Scene,
    region_index: int,
    spec: AttackSpec,
    seed: int,
) -> tuple[Scene, bool, AttackAnnotation]:
    """Perturb one region (and its same-object siblings) of a scene copy.

    Iterates steps of step_size * sign(d log p(target) / d features),
    clipped to the epsilon ball around the original features and to the
    mask. Returns (perturbed scene, success flag, annotation); the input
    scene is never mutated.
    """
    if not (0 <= region_index < len(scene.proposals)):
        raise AttackError(f"region index {region_index} out of range")
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene.scene_id]))
    attacked = clone_scene(scene)
    region = attacked.proposals[region_index]
    target = _goal_class(stub, attacked, region_index, spec, rng)

    mask = spec.mask
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != region.node_features.shape:
            raise AttackError("mask shape does not match the feature dimension")
    base = region.node_features.copy()
    feats = base.copy()
    step = spec.resolved_step_size()
    if spec.epsilon > 0 and step > 0:
        for _ in range(spec.steps):
            probs = softmax(stub.classifier_w @ feats + stub.classifier_b)
            onehot = np.zeros_like(probs)
            onehot[target] = 1.0
            grad = stub.classifier_w.T @ (onehot - probs)  # d log p(target) / d feats
            direction = np.sign(grad)
            if mask is not None:
                direction = direction * mask
            feats = np.clip(feats + step * direction, base - spec.epsilon,
                            base + spec.epsilon)

    delta = feats - base
    if spec.goal == "appear" or region.object_index is None:
        siblings = [region_index]
    else:
        siblings = [
            i
            for i, p in enumerate(attacked.proposals)
            if p.object_index == region.object_index
        ]
    for i in siblings:
        p = attacked.proposals[i]
        p.node_features = p.node_features + delta
        label, conf = detect_second_stage(stub, p.node_features)
        p.pred_label = label
        p.pred_confidence = conf

    success = _goal_achieved(
        stub, attacked.proposals[region_index].node_features, spec, target
    )
    annotation = AttackAnnotation(
        scene_id=scene.scene_id,
        goal=spec.goal,
        target_category=None if spec.goal == "hide" else target,
        object_index=region.object_index,
        region_indices=sorted(siblings),
        success=success,
        epsilon=spec.epsilon,
        steps=spec.steps,
        masked=mask is not None,
    )
    return attacked, success, annotation


# ---------------------------------------------------------------------------
# Corpus-level attack
# ---------------------------------------------------------------------------


def build_attacked_corpus(
    corpus: Corpus,
    stub: DetectorStub,
    specs: AttackSpec | list[AttackSpec],
    seed: int,
    min_success_rate: float = 0.05,
) -> tuple[AttackedCorpus, AttackLog]:
    """One successful attack per scene; unsuccessful scenes are dropped
    and logged. Aborts when the overall success rate falls below
    `min_success_rate` (a sign of a misconfigured budget)."""
    spec_list = [specs] if isinstance(specs, AttackSpec) else list(specs)
    if not spec_list:
        raise AttackError("no attack specs given")
    log = AttackLog()
    scenes: list[Scene] = []
    annotations: list[AttackAnnotation] = []
    for pos, scene in enumerate(corpus.scenes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA77, pos]))
        spec = spec_list[int(rng.integers(0, len(spec_list)))]
        bg = stub.num_categories
        if spec.goal == "appear":
            candidates = [
                i for i, p in enumerate(scene.proposals) if p.gt_label == bg
            ]
            if not candidates:
                log.attempted += 1
                log.failures.append(
                    f"scene {scene.scene_id}: no background region for appear"
                )
                continue
        else:
            objects = sorted(
                {
                    p.object_index
                    for p in scene.proposals
                    if p.object_index is not None
                }
            )
            candidates = []
            for obj in objects:
                members = [
                    i
                    for i, p in enumerate(scene.proposals)
                    if p.object_index == obj
                ]
                candidates.append(members[int(rng.integers(0, len(members)))])
        log.attempted += 1
        order = rng.permutation(len(candidates))
        retained = None
        for k in order:
            attacked, success, annotation = attack_region(
                stub, scene, candidates[int(k)], spec, seed=int(rng.integers(2**31))
            )
            if success:
                retained = (attacked, annotation)
                break
        if retained is None:
            log.failures.append(
                f"scene {scene.scene_id}: no successful {spec.goal} attack"
            )
            continue
        log.retained += 1
        scenes.append(retained[0])
        annotations.append(retained[1])
    if log.attempted and log.success_rate < min_success_rate:
        raise AttackError(
            f"attack success rate {log.success_rate:.1%} below "
            f"{min_success_rate:.0%}; budget misconfigured "
            f"(retained {log.retained}/{log.attempted})"
        )
    attacked_corpus = AttackedCorpus(
        corpus=Corpus(config=corpus.config, scenes=scenes), annotations=annotations
    )
    return attacked_corpus, log


# ---------------------------------------------------------------------------
# Persistence (corpus container plus an attack-annotation block)
# ---------------------------------------------------------------------------


def save_attacked_corpus(attacked: AttackedCorpus, path) -> None:
    meta, arrays = corpus_payload(attacked.corpus)
    meta["format"] = ATTACKED_FORMAT
    meta["attacks"] = [
        {
            "scene_id": a.scene_id,
            "goal": a.goal,
            "target_category": a.target_category,
            "object_index": a.object_index,
            "success": a.success,
            "epsilon": a.epsilon,
            "steps": a.steps,
            "masked": a.masked,
        }
        for a in attacked.annotations
    ]
    counts = [len(a.region_indices) for a in attacked.annotations]
    arrays["attack_regions"] = np.array(
        [i for a in attacked.annotations for i in a.region_indices], dtype=np.int64
    )
    arrays["attack_offsets"] = np.cumsum([0] + counts).astype(np.int64)
    write_bundle(path, meta, arrays)


def load_attacked_corpus(path) -> AttackedCorpus:
    meta, arrays = read_bundle(path, expect_format=ATTACKED_FORMAT)
    corpus = corpus_from_payload(meta, arrays)
    offsets = arrays["attack_offsets"]
    regions = arrays["attack_regions"]
    annotations = []
    for i, a in enumerate(meta["attacks"]):
        annotations.append(
            AttackAnnotation(
                scene_id=int(a["scene_id"]),
                goal=a["goal"],
                target_category=(
                    None if a["target_category"] is None else int(a["target_category"])
                ),
                object_index=(
                    None if a["object_index"] is None else int(a["object_index"])
                ),
                region_indices=[int(r) for r in regions[offsets[i] : offsets[i + 1]]],
                success=bool(a["success"]),
                epsilon=float(a["epsilon"]),
                steps=int(a["steps"]),
                masked=bool(a["masked"]),
            )
        )
    return AttackedCorpus(corpus=corpus, annotations=annotations)
