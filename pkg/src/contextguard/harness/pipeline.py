"""Training and detection pipelines over persisted artifacts.

Training: fit the context model on a clean corpus, extract per-category
context profiles, train one autoencoder per eligible category, and
calibrate reconstruction-error thresholds on held-out benign profiles.
Detection: score every proposed region of a corpus with the autoencoder
selected by the frozen detector's prediction and threshold the error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..bundle import file_sha256
from ..errors import ConfigError, InsufficientProfilesError
from ..guardians import (
    AutoEncoder,
    AutoencoderTrainConfig,
    ThresholdTable,
    calibrate_thresholds,
    load_autoencoder,
    load_threshold_table,
    reconstruction_errors,
    save_autoencoder,
    save_threshold_table,
    train_autoencoder,
)
from ..redteam import AttackedCorpus, AttackSpec, block_mask, build_attacked_corpus
from ..sceme import (
    ScemeModel,
    ScemeTrainConfig,
    extract_context_profiles,
    load_model,
    message_pass,
    profiles_to_array,
    save_model,
    train_sceme,
)
from ..synthworld import (
    Corpus,
    World,
    WorldConfig,
    default_world_config,
    detect_batch,
    generate_corpus,
    load_world,
    make_world,
    save_world,
)
from .metrics import RecallEntry, recall_at_fpr, roc_auc


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class CorpusSettings:
    train_scenes: int = 800
    calibration_scenes: int = 300
    eval_scenes: int = 300


@dataclass
class AttackSettings:
    name: str
    goal: str
    epsilon: float
    steps: int = 10
    step_size: float | None = None
    mask: str = "full"  # "full" or "block25"
    target_category: int | None = None

    def to_spec(self, feature_dim: int) -> AttackSpec:
        if self.mask == "full":
            mask = None
        elif self.mask == "block25":
            mask = block_mask(feature_dim, fraction=0.25)
        else:
            raise ConfigError(f"unknown mask kind {self.mask!r}")
        return AttackSpec(
            goal=self.goal,
            epsilon=self.epsilon,
            steps=self.steps,
            step_size=self.step_size,
            target_category=self.target_category,
            mask=mask,
        )


@dataclass
class EvalSettings:
    target_fpr: float = 0.05
    fpr_grid: list[float] = field(
        default_factory=lambda: [0.001, 0.005, 0.01, 0.05, 0.1]
    )
    threshold_mode: str = "per_category"


@dataclass
class RunConfig:
    seed: int
    world: WorldConfig
    world_margin_factor: float = 1.6
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    sceme: ScemeTrainConfig = field(default_factory=ScemeTrainConfig)
    autoencoder: AutoencoderTrainConfig = field(
        default_factory=AutoencoderTrainConfig
    )
    attacks: list[AttackSettings] = field(default_factory=list)
    evaluation: EvalSettings = field(default_factory=EvalSettings)

    def seeds(self) -> dict[str, int]:
        """Explicit per-stage seeds, all derived from the run seed."""
        base = self.seed
        return {
            "world": base,
            "train_corpus": base + 1,
            "calibration_corpus": base + 2,
            "eval_corpus": base + 3,
            "sceme": self.sceme.seed if self.sceme.seed else base + 4,
            "autoencoder": self.autoencoder.seed if self.autoencoder.seed else base + 5,
            "attack": base + 6,
        }


# ---------------------------------------------------------------------------
# Trained artifacts
# ---------------------------------------------------------------------------


@dataclass
class TrainedArtifacts:
    world: World
    model: ScemeModel
    autoencoders: dict[int, AutoEncoder]
    thresholds: ThresholdTable
    profile_counts: dict[int, int]
    skipped_categories: list[int]

    @property
    def background_index(self) -> int:
        return self.world.config.background_index


def pipeline_train(cfg: RunConfig, workdir: str | Path | None = None) -> TrainedArtifacts:
    """Training phase, end to end: context model, per-category profile
    extraction, autoencoders for every category with enough profiles, and
    threshold calibration on a held-out benign corpus. Persists everything
    under `workdir` when given, with a run manifest."""
    seeds = cfg.seeds()
    world = make_world(cfg.world, seeds["world"], margin_factor=cfg.world_margin_factor)
    train_corpus = generate_corpus(world, cfg.corpus.train_scenes, seeds["train_corpus"])
    calib_corpus = generate_corpus(
        world, cfg.corpus.calibration_scenes, seeds["calibration_corpus"]
    )

    sceme_cfg = ScemeTrainConfig(**{**cfg.sceme.to_dict(), "seed": seeds["sceme"]})
    model = train_sceme(train_corpus, world.stub, sceme_cfg).model

    groups = extract_context_profiles(model, train_corpus, world.stub)
    ae_cfg = AutoencoderTrainConfig(
        **{**cfg.autoencoder.to_dict(), "seed": seeds["autoencoder"]}
    )
    autoencoders: dict[int, AutoEncoder] = {}
    skipped: list[int] = []
    for cat in sorted(groups):
        try:
            autoencoders[cat] = train_autoencoder(cat, groups[cat], ae_cfg)
        except InsufficientProfilesError:
            skipped.append(cat)

    calib_groups = extract_context_profiles(model, calib_corpus, world.stub)
    thresholds = calibrate_thresholds(
        autoencoders,
        {cat: calib_groups.get(cat, []) for cat in autoencoders},
        cfg.evaluation.target_fpr,
        mode=cfg.evaluation.threshold_mode,
    )
    artifacts = TrainedArtifacts(
        world=world,
        model=model,
        autoencoders=autoencoders,
        thresholds=thresholds,
        profile_counts={cat: len(v) for cat, v in sorted(groups.items())},
        skipped_categories=skipped,
    )
    if workdir is not None:
        save_artifacts(artifacts, cfg, Path(workdir))
    return artifacts


def save_artifacts(artifacts: TrainedArtifacts, cfg: RunConfig, workdir: Path) -> None:
    models_dir = workdir / "models"
    models_dir.mkdir(parents=True, exist_ok=True)
    save_world(artifacts.world, models_dir / "world.cgb")
    save_model(artifacts.model, models_dir / "model.cgb")
    for cat, ae in sorted(artifacts.autoencoders.items()):
        save_autoencoder(ae, models_dir / f"autoencoder_{cat:03d}.cgb")
    save_threshold_table(artifacts.thresholds, models_dir / "thresholds.json")
    update_manifest(
        workdir,
        cfg,
        extra={
            "profile_counts": {str(k): v for k, v in artifacts.profile_counts.items()},
            "skipped_categories": artifacts.skipped_categories,
        },
    )


def load_artifacts(workdir: str | Path) -> TrainedArtifacts:
    models_dir = Path(workdir) / "models"
    world = load_world(models_dir / "world.cgb")
    model = load_model(models_dir / "model.cgb")
    autoencoders = {}
    for path in sorted(models_dir.glob("autoencoder_*.cgb")):
        ae = load_autoencoder(path)
        autoencoders[ae.category] = ae
    thresholds = load_threshold_table(models_dir / "thresholds.json")
    manifest = {}
    manifest_path = Path(workdir) / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    return TrainedArtifacts(
        world=world,
        model=model,
        autoencoders=autoencoders,
        thresholds=thresholds,
        profile_counts={
            int(k): v for k, v in manifest.get("profile_counts", {}).items()
        },
        skipped_categories=list(manifest.get("skipped_categories", [])),
    )


def config_hash(cfg: RunConfig) -> str:
    import hashlib

    blob = json.dumps(_config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "world": cfg.world.to_dict(),
        "world_margin_factor": cfg.world_margin_factor,
        "corpus": dict(cfg.corpus.__dict__),
        "sceme": cfg.sceme.to_dict(),
        "autoencoder": cfg.autoencoder.to_dict(),
        "attacks": [dict(a.__dict__) for a in cfg.attacks],
        "evaluation": {
            "target_fpr": cfg.evaluation.target_fpr,
            "fpr_grid": list(cfg.evaluation.fpr_grid),
            "threshold_mode": cfg.evaluation.threshold_mode,
        },
    }


def update_manifest(workdir: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    """Record config hash, seeds, package version, and artifact checksums.
    Deliberately timestamp-free so reruns are checksum-identical."""
    path = Path(workdir) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.update(
        {
            "config_hash": config_hash(cfg),
            "config": _config_to_dict(cfg),
            "seeds": cfg.seeds(),
            "version": __version__,
        }
    )
    if extra:
        manifest.update(extra)
    checksums = {}
    for file in sorted(Path(workdir).rglob("*")):
        if file.is_file() and file.name != "manifest.json":
            checksums[str(file.relative_to(workdir))] = file_sha256(file)
    manifest["artifacts"] = checksums
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


@dataclass
class RegionRecord:
    scene_id: int
    region_index: int
    pred_category: int
    recon_error: float
    is_positive: bool
    flagged: bool
    fallback: bool  # scored or thresholded via the background category
    object_index: int | None


@dataclass
class ObjectRecord:
    scene_id: int
    object_index: int | None
    goal: str
    n_regions: int
    detected: bool  # any of its regions flagged


@dataclass
class DetectionReport:
    records: list[RegionRecord]
    roc: list[tuple[float, float, float]]
    auc: float | None
    per_category_auc: dict[int, float | None]
    recall: list[RecallEntry]
    objects: list[ObjectRecord]
    measured_fpr: float
    hidden_without_regions: int
    target_fpr: float

    def scores(self) -> np.ndarray:
        return np.array([r.recon_error for r in self.records])

    def labels(self) -> np.ndarray:
        return np.array([r.is_positive for r in self.records], dtype=bool)


def flag_regions(
    errors: list[float], pred_categories: list[int], table: ThresholdTable,
    background: int,
) -> list[bool]:
    """The thresholding rule: a region is declared perturbed when its
    reconstruction error strictly exceeds its category's threshold (the
    background threshold when the category has none)."""
    flags = []
    for err, cat in zip(errors, pred_categories):
        use = cat if table.has_category(cat) else background
        flags.append(bool(err > table.for_category(use)))
    return flags


def pipeline_detect(
    artifacts: TrainedArtifacts,
    corpus: AttackedCorpus | Corpus,
    fpr_grid: list[float] | None = None,
) -> DetectionReport:
    """Testing phase: per region, extract the context profile (dropout
    off), score it with the autoencoder of the predicted category, and
    threshold. Regions predicted as categories without an autoencoder fall
    back to the background autoencoder and are flagged as such in the
    report. An object counts as detected if any of its regions is flagged.
    """
    bg = artifacts.background_index
    if bg not in artifacts.autoencoders:
        raise RuntimeError(
            "no background autoencoder: hiding attacks would be undetectable"
        )
    if isinstance(corpus, AttackedCorpus):
        scenes = corpus.corpus.scenes
        positives = [set(a.region_indices) for a in corpus.annotations]
        annotations = corpus.annotations
    else:
        scenes = corpus.scenes
        positives = [set() for _ in scenes]
        annotations = None

    records: list[RegionRecord] = []
    objects: list[ObjectRecord] = []
    hidden_without_regions = 0
    for pos, scene in enumerate(scenes):
        feats = scene.features_matrix()
        labels, _ = detect_batch(artifacts.world.stub, feats)
        profiles = [p for _, p in message_pass(artifacts.model, scene)]
        errors = np.empty(len(profiles))
        fallback = np.zeros(len(profiles), dtype=bool)
        cats = np.asarray(labels, dtype=int)
        for cat in np.unique(cats):
            idx = np.flatnonzero(cats == cat)
            use = int(cat) if int(cat) in artifacts.autoencoders else bg
            fallback[idx] = use != int(cat) or not artifacts.thresholds.has_category(
                int(cat)
            )
            batch = profiles_to_array([profiles[i] for i in idx])
            errors[idx] = reconstruction_errors(artifacts.autoencoders[use], batch)
        flags = flag_regions(
            list(errors), [int(c) for c in cats], artifacts.thresholds, bg
        )
        for i, profile in enumerate(profiles):
            records.append(
                RegionRecord(
                    scene_id=scene.scene_id,
                    region_index=i,
                    pred_category=int(cats[i]),
                    recon_error=float(errors[i]),
                    is_positive=i in positives[pos],
                    flagged=flags[i],
                    fallback=bool(fallback[i]),
                    object_index=scene.proposals[i].object_index,
                )
            )
        if annotations is not None:
            ann = annotations[pos]
            if not ann.region_indices:
                hidden_without_regions += 1
            objects.append(
                ObjectRecord(
                    scene_id=scene.scene_id,
                    object_index=ann.object_index,
                    goal=ann.goal,
                    n_regions=len(ann.region_indices),
                    detected=any(flags[i] for i in ann.region_indices),
                )
            )

    scores = np.array([r.recon_error for r in records])
    is_pos = np.array([r.is_positive for r in records], dtype=bool)
    negatives = ~is_pos
    measured_fpr = (
        float(np.mean([r.flagged for r, n in zip(records, negatives) if n]))
        if negatives.any()
        else 0.0
    )
    if is_pos.any() and negatives.any():
        curve, auc = roc_auc(scores, is_pos)
        grid = fpr_grid if fpr_grid is not None else [0.001, 0.005, 0.01, 0.05, 0.1]
        recall = recall_at_fpr(scores, is_pos, grid)
    else:
        curve, auc, recall = [], None, []

    per_cat: dict[int, float | None] = {}
    cats_present = sorted({r.pred_category for r in records})
    for cat in cats_present:
        sub = [r for r in records if r.pred_category == cat]
        sub_scores = np.array([r.recon_error for r in sub])
        sub_labels = np.array([r.is_positive for r in sub], dtype=bool)
        if sub_labels.any() and (~sub_labels).any():
            _, cat_auc = roc_auc(sub_scores, sub_labels)
            per_cat[cat] = float(cat_auc)
        else:
            per_cat[cat] = None

    return DetectionReport(
        records=records,
        roc=curve,
        auc=auc,
        per_category_auc=per_cat,
        recall=recall,
        objects=objects,
        measured_fpr=measured_fpr,
        hidden_without_regions=hidden_without_regions,
        target_fpr=artifacts.thresholds.target_fpr,
    )


# ---------------------------------------------------------------------------
# Node-features-only ablation
# ---------------------------------------------------------------------------


def retrain_autoencoders_node_only(
    artifacts: TrainedArtifacts, cfg: RunConfig
) -> TrainedArtifacts:
    """Same context model and corpora, but autoencoders see only the node
    row of each profile (gate rows zeroed). Returns a parallel artifact
    set for paired comparisons."""
    seeds = cfg.seeds()
    world = artifacts.world
    train_corpus = generate_corpus(world, cfg.corpus.train_scenes, seeds["train_corpus"])
    calib_corpus = generate_corpus(
        world, cfg.corpus.calibration_scenes, seeds["calibration_corpus"]
    )
    groups = extract_context_profiles(artifacts.model, train_corpus, world.stub)
    ae_cfg = AutoencoderTrainConfig(
        **{
            **cfg.autoencoder.to_dict(),
            "seed": seeds["autoencoder"],
            "node_only": True,
        }
    )
    autoencoders: dict[int, AutoEncoder] = {}
    skipped: list[int] = []
    for cat in sorted(groups):
        try:
            autoencoders[cat] = train_autoencoder(cat, groups[cat], ae_cfg)
        except InsufficientProfilesError:
            skipped.append(cat)
    calib_groups = extract_context_profiles(artifacts.model, calib_corpus, world.stub)
    thresholds = calibrate_thresholds(
        autoencoders,
        {cat: calib_groups.get(cat, []) for cat in autoencoders},
        cfg.evaluation.target_fpr,
        mode=cfg.evaluation.threshold_mode,
    )
    return TrainedArtifacts(
        world=world,
        model=artifacts.model,
        autoencoders=autoencoders,
        thresholds=thresholds,
        profile_counts={cat: len(v) for cat, v in sorted(groups.items())},
        skipped_categories=skipped,
    )


def ablation_node_only(
    cfg: RunConfig, artifacts: TrainedArtifacts, attacked: AttackedCorpus
) -> DetectionReport:
    """Detection report with node-features-only autoencoders, directly
    comparable to the full-profile report on the same attacked corpus."""
    node_artifacts = retrain_autoencoders_node_only(artifacts, cfg)
    return pipeline_detect(node_artifacts, attacked, cfg.evaluation.fpr_grid)


# ---------------------------------------------------------------------------
# Attack stage helper
# ---------------------------------------------------------------------------


def run_attack(
    cfg: RunConfig, artifacts: TrainedArtifacts, settings: AttackSettings
):
    """Build the attacked corpus for one configured attack."""
    seeds = cfg.seeds()
    eval_corpus = generate_corpus(
        artifacts.world, cfg.corpus.eval_scenes, seeds["eval_corpus"]
    )
    spec = settings.to_spec(artifacts.world.config.feature_dim)
    return build_attacked_corpus(
        eval_corpus, artifacts.world.stub, spec, seed=seeds["attack"]
    )
