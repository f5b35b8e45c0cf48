"""Command-line driver.

Subcommands map to pipeline stages over one work directory:
gen-corpus, train, attack, detect, eval (everything end to end), and
report (pure rendering of existing results). Stages reuse persisted
artifacts when they match the config, so partial runs resume where they
stopped. Exit codes: 0 success, 2 configuration error, 3 pipeline failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigError, CorpusFormatError
from ..redteam import load_attacked_corpus, save_attacked_corpus
from ..synthworld import generate_corpus, save_corpus
from .config import load_config
from .pipeline import (
    RunConfig,
    TrainedArtifacts,
    ablation_node_only,
    config_hash,
    load_artifacts,
    pipeline_detect,
    pipeline_train,
    run_attack,
    update_manifest,
)
from .report import (
    render_summary,
    report_summary_dict,
    write_region_csv,
    write_report_json,
    write_roc_csv,
)


def _log(msg: str) -> None:
    print(msg, flush=True)


def _check_manifest(cfg: RunConfig, work: Path) -> None:
    manifest = work / "manifest.json"
    if manifest.exists():
        recorded = json.loads(manifest.read_text()).get("config_hash")
        if recorded and recorded != config_hash(cfg):
            raise ConfigError(
                f"work dir {work} was produced by a different config; "
                "use a fresh directory"
            )


def _ensure_artifacts(cfg: RunConfig, work: Path) -> TrainedArtifacts:
    models = work / "models"
    if (models / "thresholds.json").exists():
        _log(f"reusing trained artifacts in {models}")
        return load_artifacts(work)
    _log("training artifacts (context model, autoencoders, thresholds)")
    artifacts = pipeline_train(cfg, workdir=work)
    for cat in artifacts.skipped_categories:
        _log(f"  category {cat}: too few profiles, no autoencoder trained")
    return artifacts


def cmd_gen_corpus(cfg: RunConfig, work: Path) -> int:
    from ..synthworld import make_world, save_world

    data = work / "data"
    data.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds()
    world = make_world(cfg.world, seeds["world"], margin_factor=cfg.world_margin_factor)
    save_world(world, data / "world.cgb")
    for name, count, seed_key in [
        ("train", cfg.corpus.train_scenes, "train_corpus"),
        ("calibration", cfg.corpus.calibration_scenes, "calibration_corpus"),
        ("eval", cfg.corpus.eval_scenes, "eval_corpus"),
    ]:
        path = data / f"{name}.cgb"
        if path.exists():
            _log(f"reusing {path}")
            continue
        corpus = generate_corpus(world, count, seeds[seed_key])
        save_corpus(corpus, path)
        _log(f"wrote {path} ({count} scenes)")
    update_manifest(work, cfg)
    return 0


def cmd_train(cfg: RunConfig, work: Path) -> int:
    _ensure_artifacts(cfg, work)
    _log(f"artifacts ready under {work / 'models'}")
    return 0


def _attack_path(work: Path, name: str) -> Path:
    return work / "data" / f"attacked_{name}.cgb"


def _selected_attacks(cfg: RunConfig, name: str | None):
    if name is None:
        return cfg.attacks
    matches = [a for a in cfg.attacks if a.name == name]
    if not matches:
        raise ConfigError(f"no configured attack named {name!r}")
    return matches


def cmd_attack(cfg: RunConfig, work: Path, name: str | None) -> int:
    artifacts = _ensure_artifacts(cfg, work)
    (work / "data").mkdir(parents=True, exist_ok=True)
    for settings in _selected_attacks(cfg, name):
        path = _attack_path(work, settings.name)
        if path.exists():
            _log(f"reusing {path}")
            continue
        attacked, log = run_attack(cfg, artifacts, settings)
        save_attacked_corpus(attacked, path)
        _log(
            f"wrote {path}: {log.retained}/{log.attempted} scenes retained "
            f"({log.success_rate:.0%} attack success)"
        )
    update_manifest(work, cfg)
    return 0


def cmd_detect(cfg: RunConfig, work: Path, name: str | None, node_only: bool) -> int:
    artifacts = _ensure_artifacts(cfg, work)
    for settings in _selected_attacks(cfg, name):
        path = _attack_path(work, settings.name)
        if not path.exists():
            _log(f"building attacked corpus for {settings.name}")
            attacked, _ = run_attack(cfg, artifacts, settings)
            save_attacked_corpus(attacked, path)
        attacked = load_attacked_corpus(path)
        out = work / "results" / settings.name
        out.mkdir(parents=True, exist_ok=True)
        report = pipeline_detect(artifacts, attacked, cfg.evaluation.fpr_grid)
        node_auc = None
        if node_only:
            node_report = ablation_node_only(cfg, artifacts, attacked)
            node_auc = node_report.auc
            write_region_csv(node_report, out / "regions_node_only.csv")
        write_region_csv(report, out / "regions.csv")
        write_roc_csv(report, out / "roc.csv")
        doc = report_summary_dict(
            report,
            attacked,
            name=settings.name,
            goal=settings.goal,
            mask=settings.mask,
            node_only_auc=node_auc,
        )
        write_report_json(doc, out / "report.json")
        auc = "n/a" if report.auc is None else f"{report.auc:.3f}"
        _log(f"{settings.name}: AUC {auc} over {len(report.records)} regions")
    update_manifest(work, cfg)
    return 0


def cmd_eval(cfg: RunConfig, work: Path) -> int:
    cmd_gen_corpus(cfg, work)
    cmd_train(cfg, work)
    cmd_attack(cfg, work, None)
    cmd_detect(cfg, work, None, node_only=True)
    return cmd_report(work)


def cmd_report(work: Path) -> int:
    results = work / "results"
    docs = []
    for report_file in sorted(results.glob("*/report.json")):
        docs.append(json.loads(report_file.read_text()))
    if not docs:
        _log(f"no results under {results}")
        return 3
    summary = render_summary(docs)
    out = work / "summary.md"
    out.write_text(summary)
    _log(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contextguard",
        description=(
            "Synthetic-world pipeline for detecting adversarial feature "
            "perturbations through context-profile reconstruction errors."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--work", required=True, help="work directory for artifacts")
        return p

    add("gen-corpus", "generate the world and corpora")
    add("train", "train the context model, autoencoders, and thresholds")
    p_attack = add("attack", "build attacked corpora for the configured attacks")
    p_attack.add_argument("--name", help="only this configured attack")
    p_detect = add("detect", "score attacked corpora and write reports")
    p_detect.add_argument("--name", help="only this configured attack")
    p_detect.add_argument(
        "--skip-node-only",
        action="store_true",
        help="skip the node-features-only paired run",
    )
    add("eval", "run every stage end to end")
    add("report", "render summary.md from existing results", needs_config=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    work = Path(args.work)
    try:
        if args.command == "report":
            return cmd_report(work)
        cfg = load_config(args.config)
        _check_manifest(cfg, work)
        work.mkdir(parents=True, exist_ok=True)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(cfg, work)
        if args.command == "train":
            return cmd_train(cfg, work)
        if args.command == "attack":
            return cmd_attack(cfg, work, args.name)
        if args.command == "detect":
            return cmd_detect(cfg, work, args.name, not args.skip_node_only)
        if args.command == "eval":
            return cmd_eval(cfg, work)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CorpusFormatError, RuntimeError, ValueError) as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
