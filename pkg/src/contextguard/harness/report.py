"""Result serialization: per-region CSV, ROC points, stratified AUC
tables, and the run summary document."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..redteam import AttackedCorpus
from ..synthworld import iou
from .metrics import roc_auc
from .pipeline import DetectionReport

PROPOSAL_BUCKETS = [("1-3", 1, 3), ("3-6", 4, 6), ("6-9", 7, 9), ("9-12", 10, 12)]
IOU_BUCKETS = [
    ("0.0", 0.0, 0.0),
    ("0.0-0.1", 0.0, 0.1),
    ("0.1-0.2", 0.1, 0.2),
    ("0.2-0.3", 0.2, 0.3),
    ("0.3-0.4", 0.3, 0.4),
    ("0.4-0.5", 0.4, 0.5),
]
OBJECT_BUCKETS = [(str(n), n) for n in range(1, 7)]
MIN_BUCKET_POSITIVES = 50


def _bucket_auc(records, scene_ids_in_bucket) -> float | None:
    sub = [r for r in records if r.scene_id in scene_ids_in_bucket]
    scores = np.array([r.recon_error for r in sub])
    labels = np.array([r.is_positive for r in sub], dtype=bool)
    if labels.sum() < MIN_BUCKET_POSITIVES or not (~labels).any():
        return None
    _, auc = roc_auc(scores, labels)
    return float(auc)


def stratified_report(
    report: DetectionReport, attacked: AttackedCorpus
) -> dict[str, dict[str, float | None]]:
    """AUC recomputed per bucket of: proposals on the perturbed object,
    overlap (IoU) of the appearing region with ground-truth objects, and
    objects per scene. Buckets with fewer than MIN_BUCKET_POSITIVES
    positive regions are suppressed (None, rendered as "-")."""
    scenes = {s.scene_id: s for s in attacked.corpus.scenes}
    by_proposals: dict[str, set[int]] = {label: set() for label, _, _ in PROPOSAL_BUCKETS}
    by_iou: dict[str, set[int]] = {label: set() for label, _, _ in IOU_BUCKETS}
    by_objects: dict[str, set[int]] = {label: set() for label, _ in OBJECT_BUCKETS}

    for ann in attacked.annotations:
        scene = scenes[ann.scene_id]
        n_props = len(ann.region_indices)
        for label, lo, hi in PROPOSAL_BUCKETS:
            if lo <= n_props <= hi:
                by_proposals[label].add(ann.scene_id)
                break
        if ann.goal == "appear" and ann.region_indices:
            box = scene.proposals[ann.region_indices[0]].bbox
            overlap = max((iou(box, o.bbox) for o in scene.objects), default=0.0)
            for label, lo, hi in IOU_BUCKETS:
                if label == "0.0":
                    if overlap == 0.0:
                        by_iou[label].add(ann.scene_id)
                        break
                elif lo < overlap <= hi:
                    by_iou[label].add(ann.scene_id)
                    break
        n_obj = len(scene.objects)
        for label, n in OBJECT_BUCKETS:
            if n_obj == n:
                by_objects[label].add(ann.scene_id)
                break

    return {
        "proposals_per_object": {
            label: _bucket_auc(report.records, ids)
            for label, ids in by_proposals.items()
        },
        "appear_iou": {
            label: _bucket_auc(report.records, ids) for label, ids in by_iou.items()
        },
        "objects_per_scene": {
            label: _bucket_auc(report.records, ids)
            for label, ids in by_objects.items()
        },
    }


# ---------------------------------------------------------------------------
# File outputs
# ---------------------------------------------------------------------------


def write_region_csv(report: DetectionReport, path) -> None:
    """Machine-readable per-region records; label is 1 for perturbed."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "region_idx", "pred_cat", "recon_err", "label"])
        for r in report.records:
            writer.writerow(
                [
                    r.scene_id,
                    r.region_index,
                    r.pred_category,
                    f"{r.recon_error:.17g}",
                    int(r.is_positive),
                ]
            )


def write_roc_csv(report: DetectionReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thresh in report.roc:
            writer.writerow([f"{fpr:.17g}", f"{tpr:.17g}", f"{thresh:.17g}"])


def report_summary_dict(
    report: DetectionReport,
    attacked: AttackedCorpus | None = None,
    name: str = "",
    goal: str = "",
    mask: str = "full",
    node_only_auc: float | None = None,
) -> dict:
    doc = {
        "name": name,
        "goal": goal,
        "mask": mask,
        "auc": report.auc,
        "node_only_auc": node_only_auc,
        "measured_fpr": report.measured_fpr,
        "target_fpr": report.target_fpr,
        "n_regions": len(report.records),
        "n_positive": int(sum(r.is_positive for r in report.records)),
        "hidden_without_regions": report.hidden_without_regions,
        "objects_detected": int(sum(o.detected for o in report.objects)),
        "objects_total": len(report.objects),
        "per_category_auc": {str(k): v for k, v in report.per_category_auc.items()},
        "recall_at_fpr": [
            {
                "fpr": e.fpr,
                "threshold": e.threshold,
                "recall": e.recall,
                "low_confidence": e.low_confidence,
            }
            for e in report.recall
        ],
    }
    if attacked is not None:
        doc["stratified"] = stratified_report(report, attacked)
    return doc


def write_report_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Summary document
# ---------------------------------------------------------------------------

_COLUMNS = [
    ("full", "miscategorize", "Digital Miscateg"),
    ("full", "hide", "Digital Hiding"),
    ("full", "appear", "Digital Appearing"),
    ("block25", "miscategorize", "Physical Miscateg"),
    ("block25", "hide", "Physical Hiding"),
    ("block25", "appear", "Physical Appearing"),
]


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def render_summary(attack_docs: list[dict]) -> str:
    """Markdown summary over all evaluated attacks: the six-column attack
    layout (digital/physical x goal), per-category AUC, recall tables, and
    stratified AUC. All numbers are synthetic-world results."""
    by_key = {(d["mask"], d["goal"]): d for d in attack_docs}
    lines = [
        "# Detection summary (synthetic world)",
        "",
        "Region-level ROC-AUC per attack; digital = unrestricted feature",
        "perturbation, physical = contiguous 25% coordinate block.",
        "",
        "| Method | " + " | ".join(title for _, _, title in _COLUMNS) + " |",
        "|---" * (len(_COLUMNS) + 1) + "|",
    ]
    full_row = ["full profile"]
    node_row = ["node features only"]
    for mask, goal, _ in _COLUMNS:
        doc = by_key.get((mask, goal))
        full_row.append(_fmt(doc["auc"] if doc else None))
        node_row.append(_fmt(doc.get("node_only_auc") if doc else None))
    lines.append("| " + " | ".join(full_row) + " |")
    if any(cell != "-" for cell in node_row[1:]):
        lines.append("| " + " | ".join(node_row) + " |")
    lines.append("")

    for doc in attack_docs:
        lines.append(f"## {doc['name']}")
        lines.append("")
        lines.append(
            f"- regions: {doc['n_regions']} ({doc['n_positive']} perturbed); "
            f"objects detected: {doc['objects_detected']}/{doc['objects_total']}"
        )
        lines.append(
            f"- measured clean FPR {doc['measured_fpr']:.4f} at target "
            f"{doc['target_fpr']:.4f}"
        )
        if doc.get("hidden_without_regions"):
            lines.append(
                f"- attacks with no proposed region (missed by construction): "
                f"{doc['hidden_without_regions']}"
            )
        per_cat = doc.get("per_category_auc", {})
        if per_cat:
            lines.append("")
            lines.append("| Category | AUC |")
            lines.append("|---|---|")
            for cat in sorted(per_cat, key=int):
                lines.append(f"| {cat} | {_fmt(per_cat[cat])} |")
        recall = doc.get("recall_at_fpr", [])
        if recall:
            lines.append("")
            lines.append("| FPR | Recall | Note |")
            lines.append("|---|---|---|")
            for e in recall:
                note = "low confidence" if e["low_confidence"] else ""
                lines.append(f"| {e['fpr']:g} | {e['recall']:.3f} | {note} |")
        strat = doc.get("stratified")
        if strat:
            for key, title in [
                ("proposals_per_object", "Proposals on the perturbed object"),
                ("appear_iou", "Appear-region overlap (IoU)"),
                ("objects_per_scene", "Objects per scene"),
            ]:
                table = strat.get(key, {})
                if not table or all(v is None for v in table.values()):
                    continue
                lines.append("")
                lines.append(f"### {title}")
                lines.append("")
                lines.append("| Bucket | AUC |")
                lines.append("|---|---|")
                for bucket, value in table.items():
                    lines.append(f"| {bucket} | {_fmt(value)} |")
        lines.append("")
    return "\n".join(lines) + "\n"
