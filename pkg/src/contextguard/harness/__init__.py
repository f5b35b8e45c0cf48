"""End-to-end pipelines, evaluation metrics, reporting, and the CLI."""

from .metrics import recall_at_fpr, roc_auc  # noqa: F401
from .pipeline import (  # noqa: F401
    DetectionReport,
    TrainedArtifacts,
    ablation_node_only,
    pipeline_detect,
    pipeline_train,
)
