"""Distill-then-fine-tune pipeline for compact pathology feature extractors."""

from .costs import count_mac, count_params, layer_plan
from .distill import DistillConfig, distill_loss, distill_train, load_checkpoint
from .metrics import compute_metrics
from .models import ModelSpec, build_model
from .scan import SCAN, ScanConfig, TransScan, TransScanConfig

__version__ = "0.1.0"
