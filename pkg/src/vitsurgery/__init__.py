"""Parameter-efficient fine-tuning surgery for Vision Transformers.

A small numpy-backed autodiff engine, a configurable ViT with exact
parameter accounting, block-expansion and LoRA model surgery, a K-NN
catastrophic-forgetting evaluator, and a deterministic two-domain
experiment harness with checkpointing, reports, and a CLI.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, FormatError, InputError, PrecisionError, ShapeError,
                     SpecError, UsageError, VersionError, VitSurgeryError)
from .tensor import Tensor, no_grad
from .model import (VIT_B16, ViTConfig, ViTModel, build_vit, extract_features,
                    format_count, forward_features, forward_logits, param_count,
                    parameter_shapes, patchify, replace_head)
from .peft import (AdapterSpec, ExpansionSpec, FreezeMask, attach_lora, build_freeze_mask,
                   expand_blocks, merge_lora, random_probes, verify_identity)
from .knn import (DEFAULT_K, FeatureIndex, ForgettingRecord, build_index, forgetting_report,
                  knn_predict, top1_accuracy)
from .data import Dataset, Split, dataset_from_idx, gen_domain, load_idx_images, load_idx_labels
from .optim import SGD, grad_check
from .training import TrainConfig, TrainHistory, evaluate, restore_params, snapshot_params, train
from .experiment import (REFERENCE, ExperimentReport, ReportRow, Strategy, SweepCell, SweepGrid,
                         lr_sweep, parse_strategy, prepare_base, reference_base,
                         reference_datasets, reference_experiment, reference_sweep,
                         run_forgetting_experiment, strategy_param_counts)
from .checkpoint import load_checkpoint, save_checkpoint
from .report import emit_report, emit_sweep, format_pct

__all__ = [name for name in dir() if not name.startswith("_")]
