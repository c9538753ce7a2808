"""Layer pruning for classification via per-layer probing chips.

Train tiny probing classifiers on the last-token hidden state of every layer
of a frozen decoder-only transformer, pick one, and drop every layer above
it. The truncated model's predictions are bit-identical to reading the full
model at that layer.
"""

from .backbone import (BackboneConfig, BackboneWeights, forward_trace,
                       forward_truncated, init_backbone, load_weights,
                       pretrain_backbone, save_weights)
from .chips import (ChipBank, LinearChip, MlpChip, chip_forward, chip_init,
                    chip_loss_and_grad, chip_zero, init_bank, load_bank,
                    multichip_loss, save_bank)
from .data import (FeatureCache, LabeledExample, TaskSpec, extract_features,
                   gen_synthetic, read_cache, split, task_label, write_cache)
from .errors import ChiplabError, ConfigError, ContractViolation, FormatError
from .kernels import AdamHyper, AdamState, adam_step, matvec, nll_loss, relu, softmax
from .pruning import (Fixed, MultiChipModel, Optimal, PrunedModel, Validate,
                      build_multichip_model, build_pruned_model, load_pruned,
                      multichip_infer, prune_ratio, pruned_infer, save_pruned,
                      select_chip)
from .report import EvalReport, emit_report, make_report, read_report
from .training import (ArrayDataset, TraceDataset, TrainConfig, evaluate_bank,
                       train_bank)

__version__ = "0.1.0"
