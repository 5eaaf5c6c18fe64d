"""Causally-motivated debiasing for short-text classification under event shift.

The training-time model couples a domain-expert attention classifier with a
bias branch that absorbs the direct effect of event-specific tokens (entities,
hashtags, numerals); masking augmentation breaks residual token-label
shortcuts, and inference discards the bias branch entirely.
"""

from .bias_tokens import (BiasSpan, BiasTokenSet, TaggerConfig, annotate_corpus,
                          apply_masking, build_counterfactual_input,
                          identify_bias_tokens)
from .corpus import (Corpus, CorpusError, LabelSpace, Post, SplitSpec, SyntheticSpec,
                     filter_corpus, generate_synthetic_corpus, load_corpus,
                     planted_cooccurrence, remap_labels, save_corpus, temporal_split,
                     write_splits)
from .encoder import EncoderConfig, EncoderOutput, TinyTransformerEncoder, \
    build_encoder, register_encoder
from .evaluation import (EvalReport, PairedTResult, comparison_csv, evaluate,
                         macro_prf, paired_t_test, render_comparison_table)
from .model import (DebiasModel, ExpertBank, ModelConfig, Prediction, decide,
                    expert_attention_scores, fuse, masked_softmax, pool)
from .baselines import (Strategy, attention_entropy_penalty, build_system,
                        gradient_reversal, train_baseline)
from .probing import (ProbeResult, ProbeTask, extract_representations,
                      probe_results_csv, run_probe, run_probe_task)
from .systems import DebiasSystem, TrainingDiverged, compute_losses
from .training import (CheckpointManifest, TrainConfig, fit, select_checkpoint,
                       train_step)

__version__ = "0.1.0"
