"""Keyword-spotting backdoor workbench.

Trains small audio keyword classifiers, plants backdoor triggers, diagnoses
backdoored/hybrid/clean/redundant neurons through pruning-induced loss
changes, and repairs models with gradient-norm fine-tuning.
"""

from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .corpus import (AudioSample, DatasetSplit, FeatureMap, MfccConfig, StratificationError,
                     extract_mfcc, featurize, generate_synthetic_corpus,
                     load_directory_corpus, make_splits)
from .defense import (DefenseConfig, DefenseTrace, gnft_direction, gnft_step,
                      run_fine_pruning, run_gnft, run_vanilla_ft)
from .evalkit import (ExperimentReport, Metrics, attack_success_rate, clean_accuracy,
                      compare_runs, export_embeddings)
from .model import (CheckpointFormatError, GradientReport, ModelHandle, NeuronId,
                    batch_from_features, build_reference_model, checkpoint_load,
                    checkpoint_save, forward_loss, gradient, mask_neuron, train)
from .neuronlab import (NeuronRecord, ZoneSummary, backdoor_loss_change, classify_zones,
                        clean_loss_change, gradient_profile, zone_of)
from .pipeline import run_experiment
from .poisoning import (PoisonPlan, TriggerSpec, apply_trigger, build_asr_eval_set,
                        gain_echo, poison_dataset, replay_plan, spec_block, tone_overlay)

__version__ = "0.1.0"
