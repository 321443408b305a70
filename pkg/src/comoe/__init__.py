"""Contrastive mixture of LoRA experts, an exact MI-gap oracle and a desk-scale trainer."""
from .adapters import (LoraExpert, MoeLoraLayer, MoeOutput, Router, RoutingDecision, decide,
                       lora_forward, moe_forward, route)
from .contrastive import (ContrastiveBatch, contrastive_loss_single, contrastive_loss_sumk,
                          total_loss)
from .diagnostics import (SimilarityReport, WorkloadMatrix, expert_workload,
                          representation_similarity, workload_divergence)
from .migap import (DiscreteJoint, GapScenario, bound_report, infonce_estimate, mi_gap,
                    mutual_information)
from .trainer import (SyntheticTaskSpec, TrainConfig, adamw_step, generate_dataset, sweep_lambda,
                      train)

__version__ = "0.1.0"
