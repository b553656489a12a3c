"""Epistemic uncertainty from a mixture of diffusion experts, at desk scale."""

from .config import RunConfig
from .core import RngStream, attention, ensemble_mean_var, gaussian, softmax
from .diffusion import (LatentState, NoiseSchedule, TrainingConfig, build_schedule, ddim_step, forward_marginal,
                        forward_step, ldm_loss, train_expert)
from .engine import EMoE, EmoeResult, ExpertBundle, UncertaintyEstimate, decode, epistemic_uncertainty
from .experiments import (Corpus, alignment_score, gp_convergence_probe, loglog_slope, make_corpus, run_experiment,
                          score_corpus, split_test)
from .stats import jonckheere_terpstra, pearson, quartile_split, welch_t_test
from .text import ExpertDescriptor, Prompt, embed, encode, gate_vector, tokenize
from .training import train_bundle
from .unet import GateWeights, Geometry, UNetWeights, compute_gate_weights

__version__ = "0.1.0"
