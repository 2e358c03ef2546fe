"""Gradient-inversion attacks on small transformer text classifiers under FedSGD."""

from .model import (ModelConfig, SpecialTokens, TokenBatch, EmbeddingState, DropoutMaskSet,
                    GradientView, EncoderClassifier, classification_loss, one_hot,
                    ConfigError, NumericalError)
from .recovery import (DistanceSpec, AttackerAdaptation, RecoveryObjective, grad_distance,
                       recovery_loss, detect_noise_defense, derive_pruning_mask, ProtocolError)
from .fedsim import (Defense, FedConfig, client_step, server_aggregate, apply_gradient_noise,
                     apply_gradient_pruning, run_rounds)
from .layout import Layout
from .continuous import ContOptConfig, init_dummy, permute_select, cont_opt
from .discrete import DiscOptConfig, BeamSet, extract_token_sets, beam_step, disc_opt
from .attack import (AttackConfig, AttackerKnowledge, RecoveryResult, grab_attack,
                     baseline_dlg, baseline_tag)
from .metrics import RougeReport, rouge, mcc

__version__ = "0.1.0"
