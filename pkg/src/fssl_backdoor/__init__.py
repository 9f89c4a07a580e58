"""Desk-scale simulator of backdoor attacks and embedding-inspection defenses in federated self-supervised learning."""

from .aggregation import ClientUpdate, Upload, fedavg
from .attack import AttackPlan, MaliciousClientState, adaptive_variants, assign_triggers, local_train_malicious
from .config import build, load_config, resolve, run_experiment
from .core import EncoderSpec, EncoderState, OptimizerConfig, ParameterVector, default_spec, embed_many
from .data import Dataset, GlobalTrigger, TriggerPattern, embed_trigger, synthesize_dataset
from .defense import Defense, DefenseConfig, make_defense
from .errors import ConfigError, DataError, DefenseError, FSSLError, LayoutError, NonFiniteError, ZeroNormError
from .evaluation import EvalPlan, acc_and_asr, detection_stats, gap_relative_error
from .presets import preset, preset_names
from .protocol import FederationConfig, RoundReport, local_train_benign, run_federation, select_clients

__version__ = "0.1.0"
