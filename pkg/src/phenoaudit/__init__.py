"""Clinical code-audit pipeline: coder-mimicking neural phenotyping,
discordance review, and population miscoding projection on synthetic
encounter cohorts with planted ground truth."""

__version__ = "0.1.0"

from .features import EncounterFeaturizer, PatientHistory
from .network import MlpConfig, grad_check, init_model
from .store import DiabetesCodeSet, EncounterRecord
from .synth import CohortConfig, generate_cohort
from .training import MlpClassifier, TrainSchedule, train

__all__ = [
    "CohortConfig",
    "DiabetesCodeSet",
    "EncounterFeaturizer",
    "EncounterRecord",
    "MlpClassifier",
    "MlpConfig",
    "PatientHistory",
    "TrainSchedule",
    "generate_cohort",
    "grad_check",
    "init_model",
    "train",
]
