"""Reconstruction attacks run by the server from what it observes plus pretrained replicas."""

from .inverters import EncodedCorpus, SIPInverter, sip_attack, train_ae_baseline, train_sip
from .matching import (
    AttackHyperparams,
    MatchResult,
    dummy_gradient,
    gradient_matching,
    label_gradient,
    nearest_embedding_decode,
    smashed_data_matching,
)
from .namoe import NaMoEInverter, dxp_roster, gate_weights, namoe_attack, train_namoe
from .pipeline import MODES, AttackResult, ModeError, bisr_pipeline, run_modes
from .replica import (
    PROVENANCES,
    BottomEncoder,
    ProvenanceError,
    ReplicaSegments,
    pre_finetuned_encoder,
    random_encoder,
)

__all__ = [
    "MODES", "PROVENANCES", "AttackHyperparams", "AttackResult", "BottomEncoder", "EncodedCorpus",
    "MatchResult", "ModeError", "NaMoEInverter", "ProvenanceError", "ReplicaSegments", "SIPInverter",
    "bisr_pipeline", "run_modes", "dummy_gradient", "dxp_roster", "gate_weights", "gradient_matching",
    "label_gradient", "namoe_attack", "nearest_embedding_decode", "pre_finetuned_encoder",
    "random_encoder", "sip_attack", "smashed_data_matching", "train_ae_baseline", "train_namoe",
    "train_sip",
]
