"""Two-layer CNN ensemble for chest radiographs: a COVID-19 layer with an
asymmetric negative threshold cascaded into an ARDS-probability layer."""

from wisdomnet.data_pipeline import CorpusSpec, Dataset, Sample, generate_synthetic_corpus, load_image, one_hot
from wisdomnet.ensemble import (
    Decision,
    DecisionPolicy,
    DecisionReport,
    EnsembleLayer,
    Role,
    aggregate_mean,
    cascade_predict,
    decide_covid,
    load_ensemble,
    predict_layer,
    save_ensemble,
    train_layer,
)
from wisdomnet.member_network import MemberNetwork, ProbabilityPair, build_member, forward, load_weights, save_weights
from wisdomnet.trainer import TrainConfig, adam_step, augment, select_members, train_candidate_pool, train_member

__version__ = "0.1.0"
