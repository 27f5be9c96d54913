"""Federated protocol state machines, training loops and inference."""

from .protocol import (
    BroadcastMsg,
    Channel,
    ClientState,
    EnsembleView,
    ServerState,
    TrainConfig,
    UploadMsg,
    client_round,
    evaluate,
    predict,
    predict_global,
    pretrain,
    server_round,
)
from .runner import METHODS, TrainReport, run_baseline, run_dualadapt, run_method

__all__ = [
    "BroadcastMsg",
    "Channel",
    "ClientState",
    "EnsembleView",
    "METHODS",
    "ServerState",
    "TrainConfig",
    "TrainReport",
    "UploadMsg",
    "client_round",
    "evaluate",
    "predict",
    "predict_global",
    "pretrain",
    "run_baseline",
    "run_dualadapt",
    "run_method",
    "server_round",
]
