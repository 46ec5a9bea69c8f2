from gessure.nn.functional import (
    conv1d_forward,
    cross_entropy,
    dense_softmax_forward,
    dropout_apply,
    lstm_forward,
    maxpool1d_forward,
)
from gessure.nn.gradcheck import gradient_check
from gessure.nn.layers import LSTM, Conv1D, Dense, Dropout, Layer, MaxPool1D, TimeDistributed, softmax
from gessure.nn.network import Network
from gessure.nn.optim import OptimizerState, adam_step

__all__ = [
    "Conv1D",
    "Dense",
    "Dropout",
    "LSTM",
    "Layer",
    "MaxPool1D",
    "Network",
    "OptimizerState",
    "TimeDistributed",
    "adam_step",
    "conv1d_forward",
    "cross_entropy",
    "dense_softmax_forward",
    "dropout_apply",
    "gradient_check",
    "lstm_forward",
    "maxpool1d_forward",
    "softmax",
]
