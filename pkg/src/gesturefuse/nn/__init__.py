from gesturefuse.nn.params import Parameter, ParamStore, adam_step, uniform_init
from gesturefuse.nn.layers import (
    AttentionPool,
    BatchNorm1d,
    Conv1d,
    GRULayer,
    Linear,
    attention_backward,
    attention_forward,
    cross_entropy,
    relu,
    sigmoid,
    softmax,
)
from gesturefuse.nn.gradcheck import grad_check

__all__ = [
    "AttentionPool",
    "BatchNorm1d",
    "Conv1d",
    "GRULayer",
    "Linear",
    "ParamStore",
    "Parameter",
    "adam_step",
    "attention_backward",
    "attention_forward",
    "cross_entropy",
    "grad_check",
    "relu",
    "sigmoid",
    "softmax",
    "uniform_init",
]
