from .tensor import (
    AllMasked, NotNormalized, ShapeMismatch, Tape, Tensor, UnrecordedTensor, add, as_tensor,
    backward, concat, detach, dropout, einsum, embedding_lookup, exp, index, kl_divergence,
    kl_rows, log, matmul, mean, mul, pick_rows, reshape, sigmoid, softmax, stack, sub, sum, tanh,
)
from .params import LSTMParams, ParameterStore, lstm_cell
from .optim import Optimizer, OptimizerConfig, optimizer_step
from .blob import dump_blob, load_blob, read_blob, save_blob
