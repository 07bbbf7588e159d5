"""
Minimal numpy neural toolkit: activations, conv/GRU/dense layers with
hand-written adjoints, Adam and a finite-difference gradient checker.
"""

from catch_prolong.nn.kernel import (
    Conv1D, Dense, GRULayer, Params, ShapeError,
    conv1d_forward, gru_layer_forward, init_params, sigmoid, softplus, softplus_inverse,
)
from catch_prolong.nn.optim import AdamState, adam_step, clip_by_global_norm, global_norm
from catch_prolong.nn.gradcheck import check_gradients, numerical_gradient, relative_error
