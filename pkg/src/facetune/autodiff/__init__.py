"""Reverse-mode differentiation on numpy arrays."""

from .gradcheck import check_gradients, numerical_grad, relative_error
from .init import kaiming_init, kaiming_normal, rng_for
from .optim import Adam, OptimConfig, Parameter
from .tensor import (
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    default_dtype,
    div,
    elu,
    enable_grad,
    exp,
    flatten,
    gather_rows,
    get_default_dtype,
    getitem,
    grad,
    l1_norm,
    l2_norm,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scalar_mul,
    scatter_rows,
    set_default_dtype,
    sigmoid,
    softplus,
    sparse_matmul,
    sqrt,
    square,
    squared_l2,
    sub,
    sum_,
    swapaxes,
)

__all__ = [name for name in dir() if not name.startswith("_")]
