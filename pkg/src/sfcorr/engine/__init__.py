from .gradcheck import GradCheckReport, check_op, grad_check, numerical_grad
from .ops import (REGISTRY, DegenerateBatchError, batch_norm, concat, conv2d, exp, global_avg_pool,
                  l2_normalize, log, logsumexp, matmul, mean, pairwise_cosine, relu, reshape, transpose)
from .optim import AdamState, adam_step
from .tensor import Function, Node, Tensor, graph_nodes, topo_order

__all__ = [
    "AdamState", "DegenerateBatchError", "Function", "GradCheckReport", "Node", "REGISTRY", "Tensor",
    "adam_step", "batch_norm", "check_op", "concat", "conv2d", "exp", "global_avg_pool", "grad_check",
    "graph_nodes", "l2_normalize", "log", "logsumexp", "matmul", "mean", "numerical_grad",
    "pairwise_cosine", "relu", "reshape", "topo_order", "transpose",
]
