from fits.numerics.autodiff import Graph, Node
from fits.numerics.gradcheck import finite_diff_grad, graph_finite_diff, max_relative_error
from fits.numerics.linalg import pca_project, pearson_r
from fits.numerics.optim import OptimState, adam_step
from fits.numerics.tensorio import dump_tensors, load_tensors

__all__ = [
    "Graph",
    "Node",
    "OptimState",
    "adam_step",
    "dump_tensors",
    "finite_diff_grad",
    "graph_finite_diff",
    "load_tensors",
    "max_relative_error",
    "pca_project",
    "pearson_r",
]
