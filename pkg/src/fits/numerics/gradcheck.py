"""Central finite differences, used as the oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from fits.numerics.autodiff import Graph, Node


def finite_diff_grad(
    loss_fn: Callable[[], float], params: dict[str, np.ndarray], eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """``(f(θ+eps) - f(θ-eps)) / 2eps`` per coordinate.

    ``loss_fn`` is re-evaluated after each in-place perturbation of ``params``;
    every coordinate is restored to its exact original value afterwards.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(loss_fn())
            flat[i] = old - eps
            fm = float(loss_fn())
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        out[name] = g
    return out


def graph_finite_diff(graph: Graph, loss: Node, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Finite differences over every parameter leaf of a recorded graph.

    Only the part of the tape downstream of the perturbed parameter is
    re-evaluated, which makes whole-model checks affordable.
    """
    out = {}
    for name, leaf in graph.params.items():
        dirty = [n for n in graph.downstream([leaf]) if n.index <= loss.index]
        p = leaf.value
        flat = p.reshape(-1)
        g = np.zeros_like(p)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            graph.forward(dirty)
            fp = float(loss.value)
            flat[i] = old - eps
            graph.forward(dirty)
            fm = float(loss.value)
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        graph.forward(dirty)
        out[name] = g
    return out


def max_relative_error(a: dict, b: dict, floor: float = 1e-5) -> tuple[float, str]:
    """Largest ``|a-b| / max(|a|, |b|, floor)`` over all shared entries.

    ``floor`` keeps coordinates whose true gradient is ~0 from turning
    finite-difference round-off into a spurious relative error.
    """
    worst, where = 0.0, ""
    for name in a:
        x, y = np.asarray(a[name]), np.asarray(b[name])
        den = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        err = np.abs(x - y) / den
        if err.size and err.max() > worst:
            worst = float(err.max())
            where = f"{name}{tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape))}"
    return worst, where
