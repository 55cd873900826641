"""Sample alignment between source and target datasets."""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from datasets.models import Alignment, JointMetric, PairedDataset
from exceptions import ArgumentError, ShapeError


logger = logging.getLogger(__name__)


# Constants
DISTANCE_CHUNK_ROWS = 1024
SINKHORN_DEFAULT_REG = 0.05
SINKHORN_DEFAULT_MAX_ITER = 1000
SINKHORN_DEFAULT_TOL = 1e-9
SINKHORN_CHECK_EVERY = 5


class SinkhornResult(BaseModel):
    """
    Entropic OT coupling between target (rows) and source (columns).

    Attributes:
        coupling: (N_target, N_source) transport plan
        iterations: Iterations run
        marginal_error: L1 error of the row marginals of the returned plan
        converged: Whether marginal_error reached tol within max_iter
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    coupling: np.ndarray
    iterations: int
    marginal_error: float
    converged: bool


def _check_compatible(source: PairedDataset, target: PairedDataset) -> None:
    if source.dx != target.dx or source.dy != target.dy:
        raise ShapeError(
            f"source dims ({source.dx}, {source.dy}) do not match target dims "
            f"({target.dx}, {target.dy})"
        )


def _build_alignment(
    source: PairedDataset,
    target: PairedDataset,
    source_index: np.ndarray,
    distances: np.ndarray,
    method: str,
    converged: bool = True,
) -> Alignment:
    return Alignment(
        source_index=source_index,
        pair_distances=distances,
        epsilon_data=float(distances.max()),
        delta_x=target.inputs - source.inputs[source_index],
        delta_y=target.labels - source.labels[source_index],
        method=method,
        converged=converged,
    )


def align_nearest(
    source: PairedDataset,
    target: PairedDataset,
    metric: Optional[JointMetric] = None,
) -> Alignment:
    """
    Match each target sample to its nearest source sample in joint (x, y) space.

    Ties go to the smallest source index; several target samples may share a
    source sample.
    """
    _check_compatible(source, target)
    metric = metric or JointMetric()
    source_points = metric.embed(source)
    target_points = metric.embed(target)

    index = np.empty(target.size, dtype=np.intp)
    distances = np.empty(target.size)
    for start in range(0, target.size, DISTANCE_CHUNK_ROWS):
        stop = min(start + DISTANCE_CHUNK_ROWS, target.size)
        block = cdist(target_points[start:stop], source_points)
        # argmin returns the first minimum, i.e. the smallest j on ties
        best = np.argmin(block, axis=1)
        index[start:stop] = best
        distances[start:stop] = block[np.arange(stop - start), best]

    alignment = _build_alignment(source, target, index, distances, 'nearest')
    logger.info(
        f"Aligned {target.size} target samples to {source.size} source samples, "
        f"epsilon_data={alignment.epsilon_data:.6g}"
    )
    return alignment


def data_deviation(alignment: Alignment) -> float:
    """Tight data deviation: the largest aligned pair distance."""
    return float(np.max(alignment.pair_distances))


def sinkhorn_coupling(
    source: PairedDataset,
    target: PairedDataset,
    reg: float = SINKHORN_DEFAULT_REG,
    max_iter: int = SINKHORN_DEFAULT_MAX_ITER,
    tol: float = SINKHORN_DEFAULT_TOL,
    metric: Optional[JointMetric] = None,
) -> SinkhornResult:
    """
    Log-domain Sinkhorn iterations with uniform marginals.

    The cost is the (unsquared) joint-metric distance between target and
    source samples.
    The column marginals are exact after every iteration; convergence is
    judged on the L1 error of the row marginals. If tol is not reached, the
    iterate with the smallest marginal error is returned.
    """
    if not reg > 0:
        raise ArgumentError(f"Sinkhorn regularization must be positive, got {reg}")
    if max_iter < 1 or tol <= 0:
        raise ArgumentError(f"invalid max_iter={max_iter} or tol={tol}")
    _check_compatible(source, target)
    metric = metric or JointMetric()

    cost = cdist(metric.embed(target), metric.embed(source))
    n_target, n_source = cost.shape
    log_a = np.full(n_target, -np.log(n_target))
    log_b = np.full(n_source, -np.log(n_source))
    a = np.exp(log_a)

    scaled = -cost / reg
    f = np.zeros(n_target)
    g = np.zeros(n_source)

    best_error = np.inf
    best_potentials = (f, g)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        f = log_a - logsumexp(scaled + g[None, :], axis=1)
        g = log_b - logsumexp(scaled + f[:, None], axis=0)
        if iterations % SINKHORN_CHECK_EVERY and iterations != max_iter:
            continue
        rows = np.exp(logsumexp(scaled + f[:, None] + g[None, :], axis=1))
        error = float(np.abs(rows - a).sum())
        if error < best_error:
            best_error = error
            best_potentials = (f, g)
        if error < tol:
            break

    f, g = best_potentials
    coupling = np.exp(scaled + f[:, None] + g[None, :])
    converged = best_error < tol
    if not converged:
        logger.warning(
            f"Sinkhorn did not converge in {max_iter} iterations "
            f"(reg={reg}, marginal error {best_error:.3e})"
        )
    else:
        logger.debug(f"Sinkhorn converged after {iterations} iterations")

    return SinkhornResult(
        coupling=coupling,
        iterations=iterations,
        marginal_error=best_error,
        converged=converged,
    )


def align_sinkhorn(
    source: PairedDataset,
    target: PairedDataset,
    reg: float = SINKHORN_DEFAULT_REG,
    max_iter: int = SINKHORN_DEFAULT_MAX_ITER,
    tol: float = SINKHORN_DEFAULT_TOL,
    metric: Optional[JointMetric] = None,
) -> Alignment:
    """
    Entropic-OT alignment hardened to source_index[i] = argmax_j coupling[i, j].

    Distances, deltas and epsilon_data are then computed from the hardened
    matching exactly as in align_nearest.
    """
    metric = metric or JointMetric()
    result = sinkhorn_coupling(source, target, reg, max_iter, tol, metric)
    index = np.argmax(result.coupling, axis=1)

    source_points = metric.embed(source)[index]
    target_points = metric.embed(target)
    distances = np.sqrt(np.sum((target_points - source_points) ** 2, axis=1))

    alignment = _build_alignment(
        source, target, index, distances, 'sinkhorn', converged=result.converged
    )
    logger.info(
        f"Sinkhorn-aligned {target.size} target samples (reg={reg}), "
        f"epsilon_data={alignment.epsilon_data:.6g}"
    )
    return alignment
