"""Central-difference verification of autodiff gradients."""
import logging

import numpy as np

from typing import Callable, List, Optional, Sequence, Tuple  # noqa F401

from mapgan.autodiff.tensor import DTYPE, Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-3


def relative_error(analytic, numeric):
    # type: (float, float) -> float
    return abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)


def _project(output, cotangent):
    # 64-bit accumulation keeps the finite-difference quotient above float32 noise
    return float(np.sum(output.data.astype(np.float64) * cotangent))


def _entries(point, analytic, sample, floor, rng):
    # type: (Sequence[Tensor], List[np.ndarray], Optional[int], float, np.random.Generator) -> List[Tuple[int, Tuple[int, ...]]]
    candidates = []
    for t_index, grad in enumerate(analytic):
        threshold = floor * float(np.abs(grad).max())
        for index in np.ndindex(*grad.shape):
            if abs(grad[index]) >= threshold:
                candidates.append((t_index, index))

    if sample is None or sample >= len(candidates):
        return candidates
    chosen = rng.choice(len(candidates), size=sample, replace=False)
    return [candidates[i] for i in sorted(chosen)]


def gradcheck(op, point, epsilon=DEFAULT_EPSILON, seed=0, sample=None, floor=0.0):
    # type: (Callable[..., Tensor], Sequence[Tensor], float, int, Optional[int], float) -> float
    """Compare autodiff gradients of `op` at `point` to central differences.

    Vector outputs are reduced to a scalar with a seeded random cotangent.
    Each checked entry is perturbed by +/- `epsilon` in place; the quotient
    uses the float32 step actually taken.

    :param op: callable mapping the tensors in `point` to an output tensor;
        must be deterministic across calls
    :param point: leaf tensors with requires_grad; perturbed and restored
    :param epsilon: finite-difference half step
    :param seed: seeds the cotangent and entry sampling
    :param sample: check only this many randomly chosen entries
    :param floor: skip entries whose autodiff gradient magnitude is below
        `floor` times the largest magnitude in the same tensor
    :return: worst relative error |a - n| / (|a| + |n| + 1e-8)
    :rtype: float
    """
    if epsilon <= 0:
        raise ValueError("gradcheck epsilon must be positive")

    rng = np.random.default_rng(seed)
    for t in point:
        t.zero_grad()

    output = op(*point)
    cotangent = rng.standard_normal(output.shape).astype(DTYPE)
    projected = (output * Tensor(cotangent)).sum()
    if projected.requires_grad:
        projected.backward()

    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros(t.shape, dtype=DTYPE)
        for t in point
    ]
    for t in point:
        t.zero_grad()

    cotangent64 = cotangent.astype(np.float64)
    worst = 0.0
    for t_index, index in _entries(point, analytic, sample, floor, rng):
        tensor = point[t_index]
        original = tensor.data[index]
        plus = DTYPE(original + DTYPE(epsilon))
        minus = DTYPE(original - DTYPE(epsilon))

        with no_grad():
            tensor.data[index] = plus
            f_plus = _project(op(*point), cotangent64)
            tensor.data[index] = minus
            f_minus = _project(op(*point), cotangent64)
        tensor.data[index] = original

        numeric = (f_plus - f_minus) / (float(plus) - float(minus))
        error = relative_error(float(analytic[t_index][index]), numeric)
        if error > worst:
            logger.debug(
                "gradcheck entry %s%s: autodiff=%g numeric=%g",
                t_index,
                index,
                analytic[t_index][index],
                numeric,
            )
            worst = error

    return worst
