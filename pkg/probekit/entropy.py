"""Exact Shannon entropies (nats) and the layer-wise conditional entropy of a Markov chain.

For a chain ``Y <- A1 -> A2 -> ... -> AK`` every later layer is a noisy
function of the earlier one, so ``H[Y|A_k]`` can only grow with ``k``.
``chain_conditional_entropies`` computes the sequence by exact
marginalization and refuses to return a sequence that breaks that order.
"""

import logging
from typing import Dict, List, Sequence, Union

import numpy as np
from pydantic import ValidationError

from .exceptions import InputError, InvariantError
from .models.entropy import MAX_ALPHABET, PMF_TOLERANCE, ChainSpec, Pmf
from .tensor import Rng

logger = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 1e-9


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p, dtype=np.float64)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def entropy(p: Union[Pmf, Sequence[float], np.ndarray]) -> float:
    """-sum p log p, with 0 log 0 = 0."""
    if not isinstance(p, Pmf):
        try:
            p = Pmf(probabilities=list(np.asarray(p, dtype=np.float64).reshape(-1)))
        except ValidationError as exc:
            raise InputError(f"entropy: invalid pmf: {exc.errors()[0]['msg']}") from exc
    # clamp the -0.0 a point mass produces
    return max(0.0, float(-_xlogx(p.as_array()).sum()))


def conditional_entropy(joint: Union[Sequence[Sequence[float]], np.ndarray]) -> float:
    """H[Y|X] for a joint table with x along rows and y along columns."""
    table = np.asarray(joint, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise InputError(f"conditional_entropy: expected a non-empty 2-D table, got shape {table.shape}")
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise InputError("conditional_entropy: joint entries must be finite and non-negative")
    total = table.sum()
    if abs(total - 1.0) > PMF_TOLERANCE:
        raise InputError(f"conditional_entropy: joint sums to {total:.12f}, not 1")
    px = table.sum(axis=1)
    # H[Y|X] = H[X,Y] - H[X]; rows with P(x)=0 contribute nothing to either term
    return max(0.0, float(_xlogx(px).sum() - _xlogx(table).sum()))


def chain_conditional_entropies(spec: ChainSpec) -> List[float]:
    """[H[Y|A1], ..., H[Y|AK]], verified non-decreasing."""
    joint = spec.marginal.as_array()[:, None] * np.asarray(spec.emission, dtype=np.float64)
    values = [conditional_entropy(joint / joint.sum())]
    for matrix in spec.transitions:
        # P(a_{k+1}, y) = sum_a P(a_{k+1} | a) P(a, y)
        joint = np.asarray(matrix, dtype=np.float64).T @ joint
        values.append(conditional_entropy(joint / joint.sum()))

    for k in range(1, len(values)):
        if values[k] < values[k - 1] - MONOTONE_TOLERANCE:
            raise InvariantError(
                f"H[Y|A_{k + 1}] = {values[k]:.12f} < H[Y|A_{k}] = {values[k - 1]:.12f}: "
                f"conditional entropy decreased at layer {k + 1}"
            )
    return values


def label_entropy(spec: ChainSpec) -> float:
    """H[Y], the ceiling every H[Y|A_k] stays under."""
    py = spec.marginal.as_array() @ np.asarray(spec.emission, dtype=np.float64)
    return entropy(py / py.sum())


def _random_rows(rng: Rng, rows: int, cols: int) -> List[List[float]]:
    # flat Dirichlet rows, with some entries zeroed to exercise 0 log 0
    weights = -np.log(1.0 - rng.uniform(rows * cols)).reshape(rows, cols)
    keep = rng.uniform(rows * cols).reshape(rows, cols) >= 0.25
    keep[np.arange(rows), rng.integers(cols, rows)] = True
    weights = weights * keep
    weights /= weights.sum(axis=1, keepdims=True)
    return weights.tolist()


def random_chain(rng: Rng, max_alphabet: int = 5, max_length: int = 6) -> ChainSpec:
    """Random chain with alphabets in [1, max_alphabet] and K in [1, max_length]."""
    if not 1 <= max_alphabet <= MAX_ALPHABET:
        raise InputError(f"random_chain: max_alphabet must be in [1, {MAX_ALPHABET}], got {max_alphabet}")
    if max_length < 1:
        raise InputError(f"random_chain: max_length must be >= 1, got {max_length}")
    length = 1 + int(rng.integers(max_length, 1)[0])
    sizes = [1 + int(s) for s in rng.integers(max_alphabet, length + 1)]
    num_labels, sizes = sizes[0], sizes[1:]
    marginal = _random_rows(rng, 1, sizes[0])[0]
    emission = _random_rows(rng, sizes[0], num_labels)
    transitions = [_random_rows(rng, a, b) for a, b in zip(sizes, sizes[1:])]
    return ChainSpec(marginal=Pmf(probabilities=marginal), transitions=transitions, emission=emission)


def demo_chains() -> Dict[str, ChainSpec]:
    """Small hand-built chains for ``probekit entropy-demo``."""
    bsc = [[0.9, 0.1], [0.1, 0.9]]
    identity = [[1.0, 0.0], [0.0, 1.0]]
    uniform = Pmf(probabilities=[0.5, 0.5])
    return {
        "identity": ChainSpec(marginal=uniform, transitions=[identity] * 3, emission=identity),
        "noisy": ChainSpec(marginal=uniform, transitions=[bsc] * 4, emission=identity),
        "erasure": ChainSpec(
            marginal=uniform,
            transitions=[bsc, [[0.5, 0.5], [0.5, 0.5]], identity],
            emission=identity,
        ),
        "coarsening": ChainSpec(
            marginal=Pmf(probabilities=[0.25, 0.25, 0.25, 0.25]),
            transitions=[
                [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
                [[0.8, 0.2], [0.2, 0.8]],
            ],
            emission=[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        ),
    }
