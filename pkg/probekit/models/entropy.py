"""Discrete distributions and Markov chain specifications."""

from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

MAX_ALPHABET = 64
PMF_TOLERANCE = 1e-9


def _check_row(row: List[float], what: str) -> None:
    arr = np.asarray(row, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{what}: expected a non-empty probability vector")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{what}: probabilities must be finite and non-negative")
    if abs(arr.sum() - 1.0) > PMF_TOLERANCE:
        raise ValueError(f"{what}: probabilities sum to {arr.sum():.12f}, not 1")


class Pmf(BaseModel):
    """Probability mass function over a finite alphabet."""

    probabilities: List[float]
    model_config = ConfigDict(from_attributes=True, frozen=True)

    @field_validator("probabilities")
    @classmethod
    def _valid(cls, v: List[float]) -> List[float]:
        _check_row(v, "Pmf")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=np.float64)


class ChainSpec(BaseModel):
    """Y <- A1 -> A2 -> ... -> AK.

    ``emission[a1][y]`` is P(y | a1); ``transitions[k][a][b]`` is
    P(A_{k+2} = b | A_{k+1} = a).
    """

    marginal: Pmf
    transitions: List[List[List[float]]]
    emission: List[List[float]]
    model_config = ConfigDict(from_attributes=True)

    @model_validator(mode="after")
    def _consistent(self) -> "ChainSpec":
        size = len(self.marginal.probabilities)
        if size > MAX_ALPHABET:
            raise ValueError(f"alphabet of A1 has {size} symbols, limit is {MAX_ALPHABET}")
        if len(self.emission) != size:
            raise ValueError(f"emission has {len(self.emission)} rows, A1 has {size} symbols")
        width = len(self.emission[0]) if self.emission else 0
        if width > MAX_ALPHABET:
            raise ValueError(f"alphabet of Y has {width} symbols, limit is {MAX_ALPHABET}")
        for i, row in enumerate(self.emission):
            if len(row) != width:
                raise ValueError("emission rows must have equal length")
            _check_row(row, f"emission row {i}")
        for k, matrix in enumerate(self.transitions):
            if len(matrix) != size:
                raise ValueError(
                    f"transition {k} has {len(matrix)} rows, previous layer has {size} symbols"
                )
            nxt = len(matrix[0]) if matrix else 0
            if nxt > MAX_ALPHABET:
                raise ValueError(f"transition {k} targets {nxt} symbols, limit is {MAX_ALPHABET}")
            for i, row in enumerate(matrix):
                if len(row) != nxt:
                    raise ValueError(f"transition {k} rows must have equal length")
                _check_row(row, f"transition {k} row {i}")
            size = nxt
        return self

    @property
    def length(self) -> int:
        """Number of layers K."""
        return len(self.transitions) + 1
