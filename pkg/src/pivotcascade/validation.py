"""Input checks shared by the estimator wrappers and the command line."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .data import DataError


def check_lines(X, name: str = "X", allow_empty_lines: bool = False) -> list[str]:
    """Coerce a 1-d collection of sentences to ``list[str]``."""
    if isinstance(X, str):
        raise DataError(f"{name} must be a sequence of sentences, not a single string")
    if isinstance(X, np.ndarray):
        if X.ndim != 1:
            raise DataError(f"{name} must be 1-dimensional, got shape {X.shape}")
        X = X.tolist()
    try:
        lines = list(X)
    except TypeError as err:
        raise DataError(f"{name} is not iterable") from err
    if not lines:
        raise DataError(f"{name} is empty")
    for i, line in enumerate(lines):
        if not isinstance(line, str):
            raise DataError(f"{name}[{i}] is {type(line).__name__}, expected str")
        if not allow_empty_lines and not line.split():
            raise DataError(f"{name}[{i}] is an empty sentence")
    return lines


def check_parallel(X, y, names: Sequence[str] = ("X", "y")) -> tuple[list[str], list[str]]:
    xs = check_lines(X, names[0])
    ys = check_lines(y, names[1])
    if len(xs) != len(ys):
        raise DataError(f"{names[0]} and {names[1]} have different lengths: {len(xs)} vs {len(ys)}")
    return xs, ys


def check_choice(value: str, choices: Iterable[str], name: str) -> str:
    choices = tuple(choices)
    if value not in choices:
        raise ValueError(f"{name} must be one of {', '.join(choices)}; got {value!r}")
    return value


def check_positive(value, name: str, allow_zero: bool = False):
    if value is None or (value < 0 if allow_zero else value <= 0):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValueError(f"{name} must be {bound}, got {value!r}")
    return value
