"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np
from sklearn.exceptions import NotFittedError

from .volume import Volume


def as_pair(item) -> Tuple[Volume, Volume]:
    """Accept a phantom case, a ``(fixed, moving)`` tuple of volumes, or a tuple of arrays."""
    if hasattr(item, "ed_image") and hasattr(item, "es_image"):
        return item.ed_image, item.es_image
    try:
        fixed, moving = item
    except (TypeError, ValueError):
        raise TypeError(f"expected a (fixed, moving) pair, got {type(item).__name__}") from None
    fixed = fixed if isinstance(fixed, Volume) else Volume(np.asarray(fixed, dtype=np.float64))
    moving = moving if isinstance(moving, Volume) else Volume(np.asarray(moving, dtype=np.float64), fixed.spacing)
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed/moving dims differ: {fixed.dims} vs {moving.dims}")
    return fixed, moving


def check_pairs(X, divisor: int = 1) -> List[Tuple[Volume, Volume]]:
    pairs = [as_pair(item) for item in X]
    if not pairs:
        raise ValueError("need at least one image pair")
    for fixed, _ in pairs:
        bad = [n for n in fixed.dims if n % divisor]
        if bad:
            raise ValueError(f"image dims {fixed.dims} must be divisible by {divisor}")
    return pairs


def check_fitted(est, attr: str = "params_") -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit() first")
