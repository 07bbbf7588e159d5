"""Central finite-difference gradient checking."""

from typing import Callable, Dict, Iterable, Optional

import numpy as np

from catch_prolong.nn.kernel import Params


def numerical_gradient(objective: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """
    d objective / d array by central differences, perturbing `array` in
    place (and restoring it) one element at a time.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = objective()
        flat[i] = original - eps
        minus = objective()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(objective: Callable[[], float], analytic: Params, params: Params,
                    keys: Optional[Iterable[str]] = None, eps: float = 1e-6) -> Dict[str, float]:
    """
    Relative error of every analytic gradient against central differences.

    `objective` must read the arrays in `params`, which are perturbed in
    place while checking.
    """
    errors = {}
    for key in sorted(keys if keys is not None else params):
        numeric = numerical_gradient(objective, params[key], eps)
        errors[key] = relative_error(analytic[key], numeric)
    return errors
