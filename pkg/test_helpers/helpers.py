import allure
import json
from dataclasses import asdict, is_dataclass
from enum import Enum

import numpy as np

from src.errors import EngineError


def default_serializer(obj):
    """JSON serializer for numpy values and result dataclasses."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Enum):
        return obj.value
    if is_dataclass(obj):
        return asdict(obj)
    raise TypeError("Type %s not serializable" % type(obj))


def attach_json(data, name):
    allure.attach(json.dumps(data, indent=4, default=default_serializer),
                  name=name, attachment_type=allure.attachment_type.JSON)


def run_and_log(func, *args, description="Running step", **kwargs):
    """Calls func(*args, **kwargs) inside an Allure step and attaches the result as JSON."""
    with allure.step(description):
        try:
            result = func(*args, **kwargs)
        except EngineError as e:
            allure.attach(f"{type(e).__name__}: {e}", name="Engine Error", attachment_type=allure.attachment_type.TEXT)
            raise
        try:
            attach_json(result, "Result")
        except TypeError:
            allure.attach(repr(result), name="Result", attachment_type=allure.attachment_type.TEXT)
        return result


def central_difference(func, x, step=1e-6):
    """Numerical gradient of the scalar func at x, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_grad = grad.reshape(-1)
    for index in range(flat_x.size):
        saved = flat_x[index]
        flat_x[index] = saved + step
        upper = func(x)
        flat_x[index] = saved - step
        lower = func(x)
        flat_x[index] = saved
        flat_grad[index] = (upper - lower) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def assert_gradient_close(analytic, numeric, tolerance=1e-5, floor=1e-8):
    error = relative_error(analytic, numeric, floor)
    assert error < tolerance, f"gradient relative error {error:.3e} exceeds {tolerance:.0e}"
