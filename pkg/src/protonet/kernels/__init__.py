"""Hot-kernel dispatch.

Two interchangeable backends implement the convolution and bilinear-sampling
inner loops: a numba @njit one and a pure-numpy fallback. Selection order:

  1. env var PROTONET_BACKEND=numba|numpy (read at import)
  2. numba, when importable
  3. numpy

`set_backend` switches at runtime (used by tests and the benchmark).
"""

import os

from protonet.kernels import numpy_backend

_BACKENDS = {"numpy": numpy_backend}

try:
    from protonet.kernels import numba_backend
    _BACKENDS["numba"] = numba_backend
except ImportError:
    numba_backend = None

_DEFAULT = "numba" if "numba" in _BACKENDS else "numpy"
_active = os.environ.get("PROTONET_BACKEND", _DEFAULT)
if _active not in _BACKENDS:
    raise RuntimeError(
        f"PROTONET_BACKEND={_active!r} is not available; "
        f"choices: {sorted(_BACKENDS)}")


def get_backend() -> str:
    return _active


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choices: {sorted(_BACKENDS)}")
    _active = name


def conv2d_forward(xp, kernel, stride, out_h, out_w):
    return _BACKENDS[_active].conv2d_forward(xp, kernel, stride, out_h, out_w)


def conv2d_backward_input(dy, kernel, stride, pad_h, pad_w):
    return _BACKENDS[_active].conv2d_backward_input(dy, kernel, stride, pad_h, pad_w)


def conv2d_backward_kernel(xp, dy, kh, kw, stride):
    return _BACKENDS[_active].conv2d_backward_kernel(xp, dy, kh, kw, stride)


def bilinear_sample(images, src_y, src_x):
    return _BACKENDS[_active].bilinear_sample(images, src_y, src_x)
