"""Kernel backend selection.

Two interchangeable kernel sets exist: pure numpy (_kernels_numpy) and numba
@njit (_kernels_numba). The active one is chosen once at import from the
TRIFLOW_BACKEND environment variable ("numpy" or "numba"; unset = numba when
importable, else numpy) and can be switched at runtime with use(). Callers
access kernels through the `kernels` proxy so a switch takes effect
immediately everywhere.
"""

import os

from . import _kernels_numpy
from .errors import ConfigError

_KERNEL_NAMES = [
    "silu_fwd", "silu_bwd", "sigmoid_fwd", "sigmoid_bwd",
    "rmsnorm_fwd", "rmsnorm_bwd",
    "masked_softmax_fwd", "masked_softmax_bwd", "softmax_rows_fwd",
    "cross_entropy_fwd", "cross_entropy_bwd", "adamw_update",
]


class _KernelProxy:
    """Attribute access resolves against the active backend module."""

    def __init__(self):
        self._module = _kernels_numpy
        self._name = "numpy"

    def __getattr__(self, item):
        return getattr(self._module, item)


kernels = _KernelProxy()


def _load_numba_module():
    from . import _kernels_numba  # deferred: importing numba is not free
    return _kernels_numba


def available_backends():
    """Names of backends importable in this environment."""
    names = ["numpy"]
    try:
        _load_numba_module()
        names.append("numba")
    except ImportError:
        pass
    return names


def use(name):
    """Activate a kernel backend by name ('numpy' or 'numba')."""
    if name == "numpy":
        kernels._module = _kernels_numpy
    elif name == "numba":
        try:
            kernels._module = _load_numba_module()
        except ImportError as exc:
            raise ConfigError(f"backend 'numba' requested but numba is not importable: {exc}")
    else:
        raise ConfigError(f"unknown backend {name!r}; expected 'numpy' or 'numba'")
    kernels._name = name
    return name


def active_backend():
    """Name of the backend currently serving kernel calls."""
    return kernels._name


def _init_from_env():
    env = os.environ.get("TRIFLOW_BACKEND", "").strip().lower()
    if env:
        use(env)
        return
    try:
        use("numba")
    except ConfigError:
        use("numpy")


_init_from_env()
