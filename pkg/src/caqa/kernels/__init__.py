"""Kernel backend selection.

Two interchangeable backends provide the hot sequence kernels (convolution
bank and LSTM): ``_fast``, a compiled Cython extension, and ``_ref``, a
pure-numpy fallback. The compiled backend is preferred when importable;
``CAQA_KERNELS=numpy|compiled|auto`` overrides, and :func:`use` switches at
runtime. Outputs of the two backends agree to floating-point noise but are
not bit-identical; within one backend every kernel is deterministic.
"""

import os

from ..errors import ConfigError
from . import _ref

_active = None


def _load_compiled():
    from . import _fast  # noqa: PLC0415

    return _fast


def use(name: str):
    """Select the kernel backend by name ("numpy", "compiled", or "auto")."""
    global _active
    if name == "numpy":
        _active = _ref
    elif name == "compiled":
        _active = _load_compiled()
    elif name == "auto":
        try:
            _active = _load_compiled()
        except ImportError:
            _active = _ref
    else:
        raise ConfigError(f"unknown kernel backend {name!r}")
    return _active


def active():
    """Return the active backend module, loading the default if needed."""
    global _active
    if _active is None:
        use(os.environ.get("CAQA_KERNELS", "auto"))
    return _active


def available() -> list[str]:
    names = ["numpy"]
    try:
        _load_compiled()
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names
