"""Kernel dispatch: compiled extension when importable, NumPy fallback
otherwise.

``LMN_BACKEND=python`` or ``LMN_BACKEND=compiled`` forces a backend at
import time (``compiled`` raises if the extension is not built); tests
and the scaling benchmark switch at runtime via :func:`set_backend`.
"""

import os

from . import pure as _pure

try:
    from . import _core as _compiled
except ImportError:
    _compiled = None

_BACKENDS = {"python": _pure}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled


def _initial_backend() -> str:
    requested = os.environ.get("LMN_BACKEND", "auto").strip().lower()
    if requested == "auto":
        return "compiled" if _compiled is not None else "python"
    if requested not in ("python", "compiled"):
        raise ValueError(f"unknown LMN_BACKEND value {requested!r}")
    if requested == "compiled" and _compiled is None:
        raise ImportError(
            "LMN_BACKEND=compiled but the lmn._kernels._core extension is not built"
        )
    return requested


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    return _active_name


def set_backend(name: str) -> str:
    """Switch the active backend; returns the previous one."""
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    previous = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return previous


def get_impl(name: str):
    """Direct handle on one backend module (used by the benchmark)."""
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    return _BACKENDS[name]


def score_vec(keys, q):
    return _active.score_vec(keys, q)


def combine_vec(s_row, s_col):
    return _active.combine_vec(s_row, s_col)


def topk_vec(s, k):
    return _active.topk_vec(s, k)


def topk_bcast_rows(s_row, s_col, k):
    return _active.topk_bcast_rows(s_row, s_col, k)


def weighted_rows(w, rows):
    return _active.weighted_rows(w, rows)
