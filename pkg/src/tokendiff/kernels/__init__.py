"""Sampling-chain kernels with a compiled core and a pure-Python fallback.

The compiled extension (Cython) is preferred when importable; set
TOKENDIFF_PURE_PYTHON=1 to force the numpy fallback. Both backends share
one contract and are cross-checked in the test suite; the benchmark in
benchmarks/bench_kernels.py compares their throughput.
"""

from __future__ import annotations

import os

from . import _reference

_FORCE_PY = os.environ.get("TOKENDIFF_PURE_PYTHON", "") not in ("", "0")

if _FORCE_PY:
    _impl = _reference
else:
    try:
        from . import _compiled as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _reference

BACKEND = _impl.NAME

marginal_rows = _impl.marginal_rows
sample_categorical_rows = _impl.sample_categorical_rows
posterior_mix_rows = _impl.posterior_mix_rows
posterior_rows = _impl.posterior_rows
chain_likelihood = _impl.chain_likelihood


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _compiled  # noqa: F401

        names.append("compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Return the backend module by name ("python" or "compiled")."""
    if name == "python":
        return _reference
    if name == "compiled":
        from . import _compiled

        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")
