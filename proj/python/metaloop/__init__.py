"""Meta-learning workbench: differentiable inner loops, two meta-gradient engines.

Thin wrapper over the C++ core. The heavy lifting — the autodiff tape,
differentiable optimizer steps, unrolling, and both meta-gradient engines —
lives in the compiled ``_core`` module; this package just re-exports it.
"""

from ._core import (
    ConfigError,
    check_requirements,
    compare_engines,
    default_config,
    gradcheck,
    run,
    version,
)

__version__ = version()

__all__ = [
    "ConfigError",
    "check_requirements",
    "compare_engines",
    "default_config",
    "gradcheck",
    "run",
    "version",
]
