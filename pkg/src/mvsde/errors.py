"""Exception hierarchy shared by the library and the command line.

Every exception carries the process exit code the CLI maps it to.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    from .picard import PicardReport


class MvsdeError(Exception):
    exit_code = 1


class ArgumentError(MvsdeError, ValueError):
    """Invalid arguments to a library operation."""

    exit_code = 2


class UnsupportedError(ArgumentError):
    """A well-formed request outside what the operation computes exactly."""

    def __init__(self, message: str, guidance: str = ""):
        super().__init__(f"{message}. {guidance}".strip() if guidance else message)
        self.guidance = guidance


class MemoryBudgetError(ArgumentError):
    pass


class ConfigError(MvsdeError):
    exit_code = 2


class NumericalError(MvsdeError):
    exit_code = 3


class BlowUpError(NumericalError):
    def __init__(self, step: int, time: float, particle: int, value: float):
        super().__init__(
            f"non-finite state at step {step} (t={time:.6g}) for particle {particle}: {value!r}"
        )
        self.step = step
        self.time = time
        self.particle = particle
        self.value = value


class NonConvergenceError(NumericalError):
    def __init__(self, report: "PicardReport", tol: float):
        last = report.gap_history[-1] if report.gap_history else float("nan")
        super().__init__(
            f"Picard iteration did not reach tol={tol:.3g} after {report.iterations} "
            f"iterations (last gap {last:.3e}, contraction ratio {report.contraction_ratio:.3g})"
        )
        self.report = report
        self.tol = tol


class AcceptanceError(MvsdeError):
    exit_code = 4

    def __init__(self, failed: Optional[list] = None):
        failed = failed or []
        super().__init__("acceptance checks failed: " + ", ".join(failed))
        self.failed = failed
