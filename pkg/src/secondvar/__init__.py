"""Second-order optimality checks for variational problems with nonholonomic constraints."""

from .audit import AuditReport, audit, render_report
from .problem import ControlProblem, ProblemError, ToleranceSet, load_problem, load_problem_file
from .pontryagin import Extremal, flow_extremal, shoot

__all__ = [
    "AuditReport",
    "ControlProblem",
    "Extremal",
    "ProblemError",
    "ToleranceSet",
    "audit",
    "flow_extremal",
    "load_problem",
    "load_problem_file",
    "render_report",
    "shoot",
]
__version__ = "0.1.0"
