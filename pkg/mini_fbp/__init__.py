__version__ = "1.0.0"
from .problem import ProblemSpec, build_problem, check_admissibility
from .solve import RunResult, SolverConfig, solve_constrained
from .pipeline import Pipeline
