import math
from dataclasses import dataclass, field
from enum import Enum

from .config import RunConfig, typed_section
from .diagnostics import DiagnosticsConfig
from .exceptions import UnknownBuiltin
from .solve import SolverConfig
from .weiss import WeissConfig


class Expectation(Enum):
    CONVERGES = "converges"
    DIVERGES = "diverges"


@dataclass(frozen=True)
class Scenario:
    """A code-registered problem with the solver settings it ships with.

    Attributes:
        name (str): Registry key.
        problem (dict): [problem] section.
        solver (dict): [solver] overrides.
        diagnostics (dict): [diagnostics] overrides.
        weiss (dict): [weiss] overrides.
        expect (Expectation): Whether a correct run converges or diverges.
    """

    name: str
    problem: dict
    solver: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    weiss: dict = field(default_factory=dict)
    expect: Expectation = Expectation.CONVERGES

    def config(self):
        return RunConfig(
            problem={"name": self.name, **self.problem},
            solver=typed_section(SolverConfig, self.solver),
            diagnostics=typed_section(DiagnosticsConfig, self.diagnostics),
            weiss=typed_section(WeissConfig, self.weiss),
            source=f"scenario:{self.name}",
            raw={
                "problem": {"name": self.name, **self.problem},
                "solver": dict(self.solver),
                "diagnostics": dict(self.diagnostics),
                "weiss": dict(self.weiss),
            },
        )


SCENARIOS = {
    s.name: s
    for s in (
        # -Laplace u = 1 on the disk of area pi; Lambda = 1/4.
        Scenario(
            name="serrin_torsion",
            problem={"dim": 2, "volume": math.pi, "nonlinearity": "constant_f"},
            solver={"h": 1 / 64},
        ),
        Scenario(
            name="appendix_two_ball",
            problem={
                "dim": 2,
                "volume": 10.0,
                "nonlinearity": "bump_times_u",
                "centers": [[-3.0, 0.0], [3.0, 0.0]],
            },
            solver={"h": 1 / 16, "hr_every": 0},
            diagnostics={"ecc_n_max": 2},
        ),
        Scenario(
            name="periodic_landscape",
            problem={
                "dim": 2,
                "volume": 1.0,
                "nonlinearity": "constant_f",
                "matrix": "periodic_spd",
                "weight": "periodic_q",
                "period": 1.0,
            },
            solver={"h": 1 / 32},
        ),
        # b = 3 lies above lambda_1(B^pi) / 2, so F_0 is unbounded below.
        Scenario(
            name="quadratic_blowup",
            problem={
                "dim": 2,
                "volume": math.pi,
                "nonlinearity": "quadratic_F",
                "nonlinearity_params": [3.0],
            },
            solver={"h": 1 / 16, "force": True},
            expect=Expectation.DIVERGES,
        ),
        Scenario(
            name="semilinear_mild",
            problem={
                "dim": 2,
                "volume": math.pi,
                "nonlinearity": "linear_f",
                "nonlinearity_params": [1.0, 0.5],
            },
            solver={"h": 1 / 32},
        ),
    )
}


def get_scenario(name):
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownBuiltin(f"unknown scenario '{name}', expected one of {sorted(SCENARIOS)}")


def expectation_for(run):
    """Configs named after a scenario inherit its expectation."""
    scenario = SCENARIOS.get(run.problem.get("name"))
    return scenario.expect if scenario else Expectation.CONVERGES
