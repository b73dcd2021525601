import math
from pathlib import Path

import pytest
from mini_fbp.config import parse_config, parse_config_text, parse_literal
from mini_fbp.exceptions import ParseError, UnknownKey
from mini_fbp.schema_validator import SchemaValidator

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def validator():
    return SchemaValidator()


def describe_parse_literal():

    def reads_pi_expressions():
        assert parse_literal("pi") == math.pi
        assert parse_literal("pi/4") == pytest.approx(math.pi / 4)
        assert parse_literal("2*pi") == pytest.approx(2 * math.pi)
        assert parse_literal("1/128") == 1 / 128

    def keeps_integers_booleans_and_names():
        assert parse_literal("3") == 3
        assert parse_literal("true") is True
        assert parse_literal("constant_f") == "constant_f"

    def reads_lists_and_points():
        assert parse_literal("1, 0.5") == [1, 0.5]
        assert parse_literal("-3, 0; 3, 0") == [[-3.0, 0.0], [3.0, 0.0]]


def describe_parse_config():

    def reads_the_shipped_torsion_config(validator):
        run = parse_config(CONFIGS / "serrin_torsion.cfg", validator)
        assert run.problem["volume"] == math.pi
        assert run.problem["nonlinearity_params"] == [1]
        assert run.solver.h == 1 / 64
        assert run.weiss.points == 4
        assert run.raw["diagnostics"]["neumann_tol"] == 0.15

    def reads_every_shipped_config(validator):
        for path in sorted(CONFIGS.glob("*.cfg")):
            run = parse_config(path, validator)
            assert run.problem["name"] == path.stem

    def point_lists_become_centres(validator):
        run = parse_config(CONFIGS / "appendix_two_ball.cfg", validator)
        assert run.problem["centers"] == [[-3.0, 0.0], [3.0, 0.0]]

    def suggests_the_closest_key(validator):
        text = "[problem]\nvolume = 1\n[solver]\nlamda = 2\n"
        with pytest.raises(UnknownKey) as e:
            parse_config_text(text, validator=validator)
        assert e.value.suggestion == "lambda_hint"
        assert e.value.lineno == 4

    def requires_a_problem_section(validator):
        with pytest.raises(ParseError):
            parse_config_text("[solver]\nh = 1/32\n", validator=validator)

    def rejects_unknown_sections(validator):
        with pytest.raises(ParseError):
            parse_config_text("[problem]\nvolume = 1\n[output]\ndir = x\n", validator=validator)

    def reports_the_line_of_a_bad_value(validator):
        with pytest.raises(ParseError) as e:
            parse_config_text("[problem]\nvolume = pi\ndim = 2x\n", validator=validator)
        assert e.value.lineno == 3
        assert str(e.value).startswith("line 3:")

    def rejects_values_outside_the_schema(validator):
        with pytest.raises(ParseError):
            parse_config_text("[problem]\nvolume = 1\ndim = 4\n", validator=validator)
        with pytest.raises(ParseError):
            parse_config_text("[problem]\nvolume = 1\n[solver]\nh = -1\n", validator=validator)

    def ignores_comments(validator):
        run = parse_config_text("# header\n[problem]\nvolume = 2  # area\n", validator=validator)
        assert run.problem == {"volume": 2}
