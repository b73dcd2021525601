import configparser
import difflib
import logging
import math
import re
from dataclasses import dataclass, field, fields

from .diagnostics import DiagnosticsConfig
from .exceptions import ParseError, UnknownKey
from .schema_validator import SchemaValidator
from .solve import SolverConfig
from .weiss import WeissConfig

PROBLEM_KEYS = (
    "name",
    "dim",
    "volume",
    "nonlinearity",
    "nonlinearity_params",
    "nonlinearity_period",
    "centers",
    "table_u",
    "table_F",
    "matrix",
    "matrix_params",
    "matrix_period",
    "ellipticity",
    "weight",
    "weight_params",
    "weight_period",
    "period",
    "u_max",
)
LIST_KEYS = {"nonlinearity_params", "table_u", "table_F", "matrix_params", "weight_params", "radii"}
POINT_KEYS = {"centers"}
SECTIONS = {
    "problem": ("ProblemSection", PROBLEM_KEYS),
    "solver": ("SolverSection", tuple(f.name for f in fields(SolverConfig))),
    "diagnostics": ("DiagnosticsSection", tuple(f.name for f in fields(DiagnosticsConfig))),
    "weiss": ("WeissSection", tuple(f.name for f in fields(WeissConfig))),
}

_INT = re.compile(r"^[+-]?\d+$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*[=:]")


@dataclass
class RunConfig:
    """A parsed configuration file.

    Attributes:
        problem (dict): [problem] section, JSON-compatible values.
        solver (SolverConfig): [solver] settings.
        diagnostics (DiagnosticsConfig): [diagnostics] settings.
        weiss (WeissConfig): [weiss] settings.
        source (str): Path or "<string>".
        raw (dict): Every section as parsed, used for the manifest echo.
    """

    problem: dict
    solver: SolverConfig = field(default_factory=SolverConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    weiss: WeissConfig = field(default_factory=WeissConfig)
    source: str = "<string>"
    raw: dict = field(default_factory=dict)


def _scalar(token):
    token = token.strip()
    low = token.lower()
    if low in ("true", "false"):
        return low == "true"
    if _INT.match(token):
        return int(token)
    if _NAME.match(token) and low != "pi":
        return token
    value = None
    for op, factor in re.findall(r"([*/]?)\s*([^*/]+)", token):
        factor = factor.strip()
        number = math.pi if factor.lower() == "pi" else float(factor)
        if value is None:
            value = number
        elif op == "*":
            value *= number
        else:
            value /= number
    if value is None:
        raise ValueError(f"empty value {token!r}")
    return value


def parse_literal(text):
    """Coerces an INI value: ints, floats, booleans, pi, products and quotients,
    comma lists and ';'-separated lists of comma points."""
    text = text.strip()
    if ";" in text:
        return [[float(_scalar(c)) for c in p.split(",")] for p in text.split(";") if p.strip()]
    if "," in text:
        return [_scalar(c) for c in text.split(",") if c.strip()]
    return _scalar(text)


def _line_numbers(text):
    lines, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if m := _SECTION_LINE.match(line):
            section = m.group(1).strip()
            lines[(section, None)] = lineno
        elif section and (m := _KEY_LINE.match(line)):
            lines[(section, m.group(1))] = lineno
    return lines


def _shape(key, value):
    if key in POINT_KEYS:
        if not isinstance(value, list):
            return [[float(value)]]
        if value and not isinstance(value[0], list):
            return [[float(v) for v in value]]
        return value
    if key in LIST_KEYS and not isinstance(value, list):
        return [value]
    return value


def _section(parser, name, lines, validator):
    schema, allowed = SECTIONS[name]
    doc = {}
    for key, text in parser.items(name):
        lineno = lines.get((name, key))
        if key not in allowed:
            close = difflib.get_close_matches(key, allowed, n=1, cutoff=0.5)
            raise UnknownKey(name, key, close[0] if close else None, lineno)
        try:
            doc[key] = _shape(key, parse_literal(text))
        except ValueError as e:
            raise ParseError(f"[{name}] {key}: cannot read {text!r} ({e})", lineno)
    if not validator.validate(schema, doc):
        raise ParseError(f"[{name}] section does not match {schema}", lines.get((name, None)))
    return doc


def typed_section(cls, doc):
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return cls(**kwargs)


def parse_config_text(text, source="<string>", validator=None):
    """Parses configuration text.

    Raises:
        ParseError: Syntax error, bad value, missing [problem] or schema mismatch.
        UnknownKey: A key no section accepts, with the closest valid key.
    """
    validator = validator or SchemaValidator()
    parser = configparser.ConfigParser(
        comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ParseError("content before the first [section]", e.lineno)
    except configparser.DuplicateOptionError as e:
        raise ParseError(f"duplicate key {e.option!r} in [{e.section}]", e.lineno)
    except configparser.DuplicateSectionError as e:
        raise ParseError(f"duplicate section [{e.section}]", e.lineno)
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ParseError("malformed line", lineno)

    lines = _line_numbers(text)
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ParseError(f"unknown section [{unknown[0]}]", lines.get((unknown[0], None)))
    if not parser.has_section("problem"):
        raise ParseError("missing [problem] section")

    raw = {name: _section(parser, name, lines, validator) for name in parser.sections()}
    run = RunConfig(
        problem=raw["problem"],
        solver=typed_section(SolverConfig, raw.get("solver", {})),
        diagnostics=typed_section(DiagnosticsConfig, raw.get("diagnostics", {})),
        weiss=typed_section(WeissConfig, raw.get("weiss", {})),
        source=source,
        raw=raw,
    )
    logging.debug(f"Parsed config {source}: sections {sorted(raw)}")
    return run


def parse_config(path, validator=None):
    with open(path, "r") as config_file:
        text = config_file.read()
    return parse_config_text(text, source=str(path), validator=validator)
