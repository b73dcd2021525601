import logging
import math
import os
import time

import numpy as np

from . import __version__
from .diagnostics import (
    extract_free_boundary,
    neumann_check,
    pde_residual,
    regularity_report,
)
from .exceptions import Diverged, FreeBoundaryError, RadiiOutOfRange
from .field_io import sha256_of, write_csv, write_field
from .geometry import (
    SupportMask,
    compact_periodic,
    connected_components,
    corkscrew_check,
    diameter_report,
    enlarge_components,
)
from .grid import energy, vol_q
from .oracle import (
    appendix_energies,
    halfplane_weiss,
    lambda1_ball,
    poincare_constant,
    torsion_ball,
)
from .problem import build_problem, check_admissibility
from .schema_validator import SchemaValidator
from .scenarios import Expectation
from .solve import SolverState, recover_multiplier, solve_constrained, stationarity_residual
from .verdicts import BlowupClass, Verdict
from .weiss import WeissTrace, classify_blowup, weiss_trace

BOUNDARY_SAMPLE = 256


class Pipeline:
    """
    Runs one configuration through solve, geometry, diagnostics and blow-up
    analysis, and writes the artifacts into an output directory.

    Attributes:
        out_dir (str): Directory receiving the artifacts.
        strict (bool): Treat inconclusive verdicts as failures.
        verdicts (dict): Check name to (Verdict, reason).
        summary (dict): Scalar results echoed into the manifest.
        files (dict): Artifact name to sha256.
        timings (dict): Stage name to seconds, kept out of the manifest.
    """

    def __init__(self, out_dir, strict=False, validator=None):
        """
        Initializes a Pipeline.

        Args:
            out_dir (str): Output directory, created when missing.
            strict (bool): Treat inconclusive verdicts as failures.
            validator (SchemaValidator | None): Validator for the run manifest.
        """
        self.out_dir = out_dir
        self.strict = strict
        self.verdicts = {}
        self.summary = {}
        self.files = {}
        self.timings = {}
        self.seed = 0
        self.__validator = validator or SchemaValidator()
        os.makedirs(out_dir, exist_ok=True)

    def record(self, name, verdict, reason=""):
        self.verdicts[name] = (verdict, reason)
        if verdict is Verdict.FAIL:
            logging.error(f"Check {name} failed: {reason}")
        else:
            logging.info(f"Check {name}: {verdict.value} {reason}".rstrip())

    def failures(self):
        bad = {Verdict.FAIL, Verdict.INCONCLUSIVE} if self.strict else {Verdict.FAIL}
        return [(name, reason) for name, (v, reason) in self.verdicts.items() if v in bad]

    def exit_code(self):
        return 1 if self.failures() else 0

    def _path(self, name):
        return os.path.join(self.out_dir, name)

    def _csv(self, name, header, rows):
        self.files[name] = write_csv(self._path(name), header, rows)

    def _stage(self, name, started):
        self.timings[name] = time.perf_counter() - started

    def process_command(self, command, run, **kwargs):
        """
        Dispatches a subcommand.

        Args:
            command (str): One of solve, analyze, weiss, compact, validate.
            run (RunConfig): Parsed configuration.
            **kwargs: Command arguments (field, point, neumann, expect).

        Returns:
            int: Process exit code.
        """
        if command == "solve":
            self.process_solve(run, kwargs.get("expect", Expectation.CONVERGES))
        elif command == "analyze":
            self.process_analyze_field(run, kwargs["field"], kwargs.get("neumann", True))
        elif command == "weiss":
            self.process_weiss_field(run, kwargs["field"], kwargs.get("points"))
        elif command == "compact":
            self.process_compact(run, kwargs["field"])
        elif command == "validate":
            self.process_validate(run)
        else:
            logging.warning(f"Received unsupported command: {command}")
            return 2
        self.write_manifest(run)
        return self.exit_code()

    def process_validate(self, run):
        spec = build_problem(run.problem)
        report = check_admissibility(spec, run.solver.sample_budget, run.solver.seed)
        rows = []
        for name, result in report.results.items():
            rows.append((name, result.verdict.value, result.note))
            self.record(f"admissibility.{name}", result.verdict, result.note)
        self._csv("admissibility.csv", ("hypothesis", "verdict", "note"), rows)
        self.summary["lambda1"] = report.lambda1
        self.summary["b_threshold"] = report.b_threshold
        return report

    def process_solve(self, run, expect=Expectation.CONVERGES):
        cfg = run.solver
        self.seed = cfg.seed
        spec = build_problem(run.problem)
        started = time.perf_counter()
        report = check_admissibility(spec, cfg.sample_budget, cfg.seed)
        self._stage("admissibility", started)
        if not cfg.force:
            self.record("admissible", Verdict.of(report.admissible), ", ".join(report.failures()))
        self.summary["admissibility_failures"] = ",".join(report.failures()) or "none"

        started = time.perf_counter()
        try:
            result = solve_constrained(spec, cfg, report)
        except Diverged as e:
            self._stage("solve", started)
            self.summary["energy_min"] = min(e.trace) if e.trace else -math.inf
            if expect is Expectation.DIVERGES:
                self.record("divergence", Verdict.PASS, "unboundedness detected")
                return None
            raise
        self._stage("solve", started)
        if expect is Expectation.DIVERGES:
            self.record("divergence", Verdict.FAIL, "solver converged on an unbounded problem")

        self.summary.update(
            {
                "lam": result.lam,
                "lam_lo": result.lam_bracket[0],
                "lam_hi": result.lam_bracket[1],
                "vol_q": result.vol_q,
                "energy": result.energy.total,
                "dirichlet": result.energy.dirichlet,
                "potential": result.energy.potential,
                "h": result.h,
                "box_radius": result.state.box_radius,
                "flags": ",".join(result.flags) or "none",
                "trivial": result.trivial,
            }
        )
        m = spec.volume_target
        self.record(
            "saturation",
            Verdict.of(result.trivial or abs(result.vol_q - m) <= cfg.tol_vol * m),
            f"vol_q={result.vol_q:.6g}, m={m:.6g}",
        )
        self.files["u.fbgrid"] = write_field(self._path("u.fbgrid"), result.u)
        self._csv("trace.csv", SolverState.TRACE_FIELDS, result.state.rows)
        self._csv("bisection.csv", ("lam", "vol"), result.state.bisection)
        self._csv("energy.csv", result.energy.CSV_FIELDS, [result.energy.as_row()])
        if result.trivial:
            return result

        started = time.perf_counter()
        self.summary["stationarity"] = stationarity_residual(result.u, spec, result.lam)
        self.process_analyze(result.u, spec, run, result.lam)
        self._stage("analyze", started)
        started = time.perf_counter()
        self.process_weiss(result.u, spec, run, result.lam)
        self._stage("weiss", started)
        return result

    def process_analyze_field(self, run, u, neumann=True):
        spec = build_problem(run.problem)
        lam = recover_multiplier(u, spec)
        self.summary.update({"lam": lam, "vol_q": vol_q(u, spec), "energy": energy(u, spec, 0.0).total})
        self.process_analyze(u, spec, run, lam, neumann)

    def process_analyze(self, u, spec, run, lam, neumann=True):
        """
        Structural checks of a field: PDE residual, Neumann condition,
        non-degeneracy, density, exterior measure, components and corkscrews.

        Args:
            u (ScalarFieldGrid): The field.
            spec (ProblemSpec): Problem data.
            run (RunConfig): Supplies the diagnostics thresholds.
            lam (float): Multiplier used by the Neumann check.
            neumann (bool): Run and write the Neumann check.
        """
        dcfg = run.diagnostics
        h = u.grid.h
        bset = extract_free_boundary(u)
        residual = pde_residual(u, spec, dcfg.margin)
        self.summary.update({"pde_sup": residual.sup, "pde_relative": residual.relative})

        if neumann and lam > 0:
            report = neumann_check(u, spec, lam, bset, dcfg.neumann_tol)
            rows = [
                (*p, g, t, r)
                for p, g, t, r in zip(report.points, report.values, report.target, report.residuals)
            ]
            axes = tuple(f"x{k}" for k in range(u.grid.dim))
            self._csv("neumann.csv", (*axes, "g", "target", "residual"), rows)
            for key, value in report.quantiles.items():
                self.summary[f"neumann_{key}"] = value
            self.record(
                "neumann",
                Verdict.of(report.fraction_within >= dcfg.neumann_fraction),
                f"{report.fraction_within:.3f} of points within {dcfg.neumann_tol}",
            )

        sample = bset.subset(BOUNDARY_SAMPLE)
        try:
            reg = regularity_report(u, spec, sample, dcfg)
        except RadiiOutOfRange as e:
            self.record("nondegeneracy", Verdict.INCONCLUSIVE, str(e))
        else:
            self.summary.update(
                {"lipschitz": reg.lipschitz, "sup": reg.sup, "M1": reg.M1, "kappa0": reg.kappa0, "C_hat": reg.C_hat}
            )
            for name, verdict in reg.verdicts.items():
                self.record(name, verdict)

        dec = enlarge_components(connected_components(SupportMask.of(u)))
        diam = diameter_report(dec, dcfg.ecc_n_max, dcfg.ecc_d_max)
        self._csv("components.csv", ("id", "size", "diameter", "ecc"), dec.rows())
        self.summary.update(
            {
                "n_cc": dec.n_cc,
                "n_ecc": dec.n_ecc,
                "ecc_diameters": ",".join(repr(float(d)) for d in dec.ecc_diameters),
                "support_diameter": diam.full_diameter,
            }
        )
        for name, verdict in diam.verdicts.items():
            if verdict is not Verdict.NOT_APPLICABLE:
                self.record(name, verdict, f"n_ecc={dec.n_ecc}")

        cork = corkscrew_check(u, sample)
        self.summary["corkscrew_min"] = cork.min_radius
        self.record("corkscrew", Verdict.of(cork.min_radius >= 1 / 40 - 2 * h), f"min rho={cork.min_radius:.4g}")

    def process_weiss_field(self, run, u, points=None):
        spec = build_problem(run.problem)
        lam = recover_multiplier(u, spec)
        self.summary["lam"] = lam
        self.process_weiss(u, spec, run, lam, points)

    def process_weiss(self, u, spec, run, lam, points=None):
        """Weiss traces and blow-up classification at sampled boundary points."""
        wcfg = run.weiss
        if not lam > 0 or not wcfg.radii(u.grid.h):
            self.record("weiss", Verdict.INCONCLUSIVE, "no resolvable blow-up radius or Lambda <= 0")
            return
        if points is None:
            points = extract_free_boundary(u).subset(wcfg.points).points
        trace_rows, point_rows = [], []
        monotone, regular, analysed = True, True, 0
        for k, x0 in enumerate(points):
            try:
                trace = weiss_trace(u, spec, lam, x0, cfg=wcfg)
            except FreeBoundaryError as e:
                logging.warning(f"Skipping blow-up at {tuple(np.round(x0, 4))}: {e}")
                continue
            analysed += 1
            cls = classify_blowup(trace, trace.frame, wcfg.tol)
            monotone &= trace.verdict is Verdict.PASS
            regular &= cls.kind is BlowupClass.REGULAR
            trace_rows += [(k, *row) for row in trace.rows()]
            nu = cls.nu if cls.nu is not None else np.full(u.grid.dim, math.nan)
            point_rows.append((k, *x0, cls.kind.value, cls.alpha, cls.misfit, *nu, trace.C_W))
            self.summary[f"C_W_{k}"] = trace.C_W
        axes = tuple(f"x{j}" for j in range(u.grid.dim))
        nus = tuple(f"nu{j}" for j in range(u.grid.dim))
        self._csv("weiss.csv", ("point", *WeissTrace.CSV_FIELDS), trace_rows)
        self._csv("boundary_points.csv", ("point", *axes, "class", "alpha", "misfit", *nus, "C_W"), point_rows)
        self.summary["halfplane_weiss"] = halfplane_weiss(
            u.grid.dim, lam, float(spec.weight(np.asarray(points)[:1])[0])
        )
        if not analysed:
            self.record("weiss", Verdict.INCONCLUSIVE, "no boundary point could be analysed")
            return
        self.record("weiss_monotone", Verdict.of(monotone), f"{analysed} points")
        self.record("blowup_regular", Verdict.of(regular), f"{analysed} points")

    def process_compact(self, run, u):
        spec = build_problem(run.problem)
        before = energy(u, spec, 0.0)
        compacted, plan = compact_periodic(u, spec)
        after = energy(compacted, spec, 0.0)
        self.files["compacted.fbgrid"] = write_field(self._path("compacted.fbgrid"), compacted)
        self.summary.update(
            {
                "translations": ";".join(",".join(str(t) for t in v) for v in plan.translations),
                "vol_q_before": before.vol_q_raw,
                "vol_q_after": after.vol_q_raw,
                "energy_before": before.total,
                "energy_after": after.total,
            }
        )
        scale = max(1.0, abs(before.total))
        self.record("compaction_volume", Verdict.of(abs(after.vol_q_raw - before.vol_q_raw) <= 1e-12 * scale))
        self.record("compaction_energy", Verdict.of(abs(after.total - before.total) <= 1e-9 * scale))
        return compacted, plan

    def manifest_document(self, run):
        config = {
            f"{section}.{key}": _text(value)
            for section, values in sorted(run.raw.items())
            for key, value in sorted(values.items())
        }
        return {
            "tool": "mini-fbp",
            "version": __version__,
            "source": run.source,
            "seed": int(self.seed),
            "config": config,
            "summary": {k: _text(v) for k, v in sorted(self.summary.items())},
            "verdicts": {k: v.value for k, (v, _) in sorted(self.verdicts.items())},
            "files": dict(sorted(self.files.items())),
        }

    def write_manifest(self, run):
        """Writes manifest.txt (key=value, deterministic) and timings.txt (wall clock)."""
        doc = self.manifest_document(run)
        if not self.__validator.validate("RunManifest", doc):
            logging.error("Run manifest failed schema validation")
            self.record("manifest", Verdict.FAIL, "schema validation failed")
            doc = self.manifest_document(run)
        lines = [f"tool={doc['tool']}", f"version={doc['version']}", f"source={doc['source']}", f"seed={doc['seed']}"]
        for group in ("config", "summary", "verdicts", "files"):
            lines += [f"{group}.{k}={v}" for k, v in doc[group].items()]
        path = self._path("manifest.txt")
        with open(path, "w") as out:
            out.write("\n".join(lines) + "\n")
        with open(self._path("timings.txt"), "w") as out:
            out.writelines(f"{k}={v:.3f}\n" for k, v in self.timings.items())
        logging.info(f"Wrote manifest {path} ({sha256_of(path)[:12]})")
        return path


def _text(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (list, tuple)):
        return ";".join(_text(v) for v in value)
    return str(value)


def oracle_report(dim, volume):
    """Closed-form references for a ball of the given volume, in print order."""
    rho = (volume / torsion_ball(dim, 1.0).volume) ** (1.0 / dim)
    ball = torsion_ball(dim, rho)
    rows = [
        ("dim", dim),
        ("volume", volume),
        ("rho", rho),
        ("torsion_sup", ball.sup),
        ("torsion_multiplier", ball.multiplier),
        ("torsion_energy", ball.energy),
        ("lambda1", lambda1_ball(dim, volume)),
        ("poincare", poincare_constant(dim, volume)),
        ("halfplane_weiss", halfplane_weiss(dim, ball.multiplier, 1.0)),
    ]
    app = appendix_energies(dim, volume)
    rows += [
        ("appendix_one_ball", app.one_ball),
        ("appendix_two_ball", app.two_ball),
        ("appendix_one_ball_exact", app.one_ball_exact),
        ("appendix_two_ball_exact", app.two_ball_exact),
        ("appendix_m_star", app.m_star),
    ]
    return rows
