from pathlib import Path

import numpy as np
import pytest
from mini_fbp import cli
from mini_fbp.grid import Grid, ScalarFieldGrid
from mini_fbp.pipeline import Pipeline
from mini_fbp.scenarios import Expectation, SCENARIOS, get_scenario
from mini_fbp.verdicts import Verdict


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def periodic_run():
    return get_scenario("periodic_landscape").config()


def read_manifest(directory):
    lines = (directory / "manifest.txt").read_text().splitlines()
    return dict(line.split("=", 1) for line in lines)


def describe_main():

    def prints_oracle_values(capsys):
        assert cli.main(["oracle", "--dim", "2", "--volume", "pi"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert "torsion_multiplier=0.25" in out
        assert "torsion_sup=0.25" in out

    def validate_writes_a_manifest(tmp_path):
        out = tmp_path / "run"
        assert cli.main(["validate", "--scenario", "serrin_torsion", "--out", str(out)]) == 0
        manifest = read_manifest(out)
        assert manifest["tool"] == "mini-fbp"
        assert manifest["verdicts.admissibility.HF4"] == "pass"
        assert manifest["verdicts.admissibility.HPer"] == "n/a"
        assert (out / "admissibility.csv").exists()
        assert (out / "timings.txt").exists()

    def identical_runs_give_identical_manifests(tmp_path):
        for name in ("a", "b"):
            cli.main(["validate", "--scenario", "periodic_landscape", "--seed", "3", "--out", str(tmp_path / name)])
        assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()

    @pytest.mark.slow
    def identical_solves_give_identical_manifests(tmp_path):
        for name in ("a", "b"):
            out = str(tmp_path / name)
            cli.main(["solve", "--scenario", "serrin_torsion", "--h", "1/32", "--seed", "4", "--out", out])
        assert (tmp_path / "a" / "manifest.txt").read_bytes() == (tmp_path / "b" / "manifest.txt").read_bytes()
        assert (tmp_path / "a" / "u.fbgrid").read_bytes() == (tmp_path / "b" / "u.fbgrid").read_bytes()

    def inadmissible_problem_fails_validation(tmp_path, capsys):
        code = cli.main(["validate", "--config", str(CONFIGS / "quadratic_blowup.cfg"), "--out", str(tmp_path)])
        assert code == 1
        assert "FAIL admissibility.HF4" in capsys.readouterr().out

    def bad_config_exits_with_two(tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[problem]\nvolume = 1\n[solver]\nlamda = 2\n")
        assert cli.main(["validate", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 2
        assert "FAIL UnknownKey" in capsys.readouterr().out

    def expected_divergence_passes(tmp_path):
        out = tmp_path / "blowup"
        assert cli.main(["solve", "--scenario", "quadratic_blowup", "--out", str(out)]) == 0
        assert read_manifest(out)["verdicts.divergence"] == "pass"


def describe_run_sweep():

    @pytest.mark.asyncio
    async def runs_every_source_and_seed(tmp_path, monkeypatch):
        calls = []

        def fake_solve(source, out_dir, seed, strict):
            calls.append((source, seed))
            return (1, [("saturation", "off")]) if seed == 1 else (0, [])

        monkeypatch.setattr(cli, "_solve_one", fake_solve)
        results = await cli.run_sweep(["a.cfg", "b.cfg"], str(tmp_path), replicas=2, threads=2)
        assert sorted(calls) == [("a.cfg", 0), ("a.cfg", 1), ("b.cfg", 0), ("b.cfg", 1)]
        assert results[("a.cfg", 0)] == (0, [])
        assert results[("b.cfg", 1)][0] == 1


def describe_pipeline():

    def rejects_unknown_commands(tmp_path, periodic_run):
        assert Pipeline(str(tmp_path)).process_command("plot", periodic_run) == 2

    def compacts_a_periodic_field(tmp_path, periodic_run):
        grid = Grid.box(2, 1 / 16, 6.0)
        x = grid.node_coords()
        values = np.zeros(grid.shape)
        for c in ((-4.0, 0.0), (3.5, 2.0)):
            values = np.maximum(values, 0.16 - np.sum((x - np.asarray(c)) ** 2, axis=-1))
        pipeline = Pipeline(str(tmp_path))
        code = pipeline.process_command("compact", periodic_run, field=ScalarFieldGrid(grid, values))
        assert code == 0
        assert pipeline.verdicts["compaction_volume"][0] is Verdict.PASS
        assert pipeline.verdicts["compaction_energy"][0] is Verdict.PASS
        assert read_manifest(tmp_path)["summary.translations"] == "-5,-1;1,1"

    def strict_mode_counts_inconclusive_checks(tmp_path):
        pipeline = Pipeline(str(tmp_path), strict=True)
        pipeline.record("weiss", Verdict.INCONCLUSIVE, "too coarse")
        assert pipeline.failures() == [("weiss", "too coarse")]
        assert pipeline.exit_code() == 1


def describe_scenarios():

    def ship_their_expectations():
        assert SCENARIOS["quadratic_blowup"].expect is Expectation.DIVERGES
        assert all(s.config().problem["name"] == name for name, s in SCENARIOS.items())
