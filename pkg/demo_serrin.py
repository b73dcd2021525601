import logging
from mini_fbp import Pipeline
from mini_fbp.scenarios import get_scenario

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s %(levelname)s %(filename)s %(message)s"
)

if __name__ == "__main__":
    scenario = get_scenario("serrin_torsion")
    pipeline = Pipeline(out_dir="serrin-run")
    code = pipeline.process_command("solve", scenario.config(), expect=scenario.expect)
    logging.info(f"Lambda={pipeline.summary.get('lam')} (exact 0.25), exit code {code}")
