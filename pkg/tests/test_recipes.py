import json

from odenet.cli import main
from odenet.recipes import RECIPES, config_path, run_recipe, shipped_config, write_report


def test_every_criterion_has_a_recipe():
    assert sorted({r.criterion for r in RECIPES.values()}) == list(range(1, 12))


def test_shipped_configs_validate():
    names = {p.stem for p in config_path("lorenz").parent.glob("*.json")}
    assert {"lorenz", "lv-limitcycle-1pct", "actin-physical-mgcl2"} <= names
    for n in names:
        shipped_config(n)


def test_quick_recipes_and_report(tmp_path):
    for rid in ("gradcheck", "integrator-orders"):
        res = run_recipe(rid, tmp_path)
        assert res.passed, res.checks
        assert json.loads((tmp_path / rid / "result.json").read_text())["passed"]
    text = write_report(tmp_path).read_text()
    assert "| gradcheck | 6 | pass |" in text and "not run" in text


def test_report_verb(tmp_path):
    assert main(["report", "--run", "integrator-orders", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.md").exists()
