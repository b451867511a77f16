import json
import os

import pandas as pd
import pytest
import yaml

from inoculab.config import dump_config, load_config
from inoculab.deploy import QuarantineBuffer, QuarantineEntry
from inoculab.main import main
from inoculab.recipes import fixture_smoke


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.yaml"
    dump_config(fixture_smoke("cli-smoke"), path)
    return path


def test_dump_config_prints_yaml(capsys, smoke_config):
    assert main(["attack", "--config", str(smoke_config), "--seed", "5", "--dump-config"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["seed"] == 5
    assert data["dataset"]["split_seed"] == 5
    assert data["run_name"] == "cli-smoke"


def test_reproduce_dump_config_lists_variants(capsys):
    assert main(["reproduce", "ablation", "--dump-config"]) == 0
    out = capsys.readouterr().out
    assert [line for line in out.splitlines() if line.startswith("# ")] == ["# full", "# no-noise", "# no-adaptive-lr"]


def test_config_error_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("grid:\n  thetta_drop: 3\n")
    assert main(["attack", "--config", str(path)]) == 2
    assert "❌" in capsys.readouterr().err


def test_unknown_recipe_exit_code(capsys):
    assert main(["reproduce", "nope"]) == 2


def test_missing_stage_exit_code(tmp_path, smoke_config, capsys):
    code = main(["predeploy", "--config", str(smoke_config), "--out", str(tmp_path / "runs")])
    assert code == 11
    assert "inoculab attack" in capsys.readouterr().err


def test_attack_predeploy_eval_on_fixture(tmp_path, smoke_config, capsys):
    out = tmp_path / "runs"
    args = ["--config", str(smoke_config), "--out", str(out), "--log-level", "warning"]
    assert main(["attack"] + args) == 0
    assert main(["predeploy"] + args) == 0
    assert main(["eval"] + args) == 0

    run_dir = out / "cli-smoke"
    for name in ("config.yaml", "manifest.json", "attack/badnet.nnckpt", "attack/poison_spec.json",
                 "predeploy/goodnet.nnckpt", "predeploy/grid_ca.csv", "predeploy/selected.json",
                 "eval/report.csv", "eval/pareto.txt"):
        assert (run_dir / name).exists(), name
    assert load_config(run_dir / "config.yaml") == load_config(smoke_config)

    report = pd.read_csv(run_dir / "eval" / "report.csv")
    assert report["stage"].tolist() == ["baseline", "pre-deployment", "pre-deployment ensemble"]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert {name for name, stage in manifest["stages"].items() if stage["status"] == "done"} == {"attack", "predeploy", "eval"}
    goodnet = manifest["stages"]["predeploy"]["checkpoints"]["predeploy/goodnet.nnckpt"]
    assert goodnet["role"] == "goodnet"
    assert goodnet["parent"] == manifest["stages"]["attack"]["checkpoints"]["attack/badnet.nnckpt"]["id"]

    # Повторный запуск с тем же конфигом ничего не пересчитывает
    started = manifest["stages"]["attack"]["started_at"]
    assert main(["attack"] + args) == 0
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["stages"]["attack"]["started_at"] == started
    assert not (run_dir / ".lock").exists()


def test_changed_section_invalidates_downstream(tmp_path, smoke_config):
    out = tmp_path / "runs"
    args = ["--config", str(smoke_config), "--out", str(out), "--log-level", "warning"]
    assert main(["attack"] + args) == 0
    assert main(["predeploy"] + args) == 0

    data = yaml.safe_load(smoke_config.read_text())
    data["attack"]["train"]["epochs"] = 2
    smoke_config.write_text(yaml.safe_dump(data))
    # attack изменился: результаты predeploy больше не подходят
    assert main(["deploy"] + args) == 11


def test_short_quarantine_blocks_treatment(tmp_path, smoke_config, fixture_ds, capsys):
    data = yaml.safe_load(smoke_config.read_text())
    data["deploy"]["repair_threshold"] = 10000
    smoke_config.write_text(yaml.safe_dump(data))
    out = tmp_path / "runs"
    args = ["--config", str(smoke_config), "--out", str(out), "--log-level", "warning"]
    for stage in ("attack", "predeploy", "deploy"):
        assert main([stage] + args) == 0

    # Три расхождения при пороге 10000
    run_dir = out / "cli-smoke"
    short = QuarantineBuffer([QuarantineEntry(fixture_ds.images[i], 0, 1, i) for i in range(3)])
    short.save(run_dir / "deploy" / "quarantine")
    capsys.readouterr()

    assert main(["treat"] + args) == 9
    assert "repair needs 10000" in capsys.readouterr().err
    assert not (run_dir / "treat" / "generator.nnckpt").exists()
    assert main(["repair"] + args) == 11

    assert main(["treat", "--allow-short-quarantine"] + args) == 0
    assert (run_dir / "treat" / "generator.nnckpt").exists()
    assert main(["repair"] + args) == 9
    assert not (run_dir / "repair" / "round-1").exists()
    assert main(["repair", "--allow-short-quarantine"] + args) == 0
    assert (run_dir / "repair" / "round-1" / "bd.nnckpt").exists()


@pytest.mark.slow
def test_fixture_smoke_full_pipeline(tmp_path, capsys):
    out = tmp_path / "runs"
    code = main(["reproduce", "fixture-smoke", "--out", str(out), "--log-level", "warning"])
    assert code == 0
    report_dir = out / "reproduce-fixture-smoke"
    assert report_dir.exists()
    run_dir = out / "fixture-smoke"
    assert (run_dir / "deploy" / "stream_report.json").exists()
    # Пустой карантин останавливает вариант до лечения
    if (run_dir / "treat" / "generator.nnckpt").exists():
        stages = pd.read_csv(report_dir / "report.csv")["stage"].tolist()
        assert "post-deployment ensemble" in stages


@pytest.mark.slow
@pytest.mark.parametrize("recipe_id", ["mnist-aaa"])
def test_desk_recipe(tmp_path, recipe_id):
    out = tmp_path / "runs"
    data_root = os.getenv("INOCULAB_DATA_ROOT")
    if not data_root:
        pytest.skip("INOCULAB_DATA_ROOT не задан")
    assert main(["reproduce", recipe_id, "--out", str(out), "--data-root", data_root, "--log-level", "warning"]) == 0
    report = pd.read_csv(out / f"reproduce-{recipe_id}" / "report.csv")
    baseline = report[report["stage"] == "baseline"].iloc[0]
    post = report[report["stage"] == "post-deployment"].iloc[0]
    assert post["asr"] < baseline["asr"]
