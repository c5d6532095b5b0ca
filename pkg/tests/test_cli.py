"""End-to-end tests for the command-line entry point."""

import json

import pytest

from app.commands.data import GenDataArgs
from app.main import COMMANDS, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from app.utils.records import read_records

TINY_CONFIG = """\
AMF_SCENE__IMAGE_SIZE=32
AMF_ENCODER__STAGE_CHANNELS=[8,16,16,16]
AMF_ENCODER__OUT_CHANNELS=16
AMF_DETAIL__NUM_PROXIES=4
AMF_DETAIL__ATTN_LAYERS=1
AMF_TRAIN__EPOCHS=1
AMF_TRAIN__ITERS_PER_EPOCH=2
AMF_TRAIN__BATCH_SIZE=2
AMF_TRAIN__VAL_EPISODES=2
"""


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.env"
    path.write_text(TINY_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file):
    """Output directory of one small training run shared by the module."""
    out_dir = tmp_path_factory.mktemp("train")
    assert main(["train", "--config", config_file, "--seed", "5", "--out-dir", str(out_dir)]) == 0
    return out_dir


def read_json(path):
    return json.loads(path.read_text())


# =============================================================================
# USAGE ERRORS
# =============================================================================


def test_missing_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_missing_checkpoint_flag_is_usage_error(tmp_path):
    assert main(["eval", "--out-dir", str(tmp_path / "out")]) == EXIT_USAGE
    assert not (tmp_path / "out").exists()


def test_absent_checkpoint_creates_no_output(tmp_path):
    args = ["eval", "--checkpoint", str(tmp_path / "c.pt"), "--out-dir", str(tmp_path / "out")]
    assert main(args) == EXIT_USAGE
    assert not (tmp_path / "out").exists()


def test_absent_checkpoint_directory_is_not_created(tmp_path):
    checkpoint = tmp_path / "missing" / "c.pt"
    args = ["eval", "--checkpoint", str(checkpoint), "--out-dir", str(tmp_path / "out")]
    assert main(args) == EXIT_USAGE
    assert not checkpoint.parent.exists()


def test_absent_config_file_is_usage_error(tmp_path):
    args = ["train", "--config", str(tmp_path / "absent.env"), "--out-dir", str(tmp_path / "out")]
    assert main(args) == EXIT_USAGE
    assert not (tmp_path / "out").exists()


def test_missing_file_during_a_run_is_runtime_failure(tmp_path, monkeypatch):
    def lose_file(args):
        raise FileNotFoundError("scene folder vanished")

    monkeypatch.setitem(COMMANDS, "gen-data", (GenDataArgs, lose_file))
    assert main(["gen-data", "--out-dir", str(tmp_path)]) == EXIT_FAILURE


def test_out_of_range_fold_is_usage_error(tmp_path):
    assert main(["train", "--fold", "7", "--out-dir", str(tmp_path / "out")]) == EXIT_USAGE
    assert not (tmp_path / "out").exists()


def test_bad_keep_ratio_is_usage_error(trained, tmp_path):
    args = [
        "study-erosion",
        "--checkpoint",
        str(trained / "checkpoint.pt"),
        "--ratios",
        "0.5,1.5",
        "--out-dir",
        str(tmp_path / "out"),
    ]
    assert main(args) == EXIT_USAGE


def test_unknown_ablation_variant_is_usage_error(tmp_path):
    args = ["study-ablation", "--variants", "baseline,everything", "--out-dir", str(tmp_path / "o")]
    assert main(args) == EXIT_USAGE
    assert not (tmp_path / "o").exists()


def test_unknown_log_level_is_usage_error(tmp_path):
    assert main(["gen-data", "--log-level", "loud", "--out-dir", str(tmp_path)]) == EXIT_USAGE


# =============================================================================
# COMMANDS
# =============================================================================


def test_gen_data_writes_manifest(tmp_path, config_file, capsys):
    out = tmp_path / "data"
    args = ["gen-data", "--config", config_file, "--episodes", "3", "--render"]
    assert main([*args, "--out-dir", str(out)]) == EXIT_OK
    records = read_records((out / "episodes.records").read_text(), list_keys=["support_ids"])
    assert len(records) == 3
    assert all(len(r["support_ids"]) == 1 for r in records)
    assert any(p.suffix == ".png" for p in (out / "scenes").iterdir())

    manifest = read_json(out / "run_manifest.json")
    assert manifest["command"] == "gen-data"
    assert manifest["config"]["scene"]["image_size"] == 32
    assert "episodes.records" in manifest["outputs"]
    assert json.loads(capsys.readouterr().out)["episodes"] == 3


def test_gen_data_is_deterministic(tmp_path, config_file):
    for name in ("a", "b"):
        args = ["gen-data", "--config", config_file, "--episodes", "4", "--seed", "8"]
        assert main([*args, "--out-dir", str(tmp_path / name)]) == EXIT_OK
    first = (tmp_path / "a" / "episodes.records").read_text()
    assert first == (tmp_path / "b" / "episodes.records").read_text()


def test_train_writes_checkpoint_history_and_manifest(trained):
    assert (trained / "checkpoint.pt").is_file()
    assert (trained / "checkpoints" / "epoch_001.pt").is_file()
    assert (trained / "history.log").read_text().startswith("epoch=1 ")
    manifest = read_json(trained / "run_manifest.json")
    assert manifest["seed"] == 5
    assert manifest["summary"]["steps"] == 2


def test_eval_is_deterministic(trained, tmp_path):
    checkpoint = str(trained / "checkpoint.pt")
    for name in ("a", "b"):
        args = ["eval", "--checkpoint", checkpoint, "--episodes", "4", "--k-shot", "2"]
        assert main([*args, "--out-dir", str(tmp_path / name)]) == EXIT_OK
    first, second = read_json(tmp_path / "a" / "eval.json"), read_json(tmp_path / "b" / "eval.json")
    assert first == second
    assert first["episodes"] == 4
    manifest = read_json(tmp_path / "a" / "run_manifest.json")
    assert manifest["config"]["train"]["k_shot"] == 2
    assert manifest["checkpoint"]["epoch"] == 1


def test_erosion_study_command(trained, tmp_path):
    args = [
        "study-erosion",
        "--checkpoint",
        str(trained / "checkpoint.pt"),
        "--episodes",
        "3",
        "--ratios",
        "0.5,1.0",
        "--out-dir",
        str(tmp_path),
    ]
    assert main(args) == EXIT_OK
    table = read_json(tmp_path / "study_erosion.json")
    assert [row["keep_ratio"] for row in table["rows"]] == [0.5, 1.0]
    assert (tmp_path / "study_erosion.txt").read_text().startswith("# support erosion")


def test_weak_label_and_similarity_studies(trained, tmp_path):
    checkpoint = str(trained / "checkpoint.pt")
    weak = ["study-weak-labels", "--checkpoint", checkpoint, "--episodes", "2"]
    assert main([*weak, "--label-kind", "mask,bbox", "--out-dir", str(tmp_path / "w")]) == 0
    rows = read_json(tmp_path / "w" / "study_weak_labels.json")["rows"]
    assert [row["label_kind"] for row in rows] == ["mask", "bbox"]

    sim = ["study-similarity", "--checkpoint", checkpoint, "--episodes", "2"]
    assert main([*sim, "--pairs-per-object", "20", "--out-dir", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "study_similarity.records").is_file()


def test_dump_diagnostics_command(trained, tmp_path):
    args = ["dump-diagnostics", "--checkpoint", str(trained / "checkpoint.pt"), "--episodes", "2"]
    assert main([*args, "--no-panels", "--out-dir", str(tmp_path)]) == EXIT_OK
    written = sorted(p.name for p in (tmp_path / "diagnostics").iterdir())
    assert written == ["episode_00000.npz", "episode_00001.npz"]


def test_ablation_study_command(tmp_path, config_file):
    args = ["study-ablation", "--config", config_file, "--episodes", "2", "--variants", "baseline"]
    assert main([*args, "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = read_json(tmp_path / "study_ablation.json")["rows"]
    assert [row["variant"] for row in rows] == ["baseline"]
    assert (tmp_path / "ablation_baseline" / "checkpoint.pt").is_file()
    assert read_json(tmp_path / "run_manifest.json")["command"] == "study-ablation"
