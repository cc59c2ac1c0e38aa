import hashlib
import json

import pytest

from avaction import cli


def digest_tree(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def ok(argv, capsys=None):
    code = cli.run([str(a) for a in argv])
    assert code == 0, capsys.readouterr().err if capsys else code
    return code


GEN = ["--videos", 12, "--segments", 2, "--folds", 4, "--test-folds", 1, "--val-folds", 1,
       "--action-fraction", 0.5, "--task-clips", 2]
TRAIN = ["--steps", 6, "--eval-every", 3, "--batch-size", 4]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data = root / "data"
    assert cli.run(["gen-data", "--out", str(data), *map(str, GEN)]) == 0
    d = {"root": root, "data": data}
    for phase in ("baseline", "multitask"):
        argv = ["train", "--phase", phase, "--train", data / "train", "--val", data / "val", "--out", root / phase, *TRAIN]
        assert cli.run([str(a) for a in argv]) == 0
    argv = ["pretrain-classifier", "--train", data / "train", "--init", root / "multitask" / "best.ckpt",
            "--steps", 5, "--out", root / "cls"]
    assert cli.run([str(a) for a in argv]) == 0
    argv = ["finetune-weak", "--train", data / "train", "--val", data / "val", "--init", root / "cls" / "classifier.ckpt",
            "--out", root / "ft", *TRAIN]
    assert cli.run([str(a) for a in argv]) == 0
    for name, ck in (("baseline", "baseline/best.ckpt"), ("multitask", "multitask/best.ckpt"), ("ft", "ft/best.ckpt")):
        argv = ["decode", "--checkpoint", root / ck, "--data", data / "test", "--strategy", "greedy",
                "--out", root / f"dec_{name}"]
        assert cli.run([str(a) for a in argv]) == 0
    return d


def test_pipeline_produces_expected_artifacts(pipeline):
    root, data = pipeline["root"], pipeline["data"]
    for part in ("train", "val", "test", "tasks"):
        assert (data / part / "manifest.jsonl").exists()
    for phase in ("baseline", "multitask", "ft"):
        meta = json.loads((root / phase / "manifest.json").read_text())
        assert {o["path"] for o in meta["outputs"]} >= {"best.ckpt", "train_log.jsonl"}
    assert (root / "cls" / "classifier.ckpt").exists()


def test_eval_three_rows_table(pipeline, capsys):
    root, data = pipeline["root"], pipeline["data"]
    argv = ["eval", "--ref", data / "test", "--out", root / "eval"]
    for name, label in (("baseline", "Baseline"), ("multitask", "Multi-task"), ("ft", "+Weak-sup.")):
        argv += ["--hyp", root / f"dec_{name}" / "decoded.jsonl", "--label", label]
    ok(argv, capsys)
    rows = json.loads((root / "eval" / "report.json").read_text())["reports"]
    assert [r["label"] for r in rows] == ["Baseline", "Multi-task", "+Weak-sup."]
    table = (root / "eval" / "table.txt").read_text()
    assert "BLEU-1" in table and "Action error [%]" in table


def test_eval_identical_files_bleu_one(pipeline, capsys):
    root, data = pipeline["root"], pipeline["data"]
    rows = []
    for line in (data / "test" / "manifest.jsonl").read_text().splitlines()[1:]:
        r = json.loads(line)
        rows.append({"video_id": r["video_id"], "segment": r["segment"], "steps": r["actions"]})
    ref = root / "ref.jsonl"
    ref.write_text("".join(json.dumps(r) + "\n" for r in rows))
    ok(["eval", "--ref", ref, "--hyp", ref, "--out", root / "eval_same"], capsys)
    rep = json.loads((root / "eval_same" / "report.json").read_text())["reports"][0]
    assert rep["bleu1"] == 1.0 and rep["bleu2"] == 1.0
    assert rep["action_error"] == 0.0 and rep["task_success"] == 100.0


def test_masked_decode_respects_bench(pipeline, capsys):
    root, data = pipeline["root"], pipeline["data"]
    ok(["decode", "--checkpoint", root / "multitask" / "best.ckpt", "--data", data / "tasks", "--mask",
        "--beam-width", 2, "--out", root / "dec_mask"], capsys)
    benches = {}
    for line in (data / "tasks" / "manifest.jsonl").read_text().splitlines()[1:]:
        r = json.loads(line)
        benches[r["video_id"]] = set(r["bench"])
    header = json.loads((data / "tasks" / "manifest.jsonl").read_text().splitlines()[0])
    nouns = set(header["nouns"])
    for line in (root / "dec_mask" / "decoded.jsonl").read_text().splitlines():
        d = json.loads(line)
        assert d["mask_id"] == d["video_id"]
        assert {t for t in d["tokens"] if t in nouns} <= benches[d["video_id"]]


def test_exec_sim_actions_and_decoded(pipeline, capsys):
    root = pipeline["root"]
    ok(["exec-sim", "--task", "cereal", "--actions", "place bowl, pour cereal, pour milk", "--out", root / "sim"], capsys)
    doc = json.loads((root / "sim" / "exec.json").read_text())
    assert doc["success_rate"] == 100.0
    assert (root / "sim" / "trajectories" / "actions.csv").exists()
    ok(["exec-sim", "--task", "cereal", "--decoded", root / "dec_multitask" / "decoded.jsonl",
        "--data", pipeline["data"] / "test", "--out", root / "sim2"], capsys)
    doc = json.loads((root / "sim2" / "exec.json").read_text())
    assert 0.0 <= doc["success_rate"] <= 100.0 and doc["clips"]


def test_rerun_is_bit_identical(pipeline, tmp_path):
    data = pipeline["data"]
    for name in ("a", "b"):
        argv = ["train", "--phase", "multitask", "--train", data / "train", "--val", data / "val",
                "--out", tmp_path / name, *TRAIN]
        assert cli.run([str(a) for a in argv]) == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")
    for name in ("c", "d"):
        assert cli.run(["gen-data", "--out", str(tmp_path / name), *map(str, GEN)]) == 0
    assert digest_tree(tmp_path / "c") == digest_tree(tmp_path / "d")


def test_run_directory_records_config_and_replays(pipeline, tmp_path):
    data = pipeline["data"]
    argv = ["train", "--phase", "baseline", "--train", data / "train", "--out", tmp_path / "a", *TRAIN]
    assert cli.run([str(a) for a in argv]) == 0
    cfg = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg["train"]["steps"] == 6 and cfg["extra"]["phase"] == "baseline"
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == hashlib.sha256((tmp_path / "a" / "config.json").read_bytes()).hexdigest()
    assert cli.run(["train", "--config", str(tmp_path / "a" / "config.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    assert (tmp_path / "a" / "config.json").read_bytes() == (tmp_path / "b" / "config.json").read_bytes()


def test_inputs_not_mutated(pipeline, tmp_path):
    data = pipeline["data"]
    before = digest_tree(data)
    argv = ["train", "--phase", "multitask", "--train", data / "train", "--val", data / "val", "--out", tmp_path, *TRAIN]
    assert cli.run([str(a) for a in argv]) == 0
    assert digest_tree(data) == before


def test_default_run_dir_uses_env_root(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.run(["exec-sim", "--task", "coffee", "--actions", "pour coffee cup, pour milk cup"]) == 0
    dirs = list(tmp_path.iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("exec-sim-")


def test_finetune_without_classifier_exit_3(pipeline, capsys):
    root, data = pipeline["root"], pipeline["data"]
    code = cli.run([str(a) for a in ["finetune-weak", "--train", data / "train", "--init",
                                     root / "multitask" / "best.ckpt", "--out", root / "bad_ft", *TRAIN]])
    assert code == 3
    assert "classifier" in capsys.readouterr().err


def test_finetune_without_init_exit_3(pipeline, capsys):
    data = pipeline["data"]
    code = cli.run([str(a) for a in ["train", "--phase", "finetune-weak", "--train", data / "train",
                                     "--out", pipeline["root"] / "bad_ft2", *TRAIN]])
    assert code == 3
    assert "multitask" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["train", "--no-such-flag"], ["frobnicate"], []])
def test_usage_errors_exit_2(argv):
    assert cli.run(argv) == 2


@pytest.mark.parametrize("argv", [
    ["gen-data", "--action-fraction", "1.5"],
    ["gen-data", "--videos", "2", "--folds", "4"],
    ["train", "--phase", "baseline", "--train", "/nonexistent/data"],
    ["train", "--phase", "baseline", "--temperature", "0"],
    ["exec-sim", "--task", "nope", "--actions", "place bowl"],
])
def test_config_errors_exit_3(argv, tmp_path):
    assert cli.run(argv + ["--out", str(tmp_path / "x")]) == 3


def test_unknown_config_key_exit_3(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"stepz": 3}}))
    assert cli.run(["train", "--phase", "baseline", "--config", str(tmp_path / "c.json"),
                    "--out", str(tmp_path / "x")]) == 3


def test_runtime_failure_exit_1(monkeypatch, tmp_path):
    def boom(run):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.HANDLERS, "exec-sim", boom)
    assert cli.run(["exec-sim", "--task", "cereal", "--actions", "place bowl", "--out", str(tmp_path)]) == 1


def test_version_flag_exit_0():
    assert cli.run(["--version"]) == 0
