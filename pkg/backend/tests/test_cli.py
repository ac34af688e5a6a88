import json
import os

import pandas as pd
import pytest

from main import main
from scoring.imaging import load_manifest


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def _score(tmp_path, small_corpus, name, *extra) -> dict:
    out = tmp_path / name
    code = _run("transfer-score", "--train-manifest", small_corpus["primary"],
                "--aux-manifest", f"aux_a={small_corpus['aux_a']}",
                "--trees", 10, "--levels", 8, "--seed", 2, "--out", out, *extra)
    assert code == 0
    return json.loads(out.read_text(encoding="utf-8"))


def test_extract_writes_full_feature_table(tmp_path, small_corpus) -> None:
    out = tmp_path / "features.csv"
    assert _run("extract", "--manifest", small_corpus["primary"], "--levels", 51, "--out", out) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns[:3]) == ["path", "label", "source"]
    assert list(frame.columns[3:]) == [f"f{k}" for k in range(2601)]
    assert len(frame) == 16
    assert frame.iloc[:, 3:].sum(axis=1).round(9).eq(1.0).all()


def test_transfer_score_without_aux_gives_equal_arms(tmp_path, small_corpus) -> None:
    out = tmp_path / "report.json"
    assert _run("transfer-score", "--train-manifest", small_corpus["primary"], "--trees", 10, "--levels", 8,
                "--out", out) == 0
    run = json.loads(out.read_text(encoding="utf-8"))["mtry_reports"][0]["runs"][0]
    assert run["accuracy_with_transfer"] == run["accuracy_without_transfer"]
    assert run["transferred"] == {}


def test_transfer_score_report_layout(tmp_path, small_corpus) -> None:
    payload = _score(tmp_path, small_corpus, "report.json", "--runs", 2, "--mtry", "sqrt,2sqrt",
                     "--pooled-baseline")
    assert payload["config"]["aux"] == {"aux_a": str(small_corpus["aux_a"])}
    assert [r["mtry"] for r in payload["mtry_reports"]] == ["sqrt", "2sqrt"]
    assert [r["runs"][0]["mtry"] for r in payload["mtry_reports"]] == [8, 16]
    first = payload["mtry_reports"][0]
    assert first["summary"]["runs"] == 2
    assert all(0 <= run["transferred"]["aux_a"] <= run["aux_sizes"]["aux_a"] == 12 for run in first["runs"])
    assert all(run["accuracy_pooled"] is not None for run in first["runs"])


def test_reports_are_byte_identical_across_runs_and_threads(tmp_path, small_corpus) -> None:
    _score(tmp_path, small_corpus, "a.json", "--threads", 1)
    _score(tmp_path, small_corpus, "b.json", "--threads", 1)
    _score(tmp_path, small_corpus, "c.json", "--threads", 8)
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    assert a == (tmp_path / "c.json").read_bytes()


def test_fixed_test_set(tmp_path, small_corpus) -> None:
    out = tmp_path / "fixed.json"
    assert _run("transfer-score", "--train-manifest", small_corpus["primary"],
                "--test-manifest", small_corpus["aux_a"], "--trees", 5, "--levels", 8, "--out", out) == 0
    run = json.loads(out.read_text(encoding="utf-8"))["mtry_reports"][0]["runs"][0]
    assert run["n_train"] == 16
    assert run["n_test"] == 12


def _dotted_manifest(tmp_path, manifest, count: int = 4):
    """Manifest naming the first images of `manifest` through `..` segments"""
    (tmp_path / "sub").mkdir()
    target = tmp_path / "sub" / "test.csv"
    rows = [f"{os.path.relpath(e.path, target.parent)},{e.label},{e.source}"
            for e in load_manifest(manifest).entries[:count]]
    assert all(row.startswith("..") for row in rows)
    target.write_text("path,label,source\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return target


def test_fixed_test_set_overlapping_train_through_dotted_paths(tmp_path, small_corpus) -> None:
    test = _dotted_manifest(tmp_path, small_corpus["primary"])
    assert _run("transfer-score", "--train-manifest", small_corpus["primary"], "--test-manifest", test,
                "--trees", 5, "--levels", 8, "--out", tmp_path / "r.json") == 1


def test_export_transferred_feeds_evaluate(tmp_path, small_corpus) -> None:
    exported = tmp_path / "enlarged.csv"
    payload = _score(tmp_path, small_corpus, "report.json", "--runs", 2, "--export-transferred", exported)
    run = payload["mtry_reports"][0]["runs"][0]
    frame = pd.read_csv(exported)
    assert len(frame) == run["n_train"] + run["transferred"]["aux_a"]
    assert frame["path"].iloc[run["n_train"]:].tolist() == run["transferred_paths"]["aux_a"]
    assert set(frame["source"].iloc[:run["n_train"]]) == {"primary"}

    report = tmp_path / "eval.json"
    assert _run("evaluate", "--features", exported, "--out", report) == 0
    assert json.loads(report.read_text(encoding="utf-8"))["representation"] == "normalized"


def test_train_then_evaluate_with_model(tmp_path, small_corpus) -> None:
    model = tmp_path / "model.json"
    assert _run("train", "--train", small_corpus["primary"], "--trees", 7, "--levels", 8, "--out", model) == 0
    document = json.loads(model.read_text(encoding="utf-8"))
    assert document["format"] == "tma-forest"
    assert len(document["trees"]) == 7

    report = tmp_path / "eval.json"
    assert _run("evaluate", "--features", small_corpus["aux_a"], "--levels", 8, "--model", model,
                "--out", report) == 0
    payload = json.loads(report.read_text(encoding="utf-8"))
    assert 0.0 <= payload["accuracy"] <= 1.0
    assert set(payload["ssw"]) == {"0", "1", "2", "3"}
    assert payload["representation"] == "normalized"


def test_evaluate_accepts_feature_files(tmp_path, small_corpus) -> None:
    features = tmp_path / "features.csv"
    assert _run("extract", "--manifest", small_corpus["primary"], "--levels", 8, "--raw", "--out", features) == 0
    report = tmp_path / "eval.json"
    assert _run("evaluate", "--features", features, "--levels", 8, "--raw", "--out", report) == 0
    assert json.loads(report.read_text(encoding="utf-8"))["representation"] == "raw"


def test_pca_export(tmp_path, small_corpus) -> None:
    out = tmp_path / "pca.csv"
    assert _run("pca-export", "--features", small_corpus["primary"], "--levels", 8, "--out", out) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ["path", "label", "source", "pc1", "pc2"]
    assert len(frame) == 16
    sidecar = json.loads((tmp_path / "pca.csv.json").read_text(encoding="utf-8"))
    assert len(sidecar["explained_variance_ratio"]) == 2


def test_synth_command(tmp_path) -> None:
    out = tmp_path / "corpus"
    assert _run("synth", "--out", out, "--images-per-class", 1, "--seed", 9) == 0
    assert (out / "primary.csv").exists()
    assert (out / "aux_a.csv").exists()
    assert len(list((out / "primary").glob("*.pgm"))) == 4


@pytest.mark.parametrize("argv", [
    ["no-such-command"],
    ["extract", "--manifest", "m.csv", "--out", "o.csv", "--bogus"],
    ["extract", "--out", "o.csv"],
])
def test_usage_errors_exit_with_one(argv) -> None:
    assert main(argv) == 1


def test_help_exits_with_zero() -> None:
    assert main(["--help"]) == 0


def test_missing_file_is_an_io_error(tmp_path) -> None:
    assert _run("extract", "--manifest", tmp_path / "missing.csv", "--out", tmp_path / "o.csv") == 2


def test_bad_label_is_a_validation_error(tmp_path, small_corpus) -> None:
    manifest = tmp_path / "bad.csv"
    manifest.write_text("path,label,source\nimg.pgm,7,primary\n", encoding="utf-8")
    assert _run("extract", "--manifest", manifest, "--out", tmp_path / "o.csv") == 1


def test_fixed_test_set_rejects_runs(tmp_path, small_corpus) -> None:
    assert _run("transfer-score", "--train-manifest", small_corpus["primary"],
                "--test-manifest", small_corpus["aux_a"], "--runs", 3, "--out", tmp_path / "r.json") == 1


@pytest.mark.parametrize("aux", ["aux_a", "=path.csv", "aux_a="])
def test_malformed_aux_argument(tmp_path, small_corpus, aux) -> None:
    assert _run("transfer-score", "--train-manifest", small_corpus["primary"], "--aux-manifest", aux,
                "--out", tmp_path / "r.json") == 1


def test_zero_threads_is_rejected(tmp_path, small_corpus) -> None:
    assert _run("extract", "--manifest", small_corpus["primary"], "--threads", 0,
                "--out", tmp_path / "o.csv") == 1
