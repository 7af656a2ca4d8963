import hashlib
import json

import pytest

from roda.cli import main
from roda.feature_store import load_feature_set

SMALL = ["--set", "world.n_source=20", "--set", "world.n_target=30"]


def _hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def data(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "d"), *SMALL]) == 0
    assert main(["fit", "--features", str(tmp_path / "d/source.json"), "--bank-out", str(tmp_path / "bank.json")]) == 0
    return tmp_path


def test_gen_writes_four_sets_and_a_manifest(data):
    manifest = json.loads((data / "d/manifest.json").read_text())
    assert sorted(manifest["files"]) == ["source", "target-clean", "target-test", "target-train"]
    for entry in manifest["files"].values():
        assert _hash(data / "d" / entry["meta"]) == entry["meta_sha256"]
        assert _hash(data / "d" / entry["payload"]) == entry["payload_sha256"]
    assert len(load_feature_set(data / "d/target-train.json")) == 6


def test_gen_is_hash_stable(tmp_path):
    for k in (1, 2):
        assert main(["gen", "--out", str(tmp_path / f"r{k}"), *SMALL]) == 0
    assert (tmp_path / "r1/manifest.json").read_bytes() == (tmp_path / "r2/manifest.json").read_bytes()


def test_bad_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"world": {"n_sources": 3}}))
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "world.n_sources" in capsys.readouterr().err


def test_print_config(capsys):
    assert main(["gen", "--out", "unused", "--print-config", "--set", "adapt.epochs=3"]) == 0
    assert json.loads(capsys.readouterr().out)["adapt"]["epochs"] == 3


def test_fit_full_fraction_and_bad_fraction(data):
    src = str(data / "d/source.json")
    assert main(["fit", "--features", src, "--bank-out", str(data / "all.json"), "--coreset-fraction", "1.0"]) == 0
    meta = json.loads((data / "all.json").read_text())
    assert meta["n_prototypes"] == 20 * 16
    assert main(["fit", "--features", src, "--bank-out", str(data / "x.json"), "--coreset-fraction", "1.5"]) == 2
    assert main(["fit", "--features", src, "--bank-out", str(data / "x.json"), "--coreset-fraction", "0"]) == 2
    assert main(["fit", "--features", src, "--bank-out", str(data / "b2.json")]) == 0
    assert _hash(data / "b2.json") == _hash(data / "bank.json")


def test_adapt_zero_rate_and_trace_length(data):
    args = ["adapt", "--bank", str(data / "bank.json"), "--target-train", str(data / "d/target-train.json"),
            "--adapter-out", str(data / "ad.json"), "--trace-out", str(data / "trace.jsonl")]
    assert main([*args, "--set", "adapt.learning_rate=0", "--set", "adapt.epochs=3"]) == 0
    from roda.alignment import load_adapter
    ad = load_adapter(data / "ad.json")
    assert (ad.scale == 1).all() and (ad.shift == 0).all()
    assert len((data / "trace.jsonl").read_text().splitlines()) == 3  # 6 samples, batch 8, 3 epochs


def test_adapt_unknown_method_exits_2(data):
    with pytest.raises(SystemExit) as exc:
        main(["adapt", "--bank", str(data / "bank.json"), "--target-train", str(data / "d/target-train.json"),
              "--adapter-out", str(data / "ad.json"), "--method", "magic"])
    assert exc.value.code == 2


def test_adapt_non_finite_exits_3(data):
    args = ["adapt", "--bank", str(data / "bank.json"), "--target-train", str(data / "d/target-train.json"),
            "--adapter-out", str(data / "ad.json"), "--set", "adapt.learning_rate=1e300",
            "--set", "adapt.augmentation=\"none\"", "--method", "moment-match"]
    assert main(args) == 3


def test_eval_with_and_without_adapter(data):
    bank, test = str(data / "bank.json"), str(data / "d/target-test.json")
    assert main(["eval", "--bank", bank, "--test", test, "--report-out", str(data / "r0.json")]) == 0
    report = json.loads((data / "r0.json").read_text())
    assert set(report) == {"image_auroc", "patch_auroc", "n_test", "fingerprint"}
    assert 0 <= report["image_auroc"] <= 1 and report["fingerprint"]["method"] == "none"
    from roda.alignment import AffineAdapter, save_adapter
    save_adapter(AffineAdapter.identity(8), data / "id.json")
    assert main(["eval", "--bank", bank, "--adapter", str(data / "id.json"), "--test", test,
                 "--report-out", str(data / "r1.json")]) == 0
    r1 = json.loads((data / "r1.json").read_text())
    assert r1["image_auroc"] == report["image_auroc"]


def test_eval_single_class_exits_4(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "d"), *SMALL, "--set", "world.anomaly_rate=0"]) == 0
    assert main(["fit", "--features", str(tmp_path / "d/source.json"), "--bank-out", str(tmp_path / "b.json")]) == 0
    assert main(["eval", "--bank", str(tmp_path / "b.json"), "--test", str(tmp_path / "d/target-test.json"),
                 "--report-out", str(tmp_path / "r.json")]) == 4


def test_missing_input_exits_4(tmp_path):
    assert main(["eval", "--bank", str(tmp_path / "none.json"), "--test", str(tmp_path / "t.json"),
                 "--report-out", str(tmp_path / "r.json")]) == 4


def test_ablate_and_sweep_write_tables(tmp_path, monkeypatch):
    monkeypatch.setenv("RODA_THREADS", "1")
    common = [*SMALL, "--set", "eval.seeds=[0]", "--set", "adapt.epochs=1"]
    assert main(["ablate", "--out", str(tmp_path / "a"), *common, "--set", 'eval.methods=["none","robust-ot"]',
                 "--set", 'eval.shift_kinds=["channel-gain"]']) == 0
    assert len((tmp_path / "a/ablation.jsonl").read_text().splitlines()) == 2 + 2
    assert "robust-ot" in (tmp_path / "a/ablation.txt").read_text()
    assert main(["sweep", "--out", str(tmp_path / "s"), *common, "--set", "eval.sweep_values=[0,2]",
                 "--set", 'eval.method="none"']) == 0
    assert len((tmp_path / "s/sweep.jsonl").read_text().splitlines()) == 2 + 2


def test_bad_thread_setting_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("RODA_THREADS", "many")
    assert main(["ablate", "--out", str(tmp_path / "a"), *SMALL, "--set", "eval.seeds=[0]",
                 "--set", 'eval.methods=["none"]']) == 2
