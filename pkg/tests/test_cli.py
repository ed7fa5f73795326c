import json

import pytest

from fouriernat import cli, spectral
from fouriernat.spectral import ComplexSpectrum


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    assert run("generate-data", "--kind", "reverse", "--n", 40, "--content-vocab", 10, "--min-len", 2,
               "--max-len", 5, "--t-max", 8, "--seed", 3, "--output", path, "--out-dir", tmp_path) == 0
    return path


TINY = ["--d", 16, "--layers", 1, "--heads", 2, "--d-ff", 32, "--content-vocab", 10, "--t-max", 8,
        "--s-max", 16, "--tokens-per-batch", 64, "--warmup", 4, "--val-size", 8]


@pytest.fixture
def trained(tmp_path, dataset):
    out = tmp_path / "run"
    assert run("train", "--data", dataset, "--max-steps", 6, "--eval-interval", 3, "--out-dir", out, *TINY) == 0
    return out


def test_generate_data_byte_identical(tmp_path, dataset):
    again = tmp_path / "again.jsonl"
    run("generate-data", "--kind", "reverse", "--n", 40, "--content-vocab", 10, "--min-len", 2, "--max-len", 5,
        "--t-max", 8, "--seed", 3, "--output", again, "--out-dir", tmp_path)
    assert again.read_bytes() == dataset.read_bytes()
    cfg = json.loads((tmp_path / "run_config.json").read_text())
    assert cfg["kind"] == "reverse" and cfg["seed"] == 3 and cfg["vocab"] == 14


def test_train_curves_reproducible(tmp_path, dataset, trained):
    other = tmp_path / "run2"
    assert run("train", "--data", dataset, "--max-steps", 6, "--eval-interval", 3, "--out-dir", other, *TINY) == 0
    assert (other / "curves.csv").read_bytes() == (trained / "curves.csv").read_bytes()
    lines = (trained / "curves.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_metric,wall_clock_s"
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "3", "6"]


def test_config_file_then_flags(tmp_path, dataset):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"max_steps": 2, "d": 8, "seed": 5}))
    out = tmp_path / "cf"
    assert run("train", "--config", conf, "--data", dataset, "--d", 16, "--out-dir", out, *TINY[2:]) == 0
    echoed = json.loads((out / "run_config.json").read_text())
    assert echoed["max_steps"] == 2 and echoed["d"] == 16 and echoed["seed"] == 5


@pytest.mark.parametrize("passes", [0, 1, 3])
def test_decode_records(tmp_path, dataset, trained, passes):
    out = tmp_path / f"hyp{passes}.jsonl"
    assert run("decode", "--checkpoint", trained / "last.fnat", "--data", dataset, "--output", out,
               "--passes", passes, "--out-dir", tmp_path) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(recs) == 40
    assert set(recs[0]) == {"src", "hyp", "confidences", "passes"}
    assert all(r["passes"] == passes + 1 for r in recs)


def test_decode_vocab_mismatch_is_config_error(tmp_path, dataset, trained):
    assert run("decode", "--checkpoint", trained / "last.fnat", "--data", dataset, "--output", tmp_path / "h",
               "--vocab", 20, "--out-dir", tmp_path) == 2


def test_evaluate_self_is_perfect(tmp_path, dataset, capsys):
    assert run("evaluate", dataset, dataset, "--out-dir", tmp_path) == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for key in ("token_accuracy", "sequence_accuracy", "bleu", "rougeL"):
        assert report[key] == 1.0


def test_usage_errors_exit_2(tmp_path, dataset):
    assert run("train", "--data", tmp_path / "missing.jsonl", "--out-dir", tmp_path) == 2
    assert run("train", "--data", dataset, "--d", 10, "--heads", 4, "--out-dir", tmp_path) == 2
    assert run("generate-data", "--kind", "copy", "--max-len", 20, "--t-max", 16, "--output",
               tmp_path / "x", "--out-dir", tmp_path) == 2
    assert run("no-such-command") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("selfcheck", "--config", bad, "--out-dir", tmp_path) == 2


def test_evaluate_misaligned_is_error(tmp_path, dataset):
    short = tmp_path / "short.jsonl"
    short.write_text(dataset.read_text().splitlines()[0] + "\n")
    assert run("evaluate", short, dataset, "--out-dir", tmp_path) == 2


def test_benchmark_and_distill(tmp_path, dataset, trained):
    ar = tmp_path / "ar"
    assert run("train", "--data", dataset, "--arch", "ar-baseline", "--max-steps", 3, "--out-dir", ar, *TINY) == 0
    rep = tmp_path / "bench.json"
    assert run("benchmark", "--nat", trained / "last.fnat", "--ar", ar / "last.fnat", "--data", dataset,
               "--batch-size", 16, "--output", rep, "--out-dir", tmp_path) == 0
    data = json.loads(rep.read_text())
    assert data["nat_forwards"] == 3 and data["batch_size"] == 16
    assert run("benchmark", "--nat", trained / "last.fnat", "--ar", ar / "last.fnat", "--data", dataset,
               "--dtype", "float32", "--repeats", 2, "--batch-size", 16, "--output", rep, "--out-dir", tmp_path) == 0
    data = json.loads(rep.read_text())
    assert data["dtype"] == "float32" and data["repeats"] == 2 and data["nat_forwards"] == 3
    dist = tmp_path / "dist.jsonl"
    assert run("distill", "--teacher", ar / "last.fnat", "--data", dataset, "--output", dist,
               "--out-dir", tmp_path) == 0
    assert len(dist.read_text().splitlines()) == 40
    # swapped roles are rejected
    assert run("benchmark", "--nat", ar / "last.fnat", "--ar", trained / "last.fnat", "--data", dataset,
               "--out-dir", tmp_path) == 2


def test_selfcheck_passes(tmp_path, capsys):
    assert run("selfcheck", "--out-dir", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 10 and "[FAIL]" not in out


def test_selfcheck_catches_sign_error(tmp_path, capsys, monkeypatch):
    real = spectral.idft_seq

    def broken(spec):
        # conjugated twiddles: the inverse runs with the wrong sign
        return real(ComplexSpectrum(spec.real, -spec.imag))

    monkeypatch.setattr(spectral, "idft_seq", broken)
    assert run("selfcheck", "--out-dir", tmp_path) == 1
    out = capsys.readouterr().out
    assert out.count("[PASS]") + out.count("[FAIL]") >= 10
    assert "[FAIL] ifft_roundtrip" in out
