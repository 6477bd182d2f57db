import json

import pytest

from reghorizon.cli import main
from reghorizon.trainer import RunRecord

from planted import OTHER, dump, factorial_records

TINY_EXP = {
    "corpus": {"vocab_size": 12, "min_len": 2, "max_len": 4, "size": 60, "frame_dim": 4},
    "model": {"vocab_size": 12, "d_model": 8, "n_heads": 2, "enc_layers": 1, "dec_layers": 1,
              "ffn_dim": 16, "frame_dim": 4},
    "train": {"max_steps": 4, "eval_every": 2, "warmup_steps": 2, "max_tokens": 200},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "exp.json"
    p.write_text(json.dumps({**TINY_EXP, "output_dir": str(tmp_path / "out")}))
    return p


def test_gen_deterministic_and_manifest(cfg, tmp_path):
    assert main(["gen", str(cfg), "-o", str(tmp_path / "a")]) == 0
    assert main(["gen", str(cfg), "-o", str(tmp_path / "b")]) == 0
    assert main(["gen", str(cfg), "-o", str(tmp_path / "c"), "-s", "corpus.seed=1"]) == 0
    a, b = (tmp_path / "a" / "corpus.jsonl").read_bytes(), (tmp_path / "b" / "corpus.jsonl").read_bytes()
    assert a == b and len(a.splitlines()) == 60
    ma, mb, mc = (json.loads((tmp_path / d / "corpus.manifest.json").read_text())
                  for d in "abc")
    assert ma["spec_hash"] == mb["spec_hash"] != mc["spec_hash"]


def test_train_outputs(cfg, tmp_path):
    out = tmp_path / "t"
    assert main(["train", str(cfg), "-o", str(out)]) == 0
    rec = json.loads((out / "run.jsonl").read_text())
    RunRecord.from_dict(rec)
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["config_hash"] == rec["config_hash"]
    scores = [json.loads(l) for l in (out / "test_scores.jsonl").read_text().splitlines()]
    assert scores and all(s["config_hash"] == rec["config_hash"] for s in scores)


def test_train_twice_byte_identical(cfg, tmp_path):
    for d in ("x", "y"):
        assert main(["train", str(cfg), "-o", str(tmp_path / d)]) == 0
    assert (tmp_path / "x" / "run.jsonl").read_bytes() == (tmp_path / "y" / "run.jsonl").read_bytes()


def test_train_numeric_failure_exit_code(cfg, tmp_path, monkeypatch):
    from reghorizon import trainer
    from reghorizon.errors import NumericError

    def boom(*a, **k):
        raise NumericError("nan")
    monkeypatch.setattr(trainer, "total_loss", boom)
    assert main(["train", str(cfg), "-o", str(tmp_path / "f")]) == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"train": {"dropout": 2.0}}))
    assert main(["train", str(p)]) == 1


def sweep_cfg(tmp_path):
    p = tmp_path / "sweep.json"
    p.write_text(json.dumps({**TINY_EXP, "sweep": {"axes": {"alpha_cr": [0.5, 1.0],
                                                            "dropout": [0.1, 0.2]},
                                                   "seeds": [0]}}))
    return p


def test_sweep_resumes(tmp_path):
    cfg = sweep_cfg(tmp_path)
    out = tmp_path / "s"
    assert main(["sweep", str(cfg), "-o", str(out)]) == 0
    results = out / "results.jsonl"
    full = results.read_text().splitlines()
    assert len(full) == 4
    results.write_text("\n".join(full[:2]) + "\n")
    assert main(["sweep", str(cfg), "-o", str(out)]) == 0
    assert results.read_text().splitlines() == full
    assert main(["sweep", str(cfg), "-o", str(out)]) == 0
    assert results.read_text().splitlines() == full


def test_sweep_missing_section(cfg):
    assert main(["sweep", str(cfg)]) == 1


def test_analyze_planted(tmp_path):
    recs = factorial_records(OTHER)
    path = dump(recs, tmp_path / "results.jsonl")
    assert main(["analyze", str(path), "--per-family"]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert set(fit) == {"beta_cr", "beta_rd", "beta_t", "beta_do", "beta_f", "beta_B",
                        "residual_rms", "n_points"}
    for k in ("beta_cr", "beta_rd", "beta_t", "beta_do", "beta_B"):
        assert fit[k] == pytest.approx(OTHER[k], abs=1e-9)
    rows = (tmp_path / "collapse.csv").read_text().splitlines()
    assert len(rows) == len(recs) + 1
    manifest = json.loads((tmp_path / "analysis.manifest.json").read_text())
    assert "per_family" in manifest and manifest["n_records"] == len(recs)


def test_analyze_insufficient(tmp_path, capsys):
    path = dump(factorial_records(OTHER)[:6], tmp_path / "few.jsonl")
    assert main(["analyze", str(path)]) == 3
    assert "5 over-regularized points (need 6)" in capsys.readouterr().err


def write_scores(path, scores):
    path.write_text("".join(json.dumps({"score": s}) + "\n" for s in scores))
    return str(path)


def test_bootstrap_cli(tmp_path, capsys):
    a = write_scores(tmp_path / "a.jsonl", [0.1 * (i % 7) for i in range(30)])
    one = write_scores(tmp_path / "one.jsonl", [1.0] * 30)
    zero = write_scores(tmp_path / "zero.jsonl", [0.0] * 30)
    assert main(["bootstrap", a, a]) == 0
    assert json.loads(capsys.readouterr().out)["p_value"] == 1.0
    assert main(["bootstrap", one, zero]) == 0
    assert json.loads(capsys.readouterr().out)["p_value"] == 0.0
    b = write_scores(tmp_path / "b.jsonl", [0.1 * (i % 5) for i in range(30)])
    main(["bootstrap", a, b, "--seed", "3"])
    first = capsys.readouterr().out
    main(["bootstrap", a, b, "--seed", "3"])
    assert capsys.readouterr().out == first


def test_checkgrad_primitives(capsys):
    assert main(["checkgrad", "--primitives-only"]) == 0
    assert main(["checkgrad", "--primitives-only", "--inject-bug"]) == 1
    assert "injected_bug" in capsys.readouterr().out
