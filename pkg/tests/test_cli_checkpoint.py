import json
import math

import pytest
import torch

from cifkit.bijections import actnorm_init_mode
from cifkit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cifkit.cli import dumps, fmt_float, main
from cifkit.config import config_from_dict, dump_config
from cifkit.models import build_model
from cifkit.numcore import SeededRng

from helpers import randomize

SMALL = {
    "seed": 1,
    "model": {"type": "cif-coupling", "layers": 2, "nets": {"coupler": [16, 2]}},
    "optimiser": {"batch_size": 64, "max_epochs": 2},
    "data": {"name": "annulus", "n_train": 256, "n_val": 64, "n_test": 64},
}


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--config", write_config(tmp_path, SMALL), "--output-dir", out)
    assert code == 0
    return out


# -- float formatting ---------------------------------------------------------------------


def test_float_format_round_trips():
    for x in (0.1, 1 / 3, -2.5e-300, 1e22, math.pi):
        assert float(fmt_float(x)) == x
    assert fmt_float(math.nan) == "NaN" and fmt_float(-math.inf) == "-Infinity"
    assert json.loads(dumps({"a": [1, 0.1, None, True, "s"]})) == {"a": [1, 0.1, None, True, "s"]}


# -- checkpoints -------------------------------------------------------------------------------


@pytest.mark.parametrize("arch", ["cif-resflow", "maf", "cif-id"])
def test_checkpoint_round_trip_bit_exact(tmp_path, arch):
    cfg = config_from_dict({"model": {"type": arch, "layers": 2, "actnorm": arch == "cif-resflow",
                                      "nets": {"coupler": [8, 2]}}})
    model = build_model(cfg.model, 2, SeededRng(cfg.seed).child(0))
    randomize(model, SeededRng(4))
    if arch == "cif-resflow":
        with actnorm_init_mode():
            model.objective(SeededRng(5).normal((16, 2)), SeededRng(6))
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, cfg, model, torch.tensor([1.0, 2.0]), torch.tensor([0.5, 3.0]))
    ckpt = load_checkpoint(path)
    original, restored = model.state_dict(), ckpt.model.state_dict()
    assert list(original) == list(restored)
    for name in original:
        assert original[name].dtype == restored[name].dtype
        assert torch.equal(original[name], restored[name]), name
    assert ckpt.config == cfg and ckpt.dim == 2 and torch.equal(ckpt.std, torch.tensor([0.5, 3.0]))
    save_checkpoint(tmp_path / "again.json", ckpt.config, ckpt.model, ckpt.mean, ckpt.std)
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_tampering(tmp_path):
    cfg = config_from_dict({"model": {"type": "coupling", "layers": 2}})
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, cfg, build_model(cfg.model, 2, SeededRng(0)))
    doc = json.loads(path.read_text())
    doc["tensors"][0]["shape"] = [999]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text("{}")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- train ---------------------------------------------------------------------------------------------


def test_train_writes_outputs(trained):
    assert sorted(p.name for p in trained.iterdir()) == ["checkpoint.json", "metrics.jsonl", "resolved-config.json"]
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["epoch"] == 1
    resolved = json.loads((trained / "resolved-config.json").read_text())
    assert resolved["model"]["kappa"] == 0.9 and resolved["eval"]["m_test"] == 100


def test_train_is_byte_reproducible(tmp_path, capsys, trained):
    out2 = tmp_path / "run2"
    run(capsys, "train", "--config", trained / "resolved-config.json", "--output-dir", out2)
    for name in ("metrics.jsonl", "checkpoint.json", "resolved-config.json"):
        assert (out2 / name).read_bytes() == (trained / name).read_bytes()


def test_train_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"seed": 1, "model": {"kapa": 0.9}}')
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 2 and "model.kapa" in err
    bad.write_text('{"seed": 1,')
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 2 and "<json>" in err
    code, _, _ = run(capsys, "train", "--config", tmp_path / "missing.json")
    assert code == 2
    doc = dict(SMALL, data={"source": "csv", "path": str(tmp_path / "nope.csv")})
    code, _, _ = run(capsys, "train", "--config", write_config(tmp_path, doc), "--output-dir", tmp_path / "o")
    assert code == 3


def test_train_numeric_abort_exit_code(tmp_path, capsys):
    doc = dict(SMALL, model={"type": "coupling", "layers": 2}, optimiser={"lr": 1e300, "max_epochs": 3})
    code, _, err = run(capsys, "train", "--config", write_config(tmp_path, doc), "--output-dir", tmp_path / "o")
    assert code == 4 and "numeric abort" in err


# -- eval -------------------------------------------------------------------------------------------------


def test_eval_zeroed_heads_independent_of_m(tmp_path, capsys):
    doc = dict(SMALL, model=dict(SMALL["model"], heads="zeroed-frozen"))
    out = tmp_path / "z"
    run(capsys, "train", "--config", write_config(tmp_path, doc), "--output-dir", out)
    results = []
    for m in (1, 7, 50):
        code, stdout, _ = run(capsys, "eval", "--checkpoint", out / "checkpoint.json", "--data", "test", "--m", m)
        assert code == 0
        results.append(json.loads(stdout))
    assert results[0]["mean_ll"] == results[1]["mean_ll"] == results[2]["mean_ll"]
    assert [r["m"] for r in results] == [1, 7, 50] and results[0]["n"] == 64


def test_eval_stderr_definition(tmp_path, capsys, trained):
    from cifkit.training import evaluate, load_splits

    code, stdout, _ = run(capsys, "eval", "--checkpoint", trained / "checkpoint.json",
                          "--data", "synthetic:annulus:200:5", "--m", 3, "--seed", 2)
    assert code == 0
    res = json.loads(stdout)
    ckpt = load_checkpoint(trained / "checkpoint.json")
    from cifkit.training import dataset_generate

    values = evaluate(ckpt.model, dataset_generate("annulus", 200, 5), 3, SeededRng(2)).values
    assert res["mean_ll"] == float(values.mean())
    assert res["stderr"] == pytest.approx(float(values.std()) / math.sqrt(200), rel=1e-12)
    assert load_splits(ckpt.config).dim == 2


def test_eval_errors(tmp_path, capsys, trained):
    three = tmp_path / "three.csv"
    three.write_text("a,b,c\n1,2,3\n4,5,6\n")
    ckpt = trained / "checkpoint.json"
    assert run(capsys, "eval", "--checkpoint", ckpt, "--data", three)[0] == 3
    assert run(capsys, "eval", "--checkpoint", ckpt, "--data", "synthetic:annulus:x:1")[0] == 3
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none.json")[0] == 3
    assert run(capsys, "eval", "--checkpoint", ckpt, "--m", 0)[0] == 2
    assert run(capsys, "eval", "--bogus")[0] == 2


# -- sample, density-grid, bilip, rr-lab ------------------------------------------------------------------------


def test_sample_csv(tmp_path, capsys, trained):
    out = tmp_path / "s.csv"
    assert run(capsys, "sample", "--checkpoint", trained / "checkpoint.json", "--n", 5, "--out", out)[0] == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x1,x2" and len(lines) == 6
    assert all(len(line.split(",")) == 2 for line in lines[1:])


def test_density_grid_csv(tmp_path, capsys, trained):
    out = tmp_path / "g.csv"
    code, _, _ = run(capsys, "density-grid", "--checkpoint", trained / "checkpoint.json", "--bounds=-2,2,-1,1",
                     "--resolution", 4, "--m", 2, "--out", out)
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "x1,x2,log_density" and len(lines) == 17
    assert lines[1].startswith("-2,-1,")
    assert run(capsys, "density-grid", "--checkpoint", trained / "checkpoint.json", "--bounds=1,0,0,1",
               "--out", out)[0] == 2


def test_bilip_on_identity_checkpoint(tmp_path, capsys):
    cfg = config_from_dict({"model": {"type": "coupling", "layers": 3}})
    path = tmp_path / "id.json"
    save_checkpoint(path, cfg, build_model(cfg.model, 2, SeededRng(cfg.seed).child(0)))
    out = tmp_path / "b.json"
    code, stdout, _ = run(capsys, "bilip", "--checkpoint", path, "--pairs", 500, "--points", 200, "--out", out)
    assert code == 0
    assert json.loads(stdout)["bilip_lb"] == pytest.approx(1.0, abs=1e-12)
    assert json.loads(out.read_text()) == json.loads(stdout)


def test_bilip_resflow_reports_bound(tmp_path, capsys):
    cfg = config_from_dict({"model": {"type": "resflow", "layers": 2, "nets": {"coupler": [8, 2]}}})
    path = tmp_path / "rf.json"
    save_checkpoint(path, cfg, build_model(cfg.model, 2, SeededRng(cfg.seed).child(0)))
    report = json.loads(run(capsys, "bilip", "--checkpoint", path, "--pairs", 200, "--points", 100)[1])
    assert report["theoretical_bound"] == pytest.approx(100.0)
    assert 1.0 <= report["bilip_lb"] <= report["theoretical_bound"]


def test_rr_lab(tmp_path, capsys):
    out = tmp_path / "rr.json"
    code, stdout, _ = run(capsys, "rr-lab", "--kappa", 0.9, "--p", 0.5, "--n-samples", 1000, "--out", out)
    summary = json.loads(stdout)
    assert code == 0 and summary["verdict"] == "diverges" and summary["predicted"] == "diverges"
    full = json.loads(out.read_text())
    assert full["lower_bound"]["verdict"] == "diverges" and "samples" not in full["empirical"]
    code, stdout, _ = run(capsys, "rr-lab", "--kappa", 0.5, "--p", 0.5, "--n-samples", 1000)
    assert json.loads(stdout)["verdict"] == "converges"
    assert run(capsys, "rr-lab", "--kappa", 1.5, "--p", 0.5)[0] == 2


def test_resolved_config_is_canonical(trained):
    text = (trained / "resolved-config.json").read_text()
    assert dump_config(config_from_dict(json.loads(text))) == text
