import filecmp
import subprocess
import sys

import numpy as np
import pytest

from protomil.cli import main
from protomil.matfile import write_matrix

GEN_CFG = """\
n_patients = 10
slides_per_patient = 1
instances_per_slide_range = 12, 16
d_hist = 4
d_st = 3
censor_rate = 0.0
"""

TRAIN_CFG = """\
d = 8
d_gate = 4
n_heads = 2
K_H = 2
K_S = 2
k_min = 4
epochs_max = 2
patience = 2
grad_accum = 4
lr = 1e-3
n_bins = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "gen.txt").write_text(GEN_CFG)
    (root / "train.txt").write_text(TRAIN_CFG)
    assert main(["gen", "--config", str(root / "gen.txt"), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(root / "train.txt"), "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root


def same_tree(a, b, ignore=("manifest.txt",)):
    cmp = filecmp.dircmp(a, b, ignore=list(ignore))
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_gen_is_deterministic(workspace, tmp_path):
    assert main(["gen", "--config", str(workspace / "gen.txt"), "--out", str(tmp_path / "again")]) == 0
    assert same_tree(workspace / "data", tmp_path / "again")
    manifest = (tmp_path / "again" / "manifest.txt").read_text()
    assert "command: gen" in manifest and "seed: 1" in manifest


def test_gen_seed_override_and_env(workspace, tmp_path, monkeypatch):
    main(["gen", "--config", str(workspace / "gen.txt"), "--out", str(tmp_path / "s2"), "--seed", "2"])
    assert not same_tree(workspace / "data", tmp_path / "s2")
    assert "seed: 2" in (tmp_path / "s2" / "manifest.txt").read_text()
    monkeypatch.setenv("PROTOMIL_SEED", "2")
    main(["gen", "--config", str(workspace / "gen.txt"), "--out", str(tmp_path / "env2")])
    assert same_tree(tmp_path / "s2", tmp_path / "env2")


def test_usage_errors(workspace, tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "x")]) == 2
    assert main(["gen", "--config", str(workspace / "gen.txt"), "--out", str(workspace / "data")]) == 2
    assert "--force" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("n_patients = 0\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "y")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen"])
    assert exc.value.code == 2
    assert main(["train", "--config", str(workspace / "train.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "z"), "--ablate", "nonsense"]) == 2


def test_force_overwrites(workspace, tmp_path):
    out = tmp_path / "forced"
    out.mkdir()
    (out / "junk").write_text("x")
    assert main(["gen", "--config", str(workspace / "gen.txt"), "--out", str(out), "--force"]) == 0


def test_train_outputs_and_determinism(workspace, tmp_path):
    run = workspace / "run"
    text = (run / "metrics.txt").read_text()
    assert "c_index_best_pm1_mean:" in text
    assert (run / "cv_c_index.png").exists() and (run / "cv_loss.png").exists()
    assert main(["train", "--config", str(workspace / "train.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "run2")]) == 0
    assert (tmp_path / "run2" / "metrics.txt").read_bytes() == (run / "metrics.txt").read_bytes()


def test_train_ablation_flag(workspace, tmp_path):
    assert main(["train", "--config", str(workspace / "train.txt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "h"), "--ablate", "hist_only", "--ablate", "mean_pool_fusion"]) == 0
    cfg = (tmp_path / "h" / "config.txt").read_text()
    assert "ablation = hist_only,mean_pool_fusion" in cfg
    model_txt = (tmp_path / "h" / "fold0" / "checkpoint" / "model.txt").read_text()
    assert "hist_only" in model_txt


def test_train_bad_data_is_runtime_error(workspace, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "labels.tsv").write_text("wrong header\n")
    assert main(["train", "--config", str(workspace / "train.txt"), "--data", str(broken),
                 "--out", str(tmp_path / "o")]) == 1


def test_eval(workspace, tmp_path, capsys):
    ck = workspace / "run" / "fold0" / "checkpoint"
    assert main(["eval", "--checkpoint", str(ck), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "e")]) == 0
    assert "c_index:" in (tmp_path / "e" / "eval.txt").read_text()
    assert len((tmp_path / "e" / "risks.tsv").read_text().splitlines()) == 11


def test_interpret_unknown_slide(workspace, tmp_path, capsys):
    ck = workspace / "run" / "fold0" / "checkpoint"
    code = main(["interpret", "--checkpoint", str(ck), "--data", str(workspace / "data"),
                 "--slide", "NOPE", "--out", str(tmp_path / "i")])
    assert code == 1
    err = capsys.readouterr().err
    assert "NOPE" in err and "P0_S0" in err


def test_interpret_bundle(workspace, tmp_path, capsys):
    ck = workspace / "run" / "fold0" / "checkpoint"
    data = workspace / "data"
    n = len((data / "P0_S0.xy.tsv").read_text().splitlines())
    ann = tmp_path / "ann.tsv"
    ann.write_text("slide_id\tinstance_idx\tcategory\tpixel_count\n"
                   + "".join(f"P0_S0\t{i}\t{'tumor' if i % 2 else 'stroma'}\t{i + 1}\n" for i in range(n)))
    rng = np.random.default_rng(0)
    write_matrix(tmp_path / "expr.mat", rng.gamma(2.0, size=(n, 5)))
    (tmp_path / "genes.txt").write_text("\n".join(f"G{i}" for i in range(5)) + "\n")
    (tmp_path / "terms.tsv").write_text("T1\tG0,G1\nT2\tG3\n")
    args = ["interpret", "--checkpoint", str(ck), "--data", str(data), "--slide", "P0_S0",
            "--annotations", str(ann), "--expression", str(tmp_path / "expr.mat"),
            "--genes", str(tmp_path / "genes.txt"), "--terms", str(tmp_path / "terms.tsv")]
    assert main(args + ["--out", str(tmp_path / "b1")]) == 0
    out = tmp_path / "b1"
    assert len((out / "P0_S0.alphas.tsv").read_text().splitlines()) == 1 + 2 + 2
    assert (out / "concordance.tsv").exists()
    assert (out / "de_proto0.tsv").exists() and (out / "ora_proto0.tsv").exists()
    assert main(args + ["--out", str(tmp_path / "b2")]) == 0
    assert same_tree(tmp_path / "b1", tmp_path / "b2")


def test_interpret_without_optional_inputs(workspace, tmp_path, capsys):
    ck = workspace / "run" / "fold0" / "checkpoint"
    assert main(["interpret", "--checkpoint", str(ck), "--data", str(workspace / "data"),
                 "--slide", "P1_S0", "--out", str(tmp_path / "plain")]) == 0
    assert "skipped" in capsys.readouterr().err
    assert not (tmp_path / "plain" / "concordance.tsv").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "protomil", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "interpret" in res.stdout
