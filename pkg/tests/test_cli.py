import os

import numpy as np
import pytest

from vexpert import config
from vexpert.backbone import read_checkpoint
from vexpert.cli import main
from vexpert.fileio import read_csv, read_pgm
from vexpert.runs import ablation_cells, dfm_tfs_grid, run_ablation, utilization_seed_variance

TINY = """
[model]
image_size = 8
patch_size = 4
dim = 8
heads = 2
mlp_ratio = 2
n_plain = 1
n_moe = 2
n_experts = 3
top_k = 2
router_hidden = 8

[teachers]
dims = 6, 6, 6

[distill]
steps = 6
batch_size = 2

[finetune]
steps = 4
batch_size = 4
n_dfm = 3

[routing]
k_min = 1

[task]
n_relevant = 2
specific_components = 3
n_eval = 16

[analysis]
pool_size = 120
n_components = 2

[run]
seeds = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.ini"
    cfg_path.write_text(TINY + f"out_dir = {root / 'runs'}\n")
    assert main(["distill", "--config", str(cfg_path)]) == 0
    return root, str(cfg_path), str(root / "runs" / "distill" / "seed0" / "model.ckpt")


def run(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_distill_writes_artifacts(workspace):
    root, _, ckpt = workspace
    out = root / "runs" / "distill" / "seed0"
    header, rows = read_csv(out / "metrics.csv")
    assert header == ["step", "lr", "loss", "distill", "mi", "cos_0", "cos_1", "cos_2"]
    assert [r[0] for r in rows] == [str(i) for i in range(6)]
    _, phases = read_csv(out / "eval.csv")
    assert [p[0] for p in phases] == ["initial", "final"]
    assert config.load(out / "config.ini").distill.steps == 6
    assert read_checkpoint(ckpt)


def test_rerun_is_bit_identical(workspace, tmp_path):
    _, cfg_path, _ = workspace
    outs = []
    for name in ("a", "b"):
        assert main(["distill", "--config", cfg_path, f"--run.out_dir={tmp_path / name}"]) == 0
        d = tmp_path / name / "distill" / "seed0"
        outs.append([(d / f).read_bytes() for f in ("metrics.csv", "model.ckpt", "eval.csv")])
    assert outs[0] == outs[1]


def test_seed_flag_overrides_config(workspace, tmp_path):
    _, cfg_path, _ = workspace
    assert main(["distill", "--config", cfg_path, "--seed", "7", "--distill.steps", "2",
                 "--run.out_dir", str(tmp_path)]) == 0
    cfg = config.load(tmp_path / "distill" / "seed7" / "config.ini")
    assert cfg.run.seed == 7 and cfg.distill.steps == 2
    _, rows = read_csv(tmp_path / "distill" / "seed7" / "metrics.csv")
    assert len(rows) == 2


def test_finetune_with_annealing_and_analysis(workspace, capsys):
    root, cfg_path, ckpt = workspace
    code, out, _ = run(["finetune", "--config", cfg_path, "--checkpoint", ckpt, "--routing.cta", "true",
                        "--analysis.enabled", "true"], capsys)
    assert code == 0 and "PER: success rate" in out
    d = root / "runs" / "finetune" / "PER+cta" / "seed0"
    header, rows = read_csv(d / "metrics.csv")
    assert header == ["step", "loss", "K", "expert_freq_0", "expert_freq_1", "expert_freq_2"]
    assert [r[2] for r in rows] == ["3", "2", "1", "1"]  # horizon defaults to half of 4 steps
    assert read_pgm(d / "mi_map.pgm").shape == (2, 2)
    assert read_pgm(d / "norm_map.pgm").shape == (2, 2)
    assert any(n.startswith("policy_head.") for n in read_checkpoint(d / "finetuned.ckpt"))

    code, out, _ = run(["analyze", "--checkpoint", str(d / "finetuned.ckpt")], capsys)
    assert code == 0
    a = root / "runs" / "analysis" / "PER+cta" / "seed0"
    np.testing.assert_array_equal(np.loadtxt(a / "mi_map.csv", delimiter=",", skiprows=1),
                                  np.loadtxt(d / "mi_map.csv", delimiter=",", skiprows=1))


def test_finetune_teacher_routing_reports_teachers(workspace, capsys):
    root, cfg_path, ckpt = workspace
    code, out, _ = run(["finetune", "--config", cfg_path, "--checkpoint", ckpt, "--routing.strategy", "ltr"],
                       capsys)
    assert code == 0 and "teacher selection per layer" in out
    header, _ = read_csv(root / "runs" / "finetune" / "LTR" / "seed0" / "metrics.csv")
    assert header[3:6] == ["teacher_freq_0", "teacher_freq_1", "teacher_freq_2"]


def test_ablate_cta(workspace, capsys):
    root, cfg_path, ckpt = workspace
    code, out, _ = run(["ablate", "--config", cfg_path, "--checkpoint", ckpt, "--kind", "cta"], capsys)
    assert code == 0
    header, rows = read_csv(root / "runs" / "ablation" / "cta.csv")
    assert [r[0] for r in rows] == ["PER", "PER+CTA"]
    assert {"success_mean", "success_std", "active_params_mean", "utilization_seed_variance"} <= set(header)
    assert all(r[header.index("seeds")] == "2" for r in rows)


def test_ablation_grids(workspace):
    _, cfg_path, _ = workspace
    cfg = config.load(cfg_path)
    assert [c[0] for c in ablation_cells(cfg, "routing-strategy", 3)] == \
        ["TS0", "TS1", "TS2", "FTR", "LTR", "PER", "PER+CTA"]
    assert [c[3] for c in ablation_cells(cfg, "topk", 3)] == [1, 2, 3]
    assert dfm_tfs_grid(6) == ((6, 0), (0, 2), (6, 1))


def test_dfm_tfs_ablation_runs(workspace, tmp_path):
    _, cfg_path, ckpt = workspace
    cfg = config.load(cfg_path).replace(**{"run.seeds": 1, "run.out_dir": str(tmp_path)})
    rows = run_ablation(cfg, "dfm-tfs", ckpt)
    assert [r["cell"] for r in rows] == ["DFM=3,TFS=0", "DFM=0,TFS=2", "DFM=3,TFS=1"]


def test_utilization_seed_variance():
    same = [np.full((2, 3), 1 / 3)] * 3
    assert utilization_seed_variance(same) == 0.0
    assert utilization_seed_variance([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])]) == 0.25


def test_inspect_checkpoint(workspace, capsys):
    _, _, ckpt = workspace
    code, out, _ = run(["inspect-checkpoint", ckpt], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].startswith("embed.") and "tensors" in lines[-1]


@pytest.mark.parametrize("args", [
    [],
    ["train"],
    ["finetune"],
    ["distill", "--distill.steps", "abc"],
    ["distill", "--model.width", "3"],
    ["distill", "--distill.steps"],
    ["distill", "stray"],
    ["distill", "--seed", "x"],
    ["ablate", "--checkpoint", "m.ckpt", "--kind", "depth"],
    ["inspect-checkpoint", "a", "b"],
    ["distill", "--dist", "3"],
])
def test_usage_errors_exit_2(args, capsys):
    code, _, err = run(args, capsys)
    assert code == 2 and "usage error" in err


def test_contract_errors_exit_1(workspace, tmp_path, capsys):
    _, cfg_path, _ = workspace
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE" * 4)
    code, _, err = run(["inspect-checkpoint", str(bad)], capsys)
    assert code == 1 and "offset 0" in err
    code, _, err = run(["finetune", "--config", cfg_path, "--checkpoint", str(tmp_path / "missing.ckpt")], capsys)
    assert code == 1
    conf = tmp_path / "bad.ini"
    conf.write_text("[model]\nwidth = 4\n")
    code, _, err = run(["distill", "--config", str(conf)], capsys)
    assert code == 1 and "model.width" in err
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("dim = 8", "dim = 16"))
    code, _, err = run(["finetune", "--config", str(other), "--checkpoint", workspace[2]], capsys)
    assert code == 1 and "does not match model" in err


def test_module_entry_point_runs():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "vexpert", "--help"], capture_output=True, text=True,
                         cwd=os.path.dirname(__file__))
    assert res.returncode == 0 and "inspect-checkpoint" in res.stdout
