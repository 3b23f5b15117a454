import json
import sys

import numpy as np
import pytest

from aberray import images as imageio
from aberray.cli import run
from aberray.psf import read_psf_dataset


def test_no_arguments_usage_exit_2(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_subcommand_exit_2(capsys):
    assert run(["self-destruct"]) == 2


def test_runtime_error_single_line_stderr(tmp_path, capsys):
    code = run(["trace", "--lens", str(tmp_path / "missing.lens"),
                "--point", "0,0,1.5", "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("aberray-error: ")
    payload = json.loads(err[0].split("aberray-error: ", 1)[1])
    assert payload["subcommand"] == "trace"


def test_trace_writes_csv_and_manifest(tmp_path):
    out = tmp_path / "run"
    code = run(["trace", "--lens", "fifty_f2.8", "--point", "0,0,1.5",
                "--focus", "1.5", "--spp", "128", "--seed", "5",
                "--out", str(out)])
    assert code == 0
    hits = np.loadtxt(out / "spot.csv", delimiter=",", skiprows=1)
    assert hits.shape[1] == 2
    manifest = json.loads((out / "manifest-trace.json").read_text())
    assert manifest["subcommand"] == "trace"
    assert manifest["seed"] == 5
    assert manifest["config"]["spp"] == 128
    assert any(p.endswith("spot.csv") for p in manifest["outputs"])


def test_psf_outputs_dataset_and_spot(tmp_path):
    out = tmp_path / "psf"
    code = run(["psf", "--lens", "canon_rf50_f1.8", "--focus", "1.5",
                "--point", "0,0,1.5", "--spp", "512", "--pitch", "0.0375",
                "--out", str(out)])
    assert code == 0
    kernels, queries = read_psf_dataset(out / "psf.psfg")
    assert kernels.shape == (1, 11, 11)
    assert kernels[0].sum() == pytest.approx(1.0, abs=1e-5)
    assert queries.shape == (1, 4)


def test_fit_and_eval_surrogate_roundtrip(tmp_path, capsys):
    model_path = tmp_path / "tiny.mlpw"
    code = run(["fit-surrogate", "--lens", "fifty_f2.8", "--iters", "5",
                "--batch", "16", "--spp", "64", "--seed", "3",
                "--out", str(model_path)])
    assert code == 0
    assert model_path.exists()
    assert model_path.with_suffix(".loss.csv").exists()
    manifest = json.loads((tmp_path / "manifest-fit-surrogate.json").read_text())
    assert manifest["config"]["iters"] == 5


def test_render_estimate_eval_pipeline(tmp_path, capsys):
    rng = np.random.default_rng(0)
    rgb_path = tmp_path / "scene.png"
    depth_path = tmp_path / "scene_depth.pfm"
    imageio.save_rgb(rgb_path, rng.random((24, 32, 3)) * 0.8)
    depth = np.linspace(0.4, 1.2, 24 * 32).reshape(24, 32)
    imageio.write_pfm(depth_path, depth)

    stack_dir = tmp_path / "stack"
    assert run(["render-stack", "--lens", "fifty_f2.8", "--rgb", str(rgb_path),
                "--depth", str(depth_path), "--provider", "gaussian",
                "--stack-size", "4", "--seed", "1", "--out", str(stack_dir)]) == 0
    manifest = json.loads((stack_dir / "stack.json").read_text())
    assert len(manifest["frames"]) == 4

    depth_out = tmp_path / "depth_est.pfm"
    assert run(["estimate-depth", "--stack", str(stack_dir / "stack.json"),
                "--out", str(depth_out)]) == 0
    est = imageio.read_pfm(depth_out)
    assert est.shape == (24, 32)

    assert run(["eval", "--pred", str(depth_out), "--gt", str(depth_path),
                "--csv", str(tmp_path / "metrics.csv")]) == 0
    out = capsys.readouterr().out
    assert "mae" in out and "delta1" in out
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",") == ["mae", "mse", "rmse", "abs_rel", "sqr_rel",
                                 "delta1", "delta2", "delta3"]


def test_error_map_command(tmp_path, capsys):
    rng = np.random.default_rng(1)
    preds, gts = [], []
    for i in range(2):
        p = tmp_path / f"pred{i}.pfm"
        g = tmp_path / f"gt{i}.pfm"
        imageio.write_pfm(p, rng.uniform(1.0, 2.0, (20, 30)))
        imageio.write_pfm(g, rng.uniform(1.0, 2.0, (20, 30)))
        preds.append(p)
        gts.append(g)
    out = tmp_path / "emap"
    args = ["error-map", "--out", str(out)]
    for p, g in zip(preds, gts):
        args += ["--pred", str(p), "--gt", str(g)]
    assert run(args) == 0
    assert (out / "error_map.pfm").exists()
    assert (out / "error_map.png").exists()


def test_threads_flag_reproducibility(tmp_path):
    """--threads 1 twice is bit-identical; --threads 2 matches too (chunked
    writes land in disjoint slices)."""
    outs = []
    for threads, name in [(1, "a"), (1, "b"), (2, "c")]:
        model_path = tmp_path / f"{name}.mlpw"
        assert run(["fit-surrogate", "--lens", "fifty_f2.8", "--iters", "3",
                    "--batch", "8", "--spp", "32", "--seed", "7",
                    "--threads", str(threads), "--out", str(model_path)]) == 0
        outs.append(model_path.read_bytes())
    assert outs[0] == outs[1]
    assert outs[0] == outs[2]


def test_console_entrypoint_runs():
    import subprocess

    proc = subprocess.run([sys.executable, "-m", "aberray.cli"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
