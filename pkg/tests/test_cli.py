import hashlib
import json
import time

import numpy as np
import pytest
import yaml

from ps2f import io as pio
from ps2f.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, bundled_config, format_table, main
from ps2f.config import load_config

FAST = ["--set", "mask.pupil_samples=128", "--set", "sensor.psf_size=32", "--set", "depth.planes=16",
        "--set", "scene.dims=[32,32,16]", "--set", "crlb.patch_size=32"]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    code = main(["pipeline", "--config", "smoke", "--outdir", str(out / "a"), "--quiet", "--label", "vessel"])
    elapsed = time.perf_counter() - t0
    return out, code, elapsed


def test_smoke_pipeline_completes_quickly(smoke_run):
    out, code, elapsed = smoke_run
    assert code == EXIT_OK
    assert elapsed < 300
    for name in ("mask", "psf", "scene", "measurement", "recon", "depth", "truth_depth"):
        assert (out / "a" / f"{name}.ps2f").is_file()
    assert (out / "a" / "psf_gallery.png").stat().st_size > 0
    rep = json.loads((out / "a" / "report.json").read_text())
    assert rep["label"] == "vessel" and rep["psf"] == "ps2f"
    assert 0 < rep["ms_ssim"] <= 1 and rep["rmse"] >= rep["mae"] > 0


def test_smoke_manifest(smoke_run):
    out, _, _ = smoke_run
    man = json.loads((out / "a" / "manifest.json").read_text())
    cfg = load_config(bundled_config("smoke"))
    assert man["config_hash"] == cfg.config_hash()
    assert man["command"] == "pipeline"
    for name, entry in man["outputs"].items():
        assert hashlib.sha256(open(entry["path"], "rb").read()).hexdigest() == entry["sha256"], name


def test_smoke_truth_depth_matches_brute_force(smoke_run):
    out, _, _ = smoke_run
    scene = pio.load_volume(out / "a" / "scene.ps2f")
    truth = pio.load_depth_map(out / "a" / "truth_depth.ps2f")
    v, z = scene.values, scene.z_levels
    zsum = v.sum(axis=0)
    thr = 0.02 * zsum.max()
    for r in range(v.shape[1]):
        for c in range(v.shape[2]):
            if zsum[r, c] <= 0 or zsum[r, c] < thr:
                assert not truth.valid[r, c]
                continue
            col = v[:, r, c]
            best = [k for k in range(len(z)) if col[k] == col.max()]
            k = min(best, key=lambda i: (abs(z[i]), z[i]))
            assert truth.valid[r, c] and truth.depth[r, c] == np.float32(z[k])


def test_smoke_rerun_is_byte_identical(smoke_run):
    out, _, _ = smoke_run
    assert main(["pipeline", "--config", "smoke", "--outdir", str(out / "b"), "--quiet", "--no-figures",
                 "--label", "vessel"]) == EXIT_OK
    for name in ("mask", "psf", "scene", "measurement", "recon", "depth", "truth_depth"):
        assert (out / "a" / f"{name}.ps2f").read_bytes() == (out / "b" / f"{name}.ps2f").read_bytes(), name


def test_crlb_map_small_grid(tmp_path, capsys):
    p = tmp_path / "crlb.ps2f"
    t0 = time.perf_counter()
    code = main(["crlb-map", *FAST, "--set", "crlb.z_points=2", "--set", "crlb.phi_points=2",
                 "--out", str(p), "--figure", str(tmp_path / "crlb.png")])
    assert code == EXIT_OK
    assert time.perf_counter() - t0 < 60
    cm = pio.load_crlb_map(p)
    assert cm.sqrt_crlb_z.shape == (2, 2)
    assert np.isfinite(cm.sqrt_crlb_z).sum() == 4
    assert (tmp_path / "crlb.png").is_file()
    man = json.loads((tmp_path / "crlb.ps2f.manifest.json").read_text())
    fast = dict(s.split("=") for s in FAST[1::2])
    cfg = load_config(overrides={**{k: yaml.safe_load(v) for k, v in fast.items()},
                                 "crlb.z_points": 2, "crlb.phi_points": 2})
    assert man["config"] == json.loads(json.dumps(cfg.model_dump(mode="json")))
    assert "sqrt" not in capsys.readouterr().err


def test_stagewise_commands(tmp_path):
    d = tmp_path
    assert main(["design-mask", *FAST, "-o", str(d / "mask.ps2f")]) == EXIT_OK
    assert main(["render-psf", *FAST, "--mask", str(d / "mask.ps2f"), "-o", str(d / "psf.ps2f")]) == EXIT_OK
    assert main(["simulate", *FAST, "--seed", "3", "--stack", str(d / "psf.ps2f"), "--scene-out",
                 str(d / "scene.ps2f"), "-o", str(d / "meas.ps2f")]) == EXIT_OK
    assert main(["reconstruct", *FAST, "--set", "recon.iterations=20", "--stack", str(d / "psf.ps2f"),
                 "-m", str(d / "meas.ps2f"), "--like", str(d / "scene.ps2f"), "-o", str(d / "rec.ps2f"),
                 "-q"]) == EXIT_OK
    assert main(["evaluate", *FAST, "--recon", str(d / "rec.ps2f"), "--truth", str(d / "scene.ps2f"),
                 "-o", str(d / "rep.json"), "--depth-out", str(d / "depth.ps2f"), "--label", "tiny"]) == EXIT_OK
    rep = json.loads((d / "rep.json").read_text())
    assert rep["label"] == "tiny"
    assert pio.load_depth_map(d / "depth.ps2f").depth.shape == (32, 32)
    meas = pio.load_measurement(d / "meas.ps2f")
    assert meas.noise_meta["seed"] == 3
    assert main(["table", str(d / "rep.json"), "-o", str(d / "table.txt")]) == EXIT_OK
    assert "tiny" in (d / "table.txt").read_text()


def test_simulate_seed_changes_noise(tmp_path):
    args = ["simulate", *FAST, "--set", "mask.partition_axis=0.5", "--set", "mask.gs_iterations=2"]
    main([*args, "--seed", "1", "-o", str(tmp_path / "a.ps2f")])
    main([*args, "--seed", "1", "-o", str(tmp_path / "b.ps2f")])
    main([*args, "--seed", "2", "-o", str(tmp_path / "c.ps2f")])
    a, b, c = ((tmp_path / f"{k}.ps2f").read_bytes() for k in "abc")
    assert a == b and a != c


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("optics:\n  f1: 50\n")
    assert main(["design-mask", "--config", str(bad), "-o", str(tmp_path / "m.ps2f")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert main(["design-mask", "--set", "nope.key=1", "-o", str(tmp_path / "m.ps2f")]) == EXIT_CONFIG
    assert main(["design-mask", "--set", "novalue", "-o", str(tmp_path / "m.ps2f")]) == EXIT_CONFIG


def test_io_error_exit_code(tmp_path, capsys):
    code = main(["reconstruct", "--stack", str(tmp_path / "missing.ps2f"), "-m", str(tmp_path / "x.ps2f"),
                 "-o", str(tmp_path / "r.ps2f")])
    assert code == EXIT_IO
    assert "I/O error" in capsys.readouterr().err
    assert main(["table", str(tmp_path / "none.json")]) == EXIT_IO


def test_import_vascusynth_command(tmp_path, capsys):
    src = np.zeros((8, 8, 8))
    src[2:6, 3:5, 3:5] = 1
    np.save(tmp_path / "tree.npy", src)
    out = tmp_path / "vol.ps2f"
    assert main(["import-vascusynth", str(tmp_path / "tree.npy"), "--dims", "16", "16", "16",
                 "--extent", "0.11mm", "0.11mm", "2mm", "-o", str(out)]) == EXIT_OK
    v = pio.load_volume(out)
    assert v.values.shape == (16, 16, 16)
    assert v.voxel_pitch[0] == pytest.approx(6.875e-6)
    assert "voxel pitch" in capsys.readouterr().out


def test_format_table():
    text = format_table([
        {"label": "b", "psf": "ps2f", "mae": 1e-4, "rmse": 2e-4, "ms_ssim": 0.9},
        {"label": "a", "psf": "dhpsf", "mae": 3e-4, "rmse": 5e-4, "ms_ssim": 0.7},
    ])
    lines = text.splitlines()
    assert "MAE (mm)" in lines[0]
    assert lines[2].startswith("a") and "0.300" in lines[2] and "0.500" in lines[2]
    assert lines[3].startswith("b") and "0.900" in lines[3]
