"""Command-line entry point: ``ps2f <subcommand> --config cfg.yaml ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure. Every run writes a JSON manifest (config hash, versions, wall
time, output checksums) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import scipy
import yaml
from pydantic import ValidationError

from . import __version__
from . import io as pio
from . import pipeline as stages
from .config import ConfigError, PipelineConfig, load_config, parse_length
from .evaluate import DepthMap, EvaluationError
from .forward import ForwardModelError, Volume3D
from .optics import OpticsError
from .recon import ReconError, ReconResult

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def bundled_config(name: str) -> Path | None:
    """Path of a config shipped with the package (e.g. ``smoke``), if any."""
    p = resources.files("ps2f") / "configs" / f"{name}.yaml"
    return Path(str(p)) if p.is_file() else None


def _resolve_config(args) -> PipelineConfig:
    path = args.config
    if path is not None and not Path(path).is_file():
        path = bundled_config(path) or path
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    if getattr(args, "seed", None) is not None:
        overrides["noise.seed"] = args.seed
        overrides["scene.seed"] = args.seed
    return load_config(path, overrides)


def _versions() -> dict:
    return {
        "ps2f": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, cfg: PipelineConfig, outputs: dict, t0: float, argv=None) -> None:
    doc = {
        "command": command,
        "argv": list(argv or []),
        "config_hash": cfg.config_hash(),
        "config": cfg.model_dump(mode="json"),
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - t0,
        "outputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in outputs.items() if Path(p).exists()},
    }
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise pio.ContainerError(f"cannot write manifest {path}: {e}") from e


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _stamp(cfg: PipelineConfig, **extra) -> dict:
    return {"config_hash": cfg.config_hash(), **extra}


def _loss_printer(every: int = 100, quiet: bool = False):
    def cb(it, loss):
        if not quiet and (it + 1) % every == 0:
            print(f"iter {it + 1:6d}  loss {loss:.6e}", flush=True)
    return cb


def _mask_and_angle(cfg: PipelineConfig, mask_path):
    if mask_path is None:
        return stages.design_mask(cfg)
    mask = pio.load_phase_mask(mask_path)
    angle = pio.read_container(mask_path).attrs.get("partition_axis")
    if angle is None:
        angle = stages.partition_angle(cfg, mask)
    return mask, float(angle)


def _stack(cfg: PipelineConfig, args, z=None):
    if getattr(args, "stack", None):
        return pio.load_psf_stack(args.stack)
    mask, angle = _mask_and_angle(cfg, getattr(args, "mask", None))
    return stages.render_stack(cfg, mask, angle, z=z)


def _write_json(path, doc: dict) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise pio.ContainerError(f"cannot write {path}: {e}") from e


# -- subcommands ------------------------------------------------------------

def cmd_design_mask(args, cfg, t0):
    mask, angle = stages.design_mask(cfg)
    pio.save_phase_mask(mask, args.out, _stamp(cfg, partition_axis=angle))
    print(f"mask {mask.grid.shape[1]}x{mask.grid.shape[0]}  partition axis {np.degrees(angle):.1f} deg")
    return {"mask": args.out}


def cmd_render_psf(args, cfg, t0):
    if args.psf:
        cfg = cfg.model_copy(update={"imaging": cfg.imaging.model_copy(update={"psf": args.psf})})
    mask, angle = _mask_and_angle(cfg, args.mask)
    stack = stages.render_stack(cfg, mask, angle)
    pio.save_psf_stack(stack, args.out, _stamp(cfg, partition_axis=angle))
    outs = {"stack": args.out}
    if args.figure:
        from .figures import psf_gallery

        psf_gallery(stack, args.figure)
        outs["figure"] = args.figure
    print(f"stack channels={','.join(stack.channels)} planes={len(stack.z_samples)} size={stack.shape}")
    return outs


def cmd_crlb_map(args, cfg, t0):
    stack = _stack(cfg, args)
    cm = stages.crlb(cfg, stack)
    pio.save_crlb_map(cm, args.out, _stamp(cfg))
    outs = {"crlb": args.out}
    if args.figure:
        from .figures import crlb_heatmap

        crlb_heatmap(cm, args.figure)
        outs["figure"] = args.figure
    print(" ".join(f"{k}={v:.6g}" for k, v in cm.stats.items()))
    return outs


def _scene(cfg, path):
    return pio.load_volume(path) if path else stages.make_scene(cfg)


def cmd_simulate(args, cfg, t0):
    scene = _scene(cfg, args.scene)
    stack = _stack(cfg, args)
    meas = stages.simulate(cfg, scene, stack)
    pio.save_measurement(meas, args.out, _stamp(cfg, exposure=cfg.imaging.exposure))
    outs = {"measurement": args.out}
    if args.scene_out:
        pio.save_volume(scene, args.scene_out, _stamp(cfg))
        outs["scene"] = args.scene_out
    print(f"measurement channels={','.join(meas.channels)} shape={meas.shape} photons={meas.images.sum():.6g}")
    return outs


def cmd_reconstruct(args, cfg, t0):
    stack = pio.load_psf_stack(args.stack)
    meas = pio.load_measurement(args.measurement)
    like = pio.load_volume(args.like) if args.like else None
    res = stages.reconstruct(cfg, meas, stack, like, _loss_printer(quiet=args.quiet))
    pio.save_recon_result(res, args.out, _stamp(cfg))
    print(f"final loss {res.loss_trace[-1]:.6e}  converged={res.converged}")
    return {"recon": args.out}


def _load_recon_volume(path) -> Volume3D:
    obj = pio.load_any(path)
    if isinstance(obj, ReconResult):
        return obj.volume
    if isinstance(obj, Volume3D):
        return obj
    raise pio.ContainerError(f"{path} holds neither a reconstruction nor a volume")


def _load_truth(path):
    obj = pio.load_any(path)
    if isinstance(obj, (Volume3D, DepthMap)):
        return obj
    if isinstance(obj, ReconResult):
        return obj.volume
    raise pio.ContainerError(f"{path} holds neither a volume nor a depth map")


def _report_doc(cfg, rep, label: str | None = None) -> dict:
    return {
        **rep.as_dict(),
        "psf": cfg.imaging.psf,
        "label": label or "",
        "threshold": cfg.evaluate.threshold,
        "ms_ssim_on": "depth maps normalized over the shared z range; pred-invalid pixels take truth values",
        "config_hash": cfg.config_hash(),
    }


def cmd_evaluate(args, cfg, t0):
    vol = _load_recon_volume(args.recon)
    pred, rep = stages.evaluate(cfg, vol, _load_truth(args.truth))
    _write_json(args.out, _report_doc(cfg, rep, args.label))
    outs = {"report": args.out}
    if args.depth_out:
        pio.save_depth_map(pred, args.depth_out, _stamp(cfg))
        outs["depth"] = args.depth_out
    if args.figure:
        from .figures import depth_map_figure

        depth_map_figure(pred, args.figure)
        outs["figure"] = args.figure
    print(rep.to_text())
    return outs


def run_pipeline(cfg: PipelineConfig, outdir, figures: bool = True, quiet: bool = False, label: str = "") -> dict:
    """Every stage in order; returns output paths and the score report."""
    from .evaluate import mip_depth

    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise pio.ContainerError(f"cannot create {out}: {e}") from e
    stamp = _stamp(cfg)
    paths = {k: out / f"{k}.ps2f" for k in ("mask", "psf", "scene", "measurement", "recon", "depth", "truth_depth")}
    mask, angle = stages.design_mask(cfg)
    pio.save_phase_mask(mask, paths["mask"], {**stamp, "partition_axis": angle})
    scene = stages.make_scene(cfg)
    pio.save_volume(scene, paths["scene"], stamp)
    z = scene.z_levels if cfg.scene.source in ("file", "vascusynth") else None
    stack = stages.render_stack(cfg, mask, angle, z=z)
    pio.save_psf_stack(stack, paths["psf"], {**stamp, "partition_axis": angle})
    meas = stages.simulate(cfg, scene, stack)
    pio.save_measurement(meas, paths["measurement"], stamp)
    res = stages.reconstruct(cfg, meas, stack, like=scene, callback=_loss_printer(quiet=quiet))
    pio.save_recon_result(res, paths["recon"], stamp)
    truth = mip_depth(scene, cfg.evaluate.threshold)
    pred, rep = stages.evaluate(cfg, res.volume, truth)
    pio.save_depth_map(pred, paths["depth"], stamp)
    pio.save_depth_map(truth, paths["truth_depth"], stamp)
    paths["report"] = out / "report.json"
    _write_json(paths["report"], _report_doc(cfg, rep, label))
    if figures:
        from .figures import depth_map_figure, psf_gallery

        paths["psf_gallery"] = out / "psf_gallery.png"
        paths["depth_figure"] = out / "depth.png"
        psf_gallery(stack, paths["psf_gallery"])
        depth_map_figure(pred, paths["depth_figure"], truth)
    return {"paths": paths, "report": rep, "recon": res}


def cmd_pipeline(args, cfg, t0):
    result = run_pipeline(cfg, args.outdir, figures=not args.no_figures, quiet=args.quiet, label=args.label)
    print(result["report"].to_text())
    return {k: str(v) for k, v in result["paths"].items()}


def cmd_import_vascusynth(args, cfg, t0):
    try:
        extent = tuple(parse_length(v) for v in args.extent) if args.extent else pio.DEFAULT_EXTENT
    except ValueError as e:
        raise ConfigError(f"--extent: {e}") from e
    src_dims = tuple(args.source_dims) if args.source_dims else None
    vol = pio.import_vascusynth(args.source, tuple(args.dims), extent, dims=src_dims)
    pio.save_volume(vol, args.out, _stamp(cfg))
    px, py, pz = (p * 1e6 for p in vol.voxel_pitch)
    print(f"volume {vol.dims}  voxel pitch {px:.4g} x {py:.4g} x {pz:.4g} um")
    return {"volume": args.out}


TABLE_COLUMNS = (("mae", "MAE (mm)"), ("rmse", "RMSE (mm)"), ("ms_ssim", "MS-SSIM"))


def format_table(reports: list[dict]) -> str:
    """Rows of label x PSF with MAE/RMSE in mm and MS-SSIM."""
    head = f"{'scene':<16} {'PSF':<6} " + " ".join(f"{t:>10}" for _, t in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for r in sorted(reports, key=lambda d: (str(d.get("label", "")), str(d.get("psf", "")))):
        vals = [r[k] * 1e3 if k in ("mae", "rmse") else r[k] for k, _ in TABLE_COLUMNS]
        lines.append(f"{str(r.get('label', '')):<16} {str(r.get('psf', '')):<6} "
                     + " ".join(f"{v:>10.3f}" for v in vals))
    return "\n".join(lines)


def cmd_table(args, cfg, t0):
    reports = []
    for p in args.reports:
        try:
            reports.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except OSError as e:
            raise pio.ContainerError(f"cannot read report {p}: {e}") from e
        except json.JSONDecodeError as e:
            raise pio.ContainerError(f"{p} is not a JSON report: {e}") from e
    text = format_table(reports)
    print(text)
    if args.out:
        try:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        except OSError as e:
            raise pio.ContainerError(f"cannot write {args.out}: {e}") from e
        return {"table": args.out}
    return {}


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="pipeline config (YAML) or a bundled name such as 'smoke'")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set depth.planes=32 (repeatable)")
    common.add_argument("--quiet", "-q", action="store_true", help="suppress progress lines")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, help="seed for scene generation and noise (overrides the config)")

    p = argparse.ArgumentParser(prog="ps2f", description="Polarized spiral PSF simulation and reconstruction")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("design-mask", parents=[common], help="design the rotating-PSF phase mask")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_design_mask)

    s = sub.add_parser("render-psf", parents=[common], help="render a PSF stack over the depth grid")
    s.add_argument("--mask", help="mask container (designed from the config when omitted)")
    s.add_argument("--psf", choices=("ps2f", "dhpsf"), help="override imaging.psf")
    s.add_argument("--out", "-o", required=True)
    s.add_argument("--figure", help="PNG gallery of the stack")
    s.set_defaults(func=cmd_render_psf)

    s = sub.add_parser("crlb-map", parents=[common], help="line CRLB over a (z, phi) grid")
    s.add_argument("--stack", help="PSF stack container (rendered from the config when omitted)")
    s.add_argument("--mask", help="mask container used when rendering")
    s.add_argument("--out", "-o", required=True)
    s.add_argument("--figure", help="PNG heat map of log10 sqrt CRLB_z")
    s.set_defaults(func=cmd_crlb_map)

    s = sub.add_parser("simulate", parents=[common, seeded], help="image a scene with noise")
    s.add_argument("--stack", help="PSF stack container (rendered from the config when omitted)")
    s.add_argument("--mask", help="mask container used when rendering")
    s.add_argument("--scene", help="Volume3D container (generated from the config when omitted)")
    s.add_argument("--scene-out", help="also save the scene used")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("reconstruct", parents=[common, seeded], help="regularized 3D reconstruction")
    s.add_argument("--stack", required=True)
    s.add_argument("--measurement", "-m", required=True)
    s.add_argument("--like", help="Volume3D container fixing the output geometry")
    s.add_argument("--out", "-o", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("evaluate", parents=[common], help="score the MIP depth map against ground truth")
    s.add_argument("--recon", required=True, help="ReconResult or Volume3D container")
    s.add_argument("--truth", required=True, help="Volume3D or DepthMap container")
    s.add_argument("--out", "-o", required=True, help="JSON score report")
    s.add_argument("--depth-out", help="save the estimated depth map")
    s.add_argument("--figure", help="PNG of the depth map")
    s.add_argument("--label", default="", help="scene label recorded in the report")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("pipeline", parents=[common, seeded], help="run every stage end to end")
    s.add_argument("--outdir", "-o", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.add_argument("--label", default="", help="scene label recorded in the report")
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("import-vascusynth", parents=[common], help="resample a VascuSynth voxel grid")
    s.add_argument("source")
    s.add_argument("--out", "-o", required=True)
    s.add_argument("--dims", type=int, nargs=3, default=(256, 256, 256), metavar=("NX", "NY", "NZ"))
    s.add_argument("--extent", nargs=3, metavar=("X", "Y", "Z"), help="physical extent with units, e.g. 1.76mm")
    s.add_argument("--source-dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"),
                   help="grid size of a headerless raw source")
    s.set_defaults(func=cmd_import_vascusynth)

    s = sub.add_parser("table", parents=[common], help="tabulate JSON score reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out", "-o", help="also write the table to this file")
    s.set_defaults(func=cmd_table)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = _resolve_config(args)
        outputs = args.func(args, cfg, t0)
        if args.command == "pipeline":
            mpath = Path(args.outdir) / "manifest.json"
        elif getattr(args, "out", None):
            mpath = _manifest_path(args.out)
        else:
            mpath = None
        if mpath is not None:
            write_manifest(mpath, args.command, cfg, outputs, t0, argv)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ReconError, OpticsError, ForwardModelError, EvaluationError, np.linalg.LinAlgError,
            FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
