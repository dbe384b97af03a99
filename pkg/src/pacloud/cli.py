"""Command-line pipeline: phantom -> simulate -> recon -> ubp -> eval.

Every command takes --config/--out plus its stage inputs, prints one JSON
record per training iteration on stdout, embeds the fully resolved
configuration in its output directory, and is byte-reproducible for a
fixed seed.  Exit codes: 0 ok, 1 runtime failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import sys
import numpy as np
from pathlib import Path

from .core import DynamicCloud, SensorArray, SignalSet, N_CHANNELS
from .deformation import CloudState, cloud_states_at
from .evaluation import GridSpec, MAP_AXES, eval_report, format_report, \
    map_project, voxelize
from .fileio import ConfigError, RunConfig, dump_resolved, read_cloud, \
    read_meta, read_tensor, write_cloud, write_meta, write_png16, write_tensor
from .geometry import build_phantom, simulate_dataset
from .reconstruction import dynamic_reconstruct, static_reconstruct, \
    ubp_reconstruct


def _static_cloud(state: CloudState) -> DynamicCloud:
    b = len(state)
    return DynamicCloud(state.p0_t, state.a0_t, state.mu_t,
                        np.zeros((b, 0)), np.zeros((b, 0)),
                        np.zeros((b, N_CHANNELS, 0)))


def _print_progress(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _load_signals(signals_dir) -> tuple[SignalSet, SensorArray, dict]:
    d = Path(signals_dir)
    meta = read_meta(d)
    data = read_tensor(d / "signals.pat")
    positions = read_tensor(d / "sensors.pat")
    # positions are f32-quantized on disk; the exact-radius invariant
    # applies at construction time, not to the stored contract
    array = SensorArray(positions, meta["sound_speed"], meta["sample_rate"],
                        meta["n_samples"], meta["t_start"])
    signals = SignalSet(data, np.asarray(meta["frame_times"], float))
    signals.validate_against(array)
    return signals, array, meta


def _grid_spec(meta_grid: dict) -> GridSpec:
    return GridSpec(np.asarray(meta_grid["origin"], float),
                    float(meta_grid["spacing"]),
                    tuple(meta_grid["dims"]))


def _grid_meta(spec: GridSpec) -> dict:
    return {"origin": list(spec.origin), "spacing": spec.spacing,
            "dims": list(spec.dims)}


def _input_path(args, config: RunConfig, attr: str, io_key: str) -> Path:
    """CLI flag wins; the config io section provides the fallback."""
    given = getattr(args, attr, None)
    if given is None:
        given = config.resolved["io"][io_key]
    if given is None:
        raise ConfigError(
            f"--{attr.replace('_', '-')} not given and io.{io_key} not set "
            f"in the config")
    return Path(given)


def cmd_phantom(config: RunConfig, out: Path, args) -> int:
    spec = config.phantom_spec()
    phantom = build_phantom(spec)
    dump_resolved(config, out)
    for k, (frame, grid) in enumerate(zip(phantom.frames, phantom.grids)):
        write_cloud(out / f"truth_frame_{k:03d}.ggb", _static_cloud(frame))
        write_tensor(out / f"truth_grid_{k:03d}.pat", grid.values)
    gspec = GridSpec.from_box(spec.region, spec.voxel_pitch)
    write_meta(out, {
        "kind": spec.kind,
        "n_frames": phantom.n_frames,
        "n_balls": phantom.n_balls,
        "frame_times": list(map(float, phantom.frame_times)),
        "max_a0": phantom.max_a0(),
        "grid": _grid_meta(gspec),
        "config_hash": config.hash,
    })
    return 0


def cmd_simulate(config: RunConfig, out: Path, args) -> int:
    pdir = _input_path(args, config, "phantom_dir", "phantom_dir")
    pmeta = read_meta(pdir)
    frames = []
    for k in range(pmeta["n_frames"]):
        c = read_cloud(pdir / f"truth_frame_{k:03d}.ggb")
        frames.append(CloudState(c.a0, c.p0, c.mu))
    array = config.sensor_array()
    noise_std = config.resolved["phantom"]["noise_std"]
    signals = simulate_dataset(frames, array, noise_std, seed=config.seed)
    dump_resolved(config, out)
    write_tensor(out / "signals.pat", signals.data)
    write_tensor(out / "sensors.pat", array.positions)
    write_meta(out, {
        "m": array.n_sensors,
        "radius": array.radius,
        "sound_speed": array.sound_speed,
        "sample_rate": array.sample_rate,
        "n_samples": array.n_samples,
        "t_start": array.t_start,
        "frame_times": list(map(float, signals.frame_times)),
        "noise_std": noise_std,
        "config_hash": config.hash,
    })
    return 0


def cmd_recon_static(config: RunConfig, out: Path, args) -> int:
    signals, array, _ = _load_signals(
        _input_path(args, config, "signals_dir", "signals_dir"))
    rc = config.recon_config()
    if rc.reference_frame < 0:
        rng = np.random.default_rng(config.seed)
        ref = int(rng.integers(signals.n_frames))
    else:
        ref = rc.reference_frame
    if ref >= signals.n_frames:
        raise ConfigError(
            f"reference frame {ref} out of range (K = {signals.n_frames})")
    balls = static_reconstruct(signals.frame(ref), array, rc, config.region(),
                               progress=_print_progress)
    dump_resolved(config, out)
    write_cloud(out / "static_cloud.ggb", balls)
    write_meta(out, {"reference_frame": ref, "n_balls": len(balls),
                     "config_hash": config.hash})
    return 0


def cmd_recon_4d(config: RunConfig, out: Path, args) -> int:
    signals, array, _ = _load_signals(
        _input_path(args, config, "signals_dir", "signals_dir"))
    rc = config.recon_config()
    if args.init_cloud is not None:
        init_path = Path(args.init_cloud)
    else:
        init_path = _input_path(args, config, "init_cloud",
                                "static_dir") / "static_cloud.ggb"
    init = read_cloud(init_path)
    cloud = dynamic_reconstruct(signals, array, init.balls, rc,
                                roi=config.region(),
                                progress=_print_progress)
    dump_resolved(config, out)
    write_cloud(out / "cloud_4d.ggb", cloud)
    write_meta(out, {"n_balls": len(cloud), "n_basis": cloud.n_basis,
                     "coord_mode": rc.coord_mode, "config_hash": config.hash})
    return 0


def cmd_ubp(config: RunConfig, out: Path, args) -> int:
    signals, array, _ = _load_signals(
        _input_path(args, config, "signals_dir", "signals_dir"))
    gspec = GridSpec.from_box(config.region(),
                              config.resolved["eval"]["voxel_pitch"])
    if args.frame == "all":
        frames = range(signals.n_frames)
    else:
        k = int(args.frame)
        if not 0 <= k < signals.n_frames:
            raise ConfigError(
                f"frame {k} out of range (K = {signals.n_frames})")
        frames = [k]
    dump_resolved(config, out)
    for k in frames:
        grid = ubp_reconstruct(signals.frame(k), array, gspec)
        write_tensor(out / f"ubp_grid_{k:03d}.pat", grid.values)
    write_meta(out, {"frames": [int(k) for k in frames],
                     "grid": _grid_meta(gspec), "config_hash": config.hash})
    return 0


def cmd_eval(config: RunConfig, out: Path, args) -> int:
    from .core import VoxelGrid
    pdir = _input_path(args, config, "phantom_dir", "phantom_dir")
    pmeta = read_meta(pdir)
    gspec = _grid_spec(pmeta["grid"])
    ftimes = pmeta["frame_times"]
    truth = [VoxelGrid(gspec.origin, gspec.spacing, gspec.dims,
                       read_tensor(pdir / f"truth_grid_{k:03d}.pat"))
             for k in range(pmeta["n_frames"])]

    rc = config.recon_config()
    if args.cloud is not None:
        cloud_path = Path(args.cloud)
    else:
        cloud_path = _input_path(args, config, "cloud",
                                 "dynamic_dir") / "cloud_4d.ggb"
    cloud = read_cloud(cloud_path)
    recon = []
    for t in ftimes:
        state = cloud_states_at(cloud, float(t), rc.coord_mode,
                                a0_floor=rc.a0_floor)
        recon.append(voxelize(state, gspec))

    ubp = None
    ubp_dir = args.ubp_dir if args.ubp_dir is not None \
        else config.resolved["io"]["ubp_dir"]
    if ubp_dir is not None:
        udir = Path(ubp_dir)
        umeta = read_meta(udir)
        if umeta["grid"] != _grid_meta(gspec):
            raise ConfigError("ubp grids do not match the phantom grid")
        ubp = [VoxelGrid(gspec.origin, gspec.spacing, gspec.dims,
                         read_tensor(udir / f"ubp_grid_{k:03d}.pat"))
               for k in range(pmeta["n_frames"])]

    records = eval_report(recon, truth, ubp)
    dump_resolved(config, out)
    with open(out / "ssim_table.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out / "ssim_table.txt", "w") as f:
        f.write(format_report(records) + "\n")

    grids_by_method = {"truth": truth, "4d": recon}
    if ubp is not None:
        grids_by_method["ubp"] = ubp
    write_images = config.resolved["eval"]["write_png"]
    for method, grids in grids_by_method.items():
        maps = {ax: [map_project(g, ax) for g in grids] for ax in MAP_AXES}
        peak = max(float(np.max(m.values))
                   for ms in maps.values() for m in ms)
        for ax, ms in maps.items():
            for k, m in enumerate(ms):
                stem = f"map_{method}_{k:03d}_{ax.lower()}"
                write_tensor(out / f"{stem}.pat", m.values)
                if write_images:
                    write_png16(out / f"{stem}.png", m.values, peak=peak)
    print(format_report(records))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for the compute kernels")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, bit-reproducible execution")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacloud",
        description="dynamic 3D photoacoustic reconstruction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a ground-truth scene")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="forward-simulate sensor data")
    _add_common(p)
    p.add_argument("--phantom-dir", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("recon-static",
                       help="fit a static cloud to the reference frame")
    _add_common(p)
    p.add_argument("--signals-dir", default=None)
    p.set_defaults(func=cmd_recon_static)

    p = sub.add_parser("recon-4d",
                       help="fit deformation fields to all frames")
    _add_common(p)
    p.add_argument("--signals-dir", default=None)
    p.add_argument("--init-cloud", default=None)
    p.set_defaults(func=cmd_recon_4d)

    p = sub.add_parser("ubp", help="universal back-projection baseline")
    _add_common(p)
    p.add_argument("--signals-dir", default=None)
    p.add_argument("--frame", default="all",
                   help="frame index to reconstruct, or 'all'")
    p.set_defaults(func=cmd_ubp)

    p = sub.add_parser("eval", help="SSIM tables and MAP images")
    _add_common(p)
    p.add_argument("--cloud", default=None)
    p.add_argument("--phantom-dir", default=None)
    p.add_argument("--ubp-dir", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def _configure_threads(args) -> None:
    import numba
    n = 1 if args.deterministic else args.threads
    if n is not None:
        numba.set_num_threads(max(1, min(int(n),
                                         numba.config.NUMBA_NUM_THREADS)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        _configure_threads(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(config, out, args)
    except (ConfigError, FileNotFoundError, NotADirectoryError,
            ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures (non-finite loss, pruning, ...)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
