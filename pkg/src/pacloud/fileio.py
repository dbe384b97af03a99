"""Binary containers and JSON run configuration.

Two minimal little-endian formats keep every artifact readable from any
language without extra dependencies:

* tensor files ("PAT1"): magic, version u32, dtype code u32 (1 = f32),
  rank u32, dims as u64 list, then the row-major f32 payload;
* cloud files ("GGB1"): magic, version u32, ball count u64, basis count
  u32, a length-prefixed channel-order descriptor string, then per-ball
  records (p0, a0, mu[3], theta[N], sigma[N], omega[5][N]) as f32.

Readers validate magic, version, dtype and payload length and reject
mismatches.  Floats are stored as f32, so write -> read -> write is
byte-stable and read values re-serialize bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
import numpy as np
from dataclasses import dataclass
from pathlib import Path

from .core import Box, DynamicCloud, ReconConfig, SensorArray, N_CHANNELS
from .geometry import PhantomSpec

TENSOR_MAGIC = b"PAT1"
CLOUD_MAGIC = b"GGB1"
FORMAT_VERSION = 1
DTYPE_F32 = 1
CHANNEL_DESCRIPTOR = "a0,p0,mu_x,mu_y,mu_z"


class ConfigError(ValueError):
    """Invalid or unknown run-configuration content."""


def write_tensor(path, array: np.ndarray) -> None:
    """Serialize an array as an f32 tensor file."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, DTYPE_F32))
        f.write(struct.pack("<I", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an f32 tensor file into a float64 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    version, dtype = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if dtype != DTYPE_F32:
        raise ValueError(f"{path}: unsupported dtype code {dtype}")
    (rank,) = struct.unpack_from("<I", raw, 12)
    dims = struct.unpack_from(f"<{rank}Q", raw, 16)
    offset = 16 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 4 * count
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload length {len(raw) - offset} != 4 * prod(dims) "
            f"= {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def write_cloud(path, cloud) -> None:
    """Serialize a DynamicCloud (or list of GaussBall) as a cloud file.

    Static clouds are encoded with a basis count of zero.  Per-channel
    (non-shared) basis fields have no file representation.
    """
    if not isinstance(cloud, DynamicCloud):
        balls = list(cloud)
        b = len(balls)
        cloud = DynamicCloud(
            np.array([x.p0 for x in balls]).reshape(b),
            np.array([x.a0 for x in balls]).reshape(b),
            np.array([x.mu for x in balls]).reshape(b, 3),
            np.zeros((b, 0)), np.zeros((b, 0)),
            np.zeros((b, N_CHANNELS, 0)))
    if cloud.theta.ndim == 3:
        raise ValueError(
            "per-channel basis fields cannot be serialized; share theta and "
            "sigma across channels")
    n_balls = len(cloud)
    nb = cloud.n_basis
    desc = CHANNEL_DESCRIPTOR.encode()
    per_ball = np.concatenate([
        cloud.p0[:, None], cloud.a0[:, None], cloud.mu,
        cloud.theta, cloud.sigma,
        cloud.omega.reshape(n_balls, N_CHANNELS * nb),
    ], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", n_balls))
        f.write(struct.pack("<I", nb))
        f.write(struct.pack("<I", len(desc)))
        f.write(desc)
        f.write(np.ascontiguousarray(per_ball).tobytes())


def read_cloud(path) -> DynamicCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: not a cloud file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    (n_balls,) = struct.unpack_from("<Q", raw, 8)
    nb, desc_len = struct.unpack_from("<II", raw, 16)
    desc = raw[24:24 + desc_len].decode()
    if desc != CHANNEL_DESCRIPTOR:
        raise ValueError(f"{path}: unexpected channel order '{desc}'")
    offset = 24 + desc_len
    rec = 5 + (2 + N_CHANNELS) * nb
    expected = offset + 4 * rec * n_balls
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated cloud file")
    flat = np.frombuffer(raw, dtype="<f4", count=rec * n_balls,
                         offset=offset).astype(np.float64)
    flat = flat.reshape(n_balls, rec) if n_balls else flat.reshape(0, rec)
    return DynamicCloud(
        flat[:, 0], flat[:, 1], flat[:, 2:5],
        flat[:, 5:5 + nb], flat[:, 5 + nb:5 + 2 * nb],
        flat[:, 5 + 2 * nb:].reshape(n_balls, N_CHANNELS, nb))


def write_png16(path, image: np.ndarray, peak: float | None = None) -> None:
    """Write a 2-d image as 16-bit grayscale PNG.

    Values are scaled so `peak` (default: the image maximum) maps to 65535;
    negatives are clipped to zero.  Row 0 is drawn at the top.
    """
    from PIL import Image
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("image must be 2-d")
    top = float(np.max(img)) if peak is None else float(peak)
    scale = 65535.0 / top if top > 0 else 0.0
    q = np.clip(img * scale, 0.0, 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

_ARRAY_DEFAULTS = {
    "m": 128,
    "radius": 30.0,
    "sound_speed": 1.5,
    "sample_rate": 6.0,
    "t_start": None,
    "n_samples": None,
    "window_margin_a0": 1.5,
}

_PHANTOM_DEFAULTS = {
    "kind": "heart",
    "region": 12.8,
    "n_frames": 8,
    "pitch": 1.6,
    "amplitude": 1.0,
    "slab_side": 9.6,
    "slab_thickness": 1.6,
    "slab_offset": 6.4,
    "ellipsoid_axes": [2.4, 1.8, 1.8],
    "pulsation": 0.3,
    "tree_depth": 4,
    "trunk_radius": 1.0,
    "trunk_length": 9.0,
    "dilation": 0.25,
    "brightening": 0.5,
    "noise_std": 0.0,
    "seed": None,
    "custom_balls": [],
}

_RECON_DEFAULTS = {
    "lr_coords": 5e-7,
    "lr_pressure": 5e-4,
    "lr_std": 5e-7,
    "lr_deform": 5e-6,
    "step_size": 160,
    "drop_rate": 0.1,
    "static_iters": 480,
    "dynamic_iters": 480,
    "prune_threshold": 1e-3,
    "prune_every": 40,
    "n_basis": 65,
    "a0_floor": 0.05,
    "sigma_floor": 1e-4,
    "p0_floor": 0.0,
    "init_pitch": 2.0,
    "init_p0_scale": 1e-3,
    "coord_mode": "multiplicative",
    "optimizer": "adam",
    "frame_batch": 0,
    "reference_frame": 0,
    "support_sigmas": 6.0,
    "exact_forward": False,
}

_EVAL_DEFAULTS = {
    "voxel_pitch": 0.4,
    "write_png": True,
}

_IO_DEFAULTS = {
    "phantom_dir": None,
    "signals_dir": None,
    "static_dir": None,
    "dynamic_dir": None,
    "ubp_dir": None,
    "eval_dir": None,
}

_SECTIONS = {
    "array": _ARRAY_DEFAULTS,
    "phantom": _PHANTOM_DEFAULTS,
    "recon": _RECON_DEFAULTS,
    "eval": _EVAL_DEFAULTS,
    "io": _IO_DEFAULTS,
}


def _merge_section(name: str, defaults: dict, given: dict) -> dict:
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(
            f"unknown keys in section '{name}': {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def resolve_config(doc: dict) -> dict:
    """Expand a raw config document with every default filled in.

    Unknown keys anywhere are rejected so typos cannot silently fall back
    to defaults.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - (set(_SECTIONS) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    out = {"seed": int(doc.get("seed", 0))}
    for name, defaults in _SECTIONS.items():
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section '{name}' must be a JSON object")
        out[name] = _merge_section(name, defaults, given)
    if out["phantom"]["seed"] is None:
        out["phantom"]["seed"] = out["seed"]
    return out


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunConfig:
    """Fully resolved run configuration with typed accessors."""

    resolved: dict

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls(resolve_config(doc))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return cls(resolve_config(doc))

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    def with_seed(self, seed: int) -> "RunConfig":
        doc = json.loads(json.dumps(self.resolved))
        doc["seed"] = int(seed)
        doc["phantom"]["seed"] = int(seed)
        return RunConfig(doc)

    @property
    def hash(self) -> str:
        return config_hash(self.resolved)

    def region(self) -> Box:
        r = self.resolved["phantom"]["region"]
        if isinstance(r, (int, float)):
            return Box.cube(float(r))
        lo, hi = r
        return Box(np.asarray(lo, float), np.asarray(hi, float))

    def phantom_spec(self) -> PhantomSpec:
        p = self.resolved["phantom"]
        return PhantomSpec(
            kind=p["kind"], region=self.region(), n_frames=p["n_frames"],
            pitch=p["pitch"], amplitude=p["amplitude"],
            voxel_pitch=self.resolved["eval"]["voxel_pitch"],
            slab_side=p["slab_side"], slab_thickness=p["slab_thickness"],
            slab_offset=p["slab_offset"],
            ellipsoid_axes=tuple(p["ellipsoid_axes"]),
            pulsation=p["pulsation"], tree_depth=p["tree_depth"],
            trunk_radius=p["trunk_radius"], trunk_length=p["trunk_length"],
            dilation=p["dilation"], brightening=p["brightening"],
            seed=p["seed"],
            custom_balls=tuple(tuple(row) for row in p["custom_balls"]))

    def recon_config(self) -> ReconConfig:
        r = dict(self.resolved["recon"])
        ref = r.pop("reference_frame")
        ref = -1 if ref == "random" else int(ref)
        return ReconConfig(seed=self.seed, reference_frame=ref, **r)

    def sensor_array(self) -> SensorArray:
        """Build the spherical array with its acquisition window.

        Explicit t_start / n_samples win; otherwise the window is computed
        to cover the phantom region padded by six window_margin_a0.
        """
        from .geometry import spherical_array
        from .radiator import compute_time_window
        a = self.resolved["array"]
        arr = spherical_array(a["m"], a["radius"], a["sound_speed"],
                              a["sample_rate"])
        if a["t_start"] is not None and a["n_samples"] is not None:
            return arr.with_window(float(a["t_start"]), int(a["n_samples"]))
        t0, n = compute_time_window(arr, self.region(), a["window_margin_a0"])
        return arr.with_window(t0, n)


def dump_resolved(config: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = dict(config.resolved)
    doc["config_hash"] = config.hash
    doc["format_version"] = FORMAT_VERSION
    with open(out / "resolved_config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def write_meta(out_dir, meta: dict) -> None:
    with open(Path(out_dir) / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_meta(in_dir) -> dict:
    with open(Path(in_dir) / "meta.json") as f:
        return json.load(f)
