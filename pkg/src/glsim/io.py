"""Report persistence: TSV tables, JSON summaries and binary trajectory archives.

Every file carries the package version and the config hash.  Numbers are
written with ``repr``-exact formatting (``.17g``) and no timestamps, so equal
configs give byte-identical files.

Binary archive layout (all integers little-endian)::

    b"GLTR" | u16 format version | u8 byte-order flag (b"<") | u32 header length
    | UTF-8 JSON header | float64 states (LE) | float64 noise (LE)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError
from .sde import ForcingSpec, Trajectory

MAGIC = b"GLTR"
ARCHIVE_VERSION = 1


def _plain(x):
    """Convert numpy containers and scalars to JSON-ready Python values."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_table(path, columns: dict, meta: dict | None = None) -> Path:
    """Tab-separated table with ``# key: value`` header lines."""
    path = Path(path)
    names = list(columns)
    cols = [np.asarray(columns[n]).ravel() for n in names]
    lengths = {c.size for c in cols}
    if len(lengths) > 1:
        raise ValidationError(f"table columns differ in length: {sorted(lengths)}")
    meta = {"version": __version__, **(meta or {})}
    lines = [f"# {k}: {canonical_json(meta[k]) if not isinstance(meta[k], str) else meta[k]}"
             for k in sorted(meta)]
    lines.append("\t".join(names))
    for row in zip(*cols):
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path) -> tuple:
    """Inverse of :func:`write_table`: ``(meta, {name: float array})``."""
    meta, rows, names = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        elif names is None:
            names = line.split("\t")
        elif line:
            rows.append([float(x) for x in line.split("\t")])
    arr = np.array(rows).reshape(-1, len(names)) if names else np.zeros((0, 0))
    return meta, {n: arr[:, i] for i, n in enumerate(names or [])}


def write_summary(path, record: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain({"version": __version__, **record}), sort_keys=True,
                               indent=2) + "\n")
    return path


def write_trajectory(path, traj: Trajectory, meta: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "n_modes": traj.n_modes, "dt": traj.dt, "stride": traj.stride,
        "nonlinear": traj.nonlinear, "seed": traj.seed,
        "forcing": {"modes": list(traj.forcing.modes), "amps": list(traj.forcing.amps)},
        "states_shape": list(traj.states.shape), "noise_shape": list(traj.noise.shape),
        "dtype": "<f8", "version": __version__, **(meta or {}),
    }
    hb = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Hc", ARCHIVE_VERSION, b"<") + struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(traj.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.noise, dtype="<f8").tobytes())
    return path


def read_trajectory(path) -> tuple:
    """Returns ``(trajectory, header)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValidationError(f"{path} is not a trajectory archive")
    version, order = struct.unpack("<Hc", data[4:7])
    if version != ARCHIVE_VERSION or order != b"<":
        raise ValidationError(f"unsupported archive version {version} / byte order {order!r}")
    (hlen,) = struct.unpack("<I", data[7:11])
    header = json.loads(data[11:11 + hlen])
    off = 11 + hlen
    ss, ns = header["states_shape"], header["noise_shape"]
    n_s, n_n = int(np.prod(ss)), int(np.prod(ns))
    states = np.frombuffer(data, "<f8", n_s, off).reshape(ss).astype(float)
    noise = np.frombuffer(data, "<f8", n_n, off + 8 * n_s).reshape(ns).astype(float)
    f = header["forcing"]
    traj = Trajectory(states, noise, header["dt"], ForcingSpec(tuple(f["modes"]), tuple(f["amps"])),
                      header["nonlinear"], header["stride"], header["seed"])
    return traj, header


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
