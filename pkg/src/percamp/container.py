"""Versioned binary container for array artifacts, plus the PDE disk cache.

Layout: magic bytes, u16 format version, u32 header length, UTF-8 JSON
header, then the raw arrays back to back.  Arrays are always little-endian
float64, C order; the header records their names and shapes along with
arbitrary caller metadata (model parameters, hashes, grid specs), so a
file is self-describing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .fop import Fop
from .pde import PdeGridSpec, PdeSolution

MAGIC = b"PCMPBIN1"
FORMAT_VERSION = 1

__all__ = [
    "write_arrays",
    "read_arrays",
    "pde_cache_key",
    "save_pde_solution",
    "load_pde_solution",
]


def write_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    order = list(arrays)
    header = {
        "meta": meta,
        "arrays": [
            {"name": k, "shape": list(arrays[k].shape), "dtype": "<f8"} for k in order
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for k in order:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"not a percamp container: bad magic {magic!r}")
        version, hlen = struct.unpack("<HI", f.read(6))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported container version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError("truncated container")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).copy()
    return header["meta"], arrays


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def pde_cache_key(gamma: Fop, kappa: float, spec: PdeGridSpec) -> str:
    """Stable hash of (gamma, kappa, grid spec) identifying one solve."""
    payload = {
        "gamma": {
            "breakpoints": [float(b).hex() for b in gamma.breakpoints],
            "levels": [float(m).hex() for m in gamma.levels],
        },
        "kappa": float(kappa).hex(),
        "grid": {
            "x_min": float(spec.x_min).hex(),
            "x_max": float(spec.x_max).hex(),
            "nx": spec.nx,
            "t_nodes": [float(t).hex() for t in spec.t_nodes],
        },
    }
    return hashlib.sha256(_canonical(payload).encode()).hexdigest()


def save_pde_solution(path, sol: PdeSolution) -> None:
    meta = {
        "kind": "pde-solution",
        "key": pde_cache_key(sol.gamma, sol.kappa, sol.grid),
        "kappa": sol.kappa,
        "gamma": sol.gamma.to_json_dict(),
        "grid": sol.grid.to_json_dict(),
    }
    write_arrays(path, meta, {
        "phi": sol.phi, "dphi": sol.dphi, "d2phi": sol.d2phi, "d3phi": sol.d3phi,
    })


def load_pde_solution(path, expect_key: str | None = None) -> PdeSolution:
    meta, arrays = read_arrays(path)
    if meta.get("kind") != "pde-solution":
        raise ValueError("container does not hold a PDE solution")
    if expect_key is not None and meta["key"] != expect_key:
        raise ValueError("PDE cache key mismatch (stale cache?)")
    gamma = Fop.from_json_dict(meta["gamma"])
    spec = PdeGridSpec.from_json_dict(meta["grid"])
    return PdeSolution(spec, gamma, float(meta["kappa"]),
                       arrays["phi"], arrays["dphi"], arrays["d2phi"], arrays["d3phi"])


def cached_solve(cache_dir, gamma: Fop, kappa: float, spec: PdeGridSpec,
                 **solve_kwargs) -> PdeSolution:
    """Solve with a disk cache keyed on (gamma, kappa, spec)."""
    from .pde import solve

    key = pde_cache_key(gamma, kappa, spec)
    path = Path(cache_dir) / f"pde-{key[:24]}.bin"
    if path.exists():
        try:
            return load_pde_solution(path, expect_key=key)
        except (ValueError, OSError):
            pass  # stale or foreign file: recompute
    sol = solve(gamma, kappa, spec, **solve_kwargs)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_pde_solution(path, sol)
    return sol
