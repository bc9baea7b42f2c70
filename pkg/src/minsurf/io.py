"""Persistence: flat f64 fields with JSON sidecars, boundary CSVs, hashes and manifests."""
from __future__ import annotations

import hashlib
import json
import os
import time

import numpy as np

from . import __version__


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def content_hash(obj):
    """SHA-256 of the canonical JSON serialization."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sidecar_path(path):
    return str(path) + ".json"


def write_field(path, values, extents=None):
    """Row-major little-endian f64 dump plus ``<path>.json`` header."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    arr.tofile(path)
    head = {"shape": list(arr.shape), "extents": extents, "dtype": "f64", "order": "C"}
    write_json(sidecar_path(path), head)
    return head


def read_field(path):
    head = read_json(sidecar_path(path))
    if head.get("dtype") != "f64" or head.get("order") != "C":
        raise ValueError(f"unsupported field layout in {sidecar_path(path)}")
    arr = np.fromfile(path, dtype="<f8")
    return arr.reshape(head["shape"]), head


def write_boundary_csv(path, ids, values):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node,value\n")
        for i, v in zip(ids, values):
            fh.write(f"{int(i)},{float(v)!r}\n")


def read_boundary_csv(path, grid=None):
    """Boundary values ordered like ``grid.boundary_ids`` (if given), else file order."""
    raw = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
    ids, vals = raw[:, 0].astype(int), raw[:, 1]
    if grid is None:
        return ids, vals
    lookup = dict(zip(ids.tolist(), vals.tolist()))
    missing = [i for i in grid.boundary_ids.tolist() if i not in lookup]
    if missing:
        raise ValueError(f"boundary CSV misses {len(missing)} boundary nodes (first: {missing[0]})")
    return grid.boundary_ids, np.array([lookup[i] for i in grid.boundary_ids.tolist()])


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_cell(v) for v in r) + "\n")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Manifest:
    """Record of one run: config, seeds, hashes, outputs and stage timings.

    Timings live under ``timings`` and are the only wall-clock values
    written anywhere; they are excluded from :meth:`fingerprint`.
    """

    def __init__(self, config, workdir):
        self.workdir = workdir
        self.data = {"tool": "minsurf", "version": __version__, "config": config,
                     "config_sha256": content_hash(config), "seeds": {}, "hashes": {},
                     "outputs": {}, "stages": [], "timings": {}}
        self._t0 = {}

    def start(self, stage):
        self._t0[stage] = time.perf_counter()

    def finish(self, stage):
        self.data["stages"].append(stage)
        self.data["timings"][stage] = time.perf_counter() - self._t0.pop(stage)

    def seed(self, name, value):
        self.data["seeds"][name] = value

    def bind(self, name, digest):
        self.data["hashes"][name] = digest

    def output(self, relpath):
        self.data["outputs"][relpath] = file_hash(os.path.join(self.workdir, relpath))
        side = relpath + ".json"
        if os.path.exists(os.path.join(self.workdir, side)):
            self.data["outputs"][side] = file_hash(os.path.join(self.workdir, side))

    def fingerprint(self):
        return content_hash({k: v for k, v in self.data.items() if k != "timings"})

    def write(self, path):
        out = dict(self.data)
        out["fingerprint"] = self.fingerprint()
        write_json(path, out)
        return out
