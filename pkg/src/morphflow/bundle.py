"""Deterministic binary array bundles.

A bundle is a zip of .npy entries plus a meta.json, written with fixed
timestamps and sorted entry order so identical contents produce identical
bytes (np.savez embeds wall-clock timestamps, which would break content-hash
reproducibility). Arrays round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

__all__ = ["save_bundle", "load_bundle", "sha256_file"]

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_bundle(path: str, arrays: dict, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["format_version"] = FORMAT_VERSION
    tmp = os.fspath(path) + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
        info = zipfile.ZipInfo("meta.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=0))
    os.replace(tmp, path)


def load_bundle(path: str) -> tuple[dict, dict]:
    arrays: dict = {}
    meta: dict = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            if name == "meta.json":
                meta = json.loads(zf.read(name).decode("utf-8"))
            elif name.endswith(".npy"):
                buf = io.BytesIO(zf.read(name))
                arrays[name[:-4]] = np.lib.format.read_array(buf, allow_pickle=False)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported bundle format version {version!r}")
    return arrays, meta


def sha256_file(path: str) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
