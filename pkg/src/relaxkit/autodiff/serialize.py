"""Weights files: a JSON manifest plus one float32 blob in manifest order."""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from ..errors import ContainerFormatError, VersionMismatchError

WEIGHTS_FORMAT_VERSION = 1


def architecture_hash(arch: dict) -> str:
    canonical = json.dumps(arch, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_weights(
    path: str | os.PathLike,
    arch: dict,
    named_arrays: list[tuple[str, np.ndarray]],
    extra: dict | None = None,
) -> None:
    """Write manifest.json + weights.bin under ``path`` (a directory)."""
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in named_arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr32.shape)})
        blob.extend(arr32.tobytes())
    manifest = {
        "format_version": WEIGHTS_FORMAT_VERSION,
        "arch": arch,
        "arch_hash": architecture_hash(arch),
        "params": entries,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(path, "weights.bin"), "wb") as fh:
        fh.write(bytes(blob))
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_weights(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a weights directory; returns (manifest, name -> float32 array)."""
    path = os.fspath(path)
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise ContainerFormatError(f"no manifest.json under {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != WEIGHTS_FORMAT_VERSION:
        raise VersionMismatchError(
            f"weights format version {version!r} not supported "
            f"(expected {WEIGHTS_FORMAT_VERSION})"
        )
    if architecture_hash(manifest["arch"]) != manifest.get("arch_hash"):
        raise ContainerFormatError("architecture hash mismatch in manifest")
    with open(os.path.join(path, "weights.bin"), "rb") as fh:
        raw = fh.read()
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ContainerFormatError("weights.bin shorter than manifest implies")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            .reshape(entry["shape"])
            .copy()
        )
        offset += nbytes
    if offset != len(raw):
        raise ContainerFormatError("weights.bin longer than manifest implies")
    return manifest, arrays
