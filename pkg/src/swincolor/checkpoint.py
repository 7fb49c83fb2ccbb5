"""Checkpoint container: a zip holding a JSON manifest plus raw arrays.

Layout (stable, version 1):

* ``manifest.json`` — format tag, version, step counter, the flat config
  mapping, per-section parameter names with shapes/dtype, optimizer scalar
  state, and the training RNG state.
* ``arrays/<section>/<name>`` — one entry per named parameter: raw
  little-endian float32 bytes in C order.
* ``arrays/<optimizer>/m/<name>`` and ``.../v/<name>`` — Adam moment slots.

Saves are atomic: the file is assembled under a temporary name in the target
directory and renamed into place.  Zip entry timestamps are pinned so saving
identical state twice yields identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
import os
import zipfile

import numpy as np

FORMAT_NAME = "swincolor-checkpoint"
FORMAT_VERSION = 1

_ENTRY_TIME = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclasses.dataclass
class Checkpoint:
    step: int
    config: dict
    sections: dict  # section -> {name: float32 ndarray}
    optimizers: dict  # optimizer -> Adam state_dict-shaped mapping
    rng_state: dict | None


def _as_float32(name, value):
    data = value.data if hasattr(value, "data") else value
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.size == 0:
        raise CheckpointError(f"parameter {name} is empty")
    return arr


def _write_entry(archive, path, payload):
    info = zipfile.ZipInfo(path, date_time=_ENTRY_TIME)
    info.compress_type = zipfile.ZIP_STORED
    archive.writestr(info, payload)


def save_checkpoint(path, *, step, config, sections, optimizers=None, rng_state=None):
    """Atomically write the manifest and every array to ``path``."""
    optimizers = optimizers or {}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "step": int(step),
        "config": dict(config),
        "sections": {},
        "optimizers": {},
        "rng": rng_state,
    }
    payloads = []
    for section in sorted(sections):
        params = sections[section]
        described = {}
        for name in sorted(params):
            arr = _as_float32(f"{section}/{name}", params[name])
            described[name] = {"shape": list(arr.shape), "dtype": "float32"}
            payloads.append((f"arrays/{section}/{name}", arr.tobytes()))
        manifest["sections"][section] = described
    for opt_name in sorted(optimizers):
        state = optimizers[opt_name]
        slots = {}
        for slot in ("m", "v"):
            described = {}
            for name in sorted(state[slot]):
                arr = _as_float32(f"{opt_name}/{slot}/{name}", state[slot][name])
                described[name] = {"shape": list(arr.shape), "dtype": "float32"}
                payloads.append((f"arrays/{opt_name}/{slot}/{name}", arr.tobytes()))
            slots[slot] = described
        manifest["optimizers"][opt_name] = {
            "lr": state["lr"],
            "beta1": state["beta1"],
            "beta2": state["beta2"],
            "eps": state["eps"],
            "t": state["t"],
            "slots": slots,
        }

    path = os.fspath(path)
    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as archive:
        _write_entry(archive, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for entry, payload in payloads:
            _write_entry(archive, entry, payload)
    os.replace(tmp, path)
    return path


def load_manifest(path):
    """Parse manifest.json alone; array payloads stay untouched on disk."""
    try:
        with zipfile.ZipFile(path) as archive:
            manifest = json.loads(archive.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has unsupported version {manifest.get('version')!r} "
            f"(this build reads {FORMAT_VERSION})"
        )
    return manifest


def _read_array(archive, entry, meta):
    raw = archive.read(entry)
    arr = np.frombuffer(raw, dtype="<f4")
    expected = int(np.prod(meta["shape"])) if meta["shape"] else 1
    if arr.size != expected:
        raise CheckpointError(
            f"array {entry} holds {arr.size} values, manifest says {expected}"
        )
    return arr.reshape(meta["shape"]).copy()


def load_checkpoint(path) -> Checkpoint:
    manifest = load_manifest(path)
    sections = {}
    optimizers = {}
    with zipfile.ZipFile(path) as archive:
        for section, params in manifest["sections"].items():
            sections[section] = {
                name: _read_array(archive, f"arrays/{section}/{name}", meta)
                for name, meta in params.items()
            }
        for opt_name, described in manifest["optimizers"].items():
            state = {key: described[key] for key in ("lr", "beta1", "beta2", "eps", "t")}
            for slot in ("m", "v"):
                state[slot] = {
                    name: _read_array(archive, f"arrays/{opt_name}/{slot}/{name}", meta)
                    for name, meta in described["slots"][slot].items()
                }
            optimizers[opt_name] = state
    return Checkpoint(
        step=manifest["step"],
        config=manifest["config"],
        sections=sections,
        optimizers=optimizers,
        rng_state=manifest["rng"],
    )


def restore_params(params, arrays, section):
    """Copy checkpoint arrays into live parameter tensors, names must match."""
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint section {section!r} is missing {missing}")
    surplus = sorted(set(arrays) - set(params))
    if surplus:
        raise CheckpointError(f"checkpoint section {section!r} has unknown entries {surplus}")
    for name, tensor in params.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise CheckpointError(
                f"{section}/{name}: checkpoint shape {arr.shape} does not match "
                f"model shape {tensor.data.shape}"
            )
        tensor.data[...] = arr.astype(tensor.data.dtype)
