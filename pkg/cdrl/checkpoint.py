"""Checkpoint container for Q-networks.

Layout: 8-byte magic, uint32 format version, uint32 manifest length, a UTF-8 JSON
manifest, then every parameter array as little-endian float32 in manifest order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError
from .gate import GateConfig
from .qnet import ModelConfig, QNetwork, build_network

logger = logging.getLogger(__name__)

MAGIC = b"CDRLCKPT"
VERSION = 1
_HEADER = struct.Struct("<II")
_WIRE_DTYPE = np.dtype("<f4")


def checkpoint_name(kind: str, seed: int, episode: int) -> str:
    return f"{kind}-seed{seed}-ep{episode:05d}.ckpt"


def _manifest(network: QNetwork, extra: dict[str, Any] | None) -> dict[str, Any]:
    manifest: dict[str, Any] = {
        "kind": network.kind,
        "input_shape": list(network.input_shape),
        "entries": [
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "dtype": p.value.dtype.str,
                "trainable": p.trainable,
            }
            for p in network.parameters()
        ],
    }
    config = getattr(network, "config", None)
    if isinstance(config, ModelConfig):
        manifest["model_config"] = dataclasses.asdict(config)
    gate_config = getattr(network, "gate_config", None)
    if isinstance(gate_config, GateConfig):
        manifest["gate_config"] = dataclasses.asdict(gate_config)
    gate_state = getattr(network, "gate_state", None)
    initialized = gate_state is not None and gate_state.initialized
    manifest["gate_initialized"] = bool(initialized)
    if extra:
        manifest["extra"] = extra
    return manifest


def save_checkpoint(
    network: QNetwork, path: Path, extra: dict[str, Any] | None = None
) -> Path:
    """Write ``network`` to ``path`` atomically; returns the path."""
    path = Path(path)
    manifest = json.dumps(_manifest(network, extra), sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with tmp.open("wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(VERSION, len(manifest)))
        f.write(manifest)
        for p in network.parameters():
            f.write(np.ascontiguousarray(p.value, dtype=_WIRE_DTYPE).tobytes())
    tmp.replace(path)
    logger.debug("saved checkpoint %s", path)
    return path


def read_manifest(path: Path) -> tuple[dict[str, Any], int]:
    """Parse the header; returns the manifest and the byte offset of the arrays."""
    path = Path(path)
    try:
        with path.open("rb") as f:
            magic = f.read(len(MAGIC))
            header = f.read(_HEADER.size)
            if magic != MAGIC or len(header) != _HEADER.size:
                raise CheckpointError(f"{path}: not a checkpoint file")
            version, length = _HEADER.unpack(header)
            if version != VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version {version}"
                )
            raw = f.read(length)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt manifest ({e})") from e
    return manifest, len(MAGIC) + _HEADER.size + length


def _read_arrays(path: Path, manifest: dict[str, Any], offset: int) -> list[np.ndarray]:
    data = Path(path).read_bytes()[offset:]
    arrays = []
    cursor = 0
    for entry in manifest["entries"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * _WIRE_DTYPE.itemsize
        if cursor + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at {entry['name']}")
        wire = np.frombuffer(data, dtype=_WIRE_DTYPE, count=count, offset=cursor)
        arrays.append(wire.reshape(entry["shape"]).astype(np.dtype(entry["dtype"])))
        cursor += nbytes
    if cursor != len(data):
        raise CheckpointError(f"{path}: {len(data) - cursor} trailing bytes")
    return arrays


def load_into(network: QNetwork, path: Path) -> QNetwork:
    """Overwrite ``network``'s parameters in place from ``path``."""
    manifest, offset = read_manifest(path)
    if manifest["kind"] != network.kind:
        raise CheckpointError(
            f"{path}: holds a {manifest['kind']} network, expected {network.kind}"
        )
    params = network.parameters()
    expected = [(p.name, list(p.value.shape)) for p in params]
    found = [(e["name"], e["shape"]) for e in manifest["entries"]]
    if expected != found:
        mismatch = next(
            (f"{a} vs {b}" for a, b in zip(expected, found, strict=False) if a != b),
            f"{len(found)} entries vs {len(expected)}",
        )
        raise CheckpointError(f"{path}: parameter layout mismatch ({mismatch})")
    for p, array in zip(params, _read_arrays(path, manifest, offset), strict=True):
        p.value[...] = array
    network._bind()
    gate_state = getattr(network, "gate_state", None)
    if gate_state is not None:
        gate_state.initialized = bool(manifest.get("gate_initialized", False))
    return network


def load_checkpoint(path: Path) -> QNetwork:
    """Rebuild a network from the manifest alone and load its arrays."""
    manifest, _ = read_manifest(path)
    try:
        model_config = _model_config(manifest.get("model_config", {}))
        gate_config = GateConfig(**manifest.get("gate_config", {}))
    except TypeError as e:
        raise CheckpointError(f"{path}: manifest config does not match ({e})") from e
    network = build_network(
        manifest["kind"],
        model_config,
        gate_config,
        input_shape=tuple(manifest["input_shape"]),
    )
    return load_into(network, path)


def _model_config(raw: dict[str, Any]) -> ModelConfig:
    raw = dict(raw)
    if "conv_layers" in raw:
        raw["conv_layers"] = tuple(tuple(layer) for layer in raw["conv_layers"])
    if "baseline_hidden" in raw:
        raw["baseline_hidden"] = tuple(raw["baseline_hidden"])
    return ModelConfig(**raw)
