"""Model bundle checkpoints.

Layout: magic ``XDC1``, u32 header length, a UTF-8 JSON header, then the
tensor payloads back to back, each in the ``XDT1`` tensor-file layout.  The
header carries the bundle configuration, a hash over it, and a manifest of
``(name, shape, offset, length, sha256)`` per tensor with offsets relative to
the first payload byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .networks import DIRECTIONS, ModelBundle, TrunkConfig
from .tensor import Parameter, Tensor, decode_tensor, encode_tensor

MAGIC = b"XDC1"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoints; ``field`` names the culprit."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _config_record(bundle: ModelBundle) -> dict:
    cfg = bundle.trunk_config
    return {
        "direction": bundle.direction,
        "n_classes": int(bundle.n_classes),
        "trunk": {"blocks": list(cfg.blocks), "depth": cfg.depth, "input_size": cfg.input_size},
        "rst_hidden": int(bundle.rst_hidden),
        "detector_hidden": int(bundle.detector_hidden),
    }


def config_hash(record: dict) -> str:
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode("utf-8")).hexdigest()


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    config = _config_record(bundle)
    manifest, payloads = [], []
    offset = 0
    for group, params in bundle.groups().items():
        for key, p in params.items():
            blob = encode_tensor(p.data)
            manifest.append(
                {
                    "name": p.name,
                    "group": group,
                    "key": key,
                    "shape": list(p.data.shape),
                    "trainable": bool(p.trainable),
                    "offset": offset,
                    "length": len(blob),
                    "sha256": hashlib.sha256(blob).hexdigest(),
                }
            )
            payloads.append(blob)
            offset += len(blob)
    header = {
        "version": VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "metadata": bundle.metadata,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + b"".join(payloads))


def read_header(buf: bytes) -> tuple[dict, int]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: expected magic {MAGIC!r}, got {buf[:4]!r}", "magic")
    if len(buf) < 8:
        raise CheckpointError("checkpoint truncated inside the header length", "header")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise CheckpointError(f"checkpoint truncated inside the header ({len(buf) - 8} of {n} bytes)", "header")
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is not valid JSON: {e}", "header") from None
    return header, 8 + n


def load_checkpoint(path: str | Path, direction: str | None = None) -> ModelBundle:
    """Rebuild a bundle; ``direction`` (if given) must match the stored one."""
    buf = Path(path).read_bytes()
    header, base = read_header(buf)
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"field 'version': checkpoint has {header.get('version')!r}, this reader supports {VERSION}", "version"
        )
    config = header.get("config", {})
    if config_hash(config) != header.get("config_hash"):
        raise CheckpointError("field 'config_hash': stored hash does not match the stored config", "config_hash")
    stored = config.get("direction")
    if stored not in DIRECTIONS:
        raise CheckpointError(f"field 'direction': unknown value {stored!r}", "direction")
    if direction is not None and direction != stored:
        raise CheckpointError(
            f"field 'direction': checkpoint was trained for {stored}, requested {direction}", "direction"
        )
    t = config["trunk"]
    bundle = ModelBundle(
        TrunkConfig(tuple(t["blocks"]), t["depth"], t["input_size"]),
        config["n_classes"],
        stored,
        config["rst_hidden"],
        config["detector_hidden"],
        metadata=header.get("metadata", {}),
    )
    groups = bundle.groups()
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["length"]
        if end > len(buf):
            raise CheckpointError(
                f"checkpoint truncated: tensor {entry['name']!r} needs bytes {start}..{end}, file has {len(buf)}",
                entry["name"],
            )
        blob = buf[start:end]
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"tensor {entry['name']!r}: payload hash mismatch", entry["name"])
        arr, _ = decode_tensor(blob)
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"tensor {entry['name']!r}: shape {arr.shape} != {entry['shape']}", entry["name"])
        if entry["group"] not in groups:
            raise CheckpointError(f"tensor {entry['name']!r}: unknown group {entry['group']!r}", entry["name"])
        groups[entry["group"]][entry["key"]] = Parameter(entry["name"], Tensor(np.array(arr)), entry["trainable"])
    return bundle
