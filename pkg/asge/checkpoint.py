"""Binary checkpoint container.

Layout (little-endian)::

    b"ASGE" | version:u32 | geometry hash:32 bytes
    record*  where record = kind:u8 | name_len:u16 | name:utf-8 | size:u64 | payload

Record kinds: tensor (dtype:u8, ndim:u8, dims:u32*, raw data), projection head
(seed:u64, in_dim:u32, n_classes:u32) and JSON (utf-8 text). Heads are never
stored as matrices; they are regenerated from their seed on load.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .network import ArchSpec, Network, build_network
from .supervision import make_projection

logger = logging.getLogger(__name__)

MAGIC = b"ASGE"
VERSION = 1

KIND_TENSOR = 0
KIND_HEAD = 1
KIND_JSON = 2

DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


@dataclass
class CheckpointData:
    arch: ArchSpec
    geometry_hash: bytes
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    heads: dict[str, tuple[int, int, int]] = field(default_factory=dict)


def _record(kind: int, name: str, payload: bytes) -> bytes:
    encoded = name.encode("utf-8")
    return struct.pack("<BH", kind, len(encoded)) + encoded + struct.pack("<Q", len(payload)) + payload


def _tensor_payload(arr: np.ndarray) -> bytes:
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in DTYPE_CODES:
        raise ConfigurationError(f"cannot checkpoint dtype {arr.dtype}")
    header = struct.pack("<BB", DTYPE_CODES[dtype], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def network_records(network: Network) -> tuple[dict[str, np.ndarray], dict[str, tuple[int, int, int]], dict]:
    """Tensors, heads and optimizer metadata that capture ``network`` exactly."""
    tensors: dict[str, np.ndarray] = {}
    heads: dict[str, tuple[int, int, int]] = {}
    optimizers: dict[str, dict] = {}
    owners = [(f"layer.{ls.index}", ls.params.arrays(), ls.optimizer) for ls in network.layers]
    if network.classifier is not None:
        owners.append(("classifier", network.classifier.arrays(), network.classifier.optimizer))
    for prefix, arrays, opt in owners:
        for name, arr in arrays.items():
            tensors[f"{prefix}.{name}"] = arr
        for pname, slots in opt.moments.items():
            for slot, arr in slots.items():
                tensors[f"{prefix}.opt.{pname}.{slot}"] = arr
        optimizers[prefix] = opt.hyperparameters()
    for ls in network.layers:
        heads[f"layer.{ls.index}.head"] = (ls.head.seed, ls.head.in_dim, ls.head.n_classes)
    return tensors, heads, optimizers


def save_checkpoint(path: Path, network: Network, meta: dict) -> None:
    """Write ``network`` plus run metadata; the file is replaced atomically."""
    path = Path(path)
    tensors, heads, optimizers = network_records(network)
    body = {
        **meta,
        "seed": network.seed,
        "precision": network.dtype.name,
        "strategy": network.spec.strategy,
        "best_layer": network.best_layer,
        "optimizers": optimizers,
    }
    chunks = [MAGIC, struct.pack("<I", VERSION), network.spec.geometry_hash()]
    chunks.append(_record(KIND_JSON, "arch", json.dumps(network.spec.to_dict(), sort_keys=True).encode("utf-8")))
    chunks.append(_record(KIND_JSON, "meta", json.dumps(body, sort_keys=True).encode("utf-8")))
    for name, (seed, in_dim, n) in heads.items():
        chunks.append(_record(KIND_HEAD, name, struct.pack("<QII", seed, in_dim, n)))
    for name, arr in tensors.items():
        chunks.append(_record(KIND_TENSOR, name, _tensor_payload(arr)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))


def _take(raw: bytes, offset: int, size: int, path: Path, what: str) -> tuple[bytes, int]:
    end = offset + size
    if end > len(raw):
        raise FormatError(f"truncated: need {size} bytes at offset {offset}, file has {len(raw)}", field=what, path=path)
    return raw[offset:end], end


def _decode_tensor(payload: bytes, path: Path, name: str) -> np.ndarray:
    if len(payload) < 2:
        raise FormatError("short tensor header", field=name, path=path)
    code, ndim = struct.unpack("<BB", payload[:2])
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", field=name, path=path)
    dims_end = 2 + 4 * ndim
    if len(payload) < dims_end:
        raise FormatError("short tensor shape", field=name, path=path)
    shape = struct.unpack(f"<{ndim}I", payload[2:dims_end])
    dtype = CODE_DTYPES[code]
    data = payload[dims_end:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"expected {expected} data bytes, got {len(data)}", field=name, path=path)
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def load_checkpoint(path: Path) -> CheckpointData:
    path = Path(path)
    raw = path.read_bytes()
    magic, offset = _take(raw, 0, 4, path, "magic")
    if magic != MAGIC:
        raise FormatError(f"expected {MAGIC!r}, got {magic!r}", field="magic", path=path)
    version_bytes, offset = _take(raw, offset, 4, path, "version")
    (version,) = struct.unpack("<I", version_bytes)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})", field="version", path=path)
    stored_hash, offset = _take(raw, offset, 32, path, "arch-hash")

    arch_json = meta = None
    tensors: dict[str, np.ndarray] = {}
    heads: dict[str, tuple[int, int, int]] = {}
    while offset < len(raw):
        head, offset = _take(raw, offset, 3, path, "record")
        kind, name_len = struct.unpack("<BH", head)
        name_bytes, offset = _take(raw, offset, name_len, path, "record name")
        name = name_bytes.decode("utf-8")
        size_bytes, offset = _take(raw, offset, 8, path, name)
        payload, offset = _take(raw, offset, struct.unpack("<Q", size_bytes)[0], path, name)
        if kind == KIND_TENSOR:
            tensors[name] = _decode_tensor(payload, path, name)
        elif kind == KIND_HEAD:
            if len(payload) != 16:
                raise FormatError(f"head record must be 16 bytes, got {len(payload)}", field=name, path=path)
            heads[name] = struct.unpack("<QII", payload)
        elif kind == KIND_JSON:
            value = json.loads(payload.decode("utf-8"))
            if name == "arch":
                arch_json = value
            elif name == "meta":
                meta = value
        else:
            raise FormatError(f"unknown record kind {kind}", field=name, path=path)

    if arch_json is None or meta is None:
        raise FormatError("missing arch or meta record", field="records", path=path)
    arch = ArchSpec.from_dict(arch_json)
    if arch.geometry_hash() != stored_hash:
        raise FormatError(
            f"header hash {stored_hash.hex()} does not match stored arch {arch.geometry_hash().hex()}",
            field="arch-hash",
            path=path,
        )
    return CheckpointData(arch, stored_hash, meta, tensors, heads)


def restore_network(data: CheckpointData) -> Network:
    """Rebuild the network and load every stored array and optimizer moment."""
    meta = data.meta
    first_opt = next(iter(meta["optimizers"].values()))
    network = build_network(
        data.arch,
        meta["seed"],
        optimizer=first_opt["kind"],
        weight_decay=first_opt["weight_decay"],
        precision=meta["precision"],
    )
    owners = [(f"layer.{ls.index}", ls.params.arrays(), ls.optimizer) for ls in network.layers]
    if network.classifier is not None:
        owners.append(("classifier", network.classifier.arrays(), network.classifier.optimizer))
    for prefix, arrays, opt in owners:
        for name, arr in arrays.items():
            key = f"{prefix}.{name}"
            if key not in data.tensors:
                raise FormatError("missing tensor", field=key)
            stored = data.tensors[key]
            if stored.shape != arr.shape:
                raise FormatError(f"shape {stored.shape} != expected {arr.shape}", field=key)
            arr[...] = stored
        hyper = meta["optimizers"].get(prefix)
        if hyper is None:
            raise FormatError("missing optimizer state", field=prefix)
        opt.step = int(hyper["step"])
        opt.betas = tuple(hyper["betas"])
        opt.momentum = float(hyper["momentum"])
        opt.eps = float(hyper["eps"])
        opt.weight_decay = float(hyper["weight_decay"])
        for key, arr in data.tensors.items():
            if key.startswith(prefix + ".opt."):
                pname, slot = key[len(prefix) + 5 :].rsplit(".", 1)
                opt.moments.setdefault(pname, {})[slot] = arr.astype(network.dtype, copy=True)
    for ls in network.layers:
        key = f"layer.{ls.index}.head"
        stored = data.heads.get(key)
        regenerated = make_projection(*stored) if stored else None
        if regenerated is None or regenerated != ls.head or not np.array_equal(regenerated.weights, ls.head.weights):
            raise FormatError(f"projection head {stored} does not match the seed-derived head", field=key)
    network.best_layer = meta.get("best_layer")
    return network
