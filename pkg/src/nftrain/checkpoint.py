"""Self-describing binary checkpoints.

Layout (all integers little-endian):

    bytes 0-7    magic ``b"NFTCKPT\\0"``
    bytes 8-11   format version (u32)
    bytes 12-19  header length in bytes (u64)
    header       UTF-8 JSON: architecture, its SHA-256 fingerprint, training
                 metadata, and a tensor table of {name, shape, dtype, offset,
                 nbytes} entries (offsets relative to the payload start)
    payload      the raw little-endian float32/float64 arrays, concatenated

Arrays round-trip bit-exactly.  The whole file is validated before any state
is returned, so a truncated or corrupted file never yields partial data.
"""

import hashlib
import json

import numpy as np

from .errors import CheckpointError
from .network import BackboneSpec, ExitBlockSpec, MultiExitNetwork, build_network

MAGIC = b"NFTCKPT\0"
VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def arch_fingerprint(arch: dict) -> str:
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, net: MultiExitNetwork, meta: dict | None = None) -> None:
    arch = net.arch_dict()
    tensors, blobs, offset = [], [], 0
    for name in sorted(net.params):
        arr = net.params[name].data
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        tensors.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "version": VERSION,
            "fingerprint": arch_fingerprint(arch),
            "arch": arch,
            "meta": meta or {},
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(VERSION.to_bytes(4, "little"))
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, backbone_only: bool = False):
    """Returns (arch dict, {name: array}, meta).

    ``backbone_only`` drops exit tensors, the deployment view used for noisy
    inference.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    version = int.from_bytes(raw[8:12], "little")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header_len = int.from_bytes(raw[12:20], "little")
    payload_start = 20 + header_len
    if payload_start > len(raw):
        raise CheckpointError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[20:payload_start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    arch = header["arch"]
    if arch_fingerprint(arch) != header["fingerprint"]:
        raise CheckpointError(f"{path}: architecture fingerprint mismatch")
    payload = raw[payload_start:]
    for entry in header["tensors"]:
        if entry["offset"] + entry["nbytes"] > len(payload):
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} extends past end of file "
                f"(offset {entry['offset']}, {entry['nbytes']} bytes)"
            )
        expect = int(np.prod(entry["shape"])) * int(_DTYPES[entry["dtype"]][-1])
        if expect != entry["nbytes"]:
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} length field {entry['nbytes']} "
                f"does not match shape {entry['shape']}"
            )
    arrays = {}
    for entry in header["tensors"]:
        if backbone_only and not entry["name"].startswith("backbone."):
            continue
        arr = np.frombuffer(
            payload, dtype=_DTYPES[entry["dtype"]], count=int(np.prod(entry["shape"])),
            offset=entry["offset"],
        ).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"], copy=True)
    return arch, arrays, header["meta"]


def network_from_arch(arch: dict, dtype=np.float32) -> MultiExitNetwork:
    backbone = BackboneSpec.from_dict(arch["backbone"])
    exits = [
        ExitBlockSpec(
            e["attach_after"],
            tuple(e["pool_target"]) if e["pool_target"] else None,
            e["hidden"],
            e["classes"],
        )
        for e in arch["exits"]
    ]
    return build_network(backbone, exits=exits, init_seed=0, dtype=dtype)


def load_network(path, backbone_only: bool = False, expected_arch: dict | None = None):
    """Rebuild a network from a checkpoint; returns (net, meta).

    With ``backbone_only`` the exit blocks are dropped entirely.  When
    ``expected_arch`` is given its fingerprint must match the stored one.
    """
    arch, arrays, meta = load_checkpoint(path, backbone_only=backbone_only)
    if expected_arch is not None and arch_fingerprint(expected_arch) != arch_fingerprint(arch):
        raise CheckpointError(f"{path}: checkpoint does not match the expected architecture")
    if backbone_only:
        arch = {"backbone": arch["backbone"], "exits": []}
    sample = next(iter(arrays.values()))
    net = network_from_arch(arch, dtype=sample.dtype)
    net.set_weights(arrays)
    return net, meta
