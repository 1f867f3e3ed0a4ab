"""Binary tensor container and checkpoint files.

Tensor files hold a single n-dimensional float32 array:

    magic "SINV" | u32 version | u32 element code | u32 rank | u32 dims... | payload

All integers little-endian; payload is row-major IEEE-754 float32.
Element code 0 is the only one defined.

Checkpoint files (.sinvckpt) bundle many named tensors:

    magic "SNVC" | u32 version | u32 json length | json header | tensor blobs

The header lists sections (name, shape, offset, nbytes) plus run
metadata (step, config hash); each section's blob is a complete tensor
container as above, so a checkpoint is just a directory of SINV blobs.
"""

import hashlib
import json
import struct

import numpy as np

TENSOR_MAGIC = b"SINV"
TENSOR_VERSION = 1
ELEMENT_F32 = 0

CKPT_MAGIC = b"SNVC"
CKPT_VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed or inconsistent container files."""


def tensor_to_bytes(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(
        "<III", TENSOR_VERSION, ELEMENT_F32, arr.ndim
    )
    dims = struct.pack("<%dI" % arr.ndim, *arr.shape)
    return header + dims + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0):
    """Decode one tensor blob; returns (array, bytes consumed)."""
    base = offset
    if buf[offset:offset + 4] != TENSOR_MAGIC:
        raise ContainerError("bad magic, not a tensor container")
    offset += 4
    version, code, rank = struct.unpack_from("<III", buf, offset)
    offset += 12
    if version != TENSOR_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if code != ELEMENT_F32:
        raise ContainerError(f"unsupported element type code {code}")
    if rank > 32:
        raise ContainerError(f"implausible rank {rank}")
    dims = struct.unpack_from("<%dI" % rank, buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if len(buf) - offset < nbytes:
        raise ContainerError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - offset}"
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
    arr = arr.reshape(dims).copy()
    return arr, offset + nbytes - base


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def read_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise ContainerError(
            f"{path}: {len(buf) - used} trailing bytes after payload"
        )
    return arr


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(path, tensors, step=0, config_hash="", extra=None):
    """Write named float32 tensors plus metadata to one file.

    Parameters
    ----------
    tensors : dict mapping name -> array-like
        Iteration order fixes the on-disk section order, so pass a dict
        with a stable key order for reproducible files.
    """
    blobs = []
    sections = []
    offset = 0
    for name, arr in tensors.items():
        blob = tensor_to_bytes(arr)
        sections.append({
            "name": name,
            "shape": list(np.shape(np.asarray(arr))),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = {
        "step": int(step),
        "config_hash": config_hash,
        "extra": extra or {},
        "sections": sections,
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(hjson)))
        fh.write(hjson)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns (tensors dict, header dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ContainerError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ContainerError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupt header: {exc}") from exc
    payload_start = 12 + hlen
    tensors = {}
    for section in header["sections"]:
        arr, used = tensor_from_bytes(buf, payload_start + section["offset"])
        if used != section["nbytes"]:
            raise ContainerError(
                f"{path}: section {section['name']} length mismatch"
            )
        if list(arr.shape) != list(section["shape"]):
            raise ContainerError(
                f"{path}: section {section['name']} shape "
                f"{list(arr.shape)} != header {section['shape']}"
            )
        tensors[section["name"]] = arr
    return tensors, header
