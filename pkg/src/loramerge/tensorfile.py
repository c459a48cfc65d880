"""Single-file tensor container with a fixed, byte-reproducible layout.

Wire format: an 8-byte little-endian unsigned header length N, then N bytes of
JSON (keys sorted, no whitespace), then the raw payload.  Each header entry
maps a tensor name to {"dtype": "F32", "shape": [...], "data_offsets": [s, e]}
with offsets relative to the payload start; an optional "__metadata__" entry
holds a string-to-string map and is omitted when empty.  Only F32 is accepted.
The writer assigns offsets in sorted-name order, so ranges are contiguous,
ascending, and exactly tile the payload; the loader enforces that layout on
the declared region and never reads payload bytes outside it (trailing junk
after the last declared offset is ignored).

Tensor naming conventions used by the toolkit:

* adapters:      blocks.{b}.{role}.lora_A  (rank x in)
                 blocks.{b}.{role}.lora_B  (out x rank)
* merged deltas: blocks.{b}.{role}.delta_W (out x in)
* networks:      hypernet.in_{width}.weight/.bias, hypernet.out.weight/.bias
                 (affine weights are stored (in, out))

Adapter metadata records kind, task_seed, rank, and alpha; alpha is carried
for interoperability but never applied (deltas are plain B @ A).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor
from .model import KINDS, ROLES, LoraAdapter

_LEN_FMT = "<Q"


class TensorFileError(Exception):
    """Base class for container format errors."""


class TruncatedFileError(TensorFileError):
    pass


class MalformedHeaderError(TensorFileError):
    pass


class OverlapError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class KeyConventionError(TensorFileError):
    """A well-formed container whose keys/metadata break a naming convention."""


class MissingFactorError(KeyConventionError):
    pass


class RankMismatchError(KeyConventionError):
    pass


class UnknownKindError(KeyConventionError):
    pass


class TensorFile:
    """In-memory view of a container: tensors plus string metadata."""

    def __init__(self, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None):
        self.tensors = dict(tensors)
        self.metadata = dict(metadata or {})


def save_tensors(path, tensors, metadata: dict[str, str] | None = None) -> None:
    """Write a container; `tensors` is a name->array mapping or (name, array) pairs."""
    if isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = list(tensors)
    seen: set[str] = set()
    for name, _ in items:
        if not isinstance(name, str) or not name:
            raise MalformedHeaderError(f"tensor name must be a non-empty string, got {name!r}")
        if name in seen:
            raise MalformedHeaderError(f"duplicate tensor name {name!r}")
        seen.add(name)
    arrays: dict[str, np.ndarray] = {}
    for name, arr in items:
        arr = tensor.as_f32(arr)
        if arr.ndim not in (1, 2) or 0 in arr.shape:
            raise MalformedHeaderError(
                f"tensor {name!r} must be 1-D or 2-D with positive dims, got shape {arr.shape}")
        arrays[name] = np.ascontiguousarray(arr)
    header: dict[str, object] = {}
    offset = 0
    for name in sorted(arrays):
        nbytes = arrays[name].size * 4
        header[name] = {
            "dtype": "F32",
            "shape": list(arrays[name].shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    if metadata:
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise MalformedHeaderError(
                    f"metadata must map strings to strings, got {k!r}: {v!r}")
        header["__metadata__"] = dict(metadata)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(arrays[name].astype("<f4").tobytes(order="C") for name in sorted(arrays))
    Path(path).write_bytes(struct.pack(_LEN_FMT, len(header_bytes)) + header_bytes + payload)


def _parse_header(raw: bytes) -> dict[str, object]:
    def reject_dupes(pairs):
        keys = [k for k, _ in pairs]
        if len(keys) != len(set(keys)):
            raise MalformedHeaderError("duplicate keys in header JSON")
        return dict(pairs)

    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=reject_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"header must be a JSON object, got {type(header).__name__}")
    return header


def load_tensorfile(path) -> TensorFile:
    """Parse and validate a container file."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack(_LEN_FMT, data[:8])
    if 8 + header_len > len(data):
        raise TruncatedFileError(
            f"{path}: declared header length {header_len} exceeds file size {len(data)}")
    header = _parse_header(data[8:8 + header_len])
    metadata: dict[str, str] = {}
    entries: list[tuple[str, list[int], int, int]] = []
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict) or any(
                    not isinstance(k, str) or not isinstance(v, str) for k, v in entry.items()):
                raise MalformedHeaderError("__metadata__ must map strings to strings")
            metadata = dict(entry)
            continue
        if not isinstance(entry, dict):
            raise MalformedHeaderError(f"entry for tensor {name!r} must be an object")
        dtype = entry.get("dtype")
        if dtype != "F32":
            raise UnknownDtypeError(f"tensor {name!r} has dtype {dtype!r}; only F32 is supported")
        shape = entry.get("shape")
        if (not isinstance(shape, list) or len(shape) not in (1, 2)
                or any(not isinstance(s, int) or s < 1 for s in shape)):
            raise MalformedHeaderError(f"tensor {name!r} has invalid shape {shape!r}")
        offsets = entry.get("data_offsets")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or any(not isinstance(o, int) or o < 0 for o in offsets)
                or offsets[1] < offsets[0]):
            raise MalformedHeaderError(f"tensor {name!r} has invalid data_offsets {offsets!r}")
        nbytes = int(np.prod(shape)) * 4
        if offsets[1] - offsets[0] != nbytes:
            raise MalformedHeaderError(
                f"tensor {name!r}: shape {shape} needs {nbytes} bytes but "
                f"data_offsets {offsets} span {offsets[1] - offsets[0]}")
        entries.append((name, shape, offsets[0], offsets[1]))

    entries.sort(key=lambda e: (e[2], e[3]))
    cursor = 0
    prev_name = None
    for name, _, start, end in entries:
        if start < cursor:
            raise OverlapError(
                f"tensors {prev_name!r} and {name!r} have overlapping byte ranges")
        if start > cursor:
            raise MalformedHeaderError(
                f"gap in payload between {prev_name!r} and {name!r} "
                f"(offset {cursor} to {start}); ranges must tile the payload")
        cursor = end
        prev_name = name
    payload = data[8 + header_len:]
    if len(payload) < cursor:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes but tensors declare {cursor}")
    tensors: dict[str, np.ndarray] = {}
    for name, shape, start, end in entries:
        flat = np.frombuffer(payload, dtype="<f4", count=(end - start) // 4, offset=start)
        tensors[name] = flat.reshape(shape).astype(tensor.F32)
    return TensorFile(tensors, metadata)


# -- adapter conventions -------------------------------------------------


def save_adapter(path, adapter: LoraAdapter, extra_metadata: dict[str, str] | None = None) -> None:
    tensors = {}
    for (b, role), (a, bmat) in adapter.factors.items():
        tensors[f"blocks.{b}.{role}.lora_A"] = a
        tensors[f"blocks.{b}.{role}.lora_B"] = bmat
    metadata = {
        "kind": adapter.kind,
        "task_seed": str(adapter.task_seed),
        "rank": str(adapter.rank),
        "alpha": str(adapter.rank),  # recorded, never applied
    }
    if extra_metadata:
        metadata.update(extra_metadata)
    save_tensors(path, tensors, metadata)


def load_adapter(path) -> LoraAdapter:
    tf = load_tensorfile(path)
    return adapter_from_tensorfile(tf, str(path))


def adapter_from_tensorfile(tf: TensorFile, origin: str = "<memory>") -> LoraAdapter:
    """Validate adapter key conventions and metadata; returns the adapter."""
    kind = tf.metadata.get("kind")
    if kind not in KINDS:
        raise UnknownKindError(f"{origin}: adapter kind {kind!r} not in {KINDS}")
    try:
        task_seed = int(tf.metadata["task_seed"])
        rank = int(tf.metadata["rank"])
    except (KeyError, ValueError) as exc:
        raise KeyConventionError(f"{origin}: adapter metadata needs integer "
                                 f"task_seed and rank ({exc})") from exc
    grouped: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for name, arr in tf.tensors.items():
        parts = name.split(".")
        if (len(parts) != 4 or parts[0] != "blocks" or not parts[1].isdigit()
                or parts[2] not in ROLES or parts[3] not in ("lora_A", "lora_B")):
            raise KeyConventionError(f"{origin}: unexpected tensor key {name!r}")
        grouped.setdefault((int(parts[1]), parts[2]), {})[parts[3]] = arr
    if not grouped:
        raise MissingFactorError(f"{origin}: adapter contains no factor tensors")
    n_blocks = max(b for b, _ in grouped) + 1
    factors = {}
    for b in range(n_blocks):
        for role in ROLES:
            pair = grouped.get((b, role))
            if pair is None or "lora_A" not in pair or "lora_B" not in pair:
                raise MissingFactorError(
                    f"{origin}: projection blocks.{b}.{role} is missing a lora_A/lora_B factor")
            a, bmat = pair["lora_A"], pair["lora_B"]
            if a.ndim != 2 or bmat.ndim != 2 or a.shape[0] != rank or bmat.shape[1] != rank:
                raise RankMismatchError(
                    f"{origin}: blocks.{b}.{role} has A{a.shape} B{bmat.shape}, "
                    f"metadata rank is {rank}")
            factors[(b, role)] = (a, bmat)
    return LoraAdapter(kind=kind, rank=rank, task_seed=task_seed, factors=factors)


# -- merged delta conventions -------------------------------------------


def save_merged_deltas(path, deltas: dict[tuple[int, str], np.ndarray],
                       metadata: dict[str, str] | None = None) -> None:
    tensors = {f"blocks.{b}.{role}.delta_W": d for (b, role), d in deltas.items()}
    meta = {"kind": "merged"}
    if metadata:
        meta.update(metadata)
    save_tensors(path, tensors, meta)


def load_merged_deltas(path) -> tuple[dict[tuple[int, str], np.ndarray], dict[str, str]]:
    tf = load_tensorfile(path)
    deltas: dict[tuple[int, str], np.ndarray] = {}
    for name, arr in tf.tensors.items():
        parts = name.split(".")
        if (len(parts) != 4 or parts[0] != "blocks" or not parts[1].isdigit()
                or parts[2] not in ROLES or parts[3] != "delta_W"):
            raise KeyConventionError(f"{path}: unexpected tensor key {name!r} in merged file")
        deltas[(int(parts[1]), parts[2])] = arr
    return deltas, tf.metadata
