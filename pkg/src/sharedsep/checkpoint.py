"""Binary checkpoint container.

Layout::

    8 bytes   magic  b"SHSEPCK\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   manifest length in bytes, uint64 little-endian
    N bytes   UTF-8 JSON manifest: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    ...       raw little-endian tensor buffers, back to back, offsets relative to this point
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointShapeError, CheckpointVersionError, CorruptCheckpointError

MAGIC = b"SHSEPCK\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


def write_container(path, arrays: dict[str, np.ndarray], meta: dict):
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(a.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorruptCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _HEADER.size
    if start + mlen > len(blob):
        raise CorruptCheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    data_start = start + mlen
    arrays = {}
    for e in manifest["tensors"]:
        lo = data_start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated data for tensor {e['name']!r}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=lo)
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    return arrays, manifest["meta"]


def assign_state(model, state: dict[str, np.ndarray]):
    """Copy arrays into a model in place, checking names and shapes first."""
    targets = {name: t.data for name, t in model.named_tensors()}
    targets.update(dict(model.named_buffers()))
    for name, dst in targets.items():
        if name not in state:
            raise CheckpointShapeError(f"tensor {name!r} missing from checkpoint")
        if tuple(state[name].shape) != dst.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tuple(state[name].shape)} != model shape {dst.shape}"
            )
    for name, dst in targets.items():
        dst[...] = state[name]


def save_checkpoint(model, path, *, normalization=None, stft_config=None, optimizers=None, extra=None):
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"model": model.meta(), "seed": model.seed}
    if normalization is not None:
        arrays["norm.per_bin_std"] = normalization.per_bin_std
        meta["normalization"] = {"epsilon": normalization.epsilon}
    if stft_config is not None:
        meta["stft"] = stft_config.to_dict()
    if optimizers:
        for group, opt in optimizers.items():
            for k, v in opt.state_arrays().items():
                arrays[f"optim.{group}.{k}"] = v
        meta["optimizers"] = sorted(optimizers)
    if extra:
        meta["extra"] = extra
    write_container(path, arrays, meta)


class Checkpoint:
    """Loaded checkpoint: the rebuilt model plus whatever front-end settings were stored."""

    def __init__(self, model, normalization, stft_config, meta, arrays):
        self.model = model
        self.normalization = normalization
        self.stft_config = stft_config
        self.meta = meta
        self.arrays = arrays

    def optimizer_state(self, group: str) -> dict[str, np.ndarray]:
        prefix = f"optim.{group}."
        return {k[len(prefix):]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def load_checkpoint(path, into=None) -> Checkpoint:
    """Read a checkpoint and rebuild its model, or load it into ``into``.

    Loading into an existing model raises :class:`CheckpointShapeError` naming
    the first tensor whose shape disagrees.
    """
    from .dsp import NormalizationStats, StftConfig
    from .model import IndependentNetworks, SharedModel, WidthProfile

    arrays, meta = read_container(path)
    mmeta = meta.get("model")
    if mmeta is None:
        raise CorruptCheckpointError(f"{path}: manifest has no model section")
    state = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    if into is None:
        cls = IndependentNetworks if mmeta["kind"] == "independent" else SharedModel
        model = cls(
            WidthProfile.from_dict(mmeta["profile"]),
            tuple(mmeta["io_shape"]),
            tuple(mmeta["sources"]),
            fm_avg=mmeta["fm_avg"],
            seed=meta.get("seed", 0),
            dtype=np.dtype(mmeta["dtype"]),
        )
    else:
        model = into
    assign_state(model, state)
    norm = None
    if "norm.per_bin_std" in arrays:
        norm = NormalizationStats(arrays["norm.per_bin_std"], meta["normalization"]["epsilon"])
    stft_cfg = StftConfig(**meta["stft"]) if "stft" in meta else None
    return Checkpoint(model, norm, stft_cfg, meta, arrays)
