"""
Checkpoint container.

Layout (all integers little-endian):

    bytes 0-7     magic  b"CVAECKPT"
    bytes 8-11    uint32 format version
    bytes 12-19   uint64 header length H
    next H bytes  UTF-8 JSON header (sorted keys, compact separators)
    remainder     raw tensor bytes, concatenated in header["tensors"] order

The header holds ``dims`` (m, s, h, d), ``dtype``, ``model`` (dropout_p,
normalize_before_dropout), ``manifest`` (seed, beta, epoch, ...), ``adam``
(hyperparameters and step) and ``tensors``: a list of {name, shape, offset,
nbytes}. Parameters come first in the order enc_w1, enc_b1, enc_w_mu, enc_b_mu,
enc_w_logvar, enc_b_logvar, dec_w1, dec_b1, dec_w2, dec_b2, followed by the
Adam moments as ``adam.m.<name>`` and ``adam.v.<name>`` in the same order.

Nothing time-dependent is written, so save -> load -> save is byte-identical.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from cvaerec.config import settings
from cvaerec.core.exceptions import CheckpointError
from cvaerec.models.cvae import PARAM_ORDER, ConditionedVAE, ModelParams
from cvaerec.utils.ndmath import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"CVAECKPT"
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    params: ModelParams
    adam_states: Optional[Dict[str, AdamState]] = None
    manifest: Dict[str, Any] = field(default_factory=dict)
    dropout_p: float = 0.5
    normalize_before_dropout: bool = True

    def to_model(self) -> ConditionedVAE:
        return ConditionedVAE(self.params.copy(), self.dropout_p, self.normalize_before_dropout)


def _tensor_bytes(array: np.ndarray, dtype: np.dtype) -> bytes:
    return np.ascontiguousarray(array, dtype=dtype.newbyteorder("<")).tobytes()


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    dtype = np.dtype(params.dtype)
    dims = params.dims

    tensors: List[Tuple[str, np.ndarray]] = list(params.items())
    adam_header: Optional[Dict[str, Any]] = None
    if checkpoint.adam_states:
        first = checkpoint.adam_states[PARAM_ORDER[0]]
        adam_header = {"step": first.step, "lr": first.lr, "beta1": first.beta1,
                       "beta2": first.beta2, "eps_hat": first.eps_hat}
        for name in PARAM_ORDER:
            tensors.append((f"adam.m.{name}", checkpoint.adam_states[name].first_moment))
        for name in PARAM_ORDER:
            tensors.append((f"adam.v.{name}", checkpoint.adam_states[name].second_moment))

    table, blobs, offset = [], [], 0
    for name, array in tensors:
        blob = _tensor_bytes(array, dtype)
        table.append({"name": name, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = {
        "version": settings.CHECKPOINT_FORMAT_VERSION,
        "dims": {"m": dims.m, "s": dims.s, "h": dims.h, "d": dims.d},
        "dtype": dtype.name,
        "model": {"dropout_p": checkpoint.dropout_p,
                  "normalize_before_dropout": checkpoint.normalize_before_dropout},
        "manifest": checkpoint.manifest,
        "adam": adam_header,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = _PREFIX.pack(MAGIC, settings.CHECKPOINT_FORMAT_VERSION, len(header_bytes))
    return prefix + header_bytes + b"".join(blobs)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = target.with_name(target.name + ".tmp")
    staging.write_bytes(serialize_checkpoint(checkpoint))
    staging.replace(target)
    logger.debug(f"Checkpoint written to {target}")
    return target


def deserialize_checkpoint(blob: bytes, expected_m: Optional[int] = None,
                           expected_s: Optional[int] = None) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != settings.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported (expected {settings.CHECKPOINT_FORMAT_VERSION})"
        )
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"checkpoint header is corrupt: {e}") from e

    dims = header["dims"]
    if expected_m is not None and dims["m"] != expected_m:
        raise CheckpointError(f"checkpoint has m={dims['m']} items, the split has {expected_m}")
    if expected_s is not None and dims["s"] != expected_s:
        raise CheckpointError(f"checkpoint has s={dims['s']} categories, expected {expected_s}")

    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    data_start = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        lo = data_start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointError(f"tensor {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(blob[lo:hi], dtype=dtype).reshape(entry["shape"]).astype(
            np.dtype(header["dtype"]), copy=True)

    try:
        params = ModelParams(s=dims["s"], **{name: arrays[name] for name in PARAM_ORDER})
    except KeyError as e:
        raise CheckpointError(f"checkpoint is missing tensor {e}") from e

    adam_states = None
    if header.get("adam"):
        adam = header["adam"]
        adam_states = {
            name: AdamState(arrays[f"adam.m.{name}"], arrays[f"adam.v.{name}"], adam["step"],
                            adam["lr"], adam["beta1"], adam["beta2"], adam["eps_hat"])
            for name in PARAM_ORDER
        }
    model = header.get("model", {})
    return Checkpoint(
        params=params,
        adam_states=adam_states,
        manifest=header.get("manifest", {}),
        dropout_p=model.get("dropout_p", 0.5),
        normalize_before_dropout=model.get("normalize_before_dropout", True),
    )


def load_checkpoint(path: str, expected_m: Optional[int] = None, expected_s: Optional[int] = None) -> Checkpoint:
    source = Path(path)
    if not source.exists():
        raise CheckpointError(f"checkpoint not found: {source}")
    return deserialize_checkpoint(source.read_bytes(), expected_m, expected_s)
