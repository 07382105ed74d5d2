"""
Checkpoint IO for mcqa-lens
Layout: 8-byte little-endian header length, UTF-8 JSON header, raw little-endian float32 payload
Each header entry is {"dtype", "shape", "offset"}; offset is the tensor's first byte within the payload
"""

import hashlib
import json
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from errors import CheckpointError, ConfigurationError
from transformer import ModelConfig, Transformer, Weights, weight_shapes

logger = logging.getLogger(__name__)

CONFIG_KEY = "__config__"
DTYPE = "f32"
_HEADER_LEN = struct.Struct("<Q")


def save_checkpoint(weights: Weights, config: ModelConfig, path: Union[str, Path]) -> None:
    """Write weights in canonical order; identical inputs give identical bytes"""
    header = {CONFIG_KEY: config.to_dict()}
    chunks = []
    offset = 0
    for name, shape in weight_shapes(config).items():
        data = np.ascontiguousarray(weights[name], dtype="<f4")
        if data.shape != shape:
            raise CheckpointError(f"shape {data.shape} does not match config shape {shape}", tensor=name)
        raw = data.tobytes()
        header[name] = {"dtype": DTYPE, "shape": list(shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_HEADER_LEN.pack(len(header_bytes)))
        handle.write(header_bytes)
        for raw in chunks:
            handle.write(raw)
    logger.info(f"saved checkpoint {path} ({offset} payload bytes)")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Weights, ModelConfig]:
    """Read and validate a checkpoint written by save_checkpoint"""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER_LEN.size:
        raise CheckpointError(f"{path}: file too short for a header length")
    (header_len,) = _HEADER_LEN.unpack_from(blob)
    start = _HEADER_LEN.size + header_len
    if start > len(blob):
        raise CheckpointError(f"{path}: corrupt header length {header_len}")
    try:
        header = json.loads(blob[_HEADER_LEN.size:start].decode("utf-8"))
        config = ModelConfig.from_dict(header[CONFIG_KEY])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigurationError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e

    payload = memoryview(blob)[start:]
    weights: Weights = {}
    end_of_data = 0
    for name, shape in weight_shapes(config).items():
        entry = header.get(name)
        if not isinstance(entry, dict):
            raise CheckpointError("missing from header", tensor=name)
        if entry.get("dtype") != DTYPE:
            raise CheckpointError(f"unsupported dtype {entry.get('dtype')!r}", tensor=name)
        if tuple(entry.get("shape", ())) != shape:
            raise CheckpointError(f"header shape {entry.get('shape')} does not match config shape {list(shape)}", tensor=name)
        begin = entry.get("offset")
        if isinstance(begin, bool) or not isinstance(begin, int) or begin < 0:
            raise CheckpointError(f"malformed offset {begin!r}", tensor=name)
        end = begin + 4 * int(np.prod(shape))
        if end > len(payload):
            raise CheckpointError(f"payload truncated (needs bytes {begin}..{end}, have {len(payload)})", tensor=name)
        weights[name] = np.frombuffer(payload[begin:end], dtype="<f4").astype(np.float32).reshape(shape)
        end_of_data = max(end_of_data, end)
    if end_of_data != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end_of_data} unexpected trailing payload bytes")
    return weights, config


def load_model(path: Union[str, Path]) -> Transformer:
    weights, config = load_checkpoint(path)
    return Transformer(config, weights)


def checkpoint_sha256(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
