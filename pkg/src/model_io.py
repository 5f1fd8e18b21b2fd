# src/model_io.py: "HDN1" model images, a fixed header followed by float64 arrays

import os
import struct

import numpy as np
from loguru import logger

from src.errors import ConfigurationError, FormatError
from src.network import GateConfig, Layer, ModelConfig, Parameters, check_params, init_shapes, param_count
from src.utils import retry

MAGIC = b"HDN1"
VERSION = 1
ARCH_CODES = {"plain_dnn": 0, "highway": 1}
_HEADER = struct.Struct("<4s9IQ")  # magic, version, 4 dims, arch, 3 gate flags, param count
_FLOAT = np.dtype("<f8")


def _pack_header(config):
    gate = config.gate
    return _HEADER.pack(
        MAGIC, VERSION,
        config.input_dim, config.hidden_dim, config.num_layers, config.output_dim,
        ARCH_CODES[config.architecture],
        int(gate.transform), int(gate.carry), int(gate.constrained),
        param_count(config),
    )


@retry()
def save_model(params, config, path):
    check_params(params, config)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(_pack_header(config))
        for array in params.arrays():
            f.write(np.ascontiguousarray(array, dtype=_FLOAT).tobytes())
    os.replace(tmp_path, path)
    logger.info(f"💾 Model {config.describe()} saved to {path} ({param_count(config)} parameters)")
    return path


def _decode_header(blob):
    if len(blob) < _HEADER.size:
        raise FormatError(f"file ends inside the {_HEADER.size}-byte header", offset=len(blob))
    magic, version, d, h, l, j, arch, transform, carry, constrained, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    arch_names = {code: name for name, code in ARCH_CODES.items()}
    if arch not in arch_names:
        raise FormatError(f"unknown architecture code {arch}", offset=24)
    for offset, flag in ((28, transform), (32, carry), (36, constrained)):
        if flag not in (0, 1):
            raise FormatError(f"gate flag must be 0 or 1, got {flag}", offset=offset)
    try:
        config = ModelConfig(d, h, l, j, arch_names[arch], GateConfig(bool(transform), bool(carry), bool(constrained)))
    except ConfigurationError as e:
        raise FormatError(f"header describes an invalid model: {e}", offset=8) from e
    if count != param_count(config):
        raise FormatError(
            f"header parameter count {count} does not match {param_count(config)} for {config.describe()}",
            offset=40,
        )
    return config


def load_model(path):
    """Read a model image; nothing is returned unless the whole file validates."""
    with open(path, "rb") as f:
        blob = f.read()
    config = _decode_header(blob)
    offset = _HEADER.size
    arrays = []
    for shape in init_shapes(config):
        nbytes = int(np.prod(shape)) * _FLOAT.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated parameter array of shape {shape}", offset=len(blob))
        arrays.append(np.frombuffer(blob, dtype=_FLOAT, count=nbytes // _FLOAT.itemsize, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after the parameters", offset=offset)

    it = iter(arrays)
    hidden = [Layer(next(it), next(it)) for _ in range(config.num_layers)]
    transform = next(it) if config.has_transform_weights else None
    carry = next(it) if config.has_carry_weights else None
    params = Parameters(hidden, Layer(next(it), next(it)), transform, carry)
    logger.info(f"✅ Loaded {config.describe()} from {path}")
    return params, config
