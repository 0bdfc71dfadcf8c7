"""Versioned checkpoint container.

Layout: an ASCII header, one ``key value`` per line and terminated by a line
``end``, followed by every parameter as raw little-endian float32 in layer
order (``W`` before ``b``). The header carries a CRC32 of the payload::

    ceskd-checkpoint
    version 1
    depth_tag 4
    seed 17
    input_shape 16
    layer dense 16 32
    layer relu
    layer dense 32 10
    block 0 W 16 32
    block 0 b 32
    ...
    crc32 1a2b3c4d
    end
"""
import hashlib
import zlib

import numpy as np

from .exceptions import CheckpointError, ConfigurationError
from .nn import LayerSpec, Model

MAGIC = "ceskd-checkpoint"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def _header(model, crc):
    lines = [MAGIC, f"version {VERSION}", f"depth_tag {model.depth_tag}",
             f"seed {'none' if model.seed is None else int(model.seed)}",
             "input_shape " + " ".join(str(s) for s in model.input_shape)]
    lines += [f"layer {spec.to_text()}" for spec in model.layers]
    lines += [f"block {i} {name} " + " ".join(str(s) for s in a.shape)
              for i, name, a in model.parameters()]
    lines += [f"crc32 {crc:08x}", "end"]
    return ("\n".join(lines) + "\n").encode("ascii")


def to_bytes(model: Model) -> bytes:
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for _, _, a in model.parameters())
    return _header(model, zlib.crc32(payload)) + payload


def save_checkpoint(model: Model, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def from_bytes(raw: bytes, source="<bytes>") -> Model:
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{source}: header terminator not found")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{source}: header is not ASCII") from None
    payload = raw[end + 5:]
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{source}: not a ceskd checkpoint")
    fields, layers, blocks = {}, [], []
    for lineno, line in enumerate(lines[1:], start=2):
        key, _, value = line.partition(" ")
        if key == "layer":
            try:
                layers.append(LayerSpec.from_text(value))
            except ConfigurationError as exc:
                raise CheckpointError(f"{source}: header line {lineno}: {exc}") from None
        elif key == "block":
            blocks.append(value.split())
        elif key in ("version", "depth_tag", "seed", "input_shape", "crc32"):
            fields[key] = value
        else:
            raise CheckpointError(f"{source}: header line {lineno}: unknown field {key!r}")
    missing = {"version", "depth_tag", "seed", "input_shape", "crc32"} - fields.keys()
    if missing:
        raise CheckpointError(f"{source}: header lacks {sorted(missing)}")
    try:
        version = int(fields["version"])
        depth_tag = int(fields["depth_tag"])
        seed = None if fields["seed"] == "none" else int(fields["seed"])
        input_shape = tuple(int(s) for s in fields["input_shape"].split())
        crc = int(fields["crc32"], 16)
        block_shapes = [(int(b[0]), b[1], tuple(int(s) for s in b[2:])) for b in blocks]
    except (ValueError, IndexError):
        raise CheckpointError(f"{source}: malformed header value") from None
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads version {VERSION}")
    expected = sum(int(np.prod(shape)) for _, _, shape in block_shapes) * 4
    if len(payload) != expected:
        raise CheckpointError(f"{source}: parameter payload is {len(payload)} bytes, header implies {expected}")
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{source}: parameter payload checksum mismatch (corrupt file)")
    params = [{} for _ in layers]
    offset = 0
    for layer, name, shape in block_shapes:
        if not 0 <= layer < len(layers) or name not in ("W", "b"):
            raise CheckpointError(f"{source}: bad parameter block {layer} {name}")
        count = int(np.prod(shape))
        params[layer][name] = np.frombuffer(payload, dtype=_LE_F32, count=count,
                                            offset=offset).astype(np.float32).reshape(shape)
        offset += count * 4
    try:
        return Model(layers, params, input_shape, depth_tag=depth_tag, seed=seed)
    except ConfigurationError as exc:
        raise CheckpointError(f"{source}: {exc}") from None


def load_checkpoint(path, expected_depth_tag=None) -> Model:
    with open(path, "rb") as fh:
        model = from_bytes(fh.read(), str(path))
    if expected_depth_tag is not None and model.depth_tag != expected_depth_tag:
        raise CheckpointError(
            f"{path}: checkpoint depth_tag {model.depth_tag} does not match expected {expected_depth_tag}")
    return model


def checkpoint_id(path):
    """Short content hash identifying a checkpoint file."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
