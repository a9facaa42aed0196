import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from apis.schemas.manifest import BlockSpan, BundleManifest, ShapeData
from domain.models import (
    NORM_NAMES,
    WEIGHT_NAMES,
    ModelShape,
    QuantizedBlock,
    QuantizedModel,
    ToyBlock,
    ToyModel,
)
from repo.base import file_op
from repo.generic_repo import GenericRepo

MAGIC = b"ATLM"
VERSION = 1
HEADER = struct.Struct("<4sHIIIIIB16s")
FLOAT = np.dtype("<f4")
FULL_PRECISION = 0


def weight_shapes(shape: ModelShape) -> dict[str, tuple[int, int]]:
    h, f = shape.hidden, shape.ffn
    return {"wq": (h, h), "wk": (h, h), "wv": (h, h), "wo": (h, h), "w1": (h, f), "w2": (f, h)}


def packed_size(count: int, bits: int) -> int:
    if bits == FULL_PRECISION:
        return count * FLOAT.itemsize
    if bits == 8:
        return count
    return (count + 1) // 2


def pack_int4(values: np.ndarray) -> bytes:
    """Two's-complement nibbles; the even index goes in the low nibble."""
    flat = values.astype(np.int64).ravel()
    if flat.size % 2:
        flat = np.append(flat, 0)
    nibbles = (flat & 0x0F).astype(np.uint8)
    return (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(raw.size * 2, dtype=np.int16)
    nibbles[0::2] = raw & 0x0F
    nibbles[1::2] = raw >> 4
    nibbles = nibbles[:count]
    return np.where(nibbles >= 8, nibbles - 16, nibbles).astype(np.int8)


@dataclass(frozen=True)
class BundleLayout:
    shape: ModelShape
    bits: int
    model_id: bytes

    @property
    def header_bytes(self) -> bytes:
        s = self.shape
        return HEADER.pack(MAGIC, VERSION, s.blocks, s.hidden, s.heads, s.ffn, s.vocab, self.bits, self.model_id)

    @property
    def identity_hash(self) -> str:
        return hashlib.sha256(self.header_bytes).hexdigest()

    @property
    def embedding_length(self) -> int:
        return (self.shape.vocab * self.shape.hidden + 2 * self.shape.hidden) * FLOAT.itemsize

    @property
    def block_length(self) -> int:
        length = 1  # flags byte
        for rows, cols in weight_shapes(self.shape).values():
            length += packed_size(rows * cols, self.bits)
            if self.bits != FULL_PRECISION:
                length += cols * FLOAT.itemsize
        return length + len(NORM_NAMES) * self.shape.hidden * FLOAT.itemsize

    def block_offset(self, index: int) -> int:
        if not 0 <= index < self.shape.blocks:
            raise IndexError(f"block {index} out of range for {self.shape.blocks} blocks")
        return HEADER.size + self.embedding_length + index * self.block_length

    def block_span(self, index: int) -> tuple[int, int]:
        offset = self.block_offset(index)
        return offset, offset + self.block_length

    @property
    def total_length(self) -> int:
        return HEADER.size + self.embedding_length + self.shape.blocks * self.block_length


def parse_header(data: bytes) -> BundleLayout:
    if len(data) < HEADER.size:
        raise BundleFormatError("file shorter than the bundle header")
    magic, version, blocks, hidden, heads, ffn, vocab, bits, model_id = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BundleFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BundleFormatError(f"unsupported bundle version {version}")
    if bits not in (FULL_PRECISION, 4, 8):
        raise BundleFormatError(f"unknown quantization tag {bits}")
    try:
        shape = ModelShape(blocks=blocks, hidden=hidden, heads=heads, ffn=ffn, vocab=vocab)
    except ValueError as e:
        raise BundleFormatError(str(e)) from e
    return BundleLayout(shape=shape, bits=bits, model_id=model_id)


def _floats(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype=FLOAT).tobytes()


def encode_block(block: ToyBlock | QuantizedBlock, bits: int) -> bytes:
    parts = [bytes([1 if block.residual else 0])]
    if bits == FULL_PRECISION:
        parts += [_floats(getattr(block, name)) for name in WEIGHT_NAMES]
        parts += [_floats(getattr(block, name)) for name in NORM_NAMES]
        return b"".join(parts)

    for name in WEIGHT_NAMES:
        integers = block.qweights[name]
        parts.append(integers.astype(np.int8).tobytes() if bits == 8 else pack_int4(integers))
        parts.append(_floats(block.scales[name]))
    parts += [_floats(block.norms[name]) for name in NORM_NAMES]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.offset = offset

    def take(self, length: int) -> bytes:
        end = self.offset + length
        if end > len(self.data):
            raise BundleFormatError("bundle data is truncated")
        chunk = self.data[self.offset : end]
        self.offset = end
        return bytes(chunk)

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * FLOAT.itemsize), dtype=FLOAT).reshape(shape).astype(np.float32)


def parse_block(data: bytes, layout: BundleLayout) -> ToyBlock | QuantizedBlock:
    """Decode one block from exactly its own byte span."""
    if len(data) != layout.block_length:
        raise BundleFormatError(f"block span has {len(data)} bytes, expected {layout.block_length}")
    reader = _Reader(data)
    residual = reader.take(1) != b"\x00"
    shapes = weight_shapes(layout.shape)
    hidden = layout.shape.hidden
    heads = layout.shape.heads

    if layout.bits == FULL_PRECISION:
        params = {name: reader.floats(shape).astype(np.float64) for name, shape in shapes.items()}
        params.update({name: reader.floats((hidden,)).astype(np.float64) for name in NORM_NAMES})
        return ToyBlock(**params, heads=heads, residual=residual)

    qweights, scales = {}, {}
    for name, (rows, cols) in shapes.items():
        count = rows * cols
        raw = reader.take(packed_size(count, layout.bits))
        if layout.bits == 8:
            integers = np.frombuffer(raw, dtype=np.int8).copy()
        else:
            integers = unpack_int4(raw, count)
        qweights[name] = integers.reshape(rows, cols)
        scales[name] = reader.floats((cols,))
    norms = {name: reader.floats((hidden,)) for name in NORM_NAMES}
    try:
        return QuantizedBlock(
            bits=layout.bits, qweights=qweights, scales=scales, norms=norms, heads=heads, residual=residual
        )
    except ValueError as e:
        raise BundleFormatError(str(e)) from e


def model_bits(model: ToyModel | QuantizedModel) -> int:
    return model.bits if isinstance(model, QuantizedModel) else FULL_PRECISION


def encode_bundle(model: ToyModel | QuantizedModel, model_id: bytes) -> tuple[bytes, BundleLayout]:
    if len(model_id) != 16:
        raise ValueError("model id must be 16 bytes")
    bits = model_bits(model)
    layout = BundleLayout(shape=model.shape, bits=bits, model_id=model_id)
    parts = [layout.header_bytes, _floats(model.embedding), _floats(model.final_gain), _floats(model.final_bias)]
    parts += [encode_block(block, bits) for block in model.blocks]
    data = b"".join(parts)
    if len(data) != layout.total_length:
        raise BundleFormatError("encoded bundle length disagrees with its layout")
    return data, layout


def decode_bundle(data: bytes) -> tuple[ToyModel | QuantizedModel, BundleLayout]:
    layout = parse_header(data)
    if len(data) != layout.total_length:
        raise BundleFormatError(f"bundle has {len(data)} bytes, header implies {layout.total_length}")
    shape = layout.shape
    reader = _Reader(data, HEADER.size)
    embedding = reader.floats((shape.vocab, shape.hidden))
    final_gain = reader.floats((shape.hidden,))
    final_bias = reader.floats((shape.hidden,))
    blocks = [parse_block(data[slice(*layout.block_span(i))], layout) for i in range(shape.blocks)]

    if layout.bits == FULL_PRECISION:
        model = ToyModel(
            embedding=embedding.astype(np.float64),
            blocks=blocks,
            final_gain=final_gain.astype(np.float64),
            final_bias=final_bias.astype(np.float64),
        )
    else:
        model = QuantizedModel(
            bits=layout.bits, embedding=embedding, blocks=blocks, final_gain=final_gain, final_bias=final_bias
        )
    return model, layout


def build_manifest(data: bytes, layout: BundleLayout) -> BundleManifest:
    shape = layout.shape
    tensors = {"embedding": [shape.vocab, shape.hidden]}
    tensors.update({name: list(dims) for name, dims in weight_shapes(shape).items()})
    return BundleManifest(
        version=VERSION,
        shape=ShapeData(
            blocks=shape.blocks, hidden=shape.hidden, heads=shape.heads, ffn=shape.ffn, vocab=shape.vocab
        ),
        bits=layout.bits,
        model_id=layout.model_id.hex(),
        identity_sha256=layout.identity_hash,
        content_sha256=hashlib.sha256(data).hexdigest(),
        blocks=[
            BlockSpan(index=i, offset=layout.block_offset(i), length=layout.block_length)
            for i in range(shape.blocks)
        ],
        tensors=tensors,
    )


def manifest_path(bundle_path: Path) -> Path:
    return Path(str(bundle_path) + ".json")


class BundleRepo(GenericRepo):
    def save(self, model: ToyModel | QuantizedModel, path, model_id: bytes) -> BundleManifest:
        data, layout = encode_bundle(model, model_id)
        return self.save_bytes(data, path, layout)

    def save_bytes(self, data: bytes, path, layout: BundleLayout | None = None) -> BundleManifest:
        layout = layout or parse_header(data)
        manifest = build_manifest(data, layout)
        self._write_bytes(path, data)
        self._write_manifest(manifest_path(self.resolve(path)), manifest)
        return manifest

    @file_op
    def _write_bytes(self, handle: BinaryIO, path: Path, data: bytes) -> None:
        handle.write(data)

    @file_op
    def _write_manifest(self, handle: BinaryIO, path: Path, manifest: BundleManifest) -> None:
        handle.write(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True).encode("utf-8"))

    def load(self, path) -> tuple[ToyModel | QuantizedModel, BundleLayout]:
        return decode_bundle(self.resolve(path).read_bytes())

    def read_layout(self, path) -> BundleLayout:
        with self.resolve(path).open("rb") as handle:
            return parse_header(handle.read(HEADER.size))

    def load_manifest(self, path) -> BundleManifest:
        raw = manifest_path(self.resolve(path)).read_text(encoding="utf-8")
        return BundleManifest.model_validate_json(raw)

    def remove(self, path) -> None:
        path = self.resolve(path)
        path.unlink(missing_ok=True)
        manifest_path(path).unlink(missing_ok=True)


class BundleFormatError(ValueError):
    pass
