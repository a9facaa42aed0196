import base64
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from domain.models import KeyStore, TriggerSet, WatermarkKey, array_digest


class ArrayData(BaseModel):
    """Little-endian array, base64 encoded."""

    model_config = ConfigDict(extra="forbid")

    dtype: Literal["float32", "int32"]
    shape: list[int]
    data: str

    @classmethod
    def from_array(cls, array: np.ndarray, dtype: str) -> "ArrayData":
        contiguous = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
        return cls(dtype=dtype, shape=list(contiguous.shape), data=base64.b64encode(contiguous.tobytes()).decode())

    def to_array(self) -> np.ndarray:
        raw = base64.b64decode(self.data)
        array = np.frombuffer(raw, dtype=np.dtype(self.dtype).newbyteorder("<"))
        return array.reshape(self.shape).astype(self.dtype)


class KeyRecordData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    block_index: int = Field(..., ge=0)
    channels: list[int]
    projection: ArrayData
    signature: str = Field(..., pattern=r"^[01]*$")
    checkpoint: ArrayData
    checkpoint_digest: str

    @model_validator(mode="after")
    def check_digest(self) -> "KeyRecordData":
        checkpoint = self.checkpoint.to_array().astype(np.float64)
        if array_digest(checkpoint) != self.checkpoint_digest:
            raise ValueError(f"checkpoint digest mismatch for block {self.block_index}")
        return self

    @classmethod
    def from_domain(cls, key: WatermarkKey) -> "KeyRecordData":
        return cls(
            block_index=key.block_index,
            channels=[int(c) for c in key.channels],
            projection=ArrayData.from_array(key.projection, "float32"),
            signature="".join(str(int(b)) for b in key.signature),
            checkpoint=ArrayData.from_array(key.checkpoint, "float32"),
            checkpoint_digest=key.checkpoint_digest,
        )

    def to_domain(self) -> WatermarkKey:
        projection = self.projection.to_array().astype(np.float64)
        if not self.signature:
            projection = projection.reshape(0, len(self.channels))
        return WatermarkKey(
            block_index=self.block_index,
            projection=projection,
            channels=np.asarray(self.channels, dtype=np.int64),
            signature=np.array([int(c) for c in self.signature], dtype=np.int8),
            checkpoint=self.checkpoint.to_array().astype(np.float64),
        )


class TriggerData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    tokens: ArrayData


class KeyStoreData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bits: Literal[0, 4, 8]
    identity_hash: str
    total_bits: int = Field(..., ge=0)
    trigger: TriggerData
    records: list[KeyRecordData]

    @classmethod
    def from_domain(cls, store: KeyStore) -> "KeyStoreData":
        return cls(
            bits=store.bits,
            identity_hash=store.identity_hash,
            total_bits=store.total_bits,
            trigger=TriggerData(seed=store.trigger.seed, tokens=ArrayData.from_array(store.trigger.tokens, "int32")),
            records=[KeyRecordData.from_domain(key) for key in store.keys],
        )

    def to_domain(self) -> KeyStore:
        return KeyStore(
            keys=[record.to_domain() for record in self.records],
            trigger=TriggerSet(tokens=self.trigger.tokens.to_array().astype(np.int64), seed=self.trigger.seed),
            bits=self.bits,
            identity_hash=self.identity_hash,
            total_bits=self.total_bits,
        )
