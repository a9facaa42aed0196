from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class ShapeData(BaseModel):
    model_config = ConfigDict(extra="forbid")

    blocks: int = Field(..., ge=2)
    hidden: int = Field(..., ge=1)
    heads: int = Field(..., ge=1)
    ffn: int = Field(..., ge=1)
    vocab: int = Field(..., ge=1)


class BlockSpan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index: int
    offset: int
    length: int


class BundleManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["ATLM"] = "ATLM"
    version: int
    shape: ShapeData
    bits: Literal[0, 4, 8]
    model_id: str
    identity_sha256: str
    content_sha256: str
    blocks: list[BlockSpan]
    tensors: dict[str, list[int]]
