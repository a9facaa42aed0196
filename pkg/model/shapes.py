from dataclasses import dataclass

from domain.models import ModelShape

TOY_SCALE = 32


@dataclass(frozen=True)
class ReferenceShape:
    name: str
    blocks: int
    hidden: int
    vocab: int
    attest_samples: int

    def toy(self, heads: int = 4, vocab: int = 512) -> ModelShape:
        """Same block count, hidden size shrunk by TOY_SCALE, FFN at 4x hidden."""
        hidden = max(heads, self.hidden // TOY_SCALE)
        hidden -= hidden % heads
        return ModelShape(blocks=self.blocks, hidden=hidden, heads=heads, ffn=4 * hidden, vocab=vocab)


# Reference on-device deployments with their (L, k) attestation pairs.
REFERENCE_SHAPES: dict[str, ReferenceShape] = {
    "llama3-1b": ReferenceShape("llama3-1b", blocks=16, hidden=2048, vocab=128256, attest_samples=2),
    "llama3-3b": ReferenceShape("llama3-3b", blocks=28, hidden=3072, vocab=128256, attest_samples=2),
    "llama3-8b": ReferenceShape("llama3-8b", blocks=32, hidden=4096, vocab=128256, attest_samples=4),
    "qwen3-4b": ReferenceShape("qwen3-4b", blocks=36, hidden=2560, vocab=151936, attest_samples=4),
    "qwen3-8b": ReferenceShape("qwen3-8b", blocks=36, hidden=4096, vocab=151936, attest_samples=4),
    "phi4-15b": ReferenceShape("phi4-15b", blocks=40, hidden=5120, vocab=100352, attest_samples=6),
}

DEFAULT_TOY_SHAPE = ModelShape(blocks=16, hidden=64, heads=4, ffn=256, vocab=512)


def reference_shape(name: str) -> ReferenceShape:
    try:
        return REFERENCE_SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown model preset '{name}', expected one of {sorted(REFERENCE_SHAPES)}") from None
