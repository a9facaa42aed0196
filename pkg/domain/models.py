import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

WEIGHT_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2")
NORM_NAMES = ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
PARAM_NAMES = WEIGHT_NAMES + NORM_NAMES


def array_digest(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for array in arrays:
        contiguous = np.ascontiguousarray(array)
        digest.update(str(contiguous.dtype).encode("ascii"))
        digest.update(str(contiguous.shape).encode("ascii"))
        digest.update(contiguous.tobytes())
    return digest.hexdigest()


# Model entities
@dataclass(frozen=True)
class ModelShape:
    blocks: int
    hidden: int
    heads: int
    ffn: int
    vocab: int

    def __post_init__(self):
        if self.blocks < 2:
            raise ValueError(f"a model needs at least 2 blocks, got {self.blocks}")
        if min(self.hidden, self.heads, self.ffn, self.vocab) < 1:
            raise ValueError(f"model dimensions must be positive: {self}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")


@dataclass
class ToyBlock:
    """
    Pre-norm transformer block. Weights are stored (in, out) so activations
    multiply from the left: `x @ wq`.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    heads: int = 1
    residual: bool = True

    def __post_init__(self):
        hidden = self.wq.shape[0]
        ffn = self.w1.shape[1]
        expected = {
            "wq": (hidden, hidden),
            "wk": (hidden, hidden),
            "wv": (hidden, hidden),
            "wo": (hidden, hidden),
            "w1": (hidden, ffn),
            "w2": (ffn, hidden),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in NORM_NAMES:
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected ({hidden},)")
        if hidden % self.heads != 0:
            raise ValueError(f"hidden size {hidden} is not divisible by {self.heads} heads")

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @property
    def ffn(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> "ToyBlock":
        return replace(self, **params)

    def copy(self) -> "ToyBlock":
        return self.with_params({name: value.copy() for name, value in self.params().items()})

    def squared_distance(self, other: "ToyBlock") -> float:
        return float(sum(np.sum((value - getattr(other, name)) ** 2) for name, value in self.params().items()))

    @property
    def digest(self) -> str:
        return array_digest(*self.params().values())


@dataclass
class ToyModel:
    embedding: np.ndarray
    blocks: list[ToyBlock]
    final_gain: np.ndarray
    final_bias: np.ndarray

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ValueError(f"a model needs at least 2 blocks, got {len(self.blocks)}")
        for block in self.blocks:
            if block.hidden != self.hidden:
                raise ValueError(f"block hidden size {block.hidden} differs from embedding size {self.hidden}")

    @property
    def shape(self) -> ModelShape:
        first = self.blocks[0]
        return ModelShape(
            blocks=len(self.blocks), hidden=self.hidden, heads=first.heads, ffn=first.ffn, vocab=self.vocab_size
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden(self) -> int:
        return self.embedding.shape[1]

    @property
    def block_count(self) -> int:
        return len(self.blocks)


@dataclass
class ActivationTrace:
    """inputs is the embedding output; outputs[i] is block i's output."""

    inputs: np.ndarray
    outputs: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.outputs[index]

    def previous(self, index: int) -> np.ndarray:
        return self.inputs if index == 0 else self.outputs[index - 1]


# Quantized entities
QUANT_RANGES = {8: 127, 4: 7}


@dataclass
class QuantizedBlock:
    bits: int
    qweights: dict[str, np.ndarray]
    scales: dict[str, np.ndarray]
    norms: dict[str, np.ndarray]
    heads: int = 1
    residual: bool = True

    def __post_init__(self):
        if self.bits not in QUANT_RANGES:
            raise ValueError(f"unsupported bit-width {self.bits}")
        qmax = QUANT_RANGES[self.bits]
        for name in WEIGHT_NAMES:
            values = self.qweights[name]
            if values.size and (values.max() > qmax or values.min() < -qmax):
                raise ValueError(f"{name} holds integers outside [-{qmax}, {qmax}]")
            if self.scales[name].shape != (values.shape[1],):
                raise ValueError(f"{name} needs one scale per output channel")

    @property
    def qmax(self) -> int:
        return QUANT_RANGES[self.bits]

    @property
    def zero_points(self) -> dict[str, np.ndarray]:
        return {name: np.zeros(self.scales[name].shape, dtype=np.int8) for name in WEIGHT_NAMES}

    @property
    def hidden(self) -> int:
        return self.qweights["wq"].shape[0]

    @property
    def ffn(self) -> int:
        return self.qweights["w1"].shape[1]

    def with_qweights(self, qweights: dict[str, np.ndarray]) -> "QuantizedBlock":
        return replace(self, qweights=qweights)

    @property
    def digest(self) -> str:
        arrays = [self.qweights[n] for n in WEIGHT_NAMES] + [self.scales[n] for n in WEIGHT_NAMES]
        arrays += [self.norms[n] for n in NORM_NAMES]
        return array_digest(*arrays)


@dataclass
class QuantizedModel:
    bits: int
    embedding: np.ndarray
    blocks: list[QuantizedBlock]
    final_gain: np.ndarray
    final_bias: np.ndarray

    @property
    def shape(self) -> ModelShape:
        first = self.blocks[0]
        return ModelShape(
            blocks=len(self.blocks),
            hidden=self.embedding.shape[1],
            heads=first.heads,
            ffn=first.ffn,
            vocab=self.embedding.shape[0],
        )

    @property
    def block_count(self) -> int:
        return len(self.blocks)


# Watermark entities
@dataclass
class SignatureSpec:
    bits: np.ndarray
    lengths: list[int]

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8)
        if sum(self.lengths) != self.bits.size:
            raise ValueError(f"slice lengths sum to {sum(self.lengths)}, signature has {self.bits.size} bits")
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise ValueError("signature bits must be 0 or 1")

    @property
    def total_bits(self) -> int:
        return int(self.bits.size)

    @property
    def offsets(self) -> list[int]:
        return [int(v) for v in np.concatenate([[0], np.cumsum(self.lengths)[:-1]])] if self.lengths else []

    def slice(self, block_index: int) -> np.ndarray:
        start = self.offsets[block_index]
        return self.bits[start : start + self.lengths[block_index]]


def bits_to_targets(bits: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(bits) > 0, 1.0, -1.0)


@dataclass
class WatermarkKey:
    """
    Per-block secret: projection WM (|B_i| x |C|), channels C, signature slice and
    the checkpointed input activation A_{i-1}. Decoding: bit = 1 iff projection > 0.
    """

    block_index: int
    projection: np.ndarray
    channels: np.ndarray
    signature: np.ndarray
    checkpoint: np.ndarray

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.int64)
        self.signature = np.asarray(self.signature, dtype=np.int8)
        if self.channels.size and np.any(np.diff(self.channels) <= 0):
            raise ValueError("channel indices must be distinct and sorted")
        if self.projection.shape != (self.signature.size, self.channels.size):
            raise ValueError(
                f"projection shape {self.projection.shape} does not match "
                f"({self.signature.size}, {self.channels.size})"
            )

    @property
    def targets(self) -> np.ndarray:
        return bits_to_targets(self.signature)

    @property
    def checkpoint_digest(self) -> str:
        return array_digest(self.checkpoint)

    def with_projection(self, projection: np.ndarray) -> "WatermarkKey":
        return replace(self, projection=projection)


@dataclass
class TriggerSet:
    tokens: np.ndarray
    seed: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("trigger tokens must be a (count, length) array")

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class KeyStore:
    keys: list[WatermarkKey]
    trigger: TriggerSet
    bits: int
    identity_hash: str
    total_bits: int = 0

    def __post_init__(self):
        indices = [key.block_index for key in self.keys]
        if indices != list(range(len(self.keys))):
            raise ValueError("key store needs one record per block, in block order")

    def __getitem__(self, block_index: int) -> WatermarkKey:
        return self.keys[block_index]

    def __len__(self) -> int:
        return len(self.keys)


# Attestation entities
class PipelineMode(str, Enum):
    SEQUENTIAL = "sequential"
    OVERLAPPED = "overlapped"


class Verdict(str, Enum):
    PASS = "pass"
    ABORT = "abort"


@dataclass(frozen=True)
class AttestationPolicy:
    interval: int
    samples: int
    blocks: int
    mode: PipelineMode = PipelineMode.OVERLAPPED
    workers: int = 2
    early_exit: bool = True

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"attestation interval must be >= 1, got {self.interval}")
        if not 1 <= self.samples <= self.blocks:
            raise ValueError(f"sample count must be in [1, {self.blocks}], got {self.samples}")
        if self.workers < 1:
            raise ValueError(f"worker limit must be >= 1, got {self.workers}")

    def rounds_for(self, tokens: int) -> int:
        return tokens // self.interval


@dataclass(frozen=True)
class CostModel:
    """Simulated microseconds."""

    switch_us: float = 20.0
    copy_us_per_kib: float = 0.15
    decrypt_us_per_kib: float = 0.09
    verify_us_per_mflop: float = 4.0
    contention: float = 0.6
    baseline_token_us: float = 50.0

    def __post_init__(self):
        for name in ("switch_us", "copy_us_per_kib", "decrypt_us_per_kib", "verify_us_per_mflop"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.contention <= 1.0:
            raise ValueError(f"contention must be in [0, 1], got {self.contention}")
        if self.baseline_token_us <= 0:
            raise ValueError("baseline_token_us must be > 0")


@dataclass(frozen=True)
class BlockCost:
    copy_us: float
    verify_us: float


@dataclass
class BlockOutcome:
    block: int
    wer: float | None
    processed: bool
    verify_us: float = 0.0


@dataclass
class RoundRecord:
    token: int
    blocks: list[int]
    stage_us: dict[str, float]
    outcomes: list[BlockOutcome]
    verdict: Verdict
    latency_us: float
    early_exit_block: int | None = None

    @property
    def wer(self) -> dict[int, float | None]:
        return {outcome.block: outcome.wer for outcome in self.outcomes}


@dataclass
class AttestationReport:
    policy: AttestationPolicy
    cost_model: CostModel
    tokens: int
    rounds: list[RoundRecord] = field(default_factory=list)
    overhead_pct: float = 0.0
    evasion_analytic: float = 1.0
    attack: dict | None = None

    @property
    def verdict(self) -> Verdict:
        return Verdict.ABORT if any(r.verdict is Verdict.ABORT for r in self.rounds) else Verdict.PASS

    @property
    def attestation_us(self) -> float:
        return float(sum(r.latency_us for r in self.rounds))

    @property
    def report_hash(self) -> str:
        from apis.schemas.report import report_to_schema

        raw = report_to_schema(self).model_dump_json()
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()


# Attack entities
class TamperKind(str, Enum):
    REPLACE_ALL = "replace_all"
    REPLACE_BLOCKS = "replace_blocks"
    FORGE_KEYS = "forge_keys"
    NOISE = "noise"


@dataclass(frozen=True)
class TamperSpec:
    kind: TamperKind
    targets: tuple[int, ...] = ()
    count: int = 0
    sigma: float = 0.0
    seed: int = 0

    def validate(self, blocks: int) -> None:
        if self.count > blocks:
            raise ValueError(f"cannot tamper with {self.count} of {blocks} blocks")
        for target in self.targets:
            if not 0 <= target < blocks:
                raise ValueError(f"target block {target} out of range for {blocks} blocks")
        if self.kind is TamperKind.REPLACE_BLOCKS and self.count < 1 and not self.targets:
            raise ValueError("replace_blocks needs t >= 1 or explicit targets")
        if self.kind is TamperKind.NOISE and self.sigma <= 0:
            raise ValueError("noise tamper needs sigma > 0")

    @property
    def tampered_count(self) -> int:
        return len(self.targets) if self.targets else self.count

    @property
    def spec_hash(self) -> str:
        payload = {
            "kind": self.kind.value,
            "targets": sorted(self.targets),
            "count": self.count,
            "sigma": self.sigma,
            "seed": self.seed,
        }
        raw = json.dumps(payload, separators=(",", ":"), sort_keys=True)
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()
