from dataclasses import dataclass

import numpy as np

from apis.schemas.config import WatermarkConfig
from domain.models import QuantizedModel, SignatureSpec, ToyModel, TriggerSet
from infraestructure.logging_setup import get_logger
from model.transformer import forward
from pipeline.watermark.embed_pipeline import POST_ONLY, PRE_ONLY, TWO_STAGE, EmbeddingResult, embed_model
from quant.quantizer import dequantize_model, quantize_model

logger = get_logger(__name__)

ABLATION_MODES = (TWO_STAGE, PRE_ONLY, POST_ONLY)


def _full_precision(model: ToyModel | QuantizedModel) -> ToyModel:
    return dequantize_model(model) if isinstance(model, QuantizedModel) else model


def fidelity_deviation(model_a: ToyModel | QuantizedModel, model_b: ToyModel | QuantizedModel, inputs) -> float:
    """Mean absolute logit difference on held-out inputs."""
    logits_a, _ = forward(_full_precision(model_a), inputs)
    logits_b, _ = forward(_full_precision(model_b), inputs)
    return float(np.mean(np.abs(logits_a - logits_b)))


@dataclass(frozen=True)
class FidelityReport:
    quantization_deviation: float
    watermark_deviation: float

    @property
    def watermark_below_quantization(self) -> bool:
        return self.watermark_deviation < self.quantization_deviation


def fidelity_report(original: ToyModel, watermarked: QuantizedModel, holdout: np.ndarray) -> FidelityReport:
    """
    Quantization-induced deviation (original vs plainly quantized) next to the
    watermark-induced one (plainly quantized vs watermarked and quantized).
    """
    plain = quantize_model(original, watermarked.bits)
    return FidelityReport(
        quantization_deviation=fidelity_deviation(original, plain, holdout),
        watermark_deviation=fidelity_deviation(plain, watermarked, holdout),
    )


@dataclass(frozen=True)
class AblationRow:
    mode: str
    mean_wer: float
    min_wer: float
    failing_blocks: int
    watermark_deviation: float
    quantization_deviation: float

    def row(self) -> dict:
        return {
            "mode": self.mode,
            "mean_wer": round(self.mean_wer, 4),
            "min_wer": round(self.min_wer, 4),
            "failing_blocks": self.failing_blocks,
            "watermark_deviation": round(self.watermark_deviation, 6),
            "quantization_deviation": round(self.quantization_deviation, 6),
        }


def run_ablation(
    model: ToyModel,
    trigger: TriggerSet,
    holdout: np.ndarray,
    config: WatermarkConfig,
    seed: int = 0,
    jobs: int = 1,
    modes: tuple[str, ...] = ABLATION_MODES,
    signature: SignatureSpec | None = None,
) -> list[AblationRow]:
    """Embed the same signature with each stage mode and compare extraction and fidelity."""
    rows = []
    for mode in modes:
        mode_config = config.model_copy(update={"stages": mode, "require_full_wer": False})
        result: EmbeddingResult = embed_model(model, signature, trigger, mode_config, seed=seed, jobs=jobs)
        signature = result.signature
        fidelity = fidelity_report(model, result.model, holdout)
        wers = [report.wer_final for report in result.reports]
        row = AblationRow(
            mode=mode,
            mean_wer=float(np.mean(wers)),
            min_wer=float(np.min(wers)),
            failing_blocks=sum(1 for report in result.reports if not report.converged),
            watermark_deviation=fidelity.watermark_deviation,
            quantization_deviation=fidelity.quantization_deviation,
        )
        logger.info(
            "Ablation %s: mean WER %.2f%%, %d failing blocks, watermark deviation %.4g",
            mode,
            row.mean_wer,
            row.failing_blocks,
            row.watermark_deviation,
        )
        rows.append(row)
    return rows
