NAN_LOSS_CODE = 1
DIVERGED_CODE = 2
NOT_CONVERGED_CODE = 3


class EmbeddingError(Exception):
    def __init__(self, code: int = 0, block_index: int | None = None, reports: list | None = None, detail: str = ""):
        msg = "Watermark embedding failed"
        if block_index is not None:
            msg += f" on block {block_index}"
        reason = ""
        if code == NAN_LOSS_CODE:
            reason = "loss became NaN during gradient embedding"
        elif code == DIVERGED_CODE:
            reason = "zeroth-order loss exceeded 10x its initial value"
        elif code == NOT_CONVERGED_CODE:
            reason = "extraction rate stayed below 100% after the post-quantization budget"

        if reason:
            msg += f": {reason}"
        if detail:
            msg += f" ({detail})"

        super().__init__(msg)
        self.code = code
        self.block_index = block_index
        self.reports = reports or []
        self.reason = reason
