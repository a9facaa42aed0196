import math
from collections import deque
from collections.abc import Iterable
from dataclasses import dataclass, field

from domain.models import AttestationPolicy, BlockCost, CostModel, ModelShape, PipelineMode, Verdict
from model.transformer import block_forward_mflop
from repo.bundle_repo import BundleLayout

SWITCH = "switch"
DECRYPT = "decrypt"
COPY = "copy"
VERIFY = "verify"
STAGES = (SWITCH, DECRYPT, COPY, VERIFY)

KIB = 1024.0
WORD_BYTES = 4
TIME_EPS = 1e-9
_NO_MODEL_ID = bytes(16)


# Cost model
@dataclass(frozen=True)
class RoundCosts:
    switch_us: float
    decrypt_us: float
    blocks: dict[int, BlockCost]


def record_bytes(signature_bits: int, channels: int) -> int:
    """Projection (float32), channel ids (int32) and one byte per signature bit."""
    return WORD_BYTES * signature_bits * channels + WORD_BYTES * channels + signature_bits


def checkpoint_bytes(trigger_count: int, trigger_length: int, hidden: int) -> int:
    return WORD_BYTES * trigger_count * trigger_length * hidden


def block_bytes(shape: ModelShape, bits: int) -> int:
    return BundleLayout(shape=shape, bits=bits, model_id=_NO_MODEL_ID).block_length


def verify_mflop(shape: ModelShape, trigger_count: int, trigger_length: int, signature_bits: int, channels: int):
    forward = block_forward_mflop(shape.hidden, shape.ffn, shape.heads, trigger_count, trigger_length)
    pooling = trigger_count * trigger_length * shape.hidden / 1e6
    projection = 2.0 * signature_bits * channels / 1e6
    return forward + pooling + projection


def round_costs(
    shape: ModelShape,
    bits: int,
    trigger_count: int,
    trigger_length: int,
    records: dict[int, tuple[int, int]],
    cost_model: CostModel,
) -> RoundCosts:
    """
    Costs of one round over the sampled blocks. `records` maps block id to its
    (signature bits, channel count). Decryption covers the trigger tokens plus
    each sampled block's checkpoint and key record.
    """
    copy_us = block_bytes(shape, bits) / KIB * cost_model.copy_us_per_kib
    decrypted = WORD_BYTES * trigger_count * trigger_length
    blocks = {}
    for index in sorted(records):
        signature_bits, channels = records[index]
        decrypted += checkpoint_bytes(trigger_count, trigger_length, shape.hidden)
        decrypted += record_bytes(signature_bits, channels)
        mflop = verify_mflop(shape, trigger_count, trigger_length, signature_bits, channels)
        blocks[index] = BlockCost(copy_us=copy_us, verify_us=mflop * cost_model.verify_us_per_mflop)
    return RoundCosts(
        switch_us=cost_model.switch_us,
        decrypt_us=decrypted / KIB * cost_model.decrypt_us_per_kib,
        blocks=blocks,
    )


def nominal_records(shape: ModelShape, signature_bits: int, channel_fraction: float, samples: int):
    """Average per-block key records, for analysis without a key store."""
    per_block = int(round(signature_bits / shape.blocks))
    channels = min(shape.hidden, math.ceil(round(channel_fraction * shape.hidden, 9)))
    return {i: (per_block, channels) for i in range(samples)}


# Timeline
@dataclass(frozen=True)
class StageEvent:
    stage: str
    block: int | None
    start_us: float
    end_us: float

    @property
    def duration_us(self) -> float:
        return self.end_us - self.start_us


@dataclass
class Schedule:
    mode: PipelineMode
    total_us: float
    events: list[StageEvent]
    verify_spent: dict[int, float]
    processed: list[int]
    early_exit_block: int | None = None
    switch_us: float = 0.0
    decrypt_us: float = 0.0
    copy_spent: dict[int, float] = field(default_factory=dict)

    @property
    def stage_us(self) -> dict[str, float]:
        return {
            SWITCH: self.switch_us,
            DECRYPT: self.decrypt_us,
            COPY: float(sum(self.copy_spent.values())),
            VERIFY: float(sum(self.verify_spent.values())),
        }


def schedule_pipeline(
    policy: AttestationPolicy,
    cost_model: CostModel,
    costs: RoundCosts,
    failing: Iterable[int] = (),
) -> Schedule:
    """
    Simulated timeline of one round. Blocks are handled in ascending id order.

    Sequential: switch, decrypt, then copy and verify each block in turn.
    Overlapped: switch, decrypt, serial copies; block j's verification starts
    once its copy is done and one of `policy.workers` slots is free. Running
    verifications share throughput, each at rate 1 / (1 + contention * (n - 1)).
    With early exit the round ends when the first failing block finishes
    verifying; work still in flight is cut at that instant.
    """
    failing = set(failing)
    order = sorted(costs.blocks)
    if policy.mode is PipelineMode.SEQUENTIAL:
        schedule = _sequential(order, costs, failing, policy.early_exit)
    else:
        schedule = _overlapped(order, costs, failing, policy.early_exit, policy.workers, cost_model.contention)
    schedule.switch_us = costs.switch_us
    schedule.decrypt_us = costs.decrypt_us
    return schedule


def _preamble(costs: RoundCosts) -> tuple[list[StageEvent], float]:
    ready = costs.switch_us + costs.decrypt_us
    events = [
        StageEvent(SWITCH, None, 0.0, costs.switch_us),
        StageEvent(DECRYPT, None, costs.switch_us, ready),
    ]
    return events, ready


def _sequential(order: list[int], costs: RoundCosts, failing: set[int], early_exit: bool) -> Schedule:
    events, time = _preamble(costs)
    verify_spent, copy_spent, processed = {}, {}, []
    exit_block = None
    for index in order:
        cost = costs.blocks[index]
        events.append(StageEvent(COPY, index, time, time + cost.copy_us))
        copy_spent[index] = cost.copy_us
        time += cost.copy_us
        events.append(StageEvent(VERIFY, index, time, time + cost.verify_us))
        verify_spent[index] = cost.verify_us
        time += cost.verify_us
        processed.append(index)
        if early_exit and index in failing:
            exit_block = index
            break
    return Schedule(
        mode=PipelineMode.SEQUENTIAL,
        total_us=time,
        events=events,
        verify_spent=verify_spent,
        processed=processed,
        early_exit_block=exit_block,
        copy_spent=copy_spent,
    )


def _overlapped(
    order: list[int], costs: RoundCosts, failing: set[int], early_exit: bool, workers: int, contention: float
) -> Schedule:
    events, time = _preamble(costs)
    copy_window = {}
    for index in order:
        end = time + costs.blocks[index].copy_us
        copy_window[index] = (time, end)
        time = end

    time = events[-1].end_us
    waiting = deque(order)
    running: dict[int, float] = {}
    started: dict[int, float] = {}
    verify_spent = {index: 0.0 for index in order}
    verify_events, processed = [], []
    cutoff, exit_block = None, None

    while waiting or running:
        while waiting and len(running) < workers and copy_window[waiting[0]][1] <= time + TIME_EPS:
            index = waiting.popleft()
            running[index] = costs.blocks[index].verify_us
            started[index] = time
        if not running:
            time = copy_window[waiting[0]][1]
            continue

        rate = 1.0 / (1.0 + contention * (len(running) - 1))
        step = min(running.values()) / rate
        if waiting and len(running) < workers:
            step = min(step, copy_window[waiting[0]][1] - time)
        step = max(step, 0.0)
        for index in running:
            work = min(running[index], rate * step)
            running[index] -= work
            verify_spent[index] += work
        time += step

        for index in sorted(i for i, left in running.items() if left <= TIME_EPS):
            del running[index]
            verify_events.append(StageEvent(VERIFY, index, started[index], time))
            processed.append(index)
            if early_exit and index in failing and cutoff is None:
                cutoff, exit_block = time, index
        if cutoff is not None:
            for index in sorted(running):
                verify_events.append(StageEvent(VERIFY, index, started[index], cutoff))
            break

    total = cutoff if cutoff is not None else max([time] + [end for _, end in copy_window.values()])
    copy_spent = {}
    for index in order:
        start, end = copy_window[index]
        if start >= total - TIME_EPS and end > start:
            continue
        end = min(end, total)
        copy_spent[index] = end - start
        events.append(StageEvent(COPY, index, start, end))
    events.extend(verify_events)
    events.sort(key=lambda e: (e.start_us, STAGES.index(e.stage), -1 if e.block is None else e.block))
    return Schedule(
        mode=PipelineMode.OVERLAPPED,
        total_us=total,
        events=events,
        verify_spent={i: spent for i, spent in verify_spent.items() if spent > 0 or i in processed},
        processed=sorted(processed),
        early_exit_block=exit_block,
        copy_spent=copy_spent,
    )


def critical_path_us(schedule: Schedule) -> float:
    """
    Longest chain of events where each starts exactly when its predecessor ends.
    Equals the round latency for any timeline built by `schedule_pipeline`.
    """
    events = sorted(schedule.events, key=lambda e: (e.start_us, e.end_us))
    longest: list[float] = []
    for i, event in enumerate(events):
        best = 0.0
        for j in range(i):
            if math.isclose(events[j].end_us, event.start_us, rel_tol=1e-12, abs_tol=TIME_EPS):
                best = max(best, longest[j])
        longest.append(best + event.duration_us)
    return max(longest, default=0.0)


@dataclass(frozen=True)
class EarlyExitResult:
    verdict: Verdict
    processed: list[int]
    failing_block: int | None


def early_exit_check(stream: Iterable[tuple[int, float]]) -> EarlyExitResult:
    """Consume (block, WER) results until the first one below 100%."""
    processed = []
    for block, wer in stream:
        processed.append(block)
        if wer < 100.0:
            return EarlyExitResult(Verdict.ABORT, processed, block)
    return EarlyExitResult(Verdict.PASS, processed, None)
