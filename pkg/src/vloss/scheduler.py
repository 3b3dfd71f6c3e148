"""Per-epoch batch schedules for the three task streams.

Strategies: ``stt`` (detection+caption warmup sub-epoch, then panoptic+caption
cooldown), ``mix`` (uniform shuffle of everything), ``pretrain_finetune``
(detection+caption epochs first, panoptic+caption epochs after the split).
Plans are pure functions of (strategy, sizes, epoch, total_epochs, seed);
shuffles reseed per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STREAMS = ("detection", "panoptic", "caption")
STRATEGIES = ("stt", "mix", "pretrain_finetune")


@dataclass(frozen=True)
class DatasetHandle:
    stream: str
    num_batches: int
    batch_size: int = 1

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")
        if self.num_batches < 0:
            raise ValueError("num_batches must be >= 0")


@dataclass(frozen=True)
class BatchTicket:
    stream: str
    index: int


@dataclass
class EpochPlan:
    strategy: str
    tickets: list[BatchTicket]
    boundary: int | None  # stt: first cooldown position
    seed: int
    epoch: int
    streams_included: tuple[str, ...]

    def __len__(self):
        return len(self.tickets)

    def __iter__(self):
        return iter(self.tickets)


def _counts(handles: list[DatasetHandle]) -> dict[str, int]:
    counts = dict.fromkeys(STREAMS, 0)
    for h in handles:
        counts[h.stream] += h.num_batches
    return counts


def _interleave(dense: list[BatchTicket], caption: list[BatchTicket]) -> list[BatchTicket]:
    """Place caption tickets at uniform stride among the dense tickets."""
    total = len(dense) + len(caption)
    if not caption:
        return list(dense)
    positions = {int(np.floor((i + 0.5) * total / len(caption))) for i in range(len(caption))}
    out, di, ci = [], 0, 0
    for k in range(total):
        if k in positions and ci < len(caption):
            out.append(caption[ci])
            ci += 1
        elif di < len(dense):
            out.append(dense[di])
            di += 1
        else:
            out.append(caption[ci])
            ci += 1
    return out


def build_epoch_plan(
    strategy: str,
    handles: list[DatasetHandle],
    epoch: int,
    total_epochs: int,
    seed: int,
    split_epoch: int | None = None,
) -> EpochPlan:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    counts = _counts(handles)
    rng = np.random.default_rng([seed, epoch])

    def shuffled(stream: str) -> list[BatchTicket]:
        idx = rng.permutation(counts[stream])
        return [BatchTicket(stream, int(i)) for i in idx]

    det, pan, cap = shuffled("detection"), shuffled("panoptic"), shuffled("caption")

    if strategy == "mix":
        tickets = det + pan + cap
        order = rng.permutation(len(tickets))
        tickets = [tickets[i] for i in order]
        return EpochPlan(strategy, tickets, None, seed, epoch, STREAMS)

    if strategy == "pretrain_finetune":
        split = total_epochs // 2 if split_epoch is None else split_epoch
        dense = det if epoch < split else pan
        included = ("detection", "caption") if epoch < split else ("panoptic", "caption")
        tickets = dense + cap
        order = rng.permutation(len(tickets))
        return EpochPlan(strategy, [tickets[i] for i in order], None, seed, epoch, included)

    # stt: caption budget split across sub-epochs proportionally to dense counts
    n_det, n_pan, n_cap = len(det), len(pan), len(cap)
    if n_det + n_pan > 0:
        warm_cap = int(round(n_cap * n_det / (n_det + n_pan)))
    else:
        warm_cap = n_cap // 2
    if n_cap >= 2 and n_det > 0 and n_pan > 0:
        warm_cap = min(max(warm_cap, 1), n_cap - 1)
    warmup = _interleave(det, cap[:warm_cap])
    cooldown = _interleave(pan, cap[warm_cap:])
    return EpochPlan(strategy, warmup + cooldown, len(warmup), seed, epoch, STREAMS)


def next_batch(plan: EpochPlan, cursor: int) -> BatchTicket | None:
    """Ticket at ``cursor``; ``None`` signals the end of the epoch."""
    if cursor < 0:
        raise ValueError("cursor must be >= 0")
    if cursor >= len(plan.tickets):
        return None
    return plan.tickets[cursor]


def plan_stats(plan: EpochPlan) -> dict:
    """Exact composition summary (per-sub-epoch stream counts, caption positions)."""

    def count_segment(tickets):
        seg = dict.fromkeys(STREAMS, 0)
        for t in tickets:
            seg[t.stream] += 1
        return seg

    if plan.strategy == "stt":
        segments = [
            count_segment(plan.tickets[: plan.boundary]),
            count_segment(plan.tickets[plan.boundary :]),
        ]
    else:
        segments = [count_segment(plan.tickets)]
    return {
        "strategy": plan.strategy,
        "epoch": plan.epoch,
        "boundary": plan.boundary,
        "segments": segments,
        "caption_positions": [i for i, t in enumerate(plan.tickets) if t.stream == "caption"],
    }
