"""Per-video memory: capped prompt slots plus a FIFO queue of predicted frames.

The bank keeps two partitions:

  * ``prompt_slots`` — at most two entries, always the two most recently
    inserted prompt frames (older prompts are evicted).
  * ``prediction_queue`` — a FIFO of predicted frames with configurable
    capacity; the oldest entry is evicted when full.

Frame indices must be inserted in strictly increasing order. A bank is
single-owner: one video loop mutates it, ``gather_context`` never does.

Operations can be recorded as a line-delimited trace (one event per line:
op name, frame index, kind) and replayed; eviction lines in a trace are
derived events, written for auditing but ignored on replay.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from .errors import ConfigurationError, OrderingError, TraceParseError
from .fusion import FeatureMap

PROMPT_CAPACITY = 2


class MemoryKind(enum.Enum):
    PROMPT = "prompt"
    PREDICTION = "prediction"


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    """One remembered frame: stride-16 spatial features plus a pooled object pointer."""

    frame_index: int
    kind: MemoryKind
    spatial_features: FeatureMap
    object_pointer: torch.Tensor

    def __post_init__(self):
        if self.frame_index < 0:
            raise OrderingError(f"frame_index must be nonnegative, got {self.frame_index}")
        if self.object_pointer.dim() != 1:
            raise ConfigurationError(
                f"object pointer must be a vector, got shape {tuple(self.object_pointer.shape)}"
            )


@dataclass(frozen=True)
class BankConfig:
    prediction_capacity: int = 6
    pointer_dim: int = 64

    def __post_init__(self):
        if self.prediction_capacity < 1:
            raise ConfigurationError(
                f"prediction capacity must be >= 1, got {self.prediction_capacity}"
            )
        if self.pointer_dim < 1:
            raise ConfigurationError(f"pointer dimension must be >= 1, got {self.pointer_dim}")


@dataclass(frozen=True)
class TraceEvent:
    op: str  # "insert" | "evict" | "reset"
    frame_index: Optional[int] = None
    kind: Optional[MemoryKind] = None


def placeholder_entry(frame_index: int, kind: MemoryKind, config: BankConfig) -> MemoryEntry:
    """A structurally valid entry with zeroed features, used for trace replay."""
    return MemoryEntry(
        frame_index=frame_index,
        kind=kind,
        spatial_features=FeatureMap(torch.zeros(1, 1, 1, 1), stride=16),
        object_pointer=torch.zeros(config.pointer_dim),
    )


class MemoryBank:
    """Partitioned per-video memory with monotonic insertion."""

    def __init__(self, config: BankConfig, record_trace: bool = False):
        self.config = config
        self.prompt_slots: List[MemoryEntry] = []
        self.prediction_queue: deque = deque()
        self.record_trace = record_trace
        self.trace: List[TraceEvent] = []

    def __len__(self) -> int:
        return len(self.prompt_slots) + len(self.prediction_queue)

    def max_frame_index(self) -> int:
        """Largest frame index currently stored, or -1 when empty."""
        indices = [e.frame_index for e in self.prompt_slots]
        indices += [e.frame_index for e in self.prediction_queue]
        return max(indices) if indices else -1

    def _record(self, event: TraceEvent):
        if self.record_trace:
            self.trace.append(event)

    def insert(self, entry: MemoryEntry) -> Optional[MemoryEntry]:
        """Insert one entry into its partition; returns the evicted entry, if any."""
        if entry.frame_index <= self.max_frame_index():
            raise OrderingError(
                f"frame_index {entry.frame_index} is not greater than every stored index "
                f"(max stored {self.max_frame_index()})"
            )
        if entry.object_pointer.shape[0] != self.config.pointer_dim:
            raise ConfigurationError(
                f"object pointer has dimension {entry.object_pointer.shape[0]}, "
                f"bank is configured for {self.config.pointer_dim}"
            )
        self._record(TraceEvent("insert", entry.frame_index, entry.kind))
        evicted = None
        if entry.kind is MemoryKind.PROMPT:
            self.prompt_slots.append(entry)
            if len(self.prompt_slots) > PROMPT_CAPACITY:
                evicted = self.prompt_slots.pop(0)
        else:
            self.prediction_queue.append(entry)
            if len(self.prediction_queue) > self.config.prediction_capacity:
                evicted = self.prediction_queue.popleft()
        if evicted is not None:
            self._record(TraceEvent("evict", evicted.frame_index, evicted.kind))
        return evicted

    def gather_context(self, current_frame: int) -> List[MemoryEntry]:
        """Prompt slots first, then queued predictions, each in ascending frame order."""
        if current_frame <= self.max_frame_index():
            raise OrderingError(
                f"current frame {current_frame} must exceed every stored index "
                f"(max stored {self.max_frame_index()})"
            )
        return list(self.prompt_slots) + list(self.prediction_queue)

    def reset(self):
        """Empty both partitions; the configuration is kept."""
        self.prompt_slots.clear()
        self.prediction_queue.clear()
        self._record(TraceEvent("reset"))
        return self

    def structure(self) -> Tuple[tuple, tuple]:
        """(frame_index, kind) skeleton of both partitions, for structural comparison."""
        prompts = tuple((e.frame_index, e.kind.value) for e in self.prompt_slots)
        preds = tuple((e.frame_index, e.kind.value) for e in self.prediction_queue)
        return prompts, preds


def serialize_trace(events: List[TraceEvent]) -> str:
    """One event per line: ``op frame_index kind`` (reset lines carry only the op)."""
    lines = []
    for ev in events:
        if ev.op == "reset":
            lines.append("reset")
        else:
            lines.append(f"{ev.op} {ev.frame_index} {ev.kind.value}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trace(text: str) -> List[TraceEvent]:
    """Parse a serialized trace; raises TraceParseError with the byte offset on corruption."""
    events = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if parts[0] == "reset":
                if len(parts) != 1:
                    raise TraceParseError(f"malformed reset line {stripped!r}", offset)
                events.append(TraceEvent("reset"))
            elif parts[0] in ("insert", "evict"):
                if len(parts) != 3:
                    raise TraceParseError(f"expected 'op frame kind', got {stripped!r}", offset)
                try:
                    frame = int(parts[1])
                except ValueError:
                    raise TraceParseError(f"bad frame index {parts[1]!r}", offset) from None
                try:
                    kind = MemoryKind(parts[2])
                except ValueError:
                    raise TraceParseError(f"bad entry kind {parts[2]!r}", offset) from None
                events.append(TraceEvent(parts[0], frame, kind))
            else:
                raise TraceParseError(f"unknown op {parts[0]!r}", offset)
        offset += len(line)
    return events


def replay_trace(events: List[TraceEvent], config: BankConfig) -> MemoryBank:
    """Rebuild a bank by replaying insert/reset events (evict lines are derived, skipped)."""
    bank = MemoryBank(config)
    for ev in events:
        if ev.op == "insert":
            bank.insert(placeholder_entry(ev.frame_index, ev.kind, config))
        elif ev.op == "reset":
            bank.reset()
    return bank
