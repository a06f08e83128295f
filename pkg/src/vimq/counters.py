"""Analytic datapath counters, emitted as one JSON-lines record per layer call."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class CounterRecord:
    layer: str
    engine: str  # linear | ssm | conv | embed
    tokens: int
    tiles: int = 0
    lut_builds: int = 0
    pe_selects: int = 0
    words_streamed: int = 0
    macs: int = 0
    state_updates: int = 0


@dataclass
class PerfCounters:
    records: list[CounterRecord] = field(default_factory=list)

    def add(self, record: CounterRecord) -> None:
        self.records.append(record)

    def total(self, name: str) -> int:
        return sum(getattr(r, name) for r in self.records)

    def jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)
