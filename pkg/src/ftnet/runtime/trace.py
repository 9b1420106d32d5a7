"""Event traces and the recovery metrics derived from them."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple


class TraceEvent(NamedTuple):
    time_us: int
    event: str
    subject: str
    detail: str = ""

    def field(self, key: str) -> str | None:
        for part in self.detail.split(";"):
            k, sep, v = part.partition("=")
            if sep and k == key:
                return v
        return None


class Trace:
    """Append-only, time-ordered event log."""

    HEADER = ("time_us", "event", "subject", "detail")

    def __init__(self, events=None):
        self.events: list[TraceEvent] = list(events or [])

    def append(self, time_us: int, event: str, subject: str, detail: str = "") -> None:
        if self.events and time_us < self.events[-1].time_us:
            raise ValueError("trace timestamps must be non-decreasing")
        self.events.append(TraceEvent(int(time_us), event, subject, detail))

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of(self, *kinds: str) -> list[TraceEvent]:
        return [e for e in self.events if e.event in kinds]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerows(self.events)
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "Trace":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.HEADER:
            raise ValueError(f"{path}: not a trace file")
        return cls(TraceEvent(int(r[0]), r[1], r[2], r[3]) for r in rows[1:])


@dataclass
class RecoveryRecord:
    target: str
    kind: str
    injected_us: int
    declared_us: int | None
    detection_us: int | None
    stabilization_us: int | None
    total_us: int | None
    silence_us: int | None
    censored: bool

    CSV_HEADER = "target,kind,injected_us,declared_us,detection_us,stabilization_us,total_us,silence_us,censored"

    def csv_line(self) -> str:
        vals = [self.target, self.kind, self.injected_us, self.declared_us, self.detection_us,
                self.stabilization_us, self.total_us, self.silence_us, int(self.censored)]
        return ",".join("" if v is None else str(v) for v in vals)


def measure_recovery(trace: Trace) -> list[RecoveryRecord]:
    """One record per injected fault.

    detection = failure declared - fault injected; stabilization = first
    successful inference completed after the declaration - declaration.
    A fault that is never declared yields a censored record.
    """
    declared: dict[str, TraceEvent] = {}
    for e in trace.of("node_failed"):
        declared.setdefault(e.subject, e)
    for e in trace.of("handover_started"):
        old = e.field("old")
        if old is not None:
            declared.setdefault(old, e)
    completions = [e.time_us for e in trace.of("inference_completed")]

    records = []
    for fault in trace.of("fault_injected"):
        kind = "coordinator" if fault.subject.startswith("coord") else "node"
        d = declared.get(fault.subject)
        if d is None or d.time_us < fault.time_us:
            records.append(RecoveryRecord(fault.subject, kind, fault.time_us, None, None, None, None, None, True))
            continue
        silence = d.field("silence_us")
        after = [t for t in completions if t >= d.time_us]
        stab = after[0] - d.time_us if after else None
        detection = d.time_us - fault.time_us
        records.append(RecoveryRecord(
            fault.subject, kind, fault.time_us, d.time_us, detection, stab,
            None if stab is None else detection + stab,
            None if silence is None else int(silence), stab is None,
        ))
    return records


def records_to_csv(records) -> str:
    return "\n".join([RecoveryRecord.CSV_HEADER] + [r.csv_line() for r in records]) + "\n"
