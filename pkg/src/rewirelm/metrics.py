"""Training metrics: one record per step, JSONL on disk."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields


@dataclass
class MetricsRecord:
    run_id: str
    stage: str
    step: int
    loss: float | None = None
    eval_loss: float | None = None
    accuracy: float | None = None
    lr_body: float | None = None
    lr_emb: float | None = None
    grad_norm: float | None = None
    event: str | None = None  # "reset" | "checkpoint" | "divergence"
    wall_time: float | None = None  # seconds since the run started

    def to_json_line(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown metrics fields: {sorted(unknown)}")
        return cls(**d)


class MetricsLog:
    """Append-only log; steps must strictly increase within (run, stage)."""

    def __init__(self):
        self.records = []
        self._last_step = {}

    def append(self, rec: MetricsRecord):
        key = (rec.run_id, rec.stage)
        last = self._last_step.get(key)
        if last is not None and rec.step <= last:
            raise ValueError(
                f"non-increasing step {rec.step} after {last} for run={rec.run_id} stage={rec.stage}"
            )
        self._last_step[key] = rec.step
        self.records.append(rec)

    def for_run(self, run_id: str, stage: str | None = None):
        return [
            r for r in self.records
            if r.run_id == run_id and (stage is None or r.stage == stage)
        ]

    def save_jsonl(self, path):
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w") as f:
            for r in self.records:
                f.write(r.to_json_line())
                f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load_jsonl(cls, path) -> "MetricsLog":
        log = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    log.append(MetricsRecord.from_json_line(line))
        return log
