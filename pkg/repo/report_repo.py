import json
from datetime import datetime
from pathlib import Path
from typing import BinaryIO, TextIO
from zoneinfo import ZoneInfo

import pandas as pd

from apis.schemas.report import report_to_schema
from domain.models import AttestationReport
from repo.base import append_op, file_op
from repo.generic_repo import GenericRepo


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


class ReportRepo(GenericRepo):
    """Deterministic report files plus append-only, timestamped history and CSV tables."""

    def write_report(self, report: AttestationReport, path) -> Path:
        return self.write_json(report_to_schema(report).model_dump(mode="json"), path)

    def write_json(self, payload: dict, path) -> Path:
        self._write_text(path, canonical_json(payload))
        return self.resolve(path)

    @file_op
    def _write_text(self, handle: BinaryIO, path: Path, text: str) -> None:
        handle.write(text.encode("utf-8"))

    @append_op
    def append_history(self, handle: TextIO, path: Path, existed: bool, command: str, summary: dict) -> None:
        record = {
            "command": command,
            "summary": summary,
            "timestamp": datetime.now(ZoneInfo("UTC")).isoformat(),
        }
        handle.write(json.dumps(record, sort_keys=True) + "\n")

    @append_op
    def append_csv_rows(self, handle: TextIO, path: Path, existed: bool, rows: list[dict]) -> None:
        if not rows:
            return
        frame = pd.DataFrame(rows)
        frame["recorded_at"] = datetime.now(ZoneInfo("UTC")).isoformat()
        frame.to_csv(handle, header=not existed, index=False)
