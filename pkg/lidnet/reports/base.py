"""
reports/base.py — Metric report writers + factory.
"""
from __future__ import annotations

import json
import logging
import os
from abc import ABC, abstractmethod
from typing import List, Sequence

import pandas as pd

from lidnet.errors import MissingArtifactError
from lidnet.metrics.evaluate import TABLE_COLUMNS, MetricReport
from lidnet.runs import atomic_write_text, read_json

logger = logging.getLogger(__name__)


class BaseReportWriter(ABC):
    """Abstract report format."""

    @property
    @abstractmethod
    def name(self) -> str:
        ...

    @property
    @abstractmethod
    def extension(self) -> str:
        ...

    @abstractmethod
    def render(self, reports: Sequence[MetricReport]) -> str:
        """Serialise ``reports`` to text."""
        ...

    def write(self, reports: Sequence[MetricReport], path: str) -> str:
        atomic_write_text(path, self.render(reports))
        logger.info("Wrote %s report with %d rows to %s", self.name, len(reports), path)
        return path


class CsvReportWriter(BaseReportWriter):
    """One row per model; columns follow the results tables."""

    @property
    def name(self) -> str:
        return "csv"

    @property
    def extension(self) -> str:
        return ".csv"

    def render(self, reports: Sequence[MetricReport]) -> str:
        return pd.DataFrame([r.to_row() for r in reports]).to_csv(index=False)


class JsonReportWriter(BaseReportWriter):
    @property
    def name(self) -> str:
        return "json"

    @property
    def extension(self) -> str:
        return ".json"

    def render(self, reports: Sequence[MetricReport]) -> str:
        return json.dumps([r.to_dict() for r in reports], ensure_ascii=False, indent=2, sort_keys=True) + "\n"


class MarkdownReportWriter(BaseReportWriter):
    """Markdown table; SSIM is shown in percent."""

    @property
    def name(self) -> str:
        return "markdown"

    @property
    def extension(self) -> str:
        return ".md"

    def render(self, reports: Sequence[MetricReport]) -> str:
        frame = pd.DataFrame([r.to_row() for r in reports])
        if frame.empty:
            frame = pd.DataFrame(columns=["name", *TABLE_COLUMNS])
        frame["SSIM"] = frame["SSIM"].astype(float) * 100.0
        header = ["Model", *TABLE_COLUMNS]
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join(["---"] + ["---:"] * len(TABLE_COLUMNS)) + "|",
        ]
        for _, row in frame.iterrows():
            cells = [str(row["name"])]
            for column in TABLE_COLUMNS:
                digits = 2 if column in ("PSNR", "SSIM") else 4
                cells.append(f"{float(row[column]):.{digits}f}")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def create_writer(kind: str) -> BaseReportWriter:
    """Factory: writer for ``kind`` (csv | json | markdown)."""
    kind = kind.lower()
    if kind == "csv":
        return CsvReportWriter()
    elif kind == "json":
        return JsonReportWriter()
    elif kind in ("markdown", "md"):
        return MarkdownReportWriter()
    else:
        logger.warning("Unknown report format '%s', falling back to csv.", kind)
        return CsvReportWriter()


def write_reports(reports: Sequence[MetricReport], directory: str, stem: str = "metrics") -> List[str]:
    """CSV and JSON copies of ``reports`` under ``directory``."""
    paths = []
    for kind in ("csv", "json"):
        writer = create_writer(kind)
        paths.append(writer.write(reports, os.path.join(directory, stem + writer.extension)))
    return paths


def read_reports(path: str) -> List[MetricReport]:
    if not os.path.exists(path):
        raise MissingArtifactError("missing metric report", path)
    data = read_json(path)
    if not isinstance(data, list):
        raise MissingArtifactError("metric report must be a JSON list", path)
    return [MetricReport.from_dict(entry) for entry in data]
