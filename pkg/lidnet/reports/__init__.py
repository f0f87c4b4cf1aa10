"""Report tables and figures."""

from lidnet.reports.base import BaseReportWriter, create_writer, read_reports, write_reports

__all__ = ["BaseReportWriter", "create_writer", "read_reports", "write_reports"]
