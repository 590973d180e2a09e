"""Render report chart data to PNG bar charts (headless)."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def chart_rows(csv_text: str) -> tuple[list[str], list[str], list[float]]:
    """Header, bar labels (all leading columns joined) and values (last column)."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    header, body = rows[0], rows[1:]
    labels = [" ".join(r[:-1]) for r in body]
    values = [float(r[-1]) if r[-1] not in ("", "NULL") else 0.0 for r in body]
    return header, labels, values


def bar_chart(csv_text: str, title: str, path: str | Path) -> Path:
    header, labels, values = chart_rows(csv_text)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if labels:
        ax.bar(range(len(values)), values, color="#4c72b0")
        ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
    else:
        ax.text(0.5, 0.5, "(no rows)", ha="center", va="center", transform=ax.transAxes)
        ax.set_xticks([])
    ax.set_ylabel(header[-1])
    ax.set_xlabel(" / ".join(header[:-1]))
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
