"""
Evaluation report exporter - JSON summaries and per-variant CSV tables, atomic writes.
"""

import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd

from storage.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

VARIANT_COLUMNS = ["variant", "frames", "psnr", "ssim", "perceptual", "temporal", "temporal_normalized"]


def write_report_json(path: PathLike, report: Mapping[str, Any]) -> Path:
    """Write a report dict as pretty-printed JSON (temp file -> rename)."""
    path = Path(path)
    atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    logger.info(f"REPORT_WRITTEN: path={path}")
    return path


def rows_to_frame(rows: Sequence[Mapping[str, Any]], columns: Optional[List[str]] = None) -> pd.DataFrame:
    """Rows as a DataFrame with the known columns first and any extras after them."""
    columns = columns or VARIANT_COLUMNS
    df = pd.DataFrame(list(rows))
    if df.empty:
        return pd.DataFrame(columns=columns)
    ordered = [c for c in columns if c in df.columns] + [c for c in df.columns if c not in columns]
    return df[ordered]


def normalize_column(df: pd.DataFrame, column: str, reference: str, key: str = "variant") -> pd.DataFrame:
    """Add ``<column>_normalized`` = column / column of the ``reference`` row.

    Leaves the frame unchanged when the reference row is missing or zero.
    """
    ref = df.loc[df[key] == reference, column]
    if ref.empty or not ref.iloc[0]:
        logger.warning(f"Cannot normalize '{column}': reference row '{reference}' missing or zero")
        return df
    out = df.copy()
    out[f"{column}_normalized"] = out[column] / float(ref.iloc[0])
    return out


def export_variant_csv(
    path: PathLike,
    rows: Sequence[Mapping[str, Any]],
    normalize_to: Optional[str] = None,
) -> Path:
    """
    Export per-variant evaluation rows to CSV.

    Args:
        path: Output CSV path
        rows: One dict per variant (``variant`` plus metric columns)
        normalize_to: Variant whose temporal value the ``temporal_normalized`` column is relative to

    Returns:
        Path of the written file
    """
    path = Path(path)
    df = rows_to_frame(rows)
    if normalize_to is not None and "temporal" in df.columns and not df.empty:
        df = normalize_column(df, "temporal", normalize_to)
        df = rows_to_frame(df.to_dict("records"))
    buf = io.StringIO()
    df.to_csv(buf, index=False, float_format="%.6f")
    atomic_write_text(path, buf.getvalue())
    logger.info(f"CSV_EXPORT_DONE: path={path}, rows={len(df)}")
    return path


def read_variant_csv(path: PathLike) -> List[Dict[str, Any]]:
    return pd.read_csv(path).to_dict("records")
