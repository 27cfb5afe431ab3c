"""
CSV trace format: ``id,llm,arrival_s,prompt_len,output_len``.
"""
import logging
import math
from pathlib import Path
from typing import Iterable, List, Union

import pandas as pd

from .domain import Request

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['id', 'llm', 'arrival_s', 'prompt_len', 'output_len']


class TraceFormatError(ValueError):
    """A trace file that does not follow the CSV format; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}: line {line}: {message}")


def save_trace(requests: Iterable[Request], path: Union[str, Path]) -> Path:
    """Write requests as CSV, one row per request in the given order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(r.id, r.llm, r.arrival_s, r.prompt_len, r.output_len) for r in requests]
    df = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} requests to {path}")
    return path


def load_trace(path: Union[str, Path]) -> List[Request]:
    """Read a trace written by save_trace; errors name the offending line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise TraceFormatError(path, _line_from_parser_error(e), str(e)) from e

    if list(df.columns) != TRACE_COLUMNS:
        raise TraceFormatError(path, 1, f"expected header {','.join(TRACE_COLUMNS)}, "
                                        f"got {','.join(map(str, df.columns))}")

    requests = []
    for offset, row in enumerate(df.itertuples(index=False)):
        line = offset + 2
        try:
            request = Request(
                id=int(row.id),
                llm=row.llm,
                arrival_s=float(row.arrival_s),
                prompt_len=int(row.prompt_len),
                output_len=int(row.output_len),
            )
        except (TypeError, ValueError) as e:
            raise TraceFormatError(path, line, f"malformed row {tuple(row)}: {e}") from e
        if not request.llm:
            raise TraceFormatError(path, line, "empty llm name")
        if not math.isfinite(request.arrival_s) or request.arrival_s < 0:
            raise TraceFormatError(path, line, f"arrival_s must be >= 0, got {row.arrival_s}")
        if request.prompt_len < 1 or request.output_len < 1:
            raise TraceFormatError(path, line, "prompt_len and output_len must be >= 1")
        requests.append(request)
    return requests


def _line_from_parser_error(error: Exception) -> int:
    # pandas reports "Expected 5 fields in line 3, saw 6"
    words = str(error).replace(',', ' ').split()
    for i, word in enumerate(words[:-1]):
        if word == 'line' and words[i + 1].isdigit():
            return int(words[i + 1])
    return 0
