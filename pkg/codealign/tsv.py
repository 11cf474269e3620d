"""
Tab-separated file reading and writing.

Every file codealign consumes is UTF-8 TSV with a header row. We read them
with pandas, as strings, and turn pandas' complaints into
:class:`InputFormatError` so the command line can report a path and a line
number.
"""
import logging
import re
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import pandas as pd

logger = logging.getLogger(__name__)


class MissingInputError(FileNotFoundError):
    """A declared input file does not exist."""

    def __init__(self, path: Path):
        super().__init__("Missing input file: %s" % path)
        self.path = Path(path)


class InputFormatError(ValueError):
    """
    A TSV file is malformed.

    :param path: Offending file.
    :param line: 1-based line number (the header is line 1), or ``None`` if
                 the problem is not tied to one line.
    """

    def __init__(self, path: Path, line: Optional[int], message: str):
        if line is None:
            super().__init__("%s: %s" % (path, message))
        else:
            super().__init__("%s:%d: %s" % (path, line, message))
        self.path = Path(path)
        self.line = line


_PANDAS_LINE = re.compile(r"line (\d+)")


def read_table(
    path: Path,
    columns: Sequence[str],
    *,
    optional: Sequence[str] = (),
    float_columns: Sequence[str] = (),
) -> pd.DataFrame:
    """
    Read a TSV whose header starts with `columns` (then `optional` columns).

    All columns are read as strings, except `float_columns`, which are parsed
    with round-trip precision (so a written float reads back bit-exact).
    Missing required cells and extra cells are errors.

    :raises MissingInputError: if `path` does not exist.
    :raises InputFormatError: if the header or any row is malformed.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)

    try:
        frame = pd.read_csv(
            path,
            sep="\t",
            dtype=str,
            keep_default_na=False,
            na_values=[],
            quoting=3,  # csv.QUOTE_NONE: descriptions may contain quotes
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError:
        raise InputFormatError(path, 1, "missing header row")
    except pd.errors.ParserError as err:
        match = _PANDAS_LINE.search(str(err))
        line = int(match.group(1)) if match else None
        raise InputFormatError(path, line, "wrong number of columns (%s)" % err)

    header = list(frame.columns)
    expected = list(columns)
    if header[: len(expected)] != expected:
        raise InputFormatError(
            path, 1, "expected header to start with %r; got %r" % (expected, header)
        )
    allowed = expected + list(optional)
    extra = [c for c in header if c not in allowed]
    if extra:
        raise InputFormatError(path, 1, "unexpected columns %r" % extra)

    # pandas fills short rows with NaN even with keep_default_na=False
    short = frame[expected].isna().any(axis=1)
    if short.any():
        first = int(short.to_numpy().nonzero()[0][0])
        raise InputFormatError(path, first + 2, "wrong number of columns")

    for name in float_columns:
        if name not in frame.columns:
            continue
        try:
            frame[name] = frame[name].map(float)
        except ValueError as err:
            bad = [i for i, v in enumerate(frame[name]) if not _is_float(v)]
            raise InputFormatError(
                path,
                bad[0] + 2 if bad else None,
                "not a number in %r: %s" % (name, err),
            )
    return frame


def _is_float(s) -> bool:
    try:
        float(s)
        return True
    except (TypeError, ValueError):
        return False


def write_table(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """
    Write `rows` under a `columns` header.

    Floats are written with 17 significant digits, which round-trips 64-bit
    floats exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame.to_csv(
        path,
        sep="\t",
        index=False,
        float_format="%.17g",
        quoting=3,
        encoding="utf-8",
        lineterminator="\n",
    )


def split_list(cell: str) -> List[str]:
    """Split a comma-separated cell; the empty string is the empty list."""
    return [s for s in cell.split(",") if s]
