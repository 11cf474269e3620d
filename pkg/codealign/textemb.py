"""
Description embeddings X: precomputed vectors from a file, or a hashed mock.

The mock needs no model. It hashes the character 3-grams of each word into
signed coordinates, so descriptions that share most of their words end up
close, whatever the word order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, List

import numpy as np
import pandas as pd

from .codebook import CodeBook, CodeId
from .tsv import InputFormatError, MissingInputError, read_table, write_table

if TYPE_CHECKING:
    from .annotate import Oracle

logger = logging.getLogger(__name__)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF

MOCK_PROVIDER = "mock-3gram"


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _grams(text: str) -> Iterable[str]:
    for token in text.lower().split():
        if len(token) < 3:
            yield token
        else:
            for i in range(len(token) - 2):
                yield token[i : i + 3]


def embed_description(text: str, dim: int) -> np.ndarray:
    """
    Hash each word's character 3-grams into a unit vector of length `dim`.

    Words shorter than three characters count as one gram. The empty
    description gives the zero vector.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1; got %d" % dim)
    vector = np.zeros(dim)
    for gram in _grams(text):
        h = fnv1a_64(gram.encode("utf-8"))
        vector[(h >> 1) % dim] += -1.0 if h & 1 else 1.0
    norm = np.linalg.norm(vector)
    if norm > 0:
        vector /= norm
    return vector


@dataclass(frozen=True)
class DescriptionEmbedding:
    matrix: np.ndarray
    """N x p, rows in CodeBook order."""

    provider: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def mock_embeddings(book: CodeBook, dim: int) -> DescriptionEmbedding:
    matrix = np.zeros((book.size, dim))
    for i, code in enumerate(book.codes):
        matrix[i] = embed_description(book.description(code), dim)
    return DescriptionEmbedding(matrix, MOCK_PROVIDER)


def _vector_columns(dim: int) -> List[str]:
    return ["v_%d" % (k + 1) for k in range(dim)]


def load_embeddings(path: Path, book: CodeBook, dim: int) -> DescriptionEmbedding:
    """
    Read ``system, value, v_1 ... v_p`` rows and align them to the book.

    Codes the file does not cover get their mock embedding. Loaded rows are
    used as they are.

    :raises ValueError: if p differs from `dim` or the file names codes that
                        are not in the book.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    try:
        header = list(pd.read_csv(path, sep="\t", nrows=0, quoting=3).columns)
    except pd.errors.EmptyDataError:
        raise InputFormatError(path, 1, "missing header row")
    file_dim = sum(1 for c in header if c.startswith("v_"))
    if file_dim != dim:
        raise ValueError(
            "%s: embeddings have dimension %d; expected %d" % (path, file_dim, dim)
        )
    columns = _vector_columns(dim)
    frame = read_table(path, ["system", "value"] + columns, float_columns=columns)

    matrix = np.zeros((book.size, dim))
    seen = np.zeros(book.size, dtype=bool)
    unknown = []
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            code = CodeId.of(row[0], row[1])
        except ValueError as err:
            raise InputFormatError(path, i + 2, str(err))
        if code not in book.index:
            unknown.append(str(code))
            continue
        matrix[book.index[code]] = np.asarray(row[2:], dtype=np.float64)
        seen[book.index[code]] = True
    if unknown:
        raise ValueError(
            "%s: %d codes are not in the code book: %s"
            % (path, len(unknown), ", ".join(unknown[:20]))
        )

    missing = ~seen
    if missing.any():
        logger.info(
            "%d codes missing from %s use mock embeddings", int(missing.sum()), path
        )
        for row in np.flatnonzero(missing):
            matrix[row] = embed_description(book.description(book.codes[row]), dim)
    return DescriptionEmbedding(matrix, "file:%s" % path.name)


def save_embeddings(
    path: Path, book: CodeBook, embedding: DescriptionEmbedding
) -> None:
    write_table(
        path,
        ["system", "value"] + _vector_columns(embedding.dim),
        (
            [code.system.value, code.value] + embedding.matrix[i].tolist()
            for i, code in enumerate(book.codes)
        ),
    )


def expand_descriptions(book: CodeBook, oracle: Oracle) -> CodeBook:
    """
    Rewrite every description through the oracle (expansion, translation).
    """
    items = [(code, book.description(code)) for code in book.codes]
    rewritten = oracle.expand_descriptions(items)
    if len(rewritten) != len(items):
        raise ValueError(
            "Oracle returned %d descriptions for %d codes"
            % (len(rewritten), len(items))
        )
    return book.with_descriptions(dict(zip(book.codes, rewritten)))


def load_descriptions(path: Path) -> dict:
    frame = read_table(path, ["system", "value", "description"])
    out = {}
    for i, row in enumerate(frame.itertuples(index=False)):
        try:
            out[CodeId.of(row.system, row.value)] = row.description
        except ValueError as err:
            raise InputFormatError(path, i + 2, str(err))
    return out


def save_descriptions(path: Path, book: CodeBook) -> None:
    write_table(
        path,
        ["system", "value", "description"],
        ((c.system.value, c.value, book.description(c)) for c in book.codes),
    )
