"""
Binary container for embedding matrices and training checkpoints.

A matrix block is a fixed header followed by row-major little-endian 64-bit
floats::

    b"GAME" | version u16 | rows u32 | cols u32 | row-order hash (32 bytes)

The row-order hash is :meth:`codealign.codebook.CodeBook.row_order_hash` for
code-indexed matrices and 32 zero bytes for everything else (GAT weights,
scalars). Reading a code-indexed matrix against a CodeBook with a different
hash is an error.

A checkpoint is a sequence of named blocks (u16 name length, UTF-8 name,
block) running to end of file.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional

import numpy as np

from .tsv import MissingInputError

__all__ = ["MatrixBlock", "Checkpoint", "save_matrix", "load_matrix", "NO_ROW_HASH"]

MAGIC = b"GAME"
VERSION = 1
NO_ROW_HASH = bytes(32)

_HEADER = struct.Struct("<4sHII32s")
_NAME_LENGTH = struct.Struct("<H")


def _read_exactly(stream: BinaryIO, n_bytes: int, what: str) -> bytes:
    """
    Read `n_bytes` or raise.

    Raise EOFError if the stream is at its end before the first byte, and
    ValueError if it ends partway through.
    """
    blobs = []
    remaining = n_bytes
    while remaining > 0:
        blob = stream.read(remaining)
        if not blob:
            if remaining == n_bytes:
                raise EOFError
            raise ValueError("Missing %d bytes reading %s" % (remaining, what))
        blobs.append(blob)
        remaining -= len(blob)
    return b"".join(blobs)


@dataclass(frozen=True)
class MatrixBlock:
    """
    One 2-D float64 matrix and the row order it is indexed by.
    """

    matrix: np.ndarray
    """Dense 2-D array. Written as little-endian float64."""

    row_hash: bytes = NO_ROW_HASH
    """32-byte row-order hash, or :data:`NO_ROW_HASH`."""

    def write_to(self, stream: BinaryIO) -> None:
        """
        Write this block to a binary stream.
        """
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("Expected a 2-D matrix; got shape %r" % (matrix.shape,))
        if len(self.row_hash) != 32:
            raise ValueError("Row hash must be 32 bytes; got %d" % len(self.row_hash))
        rows, cols = matrix.shape
        stream.write(_HEADER.pack(MAGIC, VERSION, rows, cols, self.row_hash))
        stream.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes(order="C"))

    @classmethod
    def read_from(cls, stream: BinaryIO) -> MatrixBlock:
        """
        Read a block written with `write_to()`.

        Raise EOFError if the stream is at its end, ValueError if the block is
        truncated or has the wrong magic bytes or version.
        """
        header = _read_exactly(stream, _HEADER.size, "matrix header")
        magic, version, rows, cols, row_hash = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError("Bad magic bytes %r; expected %r" % (magic, MAGIC))
        if version != VERSION:
            raise ValueError("Unsupported container version %d" % version)
        try:
            blob = _read_exactly(stream, rows * cols * 8, "matrix data")
        except EOFError:
            if rows * cols:
                raise ValueError("Missing matrix data (%d x %d)" % (rows, cols))
            blob = b""
        matrix = np.frombuffer(blob, dtype="<f8").reshape(rows, cols)
        return cls(matrix.astype(np.float64), row_hash)


def save_matrix(path: Path, matrix: np.ndarray, row_hash: bytes = NO_ROW_HASH) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        MatrixBlock(matrix, row_hash).write_to(f)


def load_matrix(path: Path, row_hash: Optional[bytes] = None) -> np.ndarray:
    """
    Read a single-matrix file.

    :param row_hash: if given, the file's row-order hash must equal it.
    :raises MissingInputError: if `path` does not exist.
    :raises ValueError: on a malformed file or a row-order mismatch.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    with path.open("rb") as f:
        try:
            block = MatrixBlock.read_from(f)
        except EOFError:
            raise ValueError("%s: empty matrix file" % path)
    if row_hash is not None and block.row_hash != row_hash:
        raise ValueError(
            "%s: row order does not match the code book (hash %s, expected %s)"
            % (path, block.row_hash.hex()[:12], row_hash.hex()[:12])
        )
    return block.matrix


@dataclass(frozen=True)
class Checkpoint:
    """
    Named parameter matrices plus optimizer state and the epoch reached.
    """

    params: Dict[str, np.ndarray]
    """Parameter name (e.g. ``"site1.gat.W"``) -> matrix."""

    epoch: int = 0

    learning_rate: float = 0.0
    """Current (decayed) learning rate."""

    extra: Dict[str, np.ndarray] = field(default_factory=dict)
    """Further named matrices, such as a best-epoch embedding."""

    def write_to(self, stream: BinaryIO) -> None:
        sections = [
            ("@epoch", np.array([[float(self.epoch)]])),
            ("@learning_rate", np.array([[self.learning_rate]])),
        ]
        sections += [("param:" + k, v) for k, v in sorted(self.params.items())]
        sections += [("extra:" + k, v) for k, v in sorted(self.extra.items())]
        for name, matrix in sections:
            encoded = name.encode("utf-8")
            stream.write(_NAME_LENGTH.pack(len(encoded)))
            stream.write(encoded)
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.ndim == 1:
                matrix = matrix[None, :]
            MatrixBlock(matrix).write_to(stream)

    @classmethod
    def read_from(cls, stream: BinaryIO) -> Checkpoint:
        epoch = 0
        learning_rate = 0.0
        params: Dict[str, np.ndarray] = {}
        extra: Dict[str, np.ndarray] = {}
        while True:
            try:
                blob = _read_exactly(stream, _NAME_LENGTH.size, "section name")
            except EOFError:
                break
            (n,) = _NAME_LENGTH.unpack(blob)
            name = _read_exactly(stream, n, "section name").decode("utf-8")
            try:
                matrix = MatrixBlock.read_from(stream).matrix
            except EOFError:
                raise ValueError("Missing block for section %r" % name)
            if name == "@epoch":
                epoch = int(matrix[0, 0])
            elif name == "@learning_rate":
                learning_rate = float(matrix[0, 0])
            elif name.startswith("param:"):
                params[name[len("param:"):]] = matrix
            elif name.startswith("extra:"):
                extra[name[len("extra:"):]] = matrix
            else:
                raise ValueError("Unknown checkpoint section %r" % name)
        return cls(params, epoch, learning_rate, extra)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        self.write_to(buf)
        # write whole file at once so a crash never leaves half a checkpoint
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> Checkpoint:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(path)
        with path.open("rb") as f:
            return cls.read_from(f)
