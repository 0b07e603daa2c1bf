"""Matrix/vector file format shared with external consumers (plot scripts).

Text form:

    # key=value            (optional metadata comments, any number)
    matrix <rows> <cols>
    a11 a12 ... a1c
    ...

Entries are whitespace-separated decimals with 17 significant digits, so
float64 round-trips losslessly.  The binary variant replaces the payload by
row-major little-endian float64 and marks the header line with a trailing
``binary`` token; header semantics are identical.
"""

from __future__ import annotations

import numpy as np

__all__ = ["write_matrix", "read_matrix", "MatrixFormatError"]


class MatrixFormatError(ValueError):
    pass


def write_matrix(path, arr: np.ndarray, meta: dict | None = None,
                 binary: bool = False) -> None:
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    if arr.ndim != 2:
        raise ValueError("only 1-D or 2-D arrays are supported")
    rows, cols = arr.shape
    header_lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    if binary:
        header_lines.append(f"matrix {rows} {cols} binary")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header_lines) + "\n").encode("ascii"))
            fh.write(arr.astype("<f8").tobytes(order="C"))
        return
    header_lines.append(f"matrix {rows} {cols}")
    with open(path, "w") as fh:
        fh.write("\n".join(header_lines) + "\n")
        for r in range(rows):
            fh.write(" ".join(f"{x:.17g}" for x in arr[r]) + "\n")


def read_matrix(path):
    """Returns (array, metadata dict).  Detects the binary variant."""
    with open(path, "rb") as fh:
        raw = fh.read()
    meta: dict[str, str] = {}
    pos = 0
    header = None
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise MatrixFormatError(f"{path}: missing 'matrix <rows> <cols>' header")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if not line:
            continue
        header = line.split()
        break
    if header[0] != "matrix" or len(header) not in (3, 4):
        raise MatrixFormatError(f"{path}: malformed header {' '.join(header)!r}")
    try:
        rows, cols = int(header[1]), int(header[2])
    except ValueError as exc:
        raise MatrixFormatError(f"{path}: non-integer matrix shape") from exc
    if len(header) == 4:
        if header[3] != "binary":
            raise MatrixFormatError(f"{path}: unknown header token {header[3]!r}")
        payload = raw[pos:pos + 8 * rows * cols]
        if len(payload) != 8 * rows * cols:
            raise MatrixFormatError(f"{path}: truncated binary payload")
        return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy(), meta
    try:
        arr = np.array(raw[pos:].decode("ascii").split(), dtype=float)
    except ValueError as exc:
        raise MatrixFormatError(f"{path}: non-numeric payload: {exc}") from exc
    if arr.size != rows * cols:
        raise MatrixFormatError(
            f"{path}: expected {rows * cols} entries, found {arr.size}")
    return arr.reshape(rows, cols), meta
