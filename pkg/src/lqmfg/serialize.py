"""Deterministic artifact serialization: delimited tables, digests, manifests.

Every run writes the same bytes for the same inputs: floats are rendered with
17 significant digits (full float64 round-trip), line endings are pinned to
``\\n``, JSON files carry no timestamps, and the run manifest written to disk
omits wall-clock time (the stdout copy includes it).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import numbers

import numpy as np

__all__ = [
    "format_cell",
    "series_table",
    "write_csv",
    "write_path_csv",
    "write_json",
    "config_digest",
    "RunManifest",
    "write_manifest",
]


def format_cell(value) -> str:
    """Render one CSV cell: integers verbatim, floats with 17 significant digits."""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        raise TypeError("boolean cells are ambiguous in delimited output")
    if isinstance(value, numbers.Integral):
        return str(int(value))
    return format(float(value), ".17g")


def _component_labels(name: str, shape: tuple) -> list:
    """Column labels for one flattened series component, 1-based, row-major."""
    if len(shape) == 1:
        return [f"{name}_{i + 1}" for i in range(shape[0])]
    if len(shape) == 2:
        sep = "" if shape[0] <= 9 and shape[1] <= 9 else "_"
        return [
            f"{name}_{i + 1}{sep}{j + 1}"
            for i in range(shape[0])
            for j in range(shape[1])
        ]
    raise ValueError(f"series components must be vectors or matrices, got shape {shape}")


def series_table(name: str, times: np.ndarray, values: np.ndarray):
    """Flatten a sampled path into a (header, rows) pair for CSV output.

    ``values`` has shape (n_nodes, d) or (n_nodes, d1, d2); the header is
    ``t`` followed by 1-based component labels in row-major order.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    values = np.asarray(values, dtype=float)
    if values.shape[0] != times.shape[0]:
        raise ValueError(
            f"series {name!r} has {values.shape[0]} samples for {times.shape[0]} nodes")
    header = ["t"] + _component_labels(name, values.shape[1:])
    flat = values.reshape(values.shape[0], -1)
    rows = np.column_stack([times, flat])
    return header, rows


def write_csv(path, header, rows) -> int:
    """Write a delimited table and return the number of data rows.

    ``rows`` is any iterable of cell sequences; cells are formatted with
    :func:`format_cell`. The file always ends with a newline.
    """
    header = list(header)
    count = 0
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [format_cell(c) for c in row]
            if len(cells) != len(header):
                raise ValueError(
                    f"row {count} has {len(cells)} cells for {len(header)} columns")
            fh.write(",".join(cells) + "\n")
            count += 1
    return count


def write_path_csv(path, name: str, sampled_path) -> int:
    """Write a MatrixPath/VectorPath-like object (``.grid``, ``.values``) to CSV."""
    header, rows = series_table(name, sampled_path.grid.nodes(), sampled_path.values)
    return write_csv(path, header, rows)


def write_json(path, payload: dict) -> None:
    """Write a JSON document with stable formatting and a trailing newline."""
    with open(path, "w", newline="") as fh:
        json.dump(payload, fh, indent=2, allow_nan=False)
        fh.write("\n")


def config_digest(payload: dict) -> str:
    """SHA-256 over the canonical JSON form of a plain-type configuration dict."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"),
                           allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """What one CLI run produced.

    ``outputs`` is a tuple of ``{"path", "rows", "figure"}`` records: ``rows``
    is the data-row count for delimited files and ``None`` for binary or JSON
    artifacts; ``figure`` names the rendered figure a table feeds (or
    ``None``). The on-disk form (:meth:`file_payload`) excludes ``wall_time``
    so that identical runs produce byte-identical manifest files.
    """

    subcommand: str
    digest: str
    outputs: tuple
    wall_time: float

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(dict(o) for o in self.outputs))
        for out in self.outputs:
            if "path" not in out:
                raise ValueError("every manifest output needs a 'path'")
            out.setdefault("rows", None)
            out.setdefault("figure", None)

    def file_payload(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "digest": self.digest,
            "outputs": [dict(o) for o in self.outputs],
        }

    def stdout_payload(self) -> dict:
        payload = self.file_payload()
        payload["wall_time"] = self.wall_time
        return payload


def write_manifest(path, manifest: RunManifest) -> None:
    """Write the deterministic (timing-free) manifest JSON."""
    write_json(path, manifest.file_payload())
