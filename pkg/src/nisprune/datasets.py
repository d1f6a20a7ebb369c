"""Dataset container and the CSV + manifest interchange format.

Rows are flattened samples under a header ``x0,...,x{d-1},label``. Tensor
datasets flatten channel-major and declare their per-sample shape in a
sidecar manifest (``foo.csv`` pairs with ``foo.manifest.json``).
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .model import atomic_write_bytes, atomic_write_text


@dataclass
class Dataset:
    inputs: np.ndarray  # (m, d) vectors or (m, c, x, x) tensors
    labels: np.ndarray | None = None  # (m,) integer classes


def manifest_path_for(csv_path: str) -> str:
    base = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return base + ".manifest.json"


def save_dataset(ds: Dataset, csv_path: str) -> None:
    inputs = np.asarray(ds.inputs, dtype=float)
    if inputs.ndim not in (2, 4):
        raise DataError("inputs must be (m, d) or (m, c, x, x), got %r" % (inputs.shape,))
    flat = inputs.reshape(inputs.shape[0], -1)
    labels = ds.labels
    if labels is not None and len(labels) != flat.shape[0]:
        raise DataError("%d rows but %d labels" % (flat.shape[0], len(labels)))

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["x%d" % j for j in range(flat.shape[1])] + ["label"])
    for i, row in enumerate(flat):
        label = "" if labels is None else str(int(labels[i]))
        writer.writerow([repr(float(v)) for v in row] + [label])
    atomic_write_text(csv_path, buf.getvalue())

    manifest = {"input_shape": [int(d) for d in inputs.shape[1:]]}
    atomic_write_bytes(
        manifest_path_for(csv_path),
        (json.dumps(manifest, sort_keys=True) + "\n").encode("utf-8"),
    )


def load_dataset(csv_path: str) -> Dataset:
    try:
        with open(csv_path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError("%s is empty" % csv_path) from None
            rows = list(reader)
    except OSError as e:
        raise DataError("cannot read %s: %s" % (csv_path, e)) from e

    has_label = bool(header) and header[-1] == "label"
    d = len(header) - 1 if has_label else len(header)
    expected = ["x%d" % j for j in range(d)]
    if header[:d] != expected:
        raise DataError("%s header must be x0..x%d[,label]" % (csv_path, d - 1))
    if not rows:
        raise DataError("%s has no data rows" % csv_path)

    values = np.empty((len(rows), d))
    labels = np.empty(len(rows), dtype=int) if has_label else None
    labeled = has_label
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError("%s row %d has %d fields, expected %d" % (csv_path, i + 2, len(row), len(header)))
        try:
            values[i] = [float(v) for v in row[:d]]
        except ValueError as e:
            raise DataError("%s row %d: %s" % (csv_path, i + 2, e)) from e
        if has_label:
            if row[d] == "":
                labeled = False
            else:
                try:
                    labels[i] = int(row[d])
                except ValueError as e:
                    raise DataError("%s row %d: %s" % (csv_path, i + 2, e)) from e
    if not np.isfinite(values).all():
        raise DataError("%s contains non-finite values" % csv_path)

    shape = None
    mpath = manifest_path_for(csv_path)
    if os.path.exists(mpath):
        try:
            with open(mpath) as fh:
                manifest = json.load(fh)
            shape = tuple(int(v) for v in manifest["input_shape"])
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise DataError("bad manifest %s: %s" % (mpath, e)) from e
    if shape is not None and int(np.prod(shape)) != d:
        raise DataError("manifest shape %r does not hold %d values" % (shape, d))
    if shape is not None and len(shape) == 3:
        values = values.reshape((len(rows),) + shape)

    return Dataset(inputs=values, labels=labels if labeled else None)
