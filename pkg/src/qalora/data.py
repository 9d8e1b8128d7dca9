"""JSON-lines datasets and loss-curve CSV files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .training import Dataset


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def _real_list(value, key: str, line: int) -> list:
    if not isinstance(value, list) or not value:
        raise DataFormatError(f'"{key}" must be a non-empty array of numbers', line)
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise DataFormatError(f'"{key}" must contain only numbers', line)
    return value


def load_jsonl(path, name: str | None = None) -> Dataset:
    """Read rows of ``{"input": [...], "target": [...]}`` or ``{"input": [...], "label": k}``."""
    inputs, targets, labels = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(row, dict) or "input" not in row:
                raise DataFormatError('each row must be an object with an "input" array', lineno)
            x = _real_list(row["input"], "input", lineno)
            if inputs and len(x) != len(inputs[0]):
                raise DataFormatError(f"input has {len(x)} values, expected {len(inputs[0])}", lineno)
            if ("target" in row) == ("label" in row):
                raise DataFormatError('each row needs exactly one of "target" or "label"', lineno)
            if "target" in row:
                if labels:
                    raise DataFormatError("mixes targets and labels", lineno)
                t = _real_list(row["target"], "target", lineno)
                if targets and len(t) != len(targets[0]):
                    raise DataFormatError(f"target has {len(t)} values, expected {len(targets[0])}", lineno)
                targets.append(t)
            else:
                if targets:
                    raise DataFormatError("mixes targets and labels", lineno)
                label = row["label"]
                if isinstance(label, bool) or not isinstance(label, int) or label < 0:
                    raise DataFormatError('"label" must be a non-negative integer', lineno)
                labels.append(label)
            inputs.append(x)
    if not inputs:
        raise DataFormatError("dataset is empty")
    x = np.array(inputs, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataFormatError("non-finite input value")
    name = name or Path(path).stem
    if targets:
        t = np.array(targets, dtype=np.float64)
        if not np.all(np.isfinite(t)):
            raise DataFormatError("non-finite target value")
        return Dataset(x, targets=t, name=name)
    return Dataset(x, labels=np.array(labels, dtype=np.int64), name=name)


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(dataset)):
            row = {"input": dataset.inputs[i].tolist()}
            if dataset.is_classification:
                row["label"] = int(dataset.labels[i])
            else:
                row["target"] = dataset.targets[i].tolist()
            fh.write(json.dumps(row) + "\n")


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, repr(float(loss))])


def read_loss_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [float(row["loss"]) for row in reader]
