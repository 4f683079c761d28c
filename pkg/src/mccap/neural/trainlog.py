"""Training-progress rows and their CSV on-disk form."""

import csv
from dataclasses import dataclass

LOG_HEADER = ("step", "split", "loss", "accuracy", "rouge_l", "cider")


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    split: str
    loss: float | None = None
    accuracy: float | None = None
    rouge_l: float | None = None
    cider: float | None = None


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row.step, row.split, _cell(row.loss),
                             _cell(row.accuracy), _cell(row.rouge_l),
                             _cell(row.cider)])
