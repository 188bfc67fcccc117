"""Dataset CSV reading and writing.

Schema: ``obs_id``, ``choice`` (combination label), optional ``avail_<label>``
columns holding 0/1, and any number of numeric covariate columns.  An empty
covariate cell (or ``NA``) marks a missing value.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from .choiceset import ChoiceSet, enumerate_combinations
from .cnl import Dataset, Observation
from .errors import LoadError, ParseError

MISSING = {"", "NA"}


def _number(text: str) -> float:
    t = text.strip()
    if t in MISSING:
        return math.nan
    # reject thousands separators and locale decimal commas outright
    if "," in t or t.lower() in ("nan", "inf", "-inf", "+inf", "infinity", "-infinity"):
        raise ValueError(text)
    return float(t)


def read_dataset(text: str, choiceset: ChoiceSet | None = None, source: str = "<string>") -> Dataset:
    cs = choiceset or enumerate_combinations()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise LoadError(f"{source}: empty file, header expected") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise LoadError(f"{source}: duplicate column names in header")
    for col in ("obs_id", "choice"):
        if col not in header:
            raise LoadError(f"{source}: required column {col!r} missing from header")
    i_id, i_choice = header.index("obs_id"), header.index("choice")
    avail_cols: list[tuple[int, int]] = []
    cov_cols: list[tuple[int, str]] = []
    for k, name in enumerate(header):
        if k in (i_id, i_choice):
            continue
        if name.startswith("avail_"):
            label = name[len("avail_"):]
            try:
                pos = cs.position(cs.parse(label))
            except (ParseError, ValueError):
                raise LoadError(f"{source}: column {name!r} names no alternative of the choice set") from None
            avail_cols.append((k, pos))
        else:
            cov_cols.append((k, name))
    full = (1 << len(cs)) - 1
    observations = []
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        where = f"{source}, row {rowno}"
        if len(row) != len(header):
            raise LoadError(f"{where}: expected {len(header)} fields, got {len(row)}")
        try:
            chosen = cs.parse(row[i_choice].strip())
        except ParseError as exc:
            raise LoadError(f"{where}: {exc}") from None
        if chosen not in cs:
            raise LoadError(f"{where}: choice {chosen.label} is excluded from the choice set")
        mask = full
        for k, pos in avail_cols:
            cell = row[k].strip()
            if cell not in ("0", "1"):
                raise LoadError(f"{where}: availability column {header[k]!r} must be 0 or 1, got {cell!r}")
            if cell == "0":
                mask &= ~(1 << pos)
        if not mask >> cs.position(chosen) & 1:
            raise LoadError(f"{where}: chosen alternative {chosen.label} is marked unavailable")
        covariates = {}
        for k, name in cov_cols:
            try:
                covariates[name] = _number(row[k])
            except ValueError:
                raise LoadError(f"{where}: covariate {name!r} is not numeric: {row[k]!r}") from None
        observations.append(
            Observation(row[i_id].strip(), chosen, covariates, None if mask == full else mask)
        )
    try:
        return Dataset(tuple(observations), f"file {source}")
    except Exception as exc:
        raise LoadError(f"{source}: {exc}") from None


def load_dataset(path: str | Path, choiceset: ChoiceSet | None = None) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from None
    return read_dataset(text, choiceset, str(path))


def _cell(v: float) -> str:
    if math.isnan(v):
        return ""
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def dataset_csv(dataset: Dataset, choiceset: ChoiceSet | None = None) -> str:
    cs = choiceset or enumerate_combinations()
    names: dict[str, None] = {}
    for obs in dataset:
        for k in obs.covariates:
            names.setdefault(k)
    with_avail = any(o.availability is not None for o in dataset)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["obs_id", "choice"]
    if with_avail:
        head += [f"avail_{label}" for label in cs.labels]
    w.writerow(head + list(names))
    bits = np.arange(len(cs))
    for obs in dataset:
        row = [obs.id, obs.chosen.label]
        if with_avail:
            mask = (1 << len(cs)) - 1 if obs.availability is None else obs.availability
            row += [str(int(b)) for b in (mask >> bits) & 1]
        row += [_cell(obs.covariates.get(k, math.nan)) for k in names]
        w.writerow(row)
    return buf.getvalue()


def save_dataset(dataset: Dataset, path: str | Path, choiceset: ChoiceSet | None = None) -> None:
    Path(path).write_text(dataset_csv(dataset, choiceset), encoding="utf-8")
