"""CheXpert-style label tables.

Raw cells map to four states (``1.0`` positive, ``0.0`` negative, ``-1.0``
uncertain, blank missing). For training, uncertain cells are masked out of
the loss and missing cells count as negatives.
"""

from __future__ import annotations

import csv
import enum
import io
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import SUBMISSION_LABELS
from ._util import round_count, round_half_away

PATH_COLUMN = "Path"


class LabelError(ValueError):
    pass


class MissingColumn(LabelError):
    pass


class BadValue(LabelError):
    def __init__(self, row: int, column: str, token: str):
        super().__init__(f"row {row}, column {column!r}: cannot map value {token!r}")
        self.row = row
        self.column = column
        self.token = token


class DuplicatePath(LabelError):
    pass


class EmptyTable(LabelError):
    pass


class TooFewRecords(LabelError):
    pass


class LabelState(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNCERTAIN = 2
    MISSING = 3

    @classmethod
    def from_token(cls, token: str) -> "LabelState":
        """Map a raw CSV cell; raises ValueError for anything unmappable."""
        s = token.strip()
        if not s:
            return cls.MISSING
        value = float(s)  # ValueError for junk
        if value == 1.0:
            return cls.POSITIVE
        if value == 0.0:
            return cls.NEGATIVE
        if value == -1.0:
            return cls.UNCERTAIN
        raise ValueError(token)

    def to_token(self) -> str:
        return {
            LabelState.POSITIVE: "1.0",
            LabelState.NEGATIVE: "0.0",
            LabelState.UNCERTAIN: "-1.0",
            LabelState.MISSING: "",
        }[self]


@dataclass(frozen=True)
class LabelTable:
    """Per-image label states; ``states`` is an (n_records, n_observations) int8 array of LabelState codes."""

    paths: tuple[str, ...]
    states: np.ndarray
    observation_names: tuple[str, ...] = SUBMISSION_LABELS

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int8)
        if states.ndim != 2 or states.shape != (len(self.paths), len(self.observation_names)):
            raise ValueError(
                f"states shape {states.shape} does not match "
                f"{len(self.paths)} records x {len(self.observation_names)} observations"
            )
        if states.size and (states.min() < 0 or states.max() > 3):
            raise ValueError("states contain codes outside LabelState")
        if len(set(self.paths)) != len(self.paths):
            seen = set()
            dup = next(p for p in self.paths if p in seen or seen.add(p))
            raise DuplicatePath(f"duplicate image path {dup!r}")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "paths", tuple(self.paths))
        object.__setattr__(self, "observation_names", tuple(self.observation_names))

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def n_observations(self) -> int:
        return len(self.observation_names)

    def records(self):
        for path, row in zip(self.paths, self.states):
            yield path, [LabelState(int(v)) for v in row]

    def subset(self, indices) -> "LabelTable":
        idx = np.asarray(indices, dtype=np.int64)
        return LabelTable(tuple(self.paths[i] for i in idx), self.states[idx], self.observation_names)

    def __eq__(self, other):
        if not isinstance(other, LabelTable):
            return NotImplemented
        return (
            self.paths == other.paths
            and self.observation_names == other.observation_names
            and np.array_equal(self.states, other.states)
        )

    def __hash__(self):
        return hash((self.paths, self.observation_names, self.states.tobytes()))

    def to_json(self) -> dict:
        return {
            "observation_names": list(self.observation_names),
            "records": [
                {"path": p, "states": [LabelState(int(v)).name.lower() for v in row]}
                for p, row in zip(self.paths, self.states)
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabelTable":
        names = tuple(obj["observation_names"])
        recs = obj["records"]
        states = np.array(
            [[LabelState[s.upper()] for s in r["states"]] for r in recs], dtype=np.int8
        ).reshape(len(recs), len(names))
        return cls(tuple(r["path"] for r in recs), states, names)


@dataclass(frozen=True)
class TrainingTarget:
    target: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class SplitSpec:
    ratio: float = 0.8
    seed: int = 0
    group_by_patient: bool = False

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ValueError(f"split ratio must be strictly between 0 and 1, got {self.ratio}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def parse_labels(csv_text: str, observation_names: Sequence[str] = SUBMISSION_LABELS) -> LabelTable:
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyTable("label CSV has no header row") from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("\ufeff"):
        header[0] = header[0][1:]
    for col in (PATH_COLUMN, *observation_names):
        if col not in header:
            raise MissingColumn(f"column {col!r} not found in header")
    path_idx = header.index(PATH_COLUMN)
    obs_idx = [header.index(n) for n in observation_names]

    paths: list[str] = []
    rows: list[list[int]] = []
    seen: dict[str, int] = {}
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        path = row[path_idx].strip()
        if path in seen:
            raise DuplicatePath(f"row {rownum}: path {path!r} already seen on row {seen[path]}")
        seen[path] = rownum
        codes = []
        for name, j in zip(observation_names, obs_idx):
            try:
                codes.append(int(LabelState.from_token(row[j])))
            except ValueError:
                raise BadValue(rownum, name, row[j]) from None
        paths.append(path)
        rows.append(codes)
    states = np.array(rows, dtype=np.int8).reshape(len(rows), len(observation_names))
    return LabelTable(tuple(paths), states, tuple(observation_names))


def serialize_labels(table: LabelTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([PATH_COLUMN, *table.observation_names])
    for path, row in zip(table.paths, table.states):
        w.writerow([path, *(LabelState(int(v)).to_token() for v in row)])
    return buf.getvalue()


def target_arrays(table: LabelTable) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (targets, mask) float arrays, shape (n_records, n_observations)."""
    s = table.states
    target = (s == LabelState.POSITIVE).astype(np.float64)
    mask = (s != LabelState.UNCERTAIN).astype(np.float64)
    return target, mask


def to_targets(table: LabelTable) -> list[TrainingTarget]:
    if len(table) == 0:
        raise EmptyTable("cannot build targets from an empty table")
    target, mask = target_arrays(table)
    return [TrainingTarget(t, m) for t, m in zip(target, mask)]


_PATIENT_RE = re.compile(r"(patient\d+)")


def patient_key(path: str) -> str:
    """Patient id embedded in a CheXpert path, else the parent directory."""
    m = _PATIENT_RE.search(path)
    if m:
        return m.group(1)
    head, _, _ = path.replace("\\", "/").rpartition("/")
    return head or path


def split(table: LabelTable, spec: SplitSpec) -> tuple[LabelTable, LabelTable]:
    """Seeded shuffle split; the first part holds round(ratio * N) records.

    With ``group_by_patient`` whole patients are assigned to one side, so the
    first part's size only approximates the target.
    """
    n = len(table)
    if n < 2:
        raise TooFewRecords(f"need at least 2 records to split, got {n}")
    n_first = round_count(spec.ratio * n)
    rng = np.random.default_rng(spec.seed)

    if not spec.group_by_patient:
        perm = rng.permutation(n)
        first = np.sort(perm[:n_first])
        second = np.sort(perm[n_first:])
    else:
        keys = [patient_key(p) for p in table.paths]
        groups: dict[str, list[int]] = {}
        for i, k in enumerate(keys):
            groups.setdefault(k, []).append(i)
        order = list(groups)
        chosen: list[int] = []
        for gi in rng.permutation(len(order)):
            members = groups[order[gi]]
            if len(chosen) + len(members) / 2 <= n_first:
                chosen.extend(members)
        chosen_set = set(chosen)
        first = np.array(sorted(chosen_set), dtype=np.int64)
        second = np.array([i for i in range(n) if i not in chosen_set], dtype=np.int64)
    return table.subset(first), table.subset(second)


@dataclass(frozen=True)
class ObservationDistribution:
    name: str
    positive: int
    negative: int
    uncertain: int
    missing: int
    total: int

    def percent(self, count: int) -> float:
        return round_half_away(100.0 * count / self.total, 2)

    def to_json(self) -> dict:
        out = {"name": self.name, "total": self.total}
        for field in ("positive", "negative", "uncertain", "missing"):
            c = getattr(self, field)
            out[field] = {"count": c, "percent": self.percent(c)}
        return out


def distribution(table: LabelTable) -> list[ObservationDistribution]:
    n = len(table)
    if n == 0:
        raise EmptyTable("cannot summarize an empty table")
    out = []
    for j, name in enumerate(table.observation_names):
        counts = np.bincount(table.states[:, j].astype(np.int64), minlength=4)
        out.append(
            ObservationDistribution(
                name=name,
                positive=int(counts[LabelState.POSITIVE]),
                negative=int(counts[LabelState.NEGATIVE]),
                uncertain=int(counts[LabelState.UNCERTAIN]),
                missing=int(counts[LabelState.MISSING]),
                total=n,
            )
        )
    return out
