"""Event sequence data model, validation and JSONL ingestion.

A corpus is a JSONL file with one record per line::

    {"body": {"X1": [1.0, 2.5], "X2": [2.0]}, "target": [3.0], "horizon": 5.0}

Predicate names are resolved against a catalog, a JSON object
``{"predicates": [...], "target": "Y"}``.  Sequences are immutable
after loading and safe to share across workers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CorpusFormatError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PredicateCatalog:
    """Ordered predicate names plus the index of the target predicate.

    The catalog order (minus the target) is the canonical column order
    used by the rule-selection machinery.
    """

    names: tuple
    target_index: int

    def __post_init__(self):
        if not self.names:
            raise ValidationError("catalog has no predicates")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("catalog predicate names must be unique")
        if any(not n for n in self.names):
            raise ValidationError("catalog predicate names must be non-empty")
        if not 0 <= self.target_index < len(self.names):
            raise ValidationError(
                f"target index {self.target_index} outside catalog of size {len(self.names)}"
            )

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def target_name(self) -> str:
        return self.names[self.target_index]

    @property
    def body_indices(self) -> tuple:
        """Catalog indices of all non-target predicates, in catalog order."""
        return tuple(i for i in range(len(self.names)) if i != self.target_index)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown predicate {name!r}") from None

    def to_dict(self) -> dict:
        return {"predicates": list(self.names), "target": self.target_name}

    @classmethod
    def from_dict(cls, obj: dict) -> "PredicateCatalog":
        if not isinstance(obj, dict) or "predicates" not in obj or "target" not in obj:
            raise ValidationError("catalog must have 'predicates' and 'target' fields")
        names = tuple(obj["predicates"])
        target = obj["target"]
        if target not in names:
            raise ValidationError(f"target {target!r} not listed among predicates")
        return cls(names=names, target_index=names.index(target))


def load_catalog(path) -> PredicateCatalog:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise CorpusFormatError(str(exc), path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid JSON: {exc}", path=str(path)) from exc
    return PredicateCatalog.from_dict(obj)


def _frozen_times(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EventSequence:
    """One observed sample: body occurrence times plus target event times.

    ``body_events`` maps catalog predicate index to a strictly sorted
    array of occurrence times; predicates with no occurrences may be
    absent from the map.  ``target_times`` is strictly sorted and
    non-empty.  All times lie in (0, horizon] for targets and
    [0, horizon] for body events.
    """

    body_events: dict
    target_times: np.ndarray
    horizon: float
    num_predicates: int
    target_index: int
    _validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "target_times", _frozen_times(self.target_times))
        object.__setattr__(
            self,
            "body_events",
            {int(k): _frozen_times(v) for k, v in self.body_events.items()},
        )
        if self._validate:
            self.validate()

    def validate(self):
        tt = self.target_times
        if tt.size == 0:
            raise ValidationError("empty target list")
        if np.any(np.diff(tt) <= 0):
            raise ValidationError("target times not strictly increasing")
        if tt[0] <= 0:
            raise ValidationError("target times must be strictly positive")
        if tt[-1] > self.horizon:
            raise ValidationError("target time beyond horizon")
        for idx, times in self.body_events.items():
            if not 0 <= idx < self.num_predicates:
                raise ValidationError(f"body predicate index {idx} outside catalog")
            if idx == self.target_index:
                raise ValidationError("body events may not use the target predicate")
            if times.size and (np.any(np.diff(times) <= 0) or times[0] < 0):
                raise ValidationError(
                    f"body predicate {idx}: times must be non-negative and strictly increasing"
                )
            if times.size and times[-1] > self.horizon:
                raise ValidationError(f"body predicate {idx}: time beyond horizon")

    def times_for(self, predicate: int) -> np.ndarray:
        """Occurrence times of one body predicate (empty array if none)."""
        if not 0 <= predicate < self.num_predicates or predicate == self.target_index:
            raise ValidationError(f"unknown predicate index {predicate}")
        return self.body_events.get(predicate, _EMPTY)

    @property
    def num_target_events(self) -> int:
        return int(self.target_times.size)


_EMPTY = _frozen_times([])


def last_occurrence_before(seq: EventSequence, predicate: int, t: float):
    """Largest occurrence time of ``predicate`` strictly less than ``t``.

    Returns None when the predicate has not occurred before ``t``.
    History "up to t" excludes t itself, so an event at exactly t does
    not count.
    """
    if t < 0:
        raise ValidationError("query time must be non-negative")
    times = seq.times_for(predicate)
    pos = int(np.searchsorted(times, t, side="left"))
    if pos == 0:
        return None
    return float(times[pos - 1])


def _clean_times(raw, what, line, strict):
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1:
        raise CorpusFormatError(f"{what}: expected a flat list of numbers", line=line)
    if not np.all(np.isfinite(arr)):
        raise CorpusFormatError(f"{what}: non-finite time", line=line)
    if arr.size and (np.any(np.diff(arr) <= 0)):
        if strict:
            raise CorpusFormatError(
                f"{what}: times not strictly increasing (strict mode)", line=line
            )
        before = arr.size
        arr = np.unique(arr)
        log.warning(
            "line %d: %s unsorted or duplicated; sorted %d -> %d entries",
            line, what, before, arr.size,
        )
    return arr


def load_sequences(path, catalog: PredicateCatalog, strict: bool = True) -> list:
    """Load and validate a JSONL corpus against ``catalog``.

    In strict mode (the default) unsorted time lists are an error; in
    lenient mode they are sorted (and deduplicated) with a warning.
    """
    sequences = []
    try:
        fh = open(path)
    except OSError as exc:
        raise CorpusFormatError(str(exc), path=str(path)) from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(
                    f"malformed record: {exc}", line=lineno, path=str(path)
                ) from exc
            sequences.append(_sequence_from_record(record, catalog, lineno, strict))
    return sequences


def _sequence_from_record(record, catalog, lineno, strict) -> EventSequence:
    for key in ("body", "target", "horizon"):
        if key not in record:
            raise CorpusFormatError(f"missing field {key!r}", line=lineno)
    body = {}
    for name, raw in record["body"].items():
        idx = catalog.index_of(name) if name in catalog.names else None
        if idx is None:
            raise CorpusFormatError(f"unknown predicate {name!r}", line=lineno)
        if idx == catalog.target_index:
            raise CorpusFormatError(
                f"target predicate {name!r} listed among body events", line=lineno
            )
        times = _clean_times(raw, f"body[{name}]", lineno, strict)
        if times.size:
            body[idx] = times
    target = _clean_times(record["target"], "target", lineno, strict)
    if target.size == 0:
        raise CorpusFormatError("empty target list", line=lineno)
    try:
        return EventSequence(
            body_events=body,
            target_times=target,
            horizon=float(record["horizon"]),
            num_predicates=catalog.size,
            target_index=catalog.target_index,
        )
    except ValidationError as exc:
        raise CorpusFormatError(str(exc), line=lineno) from exc


def sequence_to_record(seq: EventSequence, catalog: PredicateCatalog) -> dict:
    body = {
        catalog.names[idx]: list(map(float, times))
        for idx, times in sorted(seq.body_events.items())
        if times.size
    }
    return {
        "body": body,
        "target": list(map(float, seq.target_times)),
        "horizon": float(seq.horizon),
    }


def save_sequences(path, sequences, catalog: PredicateCatalog):
    """Write sequences as JSONL; floats round-trip bit-exactly."""
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_record(seq, catalog)))
            fh.write("\n")
