"""Subject-level records and the columnar cohort container."""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CohortFormatError


@dataclass(frozen=True)
class SubjectRecord:
    """One patient.

    ``time`` is follow-up from diagnosis, ``min(T, C)``. ``index_time`` is the
    delay from diagnosis to treatment initiation and is present exactly for
    single-arm subjects (``group == 1``).
    """

    id: object
    group: int
    time: float
    event: int
    covariates: tuple
    index_time: Optional[float] = None
    weight: float = 1.0


@dataclass(frozen=True, eq=False)
class Cohort:
    """Columnar dataset of :class:`SubjectRecord` rows.

    All per-subject arrays share the leading dimension ``n``. Controls carry
    ``nan`` in ``index_time``.
    """

    ids: np.ndarray
    group: np.ndarray
    time: np.ndarray
    event: np.ndarray
    index_time: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple = ()
    weight: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.group)
        ids = np.asarray(self.ids)
        group = np.asarray(self.group, dtype=np.int8).reshape(-1)
        time = np.asarray(self.time, dtype=float).reshape(-1)
        event = np.asarray(self.event, dtype=np.int8).reshape(-1)
        index_time = np.asarray(self.index_time, dtype=float).reshape(-1)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        weight = (np.ones(n) if self.weight is None
                  else np.asarray(self.weight, dtype=float).reshape(-1))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        for name, arr in (("ids", ids), ("time", time), ("event", event),
                          ("index_time", index_time), ("weight", weight)):
            if arr.shape[0] != n:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {n}")
        if x.shape[0] != n or len(names) != x.shape[1]:
            raise ValueError("covariate matrix does not match n or covariate_names")
        for attr, arr in (("ids", ids), ("group", group), ("time", time), ("event", event),
                          ("index_time", index_time), ("covariates", x), ("weight", weight)):
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        object.__setattr__(self, "covariate_names", names)

    # ------------------------------------------------------------------
    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], covariate_names=()):
        records = list(records)
        p = len(records[0].covariates) if records else len(covariate_names)
        x = np.array([r.covariates for r in records], dtype=float).reshape(len(records), p)
        return cls(
            ids=np.array([r.id for r in records], dtype=object),
            group=[r.group for r in records],
            time=[r.time for r in records],
            event=[r.event for r in records],
            index_time=[np.nan if r.index_time is None else r.index_time for r in records],
            covariates=x,
            covariate_names=covariate_names,
            weight=[r.weight for r in records],
        )

    def records(self):
        out = []
        for i in range(self.n):
            r = self.index_time[i]
            out.append(SubjectRecord(
                id=self.ids[i].item() if hasattr(self.ids[i], "item") else self.ids[i],
                group=int(self.group[i]), time=float(self.time[i]),
                event=int(self.event[i]), covariates=tuple(self.covariates[i].tolist()),
                index_time=None if np.isnan(r) else float(r), weight=float(self.weight[i]),
            ))
        return out

    def validate(self):
        """Check the record invariants, raising :class:`CohortFormatError`."""
        def fail(i, msg):
            raise CohortFormatError(f"row {i + 1} (id={self.ids[i]!r}): {msg}")

        for i in np.flatnonzero(~np.isin(self.group, (0, 1))):
            fail(i, "group must be 0 or 1")
        for i in np.flatnonzero(~np.isin(self.event, (0, 1))):
            fail(i, "event must be 0 or 1")
        for i in np.flatnonzero(~(self.time >= 0)):
            fail(i, "time must be a nonnegative number")
        has_r = ~np.isnan(self.index_time)
        for i in np.flatnonzero((self.group == 1) & ~has_r):
            fail(i, "single-arm subject (group=1) lacks index_time")
        for i in np.flatnonzero((self.group == 0) & has_r):
            fail(i, "external control (group=0) must not carry index_time")
        for i in np.flatnonzero(has_r & ~(self.index_time >= 0)):
            fail(i, "index_time must be nonnegative")
        for i in np.flatnonzero(has_r & (self.time < self.index_time)):
            fail(i, "time is smaller than index_time")
        for i in np.flatnonzero(~np.all(np.isfinite(self.covariates), axis=1)):
            fail(i, "missing or non-finite covariate value")
        for i in np.flatnonzero(~(self.weight >= 0)):
            fail(i, "weight must be nonnegative")
        return self

    # ------------------------------------------------------------------
    @property
    def n(self):
        return self.group.shape[0]

    @property
    def n1(self):
        return int(np.count_nonzero(self.group == 1))

    @property
    def n0(self):
        return int(np.count_nonzero(self.group == 0))

    @property
    def p(self):
        return self.covariates.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        return Cohort(self.ids[idx], self.group[idx], self.time[idx], self.event[idx],
                      self.index_time[idx], self.covariates[idx], self.covariate_names,
                      self.weight[idx])

    def select_covariates(self, names):
        names = tuple(names)
        missing = [nm for nm in names if nm not in self.covariate_names]
        if missing:
            raise KeyError(f"unknown covariates: {missing}")
        cols = [self.covariate_names.index(nm) for nm in names]
        return Cohort(self.ids, self.group, self.time, self.event, self.index_time,
                      self.covariates[:, cols], names, self.weight)

    def single_arm(self):
        return self.take(np.flatnonzero(self.group == 1))

    def controls(self):
        return self.take(np.flatnonzero(self.group == 0))

    def __repr__(self):
        return f"Cohort(n1={self.n1}, n0={self.n0}, covariates={self.covariate_names})"
