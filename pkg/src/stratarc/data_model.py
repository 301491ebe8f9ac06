"""Domain types, validation, and CSV ingestion for multi-site trial data.

A dataset is one record per individual: site id, randomization arm,
observed destination (one of three school-quality categories), a binary
outcome, a nonnegative sampling weight, and an optional covariate vector.
Internally everything is held in numpy arrays so downstream estimators and
resampling loops stay fast; `IndividualRecord` objects are materialized
only on demand.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadValue, EmptyDataset, MissingColumn


class Arm(IntEnum):
    """Randomization arm."""

    CONTROL = 0
    TREATMENT = 1


class Destination(Enum):
    """Observed school-quality category.

    The three-level structure is what matters; the string labels used in
    input files are configurable through `ColumnSchema.dest_labels`.
    """

    ECHS = "e"
    LOW_QUALITY = "lq"
    HIGH_QUALITY = "hq"


# Fixed integer coding used in the array representation.
DEST_ORDER = (Destination.ECHS, Destination.LOW_QUALITY, Destination.HIGH_QUALITY)
DEST_CODE = {dest: i for i, dest in enumerate(DEST_ORDER)}


class Stratum(Enum):
    """The five principal strata that can exist under monotone take-up."""

    ECHS_ALWAYS_TAKER = "eat"
    LOW_QUALITY_ALWAYS_TAKER = "lat"
    HIGH_QUALITY_ALWAYS_TAKER = "hat"
    LOW_QUALITY_COMPLIER = "lc"
    HIGH_QUALITY_COMPLIER = "hc"


STRATUM_ORDER = (
    Stratum.ECHS_ALWAYS_TAKER,
    Stratum.LOW_QUALITY_ALWAYS_TAKER,
    Stratum.HIGH_QUALITY_ALWAYS_TAKER,
    Stratum.LOW_QUALITY_COMPLIER,
    Stratum.HIGH_QUALITY_COMPLIER,
)
STRATUM_CODE = {s: i for i, s in enumerate(STRATUM_ORDER)}


@dataclass(frozen=True)
class IndividualRecord:
    """One student."""

    site_id: str
    arm: Arm
    destination: Destination
    outcome: int
    weight: float = 1.0
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {self.outcome}")
        if self.weight < 0:
            raise ValueError(f"weight must be nonnegative, got {self.weight}")


class StudyDataset:
    """Immutable, array-backed collection of individual records.

    Parameters mirror the per-record fields; use `from_records` to build
    from `IndividualRecord` objects or `ingest_csv` to read a file.
    """

    def __init__(
        self,
        site_ids: Sequence[str],
        site_codes: np.ndarray,
        arm: np.ndarray,
        dest: np.ndarray,
        outcome: np.ndarray,
        weight: np.ndarray,
        covariates: np.ndarray,
        covariate_names: Sequence[str] = (),
    ):
        n = len(site_codes)
        if n == 0:
            raise EmptyDataset("dataset has no records")
        self.site_ids = tuple(str(s) for s in site_ids)
        self.site_codes = np.ascontiguousarray(site_codes, dtype=np.int64)
        self.arm = np.ascontiguousarray(arm, dtype=np.int8)
        self.dest = np.ascontiguousarray(dest, dtype=np.int8)
        self.outcome = np.ascontiguousarray(outcome, dtype=np.int8)
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.covariates = np.ascontiguousarray(covariates, dtype=np.float64)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(n, -1)
        self.covariate_names = tuple(covariate_names)
        if self.covariates.shape != (n, len(self.covariate_names)):
            raise ValueError(
                f"covariate matrix shape {self.covariates.shape} does not match "
                f"{n} records x {len(self.covariate_names)} names"
            )
        for a in (self.site_codes, self.arm, self.dest, self.outcome,
                  self.weight, self.covariates):
            a.setflags(write=False)
        if np.any(self.weight < 0):
            raise ValueError("weights must be nonnegative")
        if not np.all((self.outcome == 0) | (self.outcome == 1)):
            raise ValueError("outcomes must be binary")
        self._site_index: dict[str, np.ndarray] | None = None

    # -- constructors ----------------------------------------------------

    @classmethod
    def from_records(
        cls, records: Iterable[IndividualRecord], covariate_names: Sequence[str] = ()
    ) -> "StudyDataset":
        records = list(records)
        if not records:
            raise EmptyDataset("no records given")
        ncov = len(records[0].covariates)
        covariate_names = tuple(covariate_names)
        if not covariate_names and ncov:
            covariate_names = tuple(f"x{i}" for i in range(ncov))
        if len(covariate_names) != ncov:
            raise ValueError("covariate_names length does not match records")
        site_ids: list[str] = []
        site_lookup: dict[str, int] = {}
        codes = np.empty(len(records), dtype=np.int64)
        arm = np.empty(len(records), dtype=np.int8)
        dest = np.empty(len(records), dtype=np.int8)
        outcome = np.empty(len(records), dtype=np.int8)
        weight = np.empty(len(records), dtype=np.float64)
        covs = np.empty((len(records), ncov), dtype=np.float64)
        for i, rec in enumerate(records):
            if len(rec.covariates) != ncov:
                raise ValueError("covariate vector length varies across records")
            code = site_lookup.get(rec.site_id)
            if code is None:
                code = len(site_ids)
                site_lookup[rec.site_id] = code
                site_ids.append(rec.site_id)
            codes[i] = code
            arm[i] = int(rec.arm)
            dest[i] = DEST_CODE[rec.destination]
            outcome[i] = rec.outcome
            weight[i] = rec.weight
            if ncov:
                covs[i] = rec.covariates
        return cls(site_ids, codes, arm, dest, outcome, weight, covs, covariate_names)

    def subset(self, indices: np.ndarray) -> "StudyDataset":
        """Dataset restricted to (or resampled by) an index array."""
        idx = np.asarray(indices)
        return StudyDataset(
            self.site_ids,
            self.site_codes[idx],
            self.arm[idx],
            self.dest[idx],
            self.outcome[idx],
            self.weight[idx],
            self.covariates[idx],
            self.covariate_names,
        )

    # -- views -----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.site_codes)

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    @property
    def site_index(self) -> dict[str, np.ndarray]:
        """Mapping site_id -> record indices. Index sets partition 0..n-1."""
        if self._site_index is None:
            order = np.argsort(self.site_codes, kind="stable")
            bounds = np.searchsorted(self.site_codes[order], np.arange(self.n_sites + 1))
            self._site_index = {
                sid: order[bounds[k]:bounds[k + 1]]
                for k, sid in enumerate(self.site_ids)
            }
        return self._site_index

    @property
    def records(self) -> tuple[IndividualRecord, ...]:
        return tuple(
            IndividualRecord(
                site_id=self.site_ids[self.site_codes[i]],
                arm=Arm(int(self.arm[i])),
                destination=DEST_ORDER[self.dest[i]],
                outcome=int(self.outcome[i]),
                weight=float(self.weight[i]),
                covariates=tuple(self.covariates[i]),
            )
            for i in range(self.n)
        )

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, StudyDataset):
            return NotImplemented
        return (
            self.site_ids == other.site_ids
            and self.covariate_names == other.covariate_names
            and np.array_equal(self.site_codes, other.site_codes)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.dest, other.dest)
            and np.array_equal(self.outcome, other.outcome)
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.covariates, other.covariates)
        )


@dataclass(frozen=True)
class ColumnSchema:
    """Column-name mapping for CSV ingestion.

    `dest_labels` maps raw file labels onto the three destination
    categories; defaults accept the canonical "e"/"lq"/"hq" labels.
    A missing weight column means every weight is 1 (unweighted analysis).
    """

    site: str = "site"
    arm: str = "z"
    dest: str = "d"
    outcome: str = "y"
    weight: str | None = None
    covariates: tuple[str, ...] = ()
    dest_labels: Mapping[str, Destination] = field(
        default_factory=lambda: {"e": Destination.ECHS,
                                 "lq": Destination.LOW_QUALITY,
                                 "hq": Destination.HIGH_QUALITY}
    )


def ingest_csv(path, schema: ColumnSchema | None = None) -> StudyDataset:
    """Read a UTF-8, header-row CSV into a validated StudyDataset.

    Raises MissingColumn if a declared column is absent, BadValue with a
    1-based data-row number for the first malformed cell, and EmptyDataset
    when no data rows exist.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.site, schema.arm, schema.dest, schema.outcome]
        if schema.weight is not None:
            required.append(schema.weight)
        required.extend(schema.covariates)
        for col in required:
            if col not in header:
                raise MissingColumn(col)

        site_ids: list[str] = []
        site_lookup: dict[str, int] = {}
        codes: list[int] = []
        arms: list[int] = []
        dests: list[int] = []
        outcomes: list[int] = []
        weights: list[float] = []
        covs: list[list[float]] = []
        for rownum, row in enumerate(reader, start=1):
            site = (row.get(schema.site) or "").strip()
            if not site:
                raise BadValue(rownum, schema.site, "empty site id")
            raw_arm = (row.get(schema.arm) or "").strip()
            if raw_arm not in ("0", "1"):
                raise BadValue(rownum, schema.arm, f"expected 0 or 1, got {raw_arm!r}")
            raw_dest = (row.get(schema.dest) or "").strip()
            if raw_dest not in schema.dest_labels:
                raise BadValue(
                    rownum, schema.dest,
                    f"expected one of {sorted(schema.dest_labels)}, got {raw_dest!r}",
                )
            raw_y = (row.get(schema.outcome) or "").strip()
            if raw_y not in ("0", "1"):
                raise BadValue(rownum, schema.outcome, f"expected 0 or 1, got {raw_y!r}")
            if schema.weight is not None:
                raw_w = (row.get(schema.weight) or "").strip()
                try:
                    w = float(raw_w)
                except ValueError:
                    raise BadValue(rownum, schema.weight, f"not a number: {raw_w!r}")
                if not np.isfinite(w) or w < 0:
                    raise BadValue(rownum, schema.weight, f"weight must be >= 0, got {w}")
            else:
                w = 1.0
            xs = []
            for col in schema.covariates:
                raw_x = (row.get(col) or "").strip()
                try:
                    x = float(raw_x)
                except ValueError:
                    raise BadValue(rownum, col, f"not a number: {raw_x!r}")
                if not np.isfinite(x):
                    raise BadValue(rownum, col, "non-finite covariate")
                xs.append(x)

            code = site_lookup.get(site)
            if code is None:
                code = len(site_ids)
                site_lookup[site] = code
                site_ids.append(site)
            codes.append(code)
            arms.append(int(raw_arm))
            dests.append(DEST_CODE[schema.dest_labels[raw_dest]])
            outcomes.append(int(raw_y))
            weights.append(w)
            covs.append(xs)

    if not codes:
        raise EmptyDataset(f"no data rows in {path}")
    cov_matrix = np.asarray(covs, dtype=np.float64).reshape(len(codes), len(schema.covariates))
    return StudyDataset(
        site_ids,
        np.asarray(codes),
        np.asarray(arms),
        np.asarray(dests),
        np.asarray(outcomes),
        np.asarray(weights),
        cov_matrix,
        schema.covariates,
    )


def write_csv(dataset: StudyDataset, path, schema: ColumnSchema | None = None) -> None:
    """Serialize a dataset back to CSV; inverse of `ingest_csv`."""
    schema = schema or ColumnSchema(
        weight="w", covariates=dataset.covariate_names
    )
    label_of = {dest: label for label, dest in schema.dest_labels.items()}
    header = [schema.site, schema.arm, schema.dest, schema.outcome]
    if schema.weight is not None:
        header.append(schema.weight)
    header.extend(schema.covariates)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [
                dataset.site_ids[dataset.site_codes[i]],
                int(dataset.arm[i]),
                label_of[DEST_ORDER[dataset.dest[i]]],
                int(dataset.outcome[i]),
            ]
            if schema.weight is not None:
                row.append(repr(float(dataset.weight[i])))
            row.extend(repr(float(x)) for x in dataset.covariates[i])
            writer.writerow(row)


@dataclass(frozen=True)
class Diagnostic:
    """One validation warning. Diagnostics never abort an analysis."""

    site_id: str | None
    code: str
    message: str


def validate(dataset: StudyDataset) -> list[Diagnostic]:
    """Scan for sites that will degrade or break estimation.

    Emits warnings for sites missing an arm, sites with zero total weight,
    and sites with no outcome variability. Purely diagnostic.
    """
    out: list[Diagnostic] = []
    for sid, idx in dataset.site_index.items():
        arms = dataset.arm[idx]
        for a in (Arm.TREATMENT, Arm.CONTROL):
            if not np.any(arms == int(a)):
                out.append(Diagnostic(sid, "missing_arm",
                                      f"site {sid!r} has no {a.name.lower()} records"))
        if dataset.weight[idx].sum() == 0:
            out.append(Diagnostic(sid, "zero_weight",
                                  f"site {sid!r} has zero total weight"))
        y = dataset.outcome[idx]
        if np.all(y == y[0]):
            out.append(Diagnostic(sid, "no_outcome_variability",
                                  f"site {sid!r} has constant outcome {int(y[0])}"))
    if dataset.n_sites < 2:
        out.append(Diagnostic(None, "single_site",
                              "fewer than 2 sites; cross-site estimation unavailable"))
    return out
