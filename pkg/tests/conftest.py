"""Shared dataset builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from stratarc import Arm, Destination, IndividualRecord, StudyDataset

E, LQ, HQ = Destination.ECHS, Destination.LOW_QUALITY, Destination.HIGH_QUALITY

# Treated (N=2021) and control (N=1456) destination counts chosen so the
# per-arm shares round to 85.4/2.4/12.3 and 2.7/12.4/85.0 percent.
TREATED_CELLS = {E: 1726, HQ: 48, LQ: 247}
CONTROL_CELLS = {E: 39, HQ: 180, LQ: 1237}


def rec(site, z, dest, y, w=1.0, covs=()):
    return IndividualRecord(
        site_id=str(site), arm=Arm(z), destination=dest, outcome=y,
        weight=w, covariates=tuple(covs),
    )


def build_dataset(rows, covariate_names=()):
    """rows: iterable of (site, z, dest, y[, w[, covs]]) tuples."""
    records = []
    for row in rows:
        site, z, dest, y = row[:4]
        w = row[4] if len(row) > 4 else 1.0
        covs = row[5] if len(row) > 5 else ()
        records.append(rec(site, z, dest, y, w, covs))
    return StudyDataset.from_records(records, covariate_names)


def _split_count(total: int, shares) -> list[int]:
    """Split `total` into integer parts proportional to `shares` exactly."""
    shares = np.asarray(shares, dtype=float)
    raw = total * shares / shares.sum()
    parts = np.floor(raw).astype(int)
    rem = total - parts.sum()
    order = np.argsort(raw - parts)[::-1]
    for i in range(rem):
        parts[order[i % len(parts)]] += 1
    return parts.tolist()


def margin_fixture_dataset(n_sites: int = 10) -> StudyDataset:
    """3477-record dataset with the canonical arm-level take-up margins.

    Cell counts are spread deterministically over sites with uneven
    high-quality allocations so per-site complier composition varies.
    Outcomes follow fixed per-cell patterns with variability.
    """
    site_share = np.arange(1, n_sites + 1, dtype=float)
    # high-quality destinations concentrate in the later (larger) sites
    hq_share = np.concatenate([np.zeros(n_sites // 2),
                               np.arange(1, n_sites - n_sites // 2 + 1, dtype=float)])
    rates = {
        (1, E): 0.62, (1, LQ): 0.45, (1, HQ): 0.55,
        (0, E): 0.58, (0, LQ): 0.50, (0, HQ): 0.52,
    }
    records = []
    for z, cells in ((1, TREATED_CELLS), (0, CONTROL_CELLS)):
        for dest, total in cells.items():
            shares = hq_share if dest is HQ else site_share
            for k, count in enumerate(_split_count(total, shares)):
                rate = rates[(z, dest)]
                for i in range(count):
                    y = 1 if (i + 1) * rate % 1 >= (1 - rate) else 0
                    records.append(rec(f"site{k:02d}", z, dest, y))
    return StudyDataset.from_records(records)


@pytest.fixture(scope="session")
def margin_dataset() -> StudyDataset:
    return margin_fixture_dataset()


def random_small_dataset(rng: np.random.Generator, n_sites=None, min_per_cell=1):
    """Small random dataset with both arms present in every site."""
    n_sites = n_sites or rng.integers(2, 4)
    rows = []
    dests = (E, LQ, HQ)
    for k in range(n_sites):
        for z in (0, 1):
            n = int(rng.integers(2, 8))
            for _ in range(n):
                rows.append((
                    f"s{k}", z, dests[rng.integers(0, 3)],
                    int(rng.integers(0, 2)), float(rng.uniform(0.2, 3.0)),
                ))
    return build_dataset(rows)
