import numpy as np
import pytest

from conftest import E, HQ, LQ, build_dataset, margin_fixture_dataset, rec

from stratarc import (
    Arm,
    ColumnSchema,
    Destination,
    IndividualRecord,
    StudyDataset,
    ingest_csv,
    validate,
    write_csv,
)
from stratarc.errors import BadValue, EmptyDataset, MissingColumn


def _write(tmp_path, text, name="data.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


BASIC_CSV = """site,z,d,y,w
a,1,e,1,1.0
a,0,lq,0,1.0
b,1,e,0,2.0
b,0,hq,1,0.5
"""


def test_ingest_basic(tmp_path):
    path = _write(tmp_path, BASIC_CSV)
    ds = ingest_csv(path, ColumnSchema(weight="w"))
    assert ds.n == 4
    assert ds.n_sites == 2
    recs = ds.records
    assert recs[0] == rec("a", 1, E, 1, 1.0)
    assert recs[3] == rec("b", 0, HQ, 1, 0.5)


def test_ingest_bad_arm_row_number(tmp_path):
    lines = ["site,z,d,y"] + ["a,1,e,1", "a,0,lq,0"] * 3 + ["a,2,e,1"]
    path = _write(tmp_path, "\n".join(lines) + "\n")
    with pytest.raises(BadValue) as err:
        ingest_csv(path, ColumnSchema())
    assert err.value.row == 7
    assert err.value.column == "z"


def test_ingest_missing_column(tmp_path):
    path = _write(tmp_path, "site,z,d\na,1,e\n")
    with pytest.raises(MissingColumn):
        ingest_csv(path, ColumnSchema())


def test_ingest_empty(tmp_path):
    path = _write(tmp_path, "site,z,d,y\n")
    with pytest.raises(EmptyDataset):
        ingest_csv(path, ColumnSchema())


def test_ingest_bad_outcome_weight_covariate(tmp_path):
    path = _write(tmp_path, "site,z,d,y\na,1,e,2\n")
    with pytest.raises(BadValue) as err:
        ingest_csv(path, ColumnSchema())
    assert err.value.column == "y"

    path = _write(tmp_path, "site,z,d,y,w\na,1,e,1,-3\n")
    with pytest.raises(BadValue):
        ingest_csv(path, ColumnSchema(weight="w"))

    path = _write(tmp_path, "site,z,d,y,age\na,1,e,1,oops\n")
    with pytest.raises(BadValue) as err:
        ingest_csv(path, ColumnSchema(covariates=("age",)))
    assert err.value.column == "age"


def test_dest_label_aliasing(tmp_path):
    path = _write(tmp_path, "site,z,d,y\na,1,echs,1\na,0,low,0\nb,1,echs,1\nb,0,high,0\n")
    schema = ColumnSchema(dest_labels={
        "echs": Destination.ECHS, "low": Destination.LOW_QUALITY,
        "high": Destination.HIGH_QUALITY,
    })
    ds = ingest_csv(path, schema)
    assert ds.records[1].destination is LQ
    assert ds.records[3].destination is HQ


def test_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    rows = []
    for k in range(3):
        for z in (0, 1):
            for _ in range(6):
                rows.append((f"s{k}", z, (E, LQ, HQ)[rng.integers(0, 3)],
                             int(rng.integers(0, 2)), float(rng.uniform(0.25, 2.0)),
                             (float(rng.normal()),)))
    ds = build_dataset(rows, covariate_names=("read",))
    path = tmp_path / "round.csv"
    schema = ColumnSchema(weight="w", covariates=("read",))
    write_csv(ds, path, schema)
    again = ingest_csv(path, schema)
    assert again == ds
    # and once more: serialize -> ingest is a fixed point
    path2 = tmp_path / "round2.csv"
    write_csv(again, path2, schema)
    assert ingest_csv(path2, schema) == ds


def test_site_index_partitions():
    rng = np.random.default_rng(9)
    rows = []
    for k in range(4):
        for z in (0, 1):
            for _ in range(int(rng.integers(1, 6))):
                rows.append((f"s{k}", z, E, int(rng.integers(0, 2))))
    ds = build_dataset(rows)
    seen = np.concatenate(list(ds.site_index.values()))
    assert len(seen) == ds.n
    assert sorted(seen.tolist()) == list(range(ds.n))
    for sid, idx in ds.site_index.items():
        assert all(ds.site_ids[ds.site_codes[i]] == sid for i in idx)


def test_margin_fixture_shape():
    ds = margin_fixture_dataset()
    assert ds.n == 3477
    assert int((ds.arm == 1).sum()) == 2021
    assert int((ds.arm == 0).sum()) == 1456
    assert ds.n_sites == 10


def test_validate_warnings():
    ds = build_dataset([
        ("a", 1, E, 1), ("a", 1, E, 1), ("a", 0, LQ, 1),      # constant outcome
        ("b", 1, E, 1), ("b", 1, E, 0),                        # missing control
        ("c", 1, E, 1, 0.0), ("c", 0, LQ, 0, 0.0),             # zero weight
        ("d", 1, E, 1), ("d", 0, LQ, 0),                       # clean
    ])
    diags = validate(ds)
    codes = {(d.site_id, d.code) for d in diags}
    assert ("a", "no_outcome_variability") in codes
    assert ("b", "missing_arm") in codes
    assert ("c", "zero_weight") in codes
    assert not any(d.site_id == "d" for d in diags)


def test_validate_clean_two_arm_site():
    ds = build_dataset([("a", 1, E, 1), ("a", 1, E, 0), ("a", 0, LQ, 1),
                        ("a", 0, LQ, 0), ("b", 1, E, 0), ("b", 0, HQ, 1)])
    assert not any(d.site_id == "a" for d in validate(ds))


def test_covariate_length_must_match():
    recs = [rec("a", 1, E, 1, covs=(1.0,)), rec("a", 0, LQ, 0, covs=(1.0, 2.0))]
    with pytest.raises(ValueError):
        StudyDataset.from_records(recs, ("x",))


def test_record_validation():
    with pytest.raises(ValueError):
        IndividualRecord("a", Arm.TREATMENT, E, outcome=2)
    with pytest.raises(ValueError):
        IndividualRecord("a", Arm.TREATMENT, E, outcome=1, weight=-0.1)
