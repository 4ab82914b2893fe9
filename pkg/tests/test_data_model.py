import numpy as np
import pandas as pd
import pytest

import trialforge as tf
from trialforge.errors import SchemaError, ValidationError

from conftest import golden_frame


def test_load_golden_csv(golden_csv_path):
    ds = tf.load_longitudinal_csv(golden_csv_path, tf.simulated_column_map())
    assert len(ds) == 14
    assert ds.n_individuals == 3
    first = ds.frame.iloc[0]
    assert (first["id"], first["period"], first["treatment"]) == (1, 0, 1)
    assert first["censored"] == 1 and first["eligible"] == 1


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("ID,t,A,X1,X2,X3,X4,age,age_s,Y,C,eligible\n")
    ds = tf.load_longitudinal_csv(path, tf.simulated_column_map())
    assert len(ds) == 0


def test_missing_column_names_the_column(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("ID,t,A\n1,0,1\n")
    with pytest.raises(SchemaError, match="eligible"):
        tf.load_longitudinal_csv(path, tf.ColumnMap(id="ID", period="t", treatment="A",
                                                    outcome="Y", eligible="eligible"))


def test_duplicate_period_names_the_id():
    frame = golden_frame()
    frame.loc[frame.index[-1], "t"] = 8  # id 4 now has period 8 twice
    frame["ID"] = frame["ID"].replace({4: 7})
    with pytest.raises(ValidationError, match="7"):
        tf.from_frame(frame, tf.simulated_column_map())


def test_non_binary_indicator_rejected_with_row():
    frame = golden_frame()
    frame.loc[2, "Y"] = 2
    with pytest.raises(ValidationError, match="row"):
        tf.from_frame(frame, tf.simulated_column_map())


def test_missing_covariate_cell_is_hard_error():
    frame = golden_frame()
    frame.loc[5, "X2"] = np.nan
    with pytest.raises(ValidationError, match="X2"):
        tf.from_frame(frame, tf.simulated_column_map())


def test_record_after_terminal_rejected():
    frame = golden_frame()
    extra = frame.iloc[[0]].assign(t=1, C=0)  # id 1 was censored at t=0
    with pytest.raises(ValidationError):
        tf.from_frame(pd.concat([frame, extra], ignore_index=True), tf.simulated_column_map())


def test_simultaneous_outcome_and_censoring_rejected():
    frame = golden_frame()
    frame.loc[0, "Y"] = 1  # id 1 already has C=1 there
    with pytest.raises(ValidationError):
        tf.from_frame(frame, tf.simulated_column_map())


def test_validate_dataset_reports_only(golden_dataset):
    report = tf.validate_dataset(golden_dataset)
    assert report.ok
    assert report.total_violations == 0

    broken = tf.LongitudinalDataset(
        golden_dataset.frame.assign(outcome=lambda f: f["outcome"].where(f.index != 3, 2)),
        golden_dataset.column_map,
        validate=False,
    )
    report = tf.validate_dataset(broken)
    assert not report.ok
    rule = {r.rule: r for r in report.rules}["indicator_domain"]
    assert rule.count == 1
    assert rule.first_row == 3


def test_load_serialize_load_roundtrip(golden_csv_path, tmp_path):
    cm = tf.simulated_column_map()
    ds = tf.load_longitudinal_csv(golden_csv_path, cm)
    out = tmp_path / "roundtrip.csv"
    ds.to_csv(out)
    again = tf.load_longitudinal_csv(out, cm)
    pd.testing.assert_frame_equal(ds.frame, again.frame)


def test_column_map_rejects_duplicates_and_reserved():
    with pytest.raises(SchemaError):
        tf.ColumnMap(id="a", period="a", treatment="c", outcome="d", eligible="e")
    with pytest.raises(SchemaError):
        tf.ColumnMap(covariates={"weight": "continuous"})


def test_unsorted_input_is_sorted_on_load():
    frame = golden_frame().iloc[::-1].reset_index(drop=True)
    ds = tf.from_frame(frame, tf.simulated_column_map())
    periods = ds.frame.groupby("id")["period"].apply(list)
    assert all(p == sorted(p) for p in periods)
