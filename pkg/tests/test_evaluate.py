import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ipmssl.evaluate import (METRICS_FIELDS, MetricsRecord, misclassification_rate, read_metrics_csv,
                             write_metrics_csv)
from oracles import misclassification_loops


def test_all_correct():
    assert misclassification_rate(np.eye(4), [0, 1, 2, 3]) == 0.0


def test_uniform_probs_tie_break():
    labels = np.repeat(np.arange(10), 7)
    probs = np.full((70, 10), 0.1)
    assert misclassification_rate(probs, labels) == (70 - 7) / 70


def test_empty_rejected():
    with pytest.raises(ValueError):
        misclassification_rate(np.zeros((0, 3)), [])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_matches_loop_oracle(n, k, seed):
    rng = np.random.default_rng(seed)
    # coarse values make ties common
    probs = rng.integers(0, 3, size=(n, k)).astype(float)
    labels = rng.integers(0, k, size=n)
    assert misclassification_rate(probs, labels) == misclassification_loops(probs.tolist(), labels.tolist())


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRecord(step=1, epoch=0, critic_loss=-0.1, gen_loss=0.25, omega_f_hat=1.0 / 3, lambda_f=0.0,
                          ce_loss=2.3),
            MetricsRecord(step=2, epoch=0, critic_loss=0.5, gen_loss=None, val_error=0.1, test_error=0.2,
                          train_lab_error=0.0)]
    write_metrics_csv(tmp_path / "m.csv", rows)
    text = (tmp_path / "m.csv").read_text()
    lines = text.split("\n")
    assert lines[0] == ",".join(METRICS_FIELDS)
    assert lines[1] == "1,0,-0.1,0.25,0.3333333333333333,,,0.0,,2.3,,,"
    assert read_metrics_csv(tmp_path / "m.csv") == rows


def test_header_only(tmp_path):
    write_metrics_csv(tmp_path / "m.csv", [])
    assert (tmp_path / "m.csv").read_text() == ",".join(METRICS_FIELDS) + "\n"
