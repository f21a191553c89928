"""Acceptance criteria at their stated tolerances; prints one line per check."""

import pytest

from treenet import acceptance


@pytest.fixture
def report(capsys):
    def emit(rows):
        with capsys.disabled():
            for r in rows:
                print("\n" + r.line(), end="")
        return rows

    return emit


def _by_name(rows, fragment):
    (row,) = [r for r in rows if r.name.endswith(fragment)]
    return row


def test_c1_formula_enumeration_identity(report):
    (row,) = report(acceptance.criterion_1())
    assert row.passed, row.line()


def test_c2_param_difference_identity_and_sign(report):
    (row,) = report(acceptance.criterion_2())
    assert row.passed, row.line()


def test_c3_mac_increment_identity_and_sign(report):
    (row,) = report(acceptance.criterion_3())
    assert row.passed, row.line()


@pytest.fixture(scope="module")
def c4_rows():
    return acceptance.criterion_4()


@pytest.fixture(scope="module")
def c5_rows():
    return acceptance.criterion_5()


@pytest.mark.parametrize("variant", [20, 40, 58, 100])
def test_c4_gflops_within_5pct(report, c4_rows, variant):
    row = report([_by_name(c4_rows, f"treenet-{variant}")])[0]
    if variant == 58:
        assert "Table 3 prints 7.93" in row.detail
    assert row.passed, row.line()


@pytest.mark.parametrize("variant", [20, 40, 58, 100])
def test_c5_params_within_3pct(report, c5_rows, variant):
    row = report([_by_name(c5_rows, f"treenet-{variant}")])[0]
    for key in ("weights=", "weights+bn=", "weights-classifier=", "weights+bn-classifier="):
        assert key in row.detail
    assert row.passed, row.line()


def test_c6_gradient_checks(report):
    (row,) = report(acceptance.criterion_6())
    assert row.passed, row.line()


def test_c7_shapes_and_stride(report):
    rows = report(acceptance.criterion_7())
    assert len(rows) == 4
    assert all(r.passed for r in rows), [r.line() for r in rows if not r.passed]


@pytest.mark.slow
def test_c8_desk_training_and_ablation(report):
    rows = report(acceptance.criterion_8())
    assert len(rows) == 2
    assert all(r.passed for r in rows), [r.line() for r in rows if not r.passed]


def test_c9_serialization(report):
    rows = report(acceptance.criterion_9())
    assert all(r.passed for r in rows), [r.line() for r in rows if not r.passed]
