import time

import pytest

from affordground import tensor as T
from affordground.config import tiny_config
from affordground.gradcheck import gradcheck_all


@pytest.fixture(scope="module")
def report():
    t0 = time.perf_counter()
    rep = gradcheck_all(tiny_config())
    return rep, time.perf_counter() - t0


def test_stock_build_passes_everywhere(report):
    rep, seconds = report
    assert rep.passed, rep.format()
    assert seconds < 120
    kinds = {e.kind for e in rep.entries}
    assert kinds == {"op", "module", "end-to-end"}
    assert all(e.worst < 1e-3 for e in rep.entries)


def test_report_lists_error_per_check(report):
    rep, _ = report
    text = rep.format()
    for e in rep.entries:
        assert e.name in text
    assert "max_rel_err" in text.splitlines()[0]


def test_flipped_backward_rule_is_caught_where_it_is_used():
    with T.inject_sign_flip("group_max"):
        rep = gradcheck_all(tiny_config(), max_entries=4)
    assert rep.failing() == ["op:group_max", "module:point-backbone", "end-to-end"]


def test_flipped_mask_head_nonlinearity():
    with T.inject_sign_flip("sigmoid"):
        rep = gradcheck_all(tiny_config(), max_entries=4, ops=True, modules=False, end_to_end=False)
    assert rep.failing() == ["op:sigmoid"]
