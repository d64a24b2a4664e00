import numpy as np
from prometheus_client import REGISTRY

from qpcore import QuadProgram, solve_qp


def _value(name, labels):
    return REGISTRY.get_sample_value(name, labels) or 0.0


def test_qp_solves_are_counted_by_status_and_formulation():
    before = _value("ddpc_qp_solves_total", {"status": "optimal"})
    timed = _value("ddpc_qp_duration_seconds_count", {"formulation": "metrics_check"})
    solve_qp(QuadProgram.build(np.eye(2), [1.0, -1.0], lower=[-0.5, -0.5], upper=[0.5, 0.5]), formulation="metrics_check")
    assert _value("ddpc_qp_solves_total", {"status": "optimal"}) == before + 1
    assert _value("ddpc_qp_duration_seconds_count", {"formulation": "metrics_check"}) == timed + 1
