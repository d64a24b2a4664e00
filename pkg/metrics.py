# metrics.py
import logging

from prometheus_client import Counter, Histogram, start_http_server

logger = logging.getLogger(__name__)

# 1. COUNTERS
# QP solves by final status
QP_SOLVE_COUNTER = Counter(
    "ddpc_qp_solves_total",
    "Total quadratic programs solved",
    ["status"],  # 'optimal', 'max_iter', 'infeasible'
)

# Bench sweep cells
SWEEP_CELL_COUNTER = Counter(
    "ddpc_sweep_cells_total",
    "Total bench cells evaluated",
    ["controller", "status"],
)

# Equivalence certificates
EQUIVALENCE_COUNTER = Counter(
    "ddpc_equivalence_checks_total",
    "Total equivalence checks run",
    ["check", "verdict"],  # verdict: 'pass', 'fail', 'skipped'
)

# 2. HISTOGRAMS
# Wall time per QP, by the formulation that built it
QP_LATENCY = Histogram(
    "ddpc_qp_duration_seconds",
    "Time taken to solve one QP",
    ["formulation"],  # 'spc', 'indirect', 'deepc', 'gamma_ddpc', 'oracle'
)


def init_metrics(port: int = 8000):
    """
    Start a separate HTTP server just for metrics.
    Prometheus scrapes http://localhost:<port>/metrics while a sweep runs.
    """
    start_http_server(port)
    logger.info("📊 Metrics server started on port %d", port)
