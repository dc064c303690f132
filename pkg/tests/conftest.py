import os

# Keep BLAS single-threaded: bit-reproducibility plus honest single-core
# timing for the acceptance runtime budgets.  Must happen before numpy
# initializes its threadpools.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one verdict line per acceptance criterion that ran."""
    from _acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(RESULTS):
        terminalreporter.write_line(f"[criterion {number}] {title}: {status}")
