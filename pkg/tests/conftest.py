import numpy as np
import pytest

from splitgp.nn import init_mlp


def central_differences(loss_fn, blocks, step=1e-5):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of ``blocks`` (perturbed in place)."""
    grads = []
    for b in blocks:
        g = np.zeros_like(b)
        it = np.nditer(b, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = b[i]
            b[i] = orig + step
            up = loss_fn()
            b[i] = orig - step
            down = loss_fn()
            b[i] = orig
            g[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def random_two_exit(rng, n_layers=None):
    """Random (phi, h, theta) with 2-4 dense layers in total and widths <= 16."""
    n_layers = n_layers or int(rng.integers(2, 5))
    q = int(rng.integers(2, 17))
    n_classes = int(rng.integers(2, 11))
    widths = [int(rng.integers(2, 17)) for _ in range(n_layers - 1)]
    dims = [q, *widths, n_classes]
    full = init_mlp(dims, rng)
    # give biases non-zero values so their gradients are exercised
    full = full.with_params([p + (rng.normal(0, 0.1, p.shape) if p.ndim == 1 else 0) for p in full.params()])
    cut = 2 * int(rng.integers(1, n_layers))  # after an activation
    phi, theta = full.slice(0, cut), full.slice(cut)
    h = init_mlp([phi.output_dim, n_classes], rng)
    return phi, h, theta


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -----------------------------------------------------
# Tests marked ``criterion(n, title)`` are grouped by n; a criterion passes only
# if all of its tests pass. One line per criterion is printed after the run.

_criteria: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    num, title = mark.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(dict.fromkeys(e["details"]))
        terminalreporter.write_line(f"{status}  [{num}] {e['title']}" + (f"  ({detail})" if detail else ""))
