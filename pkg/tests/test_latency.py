import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from splitgp.latency import (
    REFERENCE_LATENCY,
    LatencyParams,
    feasible_phi_range,
    pc_threshold,
    rate_threshold,
    resource_table,
    sweep,
    sweep_csv_text,
    tau_client_full,
    tau_server_full,
    tau_splitgp,
)

positive = st.floats(1e-2, 1e3)
size = st.floats(0.0, 1e6)


@st.composite
def params(draw):
    return LatencyParams(
        P_C=draw(positive), P_S=draw(positive), R=draw(positive),
        q=draw(st.floats(1.0, 1e4)), q_c=draw(st.floats(1.0, 1e4)),
        beta=draw(st.floats(0.0, 1.0)),
        phi=draw(size), h=draw(size), theta=draw(size),
    )


class TestFixture:
    def test_published_setting(self):
        p = REFERENCE_LATENCY
        assert tau_client_full(p) == pytest.approx(193408.5, rel=1e-12)
        assert tau_server_full(p) == pytest.approx(39465.7, rel=1e-12)
        assert tau_splitgp(p) == pytest.approx(24103.23, rel=1e-12)

    def test_pc_threshold_value(self):
        # (|theta| - |h|) / (beta (q_c/R + |theta|/P_S)), worked by hand
        expected = (3_480_330 - 23_050) / (0.1 * (784 + 3_480_330 / 100))
        assert pc_threshold(REFERENCE_LATENCY) == pytest.approx(expected, rel=1e-14)
        assert pc_threshold(REFERENCE_LATENCY) == pytest.approx(971.4926392280391, rel=1e-12)

    def test_rate_condition_always_holds(self):
        assert rate_threshold(REFERENCE_LATENCY).kind == "always"

    def test_published_rate_formula_is_negative_here(self):
        # the closed form is negative while split inference is faster at every rate
        assert rate_threshold(REFERENCE_LATENCY, "closed_form") < 0

    def test_resource_table(self):
        rows = {r.method: r for r in resource_table(REFERENCE_LATENCY)}
        assert rows["client_full"].storage == 3_868_170
        assert rows["splitgp"].storage == 410_890
        assert rows["splitgp"].communication == pytest.approx(78.4)
        assert rows["server_full"].communication == 784


class TestFormulas:
    def test_empty_dataset(self):
        p = REFERENCE_LATENCY.with_(D=0)
        assert tau_client_full(p) == tau_server_full(p) == tau_splitgp(p) == 0.0

    @settings(max_examples=100)
    @given(params(), st.floats(0.1, 100.0))
    def test_homogeneous_in_dataset_size(self, p, k):
        for f in (tau_client_full, tau_server_full, tau_splitgp):
            assert f(p.with_(D=k)) == pytest.approx(k * f(p), rel=1e-12, abs=1e-9)

    def test_nothing_forwarded(self):
        p = REFERENCE_LATENCY.with_(beta=0.0)
        assert tau_splitgp(p) == pytest.approx((p.phi + p.h) / p.P_C)

    @settings(max_examples=100)
    @given(params(), st.floats(0, 1), st.floats(0, 1))
    def test_affine_in_forwarded_fraction(self, p, b1, b2):
        t0, t1 = tau_splitgp(p.with_(beta=0.0)), tau_splitgp(p.with_(beta=1.0))
        for b in (b1, b2):
            assert tau_splitgp(p.with_(beta=b)) == pytest.approx(t0 + b * (t1 - t0), rel=1e-9, abs=1e-9)

    def test_everything_forwarded_matches_server_full_shape(self):
        # beta = 1 and q_c = q: split pays the uplink of server-full plus device-side phi+h
        p = REFERENCE_LATENCY.with_(beta=1.0, q_c=REFERENCE_LATENCY.q)
        diff = tau_splitgp(p) - tau_server_full(p)
        assert diff == pytest.approx((p.phi + p.h) / p.P_C - p.phi / p.P_S, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            REFERENCE_LATENCY.with_(beta=1.5)
        with pytest.raises(ValueError):
            REFERENCE_LATENCY.with_(R=0)


class TestThresholds:
    def test_pc_threshold_is_break_even(self):
        p = REFERENCE_LATENCY.with_(P_C=pc_threshold(REFERENCE_LATENCY))
        assert tau_splitgp(p) == pytest.approx(tau_client_full(p), rel=1e-9)

    def test_pc_threshold_without_forwarding(self):
        p = REFERENCE_LATENCY.with_(beta=0.0)
        assert pc_threshold(p) == math.inf
        assert pc_threshold(p.with_(h=p.theta + 1)) == -math.inf

    @pytest.mark.parametrize(
        "changes, kind",
        [
            (dict(P_S=1000.0, beta=0.5, q=800.0), "upper"),  # fast server: split wins only on slow links
            (dict(P_S=21.0, beta=0.5, q=100.0), "lower"),  # forwarded feature wider than raw input
        ],
    )
    def test_exact_rate_matches_brute_force_sweep(self, changes, kind):
        p = REFERENCE_LATENCY.with_(**changes)
        verdict = rate_threshold(p)
        assert verdict.kind == kind
        for R in np.geomspace(1e-4, 1e4, 4001):
            pr = p.with_(R=float(R))
            direct = tau_splitgp(pr) <= tau_server_full(pr)
            if abs(R - verdict.value) > 1e-9 * verdict.value:
                assert verdict.holds(float(R)) == direct

    @settings(max_examples=2000, deadline=None)
    @given(params())
    def test_rate_verdict_self_consistent(self, p):
        verdict = rate_threshold(p)
        direct = tau_splitgp(p) <= tau_server_full(p)
        if verdict.kind in ("upper", "lower"):
            assume(abs(p.R - verdict.value) > 1e-6 * max(1.0, abs(verdict.value)))
        gap = tau_server_full(p) - tau_splitgp(p)
        assume(abs(gap) > 1e-9 * max(1.0, tau_server_full(p)))
        assert verdict.holds(p.R) == direct

    @settings(max_examples=2000, deadline=None)
    @given(params())
    def test_pc_verdict_self_consistent(self, p):
        thr = pc_threshold(p)
        gap = tau_client_full(p) - tau_splitgp(p)
        assume(abs(gap) > 1e-9 * max(1.0, tau_client_full(p)))
        if math.isfinite(thr):
            assume(abs(p.P_C - thr) > 1e-9 * max(1.0, abs(thr)))
        assert (p.P_C <= thr) == (tau_splitgp(p) <= tau_client_full(p))

    def test_random_draws(self):
        # 10^4 seeded draws, independent of hypothesis's search
        rng = np.random.default_rng(2024)
        for _ in range(10_000):
            p = LatencyParams(
                P_C=rng.uniform(1, 200), P_S=rng.uniform(1, 200), R=rng.uniform(0.1, 10),
                q=rng.uniform(1, 2000), q_c=rng.uniform(1, 2000), beta=rng.uniform(),
                phi=rng.uniform(0, 1e6), h=rng.uniform(0, 1e5), theta=rng.uniform(0, 1e6),
            )
            v = rate_threshold(p)
            if v.kind in ("upper", "lower") and abs(p.R - v.value) < 1e-9 * abs(v.value):
                continue
            assert v.holds(p.R) == (tau_splitgp(p) <= tau_server_full(p))
            assert (p.P_C <= pc_threshold(p)) == (tau_splitgp(p) <= tau_client_full(p))

    def test_unknown_formula(self):
        with pytest.raises(ValueError):
            rate_threshold(REFERENCE_LATENCY, "approx")


class TestFeasibleRange:
    def test_upper_end_meets_budget(self):
        p = REFERENCE_LATENCY.with_(tau_budget=30_000.0)
        lo, hi = feasible_phi_range(p, 0.0)
        at = p.with_(phi=hi, theta=p.w - hi)
        assert tau_splitgp(at) == pytest.approx(30_000.0, rel=1e-12)

    def test_empty(self):
        assert feasible_phi_range(REFERENCE_LATENCY.with_(tau_budget=1.0), 10.0) is None

    def test_monotone_in_budget(self):
        his = [feasible_phi_range(REFERENCE_LATENCY.with_(tau_budget=b), 0.0)[1] for b in (25_000, 30_000, 40_000)]
        assert his == sorted(his)

    def test_needs_budget(self):
        with pytest.raises(ValueError):
            feasible_phi_range(REFERENCE_LATENCY, 0.0)


def test_sweep_rows_and_csv():
    rows = sweep(REFERENCE_LATENCY, "P_C", [10.0, 20.0])
    assert rows[1].tau_splitgp == pytest.approx(tau_splitgp(REFERENCE_LATENCY))
    text = sweep_csv_text("P_C", rows)
    assert text.splitlines()[0] == "P_C,tau_client_full,tau_server_full,tau_splitgp"
    assert len(text.splitlines()) == 3
