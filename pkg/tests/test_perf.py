import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdsim.perf import (BatchOutOfRange, ClusterShape, PerfProfile,
                        cluster_throughput, kvcache_size_bytes,
                        optimal_pd_ratio, phase_latency_decode,
                        phase_latency_prefill, required_prefill_count)


def make_profile(ttft=None, tpot=None, r_pre=1.0, gen=1.0, xi=0.0):
    return PerfProfile(ttft_by_batch=ttft or {1: 0.5},
                       tpot_by_batch=tpot or {1: 0.05},
                       prefix_benefit=r_pre,
                       mean_generated_tokens=gen,
                       transfer_time=xi)


# ---------------------------------------------------------------------------
# phase latencies
# ---------------------------------------------------------------------------

def test_prefill_identity_benefit():
    profile = make_profile(ttft={1: 0.5}, r_pre=1.0)
    assert phase_latency_prefill(profile, 1) == 0.5


def test_prefill_benefit_product():
    profile = make_profile(ttft={4: 1.0}, r_pre=0.6)
    assert phase_latency_prefill(profile, 4) == pytest.approx(0.6)


def test_prefill_linear_interpolation():
    # oracle: straight line through (1, 0.5) and (4, 1.0) evaluated at 2
    profile = make_profile(ttft={1: 0.5, 4: 1.0})
    expected = 0.5 + (1.0 - 0.5) * (2 - 1) / (4 - 1)
    assert phase_latency_prefill(profile, 2) == pytest.approx(expected)
    assert phase_latency_prefill(profile, 2) == pytest.approx(0.6667, abs=1e-4)


def test_prefill_batch_out_of_range():
    profile = make_profile(ttft={2: 0.5, 4: 1.0})
    with pytest.raises(BatchOutOfRange):
        phase_latency_prefill(profile, 1)
    with pytest.raises(BatchOutOfRange):
        phase_latency_prefill(profile, 5)


def test_decode_single_token_no_transfer():
    profile = make_profile(tpot={8: 0.05}, gen=1.0, xi=0.0)
    assert phase_latency_decode(profile, 8) == pytest.approx(0.05)


def test_decode_formula():
    profile = make_profile(tpot={8: 0.05}, gen=100, xi=0.02)
    assert phase_latency_decode(profile, 8) == pytest.approx(5.02)


def test_zero_generated_tokens_rejected():
    with pytest.raises(ValueError):
        make_profile(tpot={8: 0.05}, gen=0)


def test_tables_must_be_non_decreasing():
    with pytest.raises(ValueError):
        make_profile(ttft={1: 1.0, 4: 0.5})


# ---------------------------------------------------------------------------
# cluster throughput
# ---------------------------------------------------------------------------

def test_zero_traffic_bottleneck():
    profile = make_profile()
    shape = ClusterShape(2, 3, 1, 1)
    est = cluster_throughput(profile, shape, 0.0)
    assert est.per_instance_rps == 0.0
    assert est.bottleneck == "traffic"


def test_hand_evaluated_min_formula():
    # n_p=2, b_p=4, t_p=1s; n_d=3, b_d=8, t_d=2s; traffic 100
    profile = make_profile(ttft={4: 1.0}, tpot={8: 0.02}, gen=100, xi=0.0)
    assert phase_latency_decode(profile, 8) == pytest.approx(2.0)
    shape = ClusterShape(2, 3, 4, 8)
    est = cluster_throughput(profile, shape, 100.0)
    assert est.per_instance_rps == pytest.approx(min(100, 8, 12) / 5)
    assert est.per_instance_rps == pytest.approx(1.6)
    assert est.bottleneck == "prefill"
    assert est.e2e == pytest.approx(est.t_p + est.t_d)


def test_three_way_tie_prefers_traffic():
    profile = make_profile(ttft={1: 1.0}, tpot={1: 1.0}, gen=1, xi=0.0)
    shape = ClusterShape(1, 1, 1, 1)
    est = cluster_throughput(profile, shape, 1.0)
    assert est.per_instance_rps == pytest.approx(0.5)
    assert est.bottleneck == "traffic"


def test_prefill_decode_tie_prefers_prefill():
    profile = make_profile(ttft={1: 1.0}, tpot={1: 1.0}, gen=1, xi=0.0)
    est = cluster_throughput(profile, ClusterShape(1, 1, 1, 1), 50.0)
    assert est.bottleneck == "prefill"


@given(traffic=st.floats(0, 1000), bump=st.floats(0.1, 100))
@settings(max_examples=60)
def test_throughput_monotone_in_traffic(traffic, bump):
    profile = make_profile(ttft={2: 0.4}, tpot={4: 0.03}, gen=10)
    shape = ClusterShape(2, 2, 2, 4)
    low = cluster_throughput(profile, shape, traffic).per_instance_rps
    high = cluster_throughput(profile, shape, traffic + bump).per_instance_rps
    assert high >= low


@given(n_p=st.integers(1, 12), n_d=st.integers(1, 12))
@settings(max_examples=60)
def test_bottleneck_numerator_grows_with_bottleneck_side(n_p, n_d):
    profile = make_profile(ttft={2: 0.4}, tpot={4: 0.03}, gen=10)
    shape = ClusterShape(n_p, n_d, 2, 4)
    est = cluster_throughput(profile, shape, 1e9)
    total_rps = est.per_instance_rps * shape.total
    if est.bottleneck == "prefill":
        grown = ClusterShape(n_p + 1, n_d, 2, 4)
    else:
        grown = ClusterShape(n_p, n_d + 1, 2, 4)
    est2 = cluster_throughput(profile, grown, 1e9)
    assert est2.per_instance_rps * grown.total > total_rps


# ---------------------------------------------------------------------------
# ratio optimization
# ---------------------------------------------------------------------------

def test_symmetric_capabilities_split_evenly():
    profile = make_profile(ttft={2: 1.0}, tpot={2: 1.0}, gen=1, xi=0.0)
    shape = optimal_pd_ratio(profile, 2, 2, 4)
    assert (shape.n_prefill, shape.n_decode) == (2, 2)


def test_decode_heavy_split():
    # per-prefill capability 1/s, per-decode 0.5/s over 6 instances
    profile = make_profile(ttft={1: 1.0}, tpot={2: 4.0}, gen=1, xi=0.0)
    shape = optimal_pd_ratio(profile, 1, 2, 6)
    assert (shape.n_prefill, shape.n_decode) == (2, 4)


def test_boundary_split_when_prefill_dominates():
    profile = make_profile(ttft={10: 1.0}, tpot={1: 1.0}, gen=1, xi=0.0)
    shape = optimal_pd_ratio(profile, 10, 1, 4)
    assert (shape.n_prefill, shape.n_decode) == (1, 3)


def test_total_below_two_rejected():
    with pytest.raises(ValueError):
        optimal_pd_ratio(make_profile(), 1, 1, 1)


def _brute_force_split(per_p, per_d, total):
    best, best_gap = None, math.inf
    for n_p in range(1, total):
        gap = abs(n_p * per_p - (total - n_p) * per_d)
        if gap < best_gap:
            best, best_gap = n_p, gap
    return best


@given(tp=st.floats(0.05, 5.0), td=st.floats(0.05, 5.0),
       b_p=st.integers(1, 16), b_d=st.integers(1, 16),
       total=st.integers(2, 64))
@settings(max_examples=120)
def test_ratio_matches_exhaustive_search(tp, td, b_p, b_d, total):
    profile = make_profile(ttft={b_p: tp}, tpot={b_d: td}, gen=1, xi=0.0)
    shape = optimal_pd_ratio(profile, b_p, b_d, total)
    expected = _brute_force_split(b_p / tp, b_d / td, total)
    got_gap = abs(shape.n_prefill * b_p / tp - shape.n_decode * b_d / td)
    best_gap = abs(expected * b_p / tp - (total - expected) * b_d / td)
    assert got_gap == pytest.approx(best_gap)


@given(tp=st.floats(0.05, 5.0), td=st.floats(0.05, 5.0),
       scale=st.floats(0.1, 10.0), total=st.integers(2, 32))
@settings(max_examples=80)
def test_ratio_scale_invariance(tp, td, scale, total):
    base = make_profile(ttft={2: tp}, tpot={2: td}, gen=1, xi=0.0)
    scaled = make_profile(ttft={2: tp * scale}, tpot={2: td * scale},
                          gen=1, xi=0.0)
    a = optimal_pd_ratio(base, 2, 2, total)
    b = optimal_pd_ratio(scaled, 2, 2, total)
    assert (a.n_prefill, a.n_decode) == (b.n_prefill, b.n_decode)


# ---------------------------------------------------------------------------
# capacity and sizing
# ---------------------------------------------------------------------------

def test_required_prefill_exact_match():
    profile = make_profile(ttft={4: 1.0})
    assert required_prefill_count(profile, 4, 4.0) == 1


def test_required_prefill_ceiling():
    profile = make_profile(ttft={4: 1.0})
    assert required_prefill_count(profile, 4, 9.0) == 3


def test_required_prefill_single_instance_floor():
    profile = make_profile(ttft={1: 2.0})
    assert required_prefill_count(profile, 1, 0.5) == 1


def test_kvcache_per_token_large_model():
    # 96-layer, 12288-hidden model at fp16: about 4.5 MiB per token
    assert kvcache_size_bytes(1, 12288, 1, 96, 2) == 4_718_592
    assert kvcache_size_bytes(1, 12288, 1, 96, 2) / (1 << 20) == pytest.approx(4.5)


def test_kvcache_1k_prompt_is_4_5_gib():
    size = kvcache_size_bytes(1, 12288, 1024, 96, 2)
    assert size / (1 << 30) == pytest.approx(4.5)


def test_kvcache_unit_case_counts_k_and_v():
    assert kvcache_size_bytes(1, 1, 1, 1, 1) == 2


@given(batch=st.integers(1, 8), hidden=st.integers(1, 4096),
       q=st.integers(1, 2048), layers=st.integers(1, 128),
       width=st.integers(1, 4), factor=st.integers(2, 5))
@settings(max_examples=60)
def test_kvcache_linear_in_each_argument(batch, hidden, q, layers, width, factor):
    base = kvcache_size_bytes(batch, hidden, q, layers, width)
    assert kvcache_size_bytes(batch * factor, hidden, q, layers, width) == base * factor
    assert kvcache_size_bytes(batch, hidden * factor, q, layers, width) == base * factor
    assert kvcache_size_bytes(batch, hidden, q * factor, layers, width) == base * factor
    assert kvcache_size_bytes(batch, hidden, q, layers * factor, width) == base * factor
    assert kvcache_size_bytes(batch, hidden, q, layers, width * factor) == base * factor
