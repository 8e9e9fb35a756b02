import numpy as np
import pytest

from matchattn.bench import (
    BENCH_HEADER,
    GLOBAL_CAP,
    BenchRow,
    _direct_sim_agg,
    _match_sim_agg,
    bench_attention,
    loglog_slope,
    rows_to_csv,
    run_global,
    sampling_ratio,
)


def test_csv_schema():
    rows = bench_attention([8, 16], "match", runs=1)
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == ",".join(BENCH_HEADER) == "variant,tokens,channels,window,runs,median_ms"
    assert len(text.splitlines()) == 3


def test_global_cap():
    side = int(np.sqrt(GLOBAL_CAP)) * 2
    with pytest.raises(ValueError):
        bench_attention([side], "global", runs=1)


def test_sizes_must_ascend():
    with pytest.raises(ValueError):
        bench_attention([16, 8], "match", runs=1)


def test_slope_of_exact_power_law():
    rows = [BenchRow("x", n * n, 8, 3, 5, 1e-3 * (n * n) ** 1.5) for n in (8, 16, 32)]
    assert loglog_slope(rows) == pytest.approx(1.5)


def test_chunked_global_matches_dense(rng):
    Q, K, V = (rng.normal(size=(1, 5, 6, 4)) for _ in range(3))
    q, k, v = (a.reshape(-1, 4) for a in (Q, K, V))
    s = q @ k.T / 2
    p = np.exp(s - s.max(1, keepdims=True))
    ref = (p / p.sum(1, keepdims=True)) @ v
    np.testing.assert_allclose(run_global(Q, K, V, chunk=7).reshape(-1, 4), ref, rtol=1e-10)


@pytest.mark.parametrize("w", [1, 3, 5])
def test_direct_sampling_agrees_at_integer_centres(rng, w):
    Q, K, V = (rng.normal(size=(1, 9, 10, 1, 4)) for _ in range(3))
    R = np.zeros((1, 9, 10, 2))
    R[..., 0] = 1.0
    a = _direct_sim_agg(Q, K, V, R, w)()
    b = _match_sim_agg(Q, K, V, R, w)()
    r = w // 2
    np.testing.assert_allclose(a[r:-r or None, r:-r - 1], b[r:-r or None, r:-r - 1], rtol=1e-10)


def test_sampling_ratio_positive():
    assert sampling_ratio(16, runs=1) > 0
