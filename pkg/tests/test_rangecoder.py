from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from stvc import rangecoder as rc


def gaussian_pmf(mu: float, sigma: float, kmin: int = -64, kmax: int = 63) -> np.ndarray:
    k = np.arange(kmin, kmax + 1)
    return norm.cdf((k + 0.5 - mu) / sigma) - norm.cdf((k - 0.5 - mu) / sigma)


def test_uniform_four_symbols():
    t = rc.freeze_pmf(np.full(4, 0.25), 0, escape=False)
    assert t.freq.tolist() == [[16384, 16384, 16384, 16384]]


def test_zero_probability_gets_floor():
    t = rc.freeze_pmf(np.array([0.5, 0.0, 0.5]), 0, escape=False)
    assert t.freq[0, 1] == 1
    assert t.cum[0, -1] == rc.TOTAL


def test_tables_are_valid():
    rng = np.random.default_rng(0)
    pmf = rng.dirichlet(np.full(40, 0.3), size=50)
    t = rc.freeze_pmf(pmf, -20)
    assert (t.freq >= 1).all()
    assert (t.cum[:, -1] == rc.TOTAL).all()
    assert (np.diff(t.cum, axis=1) >= 1).all()


def test_support_limit():
    with pytest.raises(ValueError):
        rc.freeze_pmf(np.full(2**15 + 1, 1.0 / (2**15 + 1)), 0)


def test_nonfinite_pmf_rejected():
    with pytest.raises(ValueError):
        rc.freeze_pmf(np.array([0.5, np.nan]), 0)


def test_frozen_entropy_close_to_source():
    p = gaussian_pmf(0.3, 2.5)
    t = rc.freeze_pmf(p, -64)
    h_src = float(-(p[p > 0] * np.log2(p[p > 0])).sum())
    q = t.freq[0, :-1] / rc.TOTAL
    cross = float(-(p * np.log2(q)).sum())  # cost of source symbols under the frozen table
    assert abs(cross - h_src) / h_src < 0.002


def test_empty_stream():
    data = rc.encode([], rc.freeze_pmf(np.full(4, 0.25), 0))
    assert len(data) <= 8
    assert rc.decode(data, rc.freeze_pmf(np.full(4, 0.25), 0), 0).size == 0


def test_million_gaussian_symbols_near_entropy():
    rng = np.random.default_rng(1)
    table = rc.freeze_pmf(gaussian_pmf(0.0, 1.0), -64)
    sym = np.clip(np.round(rng.normal(0, 1, 10**6)), -64, 63).astype(np.int64)
    data = rc.encode(sym, table)
    analytic = table.cost_bits(sym) / 8
    assert len(data) <= analytic * 1.005 + 16
    assert np.array_equal(rc.decode(data, table, sym.size), sym)


@settings(max_examples=1000, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**31 - 1),
    st.integers(min_value=0, max_value=300),
    st.integers(min_value=2, max_value=200),
)
def test_random_roundtrip(seed, n, k):
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(1, 5))
    pmf = rng.dirichlet(np.full(k, float(rng.uniform(0.05, 3.0))), size=rows)
    kmin = int(rng.integers(-100, 100))
    table = rc.freeze_pmf(pmf, kmin)
    sym = rng.integers(kmin, kmin + k, size=n)
    index = rng.integers(0, rows, size=n)
    data = rc.encode(sym, table, index)
    assert np.array_equal(rc.decode(data, table, n, index), sym)


def test_escapes_roundtrip():
    table = rc.freeze_pmf(gaussian_pmf(0, 2, -8, 7), -8)
    sym = np.array([0, 1, -8, 7, 8, -9, 1000, -2**31, 2**31 - 1, 3])
    data = rc.encode(sym, table)
    assert np.array_equal(rc.decode(data, table, sym.size), sym)


def test_escape_free_table_rejects_outliers():
    table = rc.freeze_pmf(np.full(4, 0.25), 0, escape=False)
    with pytest.raises(ValueError):
        rc.encode([5], table)


def test_per_symbol_rows():
    rng = np.random.default_rng(3)
    mus = rng.uniform(-5, 5, 500)
    sig = rng.uniform(0.2, 4, 500)
    pmf = np.stack([gaussian_pmf(m, s) for m, s in zip(mus, sig)])
    table = rc.freeze_pmf(pmf, -64)
    sym = np.round(rng.normal(mus, sig)).astype(np.int64)
    data = rc.encode(sym, table)
    assert np.array_equal(rc.decode(data, table, 500), sym)


def test_corruption_never_crashes():
    rng = np.random.default_rng(4)
    table = rc.freeze_pmf(gaussian_pmf(0, 3), -64)
    sym = np.round(rng.normal(0, 3, 2000)).astype(np.int64)
    chunk = rc.pack_chunk(rc.encode(sym, table))
    for _ in range(300):
        bad = bytearray(chunk)
        i = int(rng.integers(0, len(bad)))
        bad[i] ^= int(rng.integers(1, 256))
        with pytest.raises(rc.CorruptStreamError):
            payload, _ = rc.unpack_chunk(bytes(bad))
    # raw payload damage without a checksum: decoding may succeed with wrong symbols, but only typed errors
    payload = rc.encode(sym, table)
    for cut in (0, 1, 7, len(payload) // 2, len(payload) - 2):
        try:
            rc.decode(payload[:cut], table, sym.size)
        except rc.CorruptStreamError:
            pass
        else:  # pragma: no cover - a truncated stream must not decode completely
            pytest.fail("truncated payload decoded")


def test_chunk_roundtrip():
    payload = b"\x01\x02\x03"
    data = rc.pack_chunk(payload) + rc.pack_chunk(b"")
    p1, off = rc.unpack_chunk(data, 0)
    p2, end = rc.unpack_chunk(data, off)
    assert (p1, p2, end) == (payload, b"", len(data))


def test_raw_escape_range_enforced():
    t = rc.freeze_pmf(np.full(4, 0.25), 0)
    for v in (rc.RAW_MIN, rc.RAW_MAX):
        assert rc.decode(rc.encode([v], t), t, 1).tolist() == [v]
    for v in (rc.RAW_MIN - 1, rc.RAW_MAX + 1):
        with pytest.raises(ValueError):
            rc.encode([v], t)
