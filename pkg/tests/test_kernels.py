from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dlpgate import _kernels
from dlpgate._kernels import encode_with_offsets, numba_impl, numpy_impl

from conftest import fnv1a64
from oracles import kgram_hashes as oracle_kgrams
from oracles import winnow_positions as oracle_winnow

IMPLS = [pytest.param(numpy_impl, id="numpy")]
if numba_impl is not None:
    IMPLS.append(pytest.param(numba_impl, id="numba"))


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


@pytest.mark.parametrize("impl", IMPLS)
def test_kgram_matches_reference_vectors(impl):
    buf, off = encode_with_offsets("foobar")
    assert int(impl.kgram_hashes(buf, off, 6)[0]) == 0x85944171F73967E8


@pytest.mark.parametrize("impl", IMPLS)
@given(text=st.text(max_size=60), k=st.integers(1, 9))
def test_kgram_hashes_match_python_oracle(impl, text, k):
    buf, off = encode_with_offsets(text)
    assert impl.kgram_hashes(buf, off, k).tolist() == oracle_kgrams(text, k)


@pytest.mark.parametrize("impl", IMPLS)
@given(hs=st.lists(st.integers(0, 7), max_size=40), w=st.integers(1, 6))
def test_winnow_matches_brute_force(impl, hs, w):
    # small value range forces many ties, exercising the rightmost rule
    arr = np.array(hs, dtype=np.uint64)
    assert impl.winnow(arr, w).tolist() == oracle_winnow(hs, w)


@pytest.mark.parametrize("impl", IMPLS)
@given(data=st.binary(max_size=300))
def test_byte_histogram(impl, data):
    expect = [0] * 256
    for b in data:
        expect[b] += 1
    assert impl.byte_histogram(np.frombuffer(data, dtype=np.uint8)).tolist() == expect


def test_winnow_large_values_agree():
    rng = np.random.default_rng(7)
    hs = rng.integers(0, 2**63, size=500, dtype=np.uint64) * np.uint64(2)
    assert numpy_impl.winnow(hs, 4).tolist() == oracle_winnow([int(h) for h in hs], 4)
    if numba_impl is not None:
        assert numba_impl.winnow(hs, 4).tolist() == numpy_impl.winnow(hs, 4).tolist()


def test_env_flag_selects_numpy(monkeypatch):
    import importlib

    monkeypatch.setenv("DLPGATE_NO_NUMBA", "1")
    mod = importlib.reload(_kernels)
    try:
        assert mod.active is mod.numpy_impl
        assert mod.USE_NUMBA is False
    finally:
        monkeypatch.delenv("DLPGATE_NO_NUMBA")
        importlib.reload(_kernels)


def test_offsets_for_multibyte_text():
    buf, off = encode_with_offsets("aé€𝄞")
    assert off.tolist() == [0, 1, 3, 6, 10]
    assert bytes(buf) == "aé€𝄞".encode()


def test_benchmark_script_runs(capsys):
    import runpy

    bench = runpy.run_path(str(Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"))
    bench["main"](["--sizes", "500", "--repeat", "1"])
    out = capsys.readouterr().out
    assert "kgram_hashes" in out and "winnow" in out
