import base64

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propaseg.rle import RleError, rle_decode, rle_encode


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000), h=st.integers(1, 40), w=st.integers(1, 40), density=st.floats(0, 1))
def test_roundtrip(seed, h, w, density):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < density
    payload = rle_encode(mask)
    assert payload["h"] == h and payload["w"] == w
    assert np.array_equal(rle_decode(payload), mask)


def test_empty_and_full():
    for mask in (np.zeros((3, 5), dtype=bool), np.ones((3, 5), dtype=bool)):
        assert np.array_equal(rle_decode(rle_encode(mask)), mask)


def test_first_run_is_background():
    mask = np.array([[True, True], [False, False]])
    payload = rle_encode(mask)
    counts = np.frombuffer(base64.b64decode(payload["counts_b64"]), dtype="<u4")
    assert counts[0] == 0  # leading background run of length zero


def test_malformed_payloads():
    with pytest.raises(RleError):
        rle_decode({"h": 2, "w": 2})
    with pytest.raises(RleError):
        rle_decode({"h": 2, "w": 2, "counts_b64": "!!!"})
    with pytest.raises(RleError):
        rle_decode({"h": 2, "w": 2, "counts_b64": base64.b64encode(b"\x01\x00").decode()})


def test_wrong_total():
    payload = rle_encode(np.zeros((2, 2), dtype=bool))
    payload["h"] = 3
    with pytest.raises(RleError):
        rle_decode(payload)


def test_non_2d_rejected():
    with pytest.raises(RleError):
        rle_encode(np.zeros((2, 2, 2), dtype=bool))
