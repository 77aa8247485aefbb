"""Checkpoint container round-trips and digests."""

import numpy as np
import pytest

from latentmem.checkpoint import digest_arrays, load_arrays, save_arrays
from latentmem.errors import ArtifactError


def test_round_trip_exact_f8(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(7,))}
    path = tmp_path / "ck.bin"
    save_arrays(path, arrays)
    back = load_arrays(path)
    assert set(back) == {"a", "b"}
    assert np.array_equal(back["a"], arrays["a"])
    assert np.array_equal(back["b"], arrays["b"])


def test_f4_storage_downcasts(tmp_path):
    arrays = {"w": np.array([[1.0000001, -2.5]])}
    path = tmp_path / "ck.bin"
    save_arrays(path, arrays, dtype="f4")
    back = load_arrays(path)
    assert back["w"].dtype == np.float64
    assert np.allclose(back["w"], arrays["w"], atol=1e-6)


def test_digest_is_content_sensitive():
    a = {"w": np.ones((2, 2))}
    b = {"w": np.ones((2, 2))}
    assert digest_arrays(a) == digest_arrays(b)
    b["w"][0, 0] += 1e-15
    assert digest_arrays(a) != digest_arrays(b)


def test_missing_checkpoint_is_artifact_error(tmp_path):
    with pytest.raises(ArtifactError):
        load_arrays(tmp_path / "nope.bin")
