import struct
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimsplat import container
from trimsplat.data import (
    N_BINS, BalancedPairSet, TripletDataset, assign_bins, bin_edges, build_pairs, load_dataset, load_pairs,
    save_dataset, save_pairs, synthesize,
)
from trimsplat.latent import Denoiser, DenoiserConfig
from trimsplat.render import standard_cameras
from trimsplat.synth import data_prior, generate_prompts

CAMS = standard_cameras((32, 32))


@pytest.fixture(scope="module")
def denoiser():
    return Denoiser(DenoiserConfig(steps=6), data_prior())


@pytest.fixture(scope="module")
def small_ds(denoiser):
    return synthesize(generate_prompts(2, 0), 4, denoiser, CAMS)


def fake_dataset(scores, seed=0):
    """Dataset with given (N, M) scores and random latents; no rendering involved."""
    scores = np.asarray(scores, dtype=float)
    n, m = scores.shape
    rng = np.random.default_rng(seed)
    latents = rng.standard_normal((n, m, 11, 4, 4)).astype(np.float32)
    seeds = np.tile(np.arange(1, m + 1), (n, 1))
    return TripletDataset(generate_prompts(n, seed), seeds, scores, latents, 10, 5)


# --------------------------------------------------------------------------- #
# container
# --------------------------------------------------------------------------- #


def test_container_roundtrip():
    a = np.arange(12, dtype=np.float32).reshape(3, 4)
    blob = container.dumps("thing", {"x": 0.1, "n": [1, 2]}, {"a": a, "b": np.zeros(0)})
    manifest, arrays = container.loads(blob, "thing")
    assert manifest["meta"] == {"x": 0.1, "n": [1, 2]}
    assert np.array_equal(arrays["a"], a) and arrays["b"].shape == (0,)
    assert blob[:8] == b"TRIMPACK"


def test_container_little_endian_layout():
    blob = container.dumps("k", {}, {"a": np.array([1.5], dtype=np.float32)})
    (hlen,) = struct.unpack("<I", blob[8:12])
    assert blob[12 + hlen:] == struct.pack("<f", 1.5)


def test_container_bad_magic():
    blob = bytearray(container.dumps("k", {}, {"a": np.ones(3)}))
    blob[0:1] = b"X"
    with pytest.raises(container.HeaderError):
        container.loads(bytes(blob))


def test_container_truncated():
    blob = container.dumps("k", {}, {"a": np.ones(30)})
    with pytest.raises(container.TruncatedError):
        container.loads(blob[:-5])
    with pytest.raises(container.TruncatedError):
        container.loads(blob[:20])


def test_container_version_and_kind():
    blob = container.dumps("k", {}, {})
    bumped = blob.replace(b'"version": 1', b'"version": 2')
    with pytest.raises(container.VersionError):
        container.loads(bumped)
    with pytest.raises(container.HeaderError):
        container.loads(blob, "other")


def test_container_errors_are_value_errors():
    assert issubclass(container.TruncatedError, ValueError)


# --------------------------------------------------------------------------- #
# synthesis
# --------------------------------------------------------------------------- #


def test_synthesize_shapes(small_ds):
    ds = small_ds
    assert ds.n_prompts == 2 and ds.per_prompt == 4
    assert ds.latents.shape == (2, 4, 11, 16, 16) and ds.latents.dtype == np.float32
    assert np.array_equal(ds.seeds, [[1, 2, 3, 4], [1, 2, 3, 4]])
    assert np.all((ds.scores >= 0) & (ds.scores <= 1))
    assert ds.t_capture == 3


def test_synthesize_smallest(denoiser):
    ds = synthesize(generate_prompts(1, 0), 2, denoiser, CAMS)
    assert ds.scores.shape == (1, 2) and np.all(np.isfinite(ds.scores))


def test_synthesize_validation(denoiser):
    with pytest.raises(ValueError):
        synthesize(generate_prompts(1, 0), 1, denoiser, CAMS)
    with pytest.raises(ValueError):
        synthesize(generate_prompts(1, 0), 2, denoiser, CAMS, t_capture=6)


def test_synthesize_deterministic_file(denoiser, small_ds, tmp_path):
    again = synthesize(generate_prompts(2, 0), 4, denoiser, CAMS)
    save_dataset(small_ds, tmp_path / "a.trim")
    save_dataset(again, tmp_path / "b.trim")
    assert (tmp_path / "a.trim").read_bytes() == (tmp_path / "b.trim").read_bytes()


def test_dataset_roundtrip(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path / "d.trim")
    assert load_dataset(tmp_path / "d.trim").equals(small_ds)


def test_dataset_one_prompt_roundtrip(tmp_path):
    ds = fake_dataset([[0.2, 0.7]])
    save_dataset(ds, tmp_path / "d.trim")
    assert load_dataset(tmp_path / "d.trim").equals(ds)


def test_dataset_load_wrong_kind(tmp_path):
    container.save(tmp_path / "x.trim", "pairs", {}, {})
    with pytest.raises(container.HeaderError):
        load_dataset(tmp_path / "x.trim")


# --------------------------------------------------------------------------- #
# bins and pairs
# --------------------------------------------------------------------------- #


def test_bin_edges_default():
    edges = bin_edges()
    assert len(edges) == N_BINS - 1
    assert np.allclose(edges, np.arange(1, 11) / 10)
    assert list(assign_bins(np.array([0.0, 0.05, 0.1, -0.15, 0.95, 1.0, 3.0]))) == [0, 0, 1, 1, 9, 10, 10]


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5, allow_nan=False), st.floats(0.001, 0.5))
def test_every_gap_in_exactly_one_bin(gap, width):
    b = int(assign_bins(np.array([gap]), width)[0])
    lo = 0.0 if b == 0 else b * width
    hi = np.inf if b == N_BINS - 1 else (b + 1) * width
    assert 0 <= b < N_BINS
    assert lo <= abs(gap) + 1e-12 and (abs(gap) < hi or np.isclose(abs(gap), hi))


def test_single_pair_from_two_trajectories():
    ds = fake_dataset([[0.3, 0.6]])
    pairs = build_pairs(ds, split_ratio=1.0, quota=10)
    assert len(pairs.train) == 1 and len(pairs.test) == 0


def test_eight_trajectories_give_28_pairs():
    rng = np.random.default_rng(0)
    ds = fake_dataset(rng.random((1, 8)))
    pairs = build_pairs(ds, split_ratio=0.5, quota=100)
    assert len(pairs.train) + len(pairs.test) == comb(8, 2) == 28


def test_ties_are_excluded():
    ds = fake_dataset([[0.5, 0.5, 0.7]])
    pairs = build_pairs(ds, split_ratio=1.0, quota=100)
    assert len(pairs.train) == 2
    assert np.all(pairs.train.gap != 0)


def test_full_bins_give_eleven_quotas():
    # 3 prompts x 64 evenly spaced scores spanning [0, 1.2] fill every 0.1 bin well past 20
    scores = np.tile(np.linspace(0.0, 1.2, 64), (3, 1)) + np.arange(3)[:, None] * 1e-4
    ds = fake_dataset(scores)
    pairs = build_pairs(ds, quota=20)
    assert len(pairs.train) == 11 * 20
    assert pairs.shortfall == {}
    assert np.all(np.bincount(pairs.bins(pairs.train), minlength=11) == 20)


def test_short_bins_recorded():
    ds = fake_dataset(np.random.default_rng(1).random((2, 6)) * 0.3)
    pairs = build_pairs(ds, quota=50)
    counts = np.bincount(pairs.bins(pairs.train), minlength=11)
    for b in range(11):
        assert pairs.shortfall.get(str(b), 0) == 50 - counts[b]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**20), st.integers(2, 7), st.integers(1, 4))
def test_pair_invariants(seed, m, n):
    rng = np.random.default_rng(seed)
    ds = fake_dataset(rng.random((n, m)), seed)
    pairs = build_pairs(ds, quota=5, seed=seed)
    for split in (pairs.train, pairs.test):
        assert np.array_equal(split.labels, (split.gap > 0).astype(int))
        # within-prompt, and the gap matches the stored scores
        assert np.all(split.first // m == split.prompt) and np.all(split.second // m == split.prompt)
        flat = ds.scores.reshape(-1)
        assert np.allclose(split.gap, flat[split.first] - flat[split.second])
    key = lambda s: {tuple(sorted(p)) for p in zip(s.first, s.second)}
    assert not key(pairs.train) & key(pairs.test)


def test_pairs_roundtrip(tmp_path):
    ds = fake_dataset(np.random.default_rng(2).random((3, 5)))
    pairs = build_pairs(ds, quota=3)
    save_pairs(pairs, tmp_path / "p.trim")
    back = load_pairs(tmp_path / "p.trim")
    assert isinstance(back, BalancedPairSet) and back.equals(pairs)


def test_build_pairs_errors():
    with pytest.raises(ValueError):
        build_pairs(fake_dataset([[0.4, 0.4]]))
