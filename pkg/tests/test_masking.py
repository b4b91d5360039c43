import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from trimsplat.latent import CountingDenoiser, Denoiser, DenoiserConfig, euler_sampler, flatten, sample_noise
from trimsplat.masking import (
    MaskedDenoising, MaskSchedule, border_region, corner_reference, detect_mask, merge_tokens, pad_tokens,
    read_pbm, reference_similarity, scheduled_region, token_count, write_pbm,
)
from trimsplat.synth import data_prior, generate_prompts

EMBED = np.linspace(-1.0, 1.0, 16)


def brute_cosine_mask(z, tau):
    c, h, w = z.shape
    corners = [(i, j) for i in (0, 1, h - 2, h - 1) for j in (0, 1, w - 2, w - 1)]
    ref = np.mean([z[:, i, j] for i, j in corners], axis=0)
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            v = z[:, i, j]
            out[i, j] = float(ref @ v) / (np.linalg.norm(ref) * np.linalg.norm(v)) >= tau
    return out


def test_border_and_negated_center():
    f = np.array([1.0, -2.0, 0.5, 3.0])
    z = np.tile(f[:, None, None], (1, 16, 16))
    z[:, 5:11, 5:11] = -f[:, None, None]
    mask = detect_mask(z, 0.5)
    expected = np.ones((16, 16), dtype=bool)
    expected[5:11, 5:11] = False
    assert np.array_equal(mask, expected)
    assert np.array_equal(mask, brute_cosine_mask(z, 0.5))


def test_uniform_latent_is_all_background():
    z = np.full((11, 16, 16), 0.3)
    assert detect_mask(z, 0.85).all()


def test_zero_reference_falls_back_to_foreground():
    z = sample_noise(1)
    for sl in (np.s_[:, :2, :2], np.s_[:, :2, -2:], np.s_[:, -2:, :2], np.s_[:, -2:, -2:]):
        z[sl] = 0.0
    assert reference_similarity(z) is None
    assert not detect_mask(z).any()


def test_tau_one_marks_only_exact_matches():
    z = sample_noise(2)
    assert not detect_mask(z, 1.0 + 1e-9).any()
    mask = detect_mask(z, 1.0)
    # a generic latent has no token exactly parallel to the corner mean
    assert mask.sum() <= 4


def test_corner_reference_mean():
    z = sample_noise(3)
    cells = [z[:, i, j] for i in (0, 1, 14, 15) for j in (0, 1, 14, 15)]
    assert np.allclose(corner_reference(z), np.mean(cells, axis=0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**20), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_detector_matches_brute_force_and_tau_monotone(seed, t1, t2):
    z = sample_noise(seed, (11, 8, 8))
    z[:, :2, :2] += 1.0
    lo, hi = min(t1, t2), max(t1, t2)
    m_lo, m_hi = detect_mask(z, lo), detect_mask(z, hi)
    assert np.all(m_hi <= m_lo)
    assert np.array_equal(m_lo, brute_cosine_mask(z, lo))


def test_detector_needs_room_for_corners():
    with pytest.raises(ValueError):
        detect_mask(np.ones((11, 3, 8)))


def test_phase_region_counts():
    sched = MaskSchedule.default(28)
    assert sched.widths == (2, 4, 6, 8)
    counts = [int(scheduled_region(sched, s).sum()) for s in sched.phase_starts]
    assert counts == [112, 192, 240, 256]
    assert 256 - 12 * 12 == 112


def test_region_empty_before_start():
    sched = MaskSchedule.default(28)
    assert sched.start == 14
    for progress in range(sched.start):
        assert not scheduled_region(sched, progress).any()
    with pytest.raises(ValueError):
        scheduled_region(sched, 28)


@pytest.mark.parametrize("steps", [4, 10, 28, 50])
def test_regions_nest(steps):
    sched = MaskSchedule.default(steps)
    prev = np.zeros((16, 16), dtype=bool)
    for progress in range(steps):
        cur = scheduled_region(sched, progress)
        assert np.all(prev <= cur)
        prev = cur
    assert prev.all()


def test_schedule_validation():
    with pytest.raises(ValueError):
        MaskSchedule(10, 5, (5, 6, 7, 8), (2, 2, 6, 8), (16, 16))
    with pytest.raises(ValueError):
        MaskSchedule(10, 5, (5, 6, 7, 8), (2, 4, 6, 7), (16, 16))


def test_border_region_width():
    assert border_region((16, 16), 8).all()
    assert border_region((16, 16), 1).sum() == 60


def test_merge_empty_mask_is_flatten():
    z = sample_noise(4)
    seq = merge_tokens(z, np.zeros((16, 16), dtype=bool))
    plain = flatten(z)
    assert len(seq) == 256 and not seq.has_bg
    assert np.array_equal(seq.data, plain.data) and np.array_equal(seq.positions, plain.positions)
    assert np.array_equal(pad_tokens(seq, np.zeros((16, 16), dtype=bool)), z)


def test_merge_phase_one_region():
    z = sample_noise(5)
    mask = border_region((16, 16), 2)
    seq = merge_tokens(z, mask)
    assert len(seq) == 145
    assert seq.positions[-1] == 256


def test_merge_all_background():
    z = sample_noise(6)
    seq = merge_tokens(z, np.ones((16, 16), dtype=bool))
    assert len(seq) == 1
    assert np.allclose(seq.data[0], z.reshape(11, -1).mean(axis=1))


def test_pad_single_cell():
    z = sample_noise(7)
    mask = np.zeros((16, 16), dtype=bool)
    mask[3, 4] = True
    out = pad_tokens(merge_tokens(z, mask), mask)
    assert np.array_equal(out, z)  # the mean of one cell is that cell
    seq = merge_tokens(z, mask)
    data = seq.data.copy()
    data[-1] = 99.0
    out = pad_tokens(type(seq)(data, seq.positions, seq.grid_shape), mask)
    assert np.sum(np.any(out != z, axis=0)) == 1 and np.all(out[:, 3, 4] == 99.0)


def test_pad_rejects_foreign_sequence():
    z = sample_noise(8)
    seq = merge_tokens(z, border_region((16, 16), 2))
    with pytest.raises(ValueError):
        pad_tokens(seq, border_region((16, 16), 4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**30), arrays(bool, (16, 16)))
def test_merge_pad_roundtrip(seed, mask):
    z = sample_noise(seed)
    seq = merge_tokens(z, mask)
    assert len(seq) == token_count(mask) == 256 - mask.sum() + (1 if mask.any() else 0)
    out = pad_tokens(seq, mask)
    assert np.array_equal(out[:, ~mask], z[:, ~mask])
    if mask.any():
        assert np.allclose(out[:, mask], z[:, mask].mean(axis=1, keepdims=True), atol=1e-12)


def test_disabled_schedule_is_bit_identical():
    den = Denoiser(DenoiserConfig(steps=10), data_prior())
    e = generate_prompts(1, 0)[0].embedding
    plain = euler_sampler(sample_noise(1), e, den)
    hook = MaskedDenoising(MaskSchedule.disabled(10))
    masked = euler_sampler(sample_noise(1), e, den, hook)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(plain.states, masked.states))
    assert hook.token_log == [256] * 10


def test_hook_logs_token_counts_and_keeps_last_mask():
    den = CountingDenoiser(Denoiser(DenoiserConfig(steps=12), data_prior()))
    e = generate_prompts(1, 0)[0].embedding
    hook = MaskedDenoising(MaskSchedule.default(12))
    traj = euler_sampler(sample_noise(2), e, den, hook)
    assert den.token_log == hook.token_log
    assert hook.last_mask.timestep == 1
    # recount from the recorded states
    for (t, z), k in zip(traj.states[:-1], hook.token_log):
        assert k == token_count(hook.mask_for(z, t))
    assert hook.token_log[-1] < 256


def test_hook_uses_bg_velocity_for_masked_cells():
    den = Denoiser(DenoiserConfig(steps=8), data_prior())
    e = generate_prompts(1, 0)[0].embedding
    hook = MaskedDenoising(MaskSchedule.default(8))
    z = euler_sampler(sample_noise(3), e, den, stop=1).final
    v = hook(z, 1, den, e)
    mask = hook.last_mask.cells
    assert mask.any()
    cols = v[:, mask]
    assert np.all(cols == cols[:, :1])


def test_pbm_roundtrip(tmp_path):
    mask = border_region((16, 16), 3)
    write_pbm(mask, tmp_path / "m.pbm")
    assert (tmp_path / "m.pbm").read_text().startswith("P1\n16 16\n")
    assert np.array_equal(read_pbm(tmp_path / "m.pbm"), mask)
