import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trimsplat.render import render, standard_cameras
from trimsplat.synth import BORDER, EMBED_DIM, evaluate, generate_prompts, prior_loadings, prior_means

CAMS = standard_cameras()


@pytest.fixture(scope="module")
def prompt():
    return generate_prompts(3, 0)[1]


def brute_view_score(img, ref):
    """Pixel-by-pixel evaluation of the score definition."""
    h, w = img.shape[:2]
    inter = union = err = 0.0
    n = 0
    for i in range(h):
        for j in range(w):
            a, b = img[i, j, 3], ref[i, j, 3]
            inter += min(a, b)
            union += max(a, b)
            if a > 0.5 and b > 0.5:
                err += sum(abs(img[i, j, k] - ref[i, j, k]) for k in range(3)) / 3.0
                n += 1
    iou = inter / union if union > 0 else 1.0
    return 0.5 * iou + (0.5 * (1.0 - err / n) if n else 0.0)


def test_hundred_distinct_prompts():
    ps = generate_prompts(100, 0)
    assert len(ps) == 100
    assert len({p.embedding.tobytes() for p in ps}) == 100
    assert all(p.embedding.shape == (EMBED_DIM,) for p in ps)


def test_prompts_deterministic():
    a, b = generate_prompts(5, 3), generate_prompts(5, 3)
    assert all(x.same_as(y) for x, y in zip(a, b))


def test_prompt_count_validation():
    with pytest.raises(ValueError):
        generate_prompts(0)


@pytest.mark.parametrize("seed", range(5))
def test_reference_has_transparent_border(seed):
    p = generate_prompts(1, seed)[0]
    op = p.reference.opacities.reshape(p.reference.grid_shape)
    assert op[0, 0] < 0.01 and op[0, -1] < 0.01 and op[-1, 0] < 0.01 and op[-1, -1] < 0.01
    border = np.ones_like(op, dtype=bool)
    border[BORDER:-BORDER, BORDER:-BORDER] = False
    assert np.all(op[border] < 0.01)
    assert np.any(op > 0.5)


def test_prior_tables(prompt):
    means = prior_means(prompt.embedding)
    loads = prior_loadings(prompt.embedding)
    assert means.shape == (257, 11)
    assert loads.shape == (257, 11, 3)
    obj = prompt.reference.opacities >= 0.5
    assert np.all(loads[:-1][~obj] == 0.0) and np.all(loads[-1] == 0.0)
    assert np.all(loads[:-1][obj][:, 0, 0] > 0.0)


def test_self_score(prompt):
    assert evaluate(prompt, render(prompt.reference, CAMS)) >= 0.99


def test_transparent_images_score_low(prompt):
    blank = [np.zeros((64, 64, 4)) for _ in CAMS]
    assert evaluate(prompt, blank) <= 0.5


def test_view_count_mismatch(prompt):
    with pytest.raises(ValueError):
        evaluate(prompt, render(prompt.reference, CAMS[:2]), CAMS)


def test_inverted_colors_match_brute_force(prompt):
    inv = prompt.reference.copy()
    inv.colors = 1.0 - inv.colors
    imgs = render(inv, CAMS)
    refs = prompt.reference_renders(CAMS)
    expected = np.mean([brute_view_score(a, b) for a, b in zip(imgs, refs)])
    assert np.isclose(evaluate(prompt, imgs), expected, atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.0, 1.0))
def test_score_bounded_and_shrinking_never_helps_iou(seed, keep_frac):
    rng = np.random.default_rng(seed)
    p = generate_prompts(1, seed)[0]
    cams = standard_cameras((24, 24))
    full = p.reference
    keep = rng.random(len(full)) < keep_frac
    shrunk = full.subset(keep)
    s_full = evaluate(p, render(full, cams), cams)
    s_shrunk = evaluate(p, render(shrunk, cams), cams)
    assert 0.0 <= s_shrunk <= 1.0
    # the silhouette term alone
    refs = p.reference_renders(cams)
    iou = lambda imgs: np.mean([np.minimum(a[..., 3], r[..., 3]).sum() / np.maximum(a[..., 3], r[..., 3]).sum()
                                for a, r in zip(imgs, refs)])
    assert iou(render(shrunk, cams)) <= iou(render(full, cams)) + 1e-12
    assert s_full >= 0.99
