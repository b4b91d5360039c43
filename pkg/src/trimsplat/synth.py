"""Procedural prompts with reference objects, and the image-space evaluator.

A prompt is a 16-value parameter vector describing one object (shape class,
extent, orientation, depth profile, color). Each prompt owns a reference
:class:`~trimsplat.latent.SplatSet` laid out on the token grid, with the two
outermost rows and columns always transparent. The evaluator compares
renders against the reference renders by silhouette IoU and color agreement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latent import CHANNELS, GRID, GaussianPrior, SplatSet, encode_splats
from .render import CameraMatrix, render, standard_cameras

EMBED_DIM = 16
SHAPES = ("blob", "ring", "box")
BORDER = 2
FG_OPACITY = 0.95
BG_OPACITY = float(1.0 / (1.0 + np.exp(6.0)))
FG_SCALE = 0.07
BG_SCALE = 0.05
BG_COLOR = 0.05

# per-channel spread of the generated data around the reference latent
DATA_SPREAD = np.array([0.8, 0.8, 0.6, 0.1, 0.1, 0.3, 0.5, 1.5, 1.5, 1.5, 1.0])
# per-sample factors shared by all object tokens: x shift, y shift, size
GLOBAL_AMPLITUDE = np.array([0.5, 0.5, 0.4])

COVER_THRESHOLD = 0.5


@dataclass
class PromptSpec:
    prompt_id: int
    embedding: np.ndarray
    reference: SplatSet
    label: str
    _renders: dict = field(default_factory=dict, repr=False, compare=False)

    def reference_renders(self, cameras: list[CameraMatrix]) -> list[np.ndarray]:
        key = tuple((c.view_id, c.image_size, c.extrinsic.tobytes()) for c in cameras)
        if key not in self._renders:
            self._renders[key] = render(self.reference, cameras)
        return self._renders[key]

    def same_as(self, other: "PromptSpec") -> bool:
        return (self.prompt_id == other.prompt_id and self.label == other.label
                and np.array_equal(self.embedding, other.embedding) and self.reference.equals(other.reference))


def _cell_coords(h: int, w: int):
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ii.reshape(-1), jj.reshape(-1)


def reference_splats(embedding: np.ndarray, grid: tuple[int, int] = (GRID, GRID)) -> SplatSet:
    """Lay out the object described by ``embedding`` on the token grid."""
    e = np.asarray(embedding, dtype=float)
    h, w = grid
    shape = SHAPES[int(np.argmax(e[0:3]))]
    radius, aspect, angle, thickness = 6.0 * e[3], e[4], np.pi * e[5], e[6]
    color = e[7:10]
    dx, dy, inner, shade = 2.0 * e[10], 2.0 * e[11], e[12], e[13]

    ii, jj = _cell_coords(h, w)
    cx = jj - (w - 1) / 2.0 - dx
    cy = (h - 1) / 2.0 - ii - dy
    u = np.cos(angle) * cx + np.sin(angle) * cy
    v = -np.sin(angle) * cx + np.cos(angle) * cy
    rho = np.hypot(u / radius, v / (radius * aspect))
    if shape == "blob":
        inside = rho <= 1.0
    elif shape == "ring":
        inside = (rho <= 1.0) & (rho >= inner)
    else:
        inside = (np.abs(u) <= radius) & (np.abs(v) <= radius * aspect)
        rho = np.maximum(np.abs(u) / radius, np.abs(v) / (radius * aspect))
    border = (ii < BORDER) | (ii >= h - BORDER) | (jj < BORDER) | (jj >= w - BORDER)
    inside &= ~border

    k = h * w
    xs = (jj + 0.5) * 2.0 / w - 1.0
    ys = 1.0 - (ii + 0.5) * 2.0 / h
    side = np.where((ii + jj) % 2 == 0, 1.0, -1.0)
    zs = np.where(inside, 0.5 * thickness * np.sqrt(np.clip(1.0 - rho**2, 0.0, 1.0)) * side, 0.0)
    positions = np.stack([xs, ys, zs], axis=1)
    scales = np.where(inside[:, None], FG_SCALE, BG_SCALE) * np.ones((k, 2))
    opacities = np.where(inside, FG_OPACITY, BG_OPACITY)
    tint = 1.0 - shade * np.clip(rho, 0.0, 1.0)
    colors = np.where(inside[:, None], np.clip(color[None, :] * tint[:, None], 0.02, 0.98), BG_COLOR)
    return SplatSet(positions, scales, np.zeros(k), opacities, colors, (h, w))


def prior_means(embedding: np.ndarray) -> np.ndarray:
    """Reference latent tokens plus, in the last row, the background token mean."""
    ref = reference_splats(embedding)
    lat = encode_splats(ref, CHANNELS)
    tokens = lat.reshape(CHANNELS, -1).T
    bg = ref.opacities < 0.5
    bg_mean = tokens[bg].mean(axis=0) if bg.any() else tokens.mean(axis=0)
    return np.vstack([tokens, bg_mean])


def prior_loadings(embedding: np.ndarray, amplitude: np.ndarray = GLOBAL_AMPLITUDE) -> np.ndarray:
    """``(H*W + 1, C, 3)`` loadings of the shared factors; nonzero on object cells only."""
    ref = reference_splats(embedding)
    obj = np.append(ref.opacities >= 0.5, False)
    table = np.zeros((len(obj), CHANNELS, 3))
    table[obj, 0, 0] = amplitude[0]
    table[obj, 1, 1] = amplitude[1]
    table[obj, 3:5, 2] = amplitude[2]
    return table


def data_prior(spread: np.ndarray = DATA_SPREAD, amplitude: np.ndarray = GLOBAL_AMPLITUDE) -> GaussianPrior:
    amplitude = np.asarray(amplitude, dtype=float)
    return GaussianPrior(prior_means, spread, lambda e: prior_loadings(e, amplitude))


def generate_prompts(count: int, seed: int = 0) -> list[PromptSpec]:
    if count < 1:
        raise ValueError("need at least one prompt")
    rng = np.random.Generator(np.random.PCG64([seed, 0x7419]))
    prompts = []
    for pid in range(count):
        e = np.zeros(EMBED_DIM)
        kind = int(rng.integers(len(SHAPES)))
        e[kind] = 1.0
        e[3] = rng.uniform(3.5, 5.5) / 6.0
        e[4] = rng.uniform(0.6, 1.0)
        e[5] = rng.uniform(0.0, 1.0)
        e[6] = rng.uniform(0.3, 1.0)
        e[7:10] = rng.uniform(0.25, 0.75, size=3)
        e[10:12] = rng.uniform(-0.25, 0.25, size=2)
        e[12] = rng.uniform(0.35, 0.55)
        e[13] = rng.uniform(0.0, 0.4)
        e[14], e[15] = np.sin(np.pi * e[5]), np.cos(np.pi * e[5])
        rgb = ",".join(f"{int(c * 255)}" for c in e[7:10])
        label = f"{SHAPES[kind]} r={6 * e[3]:.1f} rgb=({rgb})"
        prompts.append(PromptSpec(pid, e, reference_splats(e), label))
    return prompts


def _view_score(img: np.ndarray, ref: np.ndarray) -> float:
    a, ar = img[..., 3], ref[..., 3]
    union = np.maximum(a, ar).sum()
    iou = np.minimum(a, ar).sum() / union if union > 0 else 1.0
    overlap = (a > COVER_THRESHOLD) & (ar > COVER_THRESHOLD)
    if not overlap.any():
        return 0.5 * iou
    err = np.abs(img[..., :3] - ref[..., :3])[overlap].mean()
    return 0.5 * iou + 0.5 * (1.0 - err)


def evaluate(prompt: PromptSpec, images: list[np.ndarray], cameras: list[CameraMatrix] | None = None) -> float:
    """Mean over views of ``0.5 * soft-IoU(alpha) + 0.5 * (1 - color error on overlap)``.

    The soft IoU is ``sum(min(a, a_ref)) / sum(max(a, a_ref))``. Overlap pixels
    are those where both alphas exceed 0.5; an empty overlap scores 0 on the
    color term.
    """
    if cameras is None:
        cameras = standard_cameras(images[0].shape[:2] if images else (64, 64))
    refs = prompt.reference_renders(cameras)
    if len(images) != len(refs):
        raise ValueError(f"got {len(images)} views, reference has {len(refs)}")
    score = float(np.mean([_view_score(img, ref) for img, ref in zip(images, refs)]))
    return min(max(score, 0.0), 1.0)
