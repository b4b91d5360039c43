"""Instance-mask denoising: corner-reference background detection, the
progressive border schedule, and background token merging/padding.

Masks are ``(H, W)`` boolean grids where ``True`` marks background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .latent import TokenSequence, check_grid

CORNER = 2
DEFAULT_TAU = 0.85


@dataclass(frozen=True)
class InstanceMask:
    cells: np.ndarray  # (H, W) bool, True = background
    timestep: int

    @property
    def count(self) -> int:
        return int(self.cells.sum())


def corner_reference(z: np.ndarray, corner: int = CORNER) -> np.ndarray:
    c, h, w = z.shape
    patches = [z[:, :corner, :corner], z[:, :corner, w - corner:],
               z[:, h - corner:, :corner], z[:, h - corner:, w - corner:]]
    return np.concatenate([p.reshape(c, -1) for p in patches], axis=1).mean(axis=1)


def reference_similarity(z: np.ndarray, corner: int = CORNER) -> np.ndarray:
    """Cosine similarity of every token to the mean corner token, ``(H, W)``.

    Returns ``None`` when the reference token has zero norm.
    """
    c, h, w = z.shape
    ref = corner_reference(z, corner)
    ref_norm = np.linalg.norm(ref)
    if ref_norm == 0.0:
        return None
    tok = z.reshape(c, h * w)
    norms = np.linalg.norm(tok, axis=0)
    dots = ref @ tok
    sim = np.divide(dots, norms * ref_norm, out=np.zeros(h * w), where=norms > 0)
    return np.clip(sim, -1.0, 1.0).reshape(h, w)


def detect_mask(z: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Background wherever similarity to the corner reference is at least ``tau``.

    A zero-norm reference yields an all-foreground mask.
    """
    check_grid(z)
    _, h, w = z.shape
    if h < 2 * CORNER or w < 2 * CORNER:
        raise ValueError("grid too small for corner reference")
    sim = reference_similarity(z)
    if sim is None:
        return np.zeros((h, w), dtype=bool)
    return sim >= tau


def default_widths(h: int, w: int) -> tuple[int, ...]:
    half = min(h, w) // 2
    return tuple(math.ceil(half * k / 4) for k in range(1, 5))


@dataclass(frozen=True)
class MaskSchedule:
    """Border widths per phase, keyed by progress step ``T - t``.

    Progress steps before ``start`` carry no mask; phase ``p`` begins at
    ``phase_starts[p]`` and allows masking within ``widths[p]`` cells of any edge.
    """

    steps: int
    start: int
    phase_starts: tuple[int, ...]
    widths: tuple[int, ...]
    grid_shape: tuple[int, int]

    def __post_init__(self):
        if len(self.widths) != len(self.phase_starts):
            raise ValueError("one width per phase")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("phase widths must increase strictly")
        if self.widths[-1] != min(self.grid_shape) // 2:
            raise ValueError("final phase must cover the entire grid")
        if list(self.phase_starts) != sorted(self.phase_starts) or self.phase_starts[0] != self.start:
            raise ValueError("phase starts must be sorted and begin at start")

    @classmethod
    def default(cls, steps: int, grid_shape: tuple[int, int] = (16, 16), start_fraction: float = 0.5,
                widths: Optional[tuple[int, ...]] = None) -> "MaskSchedule":
        start = math.ceil(steps * start_fraction)
        widths = tuple(widths) if widths else default_widths(*grid_shape)
        remaining = steps - start
        starts = tuple(start + (remaining * p) // len(widths) for p in range(len(widths)))
        return cls(steps, start, starts, widths, tuple(grid_shape))

    @classmethod
    def disabled(cls, steps: int, grid_shape: tuple[int, int] = (16, 16)) -> "MaskSchedule":
        widths = default_widths(*grid_shape)
        return cls(steps, steps, (steps,) * len(widths), widths, tuple(grid_shape))

    def phase(self, progress: int) -> int:
        """0 before masking starts, else 1..len(widths)."""
        if progress < self.start:
            return 0
        return sum(progress >= s for s in self.phase_starts)


def border_region(grid_shape: tuple[int, int], width: int) -> np.ndarray:
    h, w = grid_shape
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dist = np.minimum(np.minimum(ii, h - 1 - ii), np.minimum(jj, w - 1 - jj))
    return dist < width


def scheduled_region(schedule: MaskSchedule, progress: int) -> np.ndarray:
    if not 0 <= progress < schedule.steps:
        raise ValueError(f"progress step {progress} outside [0, {schedule.steps})")
    p = schedule.phase(progress)
    if p == 0:
        return np.zeros(schedule.grid_shape, dtype=bool)
    return border_region(schedule.grid_shape, schedule.widths[p - 1])


def merge_tokens(z: np.ndarray, mask: np.ndarray) -> TokenSequence:
    """Foreground tokens in row-major order, then one background token (mean of masked cells)."""
    c, h, w = z.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != grid {(h, w)}")
    flat = mask.reshape(-1)
    tok = z.reshape(c, h * w).T
    fg = np.flatnonzero(~flat)
    if not flat.any():
        return TokenSequence(tok.copy(), fg, (h, w))
    bg = tok[flat].mean(axis=0)
    return TokenSequence(np.vstack([tok[fg], bg]), np.append(fg, h * w), (h, w))


def pad_tokens(seq: TokenSequence, mask: np.ndarray) -> np.ndarray:
    """Scatter foreground tokens back and fill every masked cell with the background token."""
    h, w = seq.grid_shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != grid {(h, w)}")
    flat = mask.reshape(-1)
    n_fg = h * w - int(flat.sum())
    expected = n_fg + (1 if flat.any() else 0)
    if len(seq) != expected or (flat.any() and not seq.has_bg):
        raise ValueError("token sequence was not produced under this mask")
    out = np.empty((h * w, seq.data.shape[1]), dtype=seq.data.dtype)
    out[seq.positions[:n_fg]] = seq.data[:n_fg]
    if flat.any():
        out[flat] = seq.data[-1]
    return out.T.reshape(-1, h, w)


def token_count(mask: np.ndarray) -> int:
    n = int(np.asarray(mask, dtype=bool).sum())
    return mask.size - n + (1 if n else 0)


@dataclass
class MaskedDenoising:
    """Step hook for :func:`~trimsplat.latent.integrate` that denoises merged tokens.

    Per step: detect background on the current latent, intersect with the
    scheduled border region, merge, run the denoiser, and pad the background
    velocity back over the masked cells. The mask of the most recent step is
    kept in ``last_mask`` for opacity correction.
    """

    schedule: MaskSchedule
    tau: float = DEFAULT_TAU
    freeze: bool = False
    token_log: list = field(default_factory=list)
    last_mask: Optional[InstanceMask] = None
    _frozen: Optional[np.ndarray] = field(default=None, repr=False)

    def mask_for(self, z: np.ndarray, t: int) -> np.ndarray:
        progress = self.schedule.steps - t
        region = scheduled_region(self.schedule, progress)
        if not region.any():
            return region
        if self.freeze:
            if self._frozen is None:
                self._frozen = detect_mask(z, self.tau)
            detected = self._frozen
        else:
            detected = detect_mask(z, self.tau)
        return detected & region

    def __call__(self, z: np.ndarray, t: int, denoiser, prompt_embed: np.ndarray) -> np.ndarray:
        mask = self.mask_for(z, t)
        seq = merge_tokens(z, mask)
        self.token_log.append(len(seq))
        self.last_mask = InstanceMask(mask, t)
        return pad_tokens(denoiser.step(seq, t, prompt_embed), mask)


def write_pbm(mask: np.ndarray, path: str | Path) -> None:
    """Plain-text P1 dump (1 = background)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    rows = "\n".join(" ".join("1" if v else "0" for v in row) for row in mask)
    Path(path).write_text(f"P1\n{w} {h}\n{rows}\n")


def read_pbm(path: str | Path) -> np.ndarray:
    parts = Path(path).read_text().split()
    if parts[0] != "P1":
        raise ValueError("not a plain PBM file")
    w, h = int(parts[1]), int(parts[2])
    return np.array([p == "1" for p in parts[3:3 + w * h]]).reshape(h, w)
