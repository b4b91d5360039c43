"""Trajectory reduction: denoise N candidates to an intermediate step, pick one
by a pairwise single-elimination tournament, and finish only the winner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .latent import CountingDenoiser, Denoiser, SplatSet, Trajectory, decode_splats, integrate, sample_noise
from .render import CameraMatrix, correct_opacity, render, standard_cameras


@dataclass(frozen=True)
class ReductionPlan:
    n: int
    steps: int
    t: int
    seeds: tuple[int, ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one candidate")
        if not 0 < self.t < self.steps:
            raise ValueError(f"reduction step {self.t} outside (0, {self.steps})")
        if len(self.seeds) != self.n or len(set(self.seeds)) != self.n:
            raise ValueError("need one distinct seed per candidate")

    @classmethod
    def make(cls, n: int, steps: int, t: Optional[int] = None, first_seed: int = 1) -> "ReductionPlan":
        return cls(n, steps, steps // 2 if t is None else t, tuple(range(first_seed, first_seed + n)))

    @property
    def expected_calls(self) -> int:
        return self.n * self.steps - (self.n - 1) * self.t


@dataclass
class StepLedger:
    denoiser_calls: int = 0
    decode_calls: int = 0
    render_calls: int = 0
    selector_comparisons: int = 0
    token_log: list[int] = field(default_factory=list)

    def merge(self, other: "StepLedger") -> None:
        self.denoiser_calls += other.denoiser_calls
        self.decode_calls += other.decode_calls
        self.render_calls += other.render_calls
        self.selector_comparisons += other.selector_comparisons
        self.token_log.extend(other.token_log)


def tournament(latents: list[np.ndarray], model, prompt_embed: Optional[np.ndarray] = None,
               ledger: Optional[StepLedger] = None) -> int:
    """Single-elimination bracket in index order; returns the winning index.

    Each match pits a lower index ``a`` against a higher index ``b``; ``a``
    advances when ``P(a beats b) >= 0.5``, so an exact tie goes to the lower
    index. The test is made on the logit sign, which stays exact where the
    probability would round to 0.5. An odd candidate out gets a bye. ``N - 1`` matches in total.
    """
    alive = list(range(len(latents)))
    if not alive:
        raise ValueError("empty candidate list")
    while len(alive) > 1:
        nxt = []
        for k in range(0, len(alive) - 1, 2):
            a, b = alive[k], alive[k + 1]
            logit = model.predict_pair(latents[a], latents[b], prompt_embed).logit
            if ledger is not None:
                ledger.selector_comparisons += 1
            nxt.append(a if logit >= 0.0 else b)
        if len(alive) % 2:
            nxt.append(alive[-1])
        alive = nxt
    return alive[0]


@dataclass
class ReductionResult:
    trajectory: Trajectory
    winner: int
    ledger: StepLedger
    candidates: list[Trajectory]
    splats: SplatSet
    images: list[np.ndarray]
    mask: Optional[np.ndarray] = None


def finish(z0: np.ndarray, cameras: list[CameraMatrix], ledger: StepLedger, mask: Optional[np.ndarray] = None):
    """Decode, optionally zero masked opacities, and render."""
    splats = decode_splats(z0)
    ledger.decode_calls += 1
    if mask is not None:
        splats = correct_opacity(splats, mask)
    images = render(splats, cameras)
    ledger.render_calls += 1
    return splats, images


def reduced_inference(plan: ReductionPlan, model, prompt_embed: np.ndarray, denoiser: Denoiser,
                      hook_factory: Optional[Callable[[], object]] = None,
                      cameras: Optional[list[CameraMatrix]] = None, prompt_id: int = -1,
                      correct: bool = True) -> ReductionResult:
    """Run the plan; the ledger's denoiser calls equal ``N*T - (N-1)*t``.

    ``hook_factory`` builds one step hook per candidate (e.g. masked
    denoising); the winner keeps its hook for the remaining steps, and its
    last mask drives opacity correction when ``correct`` is set.
    """
    if denoiser.config.steps != plan.steps:
        raise ValueError("plan and denoiser disagree on the step count")
    cameras = cameras or standard_cameras()
    cfg = denoiser.config
    counter = CountingDenoiser(denoiser)
    ledger = StepLedger()
    candidates, hooks = [], []
    for seed in plan.seeds:
        hook = hook_factory() if hook_factory else None
        noise = sample_noise(seed, (cfg.channels, cfg.height, cfg.width))
        states = integrate(noise, counter, prompt_embed, plan.steps, plan.t, hook)
        candidates.append(Trajectory(seed, prompt_id, states))
        hooks.append(hook)
    latents = [c.final for c in candidates]
    winner = tournament(latents, model, prompt_embed, ledger)
    tail = integrate(latents[winner], counter, prompt_embed, plan.t, 0, hooks[winner])
    full = Trajectory(plan.seeds[winner], prompt_id, candidates[winner].states + tail[1:])
    ledger.denoiser_calls = counter.calls
    ledger.token_log = list(counter.token_log)
    mask = None
    if correct and hooks[winner] is not None and getattr(hooks[winner], "last_mask", None) is not None:
        mask = hooks[winner].last_mask.cells
    splats, images = finish(full.final, cameras, ledger, mask)
    return ReductionResult(full, winner, ledger, candidates, splats, images, mask)
