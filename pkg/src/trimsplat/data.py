"""Selector training data: scored trajectories per prompt and balanced latent pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from . import container
from .latent import Denoiser, decode_splats, integrate, sample_noise
from .render import CameraMatrix, render, standard_cameras
from .synth import PromptSpec, evaluate, reference_splats

log = logging.getLogger(__name__)

N_BINS = 11
BIN_WIDTH = 0.1


@dataclass
class TripletDataset:
    """``M`` scored trajectories for each of ``N`` prompts.

    Only the latent captured at ``t_capture`` is kept per trajectory; the
    seed regenerates the rest.
    """

    prompts: list[PromptSpec]
    seeds: np.ndarray  # (N, M) int
    scores: np.ndarray  # (N, M) float
    latents: np.ndarray  # (N, M, C, H, W) float32
    steps: int
    t_capture: int
    meta: dict = field(default_factory=dict)

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)

    @property
    def per_prompt(self) -> int:
        return self.seeds.shape[1]

    def equals(self, other: "TripletDataset") -> bool:
        return (len(self.prompts) == len(other.prompts)
                and all(a.same_as(b) for a, b in zip(self.prompts, other.prompts))
                and np.array_equal(self.seeds, other.seeds) and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.latents, other.latents) and self.steps == other.steps
                and self.t_capture == other.t_capture and self.meta == other.meta)


def score_latent(prompt: PromptSpec, z0: np.ndarray, cameras: list[CameraMatrix]) -> float:
    return evaluate(prompt, render(decode_splats(z0), cameras), cameras)


def synthesize(prompts: list[PromptSpec], per_prompt: int, denoiser: Denoiser,
               cameras: Optional[list[CameraMatrix]] = None, t_capture: Optional[int] = None,
               first_seed: int = 1) -> TripletDataset:
    """Denoise, decode, render and score ``per_prompt`` trajectories per prompt.

    Trajectory ``i`` of every prompt uses seed ``first_seed + i`` (seeds 1..M by default).
    """
    if per_prompt < 2:
        raise ValueError("need at least 2 trajectories per prompt")
    cameras = cameras or standard_cameras()
    steps = denoiser.config.steps
    t_capture = steps // 2 if t_capture is None else t_capture
    if not 0 < t_capture < steps:
        raise ValueError(f"t_capture must lie in (0, {steps})")
    cfg = denoiser.config
    n = len(prompts)
    seeds = np.tile(np.arange(first_seed, first_seed + per_prompt), (n, 1))
    scores = np.empty((n, per_prompt))
    latents = np.empty((n, per_prompt, cfg.channels, cfg.height, cfg.width), dtype=np.float32)
    for j, prompt in enumerate(prompts):
        for i, seed in enumerate(seeds[j]):
            noise = sample_noise(int(seed), (cfg.channels, cfg.height, cfg.width))
            head = integrate(noise, denoiser, prompt.embedding, steps, t_capture)
            z_t = head[-1][1]
            z0 = integrate(z_t, denoiser, prompt.embedding, t_capture, 0)[-1][1]
            latents[j, i] = z_t
            scores[j, i] = score_latent(prompt, z0, cameras)
        log.info("prompt %d/%d: mean score %.4f", j + 1, n, scores[j].mean())
    meta = {"denoiser_seed": cfg.seed, "image_size": list(cameras[0].image_size), "views": len(cameras)}
    return TripletDataset(list(prompts), seeds, scores, latents, steps, t_capture, meta)


# --------------------------------------------------------------------------- #
# pairs
# --------------------------------------------------------------------------- #


def bin_edges(width: float = BIN_WIDTH, n_bins: int = N_BINS) -> np.ndarray:
    """Lower edges of bins 1..n_bins-1; bin 0 is [0, width), the last is open-ended."""
    return np.arange(1, n_bins) * width


def assign_bins(gaps: np.ndarray, width: float = BIN_WIDTH, n_bins: int = N_BINS) -> np.ndarray:
    return np.searchsorted(bin_edges(width, n_bins), np.abs(gaps), side="right")


@dataclass
class PairSplit:
    first: np.ndarray  # flat trajectory index of z1
    second: np.ndarray  # flat trajectory index of z2
    prompt: np.ndarray  # prompt index
    gap: np.ndarray  # s1 - s2

    @property
    def labels(self) -> np.ndarray:
        return (self.gap > 0).astype(np.int64)

    def __len__(self) -> int:
        return len(self.gap)

    def take(self, idx: np.ndarray) -> "PairSplit":
        return PairSplit(self.first[idx], self.second[idx], self.prompt[idx], self.gap[idx])

    def equals(self, other: "PairSplit") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.first, self.second, self.prompt, self.gap), (other.first, other.second, other.prompt, other.gap)))


@dataclass
class BalancedPairSet:
    """Train/test pairs referencing a shared latent table.

    ``latents`` is ``(n_trajectories, C, H, W)`` and ``embeddings`` holds one
    prompt embedding per prompt index.
    """

    latents: np.ndarray
    embeddings: np.ndarray
    train: PairSplit
    test: PairSplit
    bin_width: float = BIN_WIDTH
    n_bins: int = N_BINS
    quota: int = 200
    shortfall: dict = field(default_factory=dict)

    def batch(self, split: PairSplit, idx: Optional[np.ndarray] = None):
        """(z1, z2, embeddings, labels) arrays for the selected pairs."""
        part = split if idx is None else split.take(idx)
        return (self.latents[part.first].astype(float), self.latents[part.second].astype(float),
                self.embeddings[part.prompt], part.labels)

    def bins(self, split: PairSplit) -> np.ndarray:
        return assign_bins(split.gap, self.bin_width, self.n_bins)

    def equals(self, other: "BalancedPairSet") -> bool:
        return (np.array_equal(self.latents, other.latents) and np.array_equal(self.embeddings, other.embeddings)
                and self.train.equals(other.train) and self.test.equals(other.test)
                and self.bin_width == other.bin_width and self.n_bins == other.n_bins
                and self.quota == other.quota and self.shortfall == other.shortfall)


def candidate_pairs(dataset: TripletDataset, rng: np.random.Generator) -> PairSplit:
    """All within-prompt unordered pairs with distinct scores, randomly oriented."""
    m = dataset.per_prompt
    first, second, prompt, gap = [], [], [], []
    for j in range(dataset.n_prompts):
        for a, b in combinations(range(m), 2):
            if dataset.scores[j, a] == dataset.scores[j, b]:
                continue
            if rng.random() < 0.5:
                a, b = b, a
            first.append(j * m + a)
            second.append(j * m + b)
            prompt.append(j)
            gap.append(dataset.scores[j, a] - dataset.scores[j, b])
    return PairSplit(np.array(first, dtype=np.int64), np.array(second, dtype=np.int64),
                     np.array(prompt, dtype=np.int64), np.array(gap, dtype=float))


def build_pairs(dataset: TripletDataset, split_ratio: float = 0.7, quota: int = 200, seed: int = 0,
                bin_width: float = BIN_WIDTH, n_bins: int = N_BINS) -> BalancedPairSet:
    """Split within-prompt pairs train/test, then balance training pairs over gap bins.

    Bins short of ``quota`` keep every available pair; the missing counts are
    recorded in ``shortfall`` (bin index -> missing pairs).
    """
    if dataset.n_prompts == 0 or dataset.per_prompt < 2:
        raise ValueError("dataset has no pairs")
    rng = np.random.Generator(np.random.PCG64(seed))
    pairs = candidate_pairs(dataset, rng)
    if len(pairs) == 0:
        raise ValueError("dataset has no pairs with distinct scores")
    order = rng.permutation(len(pairs))
    n_train = int(round(split_ratio * len(pairs)))
    train_all, test = pairs.take(order[:n_train]), pairs.take(order[n_train:])

    bins = assign_bins(train_all.gap, bin_width, n_bins)
    keep, shortfall = [], {}
    for b in range(n_bins):
        members = np.flatnonzero(bins == b)
        if len(members) >= quota:
            members = np.sort(rng.choice(members, size=quota, replace=False))
        else:
            shortfall[str(b)] = quota - len(members)
        keep.append(members)
    train = train_all.take(np.concatenate(keep))
    if shortfall:
        log.warning("under-filled gap bins (bin: missing pairs): %s", shortfall)
    c, h, w = dataset.latents.shape[2:]
    latents = dataset.latents.reshape(-1, c, h, w)
    embeddings = np.stack([p.embedding for p in dataset.prompts])
    return BalancedPairSet(latents, embeddings, train, test, bin_width, n_bins, quota, shortfall)


# --------------------------------------------------------------------------- #
# persistence
# --------------------------------------------------------------------------- #


def _prompt_meta(prompts: list[PromptSpec]) -> list[dict]:
    return [{"id": p.prompt_id, "label": p.label, "embedding": p.embedding.tolist()} for p in prompts]


def _prompts_from_meta(items: list[dict]) -> list[PromptSpec]:
    out = []
    for it in items:
        e = np.array(it["embedding"], dtype=float)
        out.append(PromptSpec(int(it["id"]), e, reference_splats(e), it["label"]))
    return out


def save_dataset(dataset: TripletDataset, path: str | Path) -> None:
    meta = {
        "prompts": _prompt_meta(dataset.prompts),
        "seeds": dataset.seeds.tolist(),
        "scores": dataset.scores.tolist(),
        "steps": dataset.steps,
        "t_capture": dataset.t_capture,
        "n": dataset.n_prompts,
        "m": dataset.per_prompt,
        "extra": dataset.meta,
    }
    container.save(path, "triplets", meta, {"latents": dataset.latents})


def load_dataset(path: str | Path) -> TripletDataset:
    manifest, arrays = container.load(path, "triplets")
    meta = manifest["meta"]
    try:
        latents = arrays["latents"]
        ds = TripletDataset(_prompts_from_meta(meta["prompts"]), np.array(meta["seeds"], dtype=np.int64),
                            np.array(meta["scores"], dtype=float), latents, int(meta["steps"]),
                            int(meta["t_capture"]), meta["extra"])
    except KeyError as exc:
        raise container.HeaderError(f"dataset manifest missing {exc}") from exc
    if ds.latents.shape[:2] != ds.seeds.shape or ds.scores.shape != ds.seeds.shape:
        raise container.HeaderError("dataset shapes inconsistent with manifest counts")
    return ds


def _split_meta(split: PairSplit) -> dict:
    return {"first": split.first.tolist(), "second": split.second.tolist(),
            "prompt": split.prompt.tolist(), "gap": split.gap.tolist()}


def _split_from_meta(d: dict) -> PairSplit:
    return PairSplit(np.array(d["first"], dtype=np.int64), np.array(d["second"], dtype=np.int64),
                     np.array(d["prompt"], dtype=np.int64), np.array(d["gap"], dtype=float))


def save_pairs(pairs: BalancedPairSet, path: str | Path) -> None:
    meta = {"train": _split_meta(pairs.train), "test": _split_meta(pairs.test),
            "embeddings": pairs.embeddings.tolist(), "bin_width": pairs.bin_width,
            "n_bins": pairs.n_bins, "quota": pairs.quota, "shortfall": pairs.shortfall}
    container.save(path, "pairs", meta, {"latents": pairs.latents})


def load_pairs(path: str | Path) -> BalancedPairSet:
    manifest, arrays = container.load(path, "pairs")
    m = manifest["meta"]
    try:
        return BalancedPairSet(arrays["latents"], np.array(m["embeddings"], dtype=float),
                               _split_from_meta(m["train"]), _split_from_meta(m["test"]),
                               float(m["bin_width"]), int(m["n_bins"]), int(m["quota"]), dict(m["shortfall"]))
    except KeyError as exc:
        raise container.HeaderError(f"pair manifest missing {exc}") from exc
