"""End-to-end runs (baseline, +IM, +TR, +TRIM), cost accounting and experiment harness."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import container
from .latent import CountingDenoiser, Denoiser, DenoiserConfig, SplatSet, integrate, plain_velocity, sample_noise
from .masking import DEFAULT_TAU, MaskedDenoising, MaskSchedule, write_pbm
from .reduction import ReductionPlan, StepLedger, finish, reduced_inference
from .render import CameraMatrix, standard_cameras, write_ppm
from .selector import OracleSelector, SelectorModel
from .synth import PromptSpec, data_prior, evaluate, generate_prompts, reference_splats

log = logging.getLogger(__name__)

MODES = ("baseline", "+IM", "+TR", "+TRIM")
CSV_SCHEMA = 1
OPACITY_FLOOR = 0.01  # primitives below this are left out of point clouds


def build_denoiser(steps: int = 28, seed: int = 0) -> Denoiser:
    """The toy denoiser carrying the synthetic data prior."""
    return Denoiser(DenoiserConfig(steps=steps, seed=seed), data_prior())


# --------------------------------------------------------------------------- #
# config
# --------------------------------------------------------------------------- #


@dataclass
class RunConfig:
    mode: str = "baseline"
    n: int = 1
    steps: int = 28
    t: Optional[int] = None  # reduction step, defaults to steps // 2
    tau: float = DEFAULT_TAU
    mask_start: float = 0.5  # fraction of steps before masking may begin
    widths: Optional[list[int]] = None
    first_seed: int = 1
    prompt_index: int = 0
    prompt_count: int = 1
    prompt_seed: int = 0
    prompts_path: Optional[str] = None
    selector_path: Optional[str] = None
    denoiser_seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    correct: bool = True
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.image_size = tuple(self.image_size)
        if self.t is None:
            self.t = self.steps // 2

    @property
    def reduces(self) -> bool:
        return self.mode in ("+TR", "+TRIM")

    @property
    def masks(self) -> bool:
        return self.mode in ("+IM", "+TRIM")

    def validate(self, have_selector: bool = False) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.steps < 2:
            raise ValueError("need at least 2 steps")
        if self.reduces:
            if not 0 < self.t < self.steps:
                raise ValueError(f"reduction step {self.t} outside (0, {self.steps})")
            if self.selector_path is None and not have_selector:
                raise ValueError(f"mode {self.mode} needs a selector checkpoint")
        if not 0.0 <= self.mask_start <= 1.0:
            raise ValueError("mask_start must lie in [0, 1]")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict({**data, **{k: v for k, v in overrides.items() if v is not None}})

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    def schedule(self) -> MaskSchedule:
        return MaskSchedule.default(self.steps, start_fraction=self.mask_start, widths=self.widths)

    def hook_factory(self):
        if not self.masks:
            return None
        schedule, tau = self.schedule(), self.tau
        return lambda: MaskedDenoising(schedule, tau)


def load_prompts(path: str | Path) -> list[PromptSpec]:
    """Prompt list from JSON: ``[{"id": .., "label": .., "embedding": [...]}, ...]``."""
    items = json.loads(Path(path).read_text())
    out = []
    for it in items:
        e = np.array(it["embedding"], dtype=float)
        out.append(PromptSpec(int(it["id"]), e, reference_splats(e), it.get("label", "")))
    return out


def save_prompts(prompts: list[PromptSpec], path: str | Path) -> None:
    items = [{"id": p.prompt_id, "label": p.label, "embedding": p.embedding.tolist()} for p in prompts]
    Path(path).write_text(json.dumps(items, indent=1) + "\n")


def resolve_prompts(cfg: RunConfig) -> list[PromptSpec]:
    if cfg.prompts_path:
        return load_prompts(cfg.prompts_path)
    return generate_prompts(cfg.prompt_count, cfg.prompt_seed)


# --------------------------------------------------------------------------- #
# cost model
# --------------------------------------------------------------------------- #


def flops_model(k: int, config: DenoiserConfig = DenoiserConfig()) -> int:
    """Multiply-adds of one denoiser call over ``k`` tokens.

    Per block: attention ``4*K*C^2 + 2*K^2*C`` (qkv and output projections,
    scores and weighted sum) and MLP ``8*K*C^2`` (two layers, 4x hidden).
    The input embedding and the readout are left out.
    """
    if k < 1:
        raise ValueError("need at least one token")
    c = config.dim
    return config.blocks * (4 * k * c * c + 2 * k * k * c + 8 * k * c * c)


def count_block_macs(k: int, dim: int, heads: int = 1, blocks: int = 1) -> int:
    """Brute-force multiply-add count: run the block matmuls with a counting matmul."""
    total = 0

    def mm(a, b):
        nonlocal total
        total += a.shape[0] * a.shape[1] * b.shape[1]
        return a @ b

    rng = np.random.default_rng(0)
    x = rng.standard_normal((k, dim))
    hd = dim // heads
    for _ in range(blocks):
        q = mm(x, np.ones((dim, dim)))
        kk = mm(x, np.ones((dim, dim)))
        v = mm(x, np.ones((dim, dim)))
        ctx = np.empty((k, dim))
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            att = mm(q[:, sl], kk[:, sl].T)
            ctx[:, sl] = mm(att, v[:, sl])
        x = mm(ctx, np.ones((dim, dim)))
        hid = mm(x, np.ones((dim, 4 * dim)))
        x = mm(hid, np.ones((4 * dim, dim)))
    return total


def tr_flops_ratio(n: int, steps: int, t: int) -> float:
    """Denoising work of reduction relative to full best-of-N: ``(N*T - (N-1)*t) / (N*T)``."""
    if not 0 < t < steps:
        raise ValueError(f"t={t} outside (0, {steps})")
    if n < 1:
        raise ValueError("n must be >= 1")
    return (n * steps - (n - 1) * t) / (n * steps)


@dataclass
class CostReport:
    mode: str
    flops: int
    denoiser_calls: int
    decode_calls: int
    render_calls: int
    selector_comparisons: int
    seconds: float
    token_log: list[int] = field(default_factory=list, repr=False)

    @property
    def seconds_per_step(self) -> float:
        return self.seconds / max(self.denoiser_calls, 1)

    @property
    def steps_per_second(self) -> float:
        return self.denoiser_calls / self.seconds if self.seconds > 0 else float("inf")

    @classmethod
    def from_ledger(cls, mode: str, ledger: StepLedger, config: DenoiserConfig, seconds: float) -> "CostReport":
        flops = sum(flops_model(k, config) for k in ledger.token_log)
        return cls(mode, flops, ledger.denoiser_calls, ledger.decode_calls, ledger.render_calls,
                   ledger.selector_comparisons, seconds, list(ledger.token_log))

    def row(self, timing: bool = False) -> dict:
        r = {"mode": self.mode, "flops": self.flops, "denoiser_calls": self.denoiser_calls,
             "decode_calls": self.decode_calls, "render_calls": self.render_calls,
             "selector_comparisons": self.selector_comparisons}
        if timing:
            r["seconds_per_step"] = f"{self.seconds_per_step:.6g}"
            r["steps_per_second"] = f"{self.steps_per_second:.6g}"
        return r


def write_csv(path: str | Path, rows: list[dict], note: str = "") -> None:
    """CSV with a ``#`` comment header carrying the schema version and an optional note."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        fh.write(f"# trimsplat schema={CSV_SCHEMA}" + (f"; {note}" if note else "") + "\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


# --------------------------------------------------------------------------- #
# single run
# --------------------------------------------------------------------------- #


@dataclass
class RunResult:
    splats: SplatSet
    images: list[np.ndarray]
    score: float
    winner: int
    seed: int
    ledger: StepLedger
    cost: CostReport
    mask: Optional[np.ndarray] = None
    candidate_scores: Optional[list[float]] = None


def _best_of_n(cfg: RunConfig, prompt: PromptSpec, denoiser: Denoiser, cameras: list[CameraMatrix]):
    """Fully denoise N candidates, decode and render each, keep the best by the evaluator."""
    mc = denoiser.config
    counter = CountingDenoiser(denoiser)
    ledger = StepLedger()
    factory = cfg.hook_factory()
    best = None
    scores = []
    for i in range(cfg.n):
        seed = cfg.first_seed + i
        hook = factory() if factory else None
        noise = sample_noise(seed, (mc.channels, mc.height, mc.width))
        z0 = integrate(noise, counter, prompt.embedding, mc.steps, 0, hook)[-1][1]
        mask = hook.last_mask.cells if (hook is not None and cfg.correct and hook.last_mask is not None) else None
        splats, images = finish(z0, cameras, ledger, mask)
        score = evaluate(prompt, images, cameras)
        scores.append(score)
        if best is None or score > best[0]:
            best = (score, i, splats, images, mask)
    ledger.denoiser_calls = counter.calls
    ledger.token_log = list(counter.token_log)
    score, winner, splats, images, mask = best
    return splats, images, score, winner, ledger, mask, scores


def run(cfg: RunConfig, prompt: Optional[PromptSpec] = None, selector=None,
        denoiser: Optional[Denoiser] = None, cameras: Optional[list[CameraMatrix]] = None) -> RunResult:
    """Execute one generation in ``cfg.mode`` and, if ``cfg.out_dir`` is set, dump artifacts."""
    cfg.validate(have_selector=selector is not None)
    if cfg.reduces and selector is None:
        if not Path(cfg.selector_path).exists():
            raise FileNotFoundError(f"selector checkpoint {cfg.selector_path} not found")
        selector = SelectorModel.load(cfg.selector_path)
    denoiser = denoiser or build_denoiser(cfg.steps, cfg.denoiser_seed)
    if denoiser.config.steps != cfg.steps:
        raise ValueError("denoiser step count disagrees with the run config")
    prompt = prompt or resolve_prompts(cfg)[cfg.prompt_index]
    cameras = cameras or standard_cameras(cfg.image_size)

    start = time.perf_counter()
    if cfg.reduces:
        plan = ReductionPlan.make(cfg.n, cfg.steps, cfg.t, cfg.first_seed)
        res = reduced_inference(plan, selector, prompt.embedding, denoiser, cfg.hook_factory(), cameras,
                                prompt.prompt_id, cfg.correct)
        splats, images, winner, ledger, mask = res.splats, res.images, res.winner, res.ledger, res.mask
        score, cand = evaluate(prompt, images, cameras), None
    else:
        splats, images, score, winner, ledger, mask, cand = _best_of_n(cfg, prompt, denoiser, cameras)
    seconds = time.perf_counter() - start
    cost = CostReport.from_ledger(cfg.mode, ledger, denoiser.config, seconds)
    result = RunResult(splats, images, score, winner, cfg.first_seed + winner, ledger, cost, mask, cand)
    if cfg.out_dir:
        write_artifacts(result, cfg, Path(cfg.out_dir))
    return result


def write_artifacts(result: RunResult, cfg: RunConfig, out: Path) -> None:
    """Deterministic dumps: cost CSV, splat container, per-view PPMs, mask PBM, token log."""
    out.mkdir(parents=True, exist_ok=True)
    row = {**result.cost.row(), "score": f"{result.score:.6f}", "winner": result.winner, "seed": result.seed}
    write_csv(out / "cost.csv", [row])
    s = result.splats
    container.save(out / "splats.trim", "splats",
                   {"grid_shape": list(s.grid_shape), "score": result.score,
                    "config": {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}},
                   {"positions": s.positions, "scales": s.scales, "rotations": s.rotations,
                    "opacities": s.opacities, "colors": s.colors})
    for i, img in enumerate(result.images):
        write_ppm(img, out / f"view{i}.ppm")
    if result.mask is not None:
        write_pbm(result.mask, out / "mask.pbm")
    (out / "token_log.json").write_text(json.dumps(result.cost.token_log) + "\n")


# --------------------------------------------------------------------------- #
# throughput
# --------------------------------------------------------------------------- #


@dataclass
class ThroughputReport:
    masked_steps_per_s: float
    unmasked_steps_per_s: float
    mean_tokens: float
    full_tokens: int
    steps: int

    @property
    def speedup(self) -> float:
        return self.masked_steps_per_s / self.unmasked_steps_per_s


def measure_throughput(prompt: PromptSpec, denoiser: Denoiser, seed: int = 1, tau: float = DEFAULT_TAU,
                       repeats: int = 5) -> ThroughputReport:
    """Steps/s of masked vs plain denoising over the final (fully expanded) mask phase.

    Both paths replay the same latents; the masked time includes detection,
    merge and pad. The best of ``repeats`` passes is kept for each path.
    """
    cfg = denoiser.config
    schedule = MaskSchedule.default(cfg.steps)
    last_phase = schedule.phase_starts[-1]
    t_hi = cfg.steps - last_phase
    noise = sample_noise(seed, (cfg.channels, cfg.height, cfg.width))
    states = [(t, z) for t, z in integrate(noise, denoiser, prompt.embedding, cfg.steps, 0) if 0 < t <= t_hi]
    if not states:
        raise ValueError("no steps in the final mask phase")

    def timed(fn) -> float:
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            for t, z in states:
                fn(z, t)
            best = min(best, time.perf_counter() - t0)
        return best

    hook = MaskedDenoising(schedule, tau)
    plain = timed(lambda z, t: plain_velocity(z, t, denoiser, prompt.embedding))
    masked = timed(lambda z, t: hook(z, t, denoiser, prompt.embedding))
    tokens = hook.token_log[-len(states):]
    return ThroughputReport(len(states) / masked, len(states) / plain, float(np.mean(tokens)),
                            cfg.height * cfg.width, len(states))


# --------------------------------------------------------------------------- #
# experiments
# --------------------------------------------------------------------------- #


class TrajectoryOracle(OracleSelector):
    """Oracle comparator: scores an intermediate latent by finishing it and evaluating.

    Results are memoized on the latent bytes.
    """

    def __init__(self, prompt: PromptSpec, denoiser: Denoiser, t: int, cameras: list[CameraMatrix]):
        self._cache: dict[bytes, float] = {}

        def score(z):
            key = np.ascontiguousarray(z).tobytes()
            if key not in self._cache:
                z0 = integrate(z, denoiser, prompt.embedding, t, 0)[-1][1]
                splats, images = finish(z0, cameras, StepLedger())
                self._cache[key] = evaluate(prompt, images, cameras)
            return self._cache[key]

        super().__init__(score)


def _scaling_point(args) -> tuple[float, int]:
    axis, value, prompt, steps, t, den_seed, selector, cameras = args
    if axis == "trajectories":
        den = build_denoiser(steps, den_seed)
        model = selector if selector is not None else TrajectoryOracle(prompt, den, t, cameras)
        plan = ReductionPlan.make(value, steps, t)
        res = reduced_inference(plan, model, prompt.embedding, den, cameras=cameras, prompt_id=prompt.prompt_id)
        return evaluate(prompt, res.images, cameras), res.ledger.denoiser_calls
    den = build_denoiser(value, den_seed)
    cfg = RunConfig(mode="baseline", n=1, steps=value, denoiser_seed=den_seed)
    res = run(cfg, prompt, denoiser=den, cameras=cameras)
    return res.score, res.ledger.denoiser_calls


def scaling_experiment(axis: str, grid: list[int], prompts: list[PromptSpec], steps: int = 10,
                       t: Optional[int] = None, selector=None, denoiser_seed: int = 0,
                       cameras: Optional[list[CameraMatrix]] = None, workers: int = 1) -> list[dict]:
    """Mean evaluator score per grid point over ``prompts``.

    ``axis="trajectories"``: +TR with N candidates at ``steps`` total steps
    (an oracle comparator when ``selector`` is None). ``axis="steps"``: a
    single trajectory with the given step count. Rows carry the axis value,
    denoiser calls per prompt, and score mean and std.
    """
    if axis not in ("trajectories", "steps"):
        raise ValueError(f"unknown axis {axis!r}")
    if not grid or any(v < 1 for v in grid):
        raise ValueError("grid values must be positive")
    cameras = cameras or standard_cameras()
    t = steps // 2 if t is None else t
    jobs = [(axis, v, p, steps, t, denoiser_seed, selector, cameras) for v in grid for p in prompts]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scaling_point, jobs))
    else:
        results = [_scaling_point(j) for j in jobs]
    rows = []
    for i, v in enumerate(grid):
        chunk = results[i * len(prompts):(i + 1) * len(prompts)]
        scores = np.array([s for s, _ in chunk])
        rows.append({"axis": axis, "value": v, "total_steps": chunk[0][1],
                     "score_mean": float(scores.mean()), "score_std": float(scores.std())})
        log.info("%s=%d: mean %.4f std %.4f", axis, v, scores.mean(), scores.std())
    return rows


def point_cloud(splats: SplatSet, floor: float = OPACITY_FLOOR) -> np.ndarray:
    return splats.positions[splats.opacities > floor]


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared nearest-neighbour distances in both directions (not normalized)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Chamfer distance between an empty and a non-empty cloud is undefined")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.sum(d_ab**2) + np.sum(d_ba**2))


@dataclass
class DiversityReport:
    repeats: int
    score_mean: float
    score_std: float
    chamfer_avg: float
    chamfer_min: float
    chamfer_max: float
    distances: list[float] = field(repr=False, default_factory=list)


def diversity_report(splats: list[SplatSet], scores: list[float]) -> DiversityReport:
    if len(splats) < 2:
        raise ValueError("need at least 2 generations")
    clouds = [point_cloud(s) for s in splats]
    dists = [chamfer_distance(clouds[i], clouds[j]) for i, j in combinations(range(len(clouds)), 2)]
    return DiversityReport(len(splats), float(np.mean(scores)), float(np.std(scores)),
                           float(np.mean(dists)), float(np.min(dists)), float(np.max(dists)), dists)


def diversity_experiment(prompt: PromptSpec, repeats: int, selector=None, n: int = 4, steps: int = 28,
                         t: Optional[int] = None, denoiser: Optional[Denoiser] = None,
                         cameras: Optional[list[CameraMatrix]] = None, seed_offset: int = 0
                         ) -> tuple[DiversityReport, Optional[DiversityReport]]:
    """``repeats`` independent generations without and (if a selector is given) with TR.

    Without TR repeat ``r`` uses seed ``seed_offset + r*n + 1``; with TR it
    draws candidates from seeds ``seed_offset + r*n + 1 .. seed_offset + (r+1)*n``,
    so the plain runs are the first candidate of each TR bracket.
    """
    if repeats < 2:
        raise ValueError("need at least 2 repeats")
    denoiser = denoiser or build_denoiser(steps)
    cameras = cameras or standard_cameras()
    plain, with_tr = ([], []), ([], [])
    for r in range(repeats):
        first = seed_offset + r * n + 1
        res = run(RunConfig(mode="baseline", n=1, steps=steps, first_seed=first), prompt,
                  denoiser=denoiser, cameras=cameras)
        plain[0].append(res.splats)
        plain[1].append(res.score)
        if selector is not None:
            res = run(RunConfig(mode="+TR", n=n, steps=steps, t=t, first_seed=first), prompt, selector,
                      denoiser, cameras)
            with_tr[0].append(res.splats)
            with_tr[1].append(res.score)
    return diversity_report(*plain), (diversity_report(*with_tr) if selector is not None else None)
