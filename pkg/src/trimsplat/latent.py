"""Token-grid latents, the toy transformer denoiser and the Euler flow sampler.

A latent is a ``(C, H, W)`` float array. Each of the ``H*W`` grid cells is a
token; its ``C`` values decode to one Gaussian primitive. Timestep indices run
from ``T`` (pure noise, sigma = 1) down to ``0`` (clean latent, sigma = 0) on a
linear schedule, and the sampler updates ``z[t-1] = z[t] + (sigma[t-1] - sigma[t]) * v``.

Channel layout (fixed)::

    0:3   position  -> tanh            in [-1, 1]
    3:5   scale     -> SCALE_UNIT * softplus
    5     rotation  -> identity        radians
    6     opacity   -> logistic        in [0, 1]
    7:10  color     -> logistic        in [0, 1]
    10    spare     (unused by the decoder)
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

CHANNELS = 11
GRID = 16
MIN_DECODE_CHANNELS = 10
SCALE_UNIT = 0.05
MIN_SCALE = 1e-9

POS = slice(0, 3)
SCALE = slice(3, 5)
ROT = 5
OPACITY = 6
COLOR = slice(7, 10)


# --------------------------------------------------------------------------- #
# grids and token sequences
# --------------------------------------------------------------------------- #


def sample_noise(seed: int, shape: tuple[int, int, int] = (CHANNELS, GRID, GRID)) -> np.ndarray:
    """Standard-normal latent drawn from a PCG64 stream keyed by ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal(shape)


def check_grid(z: np.ndarray) -> None:
    if z.ndim != 3:
        raise ValueError(f"latent grid must be (C, H, W), got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent grid contains non-finite values")


@dataclass(frozen=True)
class TokenSequence:
    """``K`` tokens of width ``C`` plus their grid position ids.

    Position ids are row-major cell indices ``i*W + j``; the merged background
    token carries the reserved id ``H*W``.
    """

    data: np.ndarray
    positions: np.ndarray
    grid_shape: tuple[int, int]

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.positions.shape[0]:
            raise ValueError("data must be (K, C) with one position per token")
        k = self.data.shape[0]
        h, w = self.grid_shape
        if k < 1 or k > h * w + 1:
            raise ValueError(f"token count {k} outside [1, {h * w + 1}]")
        if self.positions.min() < 0 or self.positions.max() > h * w:
            raise ValueError("token position out of range")
        if np.bincount(self.positions, minlength=h * w + 1).max() > 1:
            raise ValueError("token positions must be unique")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def bg_position(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def has_bg(self) -> bool:
        return bool(self.positions[-1] == self.bg_position)


def flatten(z: np.ndarray) -> TokenSequence:
    c, h, w = z.shape
    data = z.reshape(c, h * w).T.copy()
    return TokenSequence(data, np.arange(h * w), (h, w))


def unflatten(seq: TokenSequence) -> np.ndarray:
    h, w = seq.grid_shape
    if len(seq) != h * w or seq.has_bg:
        raise ValueError("only a full, unmerged sequence maps back to a grid")
    out = np.empty((seq.data.shape[1], h * w), dtype=seq.data.dtype)
    out[:, seq.positions] = seq.data.T
    return out.reshape(-1, h, w)


# --------------------------------------------------------------------------- #
# denoiser
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DenoiserConfig:
    steps: int = 28
    dim: int = 32
    heads: int = 2
    blocks: int = 1
    seed: int = 0
    channels: int = CHANNELS
    height: int = GRID
    width: int = GRID
    prompt_dim: int = 16
    residual_scale: float = 0.05

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("need at least 2 denoising steps")
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide dim={self.dim}")
        if self.blocks < 1:
            raise ValueError("need at least one attention block")

    def sigma(self, t: int) -> float:
        return t / self.steps


class GaussianPrior:
    """Closed-form flow velocity for a Gaussian data distribution over tokens.

    Data for a prompt is ``x = mean[pos] + spread * e + loadings[pos] @ g``
    with ``e`` independent per token and channel and ``g ~ N(0, I)`` a small
    vector of per-sample factors shared by all tokens (global shifts, size).
    With ``z = sigma*eps + (1-sigma)*x`` the regression target
    ``E[eps - x | z]`` is affine in ``z``; the shared factors make it a
    low-rank update solved with the Woodbury identity.

    ``mean_fn`` maps a prompt embedding to a ``(H*W + 1, C)`` table and
    ``loading_fn`` (optional) to ``(H*W + 1, C, G)``; the last row belongs to
    the merged background token.
    """

    def __init__(self, mean_fn: Callable[[np.ndarray], np.ndarray], spread: np.ndarray,
                 loading_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        self.spread = np.asarray(spread, dtype=float)
        self._mean_fn = mean_fn
        self._loading_fn = loading_fn
        self._means = functools.lru_cache(maxsize=512)(self._table_from_bytes("_mean_fn"))
        self._loadings = functools.lru_cache(maxsize=512)(self._table_from_bytes("_loading_fn"))

    def _table_from_bytes(self, attr: str):
        def build(raw: bytes) -> np.ndarray:
            table = np.asarray(getattr(self, attr)(np.frombuffer(raw, dtype=float)), dtype=float)
            table.setflags(write=False)
            return table
        return build

    @staticmethod
    def _key(embed: np.ndarray) -> bytes:
        return np.ascontiguousarray(embed, dtype=float).tobytes()

    def means(self, embed: np.ndarray) -> np.ndarray:
        return self._means(self._key(embed))

    def loadings(self, embed: np.ndarray) -> Optional[np.ndarray]:
        return None if self._loading_fn is None else self._loadings(self._key(embed))

    def velocity(self, data: np.ndarray, positions: np.ndarray, sigma: float, embed: np.ndarray) -> np.ndarray:
        mu = self.means(embed)[positions]
        a, b = sigma, 1.0 - sigma
        d = np.broadcast_to(self.spread**2, data.shape)
        m = a * a + b * b * d  # diagonal of Cov(z)
        r = data - b * mu
        table = self.loadings(embed)
        if table is None or not table.any():
            return (a - b * d) * r / m - mu
        load = table[positions].reshape(-1, table.shape[-1])  # (K*C, G)
        u = b * load
        mi = 1.0 / m.reshape(-1)
        rv = mi * r.reshape(-1)
        cap = np.eye(u.shape[1]) + (u.T * mi) @ u
        w = rv - mi * (u @ np.linalg.solve(cap, u.T @ rv))  # Cov(z)^-1 r
        v = a * w - b * (d.reshape(-1) * w + load @ (load.T @ w))
        return v.reshape(data.shape) - mu


def _layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    # same arithmetic as mean/var, without their per-call overhead
    n = x.shape[-1]
    d = x - np.add.reduce(x, axis=-1, keepdims=True) / n
    var = np.add.reduce(d * d, axis=-1, keepdims=True) / n
    return d / np.sqrt(var + eps)


def _softmax(x: np.ndarray) -> np.ndarray:
    # in place: x is a temporary owned by the caller
    x -= x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def time_embedding(sigma: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    angles = 1000.0 * sigma * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class Denoiser:
    """Pre-norm transformer over a token sequence, predicting flow velocity.

    Weights are drawn once from ``config.seed`` and never mutated. The output
    is ``prior_gain * prior_velocity + readout(transformer(tokens))``; the
    transformer readout is scaled by ``config.residual_scale``.
    """

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), prior: Optional[GaussianPrior] = None,
                 prior_gain: float = 1.0):
        self.config = config
        self.prior = prior
        self.prior_gain = prior_gain if prior is not None else 0.0
        rng = np.random.Generator(np.random.PCG64(config.seed))
        c, d, p = config.channels, config.dim, config.prompt_dim

        def init(fan_in, *shape):
            return rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)

        self.w_in = init(c + p, c + p, d)
        self.b_in = np.zeros(d)
        self.pos_table = 0.5 * rng.standard_normal((config.height * config.width + 1, d))
        self.blocks = []
        for _ in range(config.blocks):
            self.blocks.append({
                "w_qkv": init(d, d, 3 * d),
                "w_o": init(d, d, d),
                "w_1": init(d, d, 4 * d),
                "b_1": np.zeros(4 * d),
                "w_2": init(4 * d, 4 * d, d),
                "b_2": np.zeros(d),
            })
        self.w_out = config.residual_scale * init(d, d, c)
        self.b_out = np.zeros(c)
        for arr in self._arrays():
            arr.setflags(write=False)

    def _arrays(self):
        yield from (self.w_in, self.b_in, self.pos_table, self.w_out, self.b_out)
        for blk in self.blocks:
            yield from blk.values()

    @classmethod
    def constant(cls, velocity: np.ndarray, config: DenoiserConfig = DenoiserConfig()) -> "Denoiser":
        """A denoiser whose output is ``velocity`` for every token and step."""
        den = cls(config)
        den.w_out = np.zeros_like(den.w_out)
        den.b_out = np.asarray(velocity, dtype=float).copy()
        return den

    def _block(self, x: np.ndarray, blk: dict) -> np.ndarray:
        k, d = x.shape
        nh = self.config.heads
        hd = d // nh
        qkv = _layer_norm(x) @ blk["w_qkv"]
        q, kk, v = (qkv[:, i * d:(i + 1) * d].reshape(k, nh, hd).transpose(1, 0, 2) for i in range(3))
        att = _softmax(q @ kk.transpose(0, 2, 1) / np.sqrt(hd))
        ctx = (att @ v).transpose(1, 0, 2).reshape(k, d)
        x = x + ctx @ blk["w_o"]
        hdn = np.maximum(_layer_norm(x) @ blk["w_1"] + blk["b_1"], 0.0)
        return x + hdn @ blk["w_2"] + blk["b_2"]

    def step(self, tokens: TokenSequence, t: int, prompt_embed: np.ndarray) -> TokenSequence:
        cfg = self.config
        if not 0 < t <= cfg.steps:
            raise ValueError(f"timestep {t} outside (0, {cfg.steps}]")
        data = tokens.data
        if data.shape[1] != cfg.channels:
            raise ValueError(f"token width {data.shape[1]} != denoiser channels {cfg.channels}")
        embed = np.asarray(prompt_embed, dtype=float)
        if embed.shape != (cfg.prompt_dim,):
            raise ValueError(f"prompt embedding must have length {cfg.prompt_dim}")
        sigma = cfg.sigma(t)

        inp = np.concatenate([data, np.broadcast_to(embed, (len(tokens), cfg.prompt_dim))], axis=1)
        x = inp @ self.w_in + self.b_in + self.pos_table[tokens.positions] + time_embedding(sigma, cfg.dim)
        for blk in self.blocks:
            x = self._block(x, blk)
        out = _layer_norm(x) @ self.w_out + self.b_out
        if self.prior_gain:
            out = out + self.prior_gain * self.prior.velocity(data, tokens.positions, sigma, embed)
        return TokenSequence(out, tokens.positions, tokens.grid_shape)


def denoise_step(denoiser: Denoiser, tokens: TokenSequence, t: int, prompt_embed: np.ndarray) -> TokenSequence:
    return denoiser.step(tokens, t, prompt_embed)


class CountingDenoiser:
    """Wraps a denoiser and logs the token count of every call."""

    def __init__(self, inner: Denoiser):
        self.inner = inner
        self.config = inner.config
        self.token_log: list[int] = []

    @property
    def calls(self) -> int:
        return len(self.token_log)

    def step(self, tokens: TokenSequence, t: int, prompt_embed: np.ndarray) -> TokenSequence:
        self.token_log.append(len(tokens))
        return self.inner.step(tokens, t, prompt_embed)


# --------------------------------------------------------------------------- #
# sampler
# --------------------------------------------------------------------------- #


@dataclass
class Trajectory:
    seed: int
    prompt_id: int
    states: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def indices(self) -> list[int]:
        return [t for t, _ in self.states]

    def at(self, t: int) -> np.ndarray:
        for idx, z in self.states:
            if idx == t:
                return z
        raise KeyError(f"timestep {t} not recorded")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1][1]


# (z, t, denoiser, prompt_embed) -> velocity grid
StepHook = Callable[[np.ndarray, int, object, np.ndarray], np.ndarray]


def plain_velocity(z: np.ndarray, t: int, denoiser, prompt_embed: np.ndarray) -> np.ndarray:
    return unflatten(denoiser.step(flatten(z), t, prompt_embed))


def integrate(z: np.ndarray, denoiser, prompt_embed: np.ndarray, start: int, stop: int = 0,
              mask_hook: Optional[StepHook] = None) -> list[tuple[int, np.ndarray]]:
    """Euler-integrate from timestep ``start`` down to ``stop``.

    Returns the visited states including the initial one.
    """
    cfg = denoiser.config
    if not 0 <= stop < start <= cfg.steps:
        raise ValueError(f"need 0 <= stop < start <= {cfg.steps}, got start={start} stop={stop}")
    hook = mask_hook or plain_velocity
    states = [(start, z)]
    for t in range(start, stop, -1):
        v = hook(z, t, denoiser, prompt_embed)
        z = z + (cfg.sigma(t - 1) - cfg.sigma(t)) * v
        states.append((t - 1, z))
    return states


def euler_sampler(noise: np.ndarray, prompt_embed: np.ndarray, denoiser, mask_hook: Optional[StepHook] = None,
                  seed: int = -1, prompt_id: int = -1, stop: int = 0) -> Trajectory:
    check_grid(noise)
    steps = denoiser.config.steps
    return Trajectory(seed, prompt_id, integrate(noise, denoiser, prompt_embed, steps, stop, mask_hook))


# --------------------------------------------------------------------------- #
# decoder
# --------------------------------------------------------------------------- #


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


class SplatPrimitive(NamedTuple):
    position: np.ndarray
    scale: np.ndarray
    rotation: float
    opacity: float
    color: np.ndarray


@dataclass
class SplatSet:
    """One Gaussian primitive per grid cell, row-major."""

    positions: np.ndarray  # (K, 3)
    scales: np.ndarray  # (K, 2)
    rotations: np.ndarray  # (K,)
    opacities: np.ndarray  # (K,)
    colors: np.ndarray  # (K, 3)
    grid_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.opacities.shape[0]

    def __getitem__(self, i: int) -> SplatPrimitive:
        return SplatPrimitive(self.positions[i], self.scales[i], float(self.rotations[i]),
                              float(self.opacities[i]), self.colors[i])

    def copy(self) -> "SplatSet":
        return SplatSet(self.positions.copy(), self.scales.copy(), self.rotations.copy(),
                        self.opacities.copy(), self.colors.copy(), self.grid_shape)

    def subset(self, keep: np.ndarray) -> "SplatSet":
        """Same layout with every primitive outside ``keep`` made transparent."""
        out = self.copy()
        out.opacities[~np.asarray(keep, dtype=bool)] = 0.0
        return out

    def equals(self, other: "SplatSet") -> bool:
        return self.grid_shape == other.grid_shape and all(
            np.array_equal(a, b) for a, b in zip(self._fields(), other._fields()))

    def _fields(self):
        return (self.positions, self.scales, self.rotations, self.opacities, self.colors)


def decode_splats(z0: np.ndarray) -> SplatSet:
    c, h, w = z0.shape
    if c < MIN_DECODE_CHANNELS:
        raise ValueError(f"decoder needs >= {MIN_DECODE_CHANNELS} channels, got {c}")
    tok = z0.reshape(c, h * w).T
    return SplatSet(
        positions=np.tanh(tok[:, POS]),
        scales=np.maximum(SCALE_UNIT * np.logaddexp(0.0, tok[:, SCALE]), MIN_SCALE),
        rotations=tok[:, ROT].copy(),
        opacities=_sigmoid(tok[:, OPACITY]),
        colors=_sigmoid(tok[:, COLOR]),
        grid_shape=(h, w),
    )


def encode_splats(splats: SplatSet, channels: int = CHANNELS, spare: float = 0.0) -> np.ndarray:
    """Inverse of :func:`decode_splats` (values clipped away from the saturated ends)."""
    h, w = splats.grid_shape
    eps = 1e-6
    tok = np.full((h * w, channels), spare, dtype=float)
    tok[:, POS] = np.arctanh(np.clip(splats.positions, -1 + eps, 1 - eps))
    s = np.maximum(splats.scales / SCALE_UNIT, eps)
    tok[:, SCALE] = s + np.log(-np.expm1(-s))
    tok[:, ROT] = splats.rotations
    tok[:, OPACITY] = _logit(np.clip(splats.opacities, eps, 1 - eps))
    tok[:, COLOR] = _logit(np.clip(splats.colors, eps, 1 - eps))
    return tok.T.reshape(channels, h, w)
