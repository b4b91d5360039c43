"""Orthographic multi-view splat rasterizer and post-denoising opacity correction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .latent import SplatSet

MIN_RENDER_SCALE = 1e-3
ALPHA_MIN = 1.0 / 255.0  # contributions below this are skipped, as in 3DGS
ALPHA_MAX = 0.99
CUTOFF_SQ = 9.0  # footprint truncated at 3 standard deviations


@dataclass(frozen=True)
class CameraMatrix:
    view_id: int
    extrinsic: np.ndarray  # (3, 4) world -> camera
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        rot = self.extrinsic[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")


def orbit_camera(view_id: int, azimuth_deg: float, elevation_deg: float = 0.0,
                 image_size: tuple[int, int] = (64, 64)) -> CameraMatrix:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    ry = np.array([[np.cos(az), 0.0, -np.sin(az)], [0.0, 1.0, 0.0], [np.sin(az), 0.0, np.cos(az)]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(el), -np.sin(el)], [0.0, np.sin(el), np.cos(el)]])
    ext = np.zeros((3, 4))
    ext[:, :3] = rx @ ry
    return CameraMatrix(view_id, ext, image_size)


def standard_cameras(image_size: tuple[int, int] = (64, 64)) -> list[CameraMatrix]:
    """Front, right, back and left views at zero elevation."""
    return [orbit_camera(i, az, 0.0, image_size) for i, az in enumerate((0.0, 90.0, 180.0, 270.0))]


def _project(splats: SplatSet, camera: CameraMatrix, idx: np.ndarray):
    cam = splats.positions[idx] @ camera.extrinsic[:, :3].T + camera.extrinsic[:, 3]
    # camera looks down -z: larger cam z is closer
    return cam[:, 0], cam[:, 1], -cam[:, 2]


def _footprint_windows(splats: SplatSet, camera: CameraMatrix, idx: np.ndarray):
    """Alpha of each primitive on a square pixel window around its center.

    Returns ``(alpha, rows0, cols0, depth)`` where ``alpha`` is ``(K, S, S)`` and
    ``rows0/cols0`` give each window's top-left pixel (possibly off-image).
    """
    h_img, w_img = camera.image_size
    px = 0.5 * np.array([w_img, h_img])  # pixels per scene unit (x, y)
    x, y, depth = _project(splats, camera, idx)
    sc = np.maximum(splats.scales[idx], MIN_RENDER_SCALE)
    reach = np.sqrt(CUTOFF_SQ) * sc.max(axis=1) * px.max()
    radius = int(min(np.ceil(reach.max()) + 1, max(h_img, w_img)))
    col_c = np.floor((x + 1.0) * px[0]).astype(int)
    row_c = np.floor((1.0 - y) * px[1]).astype(int)
    offs = np.arange(-radius, radius + 1)
    cols = col_c[:, None] + offs[None, :]
    rows = row_c[:, None] + offs[None, :]
    du = ((cols + 0.5) / px[0] - 1.0 - x[:, None])[:, None, :]
    dv = ((1.0 - (rows + 0.5) / px[1]) - y[:, None])[:, :, None]
    rot = splats.rotations[idx][:, None, None]
    c, s = np.cos(rot), np.sin(rot)
    u = c * du + s * dv
    v = -s * du + c * dv
    d2 = (u / sc[:, 0, None, None]) ** 2 + (v / sc[:, 1, None, None]) ** 2
    alpha = splats.opacities[idx][:, None, None] * np.exp(-0.5 * d2)
    alpha[d2 > CUTOFF_SQ] = 0.0
    alpha = np.minimum(alpha, ALPHA_MAX)
    alpha[alpha < ALPHA_MIN] = 0.0
    return alpha, rows[:, 0], cols[:, 0], depth


def render_view(splats: SplatSet, camera: CameraMatrix) -> np.ndarray:
    """Front-to-back composite over a black, transparent background -> (H, W, 4)."""
    h_img, w_img = camera.image_size
    rgb = np.zeros((h_img, w_img, 3))
    trans = np.ones((h_img, w_img))
    idx = np.flatnonzero(splats.opacities >= ALPHA_MIN)
    if idx.size:
        alpha, rows0, cols0, depth = _footprint_windows(splats, camera, idx)
        size = alpha.shape[1]
        colors = splats.colors[idx]
        for k in np.argsort(depth, kind="stable"):  # ties keep primitive index order
            r0, c0 = rows0[k], cols0[k]
            ra, rb = max(r0, 0), min(r0 + size, h_img)
            ca, cb = max(c0, 0), min(c0 + size, w_img)
            if ra >= rb or ca >= cb:
                continue
            a = alpha[k, ra - r0:rb - r0, ca - c0:cb - c0]
            t = trans[ra:rb, ca:cb]
            rgb[ra:rb, ca:cb] += (t * a)[:, :, None] * colors[k]
            t *= 1.0 - a
    out = np.empty((h_img, w_img, 4))
    out[..., :3] = rgb
    out[..., 3] = 1.0 - trans
    return np.clip(out, 0.0, 1.0)


def render(splats: SplatSet, cameras: list[CameraMatrix]) -> list[np.ndarray]:
    if not cameras:
        raise ValueError("need at least one camera")
    return [render_view(splats, cam) for cam in cameras]


def correct_opacity(splats: SplatSet, mask: np.ndarray) -> SplatSet:
    """Zero the opacity of every primitive whose grid cell is background (mask == 1)."""
    mask = np.asarray(mask)
    if mask.shape != splats.grid_shape:
        raise ValueError(f"mask shape {mask.shape} != splat grid {splats.grid_shape}")
    out = splats.copy()
    out.opacities[mask.reshape(-1).astype(bool)] = 0.0
    return out


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Binary P6 dump of the RGB channels."""
    rgb = np.clip(np.round(image[..., :3] * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_rgba_f32(image: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(image, dtype="<f4").tobytes())


def read_rgba_f32(path: str | Path, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(h, w, 4)
