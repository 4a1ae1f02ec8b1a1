"""Tile-based Gaussian splatting: projection, compositing, and gradients.

Two render paths share one projection routine:

* ``render`` — the production path: splats are binned into fixed-size screen
  tiles by their screen-space footprint, composited front to back per pixel
  with early termination.
* ``render_reference`` — the correctness oracle: every depth-valid splat is
  composited at every pixel in float64 with no tiling and no early exits.

``render_backward`` provides exact reverse-mode gradients of the production
path with respect to every splat parameter (position, rotation, scale,
opacity, SH coefficients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core_math as cm
from .avatar import SplatFrame
from .core_math import InvalidInputError

__all__ = [
    "Camera",
    "RenderSettings",
    "Splat2D",
    "RenderedImage",
    "SplatGrads",
    "project_gaussian",
    "render",
    "render_with_ctx",
    "render_backward",
    "render_reference",
]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    w2c: np.ndarray  # (4, 4) rigid world-to-camera
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.w2c = np.asarray(self.w2c, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.near <= 0 or self.far <= self.near:
            raise InvalidInputError("require 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class RenderSettings:
    """Rasterizer tuning knobs.

    The production preset keeps the classic splatting shortcuts (1/255 alpha
    cutoff, 1e-4 transmittance floor, 3σ footprints). ``exact64`` disables
    every shortcut and widens footprints so the tiled output is comparable to
    the brute-force reference at 1e-5.
    """

    tile_size: int = 16
    eps2d: float = 0.3
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    footprint_sigma: float = 3.0
    dtype: type = np.float32

    @classmethod
    def production(cls) -> "RenderSettings":
        return cls()

    @classmethod
    def exact64(cls) -> "RenderSettings":
        return cls(
            alpha_cutoff=0.0,
            transmittance_floor=0.0,
            footprint_sigma=8.0,
            dtype=np.float64,
        )

    @property
    def alpha_limit(self) -> float:
        # compositing divides by (1 - alpha'); keep it strictly below 1
        return 1.0 - 1e-6 if self.dtype == np.float32 else 1.0 - 1e-12


@dataclass
class Splat2D:
    mean: np.ndarray  # (2,) pixels
    cov: np.ndarray  # (2, 2) pixels^2, dilated
    depth: float
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))


@dataclass
class RenderedImage:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W) residual background visibility
    skipped_splats: int = 0  # non-invertible 2D covariances dropped


@dataclass
class SplatGrads:
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)


# ---------------------------------------------------------------------------
# projection


def _project_means_covs(mu, cov, cam: Camera, settings: RenderSettings):
    """Project world means/covariances; returns per-splat screen quantities.

    Culling decisions: depth outside (near, far), non-invertible 2D
    covariance (tallied), or a footprint_sigma footprint missing the image.
    """
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    w = cam.rotation
    t = mu @ w.T + cam.translation
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    depth_ok = (tz > cam.near) & (tz < cam.far)

    with np.errstate(divide="ignore", invalid="ignore"):
        mean_x = cam.fx * tx / tz + cam.cx
        mean_y = cam.fy * ty / tz + cam.cy

    n = len(mu)
    j = np.zeros((n, 2, 3))
    safe_tz = np.where(depth_ok, tz, 1.0)
    j[:, 0, 0] = cam.fx / safe_tz
    j[:, 0, 2] = -cam.fx * tx / safe_tz**2
    j[:, 1, 1] = cam.fy / safe_tz
    j[:, 1, 2] = -cam.fy * ty / safe_tz**2

    cov_cam = np.einsum("ij,njk,lk->nil", w, cov, w)
    cov2d = np.einsum("nij,njk,nlk->nil", j, cov_cam, j)
    cov2d[:, 0, 0] += settings.eps2d
    cov2d[:, 1, 1] += settings.eps2d

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    invertible = det > 0
    skipped = int(np.count_nonzero(depth_ok & ~invertible))

    safe_det = np.where(invertible, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=-1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = settings.footprint_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    on_screen = (
        (mean_x + radius > 0)
        & (mean_x - radius < cam.width)
        & (mean_y + radius > 0)
        & (mean_y - radius < cam.height)
    )
    keep = depth_ok & invertible & on_screen
    return {
        "t": t,
        "j": j,
        "cov_cam": cov_cam,
        "cov2d": cov2d,
        "mean2d": np.stack([mean_x, mean_y], axis=-1),
        "conic": conic,
        "det": det,
        "depth": tz,
        "radius": radius,
        "keep": keep,
        "depth_ok": depth_ok,
        "invertible": invertible,
        "skipped": skipped,
    }


def project_gaussian(mu, cov, cam: Camera, settings: RenderSettings | None = None):
    """Project one Gaussian; returns a Splat2D or None when culled."""
    settings = settings or RenderSettings.production()
    cov = np.asarray(cov, dtype=np.float64)
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise InvalidInputError("covariance must be symmetric")
    p = _project_means_covs(np.asarray(mu, float)[None], cov[None], cam, settings)
    if not p["keep"][0]:
        return None
    return Splat2D(mean=p["mean2d"][0], cov=p["cov2d"][0], depth=float(p["depth"][0]))


def _splat_colors(frame: SplatFrame, cam: Camera):
    """Per-splat RGB via SH evaluated along the camera-to-splat direction."""
    rel = frame.positions - cam.center
    dist = np.linalg.norm(rel, axis=1, keepdims=True)
    dirs = rel / np.maximum(dist, 1e-12)
    raw = cm.sh_eval_raw(frame.sh, dirs) + 0.5
    return np.maximum(raw, 0.0), raw, dirs, dist[:, 0]


def _project_frame(frame: SplatFrame, cam: Camera, settings: RenderSettings):
    cov = cm.covariance_from_qs(frame.rotations, frame.scales)
    proj = _project_means_covs(frame.positions, cov, cam, settings)
    color, color_raw, dirs, dist = _splat_colors(frame, cam)
    proj.update({"color": color, "color_raw": color_raw, "dirs": dirs, "dist": dist, "cov3d": cov})
    return proj


def _sorted_kept(proj):
    keep_idx = np.nonzero(proj["keep"])[0]
    order = np.lexsort((keep_idx, proj["depth"][keep_idx]))
    return keep_idx[order]


# ---------------------------------------------------------------------------
# tiled forward


def _tile_pairs(mean2d, radius, order, cam: Camera, ts: int):
    """(tile_id, rank) pairs for every tile a splat's footprint bbox touches."""
    ntx = (cam.width + ts - 1) // ts
    nty = (cam.height + ts - 1) // ts
    mx, my = mean2d[order, 0], mean2d[order, 1]
    r = radius[order]
    x0 = np.clip(np.floor((mx - r) / ts).astype(np.int64), 0, ntx)
    x1 = np.clip(np.floor((mx + r) / ts).astype(np.int64) + 1, 0, ntx)
    y0 = np.clip(np.floor((my - r) / ts).astype(np.int64), 0, nty)
    y1 = np.clip(np.floor((my + r) / ts).astype(np.int64) + 1, 0, nty)
    counts = np.maximum(x1 - x0, 0) * np.maximum(y1 - y0, 0)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), ntx, nty
    ranks = np.repeat(np.arange(len(mx)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(total) - np.repeat(starts, counts)
    widths = np.maximum(x1 - x0, 1)
    tile_x = np.repeat(x0, counts) + within % np.repeat(widths, counts)
    tile_y = np.repeat(y0, counts) + within // np.repeat(widths, counts)
    tile_id = tile_y * ntx + tile_x
    sort = np.lexsort((ranks, tile_id))
    return tile_id[sort], ranks[sort], ntx, nty


def _tile_pixels(tile, ntx, ts, cam: Camera, dtype):
    tx, ty = tile % ntx, tile // ntx
    x0, y0 = tx * ts, ty * ts
    w = min(ts, cam.width - x0)
    h = min(ts, cam.height - y0)
    px = (x0 + np.arange(w) + 0.5).astype(dtype)
    py = (y0 + np.arange(h) + 0.5).astype(dtype)
    pxg, pyg = np.meshgrid(px, py, indexing="xy")
    return x0, y0, w, h, pxg.ravel(), pyg.ravel()


def _composite_weights(alpha, floor):
    """Front-to-back weights w_j = alpha_j * T_before_j with termination.

    Returns (weights, T_before, included, T_final).
    """
    om = 1.0 - alpha
    t_after = np.cumprod(om, axis=0)
    t_before = np.vstack([np.ones((1, alpha.shape[1]), dtype=alpha.dtype), t_after[:-1]])
    included = t_before >= floor if floor > 0 else np.ones_like(t_before, dtype=bool)
    count = included.sum(axis=0)
    t_stack = np.vstack([np.ones((1, alpha.shape[1]), dtype=alpha.dtype), t_after])
    t_final = t_stack[count, np.arange(alpha.shape[1])]
    weights = alpha * t_before * included
    return weights, t_before, included, t_final


def render(frame: SplatFrame, cam: Camera, background=(0.0, 0.0, 0.0),
           settings: RenderSettings | None = None) -> RenderedImage:
    img, _ = render_with_ctx(frame, cam, background, settings)
    return img


def render_with_ctx(frame: SplatFrame, cam: Camera, background=(0.0, 0.0, 0.0),
                    settings: RenderSettings | None = None):
    """Tiled forward pass; the returned ctx feeds render_backward."""
    settings = settings or RenderSettings.production()
    dt = settings.dtype
    bg = np.asarray(background, dtype=dt)
    image = np.empty((cam.height, cam.width, 3), dtype=dt)
    image[:] = bg
    transmittance = np.ones((cam.height, cam.width), dtype=dt)

    ctx = {"frame": frame, "cam": cam, "settings": settings, "background": bg}
    if frame.count == 0:
        ctx.update({"proj": None, "order": np.empty(0, np.int64)})
        return RenderedImage(image, transmittance, 0), ctx

    proj = _project_frame(frame, cam, settings)
    order = _sorted_kept(proj)
    tile_ids, ranks, ntx, nty = _tile_pairs(proj["mean2d"], proj["radius"], order, cam, settings.tile_size)
    ctx.update({"proj": proj, "order": order, "tile_ids": tile_ids, "ranks": ranks, "ntx": ntx})

    mean2d = proj["mean2d"][order].astype(dt)
    conic = proj["conic"][order].astype(dt)
    opa = np.asarray(frame.opacities, dtype=dt)[order]
    color = proj["color"][order].astype(dt)

    bounds = np.searchsorted(tile_ids, np.arange(ntx * nty + 1))
    for tile in np.unique(tile_ids):
        lo, hi = bounds[tile], bounds[tile + 1]
        ids = ranks[lo:hi]
        x0, y0, w, h, px, py = _tile_pixels(int(tile), ntx, settings.tile_size, cam, dt)
        dx = px[None, :] - mean2d[ids, 0, None]
        dy = py[None, :] - mean2d[ids, 1, None]
        power = -0.5 * (
            conic[ids, 0, None] * dx * dx
            + 2.0 * conic[ids, 1, None] * dx * dy
            + conic[ids, 2, None] * dy * dy
        )
        alpha = opa[ids, None] * np.exp(np.minimum(power, 0.0))
        alpha = np.minimum(alpha, dt(settings.alpha_limit))
        if settings.alpha_cutoff > 0:
            alpha[alpha < settings.alpha_cutoff] = 0.0
        weights, _, _, t_final = _composite_weights(alpha, dt(settings.transmittance_floor))
        tile_img = weights.T @ color[ids] + t_final[:, None] * bg
        image[y0 : y0 + h, x0 : x0 + w] = tile_img.reshape(h, w, 3)
        transmittance[y0 : y0 + h, x0 : x0 + w] = t_final.reshape(h, w)

    return RenderedImage(image, transmittance, proj["skipped"]), ctx


# ---------------------------------------------------------------------------
# backward


def render_backward(ctx, grad_image) -> SplatGrads:
    """Reverse-mode gradients of the tiled forward pass.

    Recomputes per-tile compositing from the saved projection and sort rather
    than storing per-pixel contribution lists.
    """
    if ctx is None or "proj" not in ctx:
        raise InvalidInputError("render_backward needs the ctx saved by render_with_ctx")
    frame: SplatFrame = ctx["frame"]
    cam: Camera = ctx["cam"]
    settings: RenderSettings = ctx["settings"]
    n = frame.count
    zero = SplatGrads(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        scales=np.zeros((n, 3)),
        opacities=np.zeros(n),
        sh=np.zeros((n, 16, 3)),
    )
    if ctx["proj"] is None or len(ctx["order"]) == 0:
        return zero

    proj = ctx["proj"]
    order = ctx["order"]
    tile_ids, ranks, ntx = ctx["tile_ids"], ctx["ranks"], ctx["ntx"]
    dt = settings.dtype
    grad_image = np.asarray(grad_image, dtype=np.float64)
    bg = ctx["background"].astype(np.float64)

    mean2d = proj["mean2d"][order].astype(dt)
    conic = proj["conic"][order].astype(dt)
    opa = np.asarray(frame.opacities, dtype=dt)[order]
    color = proj["color"][order].astype(dt)

    k = len(order)
    g_mean2d = np.zeros((k, 2))
    g_conic = np.zeros((k, 3))
    g_color = np.zeros((k, 3))
    g_opa = np.zeros(k)

    for tile in np.unique(tile_ids):
        lo, hi = np.searchsorted(tile_ids, tile), np.searchsorted(tile_ids, tile + 1)
        ids = ranks[lo:hi]
        x0, y0, w, h, px, py = _tile_pixels(int(tile), ntx, settings.tile_size, cam, dt)
        g = grad_image[y0 : y0 + h, x0 : x0 + w].reshape(-1, 3)

        dx = px[None, :] - mean2d[ids, 0, None]
        dy = py[None, :] - mean2d[ids, 1, None]
        power = -0.5 * (
            conic[ids, 0, None] * dx * dx
            + 2.0 * conic[ids, 1, None] * dx * dy
            + conic[ids, 2, None] * dy * dy
        )
        gauss = np.exp(np.minimum(power, 0.0))
        alpha = opa[ids, None] * gauss
        alpha = np.minimum(alpha, dt(settings.alpha_limit))
        cut = np.ones_like(alpha, dtype=bool)
        if settings.alpha_cutoff > 0:
            cut = alpha >= settings.alpha_cutoff
            alpha = np.where(cut, alpha, 0.0)
        weights, t_before, included, t_final = _composite_weights(
            alpha, dt(settings.transmittance_floor)
        )

        gdot = color[ids] @ g.T  # (S, P): color_j · grad_p
        np.add.at(g_color, ids, weights.astype(np.float64) @ g)

        contrib = (weights * gdot).astype(np.float64)
        suffix = contrib.sum(axis=0)[None, :] - np.cumsum(contrib, axis=0)
        bgdot = g @ bg
        suffix = suffix + (bgdot * t_final)[None, :]

        live = included & cut & (alpha > 0) & (alpha < dt(settings.alpha_limit))
        d_alpha = np.where(live, t_before * gdot - suffix / (1.0 - alpha), 0.0)
        np.add.at(g_opa, ids, np.sum(d_alpha * gauss * live, axis=1))
        d_power = d_alpha * alpha
        np.add.at(g_conic, ids, np.stack(
            [
                np.sum(d_power * (-0.5 * dx * dx), axis=1),
                np.sum(d_power * (-dx * dy), axis=1),
                np.sum(d_power * (-0.5 * dy * dy), axis=1),
            ],
            axis=-1,
        ))
        gm_x = np.sum(d_power * (conic[ids, 0, None] * dx + conic[ids, 1, None] * dy), axis=1)
        gm_y = np.sum(d_power * (conic[ids, 1, None] * dx + conic[ids, 2, None] * dy), axis=1)
        np.add.at(g_mean2d, ids, np.stack([gm_x, gm_y], axis=-1))

    return _projection_backward(frame, cam, settings, proj, order, g_mean2d, g_conic, g_color, g_opa)


def _projection_backward(frame, cam, settings, proj, order, g_mean2d, g_conic, g_color, g_opa):
    """Chain per-splat screen-space gradients back to world parameters."""
    n = frame.count
    sel = order  # indices into the original splat arrays
    t = proj["t"][sel]
    j = proj["j"][sel]
    cov_cam = proj["cov_cam"][sel]
    cov2d = proj["cov2d"][sel]
    det = proj["det"][sel]
    w = cam.rotation

    # conic -> 2D covariance
    conic_m = np.empty((len(sel), 2, 2))
    conic_m[:, 0, 0] = cov2d[:, 1, 1] / det
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = -cov2d[:, 0, 1] / det
    conic_m[:, 1, 1] = cov2d[:, 0, 0] / det
    g_conic_m = np.empty_like(conic_m)
    g_conic_m[:, 0, 0] = g_conic[:, 0]
    g_conic_m[:, 0, 1] = g_conic_m[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_conic_m[:, 1, 1] = g_conic[:, 2]
    g_cov2d = -conic_m @ g_conic_m @ conic_m

    # cov2d = J cov_cam J^T (+ eps I)
    sym = g_cov2d + np.swapaxes(g_cov2d, -1, -2)
    g_j = sym @ j @ cov_cam
    g_cov_cam = np.einsum("nji,njk,nkl->nil", j, g_cov2d, j)
    g_cov3d = np.einsum("ji,njk,kl->nil", w, g_cov_cam, w)

    g_q, g_s = cm.covariance_from_qs_backward(frame.rotations[sel], frame.scales[sel], g_cov3d)

    # J and mean2d -> camera-space point
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    g_t = np.zeros_like(t)
    g_t[:, 0] += g_mean2d[:, 0] * cam.fx / tz
    g_t[:, 2] += g_mean2d[:, 0] * (-cam.fx * tx / tz**2)
    g_t[:, 1] += g_mean2d[:, 1] * cam.fy / tz
    g_t[:, 2] += g_mean2d[:, 1] * (-cam.fy * ty / tz**2)
    g_t[:, 0] += g_j[:, 0, 2] * (-cam.fx / tz**2)
    g_t[:, 1] += g_j[:, 1, 2] * (-cam.fy / tz**2)
    g_t[:, 2] += (
        g_j[:, 0, 0] * (-cam.fx / tz**2)
        + g_j[:, 0, 2] * (2 * cam.fx * tx / tz**3)
        + g_j[:, 1, 1] * (-cam.fy / tz**2)
        + g_j[:, 1, 2] * (2 * cam.fy * ty / tz**3)
    )
    g_mu = g_t @ w

    # color -> SH coefficients and (through the view direction) position
    color_raw = proj["color_raw"][sel]
    dirs = proj["dirs"][sel]
    dist = proj["dist"][sel]
    g_raw = g_color * (color_raw > 0)
    basis = cm.sh_basis(dirs)
    g_sh = basis[:, :, None] * g_raw[:, None, :]
    basis_grad = cm.sh_basis_grad(dirs)
    coeff = frame.sh[sel]
    g_dir = np.einsum("nbc,nbd->nd", coeff * g_raw[:, None, :], basis_grad)
    g_mu += (g_dir - dirs * np.sum(g_dir * dirs, axis=1, keepdims=True)) / dist[:, None]

    grads = SplatGrads(
        positions=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        scales=np.zeros((n, 3)),
        opacities=np.zeros(n),
        sh=np.zeros((n, 16, 3)),
    )
    grads.positions[sel] = g_mu
    grads.rotations[sel] = g_q
    grads.scales[sel] = g_s
    grads.opacities[sel] = g_opa
    grads.sh[sel] = g_sh
    return grads


# ---------------------------------------------------------------------------
# brute-force reference


def render_reference(frame: SplatFrame, cam: Camera, background=(0.0, 0.0, 0.0),
                     settings: RenderSettings | None = None) -> RenderedImage:
    """Per-pixel compositing of all depth-valid splats, float64, no shortcuts.

    Shares only the projection formulas with the tiled path; compositing is an
    independent dense evaluation with a single global depth sort.
    """
    settings = settings or RenderSettings.exact64()
    bg = np.asarray(background, dtype=np.float64)
    image = np.empty((cam.height, cam.width, 3), dtype=np.float64)
    image[:] = bg
    transmittance = np.ones((cam.height, cam.width), dtype=np.float64)
    if frame.count == 0:
        return RenderedImage(image, transmittance, 0)

    proj = _project_frame(frame, cam, settings)
    keep = proj["depth_ok"] & proj["invertible"]
    idx = np.nonzero(keep)[0]
    if idx.size == 0:
        return RenderedImage(image, transmittance, proj["skipped"])
    order = idx[np.lexsort((idx, proj["depth"][idx]))]

    mean2d = proj["mean2d"][order]
    conic = proj["conic"][order]
    opa = np.asarray(frame.opacities, dtype=np.float64)[order]
    color = proj["color"][order]

    xs = np.arange(cam.width) + 0.5
    ys = np.arange(cam.height) + 0.5
    pxg, pyg = np.meshgrid(xs, ys, indexing="xy")
    px, py = pxg.ravel(), pyg.ravel()

    out = np.empty((len(px), 3))
    t_out = np.empty(len(px))
    chunk = max(1, int(4e6) // max(len(order), 1))
    for start in range(0, len(px), chunk):
        sl = slice(start, min(start + chunk, len(px)))
        dx = px[sl][None, :] - mean2d[:, 0, None]
        dy = py[sl][None, :] - mean2d[:, 1, None]
        power = -0.5 * (
            conic[:, 0, None] * dx * dx
            + 2.0 * conic[:, 1, None] * dx * dy
            + conic[:, 2, None] * dy * dy
        )
        alpha = opa[:, None] * np.exp(np.minimum(power, 0.0))
        alpha = np.minimum(alpha, settings.alpha_limit)
        weights, _, _, t_final = _composite_weights(alpha, 0.0)
        out[sl] = weights.T @ color + t_final[:, None] * bg
        t_out[sl] = t_final

    image[:] = out.reshape(cam.height, cam.width, 3)
    transmittance[:] = t_out.reshape(cam.height, cam.width)
    return RenderedImage(image, transmittance, proj["skipped"])
