"""Losses, metrics, the Adam optimizer, and the two-stage training scheme.

Stage one (warmup): per-frame Gaussian parameters are fitted photometrically
with positions frozen at the posed-template texel positions, producing
pseudo-ground-truth snapshots; the decoders are then regressed onto those
snapshots with an L2 loss. Stage two: end-to-end photometric training of the
decoders through the full differentiable pipeline.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import avatar as av
from . import decoders as dec
from .core_math import InvalidInputError
from .renderer import RenderSettings, render_backward, render_with_ctx

__all__ = [
    "LossWeights",
    "TrainConfig",
    "PseudoGtSnapshot",
    "TrainingDiverged",
    "ssim",
    "ssim_with_grad",
    "psnr",
    "loss_main",
    "loss_warmup",
    "adam_step",
    "Adam",
    "fit_pseudo_gt",
    "pretrain_decoders",
    "train_full",
    "evaluate_poses",
]

_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_SIGMA = 1.5
_SSIM_WINDOW = 11


@dataclass(frozen=True)
class LossWeights:
    pix: float = 0.1
    structural: float = 0.9

    def __post_init__(self):
        if self.pix < 0 or self.structural < 0:
            raise InvalidInputError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    warmup_frames: int = 4
    fit_steps: int = 2000
    fit_lr: float = 1e-2
    pretrain_steps: int = 2000
    pretrain_lr: float = 1e-3
    train_steps: int = 5000
    lr_geometry: float = 1e-4
    lr_appearance: float = 2e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 200
    # optional early-exit bars (None disables)
    fit_target_psnr: float | None = None
    pretrain_target: float | None = None
    train_target_psnr: float | None = None
    train_target_ssim: float | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.warmup_frames < 1:
            raise InvalidInputError("warmup frame count must be at least 1")


@dataclass
class PseudoGtSnapshot:
    """Per-frame fitted parameters; positions are frozen, never optimized."""

    frame_id: int
    maps: av.GaussianParamMaps
    positions: np.ndarray  # (N, 3) posed-template texel positions


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_good):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------------
# SSIM / PSNR / photometric losses


def _gaussian_window(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


_WINDOW_1D = _gaussian_window()


def _blur(img):
    """Zero-padded separable Gaussian filtering over the two spatial axes."""
    out = correlate1d(img, _WINDOW_1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW_1D, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    return a, b


def ssim(a, b) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Local statistics use zero-padded windows; the mean runs over every pixel
    and channel, so ssim(x, x) == 1 exactly.
    """
    return ssim_with_grad(a, b)[0]


def ssim_with_grad(pred, target):
    """Returns (ssim value, d ssim / d pred)."""
    x, y = _check_pair(pred, target)
    mu_x, mu_y = _blur(x), _blur(y)
    x2, y2, xy = _blur(x * x), _blur(y * y), _blur(x * y)
    sigma_x2 = x2 - mu_x * mu_x
    sigma_y2 = y2 - mu_y * mu_y
    sigma_xy = xy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + _SSIM_C1
    a2 = 2 * sigma_xy + _SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + _SSIM_C1
    b2 = sigma_x2 + sigma_y2 + _SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    value = float(s.mean())

    d_a1 = a2 / (b1 * b2)
    d_a2 = a1 / (b1 * b2)
    d_b1 = -s / b1
    d_b2 = -s / b2
    g_mu_x = 2 * mu_y * d_a1 + 2 * mu_x * d_b1 - 2 * mu_y * d_a2 - 2 * mu_x * d_b2
    g_x2 = d_b2
    g_xy = 2 * d_a2
    grad = _blur(g_mu_x) + 2 * x * _blur(g_x2) + y * _blur(g_xy)
    grad /= s.size
    if np.asarray(pred).ndim == 2:
        grad = grad[..., 0]
    return value, grad


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for a dynamic range of 1; identical images give inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def loss_main(target, pred, weights: LossWeights | None = None):
    """pix * L1 + structural * (1 - SSIM); returns (loss, d loss / d pred)."""
    weights = weights or LossWeights()
    t, p = _check_pair(target, pred)
    l1 = float(np.mean(np.abs(t - p)))
    g_l1 = np.sign(p - t) / t.size
    s, g_s = ssim_with_grad(p, t)
    loss = weights.pix * l1 + weights.structural * (1.0 - s)
    grad = weights.pix * g_l1 - weights.structural * g_s
    if np.asarray(pred).ndim == 2:
        grad = grad.reshape(np.asarray(pred).shape)
    return loss, grad


_WARMUP_CHANNELS = 59  # offset 3 + rotation 4 + scale 3 + opacity 1 + SH 48


def _stack_warmup_channels(p: av.TexelParams) -> np.ndarray:
    return np.concatenate(
        [p.offset, p.rotation, p.scale, p.opacity[:, None], p.sh.reshape(len(p.offset), 48)],
        axis=1,
    )


def loss_warmup(pred: av.TexelParams, target: av.TexelParams):
    """Mean squared error over covered texels and all 59 non-position channels.

    Returns (loss, gradient (N, 59) in the stacked channel order).
    """
    if pred.count != target.count:
        raise InvalidInputError("pseudo-GT and prediction cover different texel sets")
    a = _stack_warmup_channels(pred)
    b = _stack_warmup_channels(target)
    diff = a - b
    denom = a.size
    return float(np.mean(diff**2)), 2.0 * diff / denom


def _split_warmup_grad(grad):
    n = len(grad)
    return {
        "offset": grad[:, 0:3],
        "rotation": grad[:, 3:7],
        "scale": grad[:, 7:10],
        "opacity": grad[:, 10],
        "sh": grad[:, 11:59].reshape(n, 16, 3),
    }


# ---------------------------------------------------------------------------
# Adam


def adam_step(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns (param, m, v) as new arrays."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise InvalidInputError(f"parameter shape {param.shape} != gradient shape {grad.shape}")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, params: dict, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p) for k, p in params.items()}
        self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict):
        self.step_count += 1
        for k, p in self.params.items():
            new_p, self.m[k], self.v[k] = adam_step(
                p, grads[k], self.m[k], self.v[k], self.step_count,
                self.lr, self.betas, self.eps,
            )
            p[:] = new_p

    def state(self) -> dict:
        out = {"step": self.step_count}
        out["m"] = {k: v.copy() for k, v in self.m.items()}
        out["v"] = {k: v.copy() for k, v in self.v.items()}
        return out

    def load_state(self, state: dict):
        self.step_count = int(state["step"])
        for k in self.m:
            self.m[k][:] = state["m"][k]
            self.v[k][:] = state["v"][k]


def train_render_settings() -> RenderSettings:
    """float64 rasterization with the production shortcuts kept on."""
    return RenderSettings(dtype=np.float64)


# ---------------------------------------------------------------------------
# stage 1a: per-frame pseudo-GT fitting


def _default_fit_raw(n, rng):
    # zero SH keeps the view-underdetermined bands small and smooth, which
    # the decoders must later regress from smooth motion textures
    raw_geo = np.zeros((n, dec.GEO_OUT_CHANNELS))
    raw_sh = np.zeros((n, 48))
    raw_geo[:, 10] = 1.0  # opacity starts around 0.73
    return raw_geo, raw_sh


def _activated_texel_params(raw_geo, raw_sh, cfg):
    maps = av.activate_geometry(raw_geo, raw_sh, cfg)
    return av.TexelParams(
        offset=maps.offset,
        rotation=maps.rotation,
        scale=maps.scale,
        opacity=maps.opacity,
        sh=maps.sh.reshape(-1, 16, 3),
    )


def select_warmup_frames(n_frames, t):
    """t frame indices evenly spread across the sequence (first frame included)."""
    if t >= n_frames:
        return list(range(n_frames))
    return [int(round(i * (n_frames - 1) / max(t - 1, 1))) for i in range(t)] if t > 1 else [0]


def fit_pseudo_gt(scene, config: TrainConfig, frames=None, verbose=False):
    """Fit (q, s, alpha, eta) per frame with frozen positions and fixed count.

    ``scene`` provides frame geometry, cameras and ground-truth images (see
    assets_io.SceneData). Returns one PseudoGtSnapshot per selected frame.
    """
    if not scene.cameras:
        raise InvalidInputError("pseudo-GT fitting needs at least one camera")
    rng = np.random.default_rng(config.seed)
    settings = train_render_settings()
    frames = frames if frames is not None else select_warmup_frames(scene.num_frames, config.warmup_frames)
    table = scene.table
    act_cfg = scene.activation
    snapshots = []
    for f in frames:
        setup = scene.frame_setup(f)
        frozen = av.posed_texel_positions(setup["mu_bar"], setup["texel_dqs"])
        n = table.count
        raw_geo, raw_sh = _default_fit_raw(n, rng)
        opt = Adam({"geo": raw_geo, "sh": raw_sh}, lr=config.fit_lr,
                   betas=config.betas, eps=config.eps)
        cam_order = list(range(len(scene.cameras)))
        for step in range(config.fit_steps):
            c = cam_order[step % len(cam_order)]
            p = _activated_texel_params(raw_geo, raw_sh, act_cfg)
            p.offset[:] = 0.0  # pseudo-GT positions stay on the template
            splats = av.pose_gaussians(setup["mu_bar"], p, setup["texel_dqs"], frame_id=f)
            assert splats.count == n
            np.testing.assert_allclose(splats.positions, frozen, atol=1e-9)
            out, ctx = render_with_ctx(splats, scene.cameras[c], scene.background, settings)
            loss, g_img = loss_main(scene.image(f, c), out.image, config.loss_weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(step, {"geo": raw_geo.copy(), "sh": raw_sh.copy()})
            grads = render_backward(ctx, g_img)
            _, g_rot_c = av.pose_gaussians_backward(setup["texel_dqs"], grads.positions, grads.rotations)
            g_raw = av.activate_geometry_backward(
                raw_geo, act_cfg,
                g_offset=np.zeros((n, 3)),
                g_rotation=g_rot_c,
                g_scale=grads.scales,
                g_opacity=grads.opacities,
            )
            g_raw[:, 0:3] = 0.0  # offsets are not fitted
            opt.step({"geo": g_raw, "sh": grads.sh.reshape(n, 48)})
            if config.fit_target_psnr is not None and (step + 1) % 50 == 0:
                vals = _frame_psnr(scene, f, raw_geo, raw_sh, settings)
                if verbose:
                    print(f"  frame {f} step {step + 1}: psnr {min(vals):.2f}")
                if min(vals) >= config.fit_target_psnr:
                    break
        snapshots.append(_snapshot_from_raw(scene, f, raw_geo, raw_sh, frozen))
    return snapshots


def _frame_psnr(scene, f, raw_geo, raw_sh, settings):
    setup = scene.frame_setup(f)
    p = _activated_texel_params(raw_geo, raw_sh, scene.activation)
    p.offset[:] = 0.0
    splats = av.pose_gaussians(setup["mu_bar"], p, setup["texel_dqs"], frame_id=f)
    vals = []
    for c in range(len(scene.cameras)):
        out, _ = render_with_ctx(splats, scene.cameras[c], scene.background, settings)
        vals.append(psnr(scene.image(f, c), out.image))
    return vals


def _snapshot_from_raw(scene, f, raw_geo, raw_sh, frozen_positions):
    table = scene.table
    r = table.resolution
    maps = av.GaussianParamMaps(
        offset=np.zeros((r, r, 3)),
        rotation=np.zeros((r, r, 4)),
        scale=np.zeros((r, r, 3)),
        opacity=np.zeros((r, r)),
        sh=np.zeros((r, r, 48)),
    )
    p = _activated_texel_params(raw_geo, raw_sh, scene.activation)
    u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
    maps.offset[v, u] = 0.0
    maps.rotation[v, u] = p.rotation
    maps.rotation[..., 0][~table.coverage_mask()] = 1.0
    maps.scale[v, u] = p.scale
    maps.scale[~table.coverage_mask()] = scene.activation.scale_min
    maps.opacity[v, u] = p.opacity
    maps.sh[v, u] = p.sh.reshape(-1, 48)
    return PseudoGtSnapshot(frame_id=f, maps=maps, positions=frozen_positions.copy())


# ---------------------------------------------------------------------------
# stage 1b: decoder pretraining (L2 to pseudo-GT)


def _decoder_input(setup):
    """Stack normal and position textures into the (6, R, R) decoder input."""
    tn = setup["normal_texture"].data
    tp = setup["position_texture"].data
    return np.concatenate([tn.transpose(2, 0, 1), tp.transpose(2, 0, 1)], axis=0)


def _predicted_texel_params(scene, setup, geo_net, app_net, mlp, pose_root):
    x = _decoder_input(setup)
    raw_geo = geo_net.forward(x)
    gf = mlp.forward(pose_root)
    raw_app = app_net.forward(x, global_feature=gf)
    table = scene.table
    u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
    raw_geo_tex = raw_geo.transpose(1, 2, 0)[v, u]
    raw_sh_tex = raw_app.transpose(1, 2, 0)[v, u]
    p = _activated_texel_params(raw_geo_tex, raw_sh_tex, scene.activation)
    return p, raw_geo, raw_app, raw_geo_tex, raw_sh_tex


def _backprop_texel_grads(scene, geo_net, app_net, mlp, raw_geo_tex, raw_sh_tex,
                          g_parts, raw_geo_shape, raw_app_shape):
    table = scene.table
    u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
    g_raw_tex = av.activate_geometry_backward(
        raw_geo_tex, scene.activation,
        g_offset=g_parts["offset"],
        g_rotation=g_parts["rotation"],
        g_scale=g_parts["scale"],
        g_opacity=g_parts["opacity"],
    )
    g_geo_map = np.zeros(raw_geo_shape)
    g_geo_map[:, v, u] = g_raw_tex.T
    g_app_map = np.zeros(raw_app_shape)
    g_app_map[:, v, u] = g_parts["sh"].reshape(len(u), 48).T
    geo_net.backward(g_geo_map)
    _, g_gf = app_net.backward(g_app_map)
    mlp.backward(g_gf)


def pretrain_decoders(snapshots, scene, geo_net, app_net, mlp, config: TrainConfig,
                      verbose=False):
    """Regress decoder outputs onto pseudo-GT snapshots (L2, activated space).

    Returns the per-step loss history; decoder weights are updated in place.
    """
    if not snapshots:
        raise InvalidInputError("pretraining needs at least one snapshot")
    if snapshots[0].maps.resolution != scene.table.resolution:
        raise InvalidInputError("snapshot resolution does not match the texel table")
    rng = np.random.default_rng(config.seed + 1)
    opt_geo = Adam(geo_net.parameters(), lr=config.pretrain_lr, betas=config.betas, eps=config.eps)
    app_params = dict(app_net.parameters())
    app_params.update(mlp.parameters())
    opt_app = Adam(app_params, lr=config.pretrain_lr, betas=config.betas, eps=config.eps)

    targets = {}
    for snap in snapshots:
        targets[snap.frame_id] = snap.maps.at_texels(scene.table)

    history = []
    frame_ids = [s.frame_id for s in snapshots]
    for step in range(config.pretrain_steps):
        f = frame_ids[int(rng.integers(len(frame_ids)))]
        setup = scene.frame_setup(f)
        geo_net.zero_grad()
        app_net.zero_grad()
        mlp.zero_grad()
        p, raw_geo, raw_app, raw_geo_tex, raw_sh_tex = _predicted_texel_params(
            scene, setup, geo_net, app_net, mlp, scene.pose(f).root_translation
        )
        loss, grad = loss_warmup(p, targets[f])
        if not np.isfinite(loss):
            raise TrainingDiverged(step, {"geo": geo_net.parameters(), "app": app_net.parameters()})
        history.append(loss)
        _backprop_texel_grads(
            scene, geo_net, app_net, mlp, raw_geo_tex, raw_sh_tex,
            _split_warmup_grad(grad), raw_geo.shape, raw_app.shape,
        )
        opt_geo.step(geo_net.gradients())
        app_grads = dict(app_net.gradients())
        app_grads.update(mlp.gradients())
        opt_app.step(app_grads)
        if verbose and (step + 1) % 100 == 0:
            print(f"  pretrain step {step + 1}: L_pre {loss:.3e}")
        if config.pretrain_target is not None and loss <= config.pretrain_target:
            break
    return history


# ---------------------------------------------------------------------------
# stage 2: end-to-end photometric training


def evaluate_poses(scene, geo_net, app_net, mlp, settings=None):
    """PSNR and SSIM per (frame, camera) pair under the current decoders."""
    settings = settings or train_render_settings()
    psnrs, ssims = [], []
    for f in range(scene.num_frames):
        setup = scene.frame_setup(f)
        p, *_ = _predicted_texel_params(scene, setup, geo_net, app_net, mlp,
                                        scene.pose(f).root_translation)
        splats = av.pose_gaussians(setup["mu_bar"], p, setup["texel_dqs"], frame_id=f)
        for c in range(len(scene.cameras)):
            out, _ = render_with_ctx(splats, scene.cameras[c], scene.background, settings)
            gt = scene.image(f, c)
            psnrs.append(psnr(gt, out.image))
            ssims.append(ssim(out.image, gt))
    return psnrs, ssims


def train_full(scene, geo_net, app_net, mlp, config: TrainConfig, log_path=None,
               verbose=False, optimizer_state=None):
    """Photometric decoder training over all (frame, camera) pairs.

    Writes a CSV metric log (step, loss, l1, ssim, psnr, wall_ms) when
    ``log_path`` is given. Returns the list of logged rows.
    """
    rng = np.random.default_rng(config.seed + 2)
    settings = train_render_settings()
    opt_geo = Adam(geo_net.parameters(), lr=config.lr_geometry, betas=config.betas, eps=config.eps)
    app_params = dict(app_net.parameters())
    app_params.update(mlp.parameters())
    opt_app = Adam(app_params, lr=config.lr_appearance, betas=config.betas, eps=config.eps)
    if optimizer_state is not None:
        opt_geo.load_state(optimizer_state["geo"])
        opt_app.load_state(optimizer_state["app"])

    rows = []
    last_good = None
    table = scene.table
    u, v = table.texel_coords[:, 0], table.texel_coords[:, 1]
    n = table.count
    t0 = time.perf_counter()
    for step in range(config.train_steps):
        f = int(rng.integers(scene.num_frames))
        c = int(rng.integers(len(scene.cameras)))
        setup = scene.frame_setup(f)
        geo_net.zero_grad()
        app_net.zero_grad()
        mlp.zero_grad()
        p, raw_geo, raw_app, raw_geo_tex, raw_sh_tex = _predicted_texel_params(
            scene, setup, geo_net, app_net, mlp, scene.pose(f).root_translation
        )
        splats = av.pose_gaussians(setup["mu_bar"], p, setup["texel_dqs"], frame_id=f)
        out, ctx = render_with_ctx(splats, scene.cameras[c], scene.background, settings)
        gt = scene.image(f, c)
        loss, g_img = loss_main(gt, out.image, config.loss_weights)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, last_good)
        grads = render_backward(ctx, g_img)
        g_offset, g_rot_c = av.pose_gaussians_backward(
            setup["texel_dqs"], grads.positions, grads.rotations
        )
        _backprop_texel_grads(
            scene, geo_net, app_net, mlp, raw_geo_tex, raw_sh_tex,
            {
                "offset": g_offset,
                "rotation": g_rot_c,
                "scale": grads.scales,
                "opacity": grads.opacities,
                "sh": grads.sh,
            },
            raw_geo.shape, raw_app.shape,
        )
        opt_geo.step(geo_net.gradients())
        app_grads = dict(app_net.gradients())
        app_grads.update(mlp.gradients())
        opt_app.step(app_grads)

        if (step + 1) % config.eval_interval == 0 or step + 1 == config.train_steps:
            psnrs, ssims = evaluate_poses(scene, geo_net, app_net, mlp, settings)
            l1 = float(np.mean(np.abs(gt - out.image)))
            wall_ms = (time.perf_counter() - t0) * 1000.0
            rows.append((step + 1, loss, l1, min(ssims), min(psnrs), wall_ms))
            last_good = {
                "geo": {k: a.copy() for k, a in geo_net.parameters().items()},
                "app": {k: a.copy() for k, a in app_net.parameters().items()},
                "mlp": {k: a.copy() for k, a in mlp.parameters().items()},
            }
            if verbose:
                print(f"  step {step + 1}: loss {loss:.4e} psnr {min(psnrs):.2f} ssim {min(ssims):.4f}")
            if (
                config.train_target_psnr is not None
                and min(psnrs) >= config.train_target_psnr
                and (config.train_target_ssim is None or min(ssims) >= config.train_target_ssim)
            ):
                break

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step,loss,l1,ssim,psnr,wall_ms\n")
            for row in rows:
                fh.write(",".join(f"{x}" for x in row) + "\n")
    return rows, {"geo": opt_geo.state(), "app": opt_app.state()}
