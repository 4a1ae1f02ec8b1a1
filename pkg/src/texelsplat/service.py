"""Command-line interface and the real-time WebSocket frame service.

Subcommands: make-synthetic, render, fit, pretrain, train, benchmark, serve.
Exit codes: 0 success, 1 runtime failure, 2 usage or input error. Every
training-style run writes a reproducibility record (config, seed, content
hashes of its inputs) next to its outputs.

Wire protocol (binary frame replies): 16-byte header "ASHF" + version u8 +
format u8 (0 raw RGB8, 1 PNG) + width u16 + height u16 + frame_id u32 +
reserved u16, all little-endian, followed by the payload. Control messages
are JSON (see ``WIRE_SCHEMA``).
"""

from __future__ import annotations

import os


def _apply_thread_cap():
    """ASH_THREADS caps BLAS parallelism; must run before numpy loads."""
    cap = os.environ.get("ASH_THREADS")
    if cap:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import argparse
import asyncio
import io
import json
import struct
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import assets_io as aio
from . import avatar as av
from . import decoders as dec
from . import rig as rigmod
from . import training as tr
from . import uv_atlas
from .core_math import InvalidInputError
from .renderer import Camera, RenderSettings, render, render_reference

FRAME_MAGIC = b"ASHF"
FRAME_VERSION = 1
FORMAT_RAW = 0
FORMAT_PNG = 1
FRAME_HEADER = struct.Struct("<4sBBHHIH")

WIRE_SCHEMA_PATH = Path(__file__).parent / "wire_schema.json"


class UsageError(RuntimeError):
    """Bad input from the user; maps to exit code 2."""


@dataclass
class StageTimings:
    """Per-frame pipeline timings in milliseconds."""

    stg1: float  # rig: pose -> deformed and posed mesh
    stg2: float  # motion-texture baking
    stg3: float  # decoder forward + activation + posing
    stg4: float  # rasterization
    total: float

    @property
    def fps(self) -> float:
        return 1000.0 / self.total if self.total > 0 else float("inf")

    @property
    def overhead(self) -> float:
        return self.total - (self.stg1 + self.stg2 + self.stg3 + self.stg4)


# ---------------------------------------------------------------------------
# checkpoint handling


def sniff_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == av.PARAMS_MAGIC:
        return "params"
    if magic == dec.WEIGHTS_MAGIC:
        return "weights"
    raise UsageError(f"unrecognized checkpoint magic {magic!r} in {path}")


def save_decoder_checkpoint(path, geo_net, app_net, mlp):
    tensors = {
        "meta.geo": np.array([
            geo_net.spec.levels, geo_net.spec.base_channels, geo_net.spec.in_channels,
            geo_net.spec.out_channels, geo_net.spec.bottleneck_extra,
        ], dtype=np.float64),
        "meta.app": np.array([
            app_net.spec.levels, app_net.spec.base_channels, app_net.spec.in_channels,
            app_net.spec.out_channels, app_net.spec.bottleneck_extra,
        ], dtype=np.float64),
    }
    tensors.update({f"geo.{k}": v for k, v in geo_net.parameters().items()})
    tensors.update({f"app.{k}": v for k, v in app_net.parameters().items()})
    tensors.update({f"mlp.{k}": v for k, v in mlp.parameters().items()})
    dec.write_weights(path, tensors)


def load_decoder_checkpoint(path):
    state = dec.read_weights(path)
    if "meta.geo" not in state or "meta.app" not in state:
        raise InvalidInputError(f"{path} is not a decoder checkpoint (missing meta tensors)")

    def spec_of(meta):
        levels, base, in_ch, out_ch, extra = (int(x) for x in meta)
        return dec.ConvNetSpec(levels=levels, base_channels=base, in_channels=in_ch,
                               out_channels=out_ch, bottleneck_extra=extra)

    geo = dec.UNet(spec_of(state["meta.geo"]))
    app = dec.UNet(spec_of(state["meta.app"]))
    mlp = dec.GlobalFeatureMLP()
    geo.load_state({k[4:]: v for k, v in state.items() if k.startswith("geo.")})
    app.load_state({k[4:]: v for k, v in state.items() if k.startswith("app.")})
    mlp.load_state({k[4:]: v for k, v in state.items() if k.startswith("mlp.")})
    return geo, app, mlp


def fresh_decoders(scene, seed=0, preset="desk"):
    rng = np.random.default_rng(seed)
    make = dec.ConvNetSpec.desk if preset == "desk" else dec.ConvNetSpec.production
    geo = dec.UNet(make(out_channels=dec.GEO_OUT_CHANNELS), rng=rng)
    app = dec.UNet(make(out_channels=dec.APP_OUT_CHANNELS, bottleneck_extra=16), rng=rng)
    mlp = dec.GlobalFeatureMLP(rng=rng)
    return geo, app, mlp


# ---------------------------------------------------------------------------
# frame production (shared by render / benchmark / serve)


class AvatarSession:
    """A loaded scene plus either static parameter maps or trained decoders."""

    def __init__(self, scene, checkpoint_path=None, texel_resolution=None):
        self.scene = scene
        if texel_resolution is not None and texel_resolution != scene.table.resolution:
            scene.table = uv_atlas.build_texel_table(scene.mesh, texel_resolution)
            scene.activation = av.ActivationConfig.for_template(scene.mesh, scene.table)
            scene._setups.clear()
        self.kind = None
        self.static_params = None
        self.geo = self.app = self.mlp = None
        if checkpoint_path is not None:
            self.kind = sniff_checkpoint(checkpoint_path)
            if self.kind == "params":
                maps, mask = av.read_param_maps(checkpoint_path)
                if maps.resolution != scene.table.resolution:
                    raise UsageError(
                        f"checkpoint resolution {maps.resolution} does not match "
                        f"texel resolution {scene.table.resolution}"
                    )
                self.static_params = maps
            else:
                self.geo, self.app, self.mlp = load_decoder_checkpoint(checkpoint_path)

    def splats_for_pose(self, pose: rigmod.PoseFrame, setup=None):
        scene = self.scene
        setup = setup or self._setup_for(pose)
        if self.kind == "weights":
            p, *_ = tr._predicted_texel_params(
                scene, setup, self.geo, self.app, self.mlp, pose.root_translation
            )
        elif self.kind == "params":
            p = self.static_params.at_texels(scene.table)
        else:
            raise UsageError("no checkpoint loaded")
        return av.pose_gaussians(setup["mu_bar"], p, setup["texel_dqs"], frame_id=pose.frame_id)

    def _setup_for(self, pose: rigmod.PoseFrame):
        scene = self.scene

        def matches(stored):
            return np.array_equal(stored.joint_rotations, pose.joint_rotations) and np.array_equal(
                stored.root_translation, pose.root_translation
            )

        # a pose identical to a dataset frame reuses that frame's graph params
        # (frame_id on the wire is a message sequence number, not a dataset index)
        candidates = [pose.frame_id] if 0 <= pose.frame_id < scene.num_frames else []
        candidates += [f for f in range(scene.num_frames) if f not in candidates]
        for f in candidates:
            if matches(scene.pose(f)):
                return scene.frame_setup(f)
        # free pose: rest embedded graph (per-frame graph params are dataset inputs)
        canonical = rigmod.embedded_deform(scene.mesh, scene.graph)
        joint_dqs = rigmod.forward_kinematics(scene.skeleton, pose)
        texel_dqs = rigmod.texel_skinning_transforms(
            scene.table.skin_joints, scene.table.skin_weights, joint_dqs
        )
        posed = rigmod.skin_vertices(canonical, scene.mesh, joint_dqs)
        normals = rigmod.compute_vertex_normals(posed, scene.mesh.faces)
        return {
            "canonical": canonical,
            "joint_dqs": joint_dqs,
            "texel_dqs": texel_dqs,
            "posed": posed,
            "normals": normals,
            "mu_bar": av.canonical_positions(scene.table, canonical),
            "position_texture": uv_atlas.bake_position_texture(scene.table, posed),
            "normal_texture": uv_atlas.bake_normal_texture(scene.table, normals),
        }

    def render_pose(self, pose, camera, renderer="tiled"):
        splats = self.splats_for_pose(pose)
        if renderer == "reference":
            img = render_reference(splats, camera, background=self.scene.background).image
        else:
            img = render(splats, camera, background=self.scene.background,
                         settings=RenderSettings.production()).image
        return img.astype(np.float32).astype(np.float64)


def benchmark_session(session: AvatarSession, n_frames, camera) -> StageTimings:
    """Mean per-stage times over n_frames, first (cold) frame excluded."""
    if n_frames < 2:
        raise UsageError("benchmark needs --frames >= 2 (the first frame only warms caches)")
    scene = session.scene
    samples = []
    settings = RenderSettings.production()
    for i in range(n_frames):
        pose = scene.pose(i % scene.num_frames)
        t_start = time.perf_counter()
        t0 = time.perf_counter()
        canonical = rigmod.embedded_deform(scene.mesh, scene.frame_graph(pose.frame_id))
        joint_dqs = rigmod.forward_kinematics(scene.skeleton, pose)
        posed = rigmod.skin_vertices(canonical, scene.mesh, joint_dqs)
        normals = rigmod.compute_vertex_normals(posed, scene.mesh.faces)
        t1 = time.perf_counter()
        pos_tex = uv_atlas.bake_position_texture(scene.table, posed)
        nrm_tex = uv_atlas.bake_normal_texture(scene.table, normals)
        t2 = time.perf_counter()
        setup = {
            "canonical": canonical, "joint_dqs": joint_dqs, "posed": posed,
            "normals": normals, "position_texture": pos_tex, "normal_texture": nrm_tex,
            "mu_bar": av.canonical_positions(scene.table, canonical),
            "texel_dqs": rigmod.texel_skinning_transforms(
                scene.table.skin_joints, scene.table.skin_weights, joint_dqs
            ),
        }
        splats = session.splats_for_pose(pose, setup=setup)
        t3 = time.perf_counter()
        render(splats, camera, background=scene.background, settings=settings)
        t4 = time.perf_counter()
        if i > 0:
            samples.append((t1 - t0, t2 - t1, t3 - t2, t4 - t3, t4 - t_start))
    mean = np.mean(samples, axis=0) * 1000.0
    return StageTimings(stg1=mean[0], stg2=mean[1], stg3=mean[2], stg4=mean[3], total=mean[4])


def format_benchmark_table(t: StageTimings) -> str:
    header = f"{'Stg.1':>8} {'Stg.2':>8} {'Stg.3':>8} {'Stg.4':>8} {'Time':>8} {'FPS':>8}"
    row = (
        f"{t.stg1:8.2f} {t.stg2:8.2f} {t.stg3:8.2f} {t.stg4:8.2f} "
        f"{t.total:8.2f} {t.fps:8.2f}"
    )
    return f"{header}\n{row}\nunattributed overhead: {t.overhead:.2f} ms"


# ---------------------------------------------------------------------------
# reproducibility records


def write_run_record(out_path, args_dict, inputs):
    record = {
        "command": " ".join(sys.argv),
        "config": {k: v for k, v in args_dict.items() if not isinstance(v, Path)},
        "inputs": {str(p): aio.content_hash(p) for p in inputs if Path(p).is_file()},
    }
    Path(out_path).write_text(json.dumps(record, indent=1, default=str) + "\n")


def _scene_input_files(manifest_path):
    base = Path(manifest_path).parent
    doc = json.loads(Path(manifest_path).read_text())
    files = [Path(manifest_path)]
    for key in ("mesh", "skeleton", "skinning", "graph", "cameras", "poses"):
        files.append(base / doc[key])
    return files


# ---------------------------------------------------------------------------
# websocket service


def encode_frame(image_f64, frame_id: int, fmt: int) -> bytes:
    u8 = aio.quantize_u8(image_f64)
    h, w = u8.shape[:2]
    if fmt == FORMAT_RAW:
        payload = u8.tobytes()
    else:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(u8).save(buf, format="PNG")
        payload = buf.getvalue()
    header = FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, fmt, w, h, frame_id, 0)
    assert len(header) == 16
    return header + payload


def decode_frame_header(blob: bytes):
    magic, version, fmt, w, h, frame_id, _ = FRAME_HEADER.unpack(blob[:16])
    if magic != FRAME_MAGIC:
        raise InvalidInputError(f"bad frame magic {magic!r}")
    return {"version": version, "format": fmt, "width": w, "height": h,
            "frame_id": frame_id, "payload": blob[16:]}


def _camera_from_message(msg) -> Camera:
    k = np.asarray(msg["K"], dtype=np.float64).reshape(3, 3)
    w2c = np.asarray(msg["W2C"], dtype=np.float64).reshape(4, 4)
    return Camera(fx=k[0, 0], fy=k[1, 1], cx=k[0, 2], cy=k[1, 2], w2c=w2c,
                  width=int(msg["width"]), height=int(msg["height"]),
                  near=float(msg.get("near", 0.05)), far=float(msg.get("far", 100.0)))


def _pose_from_message(msg, n_joints) -> rigmod.PoseFrame:
    joints = np.asarray(msg["joints"], dtype=np.float64)
    if joints.shape != (n_joints, 4):
        raise InvalidInputError(
            f"pose message has {joints.shape[0] if joints.ndim else 0} joints, "
            f"avatar has {n_joints}"
        )
    return rigmod.PoseFrame(joints, np.asarray(msg["root"], dtype=np.float64),
                            frame_id=int(msg["frame_id"]))


def build_app(session: AvatarSession):
    """FastAPI app exposing the /ws frame-streaming endpoint."""
    app = FastAPI()
    scene = session.scene

    @app.websocket("/ws")
    async def ws(websocket: WebSocket):
        await websocket.accept()
        state = {
            "pose": scene.pose(0),
            "camera": scene.cameras[0],
            "frame_id": 0,
            "format": FORMAT_PNG,
        }
        dirty = asyncio.Event()
        send_lock = asyncio.Lock()

        async def render_loop():
            while True:
                await dirty.wait()
                dirty.clear()
                pose, camera = state["pose"], state["camera"]
                frame_id = state["frame_id"]
                fmt = state["format"]
                img = await asyncio.to_thread(session.render_pose, pose, camera)
                blob = encode_frame(img, frame_id, fmt)
                async with send_lock:
                    await websocket.send_bytes(blob)

        worker = asyncio.create_task(render_loop())
        try:
            while True:
                text = await websocket.receive_text()
                try:
                    msg = json.loads(text)
                    mtype = msg.get("type")
                    if mtype == "hello":
                        fmt = FORMAT_RAW if "raw" in msg.get("formats", []) else FORMAT_PNG
                        state["format"] = fmt
                        await websocket.send_text(json.dumps({
                            "type": "hello",
                            "format": "raw" if fmt == FORMAT_RAW else "png",
                        }))
                    elif mtype == "pose":
                        pose = _pose_from_message(msg, scene.skeleton.num_joints)
                        state["pose"] = pose
                        state["frame_id"] = pose.frame_id
                        dirty.set()
                    elif mtype == "camera":
                        state["camera"] = _camera_from_message(msg)
                        if "frame_id" in msg:
                            state["frame_id"] = int(msg["frame_id"])
                        dirty.set()
                    else:
                        raise InvalidInputError(f"unknown message type {mtype!r}")
                except WebSocketDisconnect:
                    raise
                except Exception as exc:
                    async with send_lock:
                        await websocket.send_text(json.dumps({
                            "type": "error", "detail": str(exc),
                        }))
        except WebSocketDisconnect:
            pass
        finally:
            worker.cancel()

    return app


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synthetic(args):
    spec = aio.SyntheticSceneSpec(
        num_cameras=args.cameras, num_frames=args.frames,
        image_width=args.width, image_height=args.height,
        texel_resolution=args.texel_res, seed=args.seed,
    )
    manifest = aio.make_synthetic_scene(spec, args.out)
    write_run_record(Path(args.out) / "run_record.json", vars(args), [manifest])
    print(f"wrote scene bundle: {manifest}")
    return 0


def cmd_render(args):
    scene = aio.load_scene(_require(args.scene, "scene"))
    session = AvatarSession(scene, _require(args.checkpoint, "checkpoint"))
    if not 0 <= args.pose_frame < scene.num_frames:
        raise UsageError(f"pose frame {args.pose_frame} out of range 0..{scene.num_frames - 1}")
    if not 0 <= args.camera < len(scene.cameras):
        raise UsageError(f"camera {args.camera} out of range 0..{len(scene.cameras) - 1}")
    img = session.render_pose(scene.pose(args.pose_frame), scene.cameras[args.camera],
                              renderer=args.renderer)
    out = Path(args.out)
    if args.format == "png":
        aio.write_png(out, img)
    else:
        aio.write_float_image(out, img)
    print(f"wrote {out}")
    return 0


def cmd_fit(args):
    scene = aio.load_scene(_require(args.scene, "scene"))
    cfg = tr.TrainConfig(warmup_frames=args.warmup_frames, fit_steps=args.steps,
                         fit_lr=args.lr, seed=args.seed, fit_target_psnr=args.target_psnr)
    snapshots = tr.fit_pseudo_gt(scene, cfg, verbose=args.verbose)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for snap in snapshots:
        av.write_param_maps(out / f"pseudo_gt_f{snap.frame_id:03d}.ashp",
                            snap.maps, scene.table.coverage_mask())
    write_run_record(out / "run_record.json", vars(args), _scene_input_files(args.scene))
    print(f"wrote {len(snapshots)} pseudo-GT snapshots to {out}")
    return 0


def _load_snapshots(scene, snapshot_dir):
    paths = sorted(Path(snapshot_dir).glob("pseudo_gt_f*.ashp"))
    if not paths:
        raise UsageError(f"no pseudo-GT snapshots found in {snapshot_dir}")
    snaps = []
    for p in paths:
        f = int(p.stem.split("_f")[1])
        maps, mask = av.read_param_maps(p)
        setup = scene.frame_setup(f)
        positions = av.posed_texel_positions(setup["mu_bar"], setup["texel_dqs"])
        snaps.append(tr.PseudoGtSnapshot(frame_id=f, maps=maps, positions=positions))
    return snaps


def cmd_pretrain(args):
    scene = aio.load_scene(_require(args.scene, "scene"))
    snaps = _load_snapshots(scene, _require(args.snapshots, "snapshot directory"))
    geo, app, mlp = fresh_decoders(scene, seed=args.seed, preset=args.preset)
    cfg = tr.TrainConfig(pretrain_steps=args.steps, pretrain_lr=args.lr, seed=args.seed)
    history = tr.pretrain_decoders(snaps, scene, geo, app, mlp, cfg, verbose=args.verbose)
    save_decoder_checkpoint(args.out, geo, app, mlp)
    write_run_record(Path(str(args.out) + ".run.json"), vars(args),
                     _scene_input_files(args.scene))
    print(f"pretrained {args.steps} steps: L_pre {history[0]:.3e} -> {history[-1]:.3e}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args):
    scene = aio.load_scene(_require(args.scene, "scene"))
    geo, app, mlp = load_decoder_checkpoint(_require(args.weights, "weights checkpoint"))
    cfg = tr.TrainConfig(train_steps=args.steps, lr_geometry=args.lr_geo,
                         lr_appearance=args.lr_app, seed=args.seed,
                         eval_interval=args.eval_interval,
                         train_target_psnr=args.target_psnr,
                         train_target_ssim=args.target_ssim)
    opt_state = None
    if args.resume:
        opt_state = load_train_state(args.resume, geo, app, mlp)
    log_path = Path(str(args.out) + ".metrics.csv")
    rows, final_state = tr.train_full(scene, geo, app, mlp, cfg, log_path=log_path,
                                      verbose=args.verbose, optimizer_state=opt_state)
    save_decoder_checkpoint(args.out, geo, app, mlp)
    save_train_state(Path(str(args.out) + ".state.npz"), geo, app, mlp, final_state)
    write_run_record(Path(str(args.out) + ".run.json"), vars(args),
                     _scene_input_files(args.scene))
    if rows:
        print(f"final: psnr {rows[-1][4]:.2f} ssim {rows[-1][3]:.4f}")
    print(f"wrote {args.out}")
    return 0


def save_train_state(path, geo, app, mlp, opt_state):
    """Bit-exact float64 training state (weights + Adam moments + step counts)."""
    arrays = {}
    for prefix, net in (("geo", geo), ("app", app), ("mlp", mlp)):
        for k, v in net.parameters().items():
            arrays[f"w.{prefix}.{k}"] = v
    for group in ("geo", "app"):
        arrays[f"step.{group}"] = np.array(opt_state[group]["step"])
        for kind in ("m", "v"):
            for k, arr in opt_state[group][kind].items():
                arrays[f"{kind}.{group}.{k}"] = arr
    np.savez(path, **arrays)


def load_train_state(path, geo, app, mlp):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"training state not found: {path}")
    data = np.load(path)
    for prefix, net in (("geo", geo), ("app", app), ("mlp", mlp)):
        for k, v in net.parameters().items():
            v[:] = data[f"w.{prefix}.{k}"]
    state = {}
    for group in ("geo", "app"):
        m = {k[len(f"m.{group}.") :]: data[k] for k in data.files if k.startswith(f"m.{group}.")}
        v = {k[len(f"v.{group}.") :]: data[k] for k in data.files if k.startswith(f"v.{group}.")}
        state[group] = {"step": int(data[f"step.{group}"]), "m": m, "v": v}
    return state


def cmd_benchmark(args):
    scene = aio.load_scene(_require(args.scene, "scene"))
    session = AvatarSession(
        scene,
        args.checkpoint if args.checkpoint else None,
        texel_resolution=args.texel_res,
    )
    if session.kind is None:
        session.geo, session.app, session.mlp = fresh_decoders(scene, seed=0)
        session.kind = "weights"
    camera = scene.cameras[0]
    if args.size:
        w, h = (int(x) for x in args.size.lower().split("x"))
        sx, sy = w / camera.width, h / camera.height
        camera = Camera(fx=camera.fx * sx, fy=camera.fy * sy,
                        cx=camera.cx * sx, cy=camera.cy * sy,
                        w2c=camera.w2c, width=w, height=h,
                        near=camera.near, far=camera.far)
    timings = benchmark_session(session, args.frames, camera)
    print(format_benchmark_table(timings))
    return 0


def cmd_serve(args):
    import uvicorn

    scene = aio.load_scene(_require(args.scene, "scene"))
    session = AvatarSession(scene, _require(args.checkpoint, "checkpoint"))
    app = build_app(session)
    print(f"serving avatar frames on ws://{args.host}:{args.port}/ws")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _require(path, label):
    if path is None:
        raise UsageError(f"{label} path is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{label} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="texelsplat",
                                     description="Animatable Gaussian-splat avatar engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a self-consistent synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--texel-res", type=int, default=32)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("render", help="render one pose from a scene and checkpoint")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose-frame", type=int, default=0)
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "float"), default="png")
    p.add_argument("--renderer", choices=("tiled", "reference"), default="tiled")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="fit per-frame pseudo-GT splat parameters")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warmup-frames", type=int, default=4)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--target-psnr", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("pretrain", help="pretrain decoders against pseudo-GT snapshots")
    p.add_argument("--scene", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--preset", choices=("desk", "production"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="photometric end-to-end decoder training")
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr-geo", type=float, default=1e-4)
    p.add_argument("--lr-app", type=float, default=2e-4)
    p.add_argument("--eval-interval", type=int, default=200)
    p.add_argument("--target-psnr", type=float, default=None)
    p.add_argument("--target-ssim", type=float, default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="per-stage runtime table")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", default=None, help="render size WxH (default: scene cameras)")
    p.add_argument("--texel-res", type=int, default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("serve", help="WebSocket frame-streaming service")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (InvalidInputError, FileNotFoundError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
