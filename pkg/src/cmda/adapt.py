"""Two-stage training: cross-modal LiDAR pre-training, then adversarial LiDAR-only self-training.

Stage toggles are structural.  ``pretrain_step`` never builds the domain
or entropy terms and ``selftrain_step`` never touches the camera stream or
the alignment term, whatever the loss weights say.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .camerabev import CameraStream
from .detect import (BoxCoder, DetectionHead, PseudoLabelSet, assign_region, assign_targets, decode,
                     make_pseudo_labels, nms)
from .diffcore import ContractError, Tape, Tensor
from .evaluation import EvalReport, evaluate
from .geometry import Box7
from .lidarbev import LidarEncoder, VoxelGridSpec, raw_bev, raw_channels
from .losses import LossWeights, cmki_loss, det_loss, domain_loss, entropy_loss, total_loss
from .mixup import polar_mix, sample_theta
from .nn import SGD, Module, linear, uniform_init, zeros_param
from .scene import Frame

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CMDK"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    grid_range: tuple[float, ...] = (-40.0, -40.0, -2.0, 40.0, 40.0, 4.0)
    voxel_size: tuple[float, ...] = (1.6, 1.6, 0.75)
    voxel_channels: int = 8
    lidar_hidden: int = 32
    head_features: int = 32
    disc_hidden: int = 32
    depth_bins: int = 16
    depth_near: float = 1.0
    depth_far: float = 60.0
    image_hidden: int = 16
    image_size: int = 64
    xy_offsets: bool = True
    z_ref: float = -0.825
    size_ref: tuple[float, ...] = (4.3, 1.85, 1.55)
    seed: int = 0

    @property
    def grid(self) -> VoxelGridSpec:
        return VoxelGridSpec(tuple(self.grid_range), tuple(self.voxel_size))


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 10
    rounds: int = 4
    batch_size: int = 1
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    refresh_period: int = 1
    theta_low: float = math.pi / 2
    theta_high: float = 3 * math.pi / 2
    pos_weight: float = 20.0
    code_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    t_pos: float = 0.6
    disc_score: float = 0.3
    disc_lr_scale: float = 1.0
    grl_warmup: int = 0  # steps over which the reversal strength ramps 0 -> 1
    adversarial: bool = True
    max_steps: int = 0  # 0 = no cap; otherwise stop the stage after this many steps

    def __post_init__(self):
        if self.stage not in ("pretrain", "selftrain"):
            raise ContractError(f"unknown stage {self.stage!r}")
        self.weights = self.weights.for_stage(self.stage)


@dataclass
class EvalConfig:
    score_thresh: float = 0.1
    nms_thresh: float = 0.1
    iou_thresh: float = 0.7
    max_dets: int = 60


class Discriminator(Module):
    """C_f -> hidden (ReLU) -> 2 domain logits (0 = source, 1 = target)."""

    def __init__(self, in_channels: int, hidden: int = 32, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.params["w1"] = uniform_init(rng, in_channels, (in_channels, hidden))
        self.params["b1"] = zeros_param((hidden,))
        self.params["w2"] = uniform_init(rng, hidden, (hidden, 2))
        self.params["b2"] = zeros_param((2,))

    def __call__(self, feats) -> Tensor:
        p = self.params
        return linear(dc.relu(linear(feats, p["w1"], p["b1"])), p["w2"], p["b2"])


class CMDAModel:
    """LiDAR encoder, camera stream, detection head and domain discriminator."""

    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        self.grid = cfg.grid
        Z = self.grid.Z
        zc = Z * cfg.voxel_channels
        self.coder = BoxCoder(self.grid, cfg.z_ref, tuple(cfg.size_ref))
        self.lidar = LidarEncoder(Z * raw_channels(cfg.xy_offsets), zc, cfg.lidar_hidden, seed=cfg.seed)
        self.camera = CameraStream(cfg.voxel_channels, cfg.depth_bins, cfg.depth_near, cfg.depth_far,
                                   cfg.image_hidden, seed=cfg.seed + 1)
        self.head = DetectionHead(zc, cfg.head_features, seed=cfg.seed + 2)
        self.disc = Discriminator(cfg.head_features, cfg.disc_hidden, seed=cfg.seed + 3)

    def parameters(self, groups=("lidar", "camera", "head", "disc")) -> dict[str, Tensor]:
        out = {}
        for g in groups:
            for name, p in getattr(self, g).named_parameters(g + "."):
                out[name] = p
        return out

    def lidar_bev(self, points) -> Tensor:
        return self.lidar(raw_bev(points, self.grid, self.cfg.xy_offsets))

    def detect(self, points, ecfg: EvalConfig, score_thresh: float | None = None):
        with dc.no_grad():
            out = self.head(self.lidar_bev(points))
        thr = ecfg.score_thresh if score_thresh is None else score_thresh
        return nms(decode(out, self.coder, thr, ecfg.max_dets), ecfg.nms_thresh)


@dataclass
class TrainState:
    model: CMDAModel
    cfg: TrainConfig
    opt: SGD
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    round: int = 0
    pseudo: dict[str, PseudoLabelSet] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def stage_groups(cfg: TrainConfig) -> tuple[str, ...]:
    if cfg.stage == "pretrain":
        return ("lidar", "camera", "head") if cfg.weights.cmki > 0 else ("lidar", "head")
    return ("lidar", "head", "disc") if cfg.adversarial else ("lidar", "head")


def make_state(model: CMDAModel, cfg: TrainConfig) -> TrainState:
    params = model.parameters(stage_groups(cfg))
    return TrainState(model, cfg, SGD(params, cfg.lr, cfg.momentum), np.random.default_rng(cfg.seed))


def _apply_update(state: TrainState) -> None:
    scale = None
    if state.cfg.disc_lr_scale != 1.0:
        scale = {k: state.cfg.disc_lr_scale for k in state.opt.params if k.startswith("disc.")}
    state.opt.step(scale)
    state.opt.zero_grad()
    state.step += 1


def pretrain_step(state: TrainState, frames) -> dict:
    """One SGD step on a batch of labelled frames: L_det plus (optionally) the alignment term."""
    cfg, model = state.cfg, state.model
    if cfg.stage != "pretrain":
        raise ContractError("pretrain_step called with a self-training config")
    frames = [frames] if isinstance(frames, Frame) else list(frames)
    w = cfg.weights
    use_cmki = w.t_cmki == 1 and w.cmki > 0
    sums: dict[str, float] = {}
    for frame in frames:
        if use_cmki and frame.camera is None:
            raise ContractError(f"frame {frame.id}: cross-modal pretraining needs a camera frame")
        with Tape() as tape:
            f_p = model.lidar_bev(frame.points)
            out = model.head(f_p)
            targets = assign_targets(frame.labels, model.coder)
            parts = {"det": det_loss(out.logits, out.box_params, targets, cfg.pos_weight, code_weights=cfg.code_weights)}
            if use_cmki:
                f_i = model.camera(frame.camera, model.grid)
                mask = model.camera.coverage(frame.camera, model.grid)
                parts["cmki"] = cmki_loss(f_p, f_i, mask)
            total = dc.mul(total_loss(parts, w), 1.0 / len(frames))
            tape.backward(total)
        for k, v in parts.items():
            sums[k] = sums.get(k, 0.0) + v.item() / len(frames)
        sums["total"] = sums.get("total", 0.0) + total.item()
    _apply_update(state)
    return sums


def grl_scale(step: int, warmup: int) -> float:
    """Annealed reversal strength 2 / (1 + exp(-10 p)) - 1 with p = step / warmup (1 without warm-up)."""
    if warmup <= 0 or step >= warmup:
        return 1.0
    return 2.0 / (1.0 + math.exp(-10.0 * step / warmup)) - 1.0


def selftrain_step(state: TrainState, source: Frame, target: Frame, pseudo: list[Box7]) -> dict:
    """Mix a source and a target scene, then detect + adversarially align + sharpen one step.

    The discriminator sees post-NMS instance features through grad_reverse, so one
    backward pass trains it to separate domains and the encoder/head to confuse it.
    """
    cfg, model = state.cfg, state.model
    if cfg.stage != "selftrain":
        raise ContractError("selftrain_step called with a pretraining config")
    w = cfg.weights
    theta, start = sample_theta(state.rng, cfg.theta_low, cfg.theta_high)
    mixed = polar_mix(source.points, source.labels, target.points, pseudo, theta, start)
    info: dict = {"theta": theta, "start": start}
    with Tape() as tape:
        f_p = model.lidar_bev(mixed.points)
        out = model.head(f_p)
        targets = assign_targets(mixed.boxes, model.coder)
        parts = {"det": det_loss(out.logits, out.box_params, targets, cfg.pos_weight, code_weights=cfg.code_weights)}
        if w.ent != 0:
            parts["ent"] = entropy_loss(f_p)
        if cfg.adversarial:
            dets = nms(decode(out, model.coder, cfg.disc_score, 60), 0.1)
            assign_region(dets, start, theta)
            labels = np.array([0 if d.region == "source" else 1 for d in dets], dtype=np.int64)
            info["n_instances"] = len(dets)
            if dets:
                X, Y, C = out.cell_features.shape
                feats = dc.take_rows(dc.reshape(out.cell_features, (X * Y, C)), [d.cell for d in dets])
                logits = model.disc(dc.grad_reverse(feats, grl_scale(state.step, cfg.grl_warmup)))
                parts["d"], _ = domain_loss(logits, labels)
                info["disc_acc"] = float(np.mean(np.argmax(logits.data, axis=1) == labels))
                info["n_source"] = int((labels == 0).sum())
            else:
                parts["d"] = Tensor(0.0)
        total = total_loss(parts, w)
        if total._tape is tape:
            tape.backward(total)
    for k, v in parts.items():
        info[k] = v.item()
    info["total"] = total.item()
    _apply_update(state)
    return info


def refresh_pseudo_labels(model: CMDAModel, target_frames, t_pos: float = 0.6,
                          ecfg: EvalConfig | None = None) -> dict[str, PseudoLabelSet]:
    """Inference + NMS + confidence threshold over all target frames (replaces the store)."""
    ecfg = ecfg or EvalConfig()
    store = {}
    for f in sorted(target_frames, key=lambda fr: fr.id):
        dets = model.detect(f.points, ecfg, score_thresh=t_pos)
        store[f.id] = make_pseudo_labels(dets, t_pos)
    return store


_worker_model: CMDAModel | None = None


def _init_worker(model: CMDAModel) -> None:
    global _worker_model
    _worker_model = model


def _detect_in_worker(points, ecfg: EvalConfig):
    return _worker_model.detect(points, ecfg)


def run_inference(model: CMDAModel, frames, ecfg: EvalConfig, workers: int = 1):
    """Post-NMS detections per frame, in input order (parallel across frames if ``workers`` > 1)."""
    frames = list(frames)
    if workers <= 1 or len(frames) < 2:
        return [model.detect(f.points, ecfg) for f in frames]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model,)) as pool:
        return list(pool.map(_detect_in_worker, [f.points for f in frames], [ecfg] * len(frames)))


def evaluate_model(model: CMDAModel, frames, ecfg: EvalConfig, label: str = "standard",
                   workers: int = 1) -> EvalReport:
    dets = run_inference(model, frames, ecfg, workers)
    return evaluate(dets, [f.labels for f in frames], [f.points for f in frames], ecfg.iou_thresh, label)


# ------------------------------------------------------------------- loops


def train_pretrain(state: TrainState, frames, log_every: int = 0) -> list[dict]:
    """Run the remaining pretraining epochs; frames are reshuffled every epoch."""
    cfg = state.cfg
    frames = list(frames)
    while state.epoch < cfg.epochs:
        order = state.rng.permutation(len(frames))
        for b in range(0, len(order), cfg.batch_size):
            batch = [frames[k] for k in order[b:b + cfg.batch_size]]
            parts = pretrain_step(state, batch)
            parts.update(epoch=state.epoch, step=state.step)
            state.history.append(parts)
            if log_every and state.step % log_every == 0:
                log.info("pretrain step %d: %s", state.step, {k: round(v, 4) for k, v in parts.items()})
            if cfg.max_steps and state.step >= cfg.max_steps:
                state.epoch = cfg.epochs
                return state.history
        state.epoch += 1
    return state.history


def selftrain_round(state: TrainState, source_frames, target_frames) -> list[dict]:
    """One round: ``epochs`` passes over the target set, each paired with a random source frame."""
    cfg = state.cfg
    out = []
    targets = sorted(target_frames, key=lambda f: f.id)
    for _ in range(cfg.epochs):
        order = state.rng.permutation(len(targets))
        for k in order:
            tgt = targets[k].without_labels()
            src = source_frames[int(state.rng.integers(len(source_frames)))]
            pl = state.pseudo.get(tgt.id, PseudoLabelSet())
            info = selftrain_step(state, src, tgt, pl.boxes)
            out.append(info)
            if cfg.max_steps and len(out) >= cfg.max_steps:
                state.history += out
                return out
    state.history += out
    return out


class MetricsLog:
    """Evaluation rows kept in memory and appended as JSON lines to ``path`` (if given)."""

    def __init__(self, path=None, truncate: bool = True):
        self.path = Path(path) if path is not None else None
        self.rows: list[dict] = []
        self.reports: list[EvalReport] = []
        if self.path is not None and truncate:
            self.path.write_text("", encoding="utf-8")

    def emit(self, model: CMDAModel, eval_frames, ecfg: EvalConfig, round_idx: int, stage: str, label: str,
             extra: dict | None = None) -> EvalReport:
        rep = evaluate_model(model, eval_frames, ecfg, label)
        self.reports.append(rep)
        row = {"round": round_idx, "stage": stage, "label": label, "bev_ap": rep.bev_ap, "ap_3d": rep.ap_3d,
               "n_gt": rep.n_gt, "n_det": rep.n_det, "tp_3d": rep.tp_3d, "fp_3d": rep.fp_3d}
        row.update(extra or {})
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        return rep


def run_pretrain(state: TrainState, source_frames, eval_frames, ecfg: EvalConfig, metrics: MetricsLog | None = None,
                 label: str = "Direct Transfer") -> EvalReport | None:
    """Pretraining stage followed by one evaluation (round 0) on ``eval_frames``."""
    train_pretrain(state, source_frames)
    if metrics is None or not eval_frames:
        return None
    return metrics.emit(state.model, eval_frames, ecfg, 0, "pretrain", label, {"steps": state.step})


def run_selftrain(state: TrainState, source_frames, target_frames, eval_frames, ecfg: EvalConfig,
                  metrics: MetricsLog | None = None, on_round=None) -> list[dict]:
    """Remaining self-training rounds; pseudo-labels are refreshed every ``refresh_period`` rounds.

    ``on_round(state)`` runs after each round's evaluation (e.g. to checkpoint).
    Returns the per-step info dicts of the rounds run here.
    """
    cfg = state.cfg
    unlabeled = sorted((f.without_labels() for f in target_frames), key=lambda f: f.id)
    infos_all = []
    while state.round < cfg.rounds:
        r = state.round + 1
        if (r - 1) % cfg.refresh_period == 0 or not state.pseudo:
            state.pseudo = refresh_pseudo_labels(state.model, unlabeled, cfg.t_pos, ecfg)
        infos = selftrain_round(state, source_frames, unlabeled)
        infos_all += infos
        state.round = r
        accs = [i["disc_acc"] for i in infos if "disc_acc" in i]
        if metrics is not None and eval_frames:
            n_pl = sum(len(p.boxes) for p in state.pseudo.values())
            metrics.emit(state.model, eval_frames, ecfg, r, "selftrain", f"self-train round {r}",
                         {"steps": state.step, "disc_acc": float(np.mean(accs)) if accs else None,
                          "pseudo_labels": n_pl})
        if on_round is not None:
            on_round(state)
    return infos_all


def run_experiment(model_cfg: ModelConfig, pre_cfg: TrainConfig, self_cfg: TrainConfig, ecfg: EvalConfig,
                   source_frames, target_frames, eval_frames=None, metrics_path=None,
                   model: CMDAModel | None = None, skip_pretrain: bool = False) -> dict:
    """Pretrain on source, then ``self_cfg.rounds`` self-training rounds, evaluating after each.

    Round 0 is the pretrained model on the target domain (Direct Transfer).
    Target labels are never used for training; ``eval_frames`` (default: the
    target frames) supply ground truth for evaluation only.
    """
    eval_frames = list(target_frames if eval_frames is None else eval_frames)
    model = model or CMDAModel(model_cfg)
    metrics = MetricsLog(metrics_path)
    pre_state = None
    if not skip_pretrain:
        pre_state = make_state(model, pre_cfg)
        run_pretrain(pre_state, source_frames, eval_frames, ecfg, metrics)
    self_state = make_state(model, self_cfg)
    infos = run_selftrain(self_state, source_frames, target_frames, eval_frames, ecfg, metrics)
    return {"reports": metrics.reports, "metrics": metrics.rows, "model": model,
            "disc_curve": [i.get("disc_acc") for i in infos], "steps": infos,
            "pretrain_state": pre_state, "selftrain_state": self_state}


def train_oracle(model_cfg: ModelConfig, cfg: TrainConfig, target_frames) -> CMDAModel:
    """Fully supervised reference: detection-only training on labelled target frames."""
    cfg = replace(cfg, stage="pretrain", weights=replace(cfg.weights, cmki=0.0))
    model = CMDAModel(model_cfg)
    train_pretrain(make_state(model, cfg), target_frames)
    return model


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, extra: dict | None = None) -> None:
    """Binary container: magic, version, JSON metadata, then named float64 tensor blocks."""
    meta = {
        "extra": extra or {},
        "stage": state.cfg.stage,
        "epoch": state.epoch,
        "step": state.step,
        "round": state.round,
        "rng": state.rng.bit_generator.state,
        "model_config": _jsonable(state.model.cfg.__dict__),
        "pseudo_thresholds": {k: v.threshold for k, v in state.pseudo.items()},
    }
    blocks: list[tuple[str, np.ndarray]] = []
    for name, p in state.model.parameters().items():
        blocks.append(("param/" + name, p.data))
    for name, v in state.opt.velocity.items():
        blocks.append(("velocity/" + name, v))
    for fid, pl in sorted(state.pseudo.items()):
        arr = np.array([list(b.as_array()) + [s] for b, s in zip(pl.boxes, pl.scores)]).reshape(-1, 9)
        blocks.append(("pseudo/" + fid, arr))
    out = bytearray(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(mb)) + mb
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, ValueError) as err:
        raise ValueError(f"{path}: corrupt or truncated checkpoint ({err})") from None


def _parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    (ml,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos:pos + ml].decode("utf-8"))
    pos += ml
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    blocks = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode("utf-8")
        pos += nl
        (nd,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{nd}I", buf, pos)
        pos += 4 * nd
        count = int(np.prod(shape)) if nd else 1
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(buf):
        raise ValueError("trailing bytes after the last block")
    return meta, blocks


def model_config_from_meta(meta: dict) -> ModelConfig:
    mc = dict(meta["model_config"])
    for k in ("grid_range", "voxel_size", "size_ref"):
        mc[k] = tuple(mc[k])
    return ModelConfig(**mc)


def load_model(path) -> tuple[CMDAModel, dict]:
    meta, blocks = read_checkpoint(path)
    model = CMDAModel(model_config_from_meta(meta))
    for name, p in model.parameters().items():
        p.data[...] = blocks["param/" + name]
    return model, meta


def load_checkpoint(path, cfg: TrainConfig) -> TrainState:
    """Rebuild model, optimizer momentum, pseudo-labels and RNG so training resumes bit-exactly."""
    meta, blocks = read_checkpoint(path)
    model, _ = load_model(path)
    state = make_state(model, cfg)
    for name in state.opt.velocity:
        key = "velocity/" + name
        if key in blocks and meta["stage"] == cfg.stage:
            state.opt.velocity[name] = blocks[key].copy()
    if meta["stage"] == cfg.stage:
        state.rng.bit_generator.state = meta["rng"]
        state.epoch, state.step, state.round = meta["epoch"], meta["step"], meta.get("round", 0)
        thresholds = meta.get("pseudo_thresholds", {})
        for name, arr in blocks.items():
            if name.startswith("pseudo/"):
                fid = name[len("pseudo/"):]
                boxes = [Box7.from_array(row[:8]) for row in arr]
                state.pseudo[fid] = PseudoLabelSet(boxes, [float(row[8]) for row in arr],
                                                   thresholds.get(fid, cfg.t_pos))
    return state
