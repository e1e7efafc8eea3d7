"""The synthetic adaptation experiment: Direct Transfer, CMKI, CMKI + CDAN and Oracle on one seed.

``headline(cfg)`` generates the three splits, trains the four models and
returns their target-domain reports plus the discriminator accuracy curve.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapt
from .config import ExperimentConfig
from .evaluation import EvalReport, UndefinedResultError, closed_gap
from .scene import generate_dataset

log = logging.getLogger("cmda.experiment")


@dataclass
class HeadlineResult:
    direct: EvalReport  # plain source pretraining on the target domain
    cmki: EvalReport  # CMKI pretraining on the target domain
    full: EvalReport  # CMKI + CDAN self-training, after the last round
    oracle: EvalReport  # supervised on target labels
    rounds: list[EvalReport] = field(default_factory=list)
    disc_acc: list[float] = field(default_factory=list)  # per-step discriminator batch accuracy
    seconds: dict = field(default_factory=dict)

    def closed_gap(self) -> float | None:
        try:
            return closed_gap(100 * self.full.ap_3d, 100 * self.direct.ap_3d, 100 * self.oracle.ap_3d)
        except UndefinedResultError:
            return None

    def disc_windows(self, width: int = 50) -> list[float]:
        """Mean discriminator accuracy over consecutive windows of ``width`` scored steps."""
        a = np.asarray(self.disc_acc, dtype=np.float64)
        return [float(a[k:k + width].mean()) for k in range(0, len(a), width)]

    def summary(self) -> dict:
        out = {k: 100 * getattr(self, k).ap_3d for k in ("direct", "cmki", "full", "oracle")}
        out["rounds"] = [100 * r.ap_3d for r in self.rounds]
        out["closed_gap"] = self.closed_gap()
        out["disc_windows"] = self.disc_windows()
        out["seconds"] = dict(self.seconds)
        return out


def make_splits(cfg: ExperimentConfig, workers: int = 1):
    """(source with camera, target, held-out target evaluation split)."""
    ds = cfg.dataset
    src = generate_dataset(cfg.source.to_spec(), ds.source_frames, "source", with_camera=ds.camera,
                           prefix="source", image_size=ds.image_size, workers=workers)
    tgt = generate_dataset(cfg.target.to_spec(), ds.target_frames, "target", with_camera=False,
                           prefix="target", workers=workers)
    val = generate_dataset(cfg.target.to_spec(), ds.eval_frames, "target", with_camera=False, stream=1,
                           prefix="eval", workers=workers)
    return src, tgt, val


def headline(cfg: ExperimentConfig | None = None, workers: int = 1, splits=None) -> HeadlineResult:
    cfg = cfg or ExperimentConfig()
    clock = {}
    t0 = time.perf_counter()
    src, tgt, val = splits if splits is not None else make_splits(cfg, workers)
    clock["generate"] = time.perf_counter() - t0
    ecfg = cfg.eval
    pre = cfg.train_config("pretrain")
    plain_cfg = replace(pre, weights=replace(pre.weights, cmki=0.0))

    def timed(name, fn):
        t = time.perf_counter()
        out = fn()
        clock[name] = time.perf_counter() - t
        log.info("%s done in %.1fs", name, clock[name])
        return out

    oracle = timed("oracle", lambda: adapt.train_oracle(cfg.model, pre, tgt))
    rep_oracle = adapt.evaluate_model(oracle, val, ecfg, "Oracle", workers)

    plain = adapt.CMDAModel(cfg.model)
    timed("plain", lambda: adapt.train_pretrain(adapt.make_state(plain, plain_cfg), src))
    rep_direct = adapt.evaluate_model(plain, val, ecfg, "Direct Transfer", workers)

    model = adapt.CMDAModel(cfg.model)
    timed("cmki", lambda: adapt.train_pretrain(adapt.make_state(model, pre), src))
    rep_cmki = adapt.evaluate_model(model, val, ecfg, "CMKI", workers)

    state = adapt.make_state(model, cfg.train_config("selftrain"))
    metrics = adapt.MetricsLog()
    infos = timed("selftrain", lambda: adapt.run_selftrain(state, src, tgt, val, ecfg, metrics))
    rounds = metrics.reports
    full = rounds[-1] if rounds else rep_cmki
    clock["total"] = time.perf_counter() - t0
    return HeadlineResult(rep_direct, rep_cmki, full, rep_oracle, rounds,
                          [i["disc_acc"] for i in infos if "disc_acc" in i], clock)
