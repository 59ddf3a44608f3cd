"""Stage-1 multi-expert training, stage-2 calibration training, re-balancing baselines and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses
from .ensemble import CalibrationParams, select_loss
from .model import (
    BackboneParams,
    ExpertParams,
    ModelDims,
    apply_update,
    backbone_backward,
    backbone_forward_cached,
    expert_backward,
    expert_forward_cached,
    init_params,
    softmax,
    tie_context,
    window_mean,
    window_mean_backward,
)
from .synthgen import IGNORE, CategoryGrouping, FrequencyProfile, SceneSample, compute_frequency, stack

log = logging.getLogger(__name__)

MODES = ("medoe", "baseline", "mcn", "focal", "undersample")
SINGLE_EXPERT_MODES = ("baseline", "focal", "undersample")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "medoe"
    iters: int = 600
    lr: float = 0.1
    batch: int = 4
    alpha: float = losses.DEFAULT_ALPHA
    seed: int = 0
    poly: bool = False
    focal_gamma: float = 2.0
    undersample_ratio: float | None = None  # None: balance head against body
    F1: int = 16
    F2: int = 16
    radius: int = 2
    moe_iters: int = 1000
    moe_lr: float = 0.005  # paired with the pixel-sum reduction
    moe_batch: int = 1
    moe_reduction: str = "sum"
    expert_weights: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.iters <= 0 or self.moe_iters < 0:
            raise ValueError("iteration counts must be positive")
        if self.lr < 0 or self.moe_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.batch <= 0 or self.moe_batch <= 0:
            raise ValueError("batch sizes must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.focal_gamma < 0:
            raise ValueError("focal gamma must be non-negative")
        r = self.undersample_ratio
        if r is not None and not 0 < r <= 1:
            raise ValueError(f"undersample ratio must lie in (0, 1], got {r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["expert_weights"] is not None:
            d["expert_weights"] = list(d["expert_weights"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if d.get("expert_weights") is not None:
            d["expert_weights"] = tuple(d["expert_weights"])
        return cls(**d)


@dataclass
class TrainedModel:
    backbone: BackboneParams
    experts: list[ExpertParams]
    grouping: CategoryGrouping
    profile: FrequencyProfile
    config: TrainConfig
    calibration: CalibrationParams | None = None
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 3)))  # (steps, K, [ce, aux, total])

    def __post_init__(self):
        if len(self.experts) != self.grouping.K:
            raise ValueError(f"{len(self.experts)} experts but {self.grouping.K} expert label sets")

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def c(self) -> int:
        return self.grouping.c


# ---------------------------------------------------------------------------
# inference


def expert_probabilities(model: TrainedModel, features: np.ndarray) -> list[np.ndarray]:
    """Per-expert softmax outputs for a feature grid ``(..., H, W, D)``."""
    h, _ = backbone_forward_cached(model.backbone, features)
    m = window_mean(h, model.experts[0].radius)
    return [softmax(expert_forward_cached(e, h, m)[0]) for e in model.experts]


# ---------------------------------------------------------------------------
# stage 1


def _label_lut(allowed) -> np.ndarray:
    lut = np.full(256, IGNORE, dtype=np.uint8)
    for k in allowed:
        lut[k] = k
    return lut


def balanced_ratio(profile: FrequencyProfile, grouping: CategoryGrouping) -> float:
    """Fraction of head pixels to keep so the head count matches the body count."""
    head = profile.counts[grouping.members("head")].sum()
    body = profile.counts[grouping.members("body")].sum()
    return float(min(1.0, body / head))


def undersample_head(labels: np.ndarray, head: Sequence[int], ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Keep ``round(ratio * n_head_pixels)`` head pixels chosen uniformly; relabel the rest IGNORE."""
    flat = labels.reshape(-1)
    idx = np.flatnonzero(np.isin(flat, list(head)))
    keep = int(round(ratio * idx.size))
    if keep >= idx.size:
        return labels.copy()
    drop = rng.choice(idx, size=idx.size - keep, replace=False)
    out = flat.copy()
    out[drop] = IGNORE
    return out.reshape(labels.shape)


def _lr_at(cfg: TrainConfig, step: int, lr: float, total: int) -> float:
    if not cfg.poly:
        return lr
    return lr * (1.0 - step / total) ** 0.9


def train_stage1(
    dataset: Sequence[SceneSample],
    grouping: CategoryGrouping,
    cfg: TrainConfig,
    profile: FrequencyProfile | None = None,
    trace_path: str | Path | None = None,
) -> TrainedModel:
    """SGD over minibatches; all experts see every batch through their masked labels.

    Experts update their own context module and head; the backbone moves only
    with the first expert's gradient. Single-expert modes (baseline, focal,
    undersample) train one expert over all categories with plain or focal CE.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("empty training set")
    feats, labels = stack(dataset)
    if profile is None:
        profile = compute_frequency(dataset, grouping.c)
    if profile.c != grouping.c:
        raise ValueError(f"grouping has {grouping.c} categories but the data has {profile.c}")

    single = cfg.mode in SINGLE_EXPERT_MODES
    grp = grouping.with_experts(1) if single else grouping
    K = grp.K
    dims = ModelDims(D=feats.shape[-1], F1=cfg.F1, F2=cfg.F2, c=grouping.c, K=K, radius=cfg.radius)
    backbone, experts = init_params(cfg.seed, dims)
    if cfg.mode == "mcn":
        experts = tie_context(experts)

    sets = [sorted(s) for s in grp.expert_sets]
    luts = [_label_lut(s) for s in sets]
    qs = [losses.marginal_targets(profile, s) for s in sets]
    alpha = 0.0 if single else cfg.alpha
    weights = cfg.expert_weights or (1.0,) * K
    if len(weights) != K:
        raise ValueError(f"{len(weights)} expert weights for {K} experts")

    ratio = None
    if cfg.mode == "undersample":
        ratio = cfg.undersample_ratio if cfg.undersample_ratio is not None else balanced_ratio(profile, grouping)
    head = grouping.members("head")

    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(101,)))
    us_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(102,)))
    steps_per_epoch = max(1, -(-n // cfg.batch))
    train_labels = labels
    trace = np.zeros((cfg.iters, K, 3))

    for step in range(cfg.iters):
        if ratio is not None and step % steps_per_epoch == 0:
            train_labels = undersample_head(labels, head, ratio, us_rng)
        idx = np.sort(rng.choice(n, size=min(cfg.batch, n), replace=False))
        x = feats[idx]
        y = train_labels[idx]
        lr = _lr_at(cfg, step, cfg.lr, cfg.iters)

        h, bcache = backbone_forward_cached(backbone, x)
        m = window_mean(h, cfg.radius)
        expert_grads = []
        d_direct = d_mean = None
        for i, expert in enumerate(experts):
            z, cache = expert_forward_cached(expert, h, m)
            yi = luts[i][y]
            if cfg.mode == "focal":
                lb = losses.focal_loss(z, yi, cfg.focal_gamma)
            else:
                lb = losses.combined_loss(z, yi, sets[i], qs[i], alpha)
            if not np.isfinite(lb.total) or not np.all(np.isfinite(lb.grad)):
                raise TrainingDiverged(step, f"loss for expert {i + 1}")
            trace[step, i] = (lb.l_ce, lb.l_aux, lb.total)
            dz = lb.grad * weights[i] if weights[i] != 1.0 else lb.grad
            need_dh = i == 0 or cfg.mode == "mcn"
            grads, dh = expert_backward(expert, cache, dz, need_dh=need_dh, split=True)
            expert_grads.append(grads)
            if dh is not None:
                d_direct = dh[0] if d_direct is None else d_direct + dh[0]
                d_mean = dh[1] if d_mean is None else d_mean + dh[1]

        if cfg.mode == "mcn":
            shared = {k: sum(g[k] for g in expert_grads) for k in ("Wc", "bc")}
            for g in expert_grads:
                g.update(shared)
        for expert, grads in zip(experts, expert_grads):
            apply_update(expert, grads, lr)
        dh_backbone = d_direct + window_mean_backward(d_mean, cfg.radius)
        apply_update(backbone, backbone_backward(backbone, bcache, dh_backbone), lr)
        if not all(np.all(np.isfinite(a)) for a in (backbone.W1, backbone.b1)):
            raise TrainingDiverged(step, "backbone parameters")

    model = TrainedModel(backbone, experts, grp, profile, cfg, None, trace)
    if trace_path is not None:
        write_trace(trace_path, trace)
    return model


def train_undersample_baseline(dataset, grouping, cfg: TrainConfig, profile=None, trace_path=None) -> TrainedModel:
    """Single-expert CE training where head pixels are thinned to ``cfg.undersample_ratio`` each epoch."""
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "mode": "undersample"})
    return train_stage1(dataset, grouping, cfg, profile, trace_path)


def train_replicas(dataset, grouping, cfg: TrainConfig, R: int, profile=None, stage2: bool = False) -> list[TrainedModel]:
    """``R`` models on identical data and config, seeds ``cfg.seed + r``."""
    if R < 2:
        raise ValueError("need at least two replicas")
    out = []
    for r in range(R):
        rc = TrainConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + r})
        m = train_stage1(dataset, grouping, rc, profile)
        if stage2 and m.K > 1:
            m.calibration = train_stage2_moe(m, dataset, rc)
        out.append(m)
    return out


def smoothed_trace_monotone(trace: np.ndarray, window: int = 50, start: int = 100, slack: float = 0.0) -> list[bool]:
    """Per expert: is the moving average of the total loss non-increasing from ``start`` on?"""
    out = []
    kernel = np.ones(window) / window
    for i in range(trace.shape[1]):
        sm = np.convolve(trace[:, i, 2], kernel, mode="valid")
        tail = sm[max(0, start - window + 1) :]
        out.append(bool(np.all(np.diff(tail) <= slack)))
    return out


# ---------------------------------------------------------------------------
# stage 2


def train_stage2_moe(model: TrainedModel, dataset: Sequence[SceneSample], cfg: TrainConfig | None = None) -> CalibrationParams:
    """Fit per-expert, per-category calibration by SGD on the ensemble cross-entropy. Experts stay frozen."""
    cfg = cfg or model.config
    calib = CalibrationParams.identity(model.K, model.c)
    if cfg.moe_iters == 0:
        return calib
    feats, labels = stack(dataset)
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(201,)))
    for step in range(cfg.moe_iters):
        idx = np.sort(rng.choice(n, size=min(cfg.moe_batch, n), replace=False))
        probs = expert_probabilities(model, feats[idx])
        loss, gw, gb = select_loss(probs, labels[idx], calib, cfg.moe_reduction)
        if not np.isfinite(loss):
            raise TrainingDiverged(step, "ensemble loss")
        lr = _lr_at(cfg, step, cfg.moe_lr, cfg.moe_iters)
        calib.w -= lr * gw
        calib.beta -= lr * gb
    return calib


# ---------------------------------------------------------------------------
# loss trace and checkpoints


def write_trace(path: str | Path, trace: np.ndarray, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if not append or f.tell() == 0:
            w.writerow(["step", "expert", "l_ce", "l_aux", "total"])
        for step in range(trace.shape[0]):
            for i in range(trace.shape[1]):
                ce, aux, total = trace[step, i]
                w.writerow([step, i + 1, repr(float(ce)), repr(float(aux)), repr(float(total))])


_MEDC = struct.Struct("<4sII")


def _arrays(model: TrainedModel) -> list[tuple[str, np.ndarray]]:
    out = [("backbone.W1", model.backbone.W1), ("backbone.b1", model.backbone.b1)]
    for i, e in enumerate(model.experts):
        out += [(f"expert{i}.{k}", getattr(e, k)) for k in ("Wc", "bc", "Wh", "bh")]
    if model.calibration is not None:
        out += [("calibration.w", model.calibration.w), ("calibration.beta", model.calibration.beta)]
    out.append(("trace", model.trace))
    return out


def save_checkpoint(path: str | Path, model: TrainedModel) -> None:
    arrays = _arrays(model)
    header = {
        "K": model.K,
        "dims": {"D": model.backbone.D, "F1": model.backbone.F1, "F2": model.experts[0].Wc.shape[0],
                 "c": model.c, "radius": model.experts[0].radius},
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
        "grouping": model.grouping.to_dict(),
        "profile_counts": [int(v) for v in model.profile.counts],
        "config": model.config.to_dict(),
        "calibrated": model.calibration is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MEDC.pack(b"MEDC", 1, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> TrainedModel:
    raw = Path(path).read_bytes()
    if len(raw) < _MEDC.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, hlen = _MEDC.unpack(raw[: _MEDC.size])
    if magic != b"MEDC" or version != 1:
        raise ValueError(f"{path}: not a version-1 checkpoint")
    header = json.loads(raw[_MEDC.size : _MEDC.size + hlen])
    off = _MEDC.size + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    radius = header["dims"]["radius"]
    backbone = BackboneParams(arrays["backbone.W1"], arrays["backbone.b1"])
    experts = [
        ExpertParams(*(arrays[f"expert{i}.{k}"] for k in ("Wc", "bc", "Wh", "bh")), radius=radius)
        for i in range(header["K"])
    ]
    calib = None
    if header["calibrated"]:
        calib = CalibrationParams(arrays["calibration.w"], arrays["calibration.beta"])
    counts = np.asarray(header["profile_counts"], dtype=np.int64)
    profile = FrequencyProfile(counts, counts / counts.sum(), int(counts.sum()))
    return TrainedModel(
        backbone,
        experts,
        CategoryGrouping.from_dict(header["grouping"]),
        profile,
        TrainConfig.from_dict(header["config"]),
        calib,
        arrays["trace"],
    )
