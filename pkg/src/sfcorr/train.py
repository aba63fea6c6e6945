"""Training loops for the fine-grained (dense), semantic (MoCo-style) and joint models.

Every loop follows the same cycle: draw a view-pair batch, build the loss
graph, backpropagate, take an Adam step on the online parameters, then move
the target toward the online network with the cosine EMA schedule.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as cfgmod
from .config import AugmentationSection, Config
from .data.loader import Batch, FrameDataset, batch_iterator
from .data.augment import resize_crop
from .encoder import (BackboneConfig, EncoderPair, backbone_forward, ema_schedule, ema_update, head_forward, init_params,
                      pooled, project_and_predict)
from .engine import AdamState, Tensor, adam_step, grad_check, l2_normalize, reshape
from .errors import ConfigError, EmptyMaskError
from .geometry import build_positive_mask, full_frame
from .objectives import NegativeQueue, batch_dense_local_loss, global_byol_loss, info_nce, joint_loss

log = logging.getLogger(__name__)

KINDS = ("fc", "semantic", "joint")
LOG_COLUMNS = ("step", "loss", "local", "global", "positives", "skipped")

# photometric recipe for the semantic branch
SEMANTIC_AUGMENTATION = AugmentationSection(hflip=True, color_jitter=1.0, gaussian_blur=True, grayscale=True,
                                            grayscale_p=0.2)


def default_config(kind: str) -> Config:
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if kind == "semantic":
        return Config(augmentation=SEMANTIC_AUGMENTATION)
    return Config()


def build_model(cfg: Config, kind: str, dtype=np.float32) -> EncoderPair:
    return init_params(cfg.backbone_config(), cfg.head_config(), seed=cfg.seeds.init,
                       predictor=kind != "semantic",
                       global_head=cfg.global_head_config() if kind == "joint" else None, dtype=dtype)


# --------------------------------------------------------------------------
# loss graphs
# --------------------------------------------------------------------------

def _images(x: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(x, dtype=dtype))


def fc_terms(pair: EncoderPair, batch: Batch, cfg: Config, update_stats: bool = True,
             with_global: bool = False) -> dict[str, Tensor]:
    """Dense local loss (and optionally the pooled BYOL loss) for one batch."""
    dt = pair.dtype
    x1, x2 = _images(batch.view1, dt), _images(batch.view2, dt)
    f1 = backbone_forward(pair.backbone, pair.online, pair.online_buffers, x1, training=True,
                          update_stats=update_stats)
    f2 = backbone_forward(pair.backbone, pair.target, pair.target_buffers, x2, training=True,
                          update_stats=False)
    p1, z2 = project_and_predict(pair, f1, f2)
    local = batch_dense_local_loss(p1, z2, batch.masks)
    if cfg.loss.symmetrize:
        f1b = backbone_forward(pair.backbone, pair.online, pair.online_buffers, x2, training=True,
                               update_stats=False)
        f2b = backbone_forward(pair.backbone, pair.target, pair.target_buffers, x1, training=True,
                               update_stats=False)
        p1b, z2b = project_and_predict(pair, f1b, f2b)
        local = (local + batch_dense_local_loss(p1b, z2b, batch.masks.transpose(0, 2, 1))) * 0.5
    terms = {"local": local}
    if with_global:
        n = f1.shape[0]
        g = head_forward("gproj", pair.online, pair.online_buffers, pooled(f1), training=True,
                         update_stats=update_stats)
        g = head_forward("gpred", pair.online, pair.online_buffers, g, training=True, update_stats=update_stats)
        zt = head_forward("gproj", pair.target, pair.target_buffers, pooled(f2.detach()), training=True,
                          update_stats=False)
        terms["global"] = global_byol_loss(reshape(g, (n, -1)), zt.data.reshape(n, -1))
    return terms


def semantic_terms(pair: EncoderPair, batch: Batch, queue, cfg: Config,
                   update_stats: bool = True) -> tuple[dict[str, Tensor], np.ndarray]:
    """InfoNCE over pooled, projected features; returns the keys to enqueue."""
    dt = pair.dtype
    x1, x2 = _images(batch.view1, dt), _images(batch.view2, dt)
    n = x1.shape[0]
    f1 = backbone_forward(pair.backbone, pair.online, pair.online_buffers, x1, training=True,
                          update_stats=update_stats)
    f2 = backbone_forward(pair.backbone, pair.target, pair.target_buffers, x2, training=True,
                          update_stats=False)
    q = head_forward("proj", pair.online, pair.online_buffers, pooled(f1), training=True, update_stats=update_stats)
    k = head_forward("proj", pair.target, pair.target_buffers, pooled(f2), training=True, update_stats=False)
    q = l2_normalize(reshape(q, (n, -1)), axis=-1)
    k = l2_normalize(Tensor(k.data.reshape(n, -1)), axis=-1)
    return {"global": info_nce(q, k, queue, cfg.loss.tau)}, k.data


def total_loss(kind: str, terms: dict[str, Tensor], cfg: Config) -> Tensor:
    if kind == "fc":
        return terms["local"]
    if kind == "joint":
        return joint_loss(terms["local"], terms["global"], cfg.loss.alpha)
    return terms["global"]


# --------------------------------------------------------------------------
# gradient check of one step
# --------------------------------------------------------------------------

def shrink_batch(batch: Batch, backbone, size: int, r: float, n: int = 4) -> Batch:
    """``n`` view pairs of ``batch`` resampled to ``size`` px, masks rebuilt on the coarser grid.

    Pairs whose coarse mask is empty are passed over; if fewer than ``n``
    remain, a view is paired with itself (identity mask).
    """
    grid = (size // backbone.total_stride,) * 2
    v1, v2, masks, idx, geoms = [], [], [], [], []
    for b, (ga, gb) in enumerate(batch.geoms):
        ga_s, gb_s = ga.with_grid(grid, size), gb.with_grid(grid, size)
        m = build_positive_mask(ga_s, gb_s, r)
        if m.any():
            v1.append(batch.view1[b]); v2.append(batch.view2[b]); masks.append(m)
            idx.append(batch.indices[b]); geoms.append((ga_s, gb_s))
        if len(v1) == n:
            break
    b = 0
    while len(v1) < n:
        ga_s = batch.geoms[b][0].with_grid(grid, size)
        v1.append(batch.view1[b]); v2.append(batch.view1[b]); masks.append(build_positive_mask(ga_s, ga_s, r))
        idx.append(batch.indices[b]); geoms.append((ga_s, ga_s))
        b += 1
    full = lambda v: full_frame(v.shape[1:], out_size=size, grid=grid)
    v1 = np.stack([resize_crop(v, full(v)) for v in v1])
    v2 = np.stack([resize_crop(v, full(v)) for v in v2])
    return Batch(v1, v2, np.stack(masks), idx, geoms)


def check_training_step(pair: EncoderPair, batch: Batch, cfg: Config, kind: str, queue=None,
                        tol: float = 1e-4, sample: int | None = 6, seed: int = 0, size: int = 8):
    """Finite-difference check of one training-step loss at float64.

    Uses the model's current parameters on a float64 copy (the model being
    trained is untouched) with four of the batch's view pairs downsampled to
    ``size`` px: at full resolution the h = 1e-5 differences straddle ReLU
    kinks often enough to swamp the comparison. BN running statistics are
    frozen during the check.
    """
    pair64 = pair.astype(np.float64)
    b = pair64.backbone
    pair64.backbone = BackboneConfig(b.channels, b.strides, b.kernels, size, b.residual)
    pair64.backbone.validate()
    small = shrink_batch(batch, pair64.backbone, size, cfg.loss.r)

    def loss_fn():
        if kind == "semantic":
            terms, _ = semantic_terms(pair64, small, queue, cfg, update_stats=False)
        else:
            terms = fc_terms(pair64, small, cfg, update_stats=False, with_global=kind == "joint")
        return total_loss(kind, terms, cfg)

    return grad_check(loss_fn, pair64.online, tol=tol, sample=sample, seed=seed, kink_retry=True)


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    pair: EncoderPair
    losses: np.ndarray
    rows: list[dict] = field(default_factory=list)
    skipped: int = 0
    queue: NegativeQueue | None = None


def train(kind: str, cfg: Config, dataset: FrameDataset, out_dir=None, grad_check_first: bool = False,
          progress_every: int = 0) -> TrainResult:
    """Run ``cfg.optimizer.steps`` steps and optionally write outputs to ``out_dir``.

    Outputs: ``model.sfck`` (checkpoint), ``loss.csv`` and ``config.ini``
    (the fully resolved config).
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    opt = cfg.optimizer
    if opt.steps < 0:
        raise ConfigError(f"steps must be non-negative, got {opt.steps}")
    pair = build_model(cfg, kind)
    queue = None
    if kind == "semantic":
        queue = NegativeQueue(cfg.loss.queue_size, cfg.heads.out_dim, seed=cfg.seeds.init + 7919)
    aug = cfg.augmentation
    batches = batch_iterator(dataset, opt.batch, cfg.seeds.data, aug.gamma1, aug.gamma2, cfg.augmentation_spec(),
                             out_size=cfg.backbone.input_size, grid=pair.backbone.grid, r=cfg.loss.r)
    state = AdamState(lr=opt.lr)
    losses: list[float] = []
    rows: list[dict] = []
    skipped = 0
    for step in range(opt.steps):
        batch = next(batches)
        if grad_check_first and step == 0:
            report = check_training_step(pair, batch, cfg, kind, queue)
            name, err, _ = report.worst
            log.info("gradient check passed; worst %s rel. err %.3g (%d kink crossings)", name, err, report.kinks)
        try:
            if kind == "semantic":
                terms, keys = semantic_terms(pair, batch, queue, cfg)
            else:
                terms = fc_terms(pair, batch, cfg, with_global=kind == "joint")
        except EmptyMaskError as exc:
            skipped += 1
            log.warning("step %d: %s; batch skipped", step, exc)
            continue
        loss = total_loss(kind, terms, cfg)
        loss.backward()
        adam_step(pair.online, {k: v.grad for k, v in pair.online.items()}, state)
        for v in pair.online.values():
            v.grad = None
        ema_update(pair, ema_schedule(step, opt.steps, opt.ema_m0))
        if queue is not None:
            queue.enqueue(keys)
        value = loss.item()
        losses.append(value)
        if opt.log_every > 0 and (step % opt.log_every == 0 or step == opt.steps - 1):
            rows.append({"step": step, "loss": value,
                         "local": terms["local"].item() if "local" in terms else "",
                         "global": terms["global"].item() if "global" in terms else "",
                         "positives": int(batch.masks.sum()), "skipped": skipped})
        if progress_every and step % progress_every == 0:
            log.info("%s step %d/%d loss %.4f", kind, step, opt.steps, value)
    result = TrainResult(pair, np.asarray(losses), rows, skipped, queue)
    if out_dir is not None:
        write_outputs(result, cfg, kind, out_dir)
    return result


def write_outputs(result: TrainResult, cfg: Config, kind: str, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.ini")
    save_model(out / "model.sfck", result.pair, cfg, kind, steps=len(result.losses))
    tmp = out / "loss.csv.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in result.rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    tmp.replace(out / "loss.csv")
    return out


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def model_entries(pair: EncoderPair, cfg: Config, kind: str, steps: int = 0) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {
        "meta/config": np.frombuffer(cfgmod.serialize(cfg).encode(), dtype=np.uint8),
        "meta/kind": np.frombuffer(kind.encode(), dtype=np.uint8),
        "meta/steps": np.array([steps], dtype=np.int64),
    }
    entries.update({f"online/{k}": v.data for k, v in pair.online.items()})
    entries.update({f"online_buffer/{k}": v for k, v in pair.online_buffers.items()})
    entries.update({f"target/{k}": v.data for k, v in pair.target.items()})
    entries.update({f"target_buffer/{k}": v for k, v in pair.target_buffers.items()})
    return entries


def save_model(path, pair: EncoderPair, cfg: Config, kind: str, steps: int = 0) -> Path:
    return checkpoint.save(path, model_entries(pair, cfg, kind, steps), cfgmod.architecture_hash(cfg))


@dataclass
class LoadedModel:
    pair: EncoderPair
    config: Config
    kind: str
    steps: int
    config_hash: int


def load_model(path) -> LoadedModel:
    entries, chash = checkpoint.load(path)
    try:
        cfg = cfgmod.parse(entries["meta/config"].tobytes().decode())
        kind = entries["meta/kind"].tobytes().decode()
        steps = int(entries["meta/steps"][0])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"checkpoint {path} lacks entry {exc}") from None
    if cfgmod.architecture_hash(cfg) != chash:
        raise checkpoint.CheckpointError(f"checkpoint {path}: stored config does not match its hash")
    pair = build_model(cfg, kind, dtype=entries[next(k for k in entries if k.startswith("online/"))].dtype)
    groups = (("online/", pair.online, True), ("target/", pair.target, False))
    for prefix, store, grad in groups:
        for name in store:
            store[name] = Tensor(entries[prefix + name], requires_grad=grad)
    for prefix, store in (("online_buffer/", pair.online_buffers), ("target_buffer/", pair.target_buffers)):
        for name in store:
            store[name] = entries[prefix + name]
    return LoadedModel(pair, cfg, kind, steps, chash)
