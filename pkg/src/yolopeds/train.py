"""Inference pipeline and the desk-scale SGD training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from yolopeds import backbone
from yolopeds.autograd import GradCheck, OptimizerConfig, Parameter, gradient_check, init_weights, sgd_step
from yolopeds.backbone import ModelGraph
from yolopeds.data import make_scenes, to_tensor
from yolopeds.head import HeadConfig, assign_responsibility, decode, gt_box, nms
from yolopeds.loss import LossBreakdown, LossConfig, batch_loss, branch_signature, objectness_targets
from yolopeds.metrics import EvalReport, compute_report, match

log = logging.getLogger(__name__)


def head_config_for(graph: ModelGraph, **overrides) -> HeadConfig:
    w, h = graph.input_size
    return HeadConfig(grid_size=graph.grid_size, grid_count=graph.grid_count,
                      image_width=w, image_height=h, **overrides)


@dataclass
class Detector:
    graph: ModelGraph
    params: Mapping
    head_cfg: HeadConfig

    def __post_init__(self):
        backbone.check_params(self.graph, self.params)

    def raw(self, image: np.ndarray) -> np.ndarray:
        return backbone.forward(self.graph, self.params, image)

    def detect(self, image: np.ndarray):
        """Forward, decode and NMS for a single (1, 3, H, W) image."""
        return nms(decode(self.raw(image), self.head_cfg), self.head_cfg.nms_iou)


@dataclass
class TrainResult:
    params: dict[str, Parameter]
    history: list[dict] = field(default_factory=list)


def train(graph: ModelGraph, images: np.ndarray, gt_lists, *, steps: int,
          opt: OptimizerConfig = OptimizerConfig(), loss_cfg: LossConfig = LossConfig(),
          head_cfg: HeadConfig | None = None, seed: int = 0,
          params: dict[str, Parameter] | None = None,
          log_every: int = 10,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch SGD over a fixed in-memory image set.

    Batches are drawn from a seeded shuffle, reshuffled every epoch.  A
    non-finite loss aborts with the offending step number.
    """
    head_cfg = head_cfg or head_config_for(graph)
    if params is None:
        params = init_weights(graph, seed)
    resps = [assign_responsibility(g, head_cfg) for g in gt_lists]
    rng = np.random.default_rng(seed + 1)
    n = images.shape[0]
    bs = min(opt.batch_size, n)
    order: list[int] = []
    history = []
    for step in range(1, steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(n).tolist())
        idx, order = order[:bs], order[bs:]
        batch = images[idx]
        cache: dict = {}
        out = backbone.forward(graph, params, batch, cache)
        try:
            bd, g_head = batch_loss(out, [resps[i] for i in idx], [gt_lists[i] for i in idx],
                                    head_cfg, loss_cfg)
        except FloatingPointError as exc:
            raise FloatingPointError(f"step {step}: {exc}") from None
        if not np.isfinite(bd.total):
            raise FloatingPointError(f"step {step}: loss is {bd.total}")
        grads = backbone.backward(graph, params, cache, g_head)
        for name, p in params.items():
            p.grad += grads[name]
        sgd_step(params, opt)
        if step % log_every == 0 or step == 1 or step == steps:
            rec = {"step": step, "total": bd.total, "loc": bd.loc, "op": bd.op, "cls": bd.cls}
            history.append(rec)
            if on_log:
                on_log(rec)
            log.debug("step %d loss %.4f", step, bd.total)
    return TrainResult(params, history)


def evaluate_loss(graph, params, images, gt_lists, head_cfg, loss_cfg=LossConfig()) -> LossBreakdown:
    resps = [assign_responsibility(g, head_cfg) for g in gt_lists]
    out = backbone.forward(graph, params, images)
    return batch_loss(out, resps, gt_lists, head_cfg, loss_cfg, need_grad=False)[0]


def gradcheck_model(graph: ModelGraph, seed: int = 0, *, batch: int = 2, epsilon: float = 1e-4,
                    n_samples: int = 200, loss_cfg: LossConfig = LossConfig(),
                    corrupt: bool = False) -> GradCheck:
    """Backprop through graph + loss versus central differences, in float64.

    Uses random images with 1-3 random boxes each.  Biases are drawn at
    random so no ReLU sits exactly on its kink at zero.  The objectness
    targets are pinned at the unperturbed point, matching the constant-target
    treatment of the analytic gradient.  ``corrupt`` scales the largest head
    weight gradient by 1.5 as a negative control.
    """
    rng = np.random.default_rng(seed)
    head_cfg = head_config_for(graph)
    params = {k: p.value.astype(np.float64) for k, p in init_weights(graph, seed).items()}
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    w, h = graph.input_size
    images = rng.uniform(0, 1, size=(batch, graph.input_channels, h, w))
    gts = []
    for _ in range(batch):
        boxes = []
        for _ in range(int(rng.integers(1, 4))):
            bw, bh = rng.uniform(0.1, 0.8, 2)
            boxes.append(gt_box(rng.uniform(bw / 2, 1 - bw / 2), rng.uniform(bh / 2, 1 - bh / 2), bw, bh))
        gts.append(boxes)
    resps = [assign_responsibility(g, head_cfg) for g in gts]

    cache: dict = {}
    out = backbone.forward(graph, params, images, cache)
    pinned = [objectness_targets(out[b:b + 1], resps[b], gts[b], head_cfg) for b in range(batch)]
    _, g_head = batch_loss(out, resps, gts, head_cfg, loss_cfg)
    grads = backbone.backward(graph, params, cache, g_head)
    include = ()
    if corrupt:
        name = f"{graph.head.id}.pw"
        idx = np.unravel_index(int(np.argmax(np.abs(grads[name]))), grads[name].shape)
        grads[name][idx] *= 1.5
        include = ((name, idx),)

    def loss_fn(p):
        c: dict = {}
        heads = backbone.forward(graph, p, images, c)
        bd, _ = batch_loss(heads, resps, gts, head_cfg, loss_cfg, need_grad=False, obj_targets=pinned)
        sig = backbone.relu_masks(graph, c) + [
            branch_signature(heads[b:b + 1], resps[b], gts[b], head_cfg, pinned[b]) for b in range(batch)]
        return bd.total, sig

    return gradient_check(loss_fn, params, grads, epsilon, n_samples, seed=seed, include=include)


@dataclass(frozen=True)
class ToyConfig:
    """Settings of the desk-scale end-to-end run on generated scenes."""

    n_images: int = 20
    steps: int = 2000
    lr: float = 2e-3
    momentum: float = 0.9
    batch_size: int = 2
    clip_norm: float | None = 20.0
    init: str = "fan-in"
    cls_prior: float | None = -4.6  # initial class-logit bias, about 1% positive
    log_every: int = 10


def toy_init(graph: ModelGraph, cfg: ToyConfig, seed: int = 0) -> dict[str, Parameter]:
    params = init_weights(graph, seed, scheme=cfg.init)
    if cfg.cls_prior is not None:
        params[f"{graph.head.id}.b"].value[5::6] = cfg.cls_prior
    return params


@dataclass
class ToyRun:
    params: dict[str, Parameter]
    scenes: list
    history: list[dict]
    report: EvalReport  # scored on the training scenes themselves


def train_toy(graph: ModelGraph, cfg: ToyConfig = ToyConfig(), *, seed: int = 0,
              loss_cfg: LossConfig = LossConfig(), on_log: Callable[[dict], None] | None = None) -> ToyRun:
    """Generate ``cfg.n_images`` scenes, train on them and score the result on the same scenes."""
    w, h = graph.input_size
    scenes = make_scenes(cfg.n_images, seed=seed, size=w)
    images = np.concatenate([to_tensor(s.rgb, (w, h)) for s in scenes])
    gts = [s.boxes for s in scenes]
    head_cfg = head_config_for(graph)
    params = toy_init(graph, cfg, seed)
    opt = OptimizerConfig(lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size, clip_norm=cfg.clip_norm)
    res = train(graph, images, gts, steps=cfg.steps, opt=opt, loss_cfg=loss_cfg, head_cfg=head_cfg,
                seed=seed, params=params, log_every=cfg.log_every, on_log=on_log)
    det = Detector(graph, res.params, head_cfg)
    report = compute_report(match(det.detect(images[i:i + 1]), gts[i]) for i in range(len(scenes)))
    return ToyRun(res.params, scenes, res.history, report)
