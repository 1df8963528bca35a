"""Training orchestration: full dual-view pipeline, loss assembly, optimizer.

Per cloud and per step: patchify, embed tokens, draw two masks, encode and
decode each view with the shared stacks, build a geo-semantic graph per
view, run the clustering head, solve the balanced assignment cross-view in
both directions, and combine the assignment, center, and contrastive losses
into one scalar objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .pointcloud import PointCloud, MiniPointNet, build_patches, embed_patches
from .backbone import ViTStack, EncodedView, sample_masks, encode, decode
from .graph import build_graph
from .clustering import (ClusterHead, SinkhornConfig, message_pass,
                         cluster_scores, pool_centers, sinkhorn_assign,
                         center_loss, assignment_loss)
from .contrastive import global_pool, contrastive_loss
from .config import TrainConfig, MetricsRecord
from .optim import AdamW, cosine_lr


class NonFiniteLossError(RuntimeError):
    """A loss term became non-finite; the step is aborted."""


@dataclass
class Model:
    pointnet: MiniPointNet
    encoder: ViTStack
    decoder: ViTStack
    mask_token: Tensor
    head: ClusterHead

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.pointnet.parameters())
        params.update(self.encoder.parameters("encoder"))
        params.update(self.decoder.parameters("decoder"))
        params["mask_token"] = self.mask_token
        params.update(self.head.parameters())
        return params


def build_model(cfg: TrainConfig, rng: np.random.Generator | None = None,
                init_std: float = 0.02) -> Model:
    rng = rng or np.random.default_rng(cfg.seed)
    return Model(
        pointnet=MiniPointNet.create(cfg.embed_dim, rng, init_std=init_std),
        encoder=ViTStack.create(cfg.encoder_depth, cfg.embed_dim, cfg.heads, rng,
                                with_cls=True, init_std=init_std),
        decoder=ViTStack.create(cfg.decoder_depth, cfg.embed_dim, cfg.heads, rng,
                                init_std=init_std),
        mask_token=Tensor(rng.normal(0.0, init_std, size=(1, cfg.embed_dim)),
                          requires_grad=True),
        head=ClusterHead.create(cfg.embed_dim, cfg.clusters, rng,
                                temperature=cfg.temperature, init_std=init_std),
    )


@dataclass
class CloudLosses:
    l_ass: Tensor
    l_cts: Tensor
    l_contras: Tensor
    sinkhorn_iters: int
    sinkhorn_marginal_err: float
    plan_ab: np.ndarray | None = None
    plan_ba: np.ndarray | None = None


def _check_finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteLossError(f"non-finite value in {name}")


def forward_cloud(cloud: PointCloud, model: Model, cfg: TrainConfig,
                  fps_seed: int, mask_seed: int,
                  sinkhorn_cfg: SinkhornConfig | None = None,
                  frozen_plans=None) -> CloudLosses:
    """Run the complete dual-view objective for one cloud.

    `frozen_plans`, when given as (plan_ab, plan_ba) arrays, bypasses the
    transport solve; gradient checks use it to hold the detached targets
    fixed across perturbed evaluations.
    """
    patches = build_patches(cloud, cfg.patches, cfg.k_patch, fps_seed)
    tokens = embed_patches(patches, model.pointnet)
    centers = patches.centers
    masks = sample_masks(cfg.patches, cfg.mask_ratio, mask_seed)

    views: dict[str, EncodedView] = {}
    recon: dict[str, Tensor] = {}
    scores: dict[str, Tensor] = {}
    pooled: dict[str, Tensor] = {}
    for tag, mask in (("a", masks.mask_a), ("b", masks.mask_b)):
        view = encode(tokens, centers, mask, model.encoder)
        rec = decode(view, centers, mask, model.decoder, model.mask_token)
        graph = build_graph(centers, rec.features, cfg.k_graph)
        hidden = message_pass(graph, rec.features, model.head)
        s = cluster_scores(hidden, model.head)
        views[tag] = view
        recon[tag] = rec.features
        scores[tag] = s
        pooled[tag] = pool_centers(s, centers)

    if frozen_plans is not None:
        plan_ab_arr, plan_ba_arr = frozen_plans
        sk_iters, sk_err = 0, 0.0
    else:
        sk_cfg = sinkhorn_cfg or SinkhornConfig(epsilon=cfg.epsilon)
        plan_ab = sinkhorn_assign(centers, pooled["b"].data, sk_cfg)
        plan_ba = sinkhorn_assign(centers, pooled["a"].data, sk_cfg)
        plan_ab_arr, plan_ba_arr = plan_ab.plan, plan_ba.plan
        sk_iters = plan_ab.iterations + plan_ba.iterations
        sk_err = max(plan_ab.marginal_error, plan_ba.marginal_error)

    l_ass = assignment_loss(scores["a"], plan_ab_arr, scores["b"], plan_ba_arr)
    l_cts = center_loss(centers, centers, pooled["a"], pooled["b"])
    z_a = global_pool(views["a"].visible_features)
    z_b = global_pool(views["b"].visible_features)
    l_contras = contrastive_loss(views["a"].f_cls, z_b, views["b"].f_cls, z_a)

    for name, t in (("l_ass", l_ass), ("l_cts", l_cts), ("l_contras", l_contras)):
        _check_finite(name, t)
    return CloudLosses(
        l_ass=l_ass, l_cts=l_cts, l_contras=l_contras,
        sinkhorn_iters=sk_iters,
        sinkhorn_marginal_err=sk_err,
        plan_ab=plan_ab_arr, plan_ba=plan_ba_arr,
    )


def train_step(batch: list[PointCloud], model: Model, opt: AdamW,
               cfg: TrainConfig, step: int, total_steps: int,
               step_rng: np.random.Generator) -> MetricsRecord:
    """One optimizer update over a batch of clouds."""
    if not batch:
        raise ValueError("empty batch")
    t0 = time.perf_counter()
    opt.zero_grad()
    sums = {"l_ass": 0.0, "l_cts": 0.0, "l_contras": 0.0}
    sk_iters = 0
    sk_err = 0.0
    inv_b = 1.0 / len(batch)
    for cloud in batch:
        fps_seed = int(step_rng.integers(2 ** 31))
        mask_seed = int(step_rng.integers(2 ** 31))
        losses = forward_cloud(cloud, model, cfg, fps_seed, mask_seed)
        total = T.scale(losses.l_ass + losses.l_cts + losses.l_contras, inv_b)
        total.backward()
        sums["l_ass"] += losses.l_ass.item() * inv_b
        sums["l_cts"] += losses.l_cts.item() * inv_b
        sums["l_contras"] += losses.l_contras.item() * inv_b
        sk_iters += losses.sinkhorn_iters
        sk_err = max(sk_err, losses.sinkhorn_marginal_err)
    grad_norm = opt.grad_norm()
    lr = cosine_lr(step, total_steps, cfg.learning_rate)
    opt.step(lr)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return MetricsRecord(
        step=step,
        l_ass=sums["l_ass"], l_cts=sums["l_cts"], l_contras=sums["l_contras"],
        l_total=sums["l_ass"] + sums["l_cts"] + sums["l_contras"],
        sinkhorn_iters=sk_iters, sinkhorn_marginal_err=sk_err,
        grad_norm=grad_norm, wall_ms=wall_ms,
    )


def run_pretraining(dataset: list[PointCloud], cfg: TrainConfig, steps: int,
                    model: Model | None = None,
                    on_step=None) -> tuple[Model, list[MetricsRecord]]:
    """Fixed-step training loop over a cyclic shuffle of the dataset."""
    rng = np.random.default_rng(cfg.seed)
    model = model or build_model(cfg, rng)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    step_rng = np.random.default_rng(rng.integers(2 ** 63))
    records: list[MetricsRecord] = []
    order: list[int] = []
    for step in range(steps):
        while len(order) < cfg.batch_size:
            perm = step_rng.permutation(len(dataset))
            order.extend(int(i) for i in perm)
        batch = [dataset[order.pop(0)] for _ in range(cfg.batch_size)]
        rec = train_step(batch, model, opt, cfg, step, steps, step_rng)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
    return model, records


def encode_full(cloud: PointCloud, model: Model, cfg: TrainConfig,
                fps_seed: int = 0) -> np.ndarray:
    """Unmasked forward pass: concat(class token, max-pooled patch features)."""
    patches = build_patches(cloud, cfg.patches, cfg.k_patch, fps_seed)
    tokens = embed_patches(patches, model.pointnet)
    mask = np.zeros(cfg.patches, dtype=bool)
    view = encode(tokens, patches.centers, mask, model.encoder)
    pooled = global_pool(view.visible_features)
    return np.concatenate([view.f_cls.data[0], pooled.data[0]])
