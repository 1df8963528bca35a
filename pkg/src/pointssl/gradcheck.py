"""Central finite-difference verification of every differentiable operation.

Each check builds a scalar loss, records tape gradients, then compares a
sample of coordinates against central differences with h = 1e-5 in 64-bit.
Run via ``run_all`` (library) or the ``gradcheck`` CLI subcommand.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .pointcloud import PointCloud, MiniPointNet, build_patches, embed_patches
from .backbone import ViTStack, sample_masks, encode, decode
from .graph import build_graph
from .clustering import (ClusterHead, message_pass, cluster_scores,
                         pool_centers, center_loss, assignment_loss)
from .contrastive import siamese_distance, contrastive_loss
from .config import TrainConfig
from .train import build_model, forward_cloud

H_FD = 1e-5
REL_TOL = 1e-4


def finite_difference_grad(fn, tensor: Tensor, coords, h: float = H_FD) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. selected flat coordinates."""
    flat = tensor.data.reshape(-1)
    out = np.empty(len(coords))
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + h
        up = fn()
        flat[c] = orig - h
        down = fn()
        flat[c] = orig
        out[i] = (up - down) / (2.0 * h)
    return out


def check_gradient(build_loss, params: dict[str, Tensor], n_coords: int = 3,
                   rel_tol: float = REL_TOL, rng=None,
                   freeze_stops: bool = False) -> list[str]:
    """Compare tape gradients of build_loss() against central differences.

    With ``freeze_stops``, the values flowing through stop-gradient nodes are
    recorded on the unperturbed run and replayed as constants during the
    finite-difference evaluations, so the oracle measures the partial
    derivative with detached branches held constant (which is what the tape
    computes by contract).

    Returns a list of failure descriptions (empty means pass).
    """
    rng = rng or np.random.default_rng(0)
    real_stop = T.stop_gradient
    recorded: list[np.ndarray] = []

    def recording_stop(a):
        out = real_stop(a)
        recorded.append(out.data.copy())
        return out

    if freeze_stops:
        T.stop_gradient = recording_stop
    try:
        loss = build_loss()
    finally:
        T.stop_gradient = real_stop
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
             for name, p in params.items()}
    for p in params.values():
        p.grad = None

    if freeze_stops:
        def eval_loss():
            cursor = [0]

            def replay_stop(a):
                value = recorded[cursor[0]]
                cursor[0] += 1
                return Tensor(value)

            T.stop_gradient = replay_stop
            try:
                return build_loss().item()
            finally:
                T.stop_gradient = real_stop
    else:
        def eval_loss():
            return build_loss().item()

    failures = []
    for name, p in params.items():
        size = p.data.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        fd = finite_difference_grad(eval_loss, p, coords)
        tape = grads[name].reshape(-1)[coords]
        denom = np.maximum(np.abs(fd), 1.0)
        rel = np.abs(tape - fd) / denom
        if np.any(rel > rel_tol):
            worst = float(rel.max())
            failures.append(f"{name}: relative error {worst:.3e} exceeds {rel_tol}")
    return failures


# ----------------------------------------------------------------------
# individual checks; each returns a failure list


def _p(rng, *shape):
    return Tensor(rng.normal(0.0, 0.5, size=shape), requires_grad=True)


def check_elementwise(rng) -> list[str]:
    x = _p(rng, 4, 5)
    y = _p(rng, 4, 5)
    pos = Tensor(np.abs(rng.normal(1.0, 0.2, size=(4, 5))) + 0.5, requires_grad=True)
    # keep relu samples away from the kink
    x.data[np.abs(x.data) < 1e-3] += 0.01
    checks = {
        "add": lambda: (x + y).sum(),
        "sub": lambda: (x - y).sum(),
        "mul": lambda: (x * y * y).sum(),
        "div": lambda: (x / pos).sum(),
        "neg": lambda: (-x * y).sum(),
        "scale": lambda: T.scale(x, 2.5).sum(),
        "exp": lambda: T.texp(x).sum(),
        "log": lambda: T.tlog(pos).sum(),
        "relu": lambda: (T.relu(x) * y).sum(),
    }
    failures = []
    for name, fn in checks.items():
        failures += [f"elementwise.{name}.{m}"
                     for m in check_gradient(fn, {"x": x, "y": y, "pos": pos}, rng=rng)]
    return failures


def check_matmul(rng) -> list[str]:
    a = _p(rng, 3, 4)
    b = _p(rng, 4, 2)
    return check_gradient(lambda: ((a @ b) * (a @ b)).sum(), {"a": a, "b": b}, rng=rng)


def check_softmax(rng) -> list[str]:
    x = _p(rng, 3, 6)
    w = Tensor(rng.normal(size=(3, 6)))
    failures = []
    for tau in (0.5, 1.0, 3.0):
        failures += check_gradient(lambda: (T.softmax(x, tau) * w).sum(), {"x": x}, rng=rng)
    return failures


def check_structure_ops(rng) -> list[str]:
    x = _p(rng, 5, 4)
    w = Tensor(rng.normal(size=(5, 4)))
    idx = np.array([0, 2, 2, 4])
    wi = Tensor(rng.normal(size=(4, 4)))
    wm = Tensor(rng.normal(size=5))
    checks = {
        "max": lambda: (x.max(axis=0) * x.max(axis=0)).sum(),
        "transpose": lambda: (x.T * w.T).sum(),
        "reshape": lambda: (x.reshape((4, 5)) * Tensor(w.data.reshape(4, 5))).sum(),
        "concat": lambda: T.concat([x, x * 2.0], axis=0).sum(),
        "gather": lambda: (T.gather_rows(x, idx) * wi).sum(),
        "mean": lambda: (x.mean(axis=1) * wm).sum(),
        "sqrt": lambda: T.sqrt(x * x + 1.0).sum(),
    }
    failures = []
    for name, fn in checks.items():
        failures += [f"structure.{name}.{m}" for m in check_gradient(fn, {"x": x}, rng=rng)]
    return failures


def _randomize_biases(pointnet: MiniPointNet, rng, std: float = 0.5) -> None:
    """Move relu pre-activations off their kinks for finite differencing.

    Each neighborhood contains its own center, whose center-relative row is
    exactly zero; with zero biases the relu inputs for that row all sit
    precisely at the kink, where one-sided slopes disagree with the
    subgradient.  Random biases keep every sample a safe margin away.
    """
    for b in (pointnet.b1, pointnet.b2, pointnet.b3, pointnet.b4):
        b.data[:] = rng.normal(0.0, std, size=b.data.shape)


def check_embed_patches(rng) -> list[str]:
    cloud = PointCloud(rng.normal(size=(32, 3)))
    patches = build_patches(cloud, n=6, k_patch=8, seed=1)
    # wider init keeps max-pool argmax gaps clear of the fd step size
    enc = MiniPointNet.create(10, rng, init_std=0.5)
    _randomize_biases(enc, rng)
    weights = Tensor(rng.normal(size=(6, 10)))
    return check_gradient(lambda: (embed_patches(patches, enc) * weights).sum(),
                          enc.parameters(), n_coords=2, rng=rng)


def check_encoder_decoder(rng) -> list[str]:
    d, n = 16, 8
    centers = rng.normal(size=(n, 3))
    tokens = Tensor(rng.normal(0, 0.5, size=(n, d)), requires_grad=True)
    vit = ViTStack.create(2, d, 4, rng, with_cls=True)
    dec = ViTStack.create(1, d, 4, rng)
    mask_token = Tensor(rng.normal(0, 0.02, size=(1, d)), requires_grad=True)
    mask = sample_masks(n, 0.5, seed=3).mask_a
    wt = Tensor(rng.normal(size=(n, d)))

    def loss():
        view = encode(tokens, centers, mask, vit)
        rec = decode(view, centers, mask, dec, mask_token)
        return (rec.features * wt).sum() + view.f_cls.sum()

    params = {"tokens": tokens, "mask_token": mask_token}
    params.update(vit.parameters("enc"))
    params.update(dec.parameters("dec"))
    return check_gradient(loss, params, n_coords=2, rng=rng)


def check_clustering(rng) -> list[str]:
    n, d, k = 6, 8, 3
    centers = rng.normal(size=(n, 3))
    features = Tensor(rng.normal(size=(n, d)), requires_grad=True)
    head = ClusterHead.create(d, k, rng)
    plan = np.full((n, k), 1.0 / (n * k))

    def hidden():
        g = build_graph(centers, features, 2)
        return message_pass(g, features, head)

    def loss_scores():
        return T.tlog(cluster_scores(hidden(), head)).sum()

    def loss_pool():
        s = cluster_scores(hidden(), head)
        pooled = pool_centers(s, centers)
        return (pooled * pooled).sum()

    def loss_center():
        s = cluster_scores(hidden(), head)
        pooled = pool_centers(s, centers)
        return center_loss(centers, centers, pooled, pooled)

    def loss_assign():
        s = cluster_scores(hidden(), head)
        return assignment_loss(s, plan, s, plan)

    params = {"features": features}
    params.update(head.parameters())
    failures = []
    for tag, fn in (("message+scores", loss_scores), ("pool", loss_pool),
                    ("center_loss", loss_center), ("assignment_loss", loss_assign)):
        failures += [f"clustering.{tag}.{m}"
                     for m in check_gradient(fn, params, n_coords=2, rng=rng)]
    return failures


def check_contrastive(rng) -> list[str]:
    f = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    z = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    f2 = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    z2 = Tensor(rng.normal(size=(1, 8)), requires_grad=True)
    params = {"f": f, "z": z, "f2": f2, "z2": z2}
    failures = check_gradient(lambda: siamese_distance(f, z), {"f": f, "z": z},
                              rng=rng, freeze_stops=True)
    failures += check_gradient(lambda: contrastive_loss(f, z, f2, z2), params,
                               rng=rng, freeze_stops=True)
    return failures


def check_full_pipeline(rng) -> list[str]:
    cfg = TrainConfig(points_per_cloud=16, patches=8, k_patch=4, k_graph=2,
                      embed_dim=16, encoder_depth=2, decoder_depth=1, heads=4,
                      clusters=3, batch_size=1, steps=1, seed=7)
    cloud = PointCloud(rng.normal(size=(16, 3)))
    model = build_model(cfg, rng, init_std=0.3)
    _randomize_biases(model.pointnet, rng, std=0.3)
    base = forward_cloud(cloud, model, cfg, fps_seed=1, mask_seed=2)
    plans = (base.plan_ab, base.plan_ba)

    def loss():
        out = forward_cloud(cloud, model, cfg, fps_seed=1, mask_seed=2,
                            frozen_plans=plans)
        return out.l_ass + out.l_cts + out.l_contras

    return [f"pipeline.{m}"
            for m in check_gradient(loss, model.parameters(), n_coords=1, rng=rng,
                                    freeze_stops=True)]


CHECKS = [
    ("elementwise", check_elementwise),
    ("matmul", check_matmul),
    ("softmax", check_softmax),
    ("structure", check_structure_ops),
    ("embed_patches", check_embed_patches),
    ("encoder_decoder", check_encoder_decoder),
    ("clustering", check_clustering),
    ("contrastive", check_contrastive),
    ("full_pipeline", check_full_pipeline),
]


def run_all(verbose: bool = False, seed: int = 0) -> list[str]:
    """Run every gradient check; returns the list of failures."""
    failures = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        errs = fn(rng)
        if verbose:
            status = "ok" if not errs else f"FAILED ({len(errs)})"
            print(f"gradcheck {name}: {status}")
        failures += [f"{name}: {e}" for e in errs]
    return failures
