"""Training loop, optimizer, schedule, config, data, probe, and CLI."""

import json

import numpy as np
import pytest

from pointssl.tensor import Tensor
from pointssl.config import TrainConfig, MetricsRecord
from pointssl.optim import AdamW, cosine_lr
from pointssl.data import GENERATORS, generate_dataset, normalize_cloud
from pointssl.train import build_model, train_step, run_pretraining, forward_cloud
from pointssl.backbone import save_checkpoint, load_checkpoint
from pointssl.probe import linear_probe, stratified_split
from pointssl import cli


TOY = dict(points_per_cloud=64, patches=12, k_patch=8, k_graph=3,
           embed_dim=24, encoder_depth=1, decoder_depth=1, heads=4,
           clusters=3, batch_size=2, steps=2)


def toy_config(**overrides):
    return TrainConfig(**{**TOY, **overrides})


def toy_dataset(n_per_class=2, seed=0, n_points=64):
    return generate_dataset([(g, n_per_class) for g in GENERATORS],
                            n_points, 0.05, seed)


# ----------------------------------------------------------------------
# config


def test_config_json_roundtrip_exact():
    cfg = toy_config(learning_rate=1e-3, seed=42)
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def test_config_unknown_keys_are_hard_errors():
    raw = json.loads(TrainConfig().to_json())
    raw["learning_rat"] = 0.1
    with pytest.raises(ValueError, match="learning_rat"):
        TrainConfig.from_json(json.dumps(raw))


def test_config_validates_ranges():
    with pytest.raises(ValueError):
        TrainConfig(mask_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(patches=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")


# ----------------------------------------------------------------------
# metrics


def test_metrics_record_serialization():
    rec = MetricsRecord(step=3, l_ass=1.0, l_cts=2.0, l_contras=0.5, l_total=3.5,
                        sinkhorn_iters=12, sinkhorn_marginal_err=1e-8,
                        grad_norm=0.7, wall_ms=100.0)
    decoded = json.loads(rec.to_json())
    assert decoded["step"] == 3 and decoded["l_total"] == 3.5
    assert rec.to_csv_row().startswith("3,1,2,0.5,3.5,12,")


# ----------------------------------------------------------------------
# schedule and optimizer


def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 0.1) == pytest.approx(0.1)
    assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)


def test_adamw_zero_grad_zero_decay_is_identity():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = AdamW({"p": p})
    before = p.data.copy()
    opt.step(0.1)
    assert np.array_equal(p.data, before)


def test_adamw_decoupled_decay_isolation():
    p = Tensor([4.0], requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.5)
    lr = 0.1
    for _ in range(3):
        opt.step(lr)
    assert p.data[0] == pytest.approx(4.0 * (1 - lr * 0.5) ** 3)


def test_adamw_three_step_scalar_trajectory():
    """Hand-computed trajectory of the published update rule."""
    p = Tensor([1.0], requires_grad=True)
    opt = AdamW({"p": p}, weight_decay=0.0)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -0.25, 1.0]
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        opt.step(lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x = x - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert p.data[0] == pytest.approx(x, rel=1e-12)


# ----------------------------------------------------------------------
# synthetic data


def test_noiseless_sphere_has_unit_radius():
    ds = generate_dataset([("sphere", 2)], 64, 0.0, seed=0)
    for s in ds:
        radii = np.linalg.norm(s.cloud.points, axis=1)
        assert np.allclose(radii, 1.0, atol=1e-12)


def test_dataset_deterministic_and_balanced():
    a = generate_dataset([(g, 4) for g in GENERATORS], 32, 0.05, seed=7)
    b = generate_dataset([(g, 4) for g in GENERATORS], 32, 0.05, seed=7)
    assert len(a) == 16
    for s, t in zip(a, b):
        assert np.array_equal(s.cloud.points, t.cloud.points)
    labels = [s.label for s in a]
    assert labels == sorted(labels) and labels.count(0) == 4


def test_dataset_rotation_changes_pose_not_normalization():
    plain = generate_dataset([("plane", 2)], 32, 0.0, seed=3)
    rotated = generate_dataset([("plane", 2)], 32, 0.0, seed=3, rotate=True)
    for s in rotated:
        assert np.allclose(s.cloud.points.mean(axis=0), 0.0, atol=1e-12)
        assert np.linalg.norm(s.cloud.points, axis=1).max() == pytest.approx(1.0)
    assert not np.allclose(plain[0].cloud.points, rotated[0].cloud.points)


def test_unknown_generator_rejected():
    with pytest.raises(ValueError):
        generate_dataset([("torus", 1)], 16, 0.0, seed=0)


def test_normalize_cloud_zero_mean_unit_radius():
    rng = np.random.default_rng(1)
    pts = normalize_cloud(rng.normal(2.0, 3.0, size=(50, 3)))
    assert np.allclose(pts.mean(axis=0), 0.0, atol=1e-12)
    assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0)


# ----------------------------------------------------------------------
# training loop


def test_zero_learning_rate_leaves_parameters_bit_identical():
    cfg = toy_config(learning_rate=0.0)
    ds = toy_dataset()
    model = build_model(cfg)
    params = model.parameters()
    before = {k: v.data.copy() for k, v in params.items()}
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(0)
    train_step([s.cloud for s in ds[:2]], model, opt, cfg, 0, 10, rng)
    for k, v in params.items():
        assert np.array_equal(v.data, before[k]), k


def test_metrics_identity_and_determinism():
    cfg = toy_config()
    clouds = [s.cloud for s in toy_dataset()]
    _, rec_a = run_pretraining(clouds, cfg, 2)
    _, rec_b = run_pretraining(clouds, cfg, 2)
    for ra, rb in zip(rec_a, rec_b):
        assert ra.l_total == ra.l_ass + ra.l_cts + ra.l_contras
        assert (ra.l_ass, ra.l_cts, ra.l_contras) == (rb.l_ass, rb.l_cts, rb.l_contras)
        assert ra.grad_norm == rb.grad_norm


def test_forward_cloud_losses_are_finite_and_composed():
    cfg = toy_config()
    cloud = toy_dataset()[0].cloud
    model = build_model(cfg)
    out = forward_cloud(cloud, model, cfg, fps_seed=1, mask_seed=2)
    for term in (out.l_ass, out.l_cts, out.l_contras):
        assert np.isfinite(term.item())
    assert 0.0 <= out.l_contras.item() <= 8.0
    assert out.plan_ab.shape == (cfg.patches, cfg.clusters)


def test_checkpoint_roundtrip_preserves_forward(tmp_path):
    cfg = toy_config()
    cloud = toy_dataset()[0].cloud
    model = build_model(cfg)
    before = forward_cloud(cloud, model, cfg, fps_seed=3, mask_seed=4)
    path = tmp_path / "model.bin"
    save_checkpoint(path, model.parameters())
    reloaded = build_model(cfg, np.random.default_rng(999))
    load_checkpoint(path, reloaded.parameters())
    after = forward_cloud(cloud, reloaded, cfg, fps_seed=3, mask_seed=4)
    assert before.l_ass.item() == after.l_ass.item()
    assert before.l_cts.item() == after.l_cts.item()
    assert before.l_contras.item() == after.l_contras.item()


# ----------------------------------------------------------------------
# linear probe


def test_probe_requires_two_classes():
    cfg = toy_config()
    ds = generate_dataset([("sphere", 4)], 64, 0.05, seed=0)
    with pytest.raises(ValueError):
        linear_probe(build_model(cfg), cfg, ds)


def test_probe_leaves_backbone_bit_identical():
    cfg = toy_config()
    ds = toy_dataset(n_per_class=5)
    model = build_model(cfg)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    acc = linear_probe(model, cfg, ds)
    assert 0.0 <= acc <= 1.0
    for k, v in model.parameters().items():
        assert np.array_equal(v.data, before[k]), k


def test_stratified_split_is_deterministic_and_per_class():
    labels = np.repeat([0, 1, 2, 3], 10)
    tr, te = stratified_split(labels)
    tr2, te2 = stratified_split(labels)
    assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    assert len(tr) == 32 and len(te) == 8
    for cls in range(4):
        assert (labels[te] == cls).sum() == 2


# ----------------------------------------------------------------------
# CLI


def test_cli_gen_data_and_pretrain_and_cluster(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "shapes": [{"generator": "sphere", "count": 2},
                   {"generator": "box", "count": 2}],
        "points": 64, "noise": 0.05, "seed": 1}))
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--spec", str(spec), "--out", str(data_dir)]) == 0
    assert len(list(data_dir.glob("*.xyz"))) == 4

    cfg = toy_config(steps=1, batch_size=2)
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    out = tmp_path / "run"
    assert cli.main(["pretrain", "--config", str(cfg_path), "--out", str(out),
                     "--clouds-per-class", "1", "--noise", "0.05"]) == 0
    assert (out / "checkpoint.bin").exists()
    assert (out / "metrics.csv").read_text().count("\n") == 2  # header + 1 step
    for line in (out / "metrics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        assert rec["l_total"] == pytest.approx(
            rec["l_ass"] + rec["l_cts"] + rec["l_contras"], abs=1e-9)

    labels_out = tmp_path / "labels.xyz"
    cloud_file = sorted(data_dir.glob("*.xyz"))[0]
    assert cli.main(["cluster", "--checkpoint", str(out / "checkpoint.bin"),
                     "--input", str(cloud_file),
                     "--labels-out", str(labels_out)]) == 0
    from pointssl.pointcloud import read_xyz
    pts, labels = read_xyz(labels_out)
    assert pts.shape == (64, 3)
    assert labels is not None and set(labels) <= set(range(cfg.clusters))


def test_cli_probe(tmp_path):
    cfg = toy_config()
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(cfg.to_json())
    model = build_model(cfg)
    ckpt = tmp_path / "m.bin"
    save_checkpoint(ckpt, model.parameters())

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "shapes": [{"generator": g, "count": 5} for g in GENERATORS],
        "points": 64, "noise": 0.05, "seed": 2}))
    data_dir = tmp_path / "data"
    cli.main(["gen-data", "--spec", str(spec), "--out", str(data_dir)])
    assert cli.main(["probe", "--checkpoint", str(ckpt), "--config", str(cfg_path),
                     "--data", str(data_dir), "--epochs", "50"]) == 0
