"""Command-line interface: pretrain, probe, cluster, gen-data, gradcheck."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, MetricsRecord
from .data import GENERATORS, generate_dataset
from .pointcloud import PointCloud, read_xyz, write_xyz, build_patches, embed_patches
from .backbone import encode, decode, save_checkpoint, load_checkpoint
from .graph import build_graph
from .clustering import message_pass, cluster_scores
from .probe import linear_probe
from .train import build_model, run_pretraining
from . import gradcheck as gc


def _load_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return TrainConfig.from_json(Path(path).read_text())


def _load_dataset_dir(data_dir: Path):
    from .data import SyntheticShape

    shapes = []
    for f in sorted(data_dir.glob("*.xyz")):
        points, labels = read_xyz(f)
        label = int(labels[0]) if labels is not None else 0
        shapes.append(SyntheticShape(generator="file", label=label,
                                     cloud=PointCloud(points=points, label=label)))
    if not shapes:
        raise SystemExit(f"no .xyz files found in {data_dir}")
    return shapes


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = [(g, args.clouds_per_class) for g in GENERATORS]
    dataset = generate_dataset(spec, cfg.points_per_cloud, args.noise, cfg.seed)
    clouds = [s.cloud for s in dataset]
    metrics_path = out / "metrics.jsonl"
    records = []
    with open(metrics_path, "w") as fh:
        def on_step(rec: MetricsRecord):
            fh.write(rec.to_json() + "\n")
            fh.flush()
            records.append(rec)
            print(f"step {rec.step}: l_total={rec.l_total:.6f} "
                  f"(ass={rec.l_ass:.4f} cts={rec.l_cts:.4f} "
                  f"con={rec.l_contras:.4f}) {rec.wall_ms:.0f} ms")

        model, _ = run_pretraining(clouds, cfg, cfg.steps, on_step=on_step)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(MetricsRecord.CSV_HEADER + "\n")
        for rec in records:
            fh.write(rec.to_csv_row() + "\n")
    save_checkpoint(out / "checkpoint.bin", model.parameters())
    (out / "config.json").write_text(cfg.to_json())
    print(f"saved checkpoint and metrics to {out}")
    return 0


def _load_model(checkpoint: str, config: str | None):
    ckpt = Path(checkpoint)
    cfg_path = config or ckpt.with_name("config.json")
    cfg = TrainConfig.from_json(Path(cfg_path).read_text())
    model = build_model(cfg)
    load_checkpoint(ckpt, model.parameters())
    return model, cfg


def cmd_probe(args) -> int:
    model, cfg = _load_model(args.checkpoint, args.config)
    dataset = _load_dataset_dir(Path(args.data))
    acc = linear_probe(model, cfg, dataset, probe_epochs=args.epochs)
    print(f"linear probe accuracy: {acc:.4f}")
    return 0


def cmd_cluster(args) -> int:
    model, cfg = _load_model(args.checkpoint, args.config)
    points, _ = read_xyz(args.input)
    cloud = PointCloud(points=points)
    patches = build_patches(cloud, cfg.patches, cfg.k_patch, seed=cfg.seed)
    tokens = embed_patches(patches, model.pointnet)
    mask = np.zeros(cfg.patches, dtype=bool)
    view = encode(tokens, patches.centers, mask, model.encoder)
    rec = decode(view, patches.centers, mask, model.decoder, model.mask_token)
    graph = build_graph(patches.centers, rec.features, cfg.k_graph)
    scores = cluster_scores(message_pass(graph, rec.features, model.head), model.head)
    patch_labels = np.argmax(scores.data, axis=1)
    if args.dump_affinity:
        np.savetxt(args.dump_affinity, graph.weights.data, fmt="%.17g", delimiter=",")
    if args.dump_scores:
        np.savetxt(args.dump_scores, scores.data, fmt="%.17g", delimiter=",")
    # every point inherits the cluster of its nearest patch center
    from .pointcloud import knn
    nearest = knn(points, patches.centers, 1)[:, 0]
    write_xyz(args.labels_out, points, patch_labels[nearest])
    print(f"wrote {args.labels_out} with {args.k or cfg.clusters} clusters")
    return 0


def cmd_gen_data(args) -> int:
    spec_raw = json.loads(Path(args.spec).read_text())
    spec = [(entry["generator"], int(entry["count"])) for entry in spec_raw["shapes"]]
    n_points = int(spec_raw.get("points", 1024))
    sigma = float(spec_raw.get("noise", 0.0))
    seed = int(spec_raw.get("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shapes = generate_dataset(spec, n_points, sigma, seed)
    for i, s in enumerate(shapes):
        labels = np.full(s.cloud.num_points, s.label, dtype=np.intp)
        write_xyz(out / f"shape_{i:05d}.xyz", s.cloud.points, labels)
    print(f"wrote {len(shapes)} clouds to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    failures = gc.run_all(verbose=True)
    if failures:
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pointssl",
                                     description="Self-supervised point-cloud pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", help="JSON config file (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clouds-per-class", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.02)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on a labeled XYZ directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config JSON (default: next to checkpoint)")
    p.add_argument("--data", required=True, help="directory of labeled .xyz files")
    p.add_argument("--epochs", type=int, default=300)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("cluster", help="write per-point cluster labels for a cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config JSON (default: next to checkpoint)")
    p.add_argument("--input", required=True, help="input .xyz file")
    p.add_argument("--k", type=int, help="informational; clusters come from the config")
    p.add_argument("--labels-out", required=True)
    p.add_argument("--dump-affinity", help="write the affinity matrix as CSV")
    p.add_argument("--dump-scores", help="write the score matrix as CSV")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON spec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
