"""``pcpanoptic`` command line.

Every subcommand reads its inputs, computes everything in memory and only
then writes its outputs, all-or-nothing. Exit codes: 0 success, 1 invalid
input or arguments (including point-count mismatches), 2 I/O failure.

Intermediate files of the stepwise route::

    downsample  cloud.ply            -> sub.ply + kept.npy
    tile        sub.ply              -> spheres.npz
    cluster     sub.ply spheres.npz PRED -> local.npz
    merge       sub.ply spheres.npz local.npz -> sub_result.ply
    upsample    cloud.ply sub_result.ply -> result.ply
    eval        cloud.ply result.ply -> report.json

``pipeline`` runs the same chain in one go and produces the same result
and report bytes.
"""

from __future__ import annotations

import argparse
import io as _io
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io as pio
from .cluster import connected_components, mean_shift
from .losses import loss_breakdown
from .metrics import evaluate
from .model import NPM3D_TAXONOMY, PipelineConfig, PointCloud, SegmentationResult, Taxonomy, validate
from .pipeline import MODES, align_predictions, cluster_spheres, fuse_semantics, merge_spheres, run_pipeline
from .sampling import SphereBatch, sphere_features, tile_spheres, upsample_labels, voxel_downsample
from .synth import NoiseSpec, SceneSpec, generate_scene, simulate_predictions

log = logging.getLogger("pcpanoptic")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

# flag name -> PipelineConfig field
CONFIG_FLAGS = {
    "voxel-size": "voxel_size", "radius": "radius", "stride": "stride", "k-points": "k_points",
    "feature-dim": "feature_dim", "w-embed": "w_embed", "w-offset": "w_offset", "w-reg": "w_reg",
    "th-d": "th_d", "th-n": "th_n", "th-bm": "th_bm", "bandwidth": "bandwidth", "emb-dim": "emb_dim",
    "seed": "seed", "rescue-factor": "rescue_factor", "max-iter": "max_iter", "tol": "tol",
}
_INT_FIELDS = {"k_points", "feature_dim", "th_n", "emb_dim", "seed", "max_iter"}
_EXTRA_KEYS = {"mode", "threads"}


def _convert(key, raw):
    try:
        if key in _INT_FIELDS or key == "threads":
            return int(raw)
        if key == "mode":
            if raw not in MODES:
                raise ValueError
            return raw
        return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys use either dash or underscore."""
    known = {f.name for f in fields(PipelineConfig)} | _EXTRA_KEYS
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve_config(args):
    """Config file values overridden by explicit flags; returns ``(cfg, mode, threads)``."""
    values = read_config_file(args.config) if args.config else {}
    for flag, name in CONFIG_FLAGS.items():
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    for key in _EXTRA_KEYS:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    mode = values.pop("mode", "embed")
    threads = values.pop("threads", 1)
    return PipelineConfig(**values), mode, threads


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline parameters")
    for flag, name in CONFIG_FLAGS.items():
        g.add_argument(f"--{flag}", dest=name, type=int if name in _INT_FIELDS else float, default=None)
    g.add_argument("--mode", choices=MODES, default=None)
    g.add_argument("--threads", type=int, default=None,
                   help="parallelism cap; results do not depend on it")
    g.add_argument("--config", default=None, help="flat 'key = value' file; flags override it")
    g.add_argument("--taxonomy", default=None, help="JSON taxonomy (default: NPM3D classes)")
    return p


def _taxonomy(args):
    if args.taxonomy is None:
        return NPM3D_TAXONOMY
    return Taxonomy.from_dict(json.loads(Path(args.taxonomy).read_text()))


# -------------------------------------------------------------------- helpers


def _read_cloud(path, taxonomy=None):
    cloud = pio.read_ply(path)
    issues = validate(cloud, taxonomy)
    if issues:
        raise ValueError(f"{path}: {len(issues)} problem(s), first: {issues[0]}")
    return cloud


def _encode_spheres(spheres) -> bytes:
    buf = _io.BytesIO()
    centers = np.array([s.center for s in spheres]).reshape(-1, 3)
    ptr = np.concatenate([[0], np.cumsum([len(s) for s in spheres])]).astype(np.int64)
    idx = np.concatenate([s.point_indices for s in spheres]) if spheres else np.zeros(0, np.int64)
    np.savez(buf, centers=centers, ptr=ptr, indices=idx)
    return buf.getvalue()


def _load_npz(path):
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, EOFError) as exc:
        raise pio.FormatError(f"{path}: not a readable .npz archive ({exc})") from None


def _read_spheres(path, cloud, feature_dim):
    z = _load_npz(path)
    centers, ptr, idx = z["centers"], z["ptr"], z["indices"]
    if len(idx) and idx.max() >= len(cloud):
        raise ValueError(f"{path}: sphere indices exceed the {len(cloud)}-point cloud")
    out = []
    for i, c in enumerate(centers):
        members = idx[ptr[i]:ptr[i + 1]]
        out.append(SphereBatch(c, members, sphere_features(cloud, members, c, feature_dim)))
    return out


def _encode_npz(**arrays) -> bytes:
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _npy_bytes(arr) -> bytes:
    buf = _io.BytesIO()
    np.save(buf, arr)
    return buf.getvalue()


def _result_cloud(cloud: PointCloud, result: SegmentationResult) -> PointCloud:
    return PointCloud(cloud.positions, cloud.colors, result.semantic, result.instance)


def _require_labels(cloud, path):
    if cloud.semantic is None or cloud.instance is None:
        raise ValueError(f"{path}: cloud needs 'sem' and 'ins' properties")


# ----------------------------------------------------------------- subcommands


def cmd_pipeline(args):
    cfg, mode, _ = resolve_config(args)
    tax = _taxonomy(args)
    cloud = _read_cloud(args.cloud, tax)
    preds = pio.read_predictions(args.pred)
    out = run_pipeline(cloud, preds, cfg, tax, mode, args.aligned)
    items = [(args.out, pio.encode_ply(_result_cloud(cloud, out.result)))]
    if args.report:
        if out.report is None:
            raise ValueError("cannot score: input cloud carries no ground-truth labels")
        items.append((args.report, pio.dumps_json(out.report.to_dict()).encode()))
    pio.atomic_write_many(items)
    if out.report is not None:
        log.info("PQ %.4f", out.report.panoptic["pq"] or 0.0)


def cmd_downsample(args):
    cfg, _, _ = resolve_config(args)
    cloud = _read_cloud(args.cloud)
    sub, kept = voxel_downsample(cloud, cfg.voxel_size, cfg.seed)
    items = [(args.out, pio.encode_ply(sub))]
    if args.indices:
        items.append((args.indices, _npy_bytes(kept)))
    pio.atomic_write_many(items)
    log.info("%d -> %d points", len(cloud), len(sub))


def cmd_tile(args):
    cfg, _, _ = resolve_config(args)
    sub = _read_cloud(args.cloud)
    spheres = tile_spheres(sub, cfg.radius, cfg.stride, cfg.feature_dim)
    pio.atomic_write(args.out, _encode_spheres(spheres))
    log.info("%d spheres", len(spheres))


def _sub_predictions(args, sub):
    preds = pio.read_predictions(args.pred)
    if args.aligned == "full":
        if not args.indices:
            raise UsageError("--aligned full needs --indices from the downsample step")
        kept = np.load(args.indices, allow_pickle=False)
        if len(kept) != len(sub):
            raise ValueError(f"{args.indices} lists {len(kept)} points, sub cloud has {len(sub)}")
        n_full = args.n_full if args.n_full is not None else len(preds)
        return align_predictions(preds, n_full, kept, "full")
    return align_predictions(preds, len(sub), np.arange(len(sub)), "sub")


def cmd_cluster(args):
    cfg, mode, _ = resolve_config(args)
    tax = _taxonomy(args)
    sub = _read_cloud(args.cloud)
    spheres = _read_spheres(args.spheres, sub, cfg.feature_dim)
    preds = _sub_predictions(args, sub)
    if preds.class_probs is not None and preds.num_classes != tax.num_classes:
        raise ValueError(f"predictions have {preds.num_classes} classes, taxonomy has {tax.num_classes}")
    semantic = fuse_semantics(len(sub), spheres, preds)
    local = cluster_spheres(sub, spheres, preds, semantic, tax, cfg, mode)
    flat = np.concatenate(local) if local else np.zeros(0, np.int64)
    pio.atomic_write(args.out, _encode_npz(semantic=semantic, labels=flat))


def cmd_merge(args):
    cfg, _, _ = resolve_config(args)
    tax = _taxonomy(args)
    sub = _read_cloud(args.cloud)
    spheres = _read_spheres(args.spheres, sub, cfg.feature_dim)
    z = _load_npz(args.local)
    semantic, flat = z["semantic"], z["labels"]
    sizes = [len(s) for s in spheres]
    if len(flat) != sum(sizes) or len(semantic) != len(sub):
        raise ValueError(f"{args.local} does not match the sphere file / sub cloud")
    local = np.split(flat, np.cumsum(sizes)[:-1]) if spheres else []
    result = merge_spheres(len(sub), tax.num_classes, spheres, local, semantic, cfg.th_bm)
    pio.atomic_write(args.out, pio.encode_ply(_result_cloud(sub, result)))


def cmd_upsample(args):
    cfg, _, _ = resolve_config(args)
    full = _read_cloud(args.cloud)
    sub = _read_cloud(args.sub)
    _require_labels(sub, args.sub)
    result = upsample_labels(full, sub, SegmentationResult.from_cloud(sub), cfg.th_d, cfg.rescue_factor)
    pio.atomic_write(args.out, pio.encode_ply(_result_cloud(full, result)))


def cmd_eval(args):
    tax = _taxonomy(args)
    gt = _read_cloud(args.gt, tax)
    pred = _read_cloud(args.pred_cloud)
    _require_labels(gt, args.gt)
    _require_labels(pred, args.pred_cloud)
    if len(gt) != len(pred):
        raise ValueError(f"point count mismatch: {len(gt)} ground-truth vs {len(pred)} predicted")
    report = evaluate(SegmentationResult.from_cloud(gt), SegmentationResult.from_cloud(pred), tax)
    pio.atomic_write(args.out, pio.dumps_json(report.to_dict()).encode())


def cmd_loss(args):
    cfg, _, _ = resolve_config(args)
    tax = _taxonomy(args)
    cloud = _read_cloud(args.cloud, tax)
    _require_labels(cloud, args.cloud)
    preds = pio.read_predictions(args.pred)
    if len(preds) != len(cloud):
        raise ValueError(f"point count mismatch: {len(preds)} predictions vs {len(cloud)} points")
    sem_ok = np.ones(len(cloud), bool) if tax.ignore_label is None else cloud.semantic != tax.ignore_label
    inst_ok = cloud.instance >= 0
    kw = {}
    if preds.class_probs is not None:
        kw.update(probs=preds.class_probs[sem_ok], labels=cloud.semantic[sem_ok])
    if inst_ok.any():
        if preds.embeddings is not None:
            kw["embeddings"] = preds.embeddings[inst_ok]
        if preds.offsets is not None:
            kw.update(offsets=preds.offsets[inst_ok], positions=cloud.positions[inst_ok])
        kw["instances"] = cloud.instance[inst_ok]
    parts = loss_breakdown(**kw, w_embed=cfg.w_embed, w_offset=cfg.w_offset, w_reg=cfg.w_reg)
    payload = parts.to_dict()
    payload["meta"] = {"w_embed": cfg.w_embed, "w_offset": cfg.w_offset, "w_reg": cfg.w_reg,
                       "n_points": len(cloud), "n_instance_points": int(inst_ok.sum())}
    pio.atomic_write(args.out, pio.dumps_json(payload).encode())


def cmd_synth(args):
    cfg, _, _ = resolve_config(args)
    tax = _taxonomy(args)
    spec = SceneSpec.mixed(args.things, extent=tuple(args.extent), density=args.density, seed=cfg.seed,
                           merge_grid=(cfg.radius, cfg.stride) if args.merge_safe else None)
    cloud = generate_scene(spec, tax)
    noise = NoiseSpec(args.sem_confusion, args.emb_sigma, args.emb_sep, args.off_sigma, cfg.seed + 1)
    preds = simulate_predictions(cloud, noise, tax.num_classes, cfg.emb_dim)
    pio.atomic_write_many([(args.out_cloud, pio.encode_ply(cloud)),
                           (args.out_pred, pio.encode_predictions(preds))])
    log.info("%d points, %d things", len(cloud), int(cloud.instance.max()) + 1)


def bench_clustering(n_points, seed=0, blob_points=3000, sphere_points=20000, emb_dim=5, cfg=None):
    """Seconds per million points for both clustering routes on synthetic blobs."""
    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(seed)
    n_blobs = max(1, n_points // blob_points)
    centers = rng.uniform(0, 100, (n_blobs, 3))
    member = rng.integers(0, n_blobs, n_points)
    # shifted coordinates: instance centers plus a residual offset error
    shifted = centers[member] + rng.normal(0, cfg.th_d / 3, (n_points, 3))
    sem = rng.integers(0, 3, n_points)
    t0 = time.perf_counter()
    connected_components(shifted, sem, cfg.th_d, cfg.th_n)
    t_cc = time.perf_counter() - t0
    # embeddings come in sphere-sized batches with a few instances each
    t_ms = 0.0
    for lo in range(0, n_points, sphere_points):
        n = min(sphere_points, n_points - lo)
        k = max(1, n // blob_points)
        codes = 3.0 * rng.integers(0, 4, (k, emb_dim))
        emb = codes[rng.integers(0, k, n)] + rng.normal(0, 0.05, (n, emb_dim))
        t0 = time.perf_counter()
        mean_shift(emb, cfg.bandwidth, cfg.max_iter, cfg.tol)
        t_ms += time.perf_counter() - t0
    scale = 1e6 / n_points
    return {"n_points": n_points, "offset_clustering_s_per_mpts": t_cc * scale,
            "embedding_clustering_s_per_mpts": t_ms * scale}


def cmd_bench(args):
    cfg, _, _ = resolve_config(args)
    res = bench_clustering(args.points, cfg.seed, cfg=cfg)
    text = pio.dumps_json(res)
    if args.out:
        pio.atomic_write(args.out, text.encode())
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parent = _config_parent()
    p = _Parser(prog="pcpanoptic", description="Panoptic post-processing and evaluation of point clouds.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[parent], help=help_)
        sp.set_defaults(func=func)
        return sp

    def aligned(sp):
        sp.add_argument("--aligned", choices=("full", "sub"), default="full",
                        help="prediction rows follow the full cloud (default) or the downsampled one")

    sp = add("pipeline", cmd_pipeline, "full chain from cloud + predictions to result + report")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out", required=True, help="result PLY")
    sp.add_argument("--report", help="metrics JSON (needs labels in --cloud)")
    aligned(sp)

    sp = add("downsample", cmd_downsample, "voxel-grid downsampling")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--indices", help="write kept indices (.npy)")

    sp = add("tile", cmd_tile, "cover a cloud with spheres")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--out", required=True, help="sphere file (.npz)")

    sp = add("cluster", cmd_cluster, "fuse semantics and cluster instances per sphere")
    sp.add_argument("--cloud", required=True, help="downsampled cloud")
    sp.add_argument("--spheres", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--indices", help="kept indices from downsample (for --aligned full)")
    sp.add_argument("--n-full", dest="n_full", type=int, help="point count of the full cloud")
    sp.add_argument("--out", required=True, help="local labels (.npz)")
    aligned(sp)

    sp = add("merge", cmd_merge, "BlockMerging of per-sphere instance ids")
    sp.add_argument("--cloud", required=True, help="downsampled cloud")
    sp.add_argument("--spheres", required=True)
    sp.add_argument("--local", required=True)
    sp.add_argument("--out", required=True, help="labeled downsampled cloud (PLY)")

    sp = add("upsample", cmd_upsample, "map downsampled labels back to every point")
    sp.add_argument("--cloud", required=True, help="full cloud")
    sp.add_argument("--sub", required=True, help="labeled downsampled cloud")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score a labeled prediction against ground truth")
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred", dest="pred_cloud", required=True, help="predicted labels (PLY)")
    sp.add_argument("--out", required=True)

    sp = add("loss", cmd_loss, "evaluate the training losses of a prediction file")
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "write a synthetic scene and simulated predictions")
    sp.add_argument("--out-cloud", required=True)
    sp.add_argument("--out-pred", required=True)
    sp.add_argument("--things", type=int, default=24)
    sp.add_argument("--extent", type=float, nargs=3, default=(30.0, 30.0, 10.0))
    sp.add_argument("--density", type=float, default=150.0)
    sp.add_argument("--sem-confusion", type=float, default=0.0)
    sp.add_argument("--emb-sigma", type=float, default=0.0)
    sp.add_argument("--emb-sep", type=float, default=3.0)
    sp.add_argument("--off-sigma", type=float, default=0.0)
    sp.add_argument("--merge-safe", action="store_true",
                    help="place objects so sphere merging of exact labels is exact")

    sp = add("bench", cmd_bench, "clustering throughput in seconds per million points")
    sp.add_argument("--points", type=int, default=1_000_000)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PANOPTIC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (OSError, pio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
