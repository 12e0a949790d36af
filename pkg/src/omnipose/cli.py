"""Command-line interface: ``omnipose {infer,init-weights,encode,decode,eval,count,selftest}``.

Exit codes: 0 on success (whatever the scores), 1 on I/O, format or schema
errors, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from omnipose import codec, io, metrics, model, selftest
from omnipose.layers import reduction


def _meta(args) -> codec.HeatmapMeta:
    return codec.HeatmapMeta(stride=args.stride, offset=tuple(args.offset), sigma=args.sigma)


def _load_model(args) -> model.Model:
    cfg = io.read_model_config(args.config)
    if args.weights:
        return io.load_weights(cfg, args.weights)
    seed = cfg.seed if args.seed is None else args.seed
    return model.Model.init(cfg, seed=seed, zero=args.zero_weights)


def _image_batch(t: np.ndarray) -> np.ndarray:
    if t.ndim == 3:
        t = t[None]
    if t.ndim != 4:
        raise io.FormatError(f"image tensor must be [3,H,W] or [N,3,H,W], got shape {t.shape}")
    return t


def cmd_infer(args) -> int:
    m = _load_model(args)
    src = Path(args.input)
    inputs = sorted(src.glob(f"*{io.TENSOR_SUFFIX}")) if src.is_dir() else [src]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = codec.HeatmapMeta(stride=m.config.heatmap_stride, offset=(0.0, 0.0))
    names = io.default_keypoint_names(m.config.num_joints)
    for path in inputs:
        images = _image_batch(io.read_tensor(path))
        heatmaps = model.forward(images, m)
        stem = path.name[: -len(io.TENSOR_SUFFIX)] if path.name.endswith(io.TENSOR_SUFFIX) else path.stem
        io.write_tensor(out / f"{stem}.heatmaps{io.TENSOR_SUFFIX}", heatmaps, args.dtype)
        h, w = m.config.input_size
        images_doc = [{"id": i, "file": path.name, "width": w, "height": h} for i in range(len(heatmaps))]
        anns = [codec.decode_annotation(hm, meta, args.refine, id=i, image_id=i) for i, hm in enumerate(heatmaps)]
        io.write_keypoints(io.KeypointFile(names, images_doc, anns), out / f"{stem}.keypoints.json")
        print(f"{path.name}: heatmaps {list(heatmaps.shape)} -> {out}")
    return 0


def cmd_init_weights(args) -> int:
    m = _load_model(args)
    io.save_weights(m, args.out, args.dtype)
    print(f"wrote {len(m.params)} tensors to {args.out}")
    return 0


def cmd_encode(args) -> int:
    kf = io.read_keypoints(args.gt, "gt")
    meta = _meta(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sizes = {img["id"]: img for img in kf.images}
    entries = []
    for ann in kf.annotations:
        if args.size:
            h, w = args.size
        else:
            img = sizes.get(ann.image_id)
            if not img or "width" not in img or "height" not in img:
                raise io.SchemaError(f"$.images[id={ann.image_id}]", "needs width/height (or pass --size)")
            h, w = int(np.ceil(img["height"] / args.stride)), int(np.ceil(img["width"] / args.stride))
        planes, mask = codec.encode(ann, meta, h, w)
        name = f"ann_{ann.id}{io.TENSOR_SUFFIX}"
        io.write_tensor(out / name, planes, args.dtype)
        entries.append({"file": name, "annotation_id": ann.id, "image_id": ann.image_id,
                        "mask": [bool(x) for x in mask]})
    io.dump_json({"keypoints": kf.keypoint_names, "k_i": kf.k, "images": kf.images,
                  "stride": args.stride, "offset": list(args.offset), "sigma": args.sigma,
                  "entries": entries}, out / "manifest.json")
    print(f"encoded {len(entries)} annotations into {out}")
    return 0


def cmd_decode(args) -> int:
    meta = _meta(args)
    entries, names, images, k = [], None, [], None
    paths = [Path(p) for p in args.heatmaps]
    if len(paths) == 1 and paths[0].is_dir():
        manifest = paths[0] / "manifest.json"
        if manifest.exists():
            doc = io._load_json(manifest)
            names, images, k = doc.get("keypoints"), doc.get("images", []), doc.get("k_i")
            entries = [(paths[0] / e["file"], e["annotation_id"], e["image_id"], e.get("mask")) for e in doc["entries"]]
        else:
            paths = sorted(paths[0].glob(f"*{io.TENSOR_SUFFIX}"))
    if not entries:
        entries = [(p, i, i, None) for i, p in enumerate(paths)]
        images = [{"id": i, "file": p.name} for i, p in enumerate(paths)]
    anns = []
    for path, ann_id, image_id, mask in entries:
        hm = io.read_tensor(path)
        if hm.ndim == 4 and hm.shape[0] == 1:
            hm = hm[0]
        anns.append(codec.decode_annotation(hm, meta, args.refine, joint_mask=mask, id=ann_id, image_id=image_id))
    if names is None:
        names = io.default_keypoint_names(anns[0].num_joints if anns else 17)
    io.write_keypoints(io.KeypointFile(names, images, anns, k), args.out)
    print(f"decoded {len(anns)} instances into {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = io.read_keypoints(args.pred, "pred")
    gt = io.read_keypoints(args.gt, "gt")
    if pred.num_joints != gt.num_joints:
        raise io.SchemaError("$.categories[0].keypoints",
                             f"prediction file has {pred.num_joints} joints, ground truth has {gt.num_joints}")
    report = metrics.EvalReport()
    if args.metric == "pckh":
        for i, a in enumerate(gt.annotations):
            if a.head_size is None:
                raise io.SchemaError(f"{args.gt}:$.annotations[{i}].head_size",
                                     f"required for --metric pckh (annotation id {a.id!r})")
        by_id = {(a.image_id, a.id): a for a in pred.annotations}
        pairs = []
        for a in gt.annotations:
            p = by_id.get((a.image_id, a.id))
            if p is None:
                raise io.SchemaError("$.annotations", f"no prediction for gt annotation id {a.id!r} (image {a.image_id!r})")
            pairs.append(p)
        res = metrics.pckh(pairs, gt.annotations, args.alpha)
        report.pckh_alpha, report.pckh_per_joint, report.pckh_mean = args.alpha, res.per_joint, res.mean
        report.pckh_groups = metrics.pckh_groups(res, gt.keypoint_names)
        table = metrics.format_pckh_table(report)
    else:
        base = io.read_oks_config(args.oks_config) if args.oks_config else None
        cfg = io.oks_config_for(gt, base)
        report = metrics.match_and_ap(pred.by_image(), gt.by_image(), cfg)
        table = metrics.format_ap_table(report)
    if args.out:
        io.dump_json(report.to_dict(), args.out)
    print(table)
    return 0


def cmd_count(args) -> int:
    cfg = io.read_model_config(args.config)
    if args.input_size:
        cfg = model.ModelConfig(cfg.backbone, cfg.wasp, tuple(args.input_size), cfg.seed) if cfg.backbone else cfg
    rep = model.count_cost(cfg)
    std = model.count_cost(model.lite_variant(cfg, False))
    lite = model.count_cost(model.lite_variant(cfg, True))
    red = reduction(std, lite)
    doc = rep.to_dict()
    doc["standard"] = {"params": std.params, "flops": std.flops}
    doc["lite"] = {"params": lite.params, "flops": lite.flops}
    doc["lite_reduction"] = red
    if args.json:
        io.dump_json(doc, args.json)
    width = max([len(l.name) for l in rep.layers] + [5])
    print(f"{'layer':<{width}}  {'params':>12}  {'flops':>16}")
    for l in rep.layers:
        print(f"{l.name:<{width}}  {l.params:>12,d}  {l.flops:>16,d}")
    print(f"{'total':<{width}}  {rep.params:>12,d}  {rep.flops:>16,d}")
    print(f"standard: {std.params:,d} params, {std.flops / 1e9:.4f} GFLOPs")
    print(f"lite:     {lite.params:,d} params, {lite.flops / 1e9:.4f} GFLOPs")
    print(f"lite reduction: params {100 * red['params']:.1f}%, FLOPs {100 * red['flops']:.1f}%")
    return 0


def cmd_selftest(args) -> int:
    results = selftest.run(args.seed)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnipose", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp):
        sp.add_argument("--config", required=True, help="model config JSON")
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--weights", help="directory of weight tensor files")
        g.add_argument("--zero-weights", action="store_true", help="use an all-zero model")
        sp.add_argument("--seed", type=int, default=None, help="init seed (default: config seed)")

    def meta_args(sp):
        sp.add_argument("--stride", type=float, required=True, help="image pixels per heatmap pixel")
        sp.add_argument("--offset", type=float, nargs=2, default=(0.0, 0.0), metavar=("OX", "OY"))
        sp.add_argument("--sigma", type=float, default=3.0, help="target Gaussian sigma (default 3)")

    sp = sub.add_parser("infer", help="run the model on image tensor files")
    sp.add_argument("input", help="image tensor file or directory of them")
    model_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--refine", choices=codec.REFINEMENTS, default="taylor")
    sp.add_argument("--dtype", choices=sorted(io.DTYPES), default="f64")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("init-weights", help="write an initialized weights directory")
    model_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dtype", choices=sorted(io.DTYPES), default="f64")
    sp.set_defaults(func=cmd_init_weights)

    sp = sub.add_parser("encode", help="ground-truth keypoints -> target heatmaps")
    sp.add_argument("gt")
    meta_args(sp)
    sp.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="heatmap size")
    sp.add_argument("--out", required=True)
    sp.add_argument("--dtype", choices=sorted(io.DTYPES), default="f64")
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="heatmaps -> predicted keypoints")
    sp.add_argument("heatmaps", nargs="+", help="heatmap tensor files or an encode output directory")
    meta_args(sp)
    sp.add_argument("--refine", choices=codec.REFINEMENTS, default="taylor")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("--metric", choices=("pckh", "oks-ap"), required=True)
    sp.add_argument("--alpha", type=float, default=0.5, help="PCKh threshold as a fraction of head size")
    sp.add_argument("--oks-config", help="JSON with k, thresholds, medium_range, large_range")
    sp.add_argument("--out", help="write the report as JSON")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("count", help="parameter and FLOP counts")
    sp.add_argument("config")
    sp.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    sp.add_argument("--json", help="write the report as JSON")
    sp.set_defaults(func=cmd_count)

    sp = sub.add_parser("selftest", help="run the built-in verification battery")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (io.FormatError, metrics.MetricError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
