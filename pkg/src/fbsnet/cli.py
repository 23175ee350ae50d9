"""``fbsnet`` command line: analyze, infer, train-toy, eval, selftest."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, checks, fileio
from .model import ModelConfig, build, config_for_registry, load_weights, predict_labels, save_weights
from .training import ConfusionMatrix, TrainConfig, make_toy_dataset, miou, train_loop

log = logging.getLogger("fbsnet")


def _size(text):
    try:
        return fileio.parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def cmd_analyze(args):
    cfg = fileio.load_config(args.config) if args.config else ModelConfig()
    if args.input_size:
        cfg = replace(cfg, input_size=args.input_size).validate()
    report = analysis.analyze(build(cfg))
    sib = None
    if cfg.spatial_branch:
        sib = analysis.analyze(build(replace(cfg, spatial_branch=False)))
    print(report.to_text())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    for name, value, target, rel, ok in analysis.budget_checks(report, sib):
        if name == "flops" and tuple(cfg.input_size) != (512, 1024):
            print(f"SKIP flops: the budget is defined at 512x1024, not {cfg.input_size[0]}x{cfg.input_size[1]}")
            continue
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value} vs {target} (rel err {rel:.3f})")
    return 0


def _load_model(weights, input_size, num_classes=None):
    registry = load_weights(weights)
    cfg = config_for_registry(registry, input_size).validate()
    if num_classes is not None and num_classes != cfg.num_classes:
        raise ValueError(f"--classes {num_classes} but the weight file holds {cfg.num_classes} classes")
    graph = build(cfg)
    load_weights(weights, graph)
    return graph


def cmd_infer(args):
    image = fileio.load_image_ppm(args.image, args.normalize)
    graph = _load_model(args.weights, image.shape[2:], args.classes)
    labels = predict_labels(graph, image)[0, 0]
    fileio.save_label_ppm(args.out, labels, fileio.Palette.default(graph.config.num_classes))
    return 0


def _dump_dataset(dataset, root):
    images, labels = Path(root) / "images", Path(root) / "labels"
    images.mkdir(parents=True, exist_ok=True)
    labels.mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(dataset):
        fileio.save_image_ppm(images / f"toy_{i:03d}.ppm", img)
        fileio.write_pgm(labels / f"toy_{i:03d}.pgm", lab)


def cmd_train_toy(args):
    num_classes = 4
    dataset = make_toy_dataset(args.seed, n_images=8, size=(64, 128), num_classes=num_classes)
    if args.data_dir:
        # the stored images are u8-quantized; train on exactly what eval will read back
        _dump_dataset(dataset, args.data_dir)
    dataset = [(np.rint(img * 255).astype(np.float32) / np.float32(255), lab) for img, lab in dataset]
    graph = build(ModelConfig(num_classes=num_classes, input_size=(64, 128), seed=args.seed))
    cfg = TrainConfig(iterations=args.iters, optimizer=args.optimizer, seed=args.seed,
                      eval_every=args.eval_every, normalize=args.normalize)

    def report(row):
        if row.pixel_acc == row.pixel_acc:
            print(f"iter {row.iteration + 1} loss {row.loss:.4f} lr {row.lr:.5f}"
                  f" pixel_acc {row.pixel_acc:.4f} miou {row.miou:.4f}", flush=True)

    history = train_loop(graph, dataset, cfg, callback=report)
    save_weights(graph, args.out_weights)
    if args.history:
        history.write_csv(args.history)
    return 0


def _pairs(images_dir, labels_dir):
    images = sorted(Path(images_dir).glob("*.ppm"))
    if not images:
        raise FileNotFoundError(f"no .ppm images in {images_dir}")
    pairs = []
    for img in images:
        match = [p for ext in (".pgm", ".ppm") if (p := Path(labels_dir) / (img.stem + ext)).exists()]
        if not match:
            raise FileNotFoundError(f"no label file for {img.name} in {labels_dir}")
        pairs.append((img, match[0]))
    return pairs


def cmd_eval(args):
    pairs = _pairs(args.images, args.labels)
    graphs, cm = {}, None
    for img_path, lab_path in pairs:
        image = fileio.load_image_ppm(img_path, args.normalize)
        size = tuple(image.shape[2:])
        if size not in graphs:
            graphs[size] = _load_model(args.weights, size, args.classes)
        graph = graphs[size]
        if cm is None:
            cm = ConfusionMatrix(graph.config.num_classes)
            palette = fileio.Palette.default(graph.config.num_classes)
        gt = fileio.read_label_file(lab_path, palette)
        if gt.shape != size:
            raise ValueError(f"{lab_path.name}: label is {gt.shape}, image is {size}")
        cm.accumulate(predict_labels(graph, image)[0, 0], gt)
    per_class, mean = miou(cm)
    names = palette.names or tuple(str(k) for k in range(len(per_class)))
    for k, iou in enumerate(per_class):
        label = names[k] if k < len(names) else str(k)
        print(f"class {k:>2} {label:<14} IoU {'n/a' if iou != iou else f'{iou:.4f}'}")
    print(f"pixel_acc {cm.pixel_accuracy():.4f}")
    print(f"mIoU {mean:.4f}")
    return 0


def cmd_selftest(args):
    rows = checks.run_selftest(conv_cases=args.conv_cases)
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = sum(not ok for _, ok, _ in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return 1 if failed else 0


def make_parser():
    p = argparse.ArgumentParser(prog="fbsnet", description="numpy segmentation engine tools")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="per-layer shapes, parameters, MACs and budget checks")
    a.add_argument("--config", help="key=value model config file")
    a.add_argument("--input-size", type=_size, help="HxW override")
    a.add_argument("--csv", help="also write the table as CSV here")
    a.set_defaults(fn=cmd_analyze)

    i = sub.add_parser("infer", help="segment one PPM image")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--classes", type=int)
    i.add_argument("--normalize", action="store_true", help="scale inputs with mean 0.5, std 0.5")
    i.set_defaults(fn=cmd_infer)

    t = sub.add_parser("train-toy", help="fit the synthetic 4-class task")
    t.add_argument("--seed", type=int, default=7)
    t.add_argument("--iters", type=int, default=300)
    t.add_argument("--out-weights", required=True)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--history", help="write the per-iteration history CSV here")
    t.add_argument("--data-dir", help="write the toy images and labels here for later eval")
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--normalize", action="store_true")
    t.set_defaults(fn=cmd_train_toy)

    e = sub.add_parser("eval", help="per-class IoU and mIoU over a directory of images")
    e.add_argument("--weights", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--classes", type=int)
    e.add_argument("--normalize", action="store_true")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selftest", help="gradient checks, conv oracles, shuffle checks")
    s.add_argument("--conv-cases", type=int, default=200)
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # reported, not raised: exit status 1 marks a runtime failure
        print(f"fbsnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
