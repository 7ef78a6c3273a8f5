"""Command line entry point: ``cdnhoi <command> ...``.

Relative output paths are resolved against ``$CDNHOI_OUTPUT_ROOT`` when it is set.
Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, TrainConfig, load_config
from .data import (AnnotationError, HoiDataset, ImageRecord, SceneSpec, generate_dataset, load_annotations,
                   load_images, save_predictions, write_dataset)
from .evaluation import VocabularyError, evaluate_files, format_report, write_report
from .train import Checkpoint, NumericalError, dump_attention, finetune_reweight, load_model, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ROOT_ENV = "CDNHOI_OUTPUT_ROOT"

log = logging.getLogger("cdnhoi")


def _out(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _config(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig().validate()


def _load_data(data_dir):
    data_dir = Path(data_dir)
    dataset = load_annotations(data_dir / "annotations.jsonl")
    return load_images(data_dir, dataset), dataset


def cmd_generate_data(args):
    spec = SceneSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else SceneSpec()
    images, dataset, table = generate_dataset(spec, args.seed)
    out = _out(args.out)
    write_dataset(out, images, dataset, table)
    log.info("wrote %d images to %s", len(images), out)


def cmd_train(args):
    cfg = _config(args.config)
    images, dataset = _load_data(args.data)
    out = _out(args.out)
    ckpt = train(cfg, images, dataset, out)
    log.info("main phase done at epoch %d, loss %.5f -> %s", ckpt.epoch, ckpt.history[-1]["loss"],
             out / "checkpoint_main.pt")


def cmd_finetune(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = load_config(args.config) if args.config else ckpt.train_config()
    images, dataset = _load_data(args.data)
    out = _out(args.out)
    new = finetune_reweight(ckpt, cfg, images, dataset, out)
    log.info("decoupled phase done at epoch %d -> %s", new.epoch, out / "checkpoint_decouple.pt")


def _image_inputs(path):
    path = Path(path)
    if (path / "annotations.jsonl").exists():
        return _load_data(path)
    files = sorted(path.glob("*.png")) if path.is_dir() else [path]
    images = [np.asarray(Image.open(f).convert("RGB")) for f in files]
    recs = [ImageRecord(f.stem, im.shape[1], im.shape[0], [], f.name) for f, im in zip(files, images)]
    return images, HoiDataset(0, 0, recs)


def cmd_infer(args):
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = load_config(args.config) if args.config else ckpt.train_config()
    model = load_model(ckpt, cfg)
    images, dataset = _image_inputs(args.images)
    preds = predict(model, images, dataset, cfg)
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(out, preds, cfg.model.num_object_classes, cfg.model.num_action_classes)
    log.info("wrote %d triplets for %d images to %s", len(preds), len(images), out)


def cmd_eval(args):
    result = evaluate_files(args.preds, args.gt, args.classes)
    if args.report:
        out = _out(args.report)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report(out, result)
    sys.stdout.write(format_report(result))


def cmd_dump_attention(args):
    ckpt = Checkpoint.load(args.checkpoint)
    model = load_model(ckpt)
    images, dataset = _image_inputs(args.image)
    for img, rec in zip(images, dataset.images):
        for p in dump_attention(model, img, _out(args.out_dir), rec.image_id):
            log.info("wrote %s", p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdnhoi", description="Cascade HOI detector on synthetic scenes")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic HOI dataset")
    p.add_argument("--spec", help="JSON scene spec (defaults used when omitted)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="main training phase")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory from generate-data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-reweight", help="decoupled re-weighted fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to the config stored in the checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="write a predictions file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--images", required=True, help="dataset directory, image directory or single PNG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="mAP of a predictions file")
    p.add_argument("--preds", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-attention", help="co-attention maps of the top query")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PNG file, image directory or dataset directory")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericalError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except (ConfigError, AnnotationError, VocabularyError, FileNotFoundError, ValueError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
