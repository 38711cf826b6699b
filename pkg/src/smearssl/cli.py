"""Command-line entry point.

Every subcommand is a thin adapter: parse flags, merge them over the config
file, validate, call the module operation, write artifacts. Exit codes:
0 success, 1 validation error, 2 runtime error. Logs go to stderr; data goes
to files only.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import RunConfig, apply_overrides, load_config, write_resolved
from .data import (ManifestRecord, SmearImage, extract_cells, load_images,
                   load_manifest, patchify, save_manifest)
from .embeddings import embed, read_embeddings, write_embeddings
from .errors import SmearSslError, ValidationError
from .netpbm import read_pgm, read_ppm, write_ppm
from .pca import pca_map
from .probes import knn, linear_probe
from .protocols import (EvalReport, SplitRecord, format_report, kfold,
                        leave_one_source_out, write_report_csv)
from .synthetic import gen_synthetic, write_dataset
from .trainer import load_encoder, train

log = logging.getLogger("smearssl")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="config file (section.key = value lines)")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                   dest="overrides", help="override one config key (repeatable)")


def _build_config(args, flag_keys: dict[str, str]) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides)
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set_typed(key, value)
    return cfg


def _single_pair_report(name: str, train_tag: str, test_tag: str,
                        n_train: int, n_test: int,
                        metrics: dict[str, float]) -> EvalReport:
    report = EvalReport(protocol=name)
    report.records.append(SplitRecord(train_tag=train_tag, test_tag=test_tag,
                                      n_train=n_train, n_test=n_test,
                                      metrics=metrics))
    return report


def _emit_report(report: EvalReport, path: str | None) -> None:
    print(format_report(report), file=sys.stderr)
    if path:
        write_report_csv(path, report)
        log.info("report written to %s", path)


# --- command handlers -------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    cfg = _build_config(args, {"n_images": "synth.n_images",
                               "sources": "synth.sources",
                               "classes": "synth.classes",
                               "seed": "run.seed"})
    samples = gen_synthetic(cfg.synth_config())
    manifest = write_dataset(args.out, samples, with_masks=not args.no_masks)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    log.info("wrote %d images (+masks) and %s", len(samples), manifest)
    return 0


def cmd_patchify(args) -> int:
    cfg = _build_config(args, {"patch": "data.patch_size"})
    img = SmearImage(pixels=read_ppm(args.image), source_id=args.source_id,
                     image_id=os.path.splitext(os.path.basename(args.image))[0])
    patches = patchify(img, cfg.get("data.patch_size"))
    os.makedirs(args.out, exist_ok=True)
    records = []
    for i, patch in enumerate(patches):
        name = f"{img.image_id}_p{i:04d}.ppm"
        write_ppm(os.path.join(args.out, name), patch)
        records.append(ManifestRecord(path=name, kind="patch",
                                      source_id=args.source_id, label=args.label))
    save_manifest(os.path.join(args.out, "manifest.csv"), records)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    log.info("wrote %d patches to %s", len(patches), args.out)
    return 0


def cmd_extract_cells(args) -> int:
    cfg = _build_config(args, {"cell_size": "data.cell_size"})
    img = SmearImage(pixels=read_ppm(args.image), source_id=args.source_id,
                     image_id=os.path.splitext(os.path.basename(args.image))[0])
    mask = read_pgm(args.mask)
    crops, skipped = extract_cells(img, mask, cfg.get("data.cell_size"))
    os.makedirs(args.out, exist_ok=True)
    records = []
    for i, crop in enumerate(crops):
        name = f"{img.image_id}_c{i:04d}.ppm"
        write_ppm(os.path.join(args.out, name), crop)
        records.append(ManifestRecord(path=name, kind="cell",
                                      source_id=args.source_id, label=args.label))
    save_manifest(os.path.join(args.out, "manifest.csv"), records)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    log.info("wrote %d cell crops (%d skipped) to %s", len(crops), skipped, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _build_config(args, {"iterations": "train.iterations",
                               "batch_size": "train.batch_size",
                               "seed": "run.seed"})
    records = load_manifest(args.manifest)
    images = load_images(records)
    os.makedirs(args.out, exist_ok=True)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    state = train(images, cfg.vit_config(), cfg.ssl_config(), cfg.train_config(),
                  cfg.crop_spec(), args.out, resume=args.resume)
    log.info("finished at iteration %d; checkpoint in %s", state.iteration, args.out)
    return 0


def cmd_embed(args) -> int:
    cfg = _build_config(args, {"batch_size": "embed.batch_size"})
    records = load_manifest(args.manifest)
    emb = embed(args.checkpoint, records, batch_size=cfg.get("embed.batch_size"))
    write_embeddings(args.out, emb)
    write_resolved(cfg, args.out + ".config")
    log.info("wrote %d x %d embeddings to %s", len(emb), emb.dim, args.out)
    return 0


def cmd_eval_linear(args) -> int:
    cfg = _build_config(args, {"reg_lambda": "eval.reg_lambda",
                               "max_epochs": "eval.max_epochs",
                               "tol": "eval.tol"})
    tr = read_embeddings(args.train_emb)
    te = read_embeddings(args.test_emb)
    result = linear_probe(tr, te, reg_lambda=cfg.get("eval.reg_lambda"),
                          max_epochs=cfg.get("eval.max_epochs"),
                          tol=cfg.get("eval.tol"))
    report = _single_pair_report("linear", args.train_emb, args.test_emb,
                                 len(tr), len(te), result.metrics)
    _emit_report(report, args.report)
    return 0


def cmd_eval_knn(args) -> int:
    cfg = _build_config(args, {"k": "eval.k", "metric": "eval.metric"})
    tr = read_embeddings(args.train_emb)
    te = read_embeddings(args.test_emb)
    result = knn(tr, te, k=cfg.get("eval.k"), metric=cfg.get("eval.metric"))
    report = _single_pair_report("knn", args.train_emb, args.test_emb,
                                 len(tr), len(te), result.metrics)
    _emit_report(report, args.report)
    return 0


def cmd_eval_loso(args) -> int:
    cfg = _build_config(args, {"classifier": "eval.classifier", "k": "eval.k"})
    emb = read_embeddings(args.emb)
    report = leave_one_source_out(emb, cfg.classifier_spec())
    _emit_report(report, args.report)
    return 0


def cmd_eval_kfold(args) -> int:
    cfg = _build_config(args, {"classifier": "eval.classifier", "k": "eval.k",
                               "folds": "eval.folds", "seed": "run.seed"})
    emb = read_embeddings(args.emb)
    report = kfold(emb, cfg.classifier_spec(), k=cfg.get("eval.folds"),
                   seed=cfg.get("run.seed"))
    _emit_report(report, args.report)
    return 0


def cmd_pca_map(args) -> int:
    cfg = _build_config(args, {"components": "pca.components", "seed": "run.seed"})
    encoder = load_encoder(args.checkpoint)
    image = read_ppm(args.image)
    rgb, _, variances = pca_map(encoder, image,
                                n_components=cfg.get("pca.components"),
                                seed=cfg.get("run.seed"))
    write_ppm(args.out, rgb)
    write_resolved(cfg, args.out + ".config")
    log.info("explained variances: %s", np.array2string(variances, precision=4))
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smearssl", formatter_class=_formatter,
                     description="Self-supervised red-blood-cell representation "
                                 "pipeline: synthetic data, training, embedding, "
                                 "and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=_formatter)
        _add_config_flags(p)
        p.set_defaults(func=func)
        return p

    p = add("gen-synthetic", cmd_gen_synthetic,
            "render a deterministic synthetic smear dataset with manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-images", type=int, dest="n_images", help="number of images")
    p.add_argument("--sources", type=int, help="number of acquisition sources")
    p.add_argument("--classes", type=int, help="number of cell classes (<= 8)")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--no-masks", action="store_true", help="skip writing label masks")

    p = add("patchify", cmd_patchify, "tile one smear image into patches")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--patch", type=int, help="patch side length")
    p.add_argument("--source-id", default="src0", dest="source_id")
    p.add_argument("--label", default=None, help="optional class label")

    p = add("extract-cells", cmd_extract_cells,
            "crop one image into per-cell squares along a label mask")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--mask", required=True, help="PGM label mask")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cell-size", type=int, dest="cell_size", help="crop side length")
    p.add_argument("--source-id", default="src0", dest="source_id")
    p.add_argument("--label", default=None, help="optional class label")

    p = add("train", cmd_train, "run self-distillation training on a manifest")
    p.add_argument("--manifest", required=True, help="training manifest CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--iterations", type=int, help="optimization steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--resume", action="store_true",
                   help="continue from state.rdck in the output directory")

    p = add("embed", cmd_embed, "extract teacher-encoder embeddings")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint (.rdck)")
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="output embedding file (.emb1)")
    p.add_argument("--batch-size", type=int, dest="batch_size")

    p = add("eval-linear", cmd_eval_linear, "linear probe: train/test embedding pair")
    p.add_argument("--train-emb", required=True, dest="train_emb")
    p.add_argument("--test-emb", required=True, dest="test_emb")
    p.add_argument("--reg-lambda", type=float, dest="reg_lambda")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--tol", type=float)
    p.add_argument("--report", help="write per-split CSV here")

    p = add("eval-knn", cmd_eval_knn, "k-NN classifier: train/test embedding pair")
    p.add_argument("--train-emb", required=True, dest="train_emb")
    p.add_argument("--test-emb", required=True, dest="test_emb")
    p.add_argument("--k", type=int, help="neighbor count")
    p.add_argument("--metric", choices=["cosine", "euclidean"])
    p.add_argument("--report", help="write per-split CSV here")

    p = add("eval-loso", cmd_eval_loso, "leave-one-source-out over one embedding set")
    p.add_argument("--emb", required=True, help="embedding file (.emb1)")
    p.add_argument("--classifier", choices=["knn", "linear"])
    p.add_argument("--k", type=int, help="neighbor count for knn")
    p.add_argument("--report", help="write per-split CSV here")

    p = add("eval-kfold", cmd_eval_kfold, "stratified k-fold over one embedding set")
    p.add_argument("--emb", required=True, help="embedding file (.emb1)")
    p.add_argument("--classifier", choices=["knn", "linear"])
    p.add_argument("--k", type=int, help="neighbor count for knn")
    p.add_argument("--folds", type=int, help="fold count")
    p.add_argument("--seed", type=int, help="run seed")
    p.add_argument("--report", help="write per-split CSV here")

    p = add("pca-map", cmd_pca_map, "render patch-token principal components as RGB")
    p.add_argument("--checkpoint", required=True, help="encoder checkpoint (.rdck)")
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out", required=True, help="output PPM feature map")
    p.add_argument("--components", type=int, help="component count")
    p.add_argument("--seed", type=int, help="run seed")

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SmearSslError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
