"""Command-line entry point: ``agx <command> [options]``.

Every command writes machine-readable JSON (or CSV matrices); errors exit
with status 1 and a single ``agx: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import aga, experiment, pu, toynet, training
from . import report_graph as rg
from .config import ExperimentConfig
from .locmetrics import EvalConfig, LocalizationReport, cam_to_boxes, match_and_score
from .synth import load_dataset, read_boxes, save_dataset, synth_generate

CHECKPOINT_NAME = "model.agxckpt"


def _write_json(path: str | Path | None, payload) -> None:
    text = json.dumps(payload, indent=1, sort_keys=True)
    if path is None or str(path) == "-":
        print(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(train={"seed": args.seed}, seeds=(args.seed,))
    return cfg


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return synth_generate(cfg.synth, cfg.train.seed)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def _load_model(path: str):
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    params = toynet.load_checkpoint(path)
    meta_path = _sidecar(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata {meta_path} not found")
    return params, json.loads(meta_path.read_text())


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    ds = synth_generate(cfg.synth, cfg.train.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.scene_ids)} scenes to {args.out}")


def cmd_train(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    if args.no_aga:
        cfg = cfg.replace(train={"aga_enabled": False})
    if args.pu:
        cfg = cfg.replace(pu={"enabled": True})
    params, log = experiment.train(cfg, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    toynet.save_checkpoint(out / CHECKPOINT_NAME, params)
    meta = {"config": cfg.to_dict(), "dataset_seed": ds.seed,
            "anatomy_labels": list(ds.region_tokens),
            "observation_labels": list(ds.observation_tokens)}
    _write_json(_sidecar(out / CHECKPOINT_NAME), meta)
    _write_json(out / "train_log.json", log)
    print(f"wrote checkpoint to {out / CHECKPOINT_NAME}")


def cmd_eval(args):
    cfg = _config(args)
    params, _ = _load_model(args.checkpoint)
    ds = _dataset(args, cfg)
    report = experiment.evaluate(params, ds, _eval_config(args, cfg), split=args.split,
                                 heatmap_dir=args.heatmaps)
    _write_json(args.out, report)


def _eval_config(args, cfg) -> EvalConfig:
    q = args.q if getattr(args, "q", None) is not None else cfg.eval.quantile
    iou = args.iou if getattr(args, "iou", None) else cfg.eval.iou_thresholds
    return EvalConfig(quantile=q, connectivity=cfg.eval.connectivity, iou_thresholds=iou)


def cmd_ablate(args):
    cfg = _config(args)
    if args.seeds:
        cfg = cfg.replace(seeds=tuple(int(s) for s in args.seeds.split(",")))
    result = experiment.run_ablation(cfg)
    payload = {"config": cfg.to_dict(), "table": result["table"]}
    betas = args.betas if args.betas else cfg.beta_sweep
    if betas:
        payload["beta_sweep"] = experiment.run_beta_sweep(cfg, betas)["table"]
    _write_json(args.out, payload)


def read_score_file(path) -> list[dict]:
    """Rows of (sample_id, split, label in {P, N, U}, score)."""
    with open(path, newline="") as fh:
        sample = fh.read(2048)
        fh.seek(0)
        dialect = csv.Sniffer().sniff(sample, delimiters=",\t;")
        rows = list(csv.DictReader(fh, dialect=dialect))
    need = {"sample_id", "split", "label", "score"}
    if not rows or not need <= set(rows[0]):
        raise ValueError(f"{path}: score file needs columns {sorted(need)}")
    for n, r in enumerate(rows, start=2):
        if r["label"] not in ("P", "N", "U"):
            raise ValueError(f"{path}:{n}: label must be P, N or U, got {r['label']!r}")
        r["score"] = float(r["score"])
    return rows


def cmd_pu_estimate(args):
    rows = read_score_file(args.scores)
    # positives come from validation when present, as in the self-training loop
    splits = {r["split"] for r in rows}
    pos_split = "val" if "val" in splits else None
    z_p = [r["score"] for r in rows if r["label"] == "P" and pos_split in (None, r["split"])]
    z_u = [r["score"] for r in rows if r["label"] == "U"]
    z_n = [r["score"] for r in rows if r["label"] == "N"]
    est = pu.bbe_estimate(pu.ScoreSets(np.array(z_p), np.array(z_u), np.array(z_n)),
                          delta=args.delta, gamma=args.gamma)
    removed, provisional = pu.rank_and_relabel(
        [(r["sample_id"], r["score"]) for r in rows if r["label"] == "U"], est.alpha)
    _write_json(args.out, {**est.to_dict(), "positive_split": pos_split or "all",
                           "n_removed": len(removed), "removed": sorted(removed)})


def _image_ids(data: Path, n: int) -> list[str]:
    if (data / "dataset.json").exists():
        return json.loads((data / "dataset.json").read_text())["scene_ids"]
    if (data / "ids.txt").exists():
        return (data / "ids.txt").read_text().split()
    return [str(i) for i in range(n)]


def cmd_localize(args):
    params, meta = _load_model(args.checkpoint)
    data = Path(args.data)
    images = np.load(data / "images.npy")
    ids = _image_ids(data, len(images))
    if len(ids) != len(images):
        raise ValueError(f"{data}: {len(ids)} ids for {len(images)} images")
    gt = read_boxes(data / "boxes.csv")
    cfg = EvalConfig(quantile=args.q, iou_thresholds=args.iou)
    keep = [i for i, sid in enumerate(ids) if sid in gt]
    obs_cams = training.observation_cams(params, images[keep])
    anat_cams = training.anatomy_cams(params, images[keep])
    reports = {"observation": LocalizationReport(), "anatomy": LocalizationReport()}
    labels = {"observation": meta["observation_labels"], "anatomy": meta["anatomy_labels"]}
    cams = {"observation": obs_cams, "anatomy": anat_cams}
    if args.heatmaps:
        Path(args.heatmaps).mkdir(parents=True, exist_ok=True)
    for n, i in enumerate(keep):
        boxes = gt[ids[i]]
        for kind in reports:
            for j, label in enumerate(labels[kind]):
                if label not in boxes:
                    continue
                cam = cams[kind][n, :, :, j]
                pred = cam_to_boxes(cam, cfg, images.shape[1:])
                for T in cfg.iou_thresholds:
                    reports[kind].add(label, T, match_and_score(pred, boxes[label], T))
                if args.heatmaps:
                    aga.write_pgm(Path(args.heatmaps) / f"{ids[i]}__{label}.pgm", cam)
    _write_json(args.out, {
        "n_images": len(keep), "quantile": cfg.quantile, "iou_thresholds": list(cfg.iou_thresholds),
        "localization": {kind: rep.summary() for kind, rep in reports.items()},
    })


def _annotation_files(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.json"))
    return [path]


def cmd_parse(args):
    if bool(args.vocab_anat) != bool(args.vocab_obs):
        raise ValueError("--vocab-anat and --vocab-obs must be given together")
    vocab = rg.Vocabulary.from_files(args.vocab_anat, args.vocab_obs) \
        if args.vocab_anat else rg.Vocabulary.default()
    files = _annotation_files(Path(args.annotations))
    if not files:
        raise FileNotFoundError(f"no annotation documents under {args.annotations}")
    out = Path(args.out)
    (out / "matrices").mkdir(parents=True, exist_ok=True)
    labels = {}
    for f in files:
        try:
            doc = rg.parse_annotations(f.read_bytes())
        except rg.AnnotationError as exc:
            raise rg.AnnotationError(f"{f}: {exc}") from None
        A = rg.build_adjacency(doc, vocab)
        (out / "matrices" / f"{doc.doc_id}.csv").write_text(rg.export_matrix(A))
        w = rg.derive_labels(A)
        labels[doc.doc_id] = {"observations": w.obs_labels, "anatomies": w.anat_labels}
    _write_json(out / "labels.json", labels)
    print(f"parsed {len(files)} documents into {out / 'matrices'}")


def cmd_stats(args):
    files = sorted(Path(args.matrices).glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"no matrix files under {args.matrices}")
    matrices = [rg.import_matrix(f.read_text()) for f in files]
    _write_json(args.out, rg.corpus_stats(matrices, args.top_k).to_dict())


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections train/eval/pu/synth)")
    common.add_argument("--seed", type=int, help="overrides the training seed and the seed list")
    common.add_argument("--out", help="output file or directory ('-' or omitted prints JSON)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="agx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset directory")
    s.set_defaults(func=cmd_synth, needs_out=True)

    s = sub.add_parser("train", parents=[common], help="train and write a checkpoint directory")
    s.add_argument("--data", help="dataset directory from `agx synth` (default: generate)")
    s.add_argument("--no-aga", action="store_true", help="disable the attention path")
    s.add_argument("--pu", action="store_true", help="wrap training in PU self-training")
    s.set_defaults(func=cmd_train, needs_out=True)

    s = sub.add_parser("eval", parents=[common], help="classification + localization report")
    s.add_argument("--checkpoint", required=True, help="checkpoint file or `agx train` directory")
    s.add_argument("--data", help="dataset directory (default: generate from config and seed)")
    s.add_argument("--split", default="test")
    s.add_argument("--q", type=float)
    s.add_argument("--iou", type=_floats)
    s.add_argument("--heatmaps", help="directory for PGM heatmaps")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="w/o AGA, w/ AGA, w/ AGA + PU over seeds")
    s.add_argument("--seeds", help="comma-separated seeds (default: from config)")
    s.add_argument("--betas", type=_floats, help="also run a beta sweep, e.g. 0,0.05,0.1")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("pu-estimate", parents=[common], help="BBE mixture proportion from a score file")
    s.add_argument("--scores", required=True)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--gamma", type=float, default=0.01)
    s.set_defaults(func=cmd_pu_estimate)

    s = sub.add_parser("localize", parents=[common], help="CAM boxes scored against a GT box file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="directory with images.npy and boxes.csv")
    s.add_argument("--q", type=float, default=0.95)
    s.add_argument("--iou", type=_floats, default=(0.1, 0.25, 0.5))
    s.add_argument("--heatmaps")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("parse", parents=[common], help="annotation documents -> matrices + labels")
    s.add_argument("--annotations", required=True, help="JSON document or directory of them")
    s.add_argument("--vocab-anat")
    s.add_argument("--vocab-obs")
    s.set_defaults(func=cmd_parse, needs_out=True)

    s = sub.add_parser("stats", parents=[common], help="P/N/U fractions and top anatomies")
    s.add_argument("--matrices", required=True)
    s.add_argument("--top-k", type=int, default=3)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "needs_out", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"agx: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
