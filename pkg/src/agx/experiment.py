"""Experiment drivers: train, evaluate, ablate, beta sweep."""

from __future__ import annotations

import json
import logging
from importlib import resources
from pathlib import Path

import numpy as np

from . import aga, pu, toynet, training
from .config import ExperimentConfig
from .locmetrics import EvalConfig, LocalizationReport, auprc, auroc, cam_to_boxes, match_and_score
from .synth import HELDOUT, SyntheticDataset, synth_generate

log = logging.getLogger(__name__)

VARIANTS = ("w/o AGA", "w/ AGA", "w/ AGA + PU")


def initial_params(config: ExperimentConfig, data: training.TrainData) -> toynet.ModelParams:
    tc = config.train
    return toynet.init_params(tc.seed, len(data.anat_tokens), len(data.obs_tokens),
                              tc.channels, tc.n_layers)


def train(config: ExperimentConfig, dataset: SyntheticDataset, params=None):
    """Returns (params, log). With ``config.pu.enabled`` the run is a PU self-training loop."""
    data = training.make_train_data(dataset)
    if params is None:
        params = initial_params(config, data)
    if config.pu.enabled:
        params, history = pu.self_train(params, data, config)
        return params, {"mode": "pu", "iterations": history}
    params, history = training.fit(params, data.train, config.train, val=data.val)
    return params, {"mode": "plain", "epochs": history}


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError:
        return None


def evaluate(params, dataset: SyntheticDataset, eval_config: EvalConfig, split: str = "test",
             heatmap_dir: str | Path | None = None) -> dict:
    """Classification and CAM-localization report for one split (inference: H = 0)."""
    data = training.make_train_data(dataset)
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"dataset has no {split!r} scenes")
    part = training.TrainSplit.from_matrices(
        [dataset.scene_ids[i] for i in idx], dataset.images[idx],
        [dataset.matrices[i] for i in idx], data.anat_tokens, data.obs_tokens)
    scores = training.predict_observations(params, part.images)
    truth = dataset.present[idx]

    classification = {}
    for k, obs in enumerate(data.obs_tokens):
        y = part.obs_labels[:, k]
        keep = y != -1
        classification[obs] = {
            "auprc": _safe(auprc, scores[keep, k], y[keep] == 1),
            "auroc": _safe(auroc, scores[keep, k], y[keep] == 1),
            "auprc_truth": _safe(auprc, scores[:, k], truth[:, k]),
            "auroc_truth": _safe(auroc, scores[:, k], truth[:, k]),
            "n_pos": int((y == 1).sum()), "n_neg": int((y == 0).sum()), "n_unlabeled": int((y == -1).sum()),
        }

    obs_cams = training.observation_cams(params, part.images)
    anat_cams = training.anatomy_cams(params, part.images)
    shape = part.images.shape[1:]
    obs_rep, anat_rep = LocalizationReport(), LocalizationReport()
    if heatmap_dir is not None:
        Path(heatmap_dir).mkdir(parents=True, exist_ok=True)
    for n, i in enumerate(idx):
        gt = dataset.gt_boxes(i)
        for rep, tokens, cams in ((obs_rep, data.obs_tokens, obs_cams),
                                  (anat_rep, data.anat_tokens, anat_cams)):
            for j, label in enumerate(tokens):
                if label not in gt:
                    continue
                boxes = cam_to_boxes(cams[n, :, :, j], eval_config, shape)
                for T in eval_config.iou_thresholds:
                    rep.add(label, T, match_and_score(boxes, gt[label], T))
                if heatmap_dir is not None:
                    aga.write_pgm(Path(heatmap_dir) / f"{dataset.scene_ids[i]}__{label}.pgm",
                                  cams[n, :, :, j])

    return {
        "split": split,
        "n_images": int(len(idx)),
        "classification": classification,
        "mean_auprc": _mean([c["auprc"] for c in classification.values()]),
        "localization": {"observation": obs_rep.summary(), "anatomy": anat_rep.summary()},
        "eval_config": {"quantile": eval_config.quantile, "connectivity": eval_config.connectivity,
                        "iou_thresholds": list(eval_config.iou_thresholds)},
    }


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def pooled_recall(report: dict, T: float, kind: str = "observation") -> float | None:
    """Recall over all labels of one kind, pooling box counts."""
    key = f"{float(T):g}"
    n_gt = covered = 0
    for per_t in report["localization"][kind].values():
        if key in per_t:
            n_gt += per_t[key]["n_gt"]
            covered += per_t[key]["gt_covered"]
    return covered / n_gt if n_gt else None


def pooled_precision(report: dict, T: float, kind: str = "observation") -> float | None:
    key = f"{float(T):g}"
    n_pred = tp = 0
    for per_t in report["localization"][kind].values():
        if key in per_t:
            n_pred += per_t[key]["n_pred"]
            tp += per_t[key]["true_positives"]
    return tp / n_pred if n_pred else None


def variant_config(config: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant == "w/o AGA":
        return config.replace(train={"aga_enabled": False}, pu={"enabled": False})
    if variant == "w/ AGA":
        return config.replace(train={"aga_enabled": True}, pu={"enabled": False})
    if variant == "w/ AGA + PU":
        return config.replace(train={"aga_enabled": True}, pu={"enabled": True})
    raise ValueError(f"unknown variant {variant!r}")


def eval_split(dataset: SyntheticDataset) -> str:
    """The held-out annotated set when the dataset has one, else the test split."""
    return HELDOUT if dataset.indices(HELDOUT).size else "test"


def run_seed(config: ExperimentConfig, seed: int, variants=VARIANTS, betas=None) -> dict:
    """All variants on one seed; they share the dataset and the initial weights."""
    dataset = synth_generate(config.synth, seed)
    seeded = config.replace(train={"seed": seed})
    data = training.make_train_data(dataset)
    init = initial_params(seeded, data)
    out = {"seed": seed, "planted": dataset.planted_stats(), "variants": {}}
    runs = [(v, variant_config(seeded, v)) for v in variants]
    for beta in betas or ():
        runs.append((f"beta={beta:g}", seeded.replace(train={"beta": beta, "aga_enabled": True},
                                                       pu={"enabled": False})))
    for name, cfg in runs:
        params, train_log = train(cfg, dataset, params=init.copy())
        report = evaluate(params, dataset, cfg.eval, split=eval_split(dataset))
        out["variants"][name] = {"report": report, "train_log": train_log}
        log.info("seed %d %s: recall@%.2g=%s", seed, name, cfg.eval.iou_thresholds[0],
                 pooled_recall(report, cfg.eval.iou_thresholds[0]))
    return out


def comparison_table(runs: list[dict], thresholds) -> list[dict]:
    """One row per (variant, IoU threshold): mean and std over seeds."""
    rows = []
    names = list(runs[0]["variants"])
    for name in names:
        for T in thresholds:
            rec = [pooled_recall(r["variants"][name]["report"], T) for r in runs]
            prec = [pooled_precision(r["variants"][name]["report"], T) for r in runs]
            arec = [pooled_recall(r["variants"][name]["report"], T, "anatomy") for r in runs]
            aup = [r["variants"][name]["report"]["mean_auprc"] for r in runs]
            rows.append({
                "variant": name, "iou": T,
                **_stat("recall", rec), **_stat("precision", prec),
                **_stat("anatomy_recall", arec), **_stat("auprc", aup),
                "per_seed_recall": rec,
            })
    return rows


def _stat(name, vals):
    v = np.array([x for x in vals if x is not None], dtype=float)
    return {f"{name}_mean": float(v.mean()) if v.size else None,
            f"{name}_std": float(v.std()) if v.size else None}


def format_table(rows: list[dict]) -> str:
    """Plain-text rendering of a comparison table, mean ± std per cell."""
    cols = ("recall", "precision", "anatomy_recall", "auprc")

    def cell(row, c):
        m, sd = row[f"{c}_mean"], row[f"{c}_std"]
        return "n/a" if m is None else f"{m:.3f} ± {sd:.3f}"

    lines = [f"{'variant':<14}{'IoU':>6}" + "".join(f"{c:>18}" for c in cols)]
    for row in rows:
        lines.append(f"{row['variant']:<14}{row['iou']:>6g}" + "".join(f"{cell(row, c):>18}" for c in cols))
    return "\n".join(lines)


def run_ablation(config: ExperimentConfig, variants=VARIANTS) -> dict:
    runs = [run_seed(config, s, variants) for s in config.seeds]
    return {"table": comparison_table(runs, config.eval.iou_thresholds), "runs": runs}


def run_beta_sweep(config: ExperimentConfig, betas) -> dict:
    runs = [run_seed(config, s, variants=(), betas=betas) for s in config.seeds]
    return {"table": comparison_table(runs, config.eval.iou_thresholds), "runs": runs}


def packaged_config(name: str = "reference") -> ExperimentConfig:
    """A bundled config from ``agx/configs``: "reference" or "pu_reference"."""
    text = (resources.files("agx") / "configs" / f"{name}.json").read_text()
    return ExperimentConfig.from_dict(json.loads(text))


def aga_direction(config: ExperimentConfig, T: float = 0.1) -> list[dict]:
    """Per seed: pooled observation recall at T with and without attention."""
    rows = []
    for seed in config.seeds:
        run = run_seed(config, seed, variants=("w/o AGA", "w/ AGA"))
        rec = {v: pooled_recall(run["variants"][v]["report"], T) for v in ("w/o AGA", "w/ AGA")}
        arec = {v: pooled_recall(run["variants"][v]["report"], T, "anatomy") for v in ("w/o AGA", "w/ AGA")}
        rows.append({"seed": seed, "recall_without": rec["w/o AGA"], "recall_with": rec["w/ AGA"],
                     "anatomy_recall_without": arec["w/o AGA"], "anatomy_recall_with": arec["w/ AGA"],
                     "aga_not_worse": rec["w/ AGA"] >= rec["w/o AGA"]})
    return rows


def pu_direction(config: ExperimentConfig) -> list[dict]:
    """Per seed: warm-start validation AUPRC against the PU retraining rounds.

    ``best_retrained`` excludes the warm start, so it can fall below it;
    ``returned`` is the checkpoint the loop hands back (best of all).
    """
    config = config.replace(pu={"enabled": True})
    rows = []
    for seed in config.seeds:
        dataset = synth_generate(config.synth, seed)
        seeded = config.replace(train={"seed": seed})
        _, log = train(seeded, dataset)
        hist = log["iterations"]
        warm = hist[0]["val_auprc"]
        retrained = [h["val_auprc"] for h in hist[1:]]
        last_alpha = [a for a in hist[-1]["alpha"] if a is not None] if len(hist) > 1 else []
        planted = dataset.planted_stats()
        rows.append({
            "seed": seed, "warm_start": warm, "retrained": retrained,
            "best_retrained": max(retrained) if retrained else None,
            "last_retrained": retrained[-1] if retrained else None,
            "returned": max([warm, *retrained]),
            "alpha_hat": hist[-1]["alpha"] if len(hist) > 1 else None,
            "alpha_hat_mean": float(np.mean(last_alpha)) if last_alpha else None,
            "alpha_val_planted": [p["alpha_val"] for p in planted.values()],
            "improved": bool(retrained) and max(retrained) >= warm,
        })
    return rows
