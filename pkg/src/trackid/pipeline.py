"""One function per pipeline stage; each reads and writes artifacts under a RunConfig."""
from __future__ import annotations

import csv
import logging
import os
import time

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Store, generate_dataset, generate_digit_set, generate_frame_set, load_dataset, save_dataset
from .errors import ConfigError, PrerequisiteError
from .evaluate import (compare_report, confusable_mask, evaluate_scores, export_trace,
                       ramp_profile, score_store, write_comparison)
from .fusion import RULES, fuse_mean, fusion_probs
from .training import (STAGES, MetricsLog, finetune_frames, fusion_training_set, load_network,
                       pretrain_digits, train_end_to_end, train_fusion)

log = logging.getLogger(__name__)

DATASETS = ("train", "test", "digits", "frames", "stress", "ramp")
CHECKPOINTS = {"pretrain": "pretrain.tidc", "finetune": "finetune.tidc",
               "train": "sequence.tidc", "train-fusion": "fusion.tidc"}
METHOD_FRAME = "resnet10-frame-only"
METHOD_SEQ = "resnet-lstm-mean"
METHOD_CNN = "resnet-lstm-1dcnn"


def _ensure(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def dataset_file(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.data_path, name)


def checkpoint_file(cfg: RunConfig, stage: str) -> str:
    return os.path.join(cfg.checkpoint_path, CHECKPOINTS[stage])


def report_file(cfg: RunConfig, name: str) -> str:
    return os.path.join(_ensure(cfg.report_path), name)


def need_dataset(cfg: RunConfig, name: str) -> Store:
    path = dataset_file(cfg, name)
    if not os.path.exists(path + ".manifest"):
        raise PrerequisiteError(f"dataset {path} missing; run 'generate' first", stage="generate")
    return load_dataset(path)


def need_checkpoint(cfg: RunConfig, stage: str) -> Checkpoint:
    path = checkpoint_file(cfg, stage)
    if not os.path.exists(path):
        raise PrerequisiteError(f"checkpoint {path} missing; run '{stage}' first", stage=stage)
    return load_checkpoint(path)


def _save_stage(cfg: RunConfig, stage: str, ckpt: Checkpoint, metrics: MetricsLog):
    ckpt.config.update(cfg.echo())
    save_checkpoint(ckpt, os.path.join(_ensure(cfg.checkpoint_path), CHECKPOINTS[stage]))
    merge_metrics(report_file(cfg, "metrics.csv"), metrics)


def merge_metrics(path: str, metrics: MetricsLog):
    """Replace this stage's rows in the shared log, keeping pipeline order."""
    stages = {r[1] for r in metrics.rows}
    kept = []
    if os.path.exists(path):
        with open(path, newline="") as fh:
            kept = [r for r in list(csv.reader(fh))[1:] if r and r[1] not in stages]
    tmp = path + ".part"
    metrics.write(tmp)
    with open(tmp, newline="") as fh:
        new = list(csv.reader(fh))
    rows = kept + new[1:]
    rows.sort(key=lambda r: STAGES.index(r[1]) if r[1] in STAGES else len(STAGES))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(new[0])
        w.writerows(rows)
    os.remove(tmp)


def _held_out(cfg: RunConfig, offset: int, per_class: int, **kw) -> Store:
    spec = cfg.dataset_spec(seed=cfg.seed + offset, tracklets_per_class=per_class, **kw)
    ds = generate_dataset(spec, cfg.threads)
    records = sorted(ds.train.records + ds.test.records, key=lambda r: r.id)
    return Store(records, ds.train.classes)


def run_generate(cfg: RunConfig) -> dict[str, Store]:
    """Tracklet train/test split, digit and frame sets, and two held-out probe sets."""
    spec = cfg.dataset_spec()
    ds = generate_dataset(spec, cfg.threads)
    stores = {"train": ds.train, "test": ds.test,
              "digits": generate_digit_set(spec), "frames": generate_frame_set(spec),
              "stress": _held_out(cfg, 1000, cfg.stress_tracklets_per_class),
              "ramp": _held_out(cfg, 2000, cfg.ramp_tracklets_per_class,
                                occlude_first=cfg.ramp_occluded)}
    _ensure(cfg.data_path)
    for name, store in stores.items():
        save_dataset(store, dataset_file(cfg, name))
    return stores


def run_pretrain(cfg: RunConfig):
    digits = need_dataset(cfg, "digits")
    ckpt, metrics = pretrain_digits(digits, cfg.model_config(), cfg.stage_plan())
    _save_stage(cfg, "pretrain", ckpt, metrics)
    return ckpt, metrics


def run_finetune(cfg: RunConfig):
    pretrained = need_checkpoint(cfg, "pretrain")
    frames = need_dataset(cfg, "frames")
    ckpt, metrics = finetune_frames(frames, pretrained, cfg.model_config(), cfg.stage_plan())
    _save_stage(cfg, "finetune", ckpt, metrics)
    return ckpt, metrics


def run_train(cfg: RunConfig):
    finetuned = need_checkpoint(cfg, "finetune")
    train = need_dataset(cfg, "train")
    ckpt, metrics = train_end_to_end(train, finetuned, cfg.model_config(), cfg.stage_plan())
    _save_stage(cfg, "train", ckpt, metrics)
    return ckpt, metrics


def run_train_fusion(cfg: RunConfig):
    seq = load_network(need_checkpoint(cfg, "train"), cfg.model_config())
    train = need_dataset(cfg, "train")
    X, y = fusion_training_set(seq, train)
    ckpt, metrics, _ = train_fusion(X, y, cfg.model_config().num_classes, cfg.stage_plan())
    _save_stage(cfg, "train-fusion", ckpt, metrics)
    return ckpt, metrics


def load_models(cfg: RunConfig, stages=("finetune", "train", "train-fusion")) -> dict:
    model_cfg = cfg.model_config()
    return {s: load_network(need_checkpoint(cfg, s), model_cfg) for s in stages}


def _write_summary(path: str, rows: list[tuple[str, object]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, f"{v:.6f}" if isinstance(v, float) else v])


def run_eval(cfg: RunConfig) -> dict:
    """Comparison of the three methods, every fusion rule, confusion matrices,
    the confusable-score stress check and the confidence ramp."""
    from . import plots

    t0 = time.perf_counter()
    nets = load_models(cfg)
    frame_net, seq_net, fusion_net = nets["finetune"], nets["train"], nets["train-fusion"]
    test = need_dataset(cfg, "test")
    stress = need_dataset(cfg, "stress")
    ramp = need_dataset(cfg, "ramp")
    if len(test.classes) != cfg.model_config().num_classes:
        raise ConfigError("dataset class scheme does not match the configured model")
    timings = [("load", time.perf_counter() - t0)]

    t = time.perf_counter()
    s_frame = score_store(frame_net, test)
    s_seq = score_store(seq_net, test)
    n_frames = sum(len(s) for s in s_seq)
    timings.append(("score-test", time.perf_counter() - t))

    res = {
        METHOD_FRAME: evaluate_scores(s_frame, test, "mean", test_set="test", name=METHOD_FRAME),
        METHOD_SEQ: evaluate_scores(s_seq, test, "mean", test_set="test", name=METHOD_SEQ),
        METHOD_CNN: evaluate_scores(s_seq, test, "cnn", fusion_net=fusion_net, test_set="test",
                                    name=METHOD_CNN),
    }
    rows = compare_report(list(res.values()))
    write_comparison(rows, report_file(cfg, "comparison.csv"), report_file(cfg, "comparison.txt"))
    plots.plot_comparison(rows, report_file(cfg, "comparison.png"))

    rule_results = [evaluate_scores(s_seq, test, r, cfg.topn, test_set="test", name=f"resnet-lstm-{r}")
                    for r in RULES]
    rule_results.append(res[METHOD_CNN])
    rule_rows = compare_report(rule_results)
    write_comparison(rule_rows, report_file(cfg, "fusion_rules.csv"), report_file(cfg, "fusion_rules.txt"))

    for name, r in res.items():
        r.tracklet_cm.write_csv(report_file(cfg, f"confusion_{name}_tracklet.csv"))
        plots.plot_confusion(r.tracklet_cm, report_file(cfg, f"confusion_{name}_tracklet.png"), name)
    for name in (METHOD_FRAME, METHOD_SEQ):
        cm = res[name].frame_cm
        cm.write_csv(report_file(cfg, f"confusion_{name}_frame.csv"))
        plots.plot_confusion(cm, report_file(cfg, f"confusion_{name}_frame.png"), f"{name} per frame")

    t = time.perf_counter()
    s_stress = score_store(seq_net, stress)
    F = np.stack([fuse_mean(s).scores for s in s_stress])
    y = stress.labels()
    mask = confusable_mask(F)
    mean_pred = F.argmax(axis=1)
    cnn_pred = fusion_probs(fusion_net, F).argmax(axis=1)
    stress_rows = [
        ("held_out_n", len(y)),
        ("held_out_mean_accuracy", float(np.mean(mean_pred == y))),
        ("held_out_cnn_accuracy", float(np.mean(cnn_pred == y))),
        ("confusable_n", int(mask.sum())),
        ("confusable_mean_accuracy", float(np.mean(mean_pred[mask] == y[mask])) if mask.any() else 0.0),
        ("confusable_cnn_accuracy", float(np.mean(cnn_pred[mask] == y[mask])) if mask.any() else 0.0),
    ]
    _write_summary(report_file(cfg, "stress.csv"), stress_rows)

    profile = ramp_profile(score_store(seq_net, ramp), cfg.window)
    with open(report_file(cfg, "ramp.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "mean_confidence"])
        for i, v in enumerate(profile):
            w.writerow([i, f"{v:.6f}"])
    plots.plot_ramp(profile, report_file(cfg, "ramp.png"))
    timings.append(("stress-and-ramp", time.perf_counter() - t))

    summary = [(f"{n}_tracklet_accuracy", r.tracklet_accuracy) for n, r in res.items()]
    summary += [(f"{n}_frame_accuracy", r.frame_accuracy) for n, r in res.items()]
    summary += stress_rows
    summary += [("ramp_early", float(profile[:4].mean())), ("ramp_late", float(profile[-4:].mean()))]
    _write_summary(report_file(cfg, "summary.csv"), summary)

    timings.append(("total", time.perf_counter() - t0))
    with open(report_file(cfg, "timing.log"), "w") as fh:
        for k, v in timings:
            fh.write(f"{k} {v:.3f}s\n")
        fh.write(f"frames_per_second {n_frames / max(timings[1][1], 1e-9):.1f}\n")
    return {"results": res, "comparison": rows, "rules": rule_rows,
            "summary": dict(summary), "ramp": profile}


def find_tracklet(cfg: RunConfig, tracklet_id: int, blob: str | None = None):
    if blob:
        store = load_dataset(blob)
        if tracklet_id is None:
            if len(store) != 1:
                raise ConfigError(f"{blob} holds {len(store)} tracklets; pass --tracklet")
            return store.records[0], store
    else:
        store = None
        for name in ("test", "train"):
            s = need_dataset(cfg, name)
            if any(r.id == tracklet_id for r in s.records):
                store = s
                break
        if store is None:
            raise ConfigError(f"tracklet {tracklet_id} not in the train or test split")
    for r in store.records:
        if r.id == tracklet_id:
            return r, store
    raise ConfigError(f"tracklet {tracklet_id} not found")


def run_predict(cfg: RunConfig, tracklet_id: int | None, blob: str | None = None) -> tuple[int, float]:
    """Raw label and fused confidence for one tracklet."""
    from .fusion import predict_tracklet

    record, store = find_tracklet(cfg, tracklet_id, blob)
    stages = ("train", "train-fusion") if cfg.classifier == "cnn" else ("train",)
    nets = load_models(cfg, stages)
    k, conf = predict_tracklet(nets["train"], record.frames, nets.get("train-fusion"),
                               cfg.fusion_rule, cfg.topn)
    return store.scheme.raw(k), conf


def run_trace(cfg: RunConfig, tracklet_id: int | None, blob: str | None = None) -> dict:
    from . import plots

    if tracklet_id is None and blob is None:
        tracklet_id = need_dataset(cfg, "test").records[0].id
    record, store = find_tracklet(cfg, tracklet_id, blob)
    nets = load_models(cfg, ("finetune", "train"))
    out = {}
    for stage, tag in (("train", "sequence"), ("finetune", "frame-only")):
        stem = report_file(cfg, f"trace_{record.id}_{tag}")
        recs = export_trace(nets[stage], record.frames, store.scheme, stem)
        plots.plot_trace(recs, record.label, f"{stem}.png", f"tracklet {record.id} ({tag})")
        out[tag] = recs
    return out
