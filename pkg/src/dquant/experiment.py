"""Experiment workflows behind the command line.

Each mode writes into ``run.out``:

* ``summary.json`` (``schema: 1``) with the mode's headline numbers
* ``config.ini``, the effective config with every default filled in
* mode-specific CSV tables, checkpoints and metric logs

CSV headers are fixed:

=========  =================================================================
capacity   ``K,M,cost,capacity_nats,capacity_bits``
posthoc    ``axis,K,M,slice_dim,l2_per_element,mean_entropy_nats``
analyze    ``level,book_i,book_j,mi_nats`` and ``zeroed_level,mse``
ablate     runs: ``variant,K,M,seed,reconstruction,mse,bits_per_dim,mean_entropy,mean_mi``;
           summary adds ``_mean`` and ``_median`` columns per metric
synth      ``channel_redundancy,mean_abs_corr``
=========  =================================================================
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .dqae import DQAE, DqaeConfig, evaluate, load_checkpoint, save_checkpoint, train
from .formats import import_tensors, save_tensor
from .info import InfoReport, mean_off_diagonal, pairwise_mi_matrix, posthoc_density_estimate
from .quantizer import capacity
from .synthetic import SyntheticSpec, cross_channel_correlation, generate_synthetic, synthetic_images

__all__ = ["RunResult", "run_experiment", "feature_stream", "image_sets", "dqae_config"]

SCHEMA = 1


@dataclass
class RunResult:
    out: Path
    summary: dict


# -- data -------------------------------------------------------------------
def feature_stream(cfg: ExperimentConfig) -> list[np.ndarray]:
    d = cfg.data
    if d.source == "files":
        return import_tensors(d.files)
    spec = SyntheticSpec(shape=d.shape, channel_redundancy=d.channel_redundancy,
                         correlation_length=d.correlation_length, noise_scale=d.noise_scale,
                         count=d.count, scale_spread=d.scale_spread)
    return generate_synthetic(spec, cfg.run.seed)


def image_sets(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train, test) uint8 image arrays of shape ``(N, C, S, S)``."""
    d = cfg.data
    if d.source == "files":
        arr = np.stack(import_tensors(d.files))
        if arr.ndim != 4:
            raise ValueError(f"image tensors must be (C, H, W), got {arr.shape[1:]}")
        imgs = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
        n_test = min(d.test_images, len(imgs) // 2)
        return imgs[n_test:], imgs[:n_test]
    # test images use a fixed offset seed so they never overlap the train stream
    tr = synthetic_images(d.train_images, d.image_size, d.image_channels, seed=cfg.run.seed,
                          detail=d.image_detail)
    te = synthetic_images(d.test_images, d.image_size, d.image_channels, seed=cfg.run.seed + 10_000,
                          detail=d.image_detail)
    return tr, te


def dqae_config(cfg: ExperimentConfig, images=None, **override) -> DqaeConfig:
    m, q, d = cfg.model, cfg.quantizer, cfg.data
    K = list(q.K) if len(q.K) == m.num_levels else [q.K[0]] * m.num_levels
    C, S = d.image_channels, d.image_size
    if images is not None:
        C, S = images.shape[1], images.shape[2]
    kw = dict(num_levels=m.num_levels, K=K, M=q.M, D=q.D, beta=m.beta, gamma=q.gamma,
              epsilon=q.epsilon, loss=m.loss, in_channels=C, image_size=S, width=m.width,
              res_blocks=m.res_blocks, lr=m.lr, weight_decay=m.weight_decay, batch_size=m.batch_size,
              use_ema=m.use_ema, shared_codebook=m.shared_codebook, dead_every=q.dead_every,
              dead_fraction=q.dead_fraction, top_to_decoder=m.top_to_decoder, kl_weight=m.kl_weight,
              dtype=m.dtype, seed=cfg.run.seed)
    kw.update(override)
    return DqaeConfig(**kw)


# -- output helpers ---------------------------------------------------------
def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.generic):
        return _clean(v.item())
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _code_mi(codes, K) -> float | None:
    flat = codes.reshape(-1, codes.shape[-1])
    if flat.shape[1] < 2:
        return None
    return mean_off_diagonal(pairwise_mi_matrix(list(flat.T), K))


# -- modes ------------------------------------------------------------------
def _capacity(cfg, out):
    rows = [capacity(K, cfg.quantizer.M) for K in cfg.quantizer.K]
    _write_csv(out / "capacity.csv", ["K", "M", "cost", "capacity_nats", "capacity_bits"],
               [(r.K, r.M, r.cost, r.capacity_nats, r.capacity_bits) for r in rows])
    return {"rows": [{"K": r.K, "M": r.M, "cost": r.cost, "capacity_nats": r.capacity_nats,
                      "capacity_bits": r.capacity_bits, "kl_constant": r.kl_constant} for r in rows]}


def _posthoc(cfg, out):
    q = cfg.quantizer
    tensors = feature_stream(cfg)
    C = tensors[0].shape[0]
    rows = []
    for axis_name in q.axes:
        if axis_name == "channel":
            data, axis = tensors, 0
        else:
            data, axis = [t.reshape(C, -1) for t in tensors], 1
        extent = data[0].shape[axis]
        for K in dict.fromkeys(q.K):
            l2, ent = posthoc_density_estimate(
                data, axis, q.M, K, q.epochs, batch_size=q.batch_size, rng=cfg.run.seed,
                gamma=q.gamma, epsilon=q.epsilon, dead_every=q.dead_every, dead_fraction=q.dead_fraction)
            rows.append((axis_name, K, q.M, -(-extent // q.M), l2, ent))
    _write_csv(out / "posthoc.csv", ["axis", "K", "M", "slice_dim", "l2_per_element", "mean_entropy_nats"], rows)
    return {"tensor_shape": list(tensors[0].shape), "count": len(tensors),
            "rows": [dict(zip(["axis", "K", "M", "slice_dim", "l2_per_element", "mean_entropy_nats"], r))
                     for r in rows]}


def _train(cfg, out):
    tr, te = image_sets(cfg)
    model = DQAE(dqae_config(cfg, tr))
    (out / "metrics.jsonl").unlink(missing_ok=True)
    hist = train(model, tr, cfg.model.steps, metrics_path=out / "metrics.jsonl")
    save_checkpoint(model, out / "checkpoint")
    ev = evaluate(model, te)
    return {"steps": model.step, "final_train_loss": hist[-1].total if hist else None,
            "test_reconstruction": ev.reconstruction, "test_mse": ev.mse,
            "test_bits_per_dim": ev.bits_per_dim, "test_level_entropy": ev.level_entropy,
            "checkpoint": "checkpoint"}


def _analyze(cfg, out):
    tr, te = image_sets(cfg)
    if cfg.analyze.checkpoint:
        model = load_checkpoint(cfg.analyze.checkpoint)
    else:
        model = DQAE(dqae_config(cfg, tr))
        (out / "metrics.jsonl").unlink(missing_ok=True)
        train(model, tr, cfg.model.steps, metrics_path=out / "metrics.jsonl")
        save_checkpoint(model, out / "checkpoint")
    imgs = te if cfg.analyze.split == "test" else tr
    ev = evaluate(model, imgs)
    levels, mi_rows = [], []
    for l, codes in enumerate(ev.codes):
        K = model.quantizers[l].K
        rep = InfoReport.from_codes(codes, K, split=cfg.analyze.split)
        rep.extra = {"level": l, "K": K, "samples": int(codes.shape[0])}
        rep.write_json(out / f"info_level{l}.json")
        M = rep.mi_matrix.shape[0]
        mi_rows += [(l, i, j, float(rep.mi_matrix[i, j])) for i in range(M) for j in range(i, M)]
        levels.append({"level": l, "K": K, "mean_entropy": rep.mean_entropy,
                       "entropy_fraction_of_max": rep.mean_entropy / math.log(K),
                       "mean_offdiag_mi": rep.mean_mi})
    _write_csv(out / "mi.csv", ["level", "book_i", "book_j", "mi_nats"], mi_rows)
    hier = [("none", ev.mse)]
    for l in range(model.config.num_levels):
        hier.append((str(l), evaluate(model, imgs, zero_levels=(l,)).mse))
    _write_csv(out / "hierarchy.csv", ["zeroed_level", "mse"], hier)
    return {"split": cfg.analyze.split, "levels": levels, "mse": ev.mse,
            "bits_per_dim": ev.bits_per_dim, "zeroed_mse": {z: m for z, m in hier[1:]}}


def ablation_point(cfg: ExperimentConfig, variant: str, K: int, M: int, seed: int, out: Path | None = None) -> dict:
    """Train and evaluate one sweep point; returns its result row."""
    pcfg = cfg.with_overrides(run={"seed": seed})
    tr, te = image_sets(pcfg)
    model = DQAE(dqae_config(pcfg, tr, K=[K] * cfg.model.num_levels, M=M,
                             shared_codebook=(variant == "vq")))
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = out / "metrics.jsonl"
        metrics.unlink(missing_ok=True)
    train(model, tr, cfg.model.steps, metrics_path=metrics)
    ev = evaluate(model, te)
    mis = [v for v in (_code_mi(c, model.quantizers[l].K) for l, c in enumerate(ev.codes)) if v is not None]
    return {"variant": variant, "K": K, "M": M, "seed": seed, "reconstruction": ev.reconstruction,
            "mse": ev.mse, "bits_per_dim": ev.bits_per_dim,
            "mean_entropy": float(np.mean(ev.level_entropy)),
            "mean_mi": float(np.mean(mis)) if mis else None}


def _point_job(args):
    return ablation_point(*args)


_METRICS = ("reconstruction", "mse", "bits_per_dim", "mean_entropy", "mean_mi")


def _ablate(cfg, out):
    ab = cfg.ablate
    points = [(v, K, M, cfg.run.seed + s) for v in ab.variants for K in ab.K for M in ab.M
              for s in range(ab.seeds)]
    jobs = [(cfg, v, K, M, s, out / "runs" / f"{v}_K{K}_M{M}_seed{s}") for v, K, M, s in points]
    if ab.jobs > 1:
        with ProcessPoolExecutor(ab.jobs) as pool:
            rows = list(pool.map(_point_job, jobs))
    else:
        rows = [_point_job(j) for j in jobs]
    _write_csv(out / "ablation_runs.csv", ["variant", "K", "M", "seed", *_METRICS],
               [[r[k] if r[k] is not None else "" for k in ("variant", "K", "M", "seed", *_METRICS)]
                for r in rows])
    summary = []
    for v in ab.variants:
        for K in ab.K:
            for M in ab.M:
                grp = [r for r in rows if (r["variant"], r["K"], r["M"]) == (v, K, M)]
                entry = {"variant": v, "K": K, "M": M, "runs": len(grp)}
                for key in _METRICS:
                    vals = [r[key] for r in grp if r[key] is not None]
                    entry[key + "_mean"] = float(np.mean(vals)) if vals else None
                    entry[key + "_median"] = float(np.median(vals)) if vals else None
                summary.append(entry)
    cols = ["variant", "K", "M", "runs"] + [k + s for k in _METRICS for s in ("_mean", "_median")]
    _write_csv(out / "ablation.csv", cols, [[e[c] if e[c] is not None else "" for c in cols] for e in summary])
    return {"points": summary}


def _synth(cfg, out):
    tensors = feature_stream(cfg)
    tdir = out / "tensors"
    tdir.mkdir(exist_ok=True)
    for i, t in enumerate(tensors):
        save_tensor(tdir / f"tensor_{i:05d}.dqt", t)
    corr = cross_channel_correlation(tensors)
    off = np.abs(corr[~np.eye(len(corr), dtype=bool)])
    mac = float(np.nanmean(off))
    _write_csv(out / "synth.csv", ["channel_redundancy", "mean_abs_corr"], [(cfg.data.channel_redundancy, mac)])
    return {"count": len(tensors), "shape": list(tensors[0].shape), "mean_abs_cross_channel_corr": mac,
            "tensors": "tensors"}


_MODES = {"capacity": _capacity, "posthoc": _posthoc, "train": _train, "analyze": _analyze,
          "ablate": _ablate, "synth": _synth}


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run ``cfg.run.mode`` and write its reports to ``cfg.run.out``."""
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    t0 = time.time()
    results = _MODES[cfg.run.mode](cfg, out)
    summary = {"schema": SCHEMA, "mode": cfg.run.mode, "seed": cfg.run.seed,
               "config": cfg.to_dict(), "results": results}
    # the output path is where the report lives, not part of what was run
    del summary["config"]["run"]["out"]
    if not cfg.run.reproducible:
        summary["created"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        summary["runtime_s"] = round(time.time() - t0, 3)
    _write_json(out / "summary.json", summary)
    return RunResult(out, summary)
