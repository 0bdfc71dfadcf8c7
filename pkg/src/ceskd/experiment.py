"""Run-directory orchestration behind the command-line interface.

A run directory holds::

    config.ini            verbatim copy of the config file
    resolved.ini          fully resolved config (defaults + CLI overrides)
    curriculum.tsv        ranked curriculum            (score)
    reference.ckpt        scorer checkpoint            (score)
    <method>/seed_<s>/    checkpoints, run logs, metrics, summary (distill)
    hypothesis.*          grid report                  (hypothesis)
    ablation.*            selection ablation report    (ablate)
    report.*, series.tsv  aggregated rows              (report)
"""
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import report
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, serialize_config
from .curriculum import (bucketize, rank, read_curriculum, score_dataset, write_curriculum)
from .data import (compute_stats, gen_synthetic, load_cifar10_bin, load_idx, normalize)
from .engine import (DistillationPath, cmd_ablate_selection, cmd_hypothesis, run_path,
                     train_scratch)
from .exceptions import MissingArtifactError

log = logging.getLogger(__name__)

WORKERS_ENV = "CESKD_WORKERS"


def load_data(cfg: ExperimentConfig):
    d = cfg.data
    if d.kind == "synthetic":
        train, test = gen_synthetic(d.classes, d.dim, d.n_train, d.hardness_spread, d.data_seed,
                                    n_test=d.n_test, modes=d.modes, separation=d.separation)
    elif d.kind == "idx":
        train = load_idx(d.train_images, d.train_labels, d.classes, "train")
        test = load_idx(d.test_images, d.test_labels, d.classes, "test")
    else:
        train = load_cifar10_bin(d.train_files, "train")
        test = load_cifar10_bin(d.test_files, "test")
    if d.normalize:
        stats = compute_stats(train)
        train, test = normalize(train, stats), normalize(test, stats)
    return train, test


def write_config_copies(cfg, out, source_text=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if source_text is not None:
        (out / "config.ini").write_text(source_text)
    (out / "resolved.ini").write_text(serialize_config(cfg))


def curriculum_path(cfg, out):
    return Path(cfg.curriculum.file) if cfg.curriculum.file else Path(out) / "curriculum.tsv"


def build_curriculum(cfg: ExperimentConfig, train, test):
    """Train (or load) the reference model and rank the training set by its loss."""
    if cfg.curriculum.scorer_checkpoint:
        reference = load_checkpoint(cfg.curriculum.scorer_checkpoint)
    else:
        spec = cfg.model_spec(cfg.reference_name(), train.input_shape, train.n_classes)
        rc = replace(cfg.run_config(cfg.curriculum.reference_seed), epochs=cfg.curriculum.reference_epochs)
        reference, _ = train_scratch(spec, train, test, rc)
    return rank(score_dataset(reference, train.X, train.y)), reference


def run_score(cfg: ExperimentConfig, out, data=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = data or load_data(cfg)
    ranked, reference = build_curriculum(cfg, train, test)
    ref_path = out / "reference.ckpt"
    save_checkpoint(reference, ref_path)
    L = max(1, len(cfg.path.models) - 1)
    plan = bucketize(ranked, train.y, L, cfg.curriculum.class_balanced)
    path = curriculum_path(cfg, out)
    write_curriculum(path, ranked, train.y, plan, cfg.curriculum.policy,
                     cfg.curriculum.reference_seed, checkpoint_id(ref_path))
    log.info("wrote curriculum %s (%d samples, L=%d)", path, len(ranked), L)
    return path


def load_ranked(cfg, out, train):
    path = curriculum_path(cfg, out)
    if not path.exists():
        raise MissingArtifactError(f"curriculum file {path} not found; run `ceskd score` first")
    cur = read_curriculum(path)
    if len(cur.ranked) != len(train) or not np.array_equal(cur.labels, train.y):
        raise MissingArtifactError(f"curriculum {path} does not match the configured training set; "
                                   "re-run `ceskd score`")
    return cur.ranked


def _workers(cfg):
    env = os.environ.get(WORKERS_ENV)
    n = cfg.experiment.workers
    if env:
        n = min(n, int(env)) if n > 1 else int(env)
    return max(1, n)


def _distill_seed(args):
    cfg, out, method, seed, ranked, data = args
    train, test = data
    rc = cfg.run_config(seed)
    specs = cfg.path_specs(train.input_shape, train.n_classes)
    run_dir = Path(out) / method / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    if method == "noKD":
        model, metrics = train_scratch(specs[-1], train, test, rc, stream_key=len(specs) - 1)
        results = [(model, metrics)]
        names = [specs[-1].name]
    else:
        teacher = None
        if cfg.path.teacher_checkpoint:
            teacher = load_checkpoint(cfg.path.teacher_checkpoint, expected_depth_tag=specs[0].depth_tag)
        results = run_path(DistillationPath(specs, method), train, test, rc, ranked=ranked, teacher=teacher)
        names = [s.name for s in specs]
    for k, ((model, metrics), name) in enumerate(zip(results, names)):
        stem = f"step{k}_{name}"
        save_checkpoint(model, run_dir / f"{stem}.ckpt")
        report.write_metrics(run_dir / f"{stem}.metrics.tsv", metrics)
        report.write_run_log(run_dir / f"{stem}.runlog.tsv", metrics.log)
        report.write_summary(run_dir / f"{stem}.summary.tsv", metrics, seed=seed, method=method, model=name)
    final = results[-1][1]
    report.write_metrics(run_dir / "metrics.tsv", final)
    report.write_summary(run_dir / "summary.tsv", final, seed=seed, method=method,
                         model=names[-1], policy=rc.policy if method == "ceskd" else "-")
    return seed, final.final_top1


def run_distill(cfg: ExperimentConfig, out, method=None, data=None):
    method = method or cfg.path.method
    train, test = data or load_data(cfg)
    ranked = None
    if method == "ceskd":
        ranked = load_ranked(cfg, out, train)
    jobs = [(cfg, str(out), method, s, ranked, (train, test)) for s in cfg.experiment.seeds]
    workers = _workers(cfg)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_distill_seed, jobs))
    else:
        results = [_distill_seed(j) for j in jobs]
    return dict(results)


def run_hypothesis(cfg: ExperimentConfig, out, data=None):
    train, test = data or load_data(cfg)
    ranked = load_ranked(cfg, out, train)
    specs = cfg.path_specs(train.input_shape, train.n_classes)
    result = cmd_hypothesis(specs[:-1], specs[-1], train, test, cfg.run_config(),
                            ranked, cfg.experiment.seeds)
    out = Path(out)
    mean, std = result.mean(), result.std()
    lines = ["expert\t" + "\t".join(result.levels)]
    for i, tag in enumerate(result.expert_tags):
        cells = [report.format_mean_std(mean[i, j], None if np.isnan(std[i, j]) else std[i, j])
                 for j in range(3)]
        lines.append(f"{tag}\t" + "\t".join(cells))
    (out / "hypothesis.txt").write_text("\n".join(lines) + "\n")
    with open(out / "hypothesis.tsv", "w") as fh:
        fh.write("seed\texpert\tlevel\ttop1\n")
        for si, seed in enumerate(cfg.experiment.seeds):
            for ei, tag in enumerate(result.expert_tags):
                for li, level in enumerate(result.levels):
                    fh.write(f"{seed}\t{tag}\t{level}\t{result.accuracy[si, ei, li]!r}\n")
    curves = {f"s{seed}_e{tag}_{level}": v for (seed, tag, level), v in result.curves.items()}
    report.write_series(out / "hypothesis_curves.tsv", curves)
    return result


def run_ablate(cfg: ExperimentConfig, out, data=None):
    train, test = data or load_data(cfg)
    ranked = load_ranked(cfg, out, train)
    specs = cfg.path_specs(train.input_shape, train.n_classes)
    result = cmd_ablate_selection(specs, train, test, cfg.run_config(), ranked, cfg.experiment.seeds)
    rows = [report.make_row(cfg.experiment.name, "ceskd", result.accuracy[p], policy=p)
            for p in result.policies]
    out = Path(out)
    (out / "ablation.txt").write_text(report.render_table(rows))
    report.write_rows(out / "ablation.tsv", rows)
    with open(out / "ablation_seeds.tsv", "w") as fh:
        fh.write("seed\t" + "\t".join(result.policies) + "\n")
        for i, seed in enumerate(result.seeds):
            fh.write(f"{seed}\t" + "\t".join(repr(result.accuracy[p][i]) for p in result.policies) + "\n")
    return result, rows


def collect_runs(out):
    """``{method: [(seed, Metrics, summary dict), ...]}`` for every distill run under ``out``."""
    runs = {}
    for method_dir in sorted(p for p in Path(out).iterdir() if p.is_dir()):
        for seed_dir in sorted(method_dir.glob("seed_*")):
            if not (seed_dir / "metrics.tsv").exists():
                continue
            metrics = report.read_metrics(seed_dir / "metrics.tsv")
            summary = report.read_summary(seed_dir / "summary.tsv")
            runs.setdefault(method_dir.name, []).append((int(seed_dir.name[5:]), metrics, summary))
    return runs


def run_report(out, name="experiment", threshold=None):
    """Aggregate every distill run under ``out`` into report rows and plot-ready series."""
    runs = collect_runs(out)
    if not runs:
        raise MissingArtifactError(f"no distill runs under {out}; run `ceskd distill` first")
    if threshold is None and "noKD" in runs:
        threshold = report.mean_std([m.final_top1 for _, m, s in runs["noKD"] if s.get("failed") != "1"])[0]
    rows, series = [], {}
    for method, items in runs.items():
        ok = [(m, s) for _, m, s in items if s.get("failed") != "1"]
        ett = None
        if threshold is not None and ok:
            ett = report.mean_epochs_to_threshold([m for m, _ in ok], threshold,
                                                  budget=max(len(m.top1) for m, _ in ok))
        policy = items[0][2].get("policy", "-")
        rows.append(report.make_row(name, method, [m.final_top1 for m, _ in ok], policy=policy,
                                    ett=ett, n_failed=len(items) - len(ok)))
        if ok:
            length = min(len(m.top1) for m, _ in ok)
            series[f"{method}_top1"] = np.mean([m.top1[:length] for m, _ in ok], axis=0)
            series[f"{method}_train_loss"] = np.mean([m.train_loss[:length] for m, _ in ok], axis=0)
    out = Path(out)
    (out / "report.txt").write_text(report.render_table(rows)
                                    + (f"threshold\t{threshold!r}\n" if threshold is not None else ""))
    report.write_rows(out / "report.tsv", rows)
    report.write_series(out / "series.tsv", series)
    return rows
