"""Reproducible study runners: robustness, group maps, double shift, sanity.

Seed discipline: trial t uses ``trial_seed = base_seed + t``; every random
component inside a trial derives its own seed as ``trial_seed * 1000 +
offset`` with fixed offsets (1 calibration data, 2 test data, 3 calibration
shift, 4 test shift).  Model training data uses ``base_seed * 1000 + 900 +
offset``.  Re-running a single trial therefore reproduces its batch output.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.stats import spearmanr

from . import __version__
from .config import ExperimentConfig, ModelSettings
from .conformal import (
    Partitioner,
    ScoreFunction,
    conformal_quantile,
    evaluate,
    mondrian_calibrate,
    quantiles_for,
    set_matrix,
    weighted_quantile,
)
from .data import Dataset, ShiftSpec, apply_shift, generate_glyphs
from .diagnostics import (
    WeightConfig,
    build_group_map,
    emit_group_map_plot,
    geometric_weights,
    true_group_map,
)
from .groups import C360, CyclicGroup
from .models import (
    Canonicalizer,
    Classifier,
    canonicalize_batch,
    load_canonicalizer,
    load_classifier,
    train_canonicalizer,
    train_classifier,
)

__all__ = [
    "RESULT_COLUMNS",
    "run_robustness",
    "run_group_map",
    "run_double_shift",
    "run_coverage_sanity",
    "run_study",
    "write_results_csv",
]

RESULT_COLUMNS = (
    "trial",
    "method",
    "score_fn",
    "alpha",
    "shift",
    "kappa",
    "coverage",
    "mean_set_size",
    "accuracy",
    "partition",
    "quantile",
)

_TRAIN_OFFSET = 901
_CANON_OFFSET = 902


def trial_seed(base_seed: int, trial: int) -> int:
    return base_seed + trial


def subseed(seed: int, offset: int) -> int:
    return seed * 1000 + offset


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.10g}"
    return str(value)


def write_results_csv(rows: list[dict], path) -> None:
    """Write result rows in the fixed schema, blank-filling absent columns."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col, "")) for col in RESULT_COLUMNS])


def _write_manifest(cfg: ExperimentConfig, out_dir: str, extras: dict) -> None:
    manifest = {
        "library_version": __version__,
        "study": cfg.study,
        "config": cfg.raw,
        "base_seed": cfg.seed,
        "trials": cfg.trials,
        "trial_seeds": [trial_seed(cfg.seed, t) for t in range(cfg.trials)],
        "seed_rule": (
            "trial_seed = base_seed + trial; component seeds = seed*1000 + offset "
            "(1 cal data, 2 test data, 3 cal shift, 4 test shift; "
            "901 predictor data, 902 canonicalizer data)"
        ),
    }
    manifest.update(extras)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _score_fn(cfg: ExperimentConfig) -> ScoreFunction:
    return ScoreFunction(cfg.score.kind, cfg.score.randomized, cfg.score.seed)


def _train_predictor(cfg: ExperimentConfig) -> Classifier:
    settings = cfg.predictor
    if settings.path:
        return load_classifier(settings.path)
    train = generate_glyphs(
        subseed(cfg.seed, _TRAIN_OFFSET), cfg.data.train, cfg.data.classes, cfg.data.side
    )
    return train_classifier(
        train, settings.train_config(), arch=settings.arch, hidden=settings.hidden
    )


def _train_canonicalizer(cfg: ExperimentConfig, group: CyclicGroup, settings: ModelSettings | None = None) -> Canonicalizer:
    settings = settings or cfg.canonicalizer
    if settings.path:
        return load_canonicalizer(settings.path)
    canon = generate_glyphs(
        subseed(cfg.seed, _CANON_OFFSET), cfg.data.canon, cfg.data.classes, cfg.data.side
    ).with_split("canon-train")
    return train_canonicalizer(
        canon,
        group,
        settings.train_config(),
        arch=settings.arch,
        hidden=settings.hidden,
        temperature=settings.temperature,
    )


def _trial_datasets(cfg: ExperimentConfig, trial: int) -> tuple[Dataset, Dataset]:
    ts = trial_seed(cfg.seed, trial)
    cal = generate_glyphs(
        subseed(ts, 1), cfg.data.calibration, cfg.data.classes, cfg.data.side
    ).with_split("calibration")
    test = generate_glyphs(
        subseed(ts, 2), cfg.data.test, cfg.data.classes, cfg.data.side
    ).with_split("test")
    return cal, test


def _run_trials(fn, trials: int, threads: int) -> list:
    if threads <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(trials)))


def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


# ---------------------------------------------------------------------------
# robustness study
# ---------------------------------------------------------------------------


def run_robustness(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Coverage/set-size table over {plain, canonicalized} x {shift} cells."""
    os.makedirs(out_dir, exist_ok=True)
    clf = _train_predictor(cfg)
    groups = cfg.extra["groups"]
    shift_labels = cfg.extra["shifts"]
    canons = {g: _train_canonicalizer(cfg, CyclicGroup(g)) for g in groups}
    pipelines = ["base"] + [f"cn{g}" for g in groups]
    alpha = cfg.alpha
    classes = list(range(cfg.data.classes))

    def shift_group(label: str) -> CyclicGroup | None:
        return None if label == "none" else CyclicGroup(int(label[1:]))

    def one_trial(pipeline: str, label: str, trial: int) -> dict:
        sf = _score_fn(cfg)
        cal, test = _trial_datasets(cfg, trial)
        ts = trial_seed(cfg.seed, trial)
        grp = shift_group(label)
        if grp is not None:
            spec = ShiftSpec.uniform(classes)
            cal = apply_shift(cal, spec, grp, subseed(ts, 3))
            test = apply_shift(test, spec, grp, subseed(ts, 4))
        cal_images, test_images = cal.images(), test.images()
        if pipeline != "base":
            cn = canons[int(pipeline[2:])]
            cal_images, _, _ = canonicalize_batch(cn, cal_images)
            test_images, _, _ = canonicalize_batch(cn, test_images)
        probs_cal = clf.predict_proba(cal_images)
        probs_test = clf.predict_proba(test_images)
        scores = sf.scores_for(probs_cal, cal.labels())
        q = conformal_quantile(scores, alpha)
        sets = set_matrix(sf, probs_test, q)
        metrics = evaluate(
            sets, test.labels(), point_predictions=np.argmax(probs_test, axis=1)
        )
        return {
            "trial": trial,
            "method": "scp",
            "score_fn": cfg.score.kind,
            "alpha": alpha,
            "shift": label,
            "kappa": "",
            "coverage": metrics.coverage,
            "mean_set_size": metrics.mean_set_size,
            "accuracy": metrics.accuracy,
            "partition": "",
            "quantile": q,
        }

    summary: dict = {"pipelines": {}, "train_accuracy": clf.train_accuracy}
    for pipeline in pipelines:
        pipe_rows: list[dict] = []
        cells = {}
        for label in shift_labels:
            rows = _run_trials(
                lambda t, p=pipeline, s=label: one_trial(p, s, t), cfg.trials, threads
            )
            pipe_rows.extend(rows)
            cov_m, cov_s = _mean_sd([r["coverage"] for r in rows])
            size_m, size_s = _mean_sd([r["mean_set_size"] for r in rows])
            acc_m, _ = _mean_sd([r["accuracy"] for r in rows])
            cells[label] = {
                "coverage_mean": cov_m,
                "coverage_sd": cov_s,
                "set_size_mean": size_m,
                "set_size_sd": size_s,
                "accuracy_mean": acc_m,
            }
        write_results_csv(pipe_rows, os.path.join(out_dir, f"results_{pipeline}.csv"))
        summary["pipelines"][pipeline] = cells

    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, out_dir, {"pipelines": pipelines, "shifts": shift_labels})
    return summary


# ---------------------------------------------------------------------------
# group-map study
# ---------------------------------------------------------------------------


def run_group_map(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Build true/recovered group maps and compare SCP with group-cell MCP.

    The classifier consumes the shifted images directly (no canonicalization);
    the canonicalizer only supplies pose assignments for the Mondrian cells
    and for the recovered map.
    """
    os.makedirs(out_dir, exist_ok=True)
    clf = _train_predictor(cfg)
    group = CyclicGroup(cfg.extra["group"])
    cn = _train_canonicalizer(cfg, group)
    spec: ShiftSpec = cfg.extra["shift"]
    alpha = cfg.alpha
    partitioner = Partitioner("by-group-argmax", canonicalizer=cn)
    if cfg.extra["partition"] == "by-entropy-bins":
        # bins are assigned on the unshifted images and written into the
        # partition field, so the shift conditions on them and downstream
        # reporting reads them back
        entropy_part = Partitioner(
            "by-entropy-bins",
            classifier=clf,
            entropy_edges=cfg.extra["entropy_edges"],
        )
        target = Partitioner("by-partition-field")
        num_partitions = len(cfg.extra["entropy_edges"]) + 1
    else:
        entropy_part = None
        target = Partitioner(cfg.extra["partition"])
        num_partitions = cfg.data.classes

    def one_trial(trial: int) -> dict:
        sf = _score_fn(cfg)
        cal, test = _trial_datasets(cfg, trial)
        if entropy_part is not None:
            cal = cal.with_partitions(entropy_part.assign(cal))
            test = test.with_partitions(entropy_part.assign(test))
        ts = trial_seed(cfg.seed, trial)
        cal = apply_shift(cal, spec, group, subseed(ts, 3))
        test = apply_shift(test, spec, group, subseed(ts, 4))

        true_map = true_group_map(cal, group.order, num_partitions=num_partitions)
        recovered = build_group_map(
            cal,
            cn,
            target,
            mode=cfg.extra["map_mode"],
            threshold=cfg.extra["confidence_threshold"],
            seed=subseed(ts, 5),
            num_partitions=num_partitions,
        )

        probs_cal = clf.predict_proba(cal.images())
        probs_test = clf.predict_proba(test.images())
        scores = sf.scores_for(probs_cal, cal.labels())
        target_test = target.assign(test)

        out_rows = []
        q_scp = conformal_quantile(scores, alpha)
        sets_scp = set_matrix(sf, probs_test, q_scp)
        m_scp = evaluate(
            sets_scp,
            test.labels(),
            partitions=target_test,
            point_predictions=np.argmax(probs_test, axis=1),
        )

        cells_cal = partitioner.assign(cal)
        cells_test = partitioner.assign(test)
        q_by_cell = mondrian_calibrate(scores, cells_cal, alpha)
        sets_mcp = set_matrix(sf, probs_test, quantiles_for(q_by_cell, cells_test))
        m_mcp = evaluate(sets_mcp, test.labels(), partitions=target_test)
        m_mcp_group = evaluate(sets_mcp, test.labels(), partitions=cells_test)

        for method, metrics, q in (("scp", m_scp, q_scp), ("mcp", m_mcp, "")):
            out_rows.append(
                {
                    "trial": trial,
                    "method": method,
                    "score_fn": cfg.score.kind,
                    "alpha": alpha,
                    "shift": spec.variant,
                    "kappa": "",
                    "coverage": metrics.coverage,
                    "mean_set_size": metrics.mean_set_size,
                    "accuracy": m_scp.accuracy,
                    "partition": "",
                    "quantile": q,
                }
            )
            for part, cov in sorted(metrics.per_partition_coverage.items()):
                out_rows.append(
                    {
                        "trial": trial,
                        "method": method,
                        "score_fn": cfg.score.kind,
                        "alpha": alpha,
                        "shift": spec.variant,
                        "kappa": "",
                        "coverage": cov,
                        "mean_set_size": metrics.mean_set_size,
                        "accuracy": "",
                        "partition": part,
                        "quantile": q_by_cell.get(part, "") if method == "mcp" else q,
                    }
                )

        true_rows = true_map.argmax_rows()
        rec_rows = recovered.argmax_rows()
        defined = (true_rows >= 0) & (rec_rows >= 0)
        agreement = float(np.mean(true_rows[defined] == rec_rows[defined]))
        return {
            "rows": out_rows,
            "agreement": agreement,
            "identity_freq": recovered.frequencies[:, 0].tolist(),
            "per_class_scp": m_scp.per_partition_coverage,
            "per_class_mcp": m_mcp.per_partition_coverage,
            "per_group_mcp": m_mcp_group.per_partition_coverage,
            "true_map": true_map,
            "recovered_map": recovered,
        }

    outcomes = _run_trials(one_trial, cfg.trials, threads)
    rows = [row for o in outcomes for row in o["rows"]]
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    emit_group_map_plot(outcomes[0]["true_map"], os.path.join(out_dir, "group_map_true"))
    emit_group_map_plot(
        outcomes[0]["recovered_map"], os.path.join(out_dir, "group_map_recovered")
    )

    def stack(key):
        return {
            int(k): float(np.mean([o[key][k] for o in outcomes]))
            for k in outcomes[0][key]
        }

    per_class_scp = stack("per_class_scp")
    per_class_mcp = stack("per_class_mcp")
    per_group_mcp = stack("per_group_mcp")
    summary = {
        "shift_variant": spec.variant,
        "map_mode": cfg.extra["map_mode"],
        "argmax_agreement_mean": float(np.mean([o["agreement"] for o in outcomes])),
        "identity_freq_mean": np.mean(
            [o["identity_freq"] for o in outcomes], axis=0
        ).tolist(),
        "per_class_coverage_scp": per_class_scp,
        "per_class_coverage_mcp": per_class_mcp,
        "per_group_coverage_mcp": per_group_mcp,
        "min_class_coverage_scp": min(per_class_scp.values()),
        "min_class_coverage_mcp": min(per_class_mcp.values()),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, out_dir, {"group": group.order})
    return summary


# ---------------------------------------------------------------------------
# double-shift study
# ---------------------------------------------------------------------------


def run_double_shift(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Sweep the secondary von Mises shift and compare SCP with weighted CP."""
    os.makedirs(out_dir, exist_ok=True)
    clf = _train_predictor(cfg)
    group = CyclicGroup(cfg.extra["group"])
    cn = _train_canonicalizer(cfg, group)
    kappas = cfg.extra["kappas"]
    alpha = cfg.alpha
    classes = list(range(cfg.data.classes))
    centers = [e.angle for e in group.elements()]
    wcfg = WeightConfig(cfg.weights.metric, cfg.weights.power, cfg.weights.epsilon)
    methods = [m for m in cfg.methods if m in ("scp", "wcp")] or ["scp", "wcp"]

    def one_trial(kappa: float, trial: int) -> list[dict]:
        sf = _score_fn(cfg)
        cal, test = _trial_datasets(cfg, trial)
        ts = trial_seed(cfg.seed, trial)
        cal = apply_shift(cal, ShiftSpec.uniform(classes), group, subseed(ts, 3))
        test = apply_shift(
            test, ShiftSpec.von_mises_mixture(centers, kappa), C360, subseed(ts, 4)
        )
        cal_canon, _, post_cal = canonicalize_batch(cn, cal.images())
        test_canon, _, post_test = canonicalize_batch(cn, test.images())
        probs_cal = clf.predict_proba(cal_canon)
        probs_test = clf.predict_proba(test_canon)
        scores = sf.scores_for(probs_cal, cal.labels())
        point = np.argmax(probs_test, axis=1)

        rows = []
        if "scp" in methods:
            q = conformal_quantile(scores, alpha)
            metrics = evaluate(
                set_matrix(sf, probs_test, q), test.labels(), point_predictions=point
            )
            rows.append(("scp", metrics, q))
        if "wcp" in methods:
            q_each = np.array(
                [
                    weighted_quantile(
                        scores, geometric_weights(post_test[i], post_cal, wcfg), alpha
                    )
                    for i in range(len(test))
                ]
            )
            metrics = evaluate(
                set_matrix(sf, probs_test, q_each),
                test.labels(),
                point_predictions=point,
            )
            finite = q_each[np.isfinite(q_each)]
            q_rep = float(np.median(finite)) if finite.size else math.inf
            rows.append(("wcp", metrics, q_rep))
        return [
            {
                "trial": trial,
                "method": method,
                "score_fn": cfg.score.kind,
                "alpha": alpha,
                "shift": "von-mises-mixture",
                "kappa": kappa,
                "coverage": metrics.coverage,
                "mean_set_size": metrics.mean_set_size,
                "accuracy": metrics.accuracy,
                "partition": "",
                "quantile": q,
            }
            for method, metrics, q in rows
        ]

    all_rows: list[dict] = []
    curves: dict[str, dict[str, list[float]]] = {m: {"kappa": [], "coverage_mean": [], "coverage_sd": [], "set_size_mean": []} for m in methods}
    paired: dict[float, list[float]] = {}
    for kappa in kappas:
        batches = _run_trials(
            lambda t, k=kappa: one_trial(k, t), cfg.trials, threads
        )
        rows = [row for batch in batches for row in batch]
        all_rows.extend(rows)
        for method in methods:
            covs = [r["coverage"] for r in rows if r["method"] == method]
            sizes = [r["mean_set_size"] for r in rows if r["method"] == method]
            cov_m, cov_s = _mean_sd(covs)
            curves[method]["kappa"].append(kappa)
            curves[method]["coverage_mean"].append(cov_m)
            curves[method]["coverage_sd"].append(cov_s)
            curves[method]["set_size_mean"].append(float(np.mean(sizes)))
        if "scp" in methods and "wcp" in methods:
            diffs = []
            for t in range(cfg.trials):
                cov = {r["method"]: r["coverage"] for r in rows if r["trial"] == t}
                diffs.append(cov["wcp"] - cov["scp"])
            paired[kappa] = diffs

    write_results_csv(all_rows, os.path.join(out_dir, "results.csv"))
    summary: dict = {"curves": curves, "kappas": kappas}
    if "scp" in methods:
        severity = np.arange(len(kappas))  # kappas are listed most to least benign
        scp_cov = np.asarray(curves["scp"]["coverage_mean"])
        rho = spearmanr(severity, scp_cov).statistic if len(kappas) > 2 else 0.0
        summary["scp_coverage_spearman_vs_severity"] = float(rho)
    if paired:
        summary["paired_wcp_minus_scp"] = {
            str(k): {"mean": float(np.mean(v)), "values": v} for k, v in paired.items()
        }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, out_dir, {"group": group.order, "kappas": kappas})
    return summary


# ---------------------------------------------------------------------------
# coverage sanity study
# ---------------------------------------------------------------------------


def _rank_oracle(scores: np.ndarray, alpha: float) -> float:
    """Linear-scan quantile: first sorted score whose rank covers 1 - alpha."""
    from fractions import Fraction

    ordered = np.sort(scores)
    n = ordered.size
    target = (n + 1) * (1 - Fraction(alpha))
    for j in range(1, n + 1):
        if j >= target:
            return float(ordered[j - 1])
    return math.inf


def run_coverage_sanity(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Exchangeable-score Monte Carlo check plus quantile oracle comparisons."""
    os.makedirs(out_dir, exist_ok=True)
    extra = cfg.extra
    n_cal, n_test = extra["n_cal"], extra["n_test"]
    rows = []
    coverage_report = {}
    for alpha in extra["alphas"]:
        covs = []
        for t in range(cfg.trials):
            rng = np.random.default_rng(subseed(trial_seed(cfg.seed, t), 1))
            scores_cal = rng.standard_normal(n_cal)
            scores_test = rng.standard_normal(n_test)
            q = conformal_quantile(scores_cal, alpha)
            cov = float(np.mean(scores_test <= q))
            covs.append(cov)
            rows.append(
                {
                    "trial": t,
                    "method": "scp",
                    "score_fn": "synthetic",
                    "alpha": alpha,
                    "shift": "none",
                    "kappa": "",
                    "coverage": cov,
                    "mean_set_size": "",
                    "accuracy": "",
                    "partition": "",
                    "quantile": q,
                }
            )
        mean_cov, sd_cov = _mean_sd(covs)
        coverage_report[str(alpha)] = {
            "mean_coverage": mean_cov,
            "sd": sd_cov,
            "target": 1 - alpha,
            "within_band": bool(abs(mean_cov - (1 - alpha)) <= 0.01),
        }

    rng = np.random.default_rng(subseed(cfg.seed, 7))
    mismatches = 0
    weighted_mismatches = 0
    from .conformal import WeightVector

    for _ in range(extra["oracle_instances"]):
        n = int(rng.integers(1, 200))
        alpha = float(rng.uniform(0.01, 0.5))
        scores = rng.standard_normal(n)
        got = conformal_quantile(scores, alpha)
        want = _rank_oracle(scores, alpha)
        if got != want:
            mismatches += 1
        if weighted_quantile(scores, WeightVector.uniform(n), alpha) != want:
            weighted_mismatches += 1

    summary = {
        "coverage": coverage_report,
        "oracle_instances": extra["oracle_instances"],
        "quantile_oracle_mismatches": mismatches,
        "weighted_uniform_mismatches": weighted_mismatches,
        "pass": bool(
            mismatches == 0
            and weighted_mismatches == 0
            and all(v["within_band"] for v in coverage_report.values())
        ),
    }
    write_results_csv(rows, os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(cfg, out_dir, {})
    return summary


_RUNNERS = {
    "robustness": run_robustness,
    "group-map": run_group_map,
    "double-shift": run_double_shift,
    "coverage-sanity": run_coverage_sanity,
}


def run_study(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Dispatch to the study named by the config."""
    return _RUNNERS[cfg.study](cfg, out_dir, threads)
