"""Metrics, the prediction-averaging study, the input-combination ablation
harness and the continuous time-sweep prediction.

The two error measures are concrete-weighted: an inner mean over a
concrete's input sets, then an unweighted outer mean over concretes, so
every concrete counts the same regardless of how many sets it contributed.
The relative form divides by the per-sample reference value and is reported
in percent.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .datapipe import normalize_batch
from .exceptions import InputError
from .protocol import OUTPUT_NAMES

SLUMP_PRECISION_CM = 2.46  # error-bar metadata for sweep plots

GROUPINGS = ("none", "per_run", "all_runs", "per_reference")


@dataclass
class PredictionRecord:
    """One (possibly group-averaged) prediction with its reference values."""

    concrete_id: str
    run_id: str
    slump_ref_id: int
    rheo_ref_id: int
    y: np.ndarray            # (3,) reference values, raw units
    y_hat: np.ndarray        # (3,) predictions, raw units
    mask: np.ndarray         # (3,) bool: which outputs are evaluated
    group_size: int = 1


def records_from_sets(sets, predictions: np.ndarray) -> list[PredictionRecord]:
    if len(sets) != len(predictions):
        raise InputError(f"{len(sets)} sets but {len(predictions)} predictions")
    return [PredictionRecord(concrete_id=s.concrete_id, run_id=s.run_id,
                             slump_ref_id=s.slump_ref_id, rheo_ref_id=s.rheo_ref_id,
                             y=np.asarray(s.targets, dtype=np.float64),
                             y_hat=np.asarray(p, dtype=np.float64),
                             mask=np.asarray(s.target_mask, dtype=bool))
            for s, p in zip(sets, predictions)]


@dataclass
class MetricReport:
    eps_rel: np.ndarray                      # (3,) percent
    eps_abs: np.ndarray                      # (3,) output units
    per_concrete: dict = field(default_factory=dict)
    group_size_mean: np.ndarray = None

    def row_dicts(self):
        for k, name in enumerate(OUTPUT_NAMES):
            yield {"output": name, "eps_rel": self.eps_rel[k], "eps_abs": self.eps_abs[k]}


def epsilon_metrics(records) -> MetricReport:
    """Concrete-weighted mean absolute and mean relative (%) errors."""
    per_concrete: dict[str, dict] = {}
    for rec in records:
        per_concrete.setdefault(rec.concrete_id, {k: [] for k in range(3)})
        for k in range(3):
            if not rec.mask[k]:
                continue
            if rec.y[k] == 0.0:
                warnings.warn(f"reference value 0 for output {OUTPUT_NAMES[k]} of "
                              f"{rec.concrete_id}; excluded from relative error",
                              stacklevel=2)
                continue
            per_concrete[rec.concrete_id][k].append(
                (abs(rec.y[k] - rec.y_hat[k]), abs(rec.y[k] - rec.y_hat[k]) / rec.y[k]))

    eps_abs = np.full(3, np.nan)
    eps_rel = np.full(3, np.nan)
    detail: dict[str, dict] = {}
    sizes = np.zeros(3)
    for k in range(3):
        inner_abs, inner_rel = [], []
        for cid, outputs in per_concrete.items():
            entries = outputs[k]
            if not entries:
                continue
            a = float(np.mean([e[0] for e in entries]))
            r = float(np.mean([e[1] for e in entries])) * 100.0
            inner_abs.append(a)
            inner_rel.append(r)
            detail.setdefault(cid, {})[OUTPUT_NAMES[k]] = {"eps_abs": a, "eps_rel": r,
                                                           "count": len(entries)}
        if inner_abs:
            eps_abs[k] = float(np.mean(inner_abs))
            eps_rel[k] = float(np.mean(inner_rel))
            sizes[k] = float(np.mean([len(outputs[k]) for outputs in per_concrete.values()
                                      if outputs[k]]))
    return MetricReport(eps_rel=eps_rel, eps_abs=eps_abs, per_concrete=detail)


def averaged_eps_rel(report: MetricReport) -> float:
    """Mean of the available per-output relative errors (epoch-selection score)."""
    vals = report.eps_rel[np.isfinite(report.eps_rel)]
    if vals.size == 0:
        raise InputError("no output had any evaluable prediction")
    return float(vals.mean())


def average_predictions(records, grouping: str) -> list[PredictionRecord]:
    """Mean predictions per group before computing metrics.

    ``per_run`` groups a run's predictions of one reference combination,
    ``all_runs`` pools the same combination across runs, ``per_reference``
    pools per measurement (slump measurement for the diameter, rheometer
    measurement for the two flow parameters), which makes the group masks
    output-specific.
    """
    if grouping == "none":
        return list(records)
    if grouping not in GROUPINGS:
        raise InputError(f"unknown grouping '{grouping}'; valid: {', '.join(GROUPINGS)}")

    if grouping in ("per_run", "all_runs"):
        groups: dict[tuple, list[PredictionRecord]] = {}
        for rec in records:
            key = (rec.concrete_id, rec.slump_ref_id, rec.rheo_ref_id)
            if grouping == "per_run":
                key = key + (rec.run_id,)
            groups.setdefault(key, []).append(rec)
        out = []
        for members in groups.values():
            if not members:
                continue
            mean_hat = np.mean([m.y_hat for m in members], axis=0)
            out.append(replace(members[0], y_hat=mean_hat, group_size=len(members)))
        return out

    # per_reference: the slump-side and rheometer-side outputs average over
    # different groups, emitted as mask-restricted records
    out = []
    slump_groups: dict[tuple, list[PredictionRecord]] = {}
    rheo_groups: dict[tuple, list[PredictionRecord]] = {}
    for rec in records:
        slump_groups.setdefault((rec.concrete_id, rec.slump_ref_id), []).append(rec)
        rheo_groups.setdefault((rec.concrete_id, rec.rheo_ref_id), []).append(rec)
    for members in slump_groups.values():
        mean_hat = np.mean([m.y_hat for m in members], axis=0)
        mask = members[0].mask & np.array([True, False, False])
        out.append(replace(members[0], y_hat=mean_hat, mask=mask, group_size=len(members)))
    for members in rheo_groups.values():
        mean_hat = np.mean([m.y_hat for m in members], axis=0)
        mask = members[0].mask & np.array([False, True, True])
        if mask.any():
            out.append(replace(members[0], y_hat=mean_hat, mask=mask, group_size=len(members)))
    return out


def averaging_study(records, groupings=GROUPINGS):
    """Metric reports per grouping mode, with mean group sizes attached."""
    results = {}
    for grouping in groupings:
        averaged = average_predictions(records, grouping)
        report = epsilon_metrics(averaged)
        sizes = np.zeros(3)
        for k in range(3):
            members = [r.group_size for r in averaged if r.mask[k]]
            sizes[k] = float(np.mean(members)) if members else 0.0
        report.group_size_mean = sizes
        results[grouping] = report
    return results


# -- continuous time sweep -----------------------------------------------------

@dataclass
class SweepCurve:
    minutes: np.ndarray          # absolute sample age grid (minutes since water)
    predictions: np.ndarray      # (T, 3) raw units, averaged over the run's sets
    n_averaged: int
    t_central_min: float
    error_bar: float = SLUMP_PRECISION_CM


def time_sweep(net, stats, run_sets, t_start_min: float, t_end_min: float,
               t_central_min: float, mix_indices=None, step_min: float = 1.0,
               batch_size: int = 256) -> SweepCurve:
    """Predict the property curve over a grid of sample ages from one run.

    Every grid minute t sets both time-offset components to t minus the
    run's central timestamp, forwards all of the run's input sets and
    averages the denormalized outputs.
    """
    if not run_sets:
        raise InputError("time sweep needs a non-empty run")
    if t_end_min < t_start_min:
        raise InputError(f"empty sweep interval [{t_start_min}, {t_end_min}]")
    from .datapipe import apply_norm, denorm  # local names for clarity

    minutes = np.arange(t_start_min, t_end_min + 0.5 * step_min, step_min)
    images, _, mix, _, _ = normalize_batch(run_sets, stats)
    if mix_indices is not None:
        mix = mix[:, mix_indices]
    preds = np.zeros((len(minutes), 3))
    for ti, t in enumerate(minutes):
        offset = float(t - t_central_min)
        dt = np.full((len(run_sets), 2), apply_norm(offset, stats, "delta_t"),
                     dtype=np.float32)
        outs = []
        for lo in range(0, len(run_sets), batch_size):
            hi = min(lo + batch_size, len(run_sets))
            outs.append(net.forward(images[lo:hi], dt[lo:hi], mix[lo:hi], train=False))
        out = np.concatenate(outs, axis=0).astype(np.float64)
        for k, cat in enumerate(("delta", "tau0", "mu")):
            out[:, k] = denorm(out[:, k], stats, cat)
        preds[ti] = out.mean(axis=0)
    return SweepCurve(minutes=minutes, predictions=preds, n_averaged=len(run_sets),
                      t_central_min=t_central_min)


# -- input-combination ablation -----------------------------------------------

@dataclass
class AblationResult:
    rows: list                    # metrics.csv rows (combination, fold, repeat, ...)
    overall: dict                 # combination name -> MetricReport (mean over folds/repeats)
    fold_plan_digest: str


def run_ablation(sets_by_concrete: dict, fold_plan, base_model_config, train_config,
                 combination_names=None, repeats: int = 2, folds=None,
                 progress=None) -> AblationResult:
    """Train and test every input combination under identical fold plans and seeds.

    Only the input channels and the mix width differ between combinations;
    the fold plan and the per-(repeat, fold) seeds are shared, so the
    comparison isolates the input choice. Overall numbers are plain means of
    the per-test-set values over all folds and repetitions.
    """
    from . import trainer  # deferred: trainer uses this module's metrics
    from .datapipe import select_channels
    from .model import adapt_config
    from .protocol import COMBINATION_NAMES, parse_combination
    import dataclasses

    combination_names = combination_names or COMBINATION_NAMES
    fold_indices = list(folds) if folds is not None else list(range(len(fold_plan.folds)))
    rows = []
    overall = {}
    for name in combination_names:
        combo = parse_combination(name)
        config = adapt_config(base_model_config, len(combo.channels), combo.mix_dim)
        eps_rel_all, eps_abs_all = [], []
        for repeat in range(repeats):
            for fi in fold_indices:
                fold = fold_plan.folds[fi]
                seed = train_config.seed + 1000 * repeat + fi
                cfg = dataclasses.replace(train_config, seed=seed)
                train_sets = select_channels(
                    [s for cid in fold.train for s in sets_by_concrete[cid]], combo.channels)
                val_sets = select_channels(
                    [s for cid in fold.val for s in sets_by_concrete[cid]], combo.channels)
                test_sets = select_channels(
                    [s for cid in fold.test for s in sets_by_concrete[cid]], combo.channels)
                result = trainer.train_fold(train_sets, val_sets, config, cfg,
                                            mix_idx=combo.mix_indices())
                preds = trainer.predict_sets(result.model, test_sets, result.stats,
                                             combo.mix_indices())
                report = epsilon_metrics(records_from_sets(test_sets, preds))
                rows.extend(metrics_csv_rows(report, name, fi, repeat))
                eps_rel_all.append(report.eps_rel)
                eps_abs_all.append(report.eps_abs)
                if progress is not None:
                    progress(name, repeat, fi, report)
        overall[name] = MetricReport(eps_rel=np.nanmean(eps_rel_all, axis=0),
                                     eps_abs=np.nanmean(eps_abs_all, axis=0))
    return AblationResult(rows=rows, overall=overall, fold_plan_digest=fold_plan.digest())


def ablation_table(result: AblationResult) -> str:
    """Text table of the overall means, one column per input combination."""
    names = list(result.overall)
    lines = ["output,metric," + ",".join(names)]
    for k, output in enumerate(OUTPUT_NAMES):
        for metric, attr in (("eps_rel", "eps_rel"), ("eps_abs", "eps_abs")):
            values = [f"{getattr(result.overall[n], attr)[k]:.2f}" for n in names]
            lines.append(f"{output},{metric}," + ",".join(values))
    return "\n".join(lines) + "\n"


# -- CSV schemas -----------------------------------------------------------------

METRICS_HEADER = "combination,fold,repeat,output,eps_rel,eps_abs"
AVERAGING_HEADER = "grouping,group_size_mean,output,eps_rel,eps_abs"
SWEEP_HEADER = "minute,delta_pred,tau0_pred,mu_pred,n_averaged"


def metrics_csv_rows(report: MetricReport, combination: str, fold, repeat) -> list[str]:
    return [f"{combination},{fold},{repeat},{row['output']},"
            f"{row['eps_rel']:.6f},{row['eps_abs']:.6f}" for row in report.row_dicts()]


def averaging_csv(results: dict) -> str:
    lines = [AVERAGING_HEADER]
    for grouping, report in results.items():
        for k, row in enumerate(report.row_dicts()):
            lines.append(f"{grouping},{report.group_size_mean[k]:.2f},{row['output']},"
                         f"{row['eps_rel']:.6f},{row['eps_abs']:.6f}")
    return "\n".join(lines) + "\n"


def sweep_csv(curve: SweepCurve) -> str:
    lines = [SWEEP_HEADER]
    for t, row in zip(curve.minutes, curve.predictions):
        lines.append(f"{t:.1f},{row[0]:.6f},{row[1]:.6f},{row[2]:.6f},{curve.n_averaged}")
    return "\n".join(lines) + "\n"


def sweep_plot_csv(curve: SweepCurve, output_index: int = 0) -> str:
    """Plot-data form of one sweep output: x, y and the measurement error bar."""
    lines = ["x,y,err"]
    for t, row in zip(curve.minutes, curve.predictions):
        lines.append(f"{t:.1f},{row[output_index]:.6f},{curve.error_bar:.2f}")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def sweep_svg(curve: SweepCurve, output_index: int = 0, width: int = 640,
              height: int = 360) -> str:
    """Minimal vector-graphic rendering of one sweep output with error bars."""
    values = curve.predictions[:, output_index]
    t = curve.minutes
    pad = 40
    lo = min(values.min(), values.min() - curve.error_bar) - 1
    hi = max(values.max(), values.max() + curve.error_bar) + 1

    def sx(x):
        return pad + (x - t[0]) / max(t[-1] - t[0], 1e-9) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - lo) / max(hi - lo, 1e-9) * (height - 2 * pad)

    points = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(t, values))
    bars = []
    for x, y in list(zip(t, values))[:: max(1, len(t) // 12)]:
        bars.append(f'<line x1="{sx(x):.1f}" y1="{sy(y - curve.error_bar):.1f}" '
                    f'x2="{sx(x):.1f}" y2="{sy(y + curve.error_bar):.1f}" '
                    'stroke="#999" stroke-width="1"/>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            f'<rect width="100%" height="100%" fill="white"/>'
            f'{"".join(bars)}'
            f'<polyline points="{points}" fill="none" stroke="#1f6fb2" stroke-width="2"/>'
            f'</svg>\n')
