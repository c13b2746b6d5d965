"""Desk-scale experiments on phantom suites: ablation arms, seeds and the shift test."""

from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyClassError
from .metrics import MetricsReport, evaluate_case, surface_scar_metrics
from .model import forward, infer_from_outputs, init_model, train
from .surface import classify_surface, hard_boundary_mask, project_volume_labels

SHIFTS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def split_cases(cases, splits):
    """``(train, test)`` lists ordered by case id."""
    train_cases = [cases[k] for k in sorted(cases) if splits[k] == "train"]
    test_cases = [cases[k] for k in sorted(cases) if splits[k] == "test"]
    return train_cases, test_cases


def evaluate_outputs(case, la_prob, dpm, radius=3.0):
    """Metrics for one case from raw head outputs.

    An empty predicted LA still gets a row: Dice 0, infinite distances, and
    every surface point called normal.
    """
    spacing = case.la_label.spacing
    gt_la = case.la_label.data
    try:
        inf = infer_from_outputs(la_prob, dpm, spacing)
    except EmptyClassError:
        empty = np.zeros_like(gt_la)
        return evaluate_case(case.case_id, empty, empty, gt_la, case.wall_scar_label.data,
                             spacing, radius)
    return evaluate_case(case.case_id, inf.la_label, inf.scar_label_volume(), gt_la,
                         case.wall_scar_label.data, spacing, radius)


def evaluate_model(model, cases, radius=3.0):
    out = []
    for case in cases:
        state = forward(model, case.intensity)
        out.append(evaluate_outputs(case, state.y_hat, state.dpm, radius))
    return out


def shift_mask(mask, offset):
    """Translate a binary mask by whole voxels; vacated voxels become 0."""
    src = np.asarray(mask)
    out = np.zeros_like(src)
    dst_idx, src_idx = [], []
    for n, d in zip(src.shape, offset):
        dst_idx.append(slice(max(0, d), n + min(0, d)))
        src_idx.append(slice(max(0, -d), n - max(0, d)))
    out[tuple(dst_idx)] = src[tuple(src_idx)]
    return out


def surface_dice(la_mask, dpm, case, radius=3.0):
    """Scar Dice of the surface classified on ``la_mask``, scored on the true surface."""
    reference = hard_boundary_mask(case.la_label.data)
    gt = project_volume_labels(case.wall_scar_label.data, reference, radius)
    labeled = classify_surface(dpm, hard_boundary_mask(la_mask), case.la_label.spacing)
    pred = project_volume_labels(labeled.to_label_volume(), reference, radius)
    return surface_scar_metrics(pred, gt)[1]


@dataclass(frozen=True)
class ShiftResult:
    case_id: str
    dice_s: float
    dice_s_shifted: float

    @property
    def relative_drop(self):
        if self.dice_s == 0:
            return 0.0 if self.dice_s_shifted == 0 else -np.inf
        return (self.dice_s - self.dice_s_shifted) / self.dice_s


def shift_robustness(model, cases, shifts=SHIFTS, radius=3.0):
    """Scar Dice with the true LA surface and averaged over one-voxel shifts of it.

    The LA mask is the ground truth, so only the scar head is under test.
    """
    results = []
    for case in cases:
        dpm = forward(model, case.intensity).dpm
        la = case.la_label.data
        base = surface_dice(la, dpm, case, radius)
        moved = [surface_dice(shift_mask(la, s), dpm, case, radius) for s in shifts]
        results.append(ShiftResult(case.case_id, base, float(np.mean(moved))))
    return results


@dataclass(frozen=True)
class RunResult:
    arm: str
    seed: int
    reports: tuple
    shift: tuple
    log_checksum: str
    final_total: float


def run_arm(arm, seed, train_cases, test_cases, config, kind="conv", arch=None, shift=True):
    """Train one arm from seed ``seed`` and evaluate it on ``test_cases``."""
    cfg = replace(config, arm=arm, seed=seed)
    model = init_model(kind, train_cases[0].intensity.dims, seed=seed, arch=arch)
    model, log = train(model, train_cases, cfg)
    reports = tuple(evaluate_model(model, test_cases))
    shifted = tuple(shift_robustness(model, test_cases)) if shift else ()
    final = log.rows[-1]["total"] if log.rows else float("nan")
    return RunResult(arm, seed, reports, shifted, log.checksum(), final)


def _run_job(job):
    return run_arm(*job)


def ablation(train_cases, test_cases, config, arms=("bce", "se", "sesa"), seeds=range(5),
             kind="conv", arch=None, jobs=1):
    """Every (arm, seed) pair, in a fixed order regardless of ``jobs``."""
    grid = [(arm, int(seed), train_cases, test_cases, config, kind, arch)
            for seed in seeds for arm in arms]
    if jobs <= 1:
        return [_run_job(j) for j in grid]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, grid))


@dataclass(frozen=True)
class SweepPoint:
    arm: str
    seed: int
    beta: float = 1.0
    variant: str = "exp"
    metric: str = "l2"

    @property
    def tag(self):
        return f"{self.arm}_b{self.beta:g}_{self.variant}_{self.metric}_s{self.seed}"

    def config(self, base):
        return replace(base, arm=self.arm, seed=self.seed, beta=self.beta, variant=self.variant,
                       metric=self.metric)


@dataclass(frozen=True)
class ExperimentPreset:
    """A named grid of training runs; :meth:`expand` lists them in a fixed order."""

    name: str
    arms: tuple = ("sesa",)
    betas: tuple = (1.0,)
    variants: tuple = ("exp",)
    metrics: tuple = ("l2",)
    shift: bool = False

    def expand(self, seeds):
        return [SweepPoint(arm, int(seed), beta, variant, metric)
                for beta in self.betas for variant in self.variants for metric in self.metrics
                for seed in seeds for arm in self.arms]


PRESETS = {
    "ablation_table2_shape": ExperimentPreset("ablation_table2_shape", arms=("bce", "se", "sesa"),
                                              shift=True),
    "beta_sweep": ExperimentPreset("beta_sweep", betas=(0.5, 1.0, 2.0)),
    "dpm_variant_sweep": ExperimentPreset(
        "dpm_variant_sweep",
        variants=("exp", "expit", "exp_normalized", "expit_normalized"),
        metrics=("l2", "hellinger"),
    ),
}


def _run_point(job):
    point, train_cases, test_cases, base, kind, arch, shift = job
    cfg = point.config(base)
    return run_arm(point.arm, point.seed, train_cases, test_cases, cfg, kind, arch, shift)


def run_points(points, train_cases, test_cases, base, kind="conv", arch=None, shift=False, jobs=1):
    """Train and evaluate every sweep point; results come back in ``points`` order."""
    grid = [(p, train_cases, test_cases, base, kind, arch, shift) for p in points]
    if jobs <= 1:
        return [_run_point(j) for j in grid]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_point, grid))


def median_of(results, arm, metric):
    """Median over seeds of the per-run mean over test cases."""
    per_run = [statistics.fmean(getattr(r, metric) for r in res.reports)
               for res in results if res.arm == arm]
    return statistics.median(per_run)


def median_shift_drop(results, arm):
    per_run = [statistics.fmean(s.relative_drop for s in res.shift)
               for res in results if res.arm == arm]
    return statistics.median(per_run)


def report_rows(results):
    """Flatten run results into per-case metric rows with arm and seed."""
    rows = []
    for res in results:
        for rep in res.reports:
            rows.append((res.arm, res.seed, rep))
    return rows


__all__ = [
    "SHIFTS", "split_cases", "evaluate_outputs", "evaluate_model", "shift_mask", "surface_dice",
    "ShiftResult", "shift_robustness", "RunResult", "run_arm", "ablation", "median_of",
    "median_shift_drop", "report_rows", "MetricsReport", "SweepPoint", "ExperimentPreset",
    "PRESETS", "run_points",
]
