"""Validation experiments on synthetic data.

* hinge study: how well linear models (target-specific and projected) imitate
  a parametric rotation,
* self-consistency: aggregated posteriors of masked prior samples should
  recover the prior,
* leave-one-out partial reconstruction with nICP and MH.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .align import gpa, kabsch
from .inference import (LikelihoodConfig, PoseShapeParams, ReconstructOptions,
                        matrix_euler, pose_center, reconstruct)
from .mesh import DomainMask, TriangleMesh
from .model import LowRankGP, build_empirical, sample
from .posterior import regress_arrays
from .project import project_model, residual_pose_error
from .synthetic import (HingeConfig, SyntheticFamilyConfig, cut_mask, generate_family,
                        generate_hinge, hinge_arm_masks, hinge_parameters, random_rotation)

logger = logging.getLogger(__name__)

REGIONS = ("X", "Z", "Omega")


# --- hinge -------------------------------------------------------------------------

@dataclass
class HingeRow:
    phi: float
    variant: str
    angle_mean: float
    angle_std: float
    observed_arm_mean: float
    observed_arm_relerr: float
    predicted_arm_mean: float
    predicted_arm_relerr: float


@dataclass
class HingeReport:
    rows: list
    translation_residual: dict  # phi -> mean translation residual of the translation-only projection

    def get(self, phi, variant) -> HingeRow:
        return next(r for r in self.rows if r.variant == variant and math.isclose(r.phi, phi))


HINGE_VARIANTS = ("truth", "agnostic", "specific", "projected")


def _hinge_stats(points_list, cfg):
    p = np.array([hinge_parameters(pts, cfg.points_per_arm) for pts in points_list])
    L = cfg.arm_length
    return (float(p[:, 0].mean()), float(p[:, 0].std()), float(p[:, 1].mean()),
            float(np.mean(np.abs(p[:, 1] - L)) / L), float(p[:, 2].mean()),
            float(np.mean(np.abs(p[:, 2] - L)) / L))


def hinge_experiment(cfg: HingeConfig, phis, n_eval: int = 2000) -> HingeReport:
    """Compare linear models of the hinge against its parametric truth for each angle std."""
    rows = []
    residuals = {}
    for phi in phis:
        c = HingeConfig(cfg.arm_length, cfg.angle_mean, float(phi), cfg.points_per_arm,
                        cfg.n_shapes, cfg.seed, cfg.strip_width)
        fields, ref, _ = generate_hinge(c)
        X, _ = hinge_arm_masks(c)
        full = DomainMask.full(ref.n_vertices)
        rng = np.random.default_rng([cfg.seed, int(round(phi * 1e6))])
        truth = [ref.vertices + f for f in fields]
        rows.append(HingeRow(float(phi), "truth", *_hinge_stats(truth, c)))
        if phi == 0:
            for v in HINGE_VARIANTS[1:]:
                rows.append(HingeRow(float(phi), v, *_hinge_stats(truth, c)))
            residuals[float(phi)] = 0.0
            continue
        agnostic = build_empirical(gpa(fields, full, ref, rotations=True).fields, ref)
        models = {
            "agnostic": agnostic,
            "specific": build_empirical(gpa(fields, X, ref, rotations=True).fields, ref),
            "projected": project_model(agnostic, X, rotations=True),
        }
        for name, m in models.items():
            alphas = rng.standard_normal((n_eval, m.rank))
            pts = [ref.vertices + sample(m, a) for a in alphas]
            rows.append(HingeRow(float(phi), name, *_hinge_stats(pts, c)))
        trans_only = project_model(agnostic, X, rotations=False)
        residuals[float(phi)] = residual_pose_error(trans_only, X, 200, cfg.seed,
                                                    rotations=False).mean_translation
    return HingeReport(rows, residuals)


def export_hinge(report: HingeReport, path) -> None:
    names = list(HingeRow.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, n)) for n in names])


# --- self-consistency --------------------------------------------------------------

def symmetric_kl_to_standard(samples) -> float:
    """Symmetric KL between a Gaussian fitted to ``samples`` and N(0, I)."""
    x = np.asarray(samples, dtype=np.float64)
    d = x.shape[1]
    m = x.mean(axis=0)
    S = np.cov(x, rowvar=False).reshape(d, d)
    Sinv = np.linalg.inv(S)
    return float(0.5 * (np.trace(S) + np.trace(Sinv) + m @ m + m @ Sinv @ m - 2 * d))


@dataclass
class ConsistencyCurve:
    variant: str
    k: list
    kl: list


def consistency_models(fields, reference: TriangleMesh, mask: DomainMask, rotations=True):
    """Target-agnostic, target-specific and projected models from raw training fields."""
    full = DomainMask.full(reference.n_vertices)
    agnostic = build_empirical(gpa(fields, full, reference, rotations).fields, reference)
    specific = build_empirical(gpa(fields, mask, reference, rotations).fields, reference)
    projected = project_model(agnostic, mask, rotations)
    return {"agnostic": agnostic, "specific": specific, "projected": projected}


def self_consistency(model: LowRankGP, mask: DomainMask, rank: int, n_targets: int, seed: int = 0,
                     report_points=None, noise_sigma: float = 1.0, rotations: bool = True,
                     exact_prior: bool = False) -> ConsistencyCurve:
    """Aggregate one posterior draw per masked prior sample and track KL to N(0, I).

    Each target is aligned to the model mean on ``mask`` before regression, as
    is usual when reconstructing a partial observation.
    """
    if rank > model.rank:
        raise ValueError("rank exceeds model rank")
    m = model.truncate(rank)
    rng = np.random.default_rng(seed)
    idx = mask.indices
    mean_x = m.mean_shape()[idx]
    draws = np.empty((n_targets, rank))
    for k in range(n_targets):
        alpha = rng.standard_normal(rank)
        if exact_prior:
            draws[k] = rng.standard_normal(rank)
            continue
        pts = (m.reference.vertices + sample(m, alpha))[idx]
        if rotations:
            pts = kabsch(pts, mean_x).apply(pts)
        else:
            pts = pts - pts.mean(axis=0) + mean_x.mean(axis=0)
        post = regress_arrays(m, idx, pts, noise_sigma)
        draws[k] = post.sample(rng)
    points = report_points or [k for k in (10, 20, 50, 100, 200, 500, 1000) if k <= n_targets]
    ks, kls = [], []
    for k in points:
        if k < rank + 1:
            continue
        ks.append(int(k))
        kls.append(symmetric_kl_to_standard(draws[:k]))
    return ConsistencyCurve("", ks, kls)


# --- leave-one-out ------------------------------------------------------------------

@dataclass
class ReportRow:
    trial: int
    ratio: float
    method: str
    variant: str
    region: str
    mse: float
    mean_var: float


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def value(self, trial, ratio, method, variant, region, column="mse") -> float:
        for r in self.rows:
            if (r.trial == trial and math.isclose(r.ratio, ratio) and r.method == method
                    and r.variant == variant and r.region == region):
                return getattr(r, column)
        raise KeyError((trial, ratio, method, variant, region))

    def mean(self, ratio, method, variant, region, column="mse") -> float:
        vals = [getattr(r, column) for r in self.rows
                if math.isclose(r.ratio, ratio) and r.method == method
                and r.variant == variant and r.region == region]
        return float(np.mean(vals))


CSV_HEADER = ("trial", "ratio", "method", "variant", "region", "mse", "mean_var")


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def export_report(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_HEADER])


def read_report(path) -> ExperimentReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ReportRow(int(rec["trial"]), float(rec["ratio"]), rec["method"],
                                  rec["variant"], rec["region"], float(rec["mse"]),
                                  float(rec["mean_var"])))
    return ExperimentReport(rows)


def region_errors(recon: np.ndarray, truth: np.ndarray, variance, X: DomainMask):
    """(region, mse, mean_var) for X, Z = Omega - X and Omega."""
    d2 = ((recon - truth) ** 2).sum(axis=1)
    var = np.full(d2.shape, np.nan) if variance is None else np.asarray(variance)
    inside = X.to_bool(d2.size)
    out = []
    for region, sel in (("X", inside), ("Z", ~inside), ("Omega", np.ones_like(inside))):
        if np.any(sel):
            out.append((region, float(d2[sel].mean()), float(var[sel].mean())))
        else:
            out.append((region, float("nan"), float("nan")))
    return out


LOO_VARIANTS = ("agnostic", "specific", "projected", "projected_gt", "landmark")


@dataclass(frozen=True)
class LOOConfig:
    n_trials: int = 10
    iters: int = 150
    n_samples: int = 4000
    burn_in: int = 1000
    update_every_nicp: int = 25
    update_every_mh: int = 2000
    sigma: float = 1.0
    radius: float = 2.0
    init_translation_std: float = 2.0
    init_rotation_std: float = 0.1
    landmark_noise: float = 0.0
    n_landmarks: int = 4
    seed: int = 0
    threads: int = 1


def landmark_mask(reference: TriangleMesh, X: DomainMask, n: int = 4) -> DomainMask:
    """``n`` landmarks inside X: the observed vertices farthest along -principal axis, spread around."""
    from .synthetic import principal_axis
    axis = principal_axis(reference.vertices)
    pts = reference.vertices[X.indices]
    s = pts @ axis
    end = X.indices[s <= s.min() + 1e-9]
    if end.size < n:
        end = X.indices[np.argsort(s, kind="stable")[:max(n, 3)]]
    pick = end[np.linspace(0, end.size - 1, n).round().astype(int)]
    return DomainMask(np.unique(pick))


def landmark_gpa(fields, landmarks: DomainMask, reference: TriangleMesh, noise: float, rng,
                 max_iter: int = 100, tol: float = 1e-6):
    """GPA whose rigid transforms are estimated from (optionally noisy) landmark positions."""
    ref = reference.vertices
    idx = landmarks.indices
    shapes = [ref + f for f in fields]
    marks = [s[idx] + noise * rng.standard_normal((idx.size, 3)) for s in shapes]
    c_ref = ref[idx].mean(axis=0)
    mean = np.mean(marks, axis=0)
    mean = mean - mean.mean(axis=0) + c_ref
    transforms = None
    for _ in range(max_iter):
        transforms = [kabsch(m, mean) for m in marks]
        moved = [T.apply(m) for T, m in zip(transforms, marks)]
        new = np.mean(moved, axis=0)
        new = new - new.mean(axis=0) + c_ref
        done = np.abs(new - mean).max() < tol
        mean = new
        if done:
            break
    return [T.apply(s) - ref for T, s in zip(transforms, shapes)]


def _init_params(model: LowRankGP, target_pts_x, X: DomainMask, center, rng, cfg: LOOConfig):
    """Mean aligned to the target on X (true correspondence), plus pose noise."""
    src = model.mean_shape()[X.indices]
    T = kabsch(src, target_pts_x)
    R = T.rotation
    t = T.translation + T.center - center - R @ (T.center - center)
    noise_R = random_rotation(rng, cfg.init_rotation_std)
    R = noise_R @ R
    t = t + cfg.init_translation_std * rng.standard_normal(3)
    return PoseShapeParams(np.zeros(model.rank), matrix_euler(R), t)


def _loo_trial(family, trial: int, ratios, methods, variants, cfg: LOOConfig):
    ref = family.reference
    n = ref.n_vertices
    train = [f for i, f in enumerate(family.fields) if i != trial]
    truth = ref.vertices + family.fields[trial]
    full = DomainMask.full(n)
    agnostic = build_empirical(gpa(train, full, ref, rotations=True).fields, ref)
    lcfg = LikelihoodConfig(sigma=cfg.sigma)
    rows = []
    for ri, ratio in enumerate(ratios):
        X = cut_mask(ref, ratio)
        target = ref.with_vertices(truth).submesh(X)
        seq = np.random.SeedSequence([cfg.seed, trial, ri])
        init_rng, lm_rng, chain_seed = (np.random.default_rng(s) for s in seq.spawn(3))
        models = {}
        need = set(variants)
        if "specific" in need:
            models["specific"] = build_empirical(gpa(train, X, ref, rotations=True).fields, ref)
        if "landmark" in need:
            L = landmark_mask(ref, X, cfg.n_landmarks)
            models["landmark"] = build_empirical(
                landmark_gpa(train, L, ref, cfg.landmark_noise, lm_rng), ref)
        # One shared pose perturbation per (trial, ratio) keeps variants paired.
        noise_R = random_rotation(init_rng, cfg.init_rotation_std)
        noise_t = cfg.init_translation_std * init_rng.standard_normal(3)
        seed = int(chain_seed.integers(2 ** 31))
        for method in methods:
            for variant in variants:
                model = models.get(variant, agnostic)
                center = pose_center(model, X)
                src = model.mean_shape()[X.indices]
                T = kabsch(src, truth[X.indices])
                R = noise_R @ T.rotation
                t = (T.translation + T.center - center - T.rotation @ (T.center - center)) + noise_t
                init = PoseShapeParams(np.zeros(model.rank), matrix_euler(R), t)
                opts = ReconstructOptions(
                    mask=None if variant == "projected" and ratio < 1 else X,
                    project=variant in ("projected", "projected_gt"),
                    rotations=True,
                    update_every=cfg.update_every_nicp if method == "nicp" else cfg.update_every_mh,
                    iters=cfg.iters, n_samples=cfg.n_samples, burn_in=cfg.burn_in, seed=seed,
                    cfg=lcfg, radius=cfg.radius, init=init, center=center)
                summary = reconstruct(model, target, method, opts)
                for region, mse, var in region_errors(summary.map_shape, truth, summary.variance, X):
                    rows.append(ReportRow(trial, float(ratio), method, variant, region, mse, var))
    return rows


def leave_one_out(family_cfg: SyntheticFamilyConfig, observed_ratios, methods=("nicp", "mh"),
                  variants=("agnostic", "specific", "projected"), cfg: LOOConfig = LOOConfig()
                  ) -> ExperimentReport:
    """Hold out each of the first ``n_trials`` shapes, cut it and reconstruct it."""
    if family_cfg.n_shapes < 5:
        raise ValueError("leave-one-out needs at least 5 shapes")
    for v in variants:
        if v not in LOO_VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    family = generate_family(family_cfg)
    trials = range(min(cfg.n_trials, family_cfg.n_shapes))
    jobs = (delayed(_loo_trial)(family, t, list(observed_ratios), list(methods), list(variants), cfg)
            for t in trials)
    if cfg.threads > 1:
        results = Parallel(n_jobs=cfg.threads)(jobs)
    else:
        results = [fn(*a, **k) for fn, a, k in jobs]
    rows = [r for trial_rows in results for r in trial_rows]
    return ExperimentReport(rows)


# --- plots ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def write_svg(path, xs, series: dict, xlabel: str, ylabel: str, width=480, height=320) -> None:
    """Minimal line plot, one polyline per series."""
    xs = [float(x) for x in xs]
    ys = [float(y) for v in series.values() for y in v if np.isfinite(y)]
    pad = 50
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">{xlabel}</text>',
           f'<text x="14" y="{height / 2:.1f}" transform="rotate(-90 14 {height / 2:.1f})" '
           f'text-anchor="middle">{ylabel}</text>',
           f'<text x="{pad}" y="{height - pad + 16}" font-size="10">{x0:.3g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 16}" font-size="10" text-anchor="end">{x1:.3g}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, vals) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(x):.2f},{py(float(y)):.2f}" for x, y in zip(xs, vals) if np.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        out.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" font-size="10" '
                   f'fill="{color}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
