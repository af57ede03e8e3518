"""Layout and identity metrics for reconstructed programs, plus the RBF
ground-plane warp.

These are stand-ins for render-based perceptual scores: objects are matched
one-to-one on 3D location, then compared on position, height, rotation and
retrieved identity.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lu_factor, lu_solve
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from wildcode import rotmath
from wildcode.assets import AssetIndex
from wildcode.scenelang import SCALAR_SETTERS, SceneProgram

DEFAULT_MAX_DIST = 5.0
RIDGE = 1e-8
REFINE_STEPS = 20
EXT = np.longdouble  # 80-bit on x86 Linux; plain float64 elsewhere


class SingularSystemWarning(UserWarning):
    pass


@dataclass
class MatchReport:
    pairs: list[tuple[int, int]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]
    loc_error: list[float]
    rot_error: list[float | None]
    height_error: list[float]
    attribute_error: np.ndarray
    n_pred: int
    n_gt: int
    assignment_cost: float
    category_correct: list[bool] | None = None
    retrieval_top1: list[bool] | None = None
    retrieval_top5: list[bool] | None = None
    pred: SceneProgram | None = field(default=None, repr=False)
    gt: SceneProgram | None = field(default=None, repr=False)


def attribute_errors(pred: SceneProgram, gt: SceneProgram) -> np.ndarray:
    """Absolute error per scalar setter; sun rotation uses circular distance."""
    err = np.abs(pred.attributes.scalars() - gt.attributes.scalars())
    i = SCALAR_SETTERS.index("sun_rotation")
    err[i] = min(err[i] % 360.0, 360.0 - err[i] % 360.0)
    return err


def match_objects(pred: SceneProgram, gt: SceneProgram, max_dist: float = DEFAULT_MAX_DIST,
                  index: AssetIndex | None = None) -> MatchReport:
    n, m = len(pred.objects), len(gt.objects)
    pairs: list[tuple[int, int]] = []
    cost_total = 0.0
    if n and m:
        a = np.array([o.loc for o in pred.objects], dtype=np.float64)
        b = np.array([o.loc for o in gt.objects], dtype=np.float64)
        cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        cost_total = float(cost[rows, cols].sum())
        pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if cost[r, c] <= max_dist]
    used_p = {p for p, _ in pairs}
    used_g = {g for _, g in pairs}
    loc_err, rot_err, h_err = [], [], []
    for p, g in pairs:
        po, go = pred.objects[p], gt.objects[g]
        loc_err.append(float(np.linalg.norm(np.subtract(po.loc, go.loc))))
        h_err.append(abs(po.height - go.height))
        if po.rotation is not None and go.rotation is not None:
            rot_err.append(rotmath.geodesic_error(po.rotation, go.rotation))
        else:
            rot_err.append(None)
    report = MatchReport(
        pairs=pairs,
        unmatched_pred=[i for i in range(n) if i not in used_p],
        unmatched_gt=[j for j in range(m) if j not in used_g],
        loc_error=loc_err,
        rot_error=rot_err,
        height_error=h_err,
        attribute_error=attribute_errors(pred, gt),
        n_pred=n,
        n_gt=m,
        assignment_cost=cost_total,
        pred=pred,
        gt=gt,
    )
    if index is not None:
        fill_identity(report, index)
    return report


def _identity(appearance, index: AssetIndex, k: int = 5) -> list[tuple[int, str]]:
    """Ranked (asset_id, category) candidates for an appearance value."""
    if appearance is None:
        return []
    if isinstance(appearance, (int, np.integer)):
        cat = index.category_of(int(appearance))
        return [(int(appearance), cat)] if cat is not None else [(int(appearance), "")]
    if not np.any(appearance):
        return []
    out: list[tuple[int, str]] = []
    # over-fetch: several yaw bins of one asset can occupy the top ranks
    for entry, _ in index.query(appearance, k=k * 72):
        if all(entry.asset_id != a for a, _ in out):
            out.append((entry.asset_id, entry.category))
        if len(out) == k:
            break
    return out


def fill_identity(report: MatchReport, index: AssetIndex) -> MatchReport:
    cat_ok, top1, top5 = [], [], []
    for p, g in report.pairs:
        gt_id = _identity(report.gt.objects[g].appearance, index, k=1)
        cand = _identity(report.pred.objects[p].appearance, index, k=5)
        if not gt_id:
            raise ValueError("ground-truth appearance is unresolved")
        gid, gcat = gt_id[0]
        cat_ok.append(bool(cand) and cand[0][1] == gcat)
        top1.append(bool(cand) and cand[0][0] == gid)
        top5.append(any(a == gid for a, _ in cand[:5]))
    report.category_correct, report.retrieval_top1, report.retrieval_top5 = cat_ok, top1, top5
    return report


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else 0.0


def scene_metrics(reports, index: AssetIndex | None = None) -> dict:
    """Corpus summary; pooled over all matched pairs of all reports."""
    if isinstance(reports, MatchReport):
        reports = [reports]
    reports = list(reports)
    if index is not None:
        for r in reports:
            if r.category_correct is None:
                fill_identity(r, index)
    n_pred = sum(r.n_pred for r in reports)
    n_gt = sum(r.n_gt for r in reports)
    n_match = sum(len(r.pairs) for r in reports)

    def pooled(name):
        vals = [v for r in reports for v in (getattr(r, name) or [])]
        return vals

    attr = np.mean([r.attribute_error for r in reports], axis=0) if reports else np.zeros(len(SCALAR_SETTERS))
    out = {
        "n_scenes": len(reports),
        "n_pred": n_pred,
        "n_gt": n_gt,
        "n_matched": n_match,
        "precision": n_match / n_pred if n_pred else 1.0,
        "recall": n_match / n_gt if n_gt else 1.0,
        "loc_error": _mean(pooled("loc_error")),
        "rot_error": _mean(pooled("rot_error")),
        "height_error": _mean(pooled("height_error")),
        "attribute_mae": float(np.mean(attr)),
        "attribute_mae_by_field": {k: float(v) for k, v in zip(SCALAR_SETTERS, attr)},
    }
    if all(r.category_correct is not None for r in reports):
        out["category_top1"] = _mean(pooled("category_correct")) if n_match else 0.0
        out["retrieval_top1"] = _mean(pooled("retrieval_top1")) if n_match else 0.0
        out["retrieval_top5"] = _mean(pooled("retrieval_top5")) if n_match else 0.0
    return out


def normalized_attribute_mae(reports, ranges: dict) -> float:
    """Attribute MAE with each field divided by its sampling range width."""
    errs = np.array([r.attribute_error for r in reports])
    widths = np.array([ranges[k][1] - ranges[k][0] for k in SCALAR_SETTERS])
    return float((errs / widths).mean())


def feature_similarity(a, b) -> float:
    """Cosine similarity between two externally computed image feature vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- ground warp -----------------------------------------------------------------

@dataclass
class HeightField:
    xs: np.ndarray
    ys: np.ndarray
    z: np.ndarray
    centers: np.ndarray
    weights: np.ndarray
    bandwidth: float
    regularized: bool = False

    def __call__(self, x, y) -> np.ndarray:
        pts = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), -1).astype(EXT)
        d2 = ((pts[..., None, :] - self.centers.astype(EXT)) ** 2).sum(-1)
        return (np.exp(-d2 / (2 * EXT(self.bandwidth) ** 2)) @ self.weights).astype(np.float64)


def _grid_axes(centers: np.ndarray, grid):
    if isinstance(grid, int):
        lo, hi = centers.min(0), centers.max(0)
        pad = np.maximum((hi - lo) * 0.1, 1.0)
        return np.linspace(lo[0] - pad[0], hi[0] + pad[0], grid), np.linspace(lo[1] - pad[1], hi[1] + pad[1], grid)
    xs, ys = grid
    return np.asarray(xs, float), np.asarray(ys, float)


def warp_ground(control, grid=64, bandwidth: float | None = None) -> HeightField:
    """Gaussian-RBF heightfield through the control heights.

    ``control`` is a sequence of (x, y, height); ``grid`` is a resolution
    (square grid over the padded control bounding box) or explicit (xs, ys).
    The default bandwidth is the median pairwise control distance.
    """
    pts = np.asarray(control, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one control point")
    if bandwidth is not None and bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    centers, inv = np.unique(pts[:, :2], axis=0, return_inverse=True)
    inv = inv.ravel()
    heights = np.zeros(len(centers))
    regularized = False
    for k in range(len(centers)):
        hs = pts[inv == k, 2]
        if np.ptp(hs) > 0:
            regularized = True
        heights[k] = hs.mean()
    if bandwidth is None:
        bandwidth = float(np.median(pdist(centers))) if len(centers) > 1 else 1.0
        if bandwidth <= 0:
            bandwidth = 1.0
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    kmat = np.exp(-d2 / (2 * bandwidth ** 2))
    if regularized:
        warnings.warn("duplicate control locations with different heights; ridge-regularized",
                      SingularSystemWarning, stacklevel=2)
        kmat = kmat + RIDGE * np.eye(len(centers))
    try:
        fac = cho_factor(kmat)
        solve = lambda r: cho_solve(fac, r)
    except LinAlgError:
        fac = lu_factor(kmat)
        solve = lambda r: lu_solve(fac, r)
    # wide kernels leave the system badly conditioned (cond ~1e12 is common),
    # so refine with residuals and weights carried in extended precision
    cx = centers.astype(EXT)
    kmat_x = np.exp(-((cx[:, None, :] - cx[None, :, :]) ** 2).sum(-1) / (2 * EXT(bandwidth) ** 2))
    if regularized:
        kmat_x = kmat_x + EXT(RIDGE) * np.eye(len(centers), dtype=EXT)
    h_x = heights.astype(EXT)
    weights = solve(heights).astype(EXT)
    for _ in range(REFINE_STEPS):
        resid = h_x - kmat_x @ weights
        if np.abs(resid).max() <= 1e-15 * max(1.0, float(np.abs(heights).max())):
            break
        weights = weights + solve(resid.astype(np.float64)).astype(EXT)
    xs, ys = _grid_axes(centers, grid)
    field_ = HeightField(xs, ys, np.empty(0), centers, weights, bandwidth, regularized)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    field_.z = field_(gx, gy)
    return field_


def ground_control_points(p: SceneProgram) -> np.ndarray:
    """(x, y, height) control points from object bases: optical x and -z span
    the ground, optical y is the ground height."""
    return np.array([(o.loc[0], -o.loc[2], o.loc[1]) for o in p.objects], dtype=np.float64).reshape(-1, 3)
