"""
Change-point detection for piecewise-constant regression coefficients.

Rows are grouped into blocks of b_n days and the coefficients are
reparameterized as block increments theta_1 (level), theta_2, ... so a plain
lasso on the increments acts as a fused lasso on the levels. Nonzero
increments are thinned by a 2-means/BIC hard threshold, grouped with the gap
statistic, and each group is resolved to a single day by exhaustive search.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from piecewise_sir import settings
from piecewise_sir.core_model import SegmentParams, SirDesign, ols, standardize
from piecewise_sir.exceptions import InsufficientData

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockPartition:
    """Block boundaries r_0 = 1 < r_1 < ... < r_k = n + 1 over day rows."""

    block_size: int
    boundaries: Tuple[int, ...]

    @classmethod
    def for_rows(cls, n_rows, block_size):
        if block_size < 2:
            raise ValueError('block size must be at least 2')
        if n_rows < 2 * block_size:
            raise InsufficientData('{} rows cannot hold two blocks of {} days'.format(n_rows, block_size))
        n_blocks = n_rows // block_size
        boundaries = tuple(1 + i * block_size for i in range(n_blocks)) + (n_rows + 1,)
        return cls(block_size, boundaries)

    @property
    def n_blocks(self):
        return len(self.boundaries) - 1

    @property
    def n_rows(self):
        return self.boundaries[-1] - 1

    def start_day(self, block):
        """First day of a 1-based block index."""
        return self.boundaries[block - 1]

    def block_of(self, day):
        """1-based block containing a day."""
        return int(np.searchsorted(self.boundaries, day, side='right'))

    def row_blocks(self):
        """0-based block index of every row."""
        return np.repeat(np.arange(self.n_blocks), np.diff(self.boundaries))

    def head(self, n_blocks):
        """Partition of the first n_blocks blocks, used by validation folds."""
        return BlockPartition(self.block_size, self.boundaries[:n_blocks + 1])


def block_design(design, partition):
    """Stacked lower-triangular block design of shape (2n, k*d): row t in
    block i carries X_t in every column block up to i."""
    n, _, d = design.x.shape
    k = partition.n_blocks
    mask = (np.arange(k)[None, :] <= partition.row_blocks()[:, None]).astype(float)
    big = design.x[:, :, None, :] * mask[:, None, :, None]
    return big.reshape(2 * n, k * d)


@dataclass(frozen=True)
class ThetaEstimate:
    theta: np.ndarray
    lambda_: float
    iterations: int
    converged: bool

    @property
    def levels(self):
        """Per-block coefficient level, the cumulative sum of increments."""
        return np.cumsum(self.theta, axis=0)

    def level_through(self, block):
        return self.theta[:block].sum(axis=0)

    def jumps(self):
        v = np.sum(self.theta ** 2, axis=1)
        v[0] = 0.0
        return v

    def to_dict(self):
        return {'theta': self.theta.tolist(), 'lambda': self.lambda_,
                'iterations': self.iterations, 'converged': self.converged}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data['theta'], dtype=float), float(data['lambda']),
                   int(data['iterations']), bool(data['converged']))


class _LassoProblem(object):
    """Block fused lasso for one design/partition pair, solved with the
    scikit-learn coordinate descent on the stacked block design."""

    def __init__(self, design, partition):
        self.partition = partition
        self.n_rows = len(design)
        self.n_coef = design.n_coef
        Y, _ = design.stacked()
        self.X = block_design(design, partition)
        self.Y = Y
        self.corr = self.X.T @ self.Y / self.n_rows

    @property
    def lambda_max(self):
        return float(np.max(np.abs(self.corr)))

    def solve(self, lam, start=None, tol=settings.SOLVER_TOL, max_sweeps=settings.SOLVER_MAX_SWEEPS):
        if lam == 0:
            coef = np.linalg.lstsq(self.X, self.Y, rcond=None)[0]
            sweeps, converged = 0, True
        else:
            # scikit-learn scales the squared loss by 1/(2 * stacked rows) = 1/(4n)
            model = Lasso(alpha=lam / 2.0, fit_intercept=False, precompute=True, tol=tol,
                          max_iter=int(max_sweeps), warm_start=start is not None)
            if start is not None:
                model.coef_ = np.array(start, dtype=float)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', ConvergenceWarning)
                model.fit(self.X, self.Y)
            coef = model.coef_
            sweeps = int(model.n_iter_)
            converged = sweeps < max_sweeps
        if not converged:
            logger.warning('coordinate descent stopped after %d sweeps at lambda=%.3g without converging',
                           sweeps, lam)
        theta = np.asarray(coef, dtype=float).reshape(self.partition.n_blocks, self.n_coef)
        return ThetaEstimate(theta, float(lam), sweeps, converged)


def lambda_max(design, partition):
    """Smallest penalty at which every increment is zero."""
    return _LassoProblem(design, partition).lambda_max


def block_fused_lasso(design, partition, lam, tol=settings.SOLVER_TOL,
                      max_sweeps=settings.SOLVER_MAX_SWEEPS, start=None):
    """Minimize (1/2n)|Y - X Theta|^2 + lam |Theta|_1 over block increments."""
    if lam < 0:
        raise ValueError('lambda must be nonnegative')
    return _LassoProblem(design, partition).solve(lam, start, tol, max_sweeps)


def lambda_grid(lam_max, grid_size, min_ratio=settings.LAMBDA_MIN_RATIO):
    """Descending log-spaced grid over [min_ratio * lam_max, lam_max]."""
    if grid_size < 2:
        raise ValueError('grid size must be at least 2')
    if lam_max <= 0:
        return np.zeros(grid_size)
    return np.geomspace(lam_max, lam_max * min_ratio, grid_size)


def lambda_path_and_cv(design, partition, grid_size=settings.LAMBDA_GRID_SIZE,
                       cv_fraction=settings.CV_FRACTION, tol=settings.SOLVER_TOL,
                       max_sweeps=settings.SOLVER_MAX_SWEEPS):
    """
    Pick lambda by rolling-origin validation over the trailing blocks: each
    validation block is predicted by the level fitted on all blocks before it.
    Ties go to the larger lambda.
    """
    grid = lambda_grid(lambda_max(design, partition), grid_size)
    k = partition.n_blocks
    n_folds = min(k - 1, max(1, int(round(cv_fraction * k))))
    errors = np.zeros(len(grid))
    for block in range(k - n_folds, k):
        train_end = partition.boundaries[block]
        valid_end = partition.boundaries[block + 1]
        train = design.subset(1, train_end)
        valid = design.subset(train_end, valid_end)
        problem = _LassoProblem(train, partition.head(block))
        start = None
        for i, lam in enumerate(grid):
            estimate = problem.solve(lam, start, tol, max_sweeps)
            start = estimate.theta.reshape(-1)
            resid = valid.y - valid.predict(estimate.theta.sum(axis=0))
            errors[i] += float(np.sum(resid ** 2))
    best = errors.min()
    chosen = int(np.flatnonzero(errors <= best + 1e-12 * max(1.0, abs(best)))[0])
    logger.debug('lambda grid %s, validation errors %s, chosen %.4g', grid, errors, grid[chosen])
    return float(grid[chosen])


def lambda_path(design, partition, grid, tol=settings.SOLVER_TOL, max_sweeps=settings.SOLVER_MAX_SWEEPS):
    """Warm-started fits along a descending grid."""
    problem = _LassoProblem(design, partition)
    path = []
    start = None
    for lam in grid:
        estimate = problem.solve(lam, start, tol, max_sweeps)
        start = estimate.theta.reshape(-1)
        path.append(estimate)
    return path


def _bic(design, partition, blocks):
    """BIC of the least-squares fit with a coefficient change at the start of
    every block in blocks. The lasso also shrinks the level, so the
    thresholded theta itself is not scored."""
    starts = sorted(partition.start_day(block) for block in blocks)
    rss = sum(ols(design.subset(start, end)).rss for start, end in segment_bounds(len(design), starts))
    n2 = 2 * len(design)
    rss = max(float(rss) / n2, np.finfo(float).tiny)
    return n2 * np.log(rss) + design.n_coef * (len(blocks) + 1) * np.log(n2)


def two_means(values):
    """1-D 2-means with centers started at min and max. Returns a boolean
    mask of the members of the larger-center group."""
    values = np.asarray(values, dtype=float).reshape(-1, 1)
    init = np.array([[values.min()], [values.max()]])
    km = KMeans(n_clusters=2, init=init, n_init=1).fit(values)
    large = int(np.argmax(km.cluster_centers_[:, 0]))
    return km.labels_ == large


@dataclass(frozen=True)
class ThresholdResult:
    blocks: Tuple[int, ...]
    bic_trace: Tuple[float, ...]

    def candidates(self, partition):
        return tuple(partition.start_day(block) for block in self.blocks)


def hard_threshold(theta, design, partition):
    """
    Grow the set J of change blocks by repeatedly 2-means clustering the
    jumps |theta_k|^2 of the blocks outside J and adding the large group,
    while the BIC of the piecewise least-squares refit keeps decreasing.
    """
    jumps = theta.jumps()
    selected = set()
    bic_old = _bic(design, partition, selected)
    trace = [bic_old]
    while True:
        remaining = np.array([b for b in range(1, partition.n_blocks + 1) if b not in selected])
        if len(remaining) < 2:
            break
        values = jumps[remaining - 1]
        if values.max() == values.min():
            break
        large = remaining[two_means(values)]
        proposal = selected | {int(b) for b in large if b != 1}
        if proposal == selected:
            break
        bic_new = _bic(design, partition, proposal)
        trace.append(bic_new)
        if bic_new - bic_old >= 0:
            break
        selected, bic_old = proposal, bic_new
    logger.debug('hard threshold kept blocks %s, BIC trace %s', sorted(selected), trace)
    return ThresholdResult(tuple(sorted(selected)), tuple(trace))


def _dispersion(points, n_clusters, floor):
    points = points.reshape(-1, 1)
    if n_clusters >= len(points):
        return floor, np.arange(len(points))
    init = np.quantile(points[:, 0], (np.arange(n_clusters) + 0.5) / n_clusters).reshape(-1, 1)
    km = KMeans(n_clusters=n_clusters, init=init, n_init=1).fit(points)
    return max(float(km.inertia_), floor), km.labels_


def _reference_dispersion(points, n_clusters, floor):
    """Within-cluster sum of squares of a sorted 1-D reference draw, from a
    single Lloyd run started at the within-draw quantiles."""
    if n_clusters >= len(points):
        return floor
    if n_clusters == 1:
        return max(float(np.sum((points - points.mean()) ** 2)), floor)
    init = np.quantile(points, (np.arange(n_clusters) + 0.5) / n_clusters)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore')
        centers, labels = kmeans2(points.reshape(-1, 1), init.reshape(-1, 1), minit='matrix')
    return max(float(np.sum((points - centers[labels, 0]) ** 2)), floor)


def _contiguous_groups(points, labels):
    groups = [[points[0]]]
    for prev, point, label, prev_label in zip(points, points[1:], labels[1:], labels):
        if label == prev_label:
            groups[-1].append(point)
        else:
            groups.append([point])
    return groups


def gap_statistic(points, max_clusters, floor, draws, rng):
    """Number of clusters by the gap statistic with a uniform reference over
    the range of the points. Returns (k, gaps, s_k)."""
    k_max = min(len(points), max_clusters)
    log_w = np.array([np.log(_dispersion(points, k, floor)[0]) for k in range(1, k_max + 1)])
    lo, hi = points.min(), points.max()
    ref_log_w = np.empty((draws, k_max))
    for b in range(draws):
        reference = np.sort(rng.uniform(lo, hi, size=len(points)))
        for k in range(1, k_max + 1):
            ref_log_w[b, k - 1] = np.log(_reference_dispersion(reference, k, floor))
    gaps = ref_log_w.mean(axis=0) - log_w
    s_k = np.sqrt(1.0 + 1.0 / draws) * ref_log_w.std(axis=0)
    for k in range(1, k_max):
        if gaps[k - 1] >= gaps[k] - s_k[k]:
            return k, gaps, s_k
    return k_max, gaps, s_k


def cluster_candidates(candidates, block_size, draws=settings.GAP_REFERENCE_DRAWS,
                       max_clusters=settings.GAP_MAX_CLUSTERS, seed=settings.DEFAULT_SEED):
    """
    Group candidate days into clusters with 1-D K-means, the number of
    clusters chosen by the gap statistic. Clusters no more than one block
    apart are merged afterwards.
    """
    points = np.sort(np.asarray(candidates, dtype=float))
    if len(points) == 0:
        return ()
    if len(points) == 1:
        return ((int(points[0]),),)
    floor = len(points) * block_size ** 2 / 12.0
    rng = np.random.default_rng(seed)
    k, gaps, _ = gap_statistic(points, max_clusters, floor, draws, rng)
    _, labels = _dispersion(points, k, floor)
    groups = _contiguous_groups(points, labels)
    merged = [groups[0]]
    for group in groups[1:]:
        if group[0] - merged[-1][-1] <= block_size:
            merged[-1] = merged[-1] + group
        else:
            merged.append(group)
    logger.debug('gap statistic chose %d clusters (gaps %s), %d after merging', k, gaps, len(merged))
    return tuple(tuple(int(p) for p in group) for group in merged)


def _local_level(theta, upper_block):
    return theta.level_through(max(1, upper_block))


def _search_windows(clusters, partition):
    b = partition.block_size
    windows = []
    for i, cluster in enumerate(clusters):
        lo, hi = cluster[0] - b, cluster[-1] + b
        if len(cluster) == 1:
            left, right = lo, hi
        else:
            left, right = cluster[0], cluster[-1]
        if i > 0:
            mid = (clusters[i - 1][-1] + cluster[0]) // 2
            lo, left = max(lo, mid), max(left, mid - 1)
        if i + 1 < len(clusters):
            mid = (cluster[-1] + clusters[i + 1][0]) // 2
            hi, right = min(hi, mid), min(right, mid)
        windows.append([lo, hi, left, right])
    return windows


def exhaustive_refine(design, clusters, theta, partition, raw_design=None):
    """
    Resolve every cluster to one day s in its open window (l, u) by
    minimizing the two-segment squared error over the cluster's data window
    with the local fused-lasso levels on either side. Ties take the smallest
    s. Segments between the final points are refit by least squares on
    raw_design (the scaled design when omitted).
    """
    n = len(design)
    blocks = [tuple(partition.block_of(day) for day in cluster) for cluster in clusters]
    bounds = [(1,)] + blocks + [(partition.n_blocks,)]
    points = []
    clipped = 0
    for i, (lo, hi, left, right) in enumerate(_search_windows(clusters, partition)):
        before = _local_level(theta, (max(bounds[i]) + min(bounds[i + 1])) // 2)
        after = _local_level(theta, (max(bounds[i + 1]) + min(bounds[i + 2])) // 2)
        if lo < 1 or hi > n + 1 or left + 1 < 2 or right - 1 > n:
            clipped += 1
            logger.warning('search window (%d, %d) around cluster %s clipped to the data range',
                           left, right, list(clusters[i]))
        lo, hi = max(lo, 1), min(hi, n + 1)
        first, last = max(left + 1, lo + 1, 2), min(right - 1, hi - 1, n)
        if first > last:
            first = last = min(max(first, 2), n)
        rows = design.subset(lo, hi)
        err_before = np.sum((rows.y - rows.predict(before)) ** 2, axis=1)
        err_after = np.sum((rows.y - rows.predict(after)) ** 2, axis=1)
        cum_before = np.concatenate([[0.0], np.cumsum(err_before)])
        cum_after = np.concatenate([[0.0], np.cumsum(err_after)])
        candidates = np.arange(first, last + 1)
        split = np.clip(candidates - lo, 0, hi - lo)
        objective = cum_before[split] + (cum_after[-1] - cum_after[split])
        points.append(int(candidates[int(np.argmin(objective))]))
    refit = design if raw_design is None else raw_design
    segments = segments_from_points(refit, points) if refit.n_coef == 2 else ()
    return ChangePointResult(candidates=tuple(day for cluster in clusters for day in cluster),
                             clusters=tuple(tuple(c) for c in clusters),
                             final_points=tuple(points), segments=segments, clipped_windows=clipped)


def segment_bounds(n_rows, points):
    edges = [1] + list(points) + [n_rows + 1]
    return list(zip(edges[:-1], edges[1:]))


def segments_from_points(design, points):
    """Least-squares (beta, gamma) on each segment between change points."""
    points = sorted(int(p) for p in points)
    if any(not 1 < p <= len(design) for p in points) or len(set(points)) != len(points):
        raise ValueError('change points must be distinct days in 2..{}'.format(len(design)))
    segments = []
    for start, end in segment_bounds(len(design), points):
        fit = ols(design.subset(start, end))
        se = fit.se if np.all(np.isfinite(fit.se)) else (None, None)
        segments.append(SegmentParams(start, end, float(fit.coef[0]), float(fit.coef[1]),
                                      None if se[0] is None else float(se[0]),
                                      None if se[1] is None else float(se[1])))
    return tuple(segments)


@dataclass(frozen=True)
class ChangePointResult:
    candidates: Tuple[int, ...]
    clusters: Tuple[Tuple[int, ...], ...]
    final_points: Tuple[int, ...]
    segments: Tuple[SegmentParams, ...]
    lambda_: Optional[float] = None
    theta: Optional[ThetaEstimate] = field(default=None, compare=False)
    bic_trace: Tuple[float, ...] = ()
    clipped_windows: int = 0

    @property
    def n_breaks(self):
        return len(self.final_points)

    @property
    def converged(self):
        return self.theta is None or self.theta.converged

    def with_fit(self, lambda_, theta, bic_trace):
        return ChangePointResult(self.candidates, self.clusters, self.final_points, self.segments,
                                 lambda_, theta, tuple(bic_trace), self.clipped_windows)

    def to_dict(self):
        return {
            'candidates': list(self.candidates),
            'clusters': [list(c) for c in self.clusters],
            'final_points': list(self.final_points),
            'segments': [s.to_dict() for s in self.segments],
            'lambda': self.lambda_,
            'theta': None if self.theta is None else self.theta.to_dict(),
            'bic_trace': list(self.bic_trace),
            'clipped_windows': self.clipped_windows,
        }

    @classmethod
    def from_dict(cls, data):
        theta = data.get('theta')
        return cls(tuple(data['candidates']), tuple(tuple(c) for c in data['clusters']),
                   tuple(data['final_points']), tuple(SegmentParams.from_dict(s) for s in data['segments']),
                   data.get('lambda'), None if theta is None else ThetaEstimate.from_dict(theta),
                   tuple(data.get('bic_trace', ())), int(data.get('clipped_windows', 0)))


def no_change_result(design):
    segments = segments_from_points(design, ()) if design.n_coef == 2 else ()
    return ChangePointResult((), (), (), segments)


def detect_change_points(design, config):
    """
    Full detection on a raw design: standardize, choose lambda (cross
    validated unless config.lambda_ is set), block fused lasso, hard
    threshold, gap-statistic clustering, exhaustive search and refit.
    """
    partition = BlockPartition.for_rows(len(design), config.block_size)
    scaled, _ = standardize(design)
    if config.lambda_ is None:
        lam = lambda_path_and_cv(scaled, partition, config.lambda_grid_size, config.cv_fraction,
                                 config.solver_tol, config.solver_max_sweeps)
    else:
        lam = config.lambda_
    theta = block_fused_lasso(scaled, partition, lam, config.solver_tol, config.solver_max_sweeps)
    threshold = hard_threshold(theta, scaled, partition)
    candidates = threshold.candidates(partition)
    clusters = cluster_candidates(candidates, partition.block_size, config.gap_draws,
                                  config.gap_max_clusters, config.seed)
    if clusters:
        result = exhaustive_refine(scaled, clusters, theta, partition, raw_design=design)
    else:
        result = no_change_result(design)
    logger.info('lambda=%.4g, %d candidate blocks, %d change points at days %s',
                lam, len(candidates), result.n_breaks, list(result.final_points))
    return result.with_fit(lam, theta, threshold.bic_trace)
