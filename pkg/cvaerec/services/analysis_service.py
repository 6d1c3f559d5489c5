"""
Post-hoc analyses of a trained model: where target-category items land in the
ranking, top-k purity, latent export, PCA and per-category component centroids.

Analysis cases are (user, category) pairs whose input history contains an item
of the category. Nothing here writes to a checkpoint.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from cvaerec.core.exceptions import DimensionError, EmptyTargetError
from cvaerec.schemas.run_config import AnalysisConfig
from cvaerec.services.data_service import UNCONDITIONED, ItemConditionMatrix
from cvaerec.services.evaluation_service import Scorer, order_candidates
from cvaerec.utils.ndmath import RngStream

logger = logging.getLogger(__name__)

PCA_TOLERANCE = 1e-10
PCA_MAX_ITERATIONS = 100_000


@dataclass
class RankHistogram:
    bins: np.ndarray
    max_rank: int
    n_cases: int

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"rank": np.arange(1, self.max_rank + 1), "count": self.bins})

    def purity(self, k: Optional[int] = None) -> float:
        k = self.max_rank if k is None else k
        if k > self.max_rank:
            raise ValueError(f"k={k} exceeds histogram depth {self.max_rank}")
        if self.n_cases == 0:
            return 0.0
        return float(self.bins[:k].sum()) / (k * self.n_cases)


@dataclass
class LatentTable:
    users: np.ndarray
    conditions: np.ndarray
    mu: np.ndarray
    category_names: List[str]

    def __post_init__(self):
        if self.mu.ndim != 2 or self.mu.shape[0] != len(self.users) or len(self.users) != len(self.conditions):
            raise DimensionError(f"latent table rows disagree: {len(self.users)} users, mu {self.mu.shape}")

    @property
    def d(self) -> int:
        return self.mu.shape[1]

    @property
    def s(self) -> int:
        return len(self.category_names)

    def labels(self) -> List[str]:
        return ["(none)" if c < 0 else self.category_names[c] for c in self.conditions]

    def frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"user_index": self.users, "condition_index": self.conditions,
                              "condition": self.labels()})
        for j in range(self.d):
            frame[f"z{j + 1}"] = self.mu[:, j]
        return frame


@dataclass
class PcaResult:
    components: np.ndarray
    explained_variance: np.ndarray
    mean: np.ndarray
    projections: np.ndarray
    numbers: List[int] = field(default_factory=list)
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.numbers:
            self.numbers = list(range(1, len(self.explained_variance) + 1))

    @property
    def q(self) -> int:
        return len(self.explained_variance)

    def column(self, number: int) -> int:
        if number not in self.numbers:
            raise ValueError(f"component {number} not available; have {self.numbers}")
        return self.numbers.index(number)


@dataclass
class SeparationScore:
    inter_centroid: float
    intra_dispersion: float
    ratio: float
    n_categories: int


# ---------------------------------------------------------------------------
# Ranking distribution and purity
# ---------------------------------------------------------------------------

def analysis_cases(rows: sparse.csr_matrix, users: np.ndarray,
                   item_conditions: ItemConditionMatrix) -> List[Tuple[int, int]]:
    """(user, category) pairs whose history covers the category, user-major"""
    users = np.asarray(users, dtype=np.int64)
    if len(users) == 0 or item_conditions.s == 0:
        return []
    covered = np.asarray((rows[users] @ item_conditions.membership.astype(np.float32)) > 0)
    return [(int(u), int(c)) for u, row in zip(users, covered) for c in np.flatnonzero(row)]


def ranking_distribution(scorer: Scorer, rows: sparse.csr_matrix, users: np.ndarray,
                         item_conditions: ItemConditionMatrix, max_rank: int = 100,
                         filtered: bool = False, batch_size: int = 500) -> RankHistogram:
    """Per-position count of target-category items over all analysis cases"""
    cases = analysis_cases(rows, users, item_conditions)
    bins = np.zeros(max_rank, dtype=np.int64)
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        case_users = np.array([u for u, _ in chunk], dtype=np.int64)
        conditions = np.array([c for _, c in chunk], dtype=np.int64)
        history = rows[case_users].toarray()
        scores = np.asarray(scorer.score_batch(history, conditions, None), dtype=np.float64)
        for row, category in enumerate(conditions):
            member = item_conditions.column(int(category))
            allowed = history[row] == 0
            if filtered:
                allowed &= member
            order = order_candidates(scores[row], np.flatnonzero(allowed))[:max_rank]
            bins[:len(order)] += member[order]
    logger.info(f"Ranking distribution over {len(cases):,} cases, depth {max_rank}")
    return RankHistogram(bins, max_rank, len(cases))


def topk_purity(scorer: Scorer, rows: sparse.csr_matrix, users: np.ndarray,
                item_conditions: ItemConditionMatrix, k: int = 100, filtered: bool = False) -> float:
    """Share of top-k slots holding condition-satisfying items, over all analysis cases"""
    histogram = ranking_distribution(scorer, rows, users, item_conditions, k, filtered)
    if histogram.n_cases == 0:
        raise EmptyTargetError("no (user, category) analysis cases")
    return histogram.purity(k)


# ---------------------------------------------------------------------------
# Latent export
# ---------------------------------------------------------------------------

def sample_users(users: np.ndarray, n: int, seed: int) -> np.ndarray:
    users = np.asarray(users, dtype=np.int64)
    if n >= len(users):
        return np.sort(users)
    return np.sort(RngStream(seed, "sample").choice(users, size=n, replace=False))


def export_latents(model, rows: sparse.csr_matrix, users: np.ndarray, category_names: Sequence[str],
                   batch_size: int = 500) -> LatentTable:
    """mu for every user unconditioned and under each category, user-major"""
    users = np.asarray(users, dtype=np.int64)
    s = len(category_names)
    per_user = np.concatenate(([UNCONDITIONED], np.arange(s))).astype(np.int64)
    all_users = np.repeat(users, s + 1)
    all_conditions = np.tile(per_user, len(users))
    blocks = []
    for start in range(0, len(all_users), batch_size):
        batch_users = all_users[start:start + batch_size]
        ratings = rows[batch_users].toarray()
        blocks.append(model.latent_means(ratings, all_conditions[start:start + batch_size]))
    mu = np.vstack(blocks) if blocks else np.zeros((0, model.dims.d))
    return LatentTable(all_users, all_conditions, mu, list(category_names))


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------

def _sign_fix(axis: np.ndarray) -> np.ndarray:
    return -axis if axis[np.argmax(np.abs(axis))] < 0 else axis


def _top_eigenpairs(cov: np.ndarray, q: int, tol: float, max_iter: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Orthogonal (subspace) iteration on the full standard basis, re-orthonormalized
    by QR every step. Stops once every column satisfies ||C v - lambda v|| <=
    tol * trace(C); eigenpairs are then sorted by decreasing eigenvalue, so a
    column that locks onto a small eigenvector early cannot displace the top axis.
    """
    d = cov.shape[0]
    trace = float(np.trace(cov))
    threshold = tol * max(trace, np.finfo(np.float64).tiny)
    basis = np.eye(d)

    for _ in range(max_iter):
        image = cov @ basis
        values = np.einsum("ij,ij->j", basis, image)
        if np.all(np.linalg.norm(image - basis * values, axis=0) <= threshold):
            break
        basis, r = np.linalg.qr(image)
        # positive diagonal of R keeps each column's sign from flipping between steps
        basis = basis * np.where(np.diag(r) < 0.0, -1.0, 1.0)
    else:
        logger.warning(f"PCA subspace iteration did not converge in {max_iter} iterations")
        values = np.einsum("ij,ij->j", basis, cov @ basis)

    order = np.argsort(-values, kind="stable")[:q]
    keep = [int(j) for j in order if values[j] > threshold]
    if not keep:
        return np.zeros((0, d)), np.zeros(0)
    axes = np.vstack([_sign_fix(basis[:, j]) for j in keep])
    return axes, values[keep]


def pca(data, q: int, tol: float = PCA_TOLERANCE, max_iter: int = PCA_MAX_ITERATIONS) -> PcaResult:
    """Top-q principal axes of a LatentTable (or a 2-D array) by deterministic subspace iteration"""
    x = np.asarray(data.mu if isinstance(data, LatentTable) else data, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"PCA needs a 2-D table, got shape {x.shape}")
    n, d = x.shape
    if q < 1 or q > d:
        raise ValueError(f"component count must be in [1, {d}], got {q}")
    if n < max(q, 2):
        raise ValueError(f"PCA of {q} components needs at least {max(q, 2)} rows, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    components, variances = _top_eigenpairs(cov, q, tol, max_iter)
    if len(variances) < q:
        logger.warning(f"Data has only {len(variances)} non-zero principal variance(s); requested {q}")
    return PcaResult(components, variances, mean, centered @ components.T)


def refine_pca(table: LatentTable, q: int, neutral_labels: Sequence[str] = (), drop_leading: int = 1,
               recompute: bool = True) -> PcaResult:
    """
    Drop rows conditioned on neutral categories and the leading ``drop_leading``
    axes. With ``recompute`` the remaining axes come from PCA of the residual;
    otherwise the original later axes are kept. Numbering stays that of the
    first q components, so component 5 is the same axis either way.
    """
    if drop_leading >= q:
        raise ValueError(f"cannot drop {drop_leading} of {q} components")
    neutral = set(neutral_labels)
    unknown = neutral - set(table.category_names)
    if unknown:
        logger.warning(f"Neutral categories not in the table: {', '.join(sorted(unknown))}")
    keep = np.array([label not in neutral for label in table.labels()], dtype=bool)
    rows = np.flatnonzero(keep)
    x = table.mu[rows]
    full = pca(x, q)
    if drop_leading == 0:
        full.rows = rows
        return full

    if not recompute:
        return PcaResult(full.components[drop_leading:], full.explained_variance[drop_leading:], full.mean,
                         full.projections[:, drop_leading:], list(range(drop_leading + 1, full.q + 1)), rows)

    leading = full.components[:drop_leading]
    centered = x - full.mean
    residual = centered - (centered @ leading.T) @ leading
    rest = pca(residual + full.mean, q - drop_leading)
    return PcaResult(rest.components, rest.explained_variance, full.mean, rest.projections,
                     list(range(drop_leading + 1, drop_leading + rest.q + 1)), rows)


def component_report(result: PcaResult, table: LatentTable, pairs: Sequence[Tuple[int, int]]) -> pd.DataFrame:
    """Per-category centroid of the projected rows for each (component, component) pair"""
    rows = np.arange(len(table.users)) if result.rows is None else result.rows
    labels = np.array(table.labels(), dtype=object)[rows]
    conditions = table.conditions[rows]
    records = []
    for a, b in pairs:
        ia, ib = result.column(a), result.column(b)
        for condition in np.unique(conditions):
            selected = conditions == condition
            records.append({
                "pair": f"{a}-{b}",
                "component_x": a,
                "component_y": b,
                "condition_index": int(condition),
                "condition": labels[selected][0],
                "x": float(result.projections[selected, ia].mean()),
                "y": float(result.projections[selected, ib].mean()),
                "n_rows": int(selected.sum()),
            })
    return pd.DataFrame.from_records(records)


def latent_separation(table: LatentTable) -> SeparationScore:
    """Mean distance between category centroids over mean distance of rows to their centroid"""
    conditioned = table.conditions >= 0
    categories = np.unique(table.conditions[conditioned])
    if len(categories) < 2:
        raise ValueError("latent separation needs at least two categories")
    centroids, spreads = [], []
    for category in categories:
        points = table.mu[table.conditions == category]
        centroid = points.mean(axis=0)
        centroids.append(centroid)
        spreads.append(float(np.linalg.norm(points - centroid, axis=1).mean()))
    centroids = np.vstack(centroids)
    diffs = centroids[:, None, :] - centroids[None, :, :]
    distances = np.linalg.norm(diffs, axis=-1)
    upper = distances[np.triu_indices(len(categories), k=1)]
    inter = float(upper.mean())
    intra = float(np.mean(spreads))
    ratio = inter / intra if intra > 0 else float("inf")
    return SeparationScore(inter, intra, ratio, len(categories))


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

class AnalysisService:
    """Runs one analysis against a model and writes its files under out_dir"""

    def __init__(self, model, rows: sparse.csr_matrix, users: np.ndarray, item_conditions: ItemConditionMatrix,
                 config: AnalysisConfig, out_dir: str, seed: int = 42, filtered: bool = False):
        self.model = model
        self.rows = rows
        self.users = np.asarray(users, dtype=np.int64)
        self.item_conditions = item_conditions
        self.config = config
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.filtered = filtered

    def _write(self, frame: pd.DataFrame, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / name
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        logger.info(f"Wrote {path}")
        return path

    def ranking(self) -> RankHistogram:
        histogram = ranking_distribution(self.model, self.rows, self.users, self.item_conditions,
                                         self.config.max_rank, self.filtered)
        self._write(histogram.frame(), "ranking_distribution.csv")
        return histogram

    def purity(self) -> float:
        value = topk_purity(self.model, self.rows, self.users, self.item_conditions,
                            self.config.purity_k, self.filtered)
        self._write(pd.DataFrame([{"k": self.config.purity_k, "purity": value}]), "purity.csv")
        return value

    def latents(self) -> Tuple[LatentTable, SeparationScore]:
        sampled = sample_users(self.users, self.config.n_latent_users, self.seed)
        table = export_latents(self.model, self.rows, sampled, self.item_conditions.category_names)
        self._write(table.frame(), "latents.csv")
        score = latent_separation(table)
        self._write(pd.DataFrame([asdict(score)]), "latent_separation.csv")
        logger.info(f"Latent separation ratio {score.ratio:.3f} "
                    f"(inter {score.inter_centroid:.4f}, intra {score.intra_dispersion:.4f})")
        return table, score

    def pca(self) -> Dict[str, pd.DataFrame]:
        table, _ = self.latents()
        cfg = self.config
        result = refine_pca(table, cfg.pca_components, cfg.neutral_categories,
                            cfg.drop_leading_components, cfg.recompute)
        self._write(pd.DataFrame({
            "component": result.numbers, "explained_variance": result.explained_variance,
        }), "pca_components.csv")
        reports = {}
        report = component_report(result, table, cfg.pairs)
        for (a, b), group in report.groupby(["component_x", "component_y"], sort=False):
            self._write(group.reset_index(drop=True), f"component_report_{a}_{b}.csv")
            reports[f"{a}-{b}"] = group
        return reports
