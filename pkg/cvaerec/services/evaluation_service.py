"""
Ranking and metrics.

Three protocols are supported:

* ``normal``       one unconditioned case per held-out user, target = held-out items
* ``conditioned``  one case per (user, category) whose held-out set contains an
                   item of that category; target = held-out items of the category
* ``total``        both, user by user (normal case first)

Rankings exclude the user's fold-in items. Ties are broken by ascending item
index. In filtered mode (the Mult-VAE baseline) conditioned cases rank only the
items that satisfy the condition.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cvaerec.core.exceptions import EmptyTargetError
from cvaerec.schemas.reports import MetricSummary
from cvaerec.schemas.run_config import EvalProtocol
from cvaerec.services.data_service import (
    UNCONDITIONED, ConditionVector, HeldoutUsers, ItemConditionMatrix,
)

logger = logging.getLogger(__name__)

OrderLike = Union["RankedList", np.ndarray, Sequence[int]]


class Scorer(Protocol):
    def score_batch(self, foldin: np.ndarray, conditions: np.ndarray,
                    positions: Optional[np.ndarray] = None) -> np.ndarray:
        ...


@dataclass
class RankedList:
    user: int
    condition: ConditionVector
    item_order: np.ndarray
    excluded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.item_order)

    def top(self, k: int) -> np.ndarray:
        return self.item_order[:k]


@dataclass
class EvalCase:
    position: int
    user: int
    condition: int
    target: np.ndarray


@dataclass
class EvaluationResult:
    summaries: List[MetricSummary]
    cases: pd.DataFrame


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _order_of(ranked: OrderLike) -> np.ndarray:
    if isinstance(ranked, RankedList):
        return ranked.item_order
    return np.asarray(ranked, dtype=np.int64)


def _target_of(heldout) -> np.ndarray:
    target = np.unique(np.asarray(list(heldout) if isinstance(heldout, (set, frozenset)) else heldout, dtype=np.int64))
    if target.size == 0:
        raise EmptyTargetError("held-out set is empty")
    return target


def recall_at_k(ranked: OrderLike, heldout, k: int) -> float:
    """|top-k ∩ heldout| / min(k, |heldout|)"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    target = _target_of(heldout)
    hits = np.count_nonzero(np.isin(_order_of(ranked)[:k], target))
    return hits / min(k, len(target))


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked: OrderLike, heldout, k: int) -> float:
    """Binary-relevance nDCG truncated at k"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    target = _target_of(heldout)
    top = _order_of(ranked)[:k]
    hits = np.isin(top, target)
    dcg = float(np.sum(_discounts(len(top))[hits]))
    idcg = float(np.sum(_discounts(min(k, len(target)))))
    return dcg / idcg


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------

def order_candidates(scores: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidates by descending score; equal scores keep ascending item order"""
    candidates = np.sort(np.asarray(candidates, dtype=np.int64))
    return candidates[np.argsort(-scores[candidates], kind="stable")]


def _condition_vector(condition, s: int) -> ConditionVector:
    if isinstance(condition, ConditionVector):
        return condition
    return ConditionVector.from_index(s, UNCONDITIONED if condition is None else int(condition))


def rank_cvae(model, foldin: np.ndarray, condition=None, user: int = -1) -> RankedList:
    """Rank every item not in the fold-in set, with the condition fed to the encoder"""
    foldin = np.asarray(foldin).reshape(-1)
    cond = _condition_vector(condition, model.dims.s)
    scores = model.predict_scores(foldin, cond.index if model.dims.s else None)
    excluded = np.flatnonzero(foldin)
    candidates = np.setdiff1d(np.arange(len(foldin)), excluded, assume_unique=True)
    return RankedList(user, cond, order_candidates(scores, candidates), excluded, scores)


def rank_filtered_baseline(model, foldin: np.ndarray, condition, item_conditions: ItemConditionMatrix,
                           user: int = -1) -> RankedList:
    """Unconditioned scores ranked only over the items satisfying the condition"""
    foldin = np.asarray(foldin).reshape(-1)
    cond = _condition_vector(condition, item_conditions.s)
    scores = model.predict_scores(foldin, None)
    excluded = np.flatnonzero(foldin)
    pool = np.arange(len(foldin)) if not cond.is_conditioned else np.flatnonzero(item_conditions.column(cond.index))
    candidates = np.setdiff1d(pool, excluded)
    if candidates.size == 0:
        logger.warning(f"No candidate items for user {user} under condition {cond.index}; skipping")
    return RankedList(user, cond, order_candidates(scores, candidates), excluded, scores)


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

def build_cases(heldout: HeldoutUsers, item_conditions: Optional[ItemConditionMatrix], kind: str) -> List[EvalCase]:
    if kind not in ("total", "normal", "conditioned"):
        raise ValueError(f"unknown protocol '{kind}'")
    cases: List[EvalCase] = []
    membership = item_conditions.membership if item_conditions is not None else None
    for position, user in enumerate(heldout.users):
        held = heldout.heldout_row(position)
        if held.size == 0:
            continue
        if kind in ("normal", "total"):
            cases.append(EvalCase(position, int(user), UNCONDITIONED, held.copy()))
        if kind in ("conditioned", "total") and membership is not None and membership.shape[1]:
            covered = membership[held]
            for category in np.flatnonzero(covered.any(axis=0)):
                cases.append(EvalCase(position, int(user), int(category), held[covered[:, category]]))
    return cases


class OracleScorer:
    """Scores held-out targets above everything else; every metric comes out 1.0"""

    def __init__(self, heldout: HeldoutUsers, item_conditions: Optional[ItemConditionMatrix] = None):
        self.heldout = heldout
        self.item_conditions = item_conditions

    def score_batch(self, foldin: np.ndarray, conditions: np.ndarray,
                    positions: Optional[np.ndarray] = None) -> np.ndarray:
        if positions is None:
            raise ValueError("OracleScorer needs case positions")
        scores = np.zeros(foldin.shape, dtype=np.float64)
        for row, (position, condition) in enumerate(zip(positions, conditions)):
            held = self.heldout.heldout_row(int(position))
            scores[row, held] = 1.0
            if condition >= 0 and self.item_conditions is not None:
                scores[row, held[self.item_conditions.membership[held, condition]]] = 2.0
        return scores


def _summaries(frame: pd.DataFrame, protocol: EvalProtocol, method: str) -> List[MetricSummary]:
    rows = []
    for metric, ks in (("recall", protocol.ks_recall), ("ndcg", protocol.ks_ndcg)):
        for k in ks:
            values = frame[f"{metric}@{k}"].to_numpy(dtype=np.float64)
            n = len(values)
            stderr = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
            rows.append(MetricSummary(
                method=method, protocol=protocol.kind, metric=metric, k=k,
                mean=float(np.clip(np.mean(values), 0.0, 1.0)), stderr=stderr, n_cases=n,
            ))
    return rows


def evaluate(scorer: Scorer, heldout: HeldoutUsers, item_conditions: Optional[ItemConditionMatrix],
             protocol: EvalProtocol, filtered: bool = False, method: str = "C-VAE",
             batch_size: int = 500) -> EvaluationResult:
    """
    Mean and standard error of every configured metric over the protocol's cases.
    Cases are scored in fixed-order batches.
    """
    cases = build_cases(heldout, item_conditions, protocol.kind)
    if not cases:
        raise EmptyTargetError(f"no evaluation cases for protocol '{protocol.kind}'")

    records = []
    skipped = 0
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        positions = np.array([c.position for c in chunk], dtype=np.int64)
        conditions = np.array([c.condition for c in chunk], dtype=np.int64)
        foldin = heldout.foldin[positions].toarray()
        scores = np.asarray(scorer.score_batch(foldin, conditions, positions), dtype=np.float64)

        for row, case in enumerate(chunk):
            allowed = foldin[row] == 0
            if filtered and case.condition >= 0:
                allowed &= item_conditions.column(case.condition)
            candidates = np.flatnonzero(allowed)
            if candidates.size == 0:
                skipped += 1
                continue
            order = order_candidates(scores[row], candidates)
            record = {"user_index": case.user, "condition_index": case.condition, "n_target": len(case.target)}
            for k in protocol.ks_recall:
                record[f"recall@{k}"] = recall_at_k(order, case.target, k)
            for k in protocol.ks_ndcg:
                record[f"ndcg@{k}"] = ndcg_at_k(order, case.target, k)
            records.append(record)

    if skipped:
        logger.warning(f"{skipped} case(s) had no candidate items and were skipped")
    if not records:
        raise EmptyTargetError(f"every case was skipped for protocol '{protocol.kind}'")
    frame = pd.DataFrame.from_records(records)
    summaries = _summaries(frame, protocol, method)
    logger.info(f"{method} [{protocol.kind}] over {len(frame):,} cases: "
                + ", ".join(f"{s.label}={s.mean:.4f}" for s in summaries))
    return EvaluationResult(summaries, frame)


def validation_score(model, heldout: HeldoutUsers, item_conditions: Optional[ItemConditionMatrix],
                     kind: str = "conditioned", k: int = 100) -> float:
    """Mean nDCG@k used for model selection during training"""
    protocol = EvalProtocol(kind=kind, ks_recall=[], ks_ndcg=[k])
    return evaluate(model, heldout, item_conditions, protocol).summaries[0].mean


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def summaries_frame(summaries: Sequence[MetricSummary]) -> pd.DataFrame:
    columns = ["method", "protocol", "metric", "k", "mean", "stderr", "n_cases"]
    return pd.DataFrame([s.model_dump() for s in summaries], columns=columns)


def format_table(summaries: Sequence[MetricSummary]) -> str:
    """Methods as rows, protocol x metric as columns, 'mean ± stderr' cells"""
    if not summaries:
        return ""
    frame = summaries_frame(summaries)
    frame["column"] = [f"{s.protocol} {s.label}" for s in summaries]
    frame["cell"] = [f"{s.mean:.3f} ± {s.stderr:.3f}" for s in summaries]
    column_order = list(dict.fromkeys(frame["column"]))
    method_order = list(dict.fromkeys(frame["method"]))
    table = frame.pivot(index="method", columns="column", values="cell").reindex(
        index=method_order, columns=column_order).fillna("-")
    return table.to_string()


def write_reports(out_dir: str, summaries: Sequence[MetricSummary],
                  cases: Optional[Dict[str, pd.DataFrame]] = None,
                  category_names: Optional[Sequence[str]] = None,
                  user_ids: Optional[np.ndarray] = None) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics_csv": out / "metrics.csv", "metrics_txt": out / "metrics.txt"}
    summaries_frame(summaries).to_csv(paths["metrics_csv"], index=False, lineterminator="\n", float_format="%.10g")
    paths["metrics_txt"].write_text(format_table(summaries) + "\n", encoding="utf-8")

    if cases:
        frames = []
        for method, frame in cases.items():
            frame = frame.copy()
            frame.insert(0, "method", method)
            if category_names is not None:
                frame["condition"] = [
                    "" if c < 0 else category_names[c] for c in frame["condition_index"]
                ]
            if user_ids is not None:
                frame["user_id"] = user_ids[frame["user_index"].to_numpy()]
            frames.append(frame)
        paths["cases_csv"] = out / "cases.csv"
        pd.concat(frames, ignore_index=True).to_csv(
            paths["cases_csv"], index=False, lineterminator="\n", float_format="%.10g")
    return paths


# ---------------------------------------------------------------------------
# Recommendation
# ---------------------------------------------------------------------------

def read_history(path: str) -> List[str]:
    """Item ids, one per line; an 'item_id' header row is allowed"""
    frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, usecols=[0])
    ids = [value.strip() for value in frame[0].tolist() if value.strip()]
    if ids and ids[0].lower() == "item_id":
        ids = ids[1:]
    return ids


def recommend(model, history: Sequence[str], item_ids: np.ndarray, condition: Optional[int] = None,
              n: int = 10) -> List[Tuple[str, float]]:
    """Top-n (item id, score) pairs for a fold-in history, never repeating a history item"""
    if n <= 0:
        return []
    index = {str(item): i for i, item in enumerate(item_ids)}
    foldin = np.zeros(len(item_ids), dtype=model.dtype)
    unknown = [item for item in history if item not in index]
    if unknown:
        logger.warning(f"Skipping {len(unknown)} unknown item id(s): {', '.join(unknown[:5])}")
    for item in history:
        if item in index:
            foldin[index[item]] = 1.0
    ranked = rank_cvae(model, foldin, condition)
    top = ranked.top(n)
    return [(str(item_ids[i]), float(ranked.scores[i])) for i in top]
