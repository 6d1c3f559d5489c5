"""
Data pipeline: ratings ingest, fixed-point filtering, item categories,
held-out splits with fold-in partitions and condition expansion.

Every function here is pure given its inputs and seed.
"""

import json
import logging
import math
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from cvaerec.core.exceptions import DataFormatError, DimensionError, EmptyDatasetError, SplitError
from cvaerec.schemas.run_config import DatasetConfig, SplitSpec
from cvaerec.utils.ndmath import RngStream

logger = logging.getLogger(__name__)

SPLIT_FORMAT_VERSION = 1
UNCONDITIONED = -1


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class InteractionMatrix:
    """Binary user x item implicit feedback with id maps"""
    matrix: sparse.csr_matrix
    user_ids: np.ndarray
    item_ids: np.ndarray

    def __post_init__(self):
        self.matrix = sparse.csr_matrix(self.matrix)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        self.matrix.data[:] = 1
        if self.matrix.shape != (len(self.user_ids), len(self.item_ids)):
            raise DimensionError(
                f"matrix shape {self.matrix.shape} does not match id maps ({len(self.user_ids)}, {len(self.item_ids)})"
            )

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def row(self, user: int) -> np.ndarray:
        start, end = self.matrix.indptr[user], self.matrix.indptr[user + 1]
        return self.matrix.indices[start:end]

    @property
    def rows(self) -> List[List[int]]:
        return [self.row(u).tolist() for u in range(self.n)]

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    @property
    def user_index(self) -> Dict[str, int]:
        return {uid: idx for idx, uid in enumerate(self.user_ids)}

    @property
    def item_index(self) -> Dict[str, int]:
        return {iid: idx for idx, iid in enumerate(self.item_ids)}


@dataclass
class ItemConditionMatrix:
    """Binary item x category membership"""
    membership: np.ndarray
    category_names: List[str]

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=bool)
        if self.membership.ndim != 2 or self.membership.shape[1] != len(self.category_names):
            raise DimensionError(
                f"membership shape {self.membership.shape} does not match {len(self.category_names)} categories"
            )

    @property
    def m(self) -> int:
        return self.membership.shape[0]

    @property
    def s(self) -> int:
        return self.membership.shape[1]

    @property
    def rows(self) -> List[List[int]]:
        return [np.flatnonzero(r).tolist() for r in self.membership]

    def column(self, category: int) -> np.ndarray:
        return self.membership[:, category]

    def categories_of(self, item: int) -> List[str]:
        return [self.category_names[j] for j in np.flatnonzero(self.membership[item])]

    def index_of(self, label: str) -> int:
        try:
            return self.category_names.index(label)
        except ValueError:
            raise KeyError(f"unknown category '{label}'; valid labels: {', '.join(self.category_names)}")


@dataclass(frozen=True)
class ConditionVector:
    """s-dimensional binary condition with at most one active category"""
    s: int
    active: Optional[int] = None

    def __post_init__(self):
        if self.active is not None and not 0 <= self.active < self.s:
            raise ValueError(f"active category {self.active} out of range for s={self.s}")

    @property
    def is_conditioned(self) -> bool:
        return self.active is not None

    @property
    def index(self) -> int:
        return UNCONDITIONED if self.active is None else self.active

    @classmethod
    def from_index(cls, s: int, index: int) -> "ConditionVector":
        return cls(s, None if index < 0 else int(index))

    def to_array(self, dtype: Any = np.float64) -> np.ndarray:
        c = np.zeros(self.s, dtype=dtype)
        if self.active is not None:
            c[self.active] = 1.0
        return c


@dataclass(frozen=True)
class TrainingExample:
    user: int
    condition: ConditionVector


@dataclass
class ExampleSet:
    """Columnar list of (user, condition index) training examples; -1 = unconditioned"""
    users: np.ndarray
    conditions: np.ndarray
    s: int

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[TrainingExample]:
        for u, c in zip(self.users, self.conditions):
            yield TrainingExample(int(u), ConditionVector.from_index(self.s, int(c)))

    def n_conditioned(self) -> int:
        return int(np.count_nonzero(self.conditions >= 0))


@dataclass
class HeldoutUsers:
    """Held-out users with per-user fold-in / held-out partitions (rows aligned with users)"""
    users: np.ndarray
    foldin: sparse.csr_matrix
    heldout: sparse.csr_matrix

    def __len__(self) -> int:
        return len(self.users)

    def foldin_row(self, position: int) -> np.ndarray:
        return self.foldin.indices[self.foldin.indptr[position]:self.foldin.indptr[position + 1]]

    def heldout_row(self, position: int) -> np.ndarray:
        return self.heldout.indices[self.heldout.indptr[position]:self.heldout.indptr[position + 1]]

    def full_rows(self) -> sparse.csr_matrix:
        full = (self.foldin + self.heldout).tocsr()
        full.data[:] = 1
        return full


@dataclass
class SplitResult:
    train_users: np.ndarray
    validation: HeldoutUsers
    test: HeldoutUsers


@dataclass
class SplitBundle:
    """Everything a preprocessed split directory holds"""
    user_ids: np.ndarray
    item_ids: np.ndarray
    conditions: ItemConditionMatrix
    train: sparse.csr_matrix
    train_users: np.ndarray
    validation: HeldoutUsers
    test: HeldoutUsers
    examples: ExampleSet
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.item_ids)

    @property
    def s(self) -> int:
        return self.conditions.s


# ---------------------------------------------------------------------------
# Ratings
# ---------------------------------------------------------------------------

RATING_COLUMNS = ["user_id", "item_id", "value", "timestamp"]
_LINE_RE = re.compile(r"line (\d+)")


def _is_number(text: str) -> bool:
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False


def _first_line_width(path: str, delimiter: str) -> int:
    try:
        first = pd.read_csv(path, sep=delimiter, header=None, nrows=1, dtype=str,
                            keep_default_na=False, skip_blank_lines=False)
    except pd.errors.ParserError:
        # a later, longer line; the full read reports it
        return 0
    return first.shape[1]


def _read_ratings_frame(path: str, delimiter: str) -> pd.DataFrame:
    """Raw string fields plus an ``extra`` column that must stay empty"""
    try:
        # with explicit names pandas would turn surplus leading fields into an index
        width = _first_line_width(path, delimiter)
        if width > len(RATING_COLUMNS):
            raise DataFormatError(f"{width} fields, expected at most {len(RATING_COLUMNS)}", path=path, line=1)
        return pd.read_csv(
            path, sep=delimiter, header=None, names=RATING_COLUMNS + ["extra"], index_col=False,
            dtype=str, keep_default_na=False, skip_blank_lines=False,
        )
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        line = int(match.group(1)) if match else None
        raise DataFormatError(f"unexpected number of fields ({e})", path=path, line=line) from e
    except pd.errors.EmptyDataError as e:
        raise EmptyDatasetError(f"ratings file is empty: {path}") from e


def load_ratings(path: str, threshold: float, delimiter: str = ",") -> pd.DataFrame:
    """
    Read a ratings file and keep rows with value >= threshold, in file order.

    Returns a frame with columns user_id, item_id, value, timestamp, one row
    per rating. A header is detected by a non-numeric third field.
    """
    path = str(path)
    if not Path(path).exists():
        raise FileNotFoundError(f"ratings file not found: {path}")
    frame = _read_ratings_frame(path, delimiter)

    # rows with fewer fields come back as NaN
    frame = frame.fillna("")
    frame["line"] = np.arange(1, len(frame) + 1)
    surplus = frame["extra"] != ""
    if surplus.any():
        raise DataFormatError(f"more than {len(RATING_COLUMNS)} fields", path=path,
                              line=int(frame["line"][surplus].iloc[0]))
    blank = (frame["user_id"] == "") & (frame["item_id"] == "") & (frame["value"] == "")
    frame = frame[~blank]
    if frame.empty:
        raise EmptyDatasetError(f"ratings file is empty: {path}")

    if not _is_number(frame["value"].iloc[0]):
        logger.debug(f"Header detected in {path}: {frame.iloc[0].tolist()}")
        frame = frame.iloc[1:]

    missing = (frame["user_id"] == "") | (frame["item_id"] == "")
    if missing.any():
        raise DataFormatError("empty user or item id", path=path, line=int(frame["line"][missing].iloc[0]))

    values = pd.to_numeric(frame["value"], errors="coerce")
    bad = values.isna() | ~np.isfinite(values.fillna(0.0))
    if bad.any():
        line = int(frame["line"][bad].iloc[0])
        raise DataFormatError(f"rating '{frame['value'][bad].iloc[0]}' is not a finite number", path=path, line=line)

    stamps = pd.to_numeric(frame["timestamp"].where(frame["timestamp"] != ""), errors="coerce")
    bad_ts = stamps.isna() & (frame["timestamp"] != "")
    if bad_ts.any():
        line = int(frame["line"][bad_ts].iloc[0])
        raise DataFormatError(f"timestamp '{frame['timestamp'][bad_ts].iloc[0]}' is not an integer", path=path, line=line)

    ratings = pd.DataFrame({
        "user_id": frame["user_id"].str.strip(),
        "item_id": frame["item_id"].str.strip(),
        "value": values.astype(np.float64),
        "timestamp": stamps.astype("Int64"),
    })
    kept = ratings[ratings["value"] >= threshold].reset_index(drop=True)
    logger.info(f"Loaded {len(ratings):,} ratings from {path}, kept {len(kept):,} with value >= {threshold}")
    if kept.empty:
        raise EmptyDatasetError(f"no rating >= {threshold} in {path}")
    return kept


def filter_interactions(ratings: pd.DataFrame, min_user: int, min_item: int) -> InteractionMatrix:
    """
    Drop items with < min_item users and users with < min_user items until
    nothing changes, then re-index the survivors densely by sorted id.
    """
    if ratings is None or len(ratings) == 0:
        raise EmptyDatasetError("no ratings to filter")
    pairs = ratings[["user_id", "item_id"]].drop_duplicates()
    rounds = 0
    while True:
        rounds += 1
        before = len(pairs)
        item_counts = pairs.groupby("item_id").size()
        pairs = pairs[pairs["item_id"].isin(item_counts.index[item_counts >= min_item])]
        user_counts = pairs.groupby("user_id").size()
        pairs = pairs[pairs["user_id"].isin(user_counts.index[user_counts >= min_user])]
        if len(pairs) == before:
            break
    if pairs.empty:
        raise EmptyDatasetError(
            f"filtering with min_user={min_user}, min_item={min_item} removed every interaction"
        )

    user_ids, user_codes = np.unique(pairs["user_id"].to_numpy(dtype=str), return_inverse=True)
    item_ids, item_codes = np.unique(pairs["item_id"].to_numpy(dtype=str), return_inverse=True)
    matrix = sparse.csr_matrix(
        (np.ones(len(pairs), dtype=np.float32), (user_codes, item_codes)),
        shape=(len(user_ids), len(item_ids)),
    )
    result = InteractionMatrix(matrix, user_ids.astype(object), item_ids.astype(object))
    logger.info(
        f"Filtering converged after {rounds} round(s): {result.n:,} users, {result.m:,} items, "
        f"{result.nnz:,} interactions"
    )
    return result


# ---------------------------------------------------------------------------
# Item categories
# ---------------------------------------------------------------------------

def _split_labels(field_value: str) -> List[str]:
    return [label.strip() for label in str(field_value).split("|") if label.strip()]


def load_item_conditions(path: str, item_index: Dict[str, int], drop: Sequence[str] = (),
                         delimiter: str = ",", keep_top: Optional[int] = None) -> ItemConditionMatrix:
    """
    Read item -> pipe-separated categories. The first column is the item id and
    the last the label list; columns in between are ignored.
    """
    path = str(path)
    if not Path(path).exists():
        raise FileNotFoundError(f"item-category file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=delimiter, header=None, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = _LINE_RE.search(str(e))
        raise DataFormatError(f"unexpected number of fields ({e})", path=path,
                              line=int(match.group(1)) if match else None) from e
    except pd.errors.EmptyDataError as e:
        raise EmptyDatasetError(f"item-category file is empty: {path}") from e
    if frame.shape[1] < 2:
        raise DataFormatError("expected at least two columns: item_id, categories", path=path, line=1)

    ids = frame.iloc[:, 0].str.strip()
    labels = frame.iloc[:, -1].map(_split_labels)

    first_id = ids.iloc[0]
    if first_id not in item_index and len(frame) > 1:
        other_labels = set(label for row in labels.iloc[1:] for label in row)
        if not set(labels.iloc[0]) & other_labels:
            logger.debug(f"Header detected in {path}: {frame.iloc[0].tolist()}")
            ids, labels = ids.iloc[1:], labels.iloc[1:]

    dropped = set(drop)
    m = len(item_index)
    item_labels: Dict[int, set] = {}
    unresolved = 0
    for item_id, row_labels in zip(ids, labels):
        idx = item_index.get(item_id)
        if idx is None:
            unresolved += 1
            continue
        item_labels.setdefault(idx, set()).update(label for label in row_labels if label not in dropped)
    if unresolved:
        logger.warning(f"Skipped {unresolved:,} rows of {path} whose item id is not in the item index")
    if not item_labels:
        raise EmptyDatasetError(f"no item in {path} resolves against the item index")

    counts: Dict[str, int] = {}
    for row_labels in item_labels.values():
        for label in row_labels:
            counts[label] = counts.get(label, 0) + 1
    present = sorted(counts, key=lambda label: (-counts[label], label))
    if keep_top is not None and len(present) > keep_top:
        logger.info(f"Keeping the {keep_top} most populated of {len(present)} categories")
        present = present[:keep_top]
    names = sorted(present)
    column = {label: j for j, label in enumerate(names)}

    membership = np.zeros((m, len(names)), dtype=bool)
    for idx, row_labels in item_labels.items():
        for label in row_labels:
            j = column.get(label)
            if j is not None:
                membership[idx, j] = True
    missing = m - len(item_labels)
    if missing:
        logger.info(f"{missing:,} items have no entry in {path}; their category rows are empty")
    if not names:
        logger.warning(f"No category survives the drop-list in {path}")
    logger.info(f"Loaded {len(names)} categories for {len(item_labels):,} of {m:,} items")
    return ItemConditionMatrix(membership, names)


# ---------------------------------------------------------------------------
# Splits and condition expansion
# ---------------------------------------------------------------------------

def _foldin_count(n_items: int, fraction: float) -> int:
    n_fold = max(1, int(math.floor(fraction * n_items + 1e-9)))
    return min(n_fold, n_items - 1)


def _partition_users(matrix: InteractionMatrix, users: np.ndarray, fraction: float,
                     rng: RngStream) -> HeldoutUsers:
    fold_rows, fold_cols, held_rows, held_cols = [], [], [], []
    for position, user in enumerate(users):
        items = matrix.row(int(user))
        order = rng.permutation(len(items))
        n_fold = _foldin_count(len(items), fraction)
        fold = np.sort(items[order[:n_fold]])
        held = np.sort(items[order[n_fold:]])
        fold_rows.append(np.full(len(fold), position))
        fold_cols.append(fold)
        held_rows.append(np.full(len(held), position))
        held_cols.append(held)
    shape = (len(users), matrix.m)
    return HeldoutUsers(
        users=np.asarray(users, dtype=np.int64),
        foldin=_pairs_to_csr(fold_rows, fold_cols, shape),
        heldout=_pairs_to_csr(held_rows, held_cols, shape),
    )


def _pairs_to_csr(rows: List[np.ndarray], cols: List[np.ndarray], shape) -> sparse.csr_matrix:
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    csr = sparse.csr_matrix((np.ones(len(r), dtype=np.float32), (r, c)), shape=shape)
    csr.sort_indices()
    return csr


def split_heldout(matrix: InteractionMatrix, spec: SplitSpec) -> SplitResult:
    """
    Seeded disjoint train / validation / test users. Held-out users need at
    least two items; each is partitioned into fold-in (floor of
    foldin_fraction, at least 1) and held-out (the rest, at least 1).
    """
    n_val, n_test = spec.n_heldout_val, spec.n_heldout_test
    if n_val + n_test >= matrix.n:
        raise SplitError(f"{n_val} + {n_test} held-out users leave no training user out of {matrix.n}")
    eligible = np.flatnonzero(matrix.row_lengths() >= 2)
    if n_val + n_test > len(eligible):
        raise SplitError(
            f"only {len(eligible)} users have >= 2 items; cannot hold out {n_val} + {n_test}"
        )
    excluded = matrix.n - len(eligible)
    if excluded:
        logger.info(f"{excluded:,} users with < 2 items are not held-out candidates")

    rng = RngStream(spec.seed, "split")
    shuffled = eligible[rng.permutation(len(eligible))]
    val_users = np.sort(shuffled[:n_val])
    test_users = np.sort(shuffled[n_val:n_val + n_test])
    heldout = np.zeros(matrix.n, dtype=bool)
    heldout[val_users] = True
    heldout[test_users] = True
    train_users = np.flatnonzero(~heldout)

    result = SplitResult(
        train_users=train_users,
        validation=_partition_users(matrix, val_users, spec.foldin_fraction, rng.child("validation")),
        test=_partition_users(matrix, test_users, spec.foldin_fraction, rng.child("test")),
    )
    logger.info(f"Split: {len(train_users):,} train, {len(val_users):,} validation, {len(test_users):,} test users")
    return result


def expand_conditions(rows: Any, conditions: ItemConditionMatrix,
                      users: Optional[Iterable[int]] = None) -> ExampleSet:
    """
    One unconditioned example per user plus one per category covered by the
    user's items. ``rows`` is an InteractionMatrix or a csr matrix indexed by user.
    """
    csr = rows.matrix if isinstance(rows, InteractionMatrix) else sparse.csr_matrix(rows)
    if csr.shape[1] != conditions.m:
        raise DimensionError(f"interaction matrix has {csr.shape[1]} items, category matrix {conditions.m}")
    user_array = np.arange(csr.shape[0]) if users is None else np.asarray(list(users), dtype=np.int64)
    if conditions.s:
        covered = np.asarray((csr[user_array] @ conditions.membership.astype(np.float32)) > 0)
    else:
        covered = np.zeros((len(user_array), 0), dtype=bool)

    out_users: List[np.ndarray] = []
    out_conditions: List[np.ndarray] = []
    for position, user in enumerate(user_array):
        cats = np.flatnonzero(covered[position])
        out_users.append(np.full(len(cats) + 1, user, dtype=np.int64))
        out_conditions.append(np.concatenate(([UNCONDITIONED], cats)).astype(np.int64))
    if not out_users:
        return ExampleSet(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), conditions.s)
    return ExampleSet(np.concatenate(out_users), np.concatenate(out_conditions), conditions.s)


def unconditioned_examples(users: np.ndarray) -> ExampleSet:
    """Plain Mult-VAE training set: one example per user, no condition"""
    users = np.asarray(users, dtype=np.int64)
    return ExampleSet(users.copy(), np.full(len(users), UNCONDITIONED, dtype=np.int64), 0)


# ---------------------------------------------------------------------------
# Split directory I/O
# ---------------------------------------------------------------------------

def _write_pairs(path: Path, rows: np.ndarray, cols: np.ndarray, names=("user_index", "item_index")) -> None:
    pd.DataFrame({names[0]: rows, names[1]: cols}).to_csv(path, index=False, lineterminator="\n")


def _csr_pairs(csr: sparse.csr_matrix, row_labels: np.ndarray):
    coo = csr.tocoo()
    order = np.lexsort((coo.col, coo.row))
    return row_labels[coo.row[order]], coo.col[order]


def write_split(directory: str, matrix: InteractionMatrix, conditions: ItemConditionMatrix,
                split: SplitResult, examples: ExampleSet, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Write the split files and the split manifest (no timestamps, so reruns are byte-identical)"""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)

    pd.DataFrame({"user_index": np.arange(matrix.n), "user_id": matrix.user_ids}).to_csv(
        out / "users.csv", index=False, lineterminator="\n")
    pd.DataFrame({"item_index": np.arange(matrix.m), "item_id": matrix.item_ids}).to_csv(
        out / "items.csv", index=False, lineterminator="\n")
    pd.DataFrame({"category_index": np.arange(conditions.s), "label": conditions.category_names}).to_csv(
        out / "categories.csv", index=False, lineterminator="\n")
    items, cats = np.nonzero(conditions.membership)
    _write_pairs(out / "item_categories.csv", items, cats, ("item_index", "category_index"))

    train_rows = matrix.matrix[split.train_users]
    _write_pairs(out / "train.csv", *_csr_pairs(train_rows, split.train_users))
    for name, part in (("validation", split.validation), ("test", split.test)):
        _write_pairs(out / f"{name}_foldin.csv", *_csr_pairs(part.foldin, part.users))
        _write_pairs(out / f"{name}_heldout.csv", *_csr_pairs(part.heldout, part.users))
    _write_pairs(out / "examples.csv", examples.users, examples.conditions, ("user_index", "condition_index"))

    manifest = {
        "format_version": SPLIT_FORMAT_VERSION,
        "n": matrix.n,
        "m": matrix.m,
        "s": conditions.s,
        "interactions": matrix.nnz,
        "density_percent": round(100.0 * matrix.nnz / (matrix.n * matrix.m), 4),
        "category_names": list(conditions.category_names),
        "n_train_users": int(len(split.train_users)),
        "n_validation_users": int(len(split.validation)),
        "n_test_users": int(len(split.test)),
        "n_training_examples": int(len(examples)),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _read_pairs(path: Path, a: str, b: str):
    frame = pd.read_csv(path, dtype={a: np.int64, b: np.int64})
    return frame[a].to_numpy(), frame[b].to_numpy()


def _read_heldout(directory: Path, name: str, m: int) -> HeldoutUsers:
    fu, fi = _read_pairs(directory / f"{name}_foldin.csv", "user_index", "item_index")
    hu, hi = _read_pairs(directory / f"{name}_heldout.csv", "user_index", "item_index")
    users = np.unique(np.concatenate([fu, hu]))
    position = {int(u): p for p, u in enumerate(users)}
    shape = (len(users), m)
    to_pos = np.vectorize(position.__getitem__, otypes=[np.int64])
    fold = _pairs_to_csr([to_pos(fu)] if len(fu) else [], [fi] if len(fi) else [], shape)
    held = _pairs_to_csr([to_pos(hu)] if len(hu) else [], [hi] if len(hi) else [], shape)
    return HeldoutUsers(users=users.astype(np.int64), foldin=fold, heldout=held)


def read_split(directory: str) -> SplitBundle:
    src = Path(directory)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no split manifest in {src}; run preprocess first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != SPLIT_FORMAT_VERSION:
        raise DataFormatError(f"split format {manifest.get('format_version')} is not supported", path=str(manifest_path))

    users = pd.read_csv(src / "users.csv", dtype={"user_id": str}, keep_default_na=False)
    items = pd.read_csv(src / "items.csv", dtype={"item_id": str}, keep_default_na=False)
    categories = pd.read_csv(src / "categories.csv", dtype={"label": str}, keep_default_na=False)
    m, n = len(items), len(users)

    membership = np.zeros((m, len(categories)), dtype=bool)
    ci, cc = _read_pairs(src / "item_categories.csv", "item_index", "category_index")
    membership[ci, cc] = True
    conditions = ItemConditionMatrix(membership, categories["label"].tolist())

    tu, ti = _read_pairs(src / "train.csv", "user_index", "item_index")
    train = _pairs_to_csr([tu], [ti], (n, m))
    eu, ec = _read_pairs(src / "examples.csv", "user_index", "condition_index")

    validation = _read_heldout(src, "validation", m)
    test = _read_heldout(src, "test", m)
    heldout = np.zeros(n, dtype=bool)
    heldout[validation.users] = True
    heldout[test.users] = True

    return SplitBundle(
        user_ids=users["user_id"].to_numpy(dtype=object),
        item_ids=items["item_id"].to_numpy(dtype=object),
        conditions=conditions,
        train=train,
        train_users=np.flatnonzero(~heldout),
        validation=validation,
        test=test,
        examples=ExampleSet(eu, ec, conditions.s),
        manifest=manifest,
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

class DataService:
    """Runs the preprocessing pipeline for one dataset config"""

    def __init__(self, dataset: DatasetConfig, split: SplitSpec):
        self.dataset = dataset
        self.split = split

    def check_inputs(self) -> None:
        for label, path in (("ratings", self.dataset.ratings_path), ("categories", self.dataset.categories_path)):
            if not path:
                raise FileNotFoundError(f"dataset.{label}_path is not configured")
            if not Path(path).exists():
                raise FileNotFoundError(f"{label} file not found: {path}")

    def preprocess(self, out_dir: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Full pipeline into ``out_dir``. Files are written to a sibling staging
        directory first so a failure leaves no partial output.
        """
        self.check_inputs()
        ratings = load_ratings(self.dataset.ratings_path, self.dataset.rating_threshold, self.dataset.delimiter)
        matrix = filter_interactions(ratings, self.split.min_user_interactions, self.split.min_item_interactions)
        conditions = load_item_conditions(
            self.dataset.categories_path, matrix.item_index, self.dataset.drop_categories,
            self.dataset.category_delimiter, self.dataset.keep_top_categories,
        )
        split = split_heldout(matrix, self.split)
        examples = expand_conditions(matrix, conditions, split.train_users)
        val_examples = expand_conditions(split.validation.full_rows(), conditions)
        test_examples = expand_conditions(split.test.full_rows(), conditions)

        manifest_extra = {
            "dataset": self.dataset.name,
            "rating_threshold": self.dataset.rating_threshold,
            "drop_categories": list(self.dataset.drop_categories),
            "split": self.split.model_dump(),
            "seed": self.split.seed,
            "n_validation_examples": int(len(val_examples)),
            "n_test_examples": int(len(test_examples)),
        }
        manifest_extra.update(extra or {})

        target = Path(out_dir)
        staging = target.with_name(target.name + ".partial")
        if staging.exists():
            shutil.rmtree(staging)
        try:
            manifest = write_split(str(staging), matrix, conditions, split, examples, manifest_extra)
        except Exception:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        if target.exists():
            shutil.rmtree(target)
        staging.rename(target)
        logger.info(
            f"Preprocessed {self.dataset.name}: n={manifest['n']:,} m={manifest['m']:,} s={manifest['s']} "
            f"interactions={manifest['interactions']:,} training examples={manifest['n_training_examples']:,}"
        )
        return manifest
