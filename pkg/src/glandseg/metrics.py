"""Object-level evaluation: 50%-overlap F1, object Dice, object Hausdorff,
plus the contest-style rank-sum aggregation of six (metric x split) columns.

Conventions that the underlying benchmark leaves open are pinned here:
Dice/Hausdorff pair each object with the opposite map's maximal-intersection
object; objects with no overlap score Dice 0 and take the Hausdorff distance
to the opposite foreground (image diagonal when that is empty). Hausdorff is
computed over full object pixel sets with Euclidean pixel-center distances.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .core import InstanceMap, ValidationError, canonicalize_instances
from .dataio import DataError, load_instance_png

COLUMN_NAMES = ("f1_a", "f1_b", "dice_a", "dice_b", "hausdorff_a", "hausdorff_b")
HIGHER_BETTER = (True, True, True, True, False, False)


# ---------------------------------------------------------------------------
# object matching and the three criteria

@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, int], ...]   # (gt id, pred id, intersection px)
    tp: int
    fp: int
    fn: int


def _check_same_shape(gt: InstanceMap, pred: InstanceMap):
    if (gt.height, gt.width) != (pred.height, pred.width):
        raise ValidationError(
            f"instance maps differ in size: {(gt.height, gt.width)} vs "
            f"{(pred.height, pred.width)}"
        )


def _intersections(gt: InstanceMap, pred: InstanceMap):
    """Pixel-count matrix inter[i, j] for gt id i vs pred id j (0 = background)."""
    g = gt.data.astype(np.int64).ravel()
    p = pred.data.astype(np.int64).ravel()
    ng = int(g.max())
    npr = int(p.max())
    counts = np.bincount(g * (npr + 1) + p, minlength=(ng + 1) * (npr + 1))
    return counts.reshape(ng + 1, npr + 1)


def match_objects(gt: InstanceMap, pred: InstanceMap) -> MatchResult:
    """Greedy one-to-one matching; a pair qualifies when the prediction covers
    at least half the ground-truth object (inclusive). Larger intersections
    win; ties break to the lower gt id then lower pred id."""
    _check_same_shape(gt, pred)
    gt = canonicalize_instances(gt)
    pred = canonicalize_instances(pred)
    inter = _intersections(gt, pred)
    ng, npr = inter.shape[0] - 1, inter.shape[1] - 1
    g_areas = inter.sum(axis=1)

    candidates = []
    for i in range(1, ng + 1):
        for j in range(1, npr + 1):
            if 2 * inter[i, j] >= g_areas[i]:
                candidates.append((-int(inter[i, j]), i, j))
    candidates.sort()

    matched_g: set[int] = set()
    matched_p: set[int] = set()
    pairs = []
    for neg, i, j in candidates:
        if i in matched_g or j in matched_p:
            continue
        matched_g.add(i)
        matched_p.add(j)
        pairs.append((i, j, -neg))
    tp = len(pairs)
    return MatchResult(pairs=tuple(pairs), tp=tp, fp=npr - tp, fn=ng - tp)


def f1_score(match: MatchResult) -> float:
    precision = match.tp / (match.tp + match.fp) if match.tp + match.fp else 0.0
    recall = match.tp / (match.tp + match.fn) if match.tp + match.fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _best_overlap(inter_row: np.ndarray) -> tuple[int, int]:
    """(opposite id, intersection) of the maximal-intersection opposite object;
    id 0 when nothing overlaps. Ties break to the lower id."""
    if inter_row[1:].size == 0:
        return 0, 0
    j = int(np.argmax(inter_row[1:])) + 1
    best = int(inter_row[j])
    return (j, best) if best > 0 else (0, 0)


def object_dice(gt: InstanceMap, pred: InstanceMap) -> float:
    """Area-weighted two-directional object Dice."""
    _check_same_shape(gt, pred)
    gt = canonicalize_instances(gt)
    pred = canonicalize_instances(pred)
    inter = _intersections(gt, pred)
    ng, npr = inter.shape[0] - 1, inter.shape[1] - 1
    if ng == 0 and npr == 0:
        return 1.0
    if ng == 0 or npr == 0:
        return 0.0
    g_areas = inter.sum(axis=1)
    p_areas = inter.sum(axis=0)

    def direction(areas, opposite_areas, rows):
        total = areas[1:].sum()
        acc = 0.0
        for i in range(1, len(areas)):
            j, best = _best_overlap(rows(i))
            dice = 2.0 * best / (areas[i] + opposite_areas[j]) if j else 0.0
            acc += (areas[i] / total) * dice
        return acc

    gt_term = direction(g_areas, p_areas, lambda i: inter[i, :])
    pred_term = direction(p_areas, g_areas, lambda j: inter[:, j])
    return 0.5 * (gt_term + pred_term)


def _object_coords(inst: InstanceMap) -> list[np.ndarray]:
    """coords[i] = pixel coordinates of object i (index 0 = full foreground)."""
    data = inst.data.astype(np.int64)
    out = [np.argwhere(data > 0).astype(np.float64)]
    for i in range(1, int(data.max()) + 1):
        out.append(np.argwhere(data == i).astype(np.float64))
    return out


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two non-empty pixel coordinate sets."""
    d_ab = cKDTree(b).query(a)[0].max()
    d_ba = cKDTree(a).query(b)[0].max()
    return float(max(d_ab, d_ba))


def object_hausdorff(gt: InstanceMap, pred: InstanceMap) -> float:
    """Area-weighted two-directional object-level Hausdorff distance."""
    _check_same_shape(gt, pred)
    gt = canonicalize_instances(gt)
    pred = canonicalize_instances(pred)
    inter = _intersections(gt, pred)
    ng, npr = inter.shape[0] - 1, inter.shape[1] - 1
    if ng == 0 and npr == 0:
        return 0.0
    diagonal = float(np.hypot(gt.height - 1, gt.width - 1))
    g_areas = inter.sum(axis=1)
    p_areas = inter.sum(axis=0)
    g_coords = _object_coords(gt)
    p_coords = _object_coords(pred)

    def direction(areas, rows, own_coords, opp_coords):
        total = areas[1:].sum()
        if total == 0:
            return 0.0
        acc = 0.0
        for i in range(1, len(areas)):
            j, best = _best_overlap(rows(i))
            if j:
                dist = hausdorff_distance(own_coords[i], opp_coords[j])
            elif len(opp_coords[0]):
                dist = hausdorff_distance(own_coords[i], opp_coords[0])
            else:
                dist = diagonal
            acc += (areas[i] / total) * dist
        return acc

    gt_term = direction(g_areas, lambda i: inter[i, :], g_coords, p_coords)
    pred_term = direction(p_areas, lambda j: inter[:, j], p_coords, g_coords)
    return 0.5 * (gt_term + pred_term)


# ---------------------------------------------------------------------------
# score tables and rank sums

@dataclass(frozen=True)
class ScoreRow:
    method: str
    scores: tuple[float, ...]                    # six columns, COLUMN_NAMES order
    official_ranks: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.scores) != len(COLUMN_NAMES):
            raise ValidationError(
                f"row {self.method!r} needs {len(COLUMN_NAMES)} scores, "
                f"got {len(self.scores)}"
            )
        if self.official_ranks is not None and len(self.official_ranks) != len(COLUMN_NAMES):
            raise ValidationError(f"row {self.method!r}: need six ranks when supplied")


@dataclass(frozen=True)
class ScoreTable:
    rows: tuple[ScoreRow, ...]

    @property
    def has_official_ranks(self) -> bool:
        return all(r.official_ranks is not None for r in self.rows)


@dataclass(frozen=True)
class RankedTable:
    table: ScoreTable
    ranks: tuple[tuple[int, ...], ...]    # per row, COLUMN_NAMES order
    rank_sums: tuple[int, ...]
    from_official: bool


def competition_ranks(values, higher_better: bool) -> list[int]:
    """1-based ranks; tied values share the lower (better) rank."""
    ranks = []
    for v in values:
        better = sum(1 for u in values if (u > v if higher_better else u < v))
        ranks.append(1 + better)
    return ranks


def rank_sum(table: ScoreTable, use_official: bool | None = None) -> RankedTable:
    """Rank every column (F1/Dice descending, Hausdorff ascending) and sum per row.

    Rows carrying the benchmark's official ranks keep them (the published
    ranking includes competitors outside this table); pass
    ``use_official=False`` to force recomputation within the table.
    """
    if len(table.rows) < 2:
        raise ValidationError("rank_sum needs at least 2 rows")
    if use_official is None:
        use_official = table.has_official_ranks
    if use_official and not table.has_official_ranks:
        raise ValidationError("not every row carries official ranks")

    if use_official:
        ranks = tuple(r.official_ranks for r in table.rows)
    else:
        cols = []
        for c, higher in enumerate(HIGHER_BETTER):
            cols.append(competition_ranks([r.scores[c] for r in table.rows], higher))
        ranks = tuple(tuple(col[i] for col in cols) for i in range(len(table.rows)))
    sums = tuple(int(sum(r)) for r in ranks)
    return RankedTable(table=table, ranks=ranks, rank_sums=sums, from_official=use_official)


def read_score_table(path) -> ScoreTable:
    """Tab-separated table: header ``method`` + the six score columns, with
    optional ``rank_<column>`` columns carrying official ranks."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataError(f"empty score table: {path}")
    header = [h.strip() for h in lines[0].split("\t")]
    missing = [c for c in ("method", *COLUMN_NAMES) if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    rank_cols = [f"rank_{c}" for c in COLUMN_NAMES]
    have_ranks = all(c in header for c in rank_cols)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = dict(zip(header, line.split("\t")))
        try:
            scores = tuple(float(cells[c]) for c in COLUMN_NAMES)
            ranks = tuple(int(cells[c]) for c in rank_cols) if have_ranks else None
        except (KeyError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: bad row ({e})") from None
        rows.append(ScoreRow(cells["method"], scores, ranks))
    return ScoreTable(rows=tuple(rows))


def format_ranked_table(ranked: RankedTable) -> str:
    """Tab-separated rendering sorted by rank sum (best first)."""
    order = sorted(range(len(ranked.table.rows)), key=lambda i: ranked.rank_sums[i])
    header = ["method"]
    for c in COLUMN_NAMES:
        header += [c, f"rank_{c}"]
    header.append("rank_sum")
    lines = ["\t".join(header)]
    for i in order:
        row = ranked.table.rows[i]
        cells = [row.method]
        for c in range(len(COLUMN_NAMES)):
            cells += [f"{row.scores[c]:.6g}", str(ranked.ranks[i][c])]
        cells.append(str(ranked.rank_sums[i]))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# split evaluation

@dataclass(frozen=True)
class ImageScores:
    id: str
    n_gt: int
    n_pred: int
    tp: int
    fp: int
    fn: int
    f1: float
    dice: float
    hausdorff: float
    missing_prediction: bool = False


@dataclass(frozen=True)
class SplitReport:
    images: tuple[ImageScores, ...]
    f1: float                 # from summed tp/fp/fn
    dice: float               # mean over images
    hausdorff: float          # mean over images
    tp: int
    fp: int
    fn: int


def evaluate_pair(gt: InstanceMap, pred: InstanceMap, image_id: str = "",
                  missing: bool = False) -> ImageScores:
    match = match_objects(gt, pred)
    return ImageScores(
        id=image_id,
        n_gt=gt.num_objects if gt.data.size else 0,
        n_pred=pred.num_objects if pred.data.size else 0,
        tp=match.tp,
        fp=match.fp,
        fn=match.fn,
        f1=f1_score(match),
        dice=object_dice(gt, pred),
        hausdorff=object_hausdorff(gt, pred),
        missing_prediction=missing,
    )


def evaluate_split(pred_dir, gt_dir) -> SplitReport:
    """Score every ground-truth instance PNG against the same-named prediction.

    A missing prediction counts as an empty map (all objects become false
    negatives) and the image is flagged.
    """
    gt_dir, pred_dir = Path(gt_dir), Path(pred_dir)
    gt_files = sorted(gt_dir.glob("*.png"))
    if not gt_files:
        raise DataError(f"no ground-truth instance maps in {gt_dir}")
    images = []
    for gt_path in gt_files:
        gt = load_instance_png(gt_path)
        pred_path = pred_dir / gt_path.name
        if pred_path.is_file():
            pred = load_instance_png(pred_path)
            images.append(evaluate_pair(gt, pred, image_id=gt_path.stem))
        else:
            empty = InstanceMap(np.zeros(gt.data.shape, dtype=np.int64))
            images.append(evaluate_pair(gt, empty, image_id=gt_path.stem, missing=True))
    return aggregate_scores(images)


def aggregate_scores(images) -> SplitReport:
    images = tuple(images)
    tp = sum(im.tp for im in images)
    fp = sum(im.fp for im in images)
    fn = sum(im.fn for im in images)
    agg = f1_score(MatchResult(pairs=(), tp=tp, fp=fp, fn=fn))
    dice = float(np.mean([im.dice for im in images])) if images else 0.0
    haus = float(np.mean([im.hausdorff for im in images])) if images else 0.0
    return SplitReport(images=images, f1=agg, dice=dice, hausdorff=haus,
                       tp=tp, fp=fp, fn=fn)


REPORT_COLUMNS = ("id", "n_gt", "n_pred", "tp", "fp", "fn", "f1",
                  "object_dice", "object_hausdorff", "flag")


def write_report_tsv(report: SplitReport, path) -> None:
    lines = ["\t".join(REPORT_COLUMNS)]
    for im in report.images:
        lines.append("\t".join([
            im.id, str(im.n_gt), str(im.n_pred), str(im.tp), str(im.fp), str(im.fn),
            f"{im.f1:.6f}", f"{im.dice:.6f}", f"{im.hausdorff:.6f}",
            "missing_prediction" if im.missing_prediction else "",
        ]))
    lines.append("\t".join([
        "AGGREGATE", str(sum(im.n_gt for im in report.images)),
        str(sum(im.n_pred for im in report.images)),
        str(report.tp), str(report.fp), str(report.fn),
        f"{report.f1:.6f}", f"{report.dice:.6f}", f"{report.hausdorff:.6f}", "",
    ]))
    Path(path).write_text("\n".join(lines) + "\n")


def format_summary(report: SplitReport) -> str:
    flagged = sum(im.missing_prediction for im in report.images)
    lines = [
        f"images evaluated : {len(report.images)}",
        f"objects gt/pred  : {report.tp + report.fn} / {report.tp + report.fp}",
        f"tp / fp / fn     : {report.tp} / {report.fp} / {report.fn}",
        f"F1 (object)      : {report.f1:.4f}",
        f"object Dice      : {report.dice:.4f}",
        f"object Hausdorff : {report.hausdorff:.4f}",
    ]
    if flagged:
        lines.append(f"missing preds    : {flagged}")
    return "\n".join(lines) + "\n"
