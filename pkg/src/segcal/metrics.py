"""Segmentation evaluation: confusion counts, mIoU, FB-IoU, FP/FN rates, CSV.

Rate conventions: the false-positive rate is the fraction of true background
pixels predicted foreground (FP / (FP + TN)) and the false-negative rate is
the fraction of true foreground pixels missed (FN / (FN + TP)).  Both are
bounded and robust to class imbalance, which is what makes the
conservative-versus-aggressive comparison between models meaningful.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeMismatchError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("episode_id", "class_id", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricsReport:
    class_ious: dict          # class_id -> IoU
    miou: float
    fb_iou: float
    fp_rate: float
    fn_rate: float
    episodes: int


def confusion(pred: np.ndarray, gt: np.ndarray) -> Confusion:
    """Exact pixel counting of one binary prediction against ground truth."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction is {pred.shape}, ground truth is {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return Confusion(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def _iou(c: Confusion) -> float:
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        # nothing predicted, nothing to find: empty-everything convention
        logger.warning("IoU over an empty class defined as 1.0")
        return 1.0
    return c.tp / denom


def miou(per_episode: Sequence, per_episode_average: bool = False) -> MetricsReport:
    """Aggregate (class_id, Confusion) pairs into a full report.

    Per class, counts are summed over that class's episodes before dividing
    (dataset-level IoU); ``per_episode_average`` switches to averaging each
    episode's own IoU instead.  The mean over classes is unweighted.
    """
    items = list(per_episode)
    if not items:
        raise ConfigError("miou needs at least one episode")
    by_class: dict[int, list[Confusion]] = {}
    for class_id, conf in items:
        by_class.setdefault(int(class_id), []).append(conf)

    class_ious = {}
    for class_id in sorted(by_class):
        confs = by_class[class_id]
        if per_episode_average:
            class_ious[class_id] = float(np.mean([_iou(c) for c in confs]))
        else:
            total = confs[0]
            for c in confs[1:]:
                total = total + c
            class_ious[class_id] = _iou(total)

    confusions = [conf for _, conf in items]
    fp_rate, fn_rate = fp_fn_rates(confusions)
    return MetricsReport(
        class_ious=class_ious,
        miou=float(np.mean(list(class_ious.values()))),
        fb_iou=fb_iou(confusions),
        fp_rate=fp_rate,
        fn_rate=fn_rate,
        episodes=len(items),
    )


def fb_iou(per_episode: Iterable[Confusion]) -> float:
    """Mean of the foreground IoU and the background IoU over pooled counts."""
    confs = list(per_episode)
    if not confs:
        raise ConfigError("fb_iou needs at least one episode")
    total = confs[0]
    for c in confs[1:]:
        total = total + c
    iou_fg = _iou(total)
    denom_bg = total.tn + total.fp + total.fn
    iou_bg = total.tn / denom_bg if denom_bg else 1.0
    return (iou_fg + iou_bg) / 2.0


def fp_fn_rates(per_episode: Iterable[Confusion]):
    """Pooled per-condition error rates; see the module docstring.

    An all-foreground ground truth leaves the FP rate undefined and it is
    reported as 0 with a warning; likewise the FN rate for all-background.
    """
    confs = list(per_episode)
    if not confs:
        raise ConfigError("fp_fn_rates needs at least one episode")
    total = confs[0]
    for c in confs[1:]:
        total = total + c
    true_bg = total.fp + total.tn
    true_fg = total.fn + total.tp
    if true_bg == 0:
        logger.warning("fp_rate undefined (no background pixels); reporting 0")
        fp_rate = 0.0
    else:
        fp_rate = total.fp / true_bg
    if true_fg == 0:
        logger.warning("fn_rate undefined (no foreground pixels); reporting 0")
        fn_rate = 0.0
    else:
        fn_rate = total.fn / true_fg
    return fp_rate, fn_rate


# ---------------------------------------------------------------------------
# CSV output


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".12g")
    return str(x)


def render_metrics_csv(rows: Sequence, report: MetricsReport, config_echo: dict) -> str:
    """One row per episode plus a trailing summary block.

    ``rows`` holds (episode_id, class_id, Confusion) triples.  The resolved
    configuration is echoed into comment lines so identical runs produce
    byte-identical files.
    """
    lines = []
    for key in sorted(config_echo):
        lines.append(f"# {key}={_fmt(config_echo[key])}")
    lines.append(",".join(CSV_COLUMNS))
    for episode_id, class_id, conf in rows:
        lines.append(
            ",".join(map(str, (episode_id, class_id, conf.tp, conf.fp, conf.fn, conf.tn)))
        )
    lines.append("summary,miou,fb_iou,fp_rate,fn_rate")
    lines.append(
        "summary,"
        + ",".join(_fmt(v) for v in (report.miou, report.fb_iou, report.fp_rate, report.fn_rate))
    )
    return "\n".join(lines) + "\n"


def write_metrics_csv(path, rows: Sequence, report: MetricsReport, config_echo: dict) -> None:
    from pathlib import Path

    Path(path).write_text(render_metrics_csv(rows, report, config_echo))
