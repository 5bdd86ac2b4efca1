"""CSV 报告与 SVG 图

每个 CSV 第一行是来源注释 `# config_hash=...; seed=...`，其后是 pandas 写出的表格。
SVG 使用固定的 hash salt 且不写日期，相同输入得到相同字节。
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import ConfusionMatrix, roc_auc, roc_curve  # noqa: E402
from .exceptions import DataError  # noqa: E402

logger = logging.getLogger(__name__)

PROVENANCE_PREFIX = "# "
SVG_HASH_SALT = "wdm-monitor"
FLOAT_FORMAT = "%.10g"

CONFUSION_FILE = "confusion_matrix.csv"
CLOSED_METRICS_FILE = "closed_metrics.csv"
LOSS_FILE = "loss.csv"
LOO_FILE = "loo_report.csv"
LOO_SUMMARY_FILE = "loo_summary.csv"
LOO_SAMPLES_FILE = "loo_scores.csv"
CV_FILE = "cv_report.csv"
CV_SUMMARY_FILE = "cv_summary.csv"
DECISIONS_FILE = "decisions.csv"
ROC_FIGURE = "roc_curves.svg"
CONFUSION_FIGURE = "confusion_heatmap.svg"


def format_provenance(provenance: Dict[str, Any]) -> str:
    keys = ['config_hash', 'seed'] + sorted(k for k in provenance if k not in ('config_hash', 'seed'))
    return "; ".join(f"{k}={provenance[k]}" for k in keys if k in provenance)


def parse_provenance(line: str) -> Dict[str, str]:
    body = line[len(PROVENANCE_PREFIX):] if line.startswith(PROVENANCE_PREFIX) else line
    record = {}
    for part in body.strip().split(";"):
        if "=" in part:
            key, value = part.split("=", 1)
            record[key.strip()] = value.strip()
    return record


def write_csv_report(frame: pd.DataFrame, path: Path, provenance: Dict[str, Any]) -> None:
    """写出带来源注释行的 CSV"""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(PROVENANCE_PREFIX + format_provenance(provenance) + "\n")
        frame.to_csv(f, index=False, lineterminator="\n", float_format=FLOAT_FORMAT)
    logger.info(f"报告已保存: {path} ({len(frame)} 行)")


def read_csv_report(path: Path) -> Tuple[pd.DataFrame, Dict[str, str]]:
    """读取 CSV 报告，返回 (表格, 来源信息)"""
    if not path.exists():
        raise DataError(f"报告文件不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
        if not first.startswith(PROVENANCE_PREFIX):
            raise DataError(f"报告缺少来源注释行: {path}")
        try:
            frame = pd.read_csv(f)
        except pd.errors.ParserError as e:
            raise DataError(f"CSV 解析失败 {path}: {e}")
    return frame, parse_provenance(first)


# ---------------------------------------------------------------- 表格构造


def confusion_frame(cm: ConfusionMatrix) -> pd.DataFrame:
    """行 = 真实类别，列 = 预测类别"""
    frame = pd.DataFrame(cm.counts, columns=cm.class_names)
    frame.insert(0, 'true_class', cm.class_names)
    return frame


def confusion_from_frame(frame: pd.DataFrame) -> ConfusionMatrix:
    names = [str(c) for c in frame.columns if c != 'true_class']
    return ConfusionMatrix(frame[names].to_numpy(dtype=np.int64), names)


def loss_frame(loss_trace: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame({'epoch': np.arange(1, len(loss_trace) + 1), 'loss': list(loss_trace)})


def records_frame(records: Sequence[Dict[str, Any]], columns: Optional[List[str]] = None) -> pd.DataFrame:
    frame = pd.DataFrame(list(records))
    if columns is not None:
        frame = frame.reindex(columns=columns)
    return frame


# ---------------------------------------------------------------- SVG


def _save_svg(fig: Any, path: Path, provenance: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig.savefig(path, format='svg', metadata={'Date': None, 'Description': format_provenance(provenance)})
    plt.close(fig)
    logger.info(f"图已保存: {path}")


def plot_roc_curves(samples: pd.DataFrame, path: Path, provenance: Dict[str, Any]) -> None:
    """每个新类一个子图，每个评分器一条 ROC 曲线（图例标出 AUC）

    samples 需要列 novel_class / scorer / is_novel / score。
    """
    required = {'novel_class', 'scorer', 'is_novel', 'score'}
    if not required.issubset(samples.columns):
        raise DataError(f"ROC 数据缺少列: {sorted(required - set(samples.columns))}")
    if samples.empty:
        raise DataError("ROC 数据为空")
    classes = list(dict.fromkeys(samples['novel_class']))
    cols = min(3, len(classes))
    rows = int(np.ceil(len(classes) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows), squeeze=False)

    for ax, novel_class in zip(axes.ravel(), classes):
        subset = samples[samples['novel_class'] == novel_class]
        for scorer in dict.fromkeys(subset['scorer']):
            part = subset[subset['scorer'] == scorer]
            labels = part['is_novel'].astype(bool).to_numpy()
            fpr, tpr = roc_curve(part['score'].to_numpy(), labels)
            auc = roc_auc(part['score'].to_numpy(), labels)
            ax.plot(fpr, tpr, label=f"{scorer} ({auc:.3f})")
        ax.plot([0, 1], [0, 1], color='grey', linestyle=':', linewidth=0.8)
        ax.set_title(f"Novel: {novel_class}")
        ax.set_xlabel("FPR")
        ax.set_ylabel("TPR")
        ax.legend(loc='lower right', fontsize='small')
    for ax in axes.ravel()[len(classes):]:
        ax.axis('off')
    fig.tight_layout()
    _save_svg(fig, path, provenance)


def plot_confusion_heatmap(cm: ConfusionMatrix, path: Path, provenance: Dict[str, Any]) -> None:
    """按行归一化着色，格内标注计数"""
    counts = cm.counts
    rows = counts.sum(axis=1, keepdims=True).astype(np.float64)
    with np.errstate(invalid='ignore', divide='ignore'):
        shares = np.where(rows > 0, counts / rows, 0.0)
    size = max(4.0, 0.6 * cm.num_classes + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    image = ax.imshow(shares, cmap='Blues', vmin=0.0, vmax=1.0)
    ax.set_xticks(range(cm.num_classes))
    ax.set_yticks(range(cm.num_classes))
    ax.set_xticklabels(cm.class_names, rotation=45, ha='right')
    ax.set_yticklabels(cm.class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    for i in range(cm.num_classes):
        for j in range(cm.num_classes):
            ax.text(j, i, str(int(counts[i, j])), ha='center', va='center',
                    color='white' if shares[i, j] > 0.5 else 'black', fontsize='small')
    fig.colorbar(image, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    _save_svg(fig, path, provenance)
