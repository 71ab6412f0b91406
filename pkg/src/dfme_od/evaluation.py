"""Accuracy / IoU metrics, victim-vs-student comparison reports and figures."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import ArrayDataset, denormalize_box

NAIVE_BOX = (0.25, 0.25, 0.75, 0.75)


def repair_boxes(boxes) -> np.ndarray:
    """Sort each coordinate pair so min <= max, then clamp to [0, 1].

    Raw sigmoid heads do not guarantee ordering; the same repair is applied to
    every model before IoU.
    """
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    xs = np.sort(b[:, [0, 2]], axis=1)
    ys = np.sort(b[:, [1, 3]], axis=1)
    return np.clip(np.stack([xs[:, 0], ys[:, 0], xs[:, 1], ys[:, 1]], axis=1), 0.0, 1.0)


def iou_batch(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x_min, y_min, x_max, y_max) boxes; 0 for an empty union."""
    return float(iou_batch(box_a, box_b)[0])


def accuracy(probs, labels) -> float:
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    # np.argmax returns the first maximum, i.e. ties go to the lower index
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def detection_success(ious, threshold: float = 0.5) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("detection_success of an empty set")
    return float(np.mean(ious >= threshold))


def success_rate(attack_pct: float, baseline_pct: float) -> float:
    """Attack metric as a percentage of the baseline metric (unrounded)."""
    if baseline_pct == 0:
        raise ZeroDivisionError("baseline metric is zero")
    return 100.0 * attack_pct / baseline_pct


@dataclass
class EvalReport:
    accuracy: float
    mean_iou: float
    detection_success: float
    threshold: float
    count: int


@dataclass
class ComparisonReport:
    baseline: EvalReport
    attack: EvalReport
    success_rate_acc: float
    success_rate_iou: float
    victim: str = "victim"
    student: str = "student"

    @classmethod
    def build(cls, baseline: EvalReport, attack: EvalReport, victim="victim", student="student"):
        return cls(
            baseline,
            attack,
            success_rate(attack.accuracy, baseline.accuracy),
            success_rate(attack.mean_iou, baseline.mean_iou),
            victim,
            student,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def table_rows(self) -> list[list[str]]:
        """Rows laid out like the published results table, percentages rounded for display."""
        pct = lambda v: f"{100 * v:.0f}"
        return [
            ["Victim", "Student", "Acc Baseline", "Acc Attack", "Acc Success Rate",
             "IoU Baseline", "IoU Attack", "IoU Success Rate"],
            [self.victim, self.student,
             pct(self.baseline.accuracy), pct(self.attack.accuracy), f"{self.success_rate_acc:.0f}",
             pct(self.baseline.mean_iou), pct(self.attack.mean_iou), f"{self.success_rate_iou:.0f}"],
        ]

    def to_text(self) -> str:
        rows = self.table_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        lines.append("")
        lines.append(
            f"unrounded success rates: accuracy {self.success_rate_acc:.4f}%, IoU {self.success_rate_iou:.4f}%"
        )
        lines.append(
            f"detection success @IoU>={self.baseline.threshold}: victim {self.baseline.detection_success:.3f}, "
            f"student {self.attack.detection_success:.3f}"
        )
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerows(self.table_rows())
        return buf.getvalue()


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(probs, boxes) from a detector module or an in-process oracle, never charging a budget."""
    probs, boxes = [], []
    for start in range(0, len(images), batch_size):
        x = torch.as_tensor(images[start:start + batch_size])
        if isinstance(model, torch.nn.Module):
            was_training = model.training
            model.eval()
            det = model.detect(x)
            model.train(was_training)
        else:
            det = model.query(x, charge=False)
        probs.append(det.probs.numpy())
        boxes.append(det.box.numpy())
    return np.concatenate(probs), np.concatenate(boxes)


def evaluate_model(model, dataset: ArrayDataset, threshold: float = 0.5) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    probs, boxes = predict(model, dataset.images)
    if probs.shape != (len(dataset), dataset.class_count) or boxes.shape != (len(dataset), 4):
        raise ValueError(f"model outputs {probs.shape}/{boxes.shape} do not match dataset")
    ious = iou_batch(repair_boxes(boxes), dataset.boxes)
    return EvalReport(
        accuracy=accuracy(probs, dataset.labels),
        mean_iou=float(ious.mean()),
        detection_success=detection_success(ious, threshold),
        threshold=threshold,
        count=len(dataset),
    )


def naive_box_iou(true_boxes, box=NAIVE_BOX) -> float:
    """Mean IoU of a model that always predicts ``box``."""
    true_boxes = np.asarray(true_boxes)
    return float(iou_batch(np.broadcast_to(np.asarray(box, float), true_boxes.shape), true_boxes).mean())


# ---------------------------------------------------------------------------
# figures

def _draw_panel(image: np.ndarray, gt, pred, scale: int):
    from PIL import Image, ImageDraw

    h, w = image.shape[:2]
    im = Image.fromarray((np.clip(image, 0, 1) * 255).round().astype(np.uint8)).resize(
        (w * scale, h * scale), Image.NEAREST
    )
    draw = ImageDraw.Draw(im)
    for box, color in ((gt, (0, 255, 0)), (pred, (255, 0, 0))):
        x0, y0, x1, y1 = denormalize_box(box, w * scale, h * scale)
        draw.rectangle([x0, y0, max(x0, x1 - 1), max(y0, y1 - 1)], outline=color, width=2)
    return im


def render_overlays(images, gt_boxes, victim_boxes, student_boxes, out_dir, scale: int = 4) -> list[Path]:
    """Write one PNG per image: victim panel left, student panel right.

    Ground truth is drawn in green and the model's prediction in red.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    victim_boxes = repair_boxes(victim_boxes)
    student_boxes = repair_boxes(student_boxes)
    paths = []
    for i, img in enumerate(images):
        left = _draw_panel(img, gt_boxes[i], victim_boxes[i], scale)
        right = _draw_panel(img, gt_boxes[i], student_boxes[i], scale)
        canvas = Image.new("RGB", (left.width * 2 + 8, left.height), (255, 255, 255))
        canvas.paste(left, (0, 0))
        canvas.paste(right, (left.width + 8, 0))
        p = out / f"overlay_{i:03d}.png"
        canvas.save(p)
        paths.append(p)
    return paths


def pca_projection(generated, real) -> tuple[np.ndarray, np.ndarray]:
    """Project both sets onto the top-2 principal components of their union."""
    g = np.asarray(generated, dtype=np.float64).reshape(len(generated), -1)
    r = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    if len(g) == 0 or len(r) == 0:
        raise ValueError("both image sets must be non-empty")
    both = np.concatenate([g, r])
    if len(both) < 2:
        raise ValueError("need at least two samples")
    centered = both - both.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj[: len(g)], proj[len(g):]


def latent_scatter(generated, real, out_file) -> tuple[np.ndarray, np.ndarray]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pg, pr = pca_projection(generated, real)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(pr[:, 0], pr[:, 1], s=8, c="green", label="real")
    ax.scatter(pg[:, 0], pg[:, 1], s=8, c="red", label="generated")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend()
    fig.tight_layout()
    Path(out_file).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_file, dpi=100)
    plt.close(fig)
    return pg, pr


def accuracy_curve(history: list[dict], out_file, baseline: float | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = [(h["consumed"], h["eval"]["accuracy"]) for h in history if h.get("eval")]
    fig, ax = plt.subplots(figsize=(6, 4))
    if pts:
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, label="student")
    if baseline is not None:
        ax.axhline(baseline, color="gray", ls="--", label="victim")
    ax.set_xlabel("victim queries")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    Path(out_file).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_file, dpi=100)
    plt.close(fig)


def write_report(report: ComparisonReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (out / "table.txt").write_text(report.to_text() + "\n")
    (out / "table.csv").write_text(report.to_csv())
