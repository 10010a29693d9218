"""Prediction dumps and the metrics computed from them."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeMismatchError

# --- run-length encoding of boolean grids ----------------------------------


def rle_encode(mask) -> dict:
    """Row-major run lengths of a boolean grid, starting with a (possibly empty) False run."""
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"shape": list(m.shape), "runs": runs}


def rle_decode(rle: Mapping) -> np.ndarray:
    values = np.arange(len(rle["runs"])) % 2 == 1
    return np.repeat(values, rle["runs"]).reshape(rle["shape"])


# --- dumps -----------------------------------------------------------------


def _as_list(t: torch.Tensor) -> list:
    return t.detach().double().tolist()


@torch.no_grad()
def predict_dump(net, batches: Iterable, ids: Sequence[str]) -> list[dict]:
    """One record per image from ``(pixels, labels)`` batches; labels are only copied."""
    net.eval()
    records, pos = [], 0
    for pixels, labels in batches:
        bundle, _ = net(pixels, compute_loss=False)
        td = torch.stack(bundle.top_down_logits, 1) if bundle.top_down_logits else None
        bu = torch.stack(bundle.bottom_up_logits, 1)
        for b in range(pixels.shape[0]):
            rec = {
                "id": ids[pos],
                "label": int(labels[b]),
                "td_logits": [] if td is None else _as_list(td[b]),
                "bu_logits": _as_list(bu[b]),
                "comb_logits": None if bundle.combiner_logits is None else _as_list(bundle.combiner_logits[b]),
                "fused": _as_list(bundle.fused_probs[b]),
                "td_argmax": None if td is None else int(td[b].sum(0).argmax()),
                "bu_argmax": int(bu[b].sum(0).argmax()),
            }
            if bundle.selection_masks:
                rec["selection_masks"] = [rle_encode(m[b].cpu().numpy()) for m in bundle.selection_masks]
            records.append(rec)
            pos += 1
    return records


def write_dump(records: Sequence[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_dump(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- metrics ---------------------------------------------------------------


def ranked_classes(probs: Sequence[float]) -> np.ndarray:
    """Class indices by descending probability, ties by ascending index."""
    return np.argsort(-np.asarray(probs, dtype=float), kind="stable")


def top_k_accuracy(dump: Sequence[dict], k: int = 1) -> float:
    if not dump:
        raise ConfigError("empty dump")
    num_classes = len(dump[0]["fused"])
    if not 1 <= k <= num_classes:
        raise ConfigError(f"k={k} outside [1, {num_classes}]")
    hits = sum(r["label"] in ranked_classes(r["fused"])[:k] for r in dump)
    return 100.0 * hits / len(dump)


def predictions(dump: Sequence[dict]) -> list[int]:
    return [int(ranked_classes(r["fused"])[0]) for r in dump]


@dataclass
class GenericClassRow:
    generic: str
    num: float
    precision: float
    fp: float


def generic_class_report(
    dump: Sequence[dict],
    fine_to_generic: Mapping[int, str],
    min_categories: int = 6,
) -> tuple[list[GenericClassRow], GenericClassRow]:
    """Per-generic precision and false positives, plus their unweighted average.

    Only generic classes with more than ``min_categories`` fine classes are
    listed. A false positive is a sample whose predicted fine class belongs
    to another generic class.
    """
    mapping = {int(k): v for k, v in fine_to_generic.items()}
    sizes: dict[str, int] = {}
    for g in mapping.values():
        sizes[g] = sizes.get(g, 0) + 1
    listed = sorted(g for g, n in sizes.items() if n > min_categories)
    stats = {g: [0, 0, 0] for g in listed}  # num, correct, fp
    for r, pred in zip(dump, predictions(dump)):
        for c in (r["label"], pred):
            if c not in mapping:
                raise ConfigError(f"fine label {c} has no generic class")
        g = mapping[r["label"]]
        if g not in stats:
            continue
        s = stats[g]
        s[0] += 1
        s[1] += pred == r["label"]
        s[2] += mapping[pred] != g
    rows = [GenericClassRow(g, n, 100.0 * c / n, fp) for g, (n, c, fp) in stats.items() if n > 0]
    if rows:
        avg = GenericClassRow(
            "Average",
            float(np.mean([r.num for r in rows])),
            float(np.mean([r.precision for r in rows])),
            float(np.mean([r.fp for r in rows])),
        )
    else:
        avg = GenericClassRow("Average", 0.0, float("nan"), float("nan"))
    return rows, avg


def false_true_rate(td_preds: Sequence[int], bu_preds: Sequence[int], labels: Sequence[int]) -> float:
    """Among samples the top-down path gets wrong, the share the bottom-up path gets right.

    Returns 0 when the top-down path makes no mistakes.
    """
    if not len(td_preds) == len(bu_preds) == len(labels):
        raise ShapeMismatchError("prediction and label sequences differ in length")
    td, bu, y = (np.asarray(a) for a in (td_preds, bu_preds, labels))
    wrong = td != y
    ft = int(np.sum(wrong & (bu == y)))
    ff = int(np.sum(wrong & (bu != y)))
    return 0.0 if ft + ff == 0 else ft / (ft + ff)


# --- reports ---------------------------------------------------------------


def format_report(rows: Sequence[GenericClassRow], avg: GenericClassRow, header: Mapping[str, float]) -> str:
    lines = [f"{k}: {v:.2f}" for k, v in header.items()]
    lines.append("")
    lines.append(f"{'Generic class':<16}{'Num.':>8}{'Pr.':>10}{'FP':>8}")
    for r in [*rows, avg]:
        lines.append(f"{r.generic:<16}{r.num:>8.0f}{r.precision:>10.2f}{r.fp:>8.2f}")
    return "\n".join(lines) + "\n"


def evaluate_dump(dump: Sequence[dict], fine_to_generic: Mapping[int, str], min_categories: int = 6) -> dict:
    num_classes = len(dump[0]["fused"])
    summary = {"top1": top_k_accuracy(dump, 1), "top3": top_k_accuracy(dump, min(3, num_classes))}
    labels = [r["label"] for r in dump]
    if dump[0]["td_argmax"] is not None:
        ft = false_true_rate([r["td_argmax"] for r in dump], [r["bu_argmax"] for r in dump], labels)
        summary["false_true_rate"] = ft
        summary["false_true_undefined"] = all(r["td_argmax"] == r["label"] for r in dump)
    rows, avg = generic_class_report(dump, fine_to_generic, min_categories)
    summary["generic_rows"] = [asdict(r) for r in rows]
    summary["generic_average"] = asdict(avg)
    return summary
