"""Offline evaluation of attempt records: verifier confusion metrics and cluster safety margins."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Mapping

from .alignment import PairClusterSet, RelativeTransformSample, safety_margin
from .pipeline import Verdict, canonical_pair, is_correct, verifier_metrics
from .se3 import RigidTransform, compose, invert


def load_records(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def true_relative(gt: Mapping[int, RigidTransform], target: int, source: int) -> RigidTransform:
    """Transform taking source-scene coordinates into target-scene coordinates."""
    return compose(invert(gt[target]), gt[source])


def labelled(records: Iterable[dict], gt: Mapping[int, RigidTransform]) -> list[tuple[bool, bool]]:
    """(verified, correct) for every record that carries a proposed transform."""
    out = []
    for r in records:
        if r.get("transform") is None:
            continue
        T = RigidTransform.from_array(r["transform"])
        correct = is_correct(T, true_relative(gt, r["target"], r["source"]))
        out.append((Verdict(r["verdict"]) is Verdict.ACCEPTED, correct))
    return out


def cluster_records(records: Iterable[dict]) -> dict[tuple[int, int], PairClusterSet]:
    """Replay accepted records through the clustering, in record order."""
    sets: dict[tuple[int, int], PairClusterSet] = {}
    for r in records:
        if Verdict(r["verdict"]) is not Verdict.ACCEPTED or r.get("transform") is None:
            continue
        sample = RelativeTransformSample.oriented(r["target"], r["source"], RigidTransform.from_array(r["transform"]))
        pair = canonical_pair(r["target"], r["source"])
        sets.setdefault(pair, PairClusterSet(pair)).add_sample(sample)
    return sets


def _pct(x: float) -> float | None:
    return None if math.isnan(x) else round(100.0 * x, 1)


def evaluate(records: list[dict], gt: Mapping[int, RigidTransform] | None = None) -> dict:
    result: dict = {"attempts": len(records)}
    if gt is not None:
        m = verifier_metrics(labelled(records, gt))
        result["verifier"] = {
            "tp": m.tp, "fp": m.fp, "tn": m.tn, "fn": m.fn,
            "precision_pct": _pct(m.precision), "recall_pct": _pct(m.recall),
            "specificity_pct": _pct(m.specificity),
        }
    margins = {}
    for pair, cs in sorted(cluster_records(records).items()):
        truth = None if gt is None else true_relative(gt, *pair)
        sm = safety_margin(cs, truth)
        margins[f"{pair[0]}-{pair[1]}"] = {
            "correct": sm.correct_size, "largest_incorrect": sm.largest_incorrect_size, "margin": sm.margin,
        }
    result["safety_margins"] = margins
    return result


def format_table(result: dict) -> str:
    lines = []
    v = result.get("verifier")
    if v is not None:
        head = ["TP", "FP", "TN", "FN", "Precision%", "Recall%", "Specificity%"]
        row = [v["tp"], v["fp"], v["tn"], v["fn"], v["precision_pct"], v["recall_pct"], v["specificity_pct"]]
        row = ["n/a" if x is None else str(x) for x in row]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        lines.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
        lines.append("  ".join(r.rjust(w) for r, w in zip(row, widths)))
        lines.append("")
    head = ["Pair", "Correct", "LargestIncorrect", "Margin"]
    rows = [[k, str(m["correct"]), str(m["largest_incorrect"]), str(m["margin"])]
            for k, m in result["safety_margins"].items()]
    widths = [max([len(h)] + [len(r[i]) for r in rows]) for i, h in enumerate(head)]
    lines.append("  ".join(h.rjust(w) for h, w in zip(head, widths)))
    for r in rows:
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_evaluation(result: dict, path) -> None:
    Path(path).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
