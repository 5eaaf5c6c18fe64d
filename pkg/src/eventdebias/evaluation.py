"""Macro-averaged metrics, paired significance testing, and report emission.

Conventions (recorded in every report): zero denominators produce 0 for
precision/recall/F1, and the macro average runs over every class in the label
space, including classes absent from the evaluated split.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from scipy import stats

from .corpus import Corpus, LabelSpace

CONVENTIONS = "zero-division->0; macro over all classes incl. zero-support"

LabelSets = Mapping[str, frozenset[int]]


@dataclass
class ClassScores:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    predicted: int


@dataclass
class EvalReport:
    per_class: list[ClassScores]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_domain_macro_f1: dict[str, float]
    n_posts: int
    seed: int | None = None
    strategy: str | None = None
    conventions: str = CONVENTIONS

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "n_posts": self.n_posts,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": [vars(c) for c in self.per_class],
            "per_domain_macro_f1": dict(sorted(self.per_domain_macro_f1.items())),
            "conventions": self.conventions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def macro_prf(predictions: LabelSets, gold: LabelSets,
              label_space: LabelSpace) -> tuple[list[ClassScores], float, float, float]:
    """Per-class and macro precision/recall/F1 over decided label sets.

    F1 is computed as 2*TP / (2*TP + FP + FN) straight from integer counts so
    the zero conventions fall out consistently.
    """
    if set(predictions) != set(gold):
        missing = set(gold) ^ set(predictions)
        raise ValueError(f"prediction/gold post ids differ, e.g. {sorted(missing)[:5]}")
    n = len(label_space)
    tp = [0] * n
    fp = [0] * n
    fn = [0] * n
    support = [0] * n
    predicted = [0] * n
    for post_id, gold_labels in gold.items():
        pred_labels = predictions[post_id]
        for c in gold_labels:
            support[c] += 1
            if c in pred_labels:
                tp[c] += 1
            else:
                fn[c] += 1
        for c in pred_labels:
            predicted[c] += 1
            if c not in gold_labels:
                fp[c] += 1

    per_class = []
    for c, name in enumerate(label_space.names):
        p = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        r = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] > 0 else 0.0
        f1_denom = 2 * tp[c] + fp[c] + fn[c]
        f1 = 2 * tp[c] / f1_denom if f1_denom > 0 else 0.0
        per_class.append(ClassScores(name, p, r, f1, support[c], predicted[c]))
    macro_p = sum(c.precision for c in per_class) / n
    macro_r = sum(c.recall for c in per_class) / n
    macro_f1 = sum(c.f1 for c in per_class) / n
    return per_class, macro_p, macro_r, macro_f1


@dataclass
class PairedTResult:
    p_value: float
    t_statistic: float
    degenerate: bool = False

    def significant(self, threshold: float = 0.05) -> bool:
        return self.p_value < threshold


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> PairedTResult:
    """Two-sided paired t-test on per-seed score differences.

    Zero-variance differences cannot feed the t distribution: identical vectors
    report p=1, constant nonzero differences report p=0, both flagged.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError(f"score lists differ in length: {len(scores_a)} vs {len(scores_b)}")
    if len(scores_a) < 2:
        raise ValueError("paired t-test needs at least 2 score pairs")
    diffs = [a - b for a, b in zip(scores_a, scores_b)]
    if all(d == diffs[0] for d in diffs):
        if diffs[0] == 0.0:
            return PairedTResult(p_value=1.0, t_statistic=0.0, degenerate=True)
        return PairedTResult(p_value=0.0,
                             t_statistic=float("inf") if diffs[0] > 0 else float("-inf"),
                             degenerate=True)
    t_stat, p_value = stats.ttest_rel(scores_a, scores_b)
    return PairedTResult(p_value=float(p_value), t_statistic=float(t_stat))


def evaluate(system, split: Corpus, seed: int | None = None,
             strategy: str | None = None, batch_size: int = 64) -> EvalReport:
    """Bias-free inference over a split, scored globally and per domain."""
    if not split.posts:
        raise ValueError("cannot evaluate an empty split")
    predictions: dict[str, frozenset[int]] = {}
    posts = split.posts
    for start in range(0, len(posts), batch_size):
        chunk = posts[start:start + batch_size]
        for post, labels in zip(chunk, system.predict_decisions(chunk)):
            predictions[post.id] = labels
    gold = {p.id: p.labels for p in posts}
    per_class, macro_p, macro_r, macro_f1 = macro_prf(predictions, gold, split.label_space)

    per_domain: dict[str, float] = {}
    for domain in split.domains:
        ids = {p.id for p in posts if p.domain == domain}
        if not ids:
            continue
        _, _, _, dom_f1 = macro_prf({i: predictions[i] for i in ids},
                                    {i: gold[i] for i in ids}, split.label_space)
        per_domain[domain] = dom_f1

    return EvalReport(per_class=per_class, macro_precision=macro_p,
                      macro_recall=macro_r, macro_f1=macro_f1,
                      per_domain_macro_f1=per_domain, n_posts=len(posts),
                      seed=seed, strategy=strategy)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def comparison_rows(results: Mapping[str, Sequence[EvalReport]],
                    reference: str = "vanilla") -> list[dict]:
    """Seed-averaged P/R/F1 per strategy with the F1 delta to the reference."""
    ref_f1 = _mean([r.macro_f1 for r in results[reference]]) if reference in results else None
    rows = []
    for strategy, reports in results.items():
        f1 = _mean([r.macro_f1 for r in reports])
        row = {
            "strategy": strategy,
            "seeds": len(reports),
            "macro_precision": _mean([r.macro_precision for r in reports]),
            "macro_recall": _mean([r.macro_recall for r in reports]),
            "macro_f1": f1,
            "delta_f1": None if ref_f1 is None or strategy == reference else f1 - ref_f1,
        }
        if ref_f1 is not None and strategy != reference:
            ref_scores = [r.macro_f1 for r in results[reference]]
            own_scores = [r.macro_f1 for r in reports]
            if len(ref_scores) == len(own_scores) and len(own_scores) >= 2:
                row["p_vs_reference"] = paired_t_test(own_scores, ref_scores).p_value
        rows.append(row)
    return rows


def render_comparison_table(results: Mapping[str, Sequence[EvalReport]],
                            reference: str = "vanilla") -> str:
    rows = comparison_rows(results, reference)
    lines = [f"{'strategy':<14} {'P':>7} {'R':>7} {'F1':>7} {'dF1':>7}"]
    for row in rows:
        delta = "-" if row["delta_f1"] is None else f"{100 * row['delta_f1']:+.2f}"
        lines.append(f"{row['strategy']:<14} {100 * row['macro_precision']:>7.2f} "
                     f"{100 * row['macro_recall']:>7.2f} {100 * row['macro_f1']:>7.2f} "
                     f"{delta:>7}")
    return "\n".join(lines) + "\n"


def comparison_csv(results: Mapping[str, Sequence[EvalReport]],
                   reference: str = "vanilla") -> str:
    rows = comparison_rows(results, reference)
    buf = io.StringIO()
    fields = ["strategy", "seeds", "macro_precision", "macro_recall", "macro_f1",
              "delta_f1", "p_vs_reference"]
    writer = csv.DictWriter(buf, fieldnames=fields)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k) for k in fields})
    return buf.getvalue()
