"""Probing: fit shallow classifiers on frozen component representations to
measure what information (domain, event, information type) each one encodes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression

from .corpus import MULTI_CLASS, Corpus, LabelSpace
from .evaluation import macro_prf
from .systems import DebiasSystem, System

PROBE_TARGETS = ("domain", "event", "information-type")
PROBE_COMPONENTS = ("baseline", "bias", "main")


@dataclass(frozen=True)
class ProbeTask:
    target: str
    component: str
    fraction: float = 0.05
    seeds: tuple[int, ...] = tuple(range(25))

    def __post_init__(self):
        if self.target not in PROBE_TARGETS:
            raise ValueError(f"unknown probe target {self.target!r}")
        if self.component not in PROBE_COMPONENTS:
            raise ValueError(f"unknown probe component {self.component!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("need at least one probe seed")


@dataclass
class ProbeResult:
    task: str
    component: str
    fraction: float
    seeds: tuple[int, ...]
    scores: list[float]
    mean: float
    std: float

    def to_dict(self) -> dict:
        return {"task": self.task, "component": self.component,
                "fraction": self.fraction, "seeds": list(self.seeds),
                "scores": self.scores, "mean": self.mean, "std": self.std}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _component_features(system: System, component: str, batch) -> torch.Tensor:
    if component == "baseline":
        backbone = getattr(system, "backbone", None)
        if backbone is None:
            raise ValueError("checkpoint has no pooled-classifier backbone")
        return backbone(batch.main_ids, batch.main_mask)["pooled"]
    model = getattr(system, "model", None)
    if model is None:
        raise ValueError(f"checkpoint has no {component!r} component")
    if component == "main":
        return model.forward_main(batch.main_ids, batch.main_mask,
                                  batch.domain_idx)["pooled"]
    if component == "bias":
        if not model.cfg.use_bias_branch:
            raise ValueError("checkpoint was trained without the bias branch")
        return model.forward_bias(batch.bias_ids, batch.bias_mask,
                                  batch.bias_len)["feature"]
    raise ValueError(f"unknown component {component!r}")


@torch.no_grad()
def extract_representations(system: System, component: str, corpus: Corpus,
                            batch_size: int = 64) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Encode the corpus with one frozen component.

    Returns the (n, k) feature matrix plus target vectors for the three probe
    tasks. Evaluation mode, no masking augmentation, deterministic.
    """
    if not corpus.posts:
        raise ValueError("cannot extract representations from an empty corpus")
    was_training = system.training
    system.eval()
    try:
        rows = []
        need_bias = component == "bias"
        for start in range(0, len(corpus.posts), batch_size):
            posts = corpus.posts[start:start + batch_size]
            batch = system.collator.collate(posts, with_bias=need_bias)
            rows.append(_component_features(system, component, batch).cpu().numpy())
    finally:
        system.train(was_training)

    features = np.concatenate(rows, axis=0)
    domain_index = {d: i for i, d in enumerate(corpus.domains)}
    event_index = {e: i for i, e in enumerate(sorted(set(p.event_id for p in corpus.posts)))}
    targets = {
        "domain": np.array([domain_index[p.domain] for p in corpus.posts]),
        "event": np.array([event_index[p.event_id] for p in corpus.posts]),
        # multi-label posts probe their lowest positive label
        "information-type": np.array([min(p.labels) for p in corpus.posts]),
    }
    return features, targets


def _stratified_sample(targets: np.ndarray, fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    chosen = []
    for cls in np.unique(targets):
        idx = np.flatnonzero(targets == cls)
        take = max(1, round(fraction * len(idx)))
        take = min(take, len(idx))
        chosen.append(rng.choice(idx, size=take, replace=False))
    return np.sort(np.concatenate(chosen))


def run_probe(features: np.ndarray, targets: np.ndarray, fraction: float,
              seeds: Sequence[int], task: str = "", component: str = "",
              max_retries: int = 5) -> ProbeResult:
    """Per seed: stratified-sample the fraction, fit an L2 logistic regression,
    score macro-F1 on the complement; aggregate over seeds."""
    if len(features) != len(targets):
        raise ValueError("features and targets are misaligned")
    classes = np.unique(targets)
    if len(classes) < 2:
        raise ValueError("probe targets contain a single class")
    probe_space = LabelSpace(task_kind=MULTI_CLASS,
                             names=tuple(f"c{c}" for c in classes))
    class_pos = {c: i for i, c in enumerate(classes)}

    scores = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for _ in range(max_retries):
            train_idx = _stratified_sample(targets, fraction, rng)
            if len(np.unique(targets[train_idx])) >= 2:
                break
        else:
            raise ValueError("could not sample a subset with >= 2 classes")
        if len(train_idx) < 2 or len(train_idx) >= len(targets):
            raise ValueError(f"fraction {fraction} leaves no usable train/eval partition")
        eval_mask = np.ones(len(targets), dtype=bool)
        eval_mask[train_idx] = False
        eval_idx = np.flatnonzero(eval_mask)

        clf = LogisticRegression(penalty="l2", C=1.0, max_iter=200, random_state=seed)
        clf.fit(features[train_idx], targets[train_idx])
        preds = clf.predict(features[eval_idx])
        pred_sets = {str(i): frozenset({class_pos[c]}) for i, c in zip(eval_idx, preds)}
        gold_sets = {str(i): frozenset({class_pos[targets[i]]}) for i in eval_idx}
        _, _, _, f1 = macro_prf(pred_sets, gold_sets, probe_space)
        scores.append(f1)

    mean = float(np.mean(scores))
    std = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
    return ProbeResult(task=task, component=component, fraction=fraction,
                       seeds=tuple(seeds), scores=scores, mean=mean, std=std)


def run_probe_task(system: System, corpus: Corpus, task: ProbeTask) -> ProbeResult:
    features, targets = extract_representations(system, task.component, corpus)
    return run_probe(features, targets[task.target], task.fraction, task.seeds,
                     task=task.target, component=task.component)


def probe_results_csv(results: Sequence[ProbeResult]) -> str:
    """Bar-chart-shaped CSV: one row per (task, component) with mean and std."""
    lines = ["task,component,fraction,n_seeds,mean_macro_f1,std_macro_f1"]
    for r in results:
        lines.append(f"{r.task},{r.component},{r.fraction},{len(r.seeds)},"
                     f"{r.mean:.6f},{r.std:.6f}")
    return "\n".join(lines) + "\n"
