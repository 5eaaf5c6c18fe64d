"""Comparison strategies sharing the encoder and data pipeline.

All strategies train through the same loop, splits, tokenization, and metric
code; only the loss composition differs. The factory also builds the full
debiasing method and its ablations so every run is configured the same way.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field as dataclass_field
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import MULTI_CLASS, MULTI_LABEL, Corpus, LabelSpace, Post
from .data import Batch, Collator
from .model import DebiasModel, ModelConfig, Predictor, decide
from .encoder import build_encoder
from .systems import DebiasSystem, PooledClassifier, System, nll_from_probs
from .tokenization import Vocab
from .training import CheckpointManifest, TrainConfig, fit

STRATEGY_KINDS = ("debias", "vanilla", "multitask", "masking", "poe", "ear", "eann")


@dataclass
class Strategy:
    kind: str
    params: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGY_KINDS}")
        for key, value in self.params.items():
            if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
                raise ValueError(f"strategy parameter {key}={value} must be nonnegative")


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.scale * grad_output, None


def gradient_reversal(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the incoming gradient by -scale."""
    return _GradientReversal.apply(x, scale)


def attention_entropy_penalty(attentions: Sequence[torch.Tensor],
                              attention_mask: torch.Tensor,
                              strength: float = 0.01) -> torch.Tensor:
    """Entropy-based attention regularization.

    For each layer, the entropy of every valid token's attention distribution
    (per head) is averaged; the per-layer means are summed, negated, and scaled,
    so minimizing the result pushes attention toward high entropy.
    """
    if not attentions:
        raise ValueError("encoder exposed no attention tensors")
    total = None
    for attn in attentions:  # (batch, heads, m, m), rows normalized over keys
        p = attn.clamp_min(1e-12)
        entropy = -(attn * torch.log(p)).sum(dim=-1)  # (batch, heads, m)
        valid = attention_mask[:, None, :].expand_as(entropy)
        layer_mean = entropy[valid].mean()
        total = layer_mean if total is None else total + layer_mean
    return -strength * total


class VanillaSystem(System):
    """Encoder + pooled [CLS] + predictor, optionally with masking augmentation."""

    strategy = "vanilla"

    def __init__(self, backbone: PooledClassifier, collator: Collator,
                 mask_prob: float = 0.0):
        super().__init__(collator, backbone.task_kind)
        self.backbone = backbone
        self.mask_prob = mask_prob
        if mask_prob > 0.0:
            self.strategy = "masking"

    def encoder_module(self) -> nn.Module:
        return self.backbone.encoder

    def collate_train(self, posts: Sequence[Post], rng: random.Random) -> Batch:
        return self.collator.collate(posts, mask_prob=self.mask_prob, rng=rng,
                                     with_bias=False)

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        out = self.backbone(batch.main_ids, batch.main_mask)
        loss = nll_from_probs(out["probs"], batch.targets, self.task_kind)
        return self._check_finite({"loss": loss, "L_main": loss}, batch, out["logits"])

    def predict_probs_batch(self, batch: Batch) -> torch.Tensor:
        return self.backbone(batch.main_ids, batch.main_mask)["probs"]


class MultitaskSystem(VanillaSystem):
    """Vanilla plus an auxiliary domain-classification head."""

    strategy = "multitask"

    def __init__(self, backbone: PooledClassifier, collator: Collator, d: int,
                 n_domains: int, aux_weight: float = 0.2):
        super().__init__(backbone, collator)
        self.strategy = "multitask"
        self.domain_head = nn.Linear(d, n_domains)
        self.aux_weight = aux_weight

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        out = self.backbone(batch.main_ids, batch.main_mask)
        task = nll_from_probs(out["probs"], batch.targets, self.task_kind)
        aux = F.cross_entropy(self.domain_head(out["pooled"]), batch.domain_idx)
        loss = task + self.aux_weight * aux
        return self._check_finite({"loss": loss, "L_main": task, "L_aux": aux},
                                  batch, out["logits"])


class PoESystem(System):
    """Product of experts: task logits combine with the bias branch's logits in
    log space; inference keeps only the main predictions."""

    strategy = "poe"
    supports_sequential = True

    def __init__(self, model: DebiasModel, collator: Collator):
        super().__init__(collator, model.task_kind)
        if not model.cfg.use_bias_branch:
            raise ValueError("PoE needs the bias branch")
        self.model = model
        self.bias_only = False

    def encoder_module(self) -> nn.Module:
        return self.model.encoder

    def collate_train(self, posts: Sequence[Post], rng: random.Random) -> Batch:
        return self.collator.collate(posts, with_bias=True)

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        out_bias = self.model.forward_bias(batch.bias_ids, batch.bias_mask, batch.bias_len)
        l_bias = nll_from_probs(out_bias["probs"], batch.targets, self.task_kind)
        if self.bias_only:
            return self._check_finite(
                {"loss": l_bias, "L_main": torch.zeros_like(l_bias), "L_bias": l_bias},
                batch, out_bias["logits"])
        out_main = self.model.forward_main(batch.main_ids, batch.main_mask,
                                           batch.domain_idx)
        if self.task_kind == MULTI_CLASS:
            combined = (F.log_softmax(out_main["logits"], dim=-1)
                        + F.log_softmax(out_bias["logits"], dim=-1))
            l_main = F.cross_entropy(combined, batch.targets)
        else:
            combined = out_main["logits"] + out_bias["logits"]
            l_main = F.binary_cross_entropy_with_logits(combined, batch.targets)
        loss = l_main + l_bias
        return self._check_finite({"loss": loss, "L_main": l_main, "L_bias": l_bias},
                                  batch, out_main["logits"])

    def set_bias_only(self, flag: bool) -> None:
        self.bias_only = flag

    def freeze_bias(self) -> None:
        for module in (self.model.bias_cnn, self.model.bias_proj, self.model.bias_predictor):
            for p in module.parameters():
                p.requires_grad_(False)

    def predict_probs_batch(self, batch: Batch) -> torch.Tensor:
        probs, _ = self.model.infer(batch.main_ids, batch.main_mask, batch.domain_idx)
        return probs


class EARSystem(VanillaSystem):
    """Vanilla plus the attention-entropy regularizer over all encoder layers."""

    strategy = "ear"

    def __init__(self, backbone: PooledClassifier, collator: Collator,
                 strength: float = 0.01):
        super().__init__(backbone, collator)
        self.strategy = "ear"
        self.strength = strength

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        out = self.backbone(batch.main_ids, batch.main_mask)
        task = nll_from_probs(out["probs"], batch.targets, self.task_kind)
        penalty = attention_entropy_penalty(out["encoder_attentions"],
                                            out["attention_mask"], self.strength)
        loss = task + penalty
        return self._check_finite({"loss": loss, "L_main": task, "L_ear": penalty},
                                  batch, out["logits"])


class EANNSystem(VanillaSystem):
    """Vanilla plus an event-id adversary behind gradient reversal.

    The adversary predicts the training event, so memorized event identity is
    pushed out of the pooled representation; the task head's forward pass is
    untouched.
    """

    strategy = "eann"

    def __init__(self, backbone: PooledClassifier, collator: Collator, d: int,
                 event_ids: Sequence[str], reversal_scale: float = 1.0,
                 adv_weight: float = 1.0):
        super().__init__(backbone, collator)
        self.strategy = "eann"
        if len(event_ids) < 2:
            raise ValueError("event adversary needs at least 2 training events")
        self.event_index = {e: i for i, e in enumerate(event_ids)}
        self.event_head = nn.Linear(d, len(event_ids))
        self.reversal_scale = reversal_scale
        self.adv_weight = adv_weight

    def collate_train(self, posts: Sequence[Post], rng: random.Random) -> Batch:
        return self.collator.collate(posts, with_bias=False,
                                     event_index=self.event_index)

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        out = self.backbone(batch.main_ids, batch.main_mask)
        task = nll_from_probs(out["probs"], batch.targets, self.task_kind)
        reversed_pooled = gradient_reversal(out["pooled"], self.reversal_scale)
        adv = F.cross_entropy(self.event_head(reversed_pooled), batch.event_idx)
        loss = task + self.adv_weight * adv
        return self._check_finite({"loss": loss, "L_main": task, "L_adv": adv},
                                  batch, out["logits"])


def build_system(strategy: Strategy, model_cfg: ModelConfig, vocab: Vocab,
                 label_space: LabelSpace, domains: tuple[str, ...],
                 train_events: Sequence[str] = (),
                 annotations=None) -> System:
    """Construct a trainable system for one strategy; call after seeding."""
    params = dict(strategy.params)
    collator = Collator(vocab, model_cfg.encoder.max_len, label_space, domains,
                        annotations=annotations, min_bias_len=model_cfg.cnn_layers)
    d = model_cfg.encoder.d

    system: System
    if strategy.kind in ("debias", "poe"):
        model = DebiasModel(model_cfg, vocab, label_space, domains)
        if strategy.kind == "debias":
            system = DebiasSystem(model, collator,
                                  lam=params.get("lam", 0.2),
                                  alpha=params.get("alpha"),
                                  mask_prob=params.get("mask_prob"))
            effective = {"lam": system.lam, "alpha": system.alpha,
                         "mask_prob": system.mask_prob}
        else:
            system = PoESystem(model, collator)
            effective = {"separate_bias": bool(params.get("separate_bias", False))}
    else:
        backbone = PooledClassifier(build_encoder(vocab, model_cfg.encoder), d,
                                    model_cfg.hidden, len(label_space),
                                    model_cfg.dropout, label_space.task_kind)
        if strategy.kind == "vanilla":
            system = VanillaSystem(backbone, collator)
            effective = {}
        elif strategy.kind == "masking":
            system = VanillaSystem(backbone, collator,
                                   mask_prob=params.get("mask_prob", 0.8))
            effective = {"mask_prob": system.mask_prob}
        elif strategy.kind == "multitask":
            system = MultitaskSystem(backbone, collator, d, len(domains),
                                     aux_weight=params.get("aux_weight", 0.2))
            effective = {"aux_weight": system.aux_weight}
        elif strategy.kind == "ear":
            system = EARSystem(backbone, collator, strength=params.get("strength", 0.01))
            effective = {"strength": system.strength}
        elif strategy.kind == "eann":
            default_adv = 0.2 if label_space.task_kind == MULTI_LABEL else 1.0
            system = EANNSystem(backbone, collator, d, list(train_events),
                                reversal_scale=params.get("reversal_scale", 1.0),
                                adv_weight=params.get("adv_weight", default_adv))
            effective = {"reversal_scale": system.reversal_scale,
                         "adv_weight": system.adv_weight}
        else:
            raise ValueError(f"unknown strategy {strategy.kind!r}")

    system.model_cfg = model_cfg
    system.strategy_params = effective
    system.train_event_ids = list(train_events)
    return system


def rebuild_system(payload: dict) -> System:
    """Reconstruct a trained system from a checkpoint payload."""
    manifest = CheckpointManifest.from_dict(payload["manifest"])
    model_cfg = ModelConfig.from_dict(manifest.config["model"])
    vocab = Vocab.from_dict(payload["vocab"])
    label_space = LabelSpace(task_kind=payload["label_space"]["task_kind"],
                             names=tuple(payload["label_space"]["names"]))
    strategy = Strategy(kind=manifest.strategy,
                        params=dict(manifest.config.get("strategy_params", {})))
    system = build_system(strategy, model_cfg, vocab, label_space,
                          tuple(payload["domains"]),
                          train_events=payload.get("train_events", []))
    system.load_state_dict(payload["state_dict"])
    system.eval()
    return system


def train_baseline(strategy: Strategy, train: Corpus, valid: Corpus,
                   cfg: TrainConfig, model_cfg: ModelConfig, vocab: Vocab,
                   out_dir, annotations=None) -> CheckpointManifest:
    """Train any strategy through the shared loop with shared inputs."""
    sequential = bool(strategy.params.get("separate_bias", False)) or cfg.sequential_bias
    if sequential and strategy.kind not in ("debias", "poe"):
        raise ValueError(f"strategy {strategy.kind!r} has no bias branch to pre-train")
    run_cfg = cfg
    if sequential and not cfg.sequential_bias:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "sequential_bias": True})

    def builder() -> System:
        return build_system(strategy, model_cfg, vocab, train.label_space,
                            tuple(train.domains), train_events=train.event_ids,
                            annotations=annotations)

    return fit(train, valid, run_cfg, builder, out_dir, strategy=strategy.kind)
