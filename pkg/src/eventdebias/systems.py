"""Trainable systems: the joint main+bias method and the shared plumbing that
baseline strategies reuse (batch collation, probability-space losses, bias-free
prediction)."""

from __future__ import annotations

import random
from typing import Sequence

import torch
import torch.nn as nn

from .corpus import MULTI_CLASS, Post
from .data import Batch, Collator
from .model import DebiasModel, Predictor, decide, fuse, probs_from_logits

_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending batch ids."""

    def __init__(self, message: str, post_ids: Sequence[str], logits: torch.Tensor | None):
        detail = f"{message}; batch ids {list(post_ids)[:8]}"
        if logits is not None:
            detail += f"; logits range [{logits.min().item():.4g}, {logits.max().item():.4g}]"
        super().__init__(detail)
        self.post_ids = list(post_ids)


def nll_from_probs(probs: torch.Tensor, targets: torch.Tensor, task_kind: str) -> torch.Tensor:
    """Cross-entropy against probability vectors (fusion happens in probability
    space, so the loss cannot take logits)."""
    if task_kind == MULTI_CLASS:
        picked = probs.gather(1, targets.view(-1, 1)).squeeze(1)
        return -torch.log(picked.clamp_min(_EPS)).mean()
    pos = targets * torch.log(probs.clamp_min(_EPS))
    neg = (1.0 - targets) * torch.log((1.0 - probs).clamp_min(_EPS))
    return -(pos + neg).mean()


class System(nn.Module):
    """Base class: owns the collator and the bias-free prediction path."""

    strategy = "base"
    supports_sequential = False

    def __init__(self, collator: Collator, task_kind: str):
        super().__init__()
        self.collator = collator
        self.task_kind = task_kind
        # attached by the strategy factory; echoed into manifests
        self.model_cfg = None
        self.strategy_params: dict = {}
        self.train_event_ids: list[str] = []

    # -- training surface -------------------------------------------------
    def collate_train(self, posts: Sequence[Post], rng: random.Random) -> Batch:
        return self.collator.collate(posts, mask_prob=0.0, with_bias=False)

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        raise NotImplementedError

    def encoder_module(self) -> nn.Module:
        raise NotImplementedError

    def parameter_groups(self) -> list[dict]:
        encoder_params = list(self.encoder_module().parameters())
        encoder_ids = {id(p) for p in encoder_params}
        head_params = [p for p in self.parameters() if id(p) not in encoder_ids]
        return [{"params": encoder_params, "role": "encoder"},
                {"params": head_params, "role": "heads"}]

    def _check_finite(self, losses: dict[str, torch.Tensor], batch: Batch,
                      logits: torch.Tensor | None) -> dict[str, torch.Tensor]:
        for name, value in losses.items():
            if not torch.isfinite(value):
                raise TrainingDiverged(f"{name} is {value.item()}", batch.post_ids, logits)
        return losses

    # -- inference surface -------------------------------------------------
    def predict_probs_batch(self, batch: Batch) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def predict_probs(self, posts: Sequence[Post]) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            batch = self.collator.collate(posts, with_bias=False)
            return self.predict_probs_batch(batch)
        finally:
            self.train(was_training)

    def predict_decisions(self, posts: Sequence[Post]) -> list[frozenset[int]]:
        return decide(self.predict_probs(posts), self.task_kind)


def compute_losses(model: DebiasModel, batch: Batch, lam: float,
                   alpha: float) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Joint objective: L_main on the fused prediction, L_bias on the bias
    branch alone, combined as L = L_main + lam * L_bias."""
    out_main = model.forward_main(batch.main_ids, batch.main_mask, batch.domain_idx)
    if model.cfg.use_bias_branch:
        out_bias = model.forward_bias(batch.bias_ids, batch.bias_mask, batch.bias_len)
        fused = fuse(out_main["probs"], out_bias["probs"], alpha)
        l_main = nll_from_probs(fused, batch.targets, model.task_kind)
        l_bias = nll_from_probs(out_bias["probs"], batch.targets, model.task_kind)
    else:
        l_main = nll_from_probs(out_main["probs"], batch.targets, model.task_kind)
        l_bias = torch.zeros((), dtype=l_main.dtype, device=l_main.device)
    return l_main, l_bias, l_main + lam * l_bias


class DebiasSystem(System):
    """The full method: expert attention, bias branch, masking augmentation.

    Ablations are model-config switches (``use_experts``, ``use_bias_branch``)
    plus ``mask_prob=0``; all combinations train through the same loss path.
    """

    strategy = "debias"
    supports_sequential = True

    def __init__(self, model: DebiasModel, collator: Collator, lam: float,
                 alpha: float | None = None, mask_prob: float | None = None):
        super().__init__(collator, model.task_kind)
        self.model = model
        self.lam = lam
        self.alpha = model.cfg.alpha if alpha is None else alpha
        self.mask_prob = model.cfg.mask_prob if mask_prob is None else mask_prob
        self.bias_only = False

    def encoder_module(self) -> nn.Module:
        return self.model.encoder

    def collate_train(self, posts: Sequence[Post], rng: random.Random) -> Batch:
        return self.collator.collate(posts, mask_prob=self.mask_prob, rng=rng,
                                     with_bias=self.model.cfg.use_bias_branch)

    def training_losses(self, batch: Batch) -> dict[str, torch.Tensor]:
        if self.bias_only:
            out_bias = self.model.forward_bias(batch.bias_ids, batch.bias_mask,
                                               batch.bias_len)
            l_bias = nll_from_probs(out_bias["probs"], batch.targets, self.task_kind)
            losses = {"loss": l_bias, "L_main": torch.zeros_like(l_bias), "L_bias": l_bias}
            return self._check_finite(losses, batch, out_bias["logits"])
        l_main, l_bias, total = compute_losses(self.model, batch, self.lam, self.alpha)
        losses = {"loss": total, "L_main": l_main, "L_bias": l_bias}
        return self._check_finite(losses, batch, None)

    def set_bias_only(self, flag: bool) -> None:
        if not self.model.cfg.use_bias_branch:
            raise RuntimeError("sequential training needs the bias branch")
        self.bias_only = flag

    def freeze_bias(self) -> None:
        for module in (self.model.bias_cnn, self.model.bias_proj, self.model.bias_predictor):
            for p in module.parameters():
                p.requires_grad_(False)

    def predict_probs_batch(self, batch: Batch) -> torch.Tensor:
        probs, _ = self.model.infer(batch.main_ids, batch.main_mask, batch.domain_idx)
        return probs

    @torch.no_grad()
    def infer_post(self, post: Post, domain: str | None = None):
        """Single-post inference; the event's domain is known a priori."""
        from .model import Prediction
        batch = self.collator.collate([post], with_bias=False)
        if domain is not None:
            batch.domain_idx = torch.tensor([self.model.domain_index(domain)])
        was_training = self.training
        self.eval()
        try:
            probs, decisions = self.model.infer(batch.main_ids, batch.main_mask,
                                                batch.domain_idx)
        finally:
            self.train(was_training)
        return Prediction(probs=tuple(probs[0].tolist()), task_kind=self.task_kind), decisions[0]


class PooledClassifier(nn.Module):
    """Encoder + pooled [CLS] + two-layer predictor (the vanilla backbone)."""

    def __init__(self, encoder: nn.Module, d: int, hidden: int, n_labels: int,
                 dropout: float, task_kind: str):
        super().__init__()
        self.encoder = encoder
        self.predictor = Predictor(d, hidden, n_labels, dropout)
        self.task_kind = task_kind

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> dict[str, torch.Tensor]:
        enc = self.encoder(ids, mask)
        pooled = enc.H[:, 0]
        logits = self.predictor(pooled)
        return {"probs": probs_from_logits(logits, self.task_kind), "logits": logits,
                "pooled": pooled, "encoder_attentions": enc.attentions,
                "attention_mask": enc.attention_mask}
