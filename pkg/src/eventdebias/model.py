"""Neural components: domain-expert attention pooling, main predictor, bias
branch, prediction fusion, and bias-free inference.

The bias branch (CNN over the counterfactual sequence's representations plus
its own predictor) exists only to absorb the direct effect of event-specific
tokens during training; inference never reads it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import MULTI_CLASS, MULTI_LABEL, LabelSpace
from .encoder import EncoderConfig, EncoderOutput, build_encoder
from .tokenization import Vocab


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    hidden: int = 384
    dropout: float = 0.2
    alpha: float = 0.1
    cnn_layers: int = 5
    cnn_channels: int = 64
    mask_prob: float = 0.5
    detach_bias_encoder: bool = False
    use_experts: bool = True
    use_bias_branch: bool = True
    include_cls_in_attention: bool = True  # recorded in the manifest
    unknown_domain_fallback: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob {self.mask_prob} outside [0, 1]")
        if min(self.hidden, self.cnn_layers, self.cnn_channels) < 1:
            raise ValueError("hidden/cnn widths must be positive")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "encoder"}
        d["encoder"] = dict(self.encoder.__dict__)
        return d

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        payload = dict(payload)
        enc = EncoderConfig(**payload.pop("encoder"))
        return cls(encoder=enc, **payload)


@dataclass(frozen=True)
class Prediction:
    """Probability vector on the label space for one post."""

    probs: tuple[float, ...]
    task_kind: str

    def __post_init__(self):
        if any(p < 0.0 or p > 1.0 + 1e-6 for p in self.probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.task_kind == MULTI_CLASS and abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError("multi-class probabilities must sum to 1")


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over valid positions only; masked positions come out exactly 0."""
    filled = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(filled, dim=-1)


def expert_attention_scores(H: torch.Tensor, mask: torch.Tensor,
                            weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """softmax(H W_q + b_q) over the valid positions of each row.

    ``H`` is (batch, m, d), ``weight`` (d,) or (d, 1), ``bias`` scalar;
    returns (batch, m) attention summing to 1 on valid positions.
    """
    logits = H @ weight.reshape(-1) + bias.reshape(())
    return masked_softmax(logits, mask)


def pool(H: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """R = sum_i a_i h_i for each row; (batch, m, d) x (batch, m) -> (batch, d)."""
    if H.shape[:2] != attention.shape:
        raise ValueError(f"attention {tuple(attention.shape)} does not match H "
                         f"{tuple(H.shape)}")
    return torch.einsum("bm,bmd->bd", attention, H)


def fuse(y_main: torch.Tensor, y_bias: torch.Tensor, alpha: float) -> torch.Tensor:
    """Convex combination (1 - alpha) * y_main + alpha * y_bias, elementwise."""
    if y_main.shape != y_bias.shape:
        raise ValueError(f"shape mismatch {tuple(y_main.shape)} vs {tuple(y_bias.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    return (1.0 - alpha) * y_main + alpha * y_bias


def probs_from_logits(logits: torch.Tensor, task_kind: str) -> torch.Tensor:
    if task_kind == MULTI_CLASS:
        return torch.softmax(logits, dim=-1)
    return torch.sigmoid(logits)


def decide(probs: torch.Tensor, task_kind: str) -> list[frozenset[int]]:
    """Decision rule: argmax with lowest-index tie-break, or >= 0.5 per label."""
    if task_kind == MULTI_CLASS:
        return [frozenset({int(row.argmax())}) for row in probs]
    return [frozenset(i for i, p in enumerate(row.tolist()) if p >= 0.5) for row in probs]


class ExpertBank(nn.Module):
    """One (W_q, b_q) attention query per domain; gradients stay per-expert."""

    def __init__(self, d: int, domains: tuple[str, ...],
                 unknown_fallback: bool = False, init_std: float = 0.02):
        super().__init__()
        if not domains:
            raise ValueError("expert bank needs at least one domain")
        self.domains = tuple(domains)
        self.domain_index = {name: i for i, name in enumerate(self.domains)}
        self.unknown_fallback = unknown_fallback
        self.queries = nn.ModuleList(nn.Linear(d, 1) for _ in self.domains)
        for q in self.queries:
            nn.init.normal_(q.weight, std=init_std)
            nn.init.zeros_(q.bias)

    def index_of(self, domain: str) -> int:
        try:
            return self.domain_index[domain]
        except KeyError:
            if self.unknown_fallback:
                return -1
            raise KeyError(f"unknown domain {domain!r}; known: {self.domains}") from None

    def forward(self, H: torch.Tensor, mask: torch.Tensor,
                domain_idx: torch.Tensor) -> torch.Tensor:
        """Attention (batch, m), each row computed with its own domain's expert.

        Rows are grouped by domain so only the touched experts enter the graph;
        index -1 selects the uniform fallback for unknown domains.
        """
        attn = H.new_zeros(H.shape[:2])
        for dom in domain_idx.unique().tolist():
            rows = (domain_idx == dom).nonzero(as_tuple=True)[0]
            h, msk = H[rows], mask[rows]
            if dom < 0:
                uniform = msk.to(H.dtype)
                attn[rows] = uniform / uniform.sum(dim=-1, keepdim=True)
                continue
            q = self.queries[dom]
            attn[rows] = expert_attention_scores(h, msk, q.weight, q.bias)
        return attn


class SharedQuery(nn.Module):
    """Single attention query shared by all domains (the no-experts ablation)."""

    def __init__(self, d: int, init_std: float = 0.02):
        super().__init__()
        self.query = nn.Linear(d, 1)
        nn.init.normal_(self.query.weight, std=init_std)
        nn.init.zeros_(self.query.bias)

    def forward(self, H: torch.Tensor, mask: torch.Tensor,
                domain_idx: torch.Tensor) -> torch.Tensor:
        return expert_attention_scores(H, mask, self.query.weight, self.query.bias)


class Predictor(nn.Module):
    """Two-layer feedforward head: d -> hidden (GELU, dropout) -> labels."""

    def __init__(self, d: int, hidden: int, n_labels: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, n_labels)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class BiasCNN(nn.Module):
    """Stack of 1-d convolutions (kernel widths 1..layers) with max-over-time.

    Effective sequence length is clamped to the largest kernel so short
    counterfactual inputs run over the encoder's padding representations; max
    pooling only sees windows inside the effective length, which keeps features
    independent of batch padding.
    """

    def __init__(self, d: int, layers: int = 5, channels: int = 64):
        super().__init__()
        self.min_len = layers
        self.convs = nn.ModuleList(
            nn.Conv1d(d, channels, kernel_size=k) for k in range(1, layers + 1))

    @property
    def out_dim(self) -> int:
        return len(self.convs) * self.convs[0].out_channels

    def forward(self, H: torch.Tensor, true_len: torch.Tensor) -> torch.Tensor:
        if H.size(1) < self.min_len:
            raise ValueError(
                f"bias sequences must be padded to at least {self.min_len} positions")
        eff_len = true_len.clamp(min=self.min_len)
        x = H.transpose(1, 2)
        feats = []
        for k, conv in enumerate(self.convs, start=1):
            c = F.gelu(conv(x))  # (batch, channels, m - k + 1)
            positions = torch.arange(c.size(2), device=c.device)
            valid = positions[None, :] <= (eff_len[:, None] - k)
            c = c.masked_fill(~valid[:, None, :], float("-inf"))
            feats.append(c.max(dim=2).values)
        return torch.cat(feats, dim=1)


class DebiasModel(nn.Module):
    """Shared encoder + expert attention + predictor, with the bias branch.

    ``use_experts=False`` swaps the bank for a single shared query;
    ``use_bias_branch=False`` drops the bias branch entirely (fusion weight is
    then irrelevant). Both switches exist for the ablation study.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocab, label_space: LabelSpace,
                 domains: tuple[str, ...]):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.label_space = label_space
        self.domains = tuple(domains)
        d = cfg.encoder.d
        self.encoder = build_encoder(vocab, cfg.encoder)
        if cfg.use_experts:
            self.attention = ExpertBank(d, self.domains, cfg.unknown_domain_fallback)
        else:
            self.attention = SharedQuery(d)
        self.main_predictor = Predictor(d, cfg.hidden, len(label_space), cfg.dropout)
        if cfg.use_bias_branch:
            self.bias_cnn = BiasCNN(d, cfg.cnn_layers, cfg.cnn_channels)
            self.bias_proj = nn.Linear(self.bias_cnn.out_dim, d)
            self.bias_predictor = Predictor(d, cfg.hidden, len(label_space), cfg.dropout)

    @property
    def task_kind(self) -> str:
        return self.label_space.task_kind

    def domain_index(self, domain: str) -> int:
        if isinstance(self.attention, ExpertBank):
            return self.attention.index_of(domain)
        try:
            return self.domains.index(domain)
        except ValueError:
            if self.cfg.unknown_domain_fallback:
                return -1
            raise KeyError(f"unknown domain {domain!r}; known: {self.domains}") from None

    def encode(self, ids: torch.Tensor, mask: torch.Tensor) -> EncoderOutput:
        return self.encoder(ids, mask)

    def forward_main(self, ids: torch.Tensor, mask: torch.Tensor,
                     domain_idx: torch.Tensor) -> dict[str, torch.Tensor]:
        enc = self.encode(ids, mask)
        attn_mask = enc.attention_mask
        if not self.cfg.include_cls_in_attention:
            attn_mask = attn_mask.clone()
            attn_mask[:, 0] = False
        a = self.attention(enc.H, attn_mask, domain_idx)
        R = pool(enc.H, a)
        logits = self.main_predictor(R)
        return {"probs": probs_from_logits(logits, self.task_kind),
                "logits": logits, "pooled": R, "attention": a,
                "encoder_attentions": enc.attentions}

    def forward_bias(self, bias_ids: torch.Tensor, bias_mask: torch.Tensor,
                     bias_len: torch.Tensor) -> dict[str, torch.Tensor]:
        if not self.cfg.use_bias_branch:
            raise RuntimeError("bias branch is disabled in this configuration")
        enc = self.encode(bias_ids, bias_mask)
        H_b = enc.H.detach() if self.cfg.detach_bias_encoder else enc.H
        z_b = self.bias_cnn(H_b, bias_len)
        logits = self.bias_predictor(self.bias_proj(z_b))
        return {"probs": probs_from_logits(logits, self.task_kind),
                "logits": logits, "feature": z_b}

    @torch.no_grad()
    def infer(self, ids: torch.Tensor, mask: torch.Tensor,
              domain_idx: torch.Tensor) -> tuple[torch.Tensor, list[frozenset[int]]]:
        """Bias-free inference: only the expert for the given domain and the
        main predictor are read."""
        was_training = self.training
        self.eval()
        try:
            out = self.forward_main(ids, mask, domain_idx)
        finally:
            self.train(was_training)
        probs = out["probs"]
        return probs, decide(probs, self.task_kind)
