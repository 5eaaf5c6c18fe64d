"""Joint optimization loop, scheduling, and checkpoint selection.

Expert routing falls out of the computation graph: a step only builds the
attention of experts whose domains occur in the batch, their gradients are the
only ones populated (``zero_grad(set_to_none=True)``), and Adam skips
parameters without gradients, so absent experts stay bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from .corpus import Corpus
from .data import iter_batches
from .evaluation import evaluate
from .model import ModelConfig
from .systems import System, compute_losses  # noqa: F401  (compute_losses is part of the API)


@dataclass
class TrainConfig:
    lam: float = 0.2
    alpha: float | None = None       # None -> model config value
    mask_prob: float | None = None   # None -> model config value
    epochs: int = 30
    batch_size: int = 32
    lr_encoder: float = 1e-5
    lr_heads: float = 1e-4
    scheduler: str = "cosine"        # cosine without warmup, or "constant"
    seed: int = 0
    patience: int | None = None
    sequential_bias: bool = False
    validate_with_masking: bool = False  # clean-eval convention, kept in the manifest

    def __post_init__(self):
        if self.lam < 0.0:
            raise ValueError("lam must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.scheduler not in ("cosine", "constant"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CheckpointManifest:
    epoch: int
    seed: int
    config_hash: str
    valid_macro_f1: float
    path: str
    config: dict = field(default_factory=dict)
    domains: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    strategy: str = "debias"

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "valid_macro_f1": self.valid_macro_f1,
            "checkpoint_file": self.path,
            "config": self.config,
            "domains": self.domains,
            "labels": self.labels,
            "strategy": self.strategy,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "CheckpointManifest":
        return cls(epoch=payload["epoch"], seed=payload["seed"],
                   config_hash=payload["config_hash"],
                   valid_macro_f1=payload["valid_macro_f1"],
                   path=payload["checkpoint_file"], config=payload.get("config", {}),
                   domains=list(payload.get("domains", [])),
                   labels=list(payload.get("labels", [])),
                   strategy=payload.get("strategy", "debias"))


def config_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def make_optimizer(system: System, cfg: TrainConfig) -> torch.optim.Adam:
    groups = []
    for group in system.parameter_groups():
        lr = cfg.lr_encoder if group["role"] == "encoder" else cfg.lr_heads
        groups.append({"params": group["params"], "lr": lr})
    return torch.optim.Adam(groups)


def make_scheduler(optimizer: torch.optim.Optimizer, cfg: TrainConfig,
                   total_steps: int):
    if cfg.scheduler == "constant":
        return None
    return torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps)))


def train_step(system: System, batch, optimizer: torch.optim.Optimizer,
               scheduler=None) -> dict[str, float]:
    """One optimizer step; returns the detached loss record."""
    system.train()
    optimizer.zero_grad(set_to_none=True)
    losses = system.training_losses(batch)
    losses["loss"].backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return {name: float(value.detach()) for name, value in losses.items()}


def fit(train: Corpus, valid: Corpus, cfg: TrainConfig,
        build_system: Callable[[], System], out_dir: str | Path,
        strategy: str | None = None,
        metrics_hook: Callable[[dict], None] | None = None) -> CheckpointManifest:
    """Run the joint loop, validate each epoch, keep the best checkpoint.

    ``build_system`` is invoked after seeding so parameter initialization is
    reproducible; the returned manifest points at the saved best checkpoint.
    """
    if not train.posts:
        raise ValueError("training split is empty")
    if not valid.posts:
        raise ValueError("validation split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    shuffle_rng = random.Random(f"{cfg.seed}-shuffle")
    mask_rng = random.Random(f"{cfg.seed}-mask")

    system = build_system()
    strategy = strategy or system.strategy
    optimizer = make_optimizer(system, cfg)
    steps_per_epoch = math.ceil(len(train.posts) / cfg.batch_size)
    scheduler = make_scheduler(optimizer, cfg, total_steps=cfg.epochs * steps_per_epoch)

    phase_epochs: list[tuple[str, int]] = [("joint", cfg.epochs)]
    if cfg.sequential_bias:
        if not system.supports_sequential:
            raise ValueError(f"strategy {strategy!r} cannot train sequentially")
        first = max(1, cfg.epochs // 2)
        phase_epochs = [("bias", first), ("main", cfg.epochs - first)]
        system.set_bias_only(True)

    model_cfg = system.model_cfg
    manifest_payload = {
        "model": model_cfg.to_dict() if isinstance(model_cfg, ModelConfig) else None,
        "train": cfg.to_dict(),
        "strategy": strategy,
        "strategy_params": dict(system.strategy_params),
    }
    cfg_hash = config_hash(manifest_payload)

    metrics_path = out_dir / "metrics.jsonl"
    best: CheckpointManifest | None = None
    best_state: dict | None = None
    epochs_since_best = 0
    epoch = 0

    with metrics_path.open("w", encoding="utf-8") as metrics_file:
        for phase, n_epochs in phase_epochs:
            if phase == "main":
                system.set_bias_only(False)
                system.freeze_bias()
            for _ in range(n_epochs):
                epoch += 1
                records = []
                for posts in iter_batches(train.posts, cfg.batch_size, shuffle_rng):
                    batch = system.collate_train(posts, mask_rng)
                    records.append(train_step(system, batch, optimizer, scheduler))
                mean = {k: sum(r[k] for r in records) / len(records) for k in records[0]}
                report = evaluate(system, valid, seed=cfg.seed, strategy=strategy)
                row = {"epoch": epoch, "phase": phase, "L_main": mean.get("L_main", 0.0),
                       "L_bias": mean.get("L_bias", 0.0), "loss": mean["loss"],
                       "valid_macro_f1": report.macro_f1}
                metrics_file.write(json.dumps(row) + "\n")
                if metrics_hook is not None:
                    metrics_hook(row)

                selectable = phase != "bias"
                if selectable and (best is None or report.macro_f1 > best.valid_macro_f1):
                    best = CheckpointManifest(
                        epoch=epoch, seed=cfg.seed, config_hash=cfg_hash,
                        valid_macro_f1=report.macro_f1, path="checkpoint.pt",
                        config=manifest_payload,
                        domains=list(system.collator.domain_index),
                        labels=list(train.label_space.names), strategy=strategy)
                    best_state = {k: v.detach().clone()
                                  for k, v in system.state_dict().items()}
                    epochs_since_best = 0
                elif selectable:
                    epochs_since_best += 1
                    if cfg.patience is not None and epochs_since_best > cfg.patience:
                        break

    assert best is not None and best_state is not None
    system.load_state_dict(best_state)
    save_checkpoint(system, best, out_dir / best.path)
    with (out_dir / "checkpoint_manifest.json").open("w", encoding="utf-8") as fh:
        json.dump(best.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return best


def select_checkpoint(manifests: Sequence[CheckpointManifest]) -> CheckpointManifest:
    """Maximal validation macro-F1; ties resolve to the earliest epoch."""
    if not manifests:
        raise ValueError("no checkpoints to select from")
    return min(manifests, key=lambda m: (-m.valid_macro_f1, m.epoch))


def save_checkpoint(system: System, manifest: CheckpointManifest, path: str | Path) -> None:
    payload = {
        "state_dict": system.state_dict(),
        "manifest": manifest.to_dict(),
        "vocab": system.collator.vocab.to_dict(),
        "label_space": {"task_kind": system.collator.label_space.task_kind,
                        "names": list(system.collator.label_space.names)},
        "domains": manifest.domains,
        "train_events": list(system.train_event_ids),
    }
    torch.save(payload, path)


def load_checkpoint_payload(path: str | Path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)
