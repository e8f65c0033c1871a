"""Training recipes: warmup LR schedule, proxy-NCA attribute discriminator,
triplet re-id expert with random erasing and PK batching.

Reference mode pins torch to a single thread so repeated runs with the same
seed produce identical loss histories.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import DatasetView, random_erase, sample_pk_batch, shuffle_channels
from .losses import LossConfig, ProxyBank, nearest_proxy, proxy_nca_loss, triplet_loss
from .metrics import recall_at_k
from .model import (EmbeddingModel, ModelDescriptor, build_model, embed,
                    samples_to_tensor, save_checkpoint)

RECIPES = ("brand_proxynca", "reid_triplet")


@dataclass
class TrainConfig:
    recipe: str = "reid_triplet"
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    total_epochs: int = 120
    decay_milestones: list[int] = field(default_factory=lambda: [40, 70, 100])
    decay_factor: float = 0.1
    batch_pk: tuple[int, int] = (8, 4)
    seed: int = 0
    erase_probability: float = 0.5
    channel_shuffle_probability: float = 0.5
    eval_every: int = 5

    def validate(self) -> None:
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")
        if self.total_epochs > 0 and self.warmup_epochs >= self.total_epochs:
            raise ValueError("warmup_epochs must be < total_epochs")
        ms = self.decay_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("decay_milestones must be strictly increasing")
        if ms and ms[0] <= self.warmup_epochs:
            raise ValueError("decay_milestones must come after warmup")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must be in (0, 1)")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")


def desk_config(recipe: str, seed: int = 0, epochs: int = 20) -> TrainConfig:
    """Small-scale profile for CPU runs on synthetic data."""
    return TrainConfig(
        recipe=recipe, base_lr=1e-3, warmup_epochs=max(1, epochs // 10),
        total_epochs=epochs, decay_milestones=[max(2, int(epochs * 0.7))],
        decay_factor=0.1, batch_pk=(4, 4), seed=seed, eval_every=5)


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    current_lr: float = 0.0
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    lr_history: list[tuple[int, float]] = field(default_factory=list)
    best_metric: float = float("-inf")
    checkpoint_refs: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class TrainResult:
    model: EmbeddingModel
    state: TrainState
    bank: ProxyBank | None = None


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warmup from base_lr/10 to base_lr, then stepped decay."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.base_lr * (0.1 + 0.9 * frac)
    hits = sum(1 for m in config.decay_milestones if epoch >= m)
    return config.base_lr * config.decay_factor ** hits


def _attribute_labels(samples, attribute: str) -> np.ndarray:
    vals = [getattr(s, f"{attribute}_id") for s in samples]
    if any(v is None for v in vals):
        raise ValueError(f"{attribute}_id labels missing from train split")
    return np.asarray(vals)


def train(view: DatasetView, descriptor: ModelDescriptor,
          loss_config: LossConfig, config: TrainConfig,
          out_dir: str | Path | None = None,
          attribute: str = "brand",
          reference_mode: bool = True) -> TrainResult:
    """Run one training recipe and return the model plus its state.

    brand_proxynca: CBAM-1 + GA discriminator trained on a coarse attribute.
    reid_triplet: identity expert with PK batches, batch-hard triplets, and
    random erasing.
    """
    config.validate()
    loss_config.validate()
    if reference_mode:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    train_samples = view.split("train")
    if not train_samples:
        raise ValueError("train split is empty")
    if config.recipe == "brand_proxynca":
        raw_labels = _attribute_labels(train_samples, attribute)
        classes = np.unique(raw_labels)
        label_map = {int(c): i for i, c in enumerate(classes)}
        labels = np.array([label_map[int(v)] for v in raw_labels])
    else:
        labels = np.asarray([s.identity_id for s in train_samples])
        label_map = None

    model = build_model(descriptor, seed=config.seed)
    state = TrainState()
    bank = None
    params = list(model.parameters())
    if config.recipe == "brand_proxynca":
        bank = ProxyBank(len(np.unique(labels)), descriptor.embedding_dim,
                         seed=config.seed)
        loss_config.num_proxies = bank.num_proxies
        params += list(bank.parameters())
    if config.total_epochs == 0:
        return TrainResult(model=model, state=state, bank=bank)

    opt = torch.optim.Adam(params, lr=config.base_lr)
    P, K = config.batch_pk
    batch_size = P * K
    steps_per_epoch = max(1, len(train_samples) // batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    res = descriptor.input_resolution

    for epoch in range(config.total_epochs):
        lr = lr_at(config, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        state.epoch, state.current_lr = epoch, lr
        model.train()
        for _ in range(steps_per_epoch):
            if config.recipe == "brand_proxynca":
                idx = rng.choice(len(train_samples),
                                 size=min(batch_size, len(train_samples)),
                                 replace=False)
                batch = [shuffle_channels(
                    random_erase(train_samples[i],
                                 probability=config.erase_probability, rng=rng),
                    probability=config.channel_shuffle_probability, rng=rng)
                         for i in idx]
                y = torch.as_tensor(labels[idx])
                x = samples_to_tensor(batch, res)
                loss = proxy_nca_loss(model(x), y, bank, loss_config)
            else:
                tb = sample_pk_batch(view, min(P, len(set(labels))), K, rng)
                batch = [random_erase(view.samples[i],
                                      probability=config.erase_probability,
                                      rng=rng)
                         for i in tb.indices]
                y = torch.as_tensor(
                    [view.samples[i].identity_id for i in tb.indices])
                x = samples_to_tensor(batch, res)
                loss = triplet_loss(model(x), y, loss_config)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {state.step}: "
                    f"{loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            state.loss_history.append((state.step, float(loss.item())))
            state.lr_history.append((state.step, lr))

        milestone = epoch in config.decay_milestones
        last = epoch == config.total_epochs - 1
        check_eval = (epoch + 1) % config.eval_every == 0 or last
        if check_eval:
            metric = _validation_metric(model, bank, view, train_samples,
                                        labels, config)
            if metric > state.best_metric:
                state.best_metric = metric
                if out_dir is not None:
                    ref = save_checkpoint(model, out_dir / "best.npz")
                    state.checkpoint_refs.append(ref)
        if milestone and out_dir is not None:
            ref = save_checkpoint(model, out_dir / f"epoch_{epoch:04d}.npz")
            state.checkpoint_refs.append(ref)
    if out_dir is not None:
        ref = save_checkpoint(model, out_dir / "final.npz")
        state.checkpoint_refs.append(ref)
    return TrainResult(model=model, state=state, bank=bank)


def _validation_metric(model, bank, view, train_samples, labels, config):
    """Nearest-proxy accuracy (brand recipe) or Recall@1 on a held slice."""
    probe = train_samples[:64]
    embs = embed(model, probe, normalize=False)
    if config.recipe == "brand_proxynca":
        pred = nearest_proxy(torch.from_numpy(embs), bank).numpy()
        return float((pred == labels[:len(probe)]).mean())
    if len(probe) < 2:
        return 0.0
    return recall_at_k(embs, labels[:len(probe)], [1])[1]


def export_loss_csv(state: TrainState, path: str | Path) -> None:
    """Loss curve as CSV rows (step, loss, lr)."""
    lr_by_step = dict(state.lr_history)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "lr"])
        for step, loss in state.loss_history:
            w.writerow([step, f"{loss:.8f}", f"{lr_by_step.get(step, 0.0):.8g}"])


_CONFIG_KEYS = {
    "recipe": str, "base_lr": float, "warmup_epochs": int, "total_epochs": int,
    "decay_factor": float, "seed": int, "erase_probability": float,
    "channel_shuffle_probability": float, "eval_every": int,
}


def parse_train_config(path: str | Path) -> TrainConfig:
    """Flat key-value config: `key = value`, one per line, # comments."""
    config = TrainConfig()
    errors = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected `key = value`")
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "decay_milestones":
            config.decay_milestones = ([int(v) for v in value.split(",") if v]
                                       if value else [])
        elif key in ("P", "K"):
            pk = list(config.batch_pk)
            pk[0 if key == "P" else 1] = int(value)
            config.batch_pk = tuple(pk)
        elif key in _CONFIG_KEYS:
            try:
                setattr(config, key, _CONFIG_KEYS[key](value))
            except ValueError:
                errors.append(f"line {lineno}: bad value for {key}: {value!r}")
        else:
            errors.append(f"line {lineno}: unknown key {key!r}")
    if errors:
        raise ValueError("config errors: " + "; ".join(errors))
    config.validate()
    return config
