"""Seeded training loop, evaluation, sweeps and activation recording."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..distloss import DistLossConfig, distribution_loss, per_channel_stats, total_loss
from ..errors import ConfigError, NumericError
from ..models import Network, build_network
from ..ops import softmax_cross_entropy
from ..tensor import Tensor
from . import checkpoint
from .config import RunConfig, dump_config
from .data import Dataset, Normalizer, iterate_batches, load_dataset
from .optim import Optimizer, OptimizerConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "ce_loss", "dl_loss", "test_acc", "lr")


@dataclass
class EpochRow:
    epoch: int
    ce_loss: float
    dl_loss: float
    test_acc: float
    lr: float
    wall_time: float
    seed: int


@dataclass
class RunRecord:
    rows: list[EpochRow] = field(default_factory=list)
    best_acc: float = -1.0
    best_epoch: int = -1
    best_checkpoint: checkpoint.Checkpoint | None = None
    final_checkpoint: checkpoint.Checkpoint | None = None

    @property
    def final_acc(self) -> float:
        return self.rows[-1].test_acc if self.rows else float("nan")

    def metrics_csv(self) -> str:
        """Deterministic per-epoch metrics (wall time lives in :meth:`timing_csv`)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([r.epoch, repr(r.ce_loss), repr(r.dl_loss), repr(r.test_acc), repr(r.lr)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "seconds"))
        for r in self.rows:
            w.writerow([r.epoch, f"{r.wall_time:.3f}"])
        return buf.getvalue()


def _dl_value(taps, cfg: DistLossConfig) -> float:
    """Distribution-loss value computed without building graph nodes."""
    total = 0.0
    for tap in taps:
        mu, sigma = per_channel_stats(Tensor(tap.values), cfg.eps_std)
        m, s = mu.values.astype(np.float64), sigma.values.astype(np.float64)
        total += float(np.sum(np.maximum(np.abs(m) - cfg.k_d * s, 0) ** 2
                              + np.maximum(cfg.k_s * s - 1, 0) ** 2
                              + np.maximum(1 - np.abs(m) - cfg.k_m * s, 0) ** 2))
    return total


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> float:
    """Top-1 accuracy in eval (moving-statistics) mode."""
    net.eval()
    dtype = net.dtype
    correct = 0
    for xb, yb in iterate_batches(x, y, batch_size):
        logits = net(Tensor(xb.astype(dtype, copy=False)))
        correct += int(np.sum(np.argmax(logits.values, axis=1) == yb))
    return correct / max(len(y), 1)


def predict(net: Network, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    net.eval()
    out = []
    for start in range(0, len(x), batch_size):
        logits = net(Tensor(x[start:start + batch_size].astype(net.dtype, copy=False)))
        out.append(np.argmax(logits.values, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train(net: Network, train_set: Dataset, test_set: Dataset, optim_cfg: OptimizerConfig,
          dl_cfg: DistLossConfig, epochs: int, seed: int, batch_size: int = 100,
          do_augment: bool = True, meta: dict | None = None, log_every: int = 0) -> RunRecord:
    """Train ``net`` with cross-entropy plus ``lam`` times the distribution loss.

    Returns per-epoch metrics and the best/final checkpoints. The batch
    stream is a pure function of ``seed``.
    """
    if epochs < 1:
        raise ConfigError("epochs must be >= 1")
    dtype = net.dtype
    norm = Normalizer.fit(train_set.images)
    xtr = norm(train_set.images, dtype)
    xte = norm(test_set.images, dtype)
    meta = dict(meta or {})
    meta.update(norm_mean=norm.mean.tolist(), norm_std=norm.std.tolist(), seed=seed)
    opt = Optimizer(list(net.named_parameters()), optim_cfg)
    record = RunRecord()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = optim_cfg.lr_at(epoch, epochs)
        rng = np.random.default_rng([seed, epoch])
        net.train()
        ce_sum = dl_sum = 0.0
        nb = 0
        for xb, yb in iterate_batches(xtr, train_set.labels, batch_size, rng, do_augment):
            logits = net(Tensor(xb))
            ce = softmax_cross_entropy(logits, yb)
            taps = net.taps()
            if dl_cfg.lam > 0:
                dl = distribution_loss(taps, dl_cfg)
                dl_val = dl.item()
            else:
                dl = None
                dl_val = _dl_value(taps, dl_cfg)
            loss = total_loss(ce, dl, dl_cfg.lam)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {nb}")
            net.zero_grad()
            loss.backward()
            opt.step(lr)
            ce_sum += ce.item()
            dl_sum += dl_val
            nb += 1
            if log_every and nb % log_every == 0:
                log.info("epoch %d batch %d ce %.4f dl %.4g", epoch + 1, nb, ce.item(), dl_val)
        acc = evaluate(net, xte, test_set.labels)
        row = EpochRow(epoch + 1, ce_sum / nb, dl_sum / nb, acc, lr, time.perf_counter() - t0, seed)
        record.rows.append(row)
        log.info("epoch %d ce %.4f dl %.4g acc %.4f lr %.3g", row.epoch, row.ce_loss, row.dl_loss, acc, lr)
        ck_meta = dict(meta, epoch=epoch + 1, test_acc=acc)
        if acc > record.best_acc:
            record.best_acc, record.best_epoch = acc, epoch + 1
            record.best_checkpoint = checkpoint.from_network(net, ck_meta)
    record.final_checkpoint = checkpoint.from_network(net, dict(meta, epoch=epochs, test_acc=record.final_acc),
                                                      opt.state_arrays())
    return record


def network_meta(cfg: RunConfig) -> dict:
    return {"bn_eps": cfg.model.bn_eps, "bn_momentum": cfg.model.bn_momentum, "tap": cfg.model.tap,
            "windowed_weight_ste": cfg.model.windowed_weight_ste, "dataset": cfg.data.dataset}


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    spec = cfg.model.spec()
    train_set, test_set = load_dataset(cfg.data.dataset, cfg.data.path, n_train=cfg.data.n_train,
                                       n_test=cfg.data.n_test, size=spec.input_size, channels=spec.in_channels)
    return train_set.subset(cfg.data.train_limit), test_set.subset(cfg.data.test_limit)


def build_from_config(cfg: RunConfig, seed: int | None = None) -> Network:
    seed = cfg.train.seed if seed is None else seed
    return build_network(cfg.model.spec(), rng=np.random.default_rng(seed), dtype=np.dtype(cfg.model.dtype).type,
                         bn_eps=cfg.model.bn_eps, bn_momentum=cfg.model.bn_momentum, tap=cfg.model.tap,
                         windowed_weight_ste=cfg.model.windowed_weight_ste)


def run(cfg: RunConfig, out_dir=None, data: tuple[Dataset, Dataset] | None = None,
        timing: bool = False) -> RunRecord:
    """Train according to ``cfg`` and optionally write artifacts under ``out_dir``."""
    train_set, test_set = data if data is not None else load_data(cfg)
    spec = cfg.model.spec()
    if train_set.shape != (spec.in_channels, spec.input_size, spec.input_size):
        raise ConfigError(f"network expects input {(spec.in_channels, spec.input_size, spec.input_size)}, "
                          f"dataset provides {train_set.shape}")
    net = build_from_config(cfg)
    record = train(net, train_set, test_set, cfg.optim, cfg.distloss, cfg.train.epochs, cfg.train.seed,
                   cfg.data.batch_size, cfg.data.augment, meta=network_meta(cfg))
    if out_dir is not None:
        write_artifacts(Path(out_dir), cfg, record, timing)
    return record


def write_artifacts(out: Path, cfg: RunConfig, record: RunRecord, timing: bool = False) -> None:
    """Write the run directory; ``timing.csv`` is opt-in since wall time is not reproducible."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.ini").write_text(dump_config(cfg))
    (out / "metrics.csv").write_text(record.metrics_csv())
    if timing:
        (out / "timing.csv").write_text(record.timing_csv())
    checkpoint.save(out / "best.ckpt", record.best_checkpoint)
    checkpoint.save(out / "last.ckpt", record.final_checkpoint)


SWEEP_AXES = ("lam", "optimizer", "lr_scale", "seed")


def sweep(base: RunConfig, axis: str, values, data: tuple[Dataset, Dataset] | None = None,
          out_dir=None) -> list[dict]:
    """Train once per value along ``axis`` and tabulate final/best accuracy."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    data = data if data is not None else load_data(base)
    rows = []
    for value in values:
        cfg = copy.deepcopy(base)
        if axis == "lam":
            cfg.distloss.lam = float(value)
        elif axis == "optimizer":
            cfg.optim.kind = str(value)
        elif axis == "lr_scale":
            cfg.optim.lr_scale = float(value)
        else:
            cfg.train.seed = int(value)
        cfg.validate()
        sub = Path(out_dir) / f"{axis}_{value}" if out_dir is not None else None
        rec = run(cfg, sub, data)
        rows.append({"axis": axis, "value": value, "final_acc": rec.final_acc,
                     "best_acc": rec.best_acc, "best_epoch": rec.best_epoch})
    return rows


def record_preactivations(net: Network, x: np.ndarray, layer: int, batch_size: int = 500,
                          max_per_channel: int = 0, seed: int = 0) -> np.ndarray:
    """Eval-mode values of tap ``layer`` (index into ``net.taps()``) as ``[C, n]``.

    ``max_per_channel`` > 0 keeps a seeded uniform subsample per channel.
    """
    net.eval()
    chunks = []
    for start in range(0, len(x), batch_size):
        net(Tensor(x[start:start + batch_size].astype(net.dtype, copy=False)))
        taps = net.taps()
        if not -len(taps) <= layer < len(taps):
            raise ConfigError(f"tap layer {layer} out of range (network has {len(taps)} taps)")
        t = taps[layer].values
        chunks.append(np.moveaxis(t, 1, 0).reshape(t.shape[1], -1))
    values = np.concatenate(chunks, axis=1)
    if max_per_channel and values.shape[1] > max_per_channel:
        idx = np.sort(np.random.default_rng(seed).choice(values.shape[1], max_per_channel, replace=False))
        values = values[:, idx]
    return values
