"""Training engine: binary cross-entropy from logits, Adam, the epoch loop."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import metrics as seg_metrics
from .arch import SeUNetTrans
from .ops import _sigmoid_stable
from .tensor import AutodiffError, Parameter, ShapeError, Tape, Tensor, _accum, _record, backward_accumulate

__all__ = ["bce_loss", "Adam", "EpochLog", "train_loop"]


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean per-pixel binary cross-entropy, computed from logits.

    Uses the log-sum-exp form ``max(z, 0) - z*y + log(1 + exp(-|z|))`` so
    saturated predictions stay finite; equals the naive probability form in
    the interior. ``target`` must contain only 0s and 1s.
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    z = logits.data
    if z.shape != y.shape:
        raise ShapeError(f"bce_loss shape mismatch: logits {z.shape} vs target {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_loss target must contain only 0 and 1")
    y = y.astype(z.dtype, copy=False)
    per_pixel = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(per_pixel.mean())
    n = z.size

    def backward(g: np.ndarray) -> None:
        _accum(logits, ((_sigmoid_stable(z) - y) * (g / n)).astype(z.dtype, copy=False))

    _record(out, backward)
    return out


class Adam:
    """Classic Adam with bias correction and coupled (L2-style) weight decay.

    Weight decay is added to the raw gradient as ``lambda * theta`` before the
    moment updates. Gradients are cleared after each step. Per-parameter
    updates are independent, so enumeration order does not affect the result.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise AutodiffError("Adam.step called with no populated gradients")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "m": {p.name: m for p, m in zip(self.params, self.m)},
            "v": {p.name: v for p, v in zip(self.params, self.v)},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        for i, p in enumerate(self.params):
            if p.name in state["m"]:
                self.m[i] = state["m"][p.name].copy()
                self.v[i] = state["v"][p.name].copy()


@dataclass
class EpochLog:
    epoch: int
    loss: float
    mdc: Optional[float] = None
    miou: Optional[float] = None
    mpre: Optional[float] = None
    mrec: Optional[float] = None

    def line(self, total_epochs: int) -> str:
        parts = [f"epoch {self.epoch}/{total_epochs}", f"loss {self.loss:.6f}"]
        if self.mdc is not None:
            parts += [
                f"mDC {self.mdc:.4f}",
                f"mIoU {self.miou:.4f}",
                f"mPre {self.mpre:.4f}",
                f"mRec {self.mrec:.4f}",
            ]
        return " ".join(parts)


def _sample_arrays(sample) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(sample, "image") and hasattr(sample, "mask"):
        return sample.image, sample.mask
    image, mask = sample
    return image, mask


def evaluate_model(model: SeUNetTrans, samples: Sequence, batch_size: int = 8,
                   threshold: float = 0.5) -> seg_metrics.MetricReport:
    """Eval-mode forward over ``samples``; per-image metrics in given order."""
    model.eval()
    preds: list[np.ndarray] = []
    gts: list[np.ndarray] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        x = Tensor(np.stack([_sample_arrays(s)[0] for s in chunk]).astype(model.dtype))
        probs = model.forward(x).data
        for i, s in enumerate(chunk):
            preds.append(probs[i])
            gts.append(_sample_arrays(s)[1])
    return seg_metrics.dataset_metrics(preds, gts, threshold=threshold)


def train_loop(
    model: SeUNetTrans,
    samples: Sequence,
    epochs: int,
    batch_size: int = 8,
    seed: int = 0,
    optimizer: Optional[Adam] = None,
    checkpoint_dir: Optional[Path] = None,
    checkpoint_every: int = 10,
    metrics_every: int = 1,
    log_fn: Optional[Callable[[str], None]] = None,
) -> list[EpochLog]:
    """Seeded mini-batch training with periodic checkpoints.

    Batches are drawn from a fresh shuffled permutation each epoch; the last
    partial batch is kept. A checkpoint is written at every epoch divisible by
    ``checkpoint_every`` and at the final epoch.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    if len(samples) == 0:
        raise ValueError("train_loop needs a non-empty dataset")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    opt = optimizer if optimizer is not None else Adam(model.parameters())
    rng = np.random.default_rng(seed)
    n = len(samples)
    logs: list[EpochLog] = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    arrays = [_sample_arrays(s) for s in samples]
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            x = Tensor(np.stack([arrays[i][0] for i in idx]).astype(model.dtype))
            y = np.stack([arrays[i][1] for i in idx]).astype(model.dtype)
            with Tape() as tape:
                logits = model.forward_logits(x)
                loss = bce_loss(logits, y)
                backward_accumulate(tape, loss)
            opt.step()
            total_loss += loss.item() * len(idx)
        log = EpochLog(epoch=epoch, loss=total_loss / n)
        if metrics_every and (epoch % metrics_every == 0 or epoch == epochs):
            report = evaluate_model(model, samples, batch_size=batch_size)
            log.mdc, log.miou = report.mdc, report.miou
            log.mpre, log.mrec = report.mpre, report.mrec
        logs.append(log)
        if log_fn is not None:
            log_fn(log.line(epochs))
        if checkpoint_dir is not None and (epoch % checkpoint_every == 0 or epoch == epochs):
            save_checkpoint(checkpoint_dir / f"epoch_{epoch:04d}.seut", model, opt, epoch, seed)
    return logs
