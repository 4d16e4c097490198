"""Hybrid MSE + feature-reconstruction loss, Adam, and the training loop.

The feature network is a fixed, seeded random conv net. It stands in for a
pretrained VGG, which is out of reach here; its weights never train.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode

from .gridmap import ConfigError
from .nnet import NetConfig, NetParams, ShapeError, check_params, encode_input, forward, init_params


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_mse: float = 10.0
    w_feat: float = 1.0

    def __post_init__(self):
        if self.w_mse < 0 or self.w_feat < 0 or (self.w_mse == 0 and self.w_feat == 0):
            raise ConfigError(f"loss weights must be >= 0 and not both zero, got {self}")


class FeatureNet:
    """Three stride-2 3x3 conv + ReLU layers, 1 -> 8 -> 16 -> 32 channels."""

    channels = (1, 8, 16, 32)

    def __init__(self, seed: int = 0, dtype: torch.dtype = torch.float64):
        self.seed = seed
        rng = np.random.default_rng(seed)
        weights = []
        for cin, cout in zip(self.channels, self.channels[1:]):
            bound = math.sqrt(6.0 / (cin * 9))  # He-uniform keeps activations from shrinking layer to layer
            weights.append(torch.tensor(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)), dtype=dtype))
        self._weights = tuple(weights)

    @property
    def weights(self) -> tuple[torch.Tensor, ...]:
        return tuple(w.clone() for w in self._weights)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """Activations of each layer for [B, 1, H, W] (or [1, H, W]) input."""
        if img.dim() == 3:
            img = img.unsqueeze(0)
        if img.dim() != 4 or img.shape[1] != 1:
            raise ShapeError(f"feature net expects single-channel input, got {list(img.shape)}")
        if img.shape[-1] % 8 or img.shape[-2] % 8:
            raise ShapeError(f"feature net input side must be divisible by 8, got {list(img.shape[-2:])}")
        out = []
        h = img.to(self._weights[0].dtype)
        for w in self._weights:
            h = F.relu(F.conv2d(h, w, stride=2, padding=1))
            out.append(h)
        return out

    def activations(self, img) -> list[np.ndarray]:
        """Per-layer activations of a single 2-D image as numpy arrays."""
        t = torch.as_tensor(np.asarray(img, dtype=np.float64)).reshape(1, 1, *np.shape(img)[-2:])
        with torch.no_grad():
            return [a[0].numpy() for a in self.features(t)]

    def pooled(self, img) -> np.ndarray:
        """Global-average-pooled final-layer activation (feature vector for pFID)."""
        return self.activations(img)[-1].mean(axis=(1, 2))

    def digest(self) -> str:
        h = hashlib.sha256()
        for w in self._weights:
            h.update(w.numpy().astype("<f8").tobytes())
        return h.hexdigest()


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def mse_loss(pred, gt) -> torch.Tensor:
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mse: shapes differ {list(pred.shape)} vs {list(gt.shape)}")
    return torch.mean((pred - gt) ** 2)


def feature_loss(phi: FeatureNet, pred, gt) -> torch.Tensor:
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"feature loss: shapes differ {list(pred.shape)} vs {list(gt.shape)}")
    fp, fg = phi.features(pred), phi.features(gt)
    terms = [torch.mean((a - b) ** 2) for a, b in zip(fp, fg)]
    return sum(terms) / len(terms)


def hybrid_loss(w: LossWeights, phi: FeatureNet, pred, gt) -> torch.Tensor:
    return w.w_mse * mse_loss(pred, gt) + w.w_feat * feature_loss(phi, pred, gt)


def backward(cfg: NetConfig, params: NetParams, x, gt, w: LossWeights, phi: FeatureNet) -> dict[str, torch.Tensor]:
    """Gradient of the hybrid loss with respect to every network parameter."""
    check_params(cfg, params)
    for name, v in params.items():
        if not torch.all(torch.isfinite(v)):
            raise NumericError(f"non-finite parameter at layer {name}")
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    pred = forward(cfg, leaves, x)
    gt = _as_tensor(gt).to(pred.dtype)
    if not torch.all(torch.isfinite(pred)):
        raise NumericError("non-finite network output at layer head")
    loss = hybrid_loss(w, phi, pred, gt)
    if not torch.isfinite(loss):
        raise NumericError("non-finite hybrid loss")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names])
    out = {}
    for n, g in zip(names, grads):
        if not torch.all(torch.isfinite(g)):
            raise NumericError(f"non-finite gradient at layer {n}")
        out[n] = g.detach()
    return out


class _ReluSigns(TorchFunctionMode):
    """Records the sign pattern of every ReLU input evaluated under it."""

    def __init__(self):
        super().__init__()
        self.signs = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func is F.relu or func is torch.relu:
            self.signs.append((args[0] > 0).reshape(-1))
        return func(*args, **(kwargs or {}))


def finite_difference_gradients(loss_fn: Callable[[dict], torch.Tensor], params: dict[str, torch.Tensor],
                                h: float = 1e-5, chunk: int = 256, retries: int = 4) -> dict[str, torch.Tensor]:
    """Central differences of ``loss_fn`` for every parameter element.

    Uses forward evaluations only, ``chunk`` perturbed copies at a time under
    ``torch.func.vmap``. A difference is only valid if no ReLU changes sign
    between the two probes; coordinates where one does are retried with a
    step ten times smaller, up to ``retries`` times.
    """
    from torch.func import vmap

    names = list(params)
    flat = torch.cat([params[n].detach().reshape(-1) for n in names])
    sizes = [params[n].numel() for n in names]
    shapes = [params[n].shape for n in names]

    def unflat(v):
        parts = torch.split(v, sizes)
        return {n: p.reshape(s) for n, p, s in zip(names, parts, shapes)}

    def probe(v):
        with _ReluSigns() as rec:
            loss = loss_fn(unflat(v))
        sig = torch.cat(rec.signs) if rec.signs else torch.zeros(1, dtype=torch.bool)
        return loss, sig

    batched = vmap(probe)
    n = flat.numel()
    grads = torch.empty_like(flat)
    with torch.no_grad():
        base = probe(flat)[1]
        for lo in range(0, n, chunk):
            todo = torch.arange(lo, min(lo + chunk, n))
            step = h
            for _ in range(retries + 1):
                delta = torch.zeros(len(todo), n, dtype=flat.dtype)
                delta[torch.arange(len(todo)), todo] = step
                lp, sp = batched(flat + delta)
                lm, sm = batched(flat - delta)
                ok = (sp == base).all(dim=1) & (sm == base).all(dim=1)
                grads[todo[ok]] = (lp[ok] - lm[ok]) / (2 * step)
                todo = todo[~ok]
                if not len(todo):
                    break
                step /= 10
            if len(todo):
                raise NumericError(f"ReLU kink at parameter index {int(todo[0])} for every step down to {step * 10:g}")
    return unflat(grads)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(state: AdamState, params: NetParams, grads: dict[str, torch.Tensor], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> NetParams:
    """Bias-corrected Adam update; mutates ``state`` and returns new parameter tensors."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {list(g.shape)}, parameter {list(p.shape)}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        out[name] = p - lr * m_hat / (torch.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    lr_late: float = 1e-4
    split_epoch: Optional[int] = None  # None: half of epochs
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.lr_late <= 0:
            raise ConfigError("learning rates must be > 0")

    @property
    def split(self) -> int:
        return self.epochs // 2 if self.split_epoch is None else self.split_epoch

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr if epoch <= self.split else self.lr_late

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    mean_mse: float
    mean_feat: float
    mean_hybrid: float
    lr: float


@dataclass
class TrainState:
    params: NetParams
    adam: AdamState
    epoch: int = 0  # epochs completed
    history: list[EpochRecord] = field(default_factory=list)


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into inputs [N, 3, S, S] and obstacle targets [N, 1, S, S]."""
    xs = np.stack([encode_input(s.obs) for s in samples])
    ys = np.stack([s.gt.numeric()[None] for s in samples])
    return xs, ys


def train(data, net_cfg: NetConfig, cfg: TrainConfig, w: LossWeights = LossWeights(),
          phi: Optional[FeatureNet] = None, state: Optional[TrainState] = None,
          init_seed: Optional[int] = None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Mini-batch Adam on the hybrid loss, resuming from ``state`` if given.

    ``data`` is a sequence of dataset samples or an ``(inputs, targets)`` pair.
    Batches are drawn from a permutation seeded by (seed, epoch), so a resumed
    run replays exactly what an uninterrupted run would have done.
    """
    xs, ys = data if isinstance(data, tuple) else samples_to_arrays(data)
    if len(xs) == 0:
        raise ConfigError("empty training set")
    if xs.shape[1:] != (3, net_cfg.side, net_cfg.side) or ys.shape[1:] != (1, net_cfg.side, net_cfg.side):
        raise ConfigError(f"dataset patches {list(xs.shape[1:])} do not match network side {net_cfg.side}")
    phi = phi or FeatureNet(0)
    if state is None:
        state = TrainState(init_params(net_cfg, cfg.seed if init_seed is None else init_seed), AdamState())
    dtype = net_cfg.torch_dtype
    X = torch.as_tensor(xs, dtype=dtype)
    Y = torch.as_tensor(ys, dtype=dtype)
    n = len(X)
    params = state.params
    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        sums = np.zeros(3)
        for lo in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[lo : lo + cfg.batch_size])
            xb, yb = X[idx], Y[idx]
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            pred = forward(net_cfg, leaves, xb)
            l_mse = mse_loss(pred, yb)
            l_feat = feature_loss(phi, pred, yb)
            loss = w.w_mse * l_mse + w.w_feat * l_feat
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, list(leaves.values()))
            grads = dict(zip(leaves, grads))
            with torch.no_grad():
                params = adam_step(state.adam, {k: v.detach() for k, v in leaves.items()}, grads, lr,
                                   cfg.beta1, cfg.beta2, cfg.eps)
            sums += len(idx) * np.array([l_mse.item(), l_feat.item(), loss.item()])
        sums /= n
        state.params = params
        state.epoch = epoch
        state.history.append(EpochRecord(epoch, *sums.tolist(), lr))
        if on_epoch is not None:
            on_epoch(state)
    return state


def history_csv(history: Sequence[EpochRecord], config_hash: str = "") -> str:
    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "mean_mse", "mean_feat", "mean_hybrid", "lr"])
    for r in history:
        wr.writerow([r.epoch, repr(r.mean_mse), repr(r.mean_feat), repr(r.mean_hybrid), repr(r.lr)])
    return buf.getvalue()


def read_history_csv(text: str) -> list[EpochRecord]:
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rd = csv.DictReader(rows)
    return [EpochRecord(int(r["epoch"]), float(r["mean_mse"]), float(r["mean_feat"]),
                        float(r["mean_hybrid"]), float(r["lr"])) for r in rd]


def save_train_state(path, net_cfg: NetConfig, state: TrainState, extra: Optional[dict] = None) -> None:
    from .nnet import save_checkpoint

    tensors = {}
    for n in state.params:
        if n in state.adam.m:
            tensors[f"adam.m.{n}"] = state.adam.m[n]
            tensors[f"adam.v.{n}"] = state.adam.v[n]
    header = dict(extra or {})
    header.update({"epoch": state.epoch, "adam_step": state.adam.step,
                   "history": [asdict(r) for r in state.history]})
    save_checkpoint(path, net_cfg, state.params, header, tensors)


def load_train_state(path) -> tuple[NetConfig, TrainState, dict]:
    from .nnet import load_checkpoint

    cfg, params, extra, others = load_checkpoint(path)
    adam = AdamState(step=int(extra.get("adam_step", 0)))
    for name, t in others.items():
        t = t.to(cfg.torch_dtype)
        if name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = t
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = t
    history = [EpochRecord(**r) for r in extra.get("history", [])]
    return cfg, TrainState(params, adam, int(extra.get("epoch", 0)), history), extra
