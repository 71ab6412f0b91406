"""Victim, student and generator networks plus the victim training recipe.

All networks take and return images in channels-last layout ``(B, H, W, C)``
with values in ``[0, 1]``; the permutation to torch's channels-first layout
happens inside ``forward``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from . import losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dfme-od-network/1"


class Detection(NamedTuple):
    """Black-box victim output for a batch: probs (B, C) and box (B, 4), all in (0, 1)."""

    probs: torch.Tensor
    box: torch.Tensor

    def __len__(self) -> int:  # number of images, not number of fields
        return self.probs.shape[0]


class StudentOutput(NamedTuple):
    pre_label: torch.Tensor
    label: torch.Tensor
    box: torch.Tensor


def sigmoid(v):
    """Numerically stable logistic function for scalars, arrays or tensors."""
    if isinstance(v, torch.Tensor):
        return torch.sigmoid(v)
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out if out.ndim else float(out)


NORMS = ("batch", "group", "none")


def _norm(kind: str, c: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(c)
    if kind == "group":
        # per-sample statistics: identical behaviour in train and eval mode
        return nn.GroupNorm(math.gcd(c, 8), c)
    return nn.Identity()


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description.

    For detectors ``channels`` are the widths of the conv blocks (each block
    halves the resolution) and ``dense`` the width of the shared hidden layer.
    For the generator ``channels`` are the widths of the stride-2 upsampling
    blocks, starting from a ``base`` x ``base`` grid produced by the dense
    projection of the latent vector.
    """

    role: str
    channels: tuple[int, ...]
    dense: int = 128
    class_count: int = 3
    image_side: int = 64
    image_channels: int = 3
    latent_dim: int = 0
    base: int = 8
    convs_per_block: int = 1
    stem_stride: int = 2
    norm: str = "batch"  # detector conv normalization: "batch", "group" or "none"

    def validate(self) -> None:
        if self.role not in ("victim", "student", "generator"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.channels or any(c <= 0 for c in self.channels):
            raise ValueError("channels must be a non-empty list of positive widths")
        if self.role == "generator":
            if self.latent_dim <= 0:
                raise ValueError("generator needs latent_dim > 0")
            if self.base * 2 ** len(self.channels) != self.image_side:
                raise ValueError(
                    f"generator output side {self.base * 2 ** len(self.channels)} "
                    f"!= dataset side {self.image_side}"
                )
        else:
            if self.class_count < 2:
                raise ValueError("class_count must be >= 2")
            if self.image_side % 2 ** len(self.channels):
                raise ValueError("image side not divisible by the pooling stack")
            if self.stem_stride not in (1, 2):
                raise ValueError("stem_stride must be 1 or 2")
            if self.norm not in NORMS:
                raise ValueError(f"norm must be one of {NORMS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


# Named architectures. Two distinct detector families so victim/student pairs
# can differ in architecture.
NAMED_SPECS: dict[str, NetworkSpec] = {
    "victim-a": NetworkSpec("victim", (16, 32, 64, 64), dense=128),
    "victim-b": NetworkSpec("victim", (24, 48, 96), dense=192, convs_per_block=1),
    "student-a": NetworkSpec("student", (16, 32, 64, 64), dense=128),
    "student-b": NetworkSpec("student", (24, 48, 96), dense=192),
    "student-small": NetworkSpec("student", (12, 24, 48, 48), dense=96),
    "generator": NetworkSpec("generator", (64, 32, 16), latent_dim=256, base=8),
}


def get_spec(name: str, **overrides) -> NetworkSpec:
    try:
        spec = NAMED_SPECS[name]
    except KeyError:
        raise KeyError(f"unknown network spec {name!r}; choose from {sorted(NAMED_SPECS)}") from None
    return replace(spec, **overrides) if overrides else spec


class Detector(nn.Module):
    """Conv backbone with a classification head and a box head, both sigmoid."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in = spec.image_channels
        bias = spec.norm == "none"
        for i, c in enumerate(spec.channels):
            if i == 0 and spec.stem_stride == 2:
                # strided stem: halves resolution without a full-resolution conv + pool
                layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1, bias=bias), _norm(spec.norm, c), nn.ReLU(inplace=True)]
                c_in = c
                continue
            for _ in range(spec.convs_per_block):
                layers += [nn.Conv2d(c_in, c, 3, padding=1, bias=bias), _norm(spec.norm, c), nn.ReLU(inplace=True)]
                c_in = c
            layers.append(nn.MaxPool2d(2))
        self.features = nn.Sequential(*layers)
        side = spec.image_side // 2 ** len(spec.channels)
        self.hidden = nn.Sequential(nn.Flatten(), nn.Linear(c_in * side * side, spec.dense), nn.ReLU(inplace=True))
        self.cls_head = nn.Linear(spec.dense, spec.class_count)
        self.box_head = nn.Linear(spec.dense, 4)

    def forward(self, x: torch.Tensor) -> StudentOutput:
        h = self.hidden(self.features(x.permute(0, 3, 1, 2)))
        pre_label = self.cls_head(h)
        return StudentOutput(pre_label, torch.sigmoid(pre_label), torch.sigmoid(self.box_head(h)))

    def detect(self, x: torch.Tensor) -> Detection:
        out = self(x)
        return Detection(out.label, out.box)


class Generator(nn.Module):
    """Latent vector -> dense grid -> stride-2 transposed-conv blocks -> sigmoid image."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c0 = spec.channels[0]
        self.project = nn.Sequential(
            nn.Linear(spec.latent_dim, c0 * spec.base * spec.base),
            nn.Unflatten(1, (c0, spec.base, spec.base)),
            nn.BatchNorm2d(c0),
        )
        blocks = []
        widths = list(spec.channels[1:]) + [spec.image_channels]
        c_in = c0
        for i, c in enumerate(widths):
            blocks.append(nn.ConvTranspose2d(c_in, c, 4, stride=2, padding=1, bias=i == len(widths) - 1))
            if i < len(widths) - 1:
                blocks += [nn.BatchNorm2d(c), nn.LeakyReLU(0.2, inplace=True)]
            c_in = c
        # output normalization keeps pre-sigmoid values spread instead of saturating
        blocks.append(nn.BatchNorm2d(spec.image_channels, affine=False))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.blocks(self.project(z))).permute(0, 2, 3, 1)


def build_network(spec: NetworkSpec) -> nn.Module:
    spec.validate()
    net = Generator(spec) if spec.role == "generator" else Detector(spec)
    log.debug("built %s network with %d parameters", spec.role, parameter_count(net))
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def weights_checksum(net: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_network(net: nn.Module, path, extra: dict | None = None) -> None:
    """Checkpoint = torch-serialized dict ``{format, spec, state_dict, extra}``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format": CHECKPOINT_FORMAT, "spec": net.spec.to_dict(), "state_dict": net.state_dict(), "extra": extra or {}},
        path,
    )


def load_network(path) -> nn.Module:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    net = build_network(NetworkSpec.from_dict(ckpt["spec"]))
    net.load_state_dict(ckpt["state_dict"])
    net.eval()
    return net


# ---------------------------------------------------------------------------
# victim training

@dataclass
class VictimTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    lr_floor: float = 1e-4
    cls_weight: float = 1.0
    box_weight: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.lr < self.lr_floor:
            raise ValueError("initial lr below floor")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once ``patience`` consecutive
    epochs pass without improving the best loss; never go below ``floor``."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3, floor: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best = math.inf
        self.stale = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.stale = 0
        return self.lr


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)


def victim_loss(out: StudentOutput, labels: torch.Tensor, boxes: torch.Tensor, cfg: VictimTrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    onehot = torch.nn.functional.one_hot(labels, out.label.shape[1]).to(out.label.dtype)
    l_cls = losses.binary_cross_entropy(onehot, out.label)
    l_box = losses.rmsle(out.box, boxes, eps=1e-12)
    return l_cls, l_box


def train_victim(net: Detector, train, cfg: VictimTrainConfig, test=None) -> TrainHistory:
    """Fit ``net`` on an :class:`~dfme_od.data.ArrayDataset` with Adam and a plateau schedule.

    The schedule is driven by the epoch's mean training loss. Returns the
    per-epoch history; the network is left in eval mode.
    """
    from .evaluation import evaluate_model

    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    images = torch.as_tensor(train.images)
    labels = torch.as_tensor(train.labels)
    boxes = torch.as_tensor(train.boxes)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.lr_floor)
    history = TrainHistory()
    n = len(labels)
    for epoch in range(cfg.epochs):
        net.train()
        lr = sched.lr
        for g in opt.param_groups:
            g["lr"] = lr
        perm = torch.randperm(n, generator=gen)
        tot = cls_sum = box_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out = net(images[idx])
            l_cls, l_box = victim_loss(out, labels[idx], boxes[idx], cfg)
            loss = cfg.cls_weight * l_cls + cfg.box_weight * l_box
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite victim loss at epoch {epoch}: cls={l_cls.item()} box={l_box.item()}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = len(idx)
            tot += loss.item() * k
            cls_sum += l_cls.item() * k
            box_sum += l_box.item() * k
        record = {"epoch": epoch + 1, "lr": lr, "loss": tot / n, "cls_loss": cls_sum / n, "box_loss": box_sum / n}
        sched.step(tot / n)
        if test is not None:
            net.eval()
            rep = evaluate_model(net, test)
            record.update(test_accuracy=rep.accuracy, test_mean_iou=rep.mean_iou)
        history.epochs.append(record)
        log.info("victim epoch %(epoch)d lr=%(lr).2e loss=%(loss).4f", record)
    net.eval()
    return history
