"""Detector backend contract and the small CPU detectors used in tests and demos.

A backend is a ``torch.nn.Module`` whose parameters are partitioned into
backbone stages ``1..S`` (S >= 4) and a ``head`` (classifier + box regressor).
Freezing and head replacement only go through :meth:`DetectorBackend.parameter_groups`
and :meth:`DetectorBackend.replace_head`, so real detectors can be adapted by
implementing those two plus :meth:`loss` and :meth:`detect`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class RawDetection:
    box: tuple[float, float, float, float]
    class_label: str
    confidence: float


@dataclass(frozen=True)
class Target:
    """Training target for one image: boxes as ``(N, 4)`` x_min, y_min, x_max, y_max plus class labels."""

    boxes: np.ndarray
    labels: tuple[str, ...]


class DetectorBackend(nn.Module):
    name = "abstract"

    def __init__(self, classes: Sequence[str]):
        super().__init__()
        self.classes = list(classes)

    @property
    def num_stages(self) -> int:
        raise NotImplementedError

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """``{"stage1": [...], ..., "head": [...]}``; every parameter appears exactly once."""
        raise NotImplementedError

    def replace_head(self, classes: Sequence[str], generator: torch.Generator | None = None) -> None:
        raise NotImplementedError

    def loss(self, image: torch.Tensor, target: Target) -> torch.Tensor:
        raise NotImplementedError

    @torch.no_grad()
    def detect(self, image: torch.Tensor, max_detections: int = 20) -> list[RawDetection]:
        raise NotImplementedError

    def stage_tags(self) -> dict[str, str]:
        return {pname: group for group, params in self.parameter_groups().items() for pname, _ in params}

    def config(self) -> dict:
        return {"name": self.name, "classes": list(self.classes)}


def image_tensor(pixels: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> 3xHxW float in [-0.5, 0.5]."""
    return torch.from_numpy(np.array(pixels, dtype=np.uint8, copy=True)).permute(2, 0, 1).float().div_(255.0).sub_(0.5)


def _conv_block(cin, cout, stride, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.GroupNorm(min(4, cout), cout),
        nn.ReLU(inplace=True),
    )


class _Head(nn.Module):
    def __init__(self, cin, num_classes, extra):
        super().__init__()
        self.classifier = nn.Conv2d(cin, num_classes, 1)
        self.regressor = nn.Conv2d(cin, extra, 1)


def _gaussian_radius(w, h, min_overlap=0.7):
    # CornerNet/CenterNet radius so that a shifted box keeps min_overlap IoU
    a1, b1 = 1, h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1**2 - 4 * a1 * c1)) / 2
    a2, b2 = 4, 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2**2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3**2 - 4 * a3 * c3)) / 2
    return max(0.0, min(r1, r2, r3))


class ToyCenterNet(DetectorBackend):
    """Four conv stages to stride 4 (the last two dilated), then a center-heatmap classifier and a size/offset regressor.

    The regressor predicts ``(dx, dy, log w, log h)`` per cell, all in units of
    the stride. Confidence is the sigmoid of the heatmap peak.
    """

    name = "toy_centernet"
    stride = 4

    def __init__(self, classes: Sequence[str], width: int = 16, seed: int = 0):
        super().__init__(classes)
        self.width = width
        g = torch.Generator().manual_seed(seed)
        c = width
        self.stages = nn.ModuleList(
            [
                _conv_block(3, c, 2),
                _conv_block(c, 2 * c, 2),
                _conv_block(2 * c, 2 * c, 1, dilation=2),
                _conv_block(2 * c, 2 * c, 1, dilation=4),
            ]
        )
        self._head_in = 2 * c
        self.head = _Head(self._head_in, len(self.classes), 4)
        _init(self, g)
        self.replace_head(self.classes, g)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def parameter_groups(self):
        groups = {f"stage{i + 1}": list(s.named_parameters(prefix=f"stages.{i}")) for i, s in enumerate(self.stages)}
        groups["head"] = list(self.head.named_parameters(prefix="head"))
        return groups

    def replace_head(self, classes, generator=None):
        self.classes = list(classes)
        self.head = _Head(self._head_in, len(self.classes), 4)
        g = generator or torch.Generator().manual_seed(0)
        with torch.no_grad():
            for conv in (self.head.classifier, self.head.regressor):
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * 0.01)
                conv.bias.zero_()
            # start with a low foreground prior so early focal loss is stable
            self.head.classifier.bias.fill_(-2.19)

    def features(self, x):
        for stage in self.stages:
            x = stage(x)
        return x

    def forward(self, x):
        f = self.features(x)
        return self.head.classifier(f), self.head.regressor(f)

    def _targets(self, shape, target: Target):
        _, fh, fw = shape
        heat = torch.zeros(len(self.classes), fh, fw)
        cells, regs = [], []
        n_obj = 0
        s = self.stride
        for box, label in zip(target.boxes, target.labels):
            if label not in self.classes:
                continue  # negatives, e.g. pasted base organisms during fine-tuning
            k = self.classes.index(label)
            x0, y0, x1, y1 = (float(v) for v in box)
            cx, cy = (x0 + x1) / 2 / s, (y0 + y1) / 2 / s
            ix, iy = min(int(cx), fw - 1), min(int(cy), fh - 1)
            w, h = (x1 - x0) / s, (y1 - y0) / s
            r = max(0.0, _gaussian_radius(w, h))
            sigma = (2 * r + 1) / 6
            ys = torch.arange(fh).float()[:, None]
            xs = torch.arange(fw).float()[None, :]
            g = torch.exp(-((xs - ix) ** 2 + (ys - iy) ** 2) / (2 * sigma**2))
            heat[k] = torch.maximum(heat[k], g)
            heat[k, iy, ix] = 1.0
            # regress from the 3x3 neighbourhood so off-peak cells still decode sensibly
            for jy in range(max(0, iy - 1), min(fh, iy + 2)):
                for jx in range(max(0, ix - 1), min(fw, ix + 2)):
                    cells.append((jy, jx))
                    regs.append((cx - jx, cy - jy, math.log(max(w, 1e-3)), math.log(max(h, 1e-3))))
            n_obj += 1
        return heat, cells, regs, n_obj

    def loss(self, image, target):
        logits, reg = self(image[None])
        logits, reg = logits[0], reg[0]
        heat, cells, regs, n_obj = self._targets(logits.shape, target)
        p = torch.sigmoid(logits).clamp(1e-4, 1 - 1e-4)
        pos = heat.eq(1.0)
        neg_w = (1 - heat) ** 4
        pos_loss = (torch.log(p) * (1 - p) ** 2)[pos].sum()
        neg_loss = (torch.log(1 - p) * p**2 * neg_w)[~pos].sum()
        n = max(1, n_obj)
        loss = -(pos_loss + neg_loss) / n
        if cells:
            iy = torch.tensor([c[0] for c in cells])
            ix = torch.tensor([c[1] for c in cells])
            pred = reg[:, iy, ix].T
            tgt = torch.tensor(regs, dtype=pred.dtype)
            m = len(cells)
            loss = loss + F.l1_loss(pred[:, :2], tgt[:, :2], reduction="sum") / m
            loss = loss + F.l1_loss(pred[:, 2:], tgt[:, 2:], reduction="sum") / m
        return loss

    @torch.no_grad()
    def detect(self, image, max_detections=20):
        logits, reg = self(image[None])
        heat = torch.sigmoid(logits[0])
        peaks = heat == F.max_pool2d(heat[None], 3, stride=1, padding=1)[0]
        scores = torch.where(peaks, heat, torch.zeros_like(heat)).flatten()
        k = min(max_detections, scores.numel())
        top, idx = torch.topk(scores, k)
        _, fh, fw = heat.shape
        H, W = image.shape[1:]
        out = []
        s = self.stride
        for score, i in zip(top.tolist(), idx.tolist()):
            if score <= 0:
                break
            c, rem = divmod(i, fh * fw)
            iy, ix = divmod(rem, fw)
            dx, dy, lw, lh = reg[0, :, iy, ix].tolist()
            cx, cy = (ix + dx) * s, (iy + dy) * s
            w, h = math.exp(min(lw, 8)) * s, math.exp(min(lh, 8)) * s
            x0, y0 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
            x1, y1 = min(float(W), cx + w / 2), min(float(H), cy + h / 2)
            if x1 <= x0 or y1 <= y0:
                continue
            out.append(RawDetection((x0, y0, x1, y1), self.classes[c], float(score)))
        return out

    def config(self):
        return {**super().config(), "width": self.width}


class ToyWideCenterNet(ToyCenterNet):
    """Same detector with a wider trunk; a second architecture for grid runs."""

    name = "toy_wide"

    def __init__(self, classes, width: int = 24, seed: int = 0):
        super().__init__(classes, width=width, seed=seed)


def _init(module: nn.Module, g: torch.Generator):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


BACKENDS: dict[str, Callable[..., DetectorBackend]] = {
    ToyCenterNet.name: ToyCenterNet,
    ToyWideCenterNet.name: ToyWideCenterNet,
}


def register_backend(name: str, factory: Callable[..., DetectorBackend]) -> None:
    BACKENDS[name] = factory


def build_backend(name: str, classes: Sequence[str], seed: int = 0, **kw) -> DetectorBackend:
    try:
        factory = BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; known: {sorted(BACKENDS)}") from None
    return factory(classes, seed=seed, **kw)
