"""Encoder-decoder segmentation model with gradient capture for saliency.

The torch U-Net lives behind an sklearn-style estimator (fit / predict /
predict_proba / get_params) so the loop composes with ordinary tooling.
Raw [0, 1] images are standardized with the ImageNet statistics inside the
forward pass; everything outside the model keeps the [0, 1] convention.
"""

from __future__ import annotations

import copy
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .core import IGNORE, Image, ProbMap, SegxalError, ShapeMismatchError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DivergenceError(SegxalError):
    pass


class UnknownLayerError(SegxalError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    levels: int = 3
    base_channels: int = 16
    height: int = 64
    width: int = 128
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs_per_cycle: int = 10
    initial_epochs: int = 0  # 0 = same as epochs_per_cycle; pre-loop training
    momentum: float = 0.9
    seed: int = 0
    target_layer: str = "dec1"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        stride = 2 ** self.levels
        if self.height % stride or self.width % stride:
            raise ValueError(f"resolution {self.height}x{self.width} must be divisible by {stride}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class TrainingReport:
    epoch_losses: list[float] = field(default_factory=list)
    epochs_run: int = 0

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0] if self.epoch_losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


@dataclass(frozen=True)
class GradCamContext:
    """Target-layer activations and exact gradients of the class score.

    ``z_positive`` is the sum of the positive gradient entries, the
    normalizer variant used by default; ``spatial_count`` is h*w.
    """

    activations: np.ndarray  # (K, h, w)
    gradients: np.ndarray  # (K, h, w)
    target_class: int
    z_positive: float

    @property
    def spatial_count(self) -> int:
        return self.activations.shape[1] * self.activations.shape[2]


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, num_classes: int, levels: int = 3, base_channels: int = 16):
        super().__init__()
        self.levels = levels
        ch = [base_channels * 2 ** i for i in range(levels + 1)]
        self.encoders = nn.ModuleList()
        cin = 3
        for i in range(levels):
            self.encoders.append(_conv_block(cin, ch[i]))
            cin = ch[i]
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(ch[levels - 1], ch[levels])
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(levels)):
            self.upsamplers.append(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2))
            self.decoders.append(_conv_block(ch[i] * 2, ch[i]))
        self.head = nn.Conv2d(ch[0], num_classes, 1)
        mean = torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD).view(1, 3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def named_feature_layers(self) -> dict[str, nn.Module]:
        """Hookable blocks: enc1..encL (shallow to deep), bottleneck, decL..dec1."""
        out: dict[str, nn.Module] = {}
        for i, enc in enumerate(self.encoders):
            out[f"enc{i + 1}"] = enc
        out["bottleneck"] = self.bottleneck
        for j, dec in enumerate(self.decoders):
            out[f"dec{self.levels - j}"] = dec
        out["head"] = self.head
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.input_mean) / self.input_std
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


class UNetSegmenter(BaseEstimator):
    """Sklearn-style wrapper: fit on (N, H, W, 3) / (N, H, W) arrays.

    ``warm_start=True`` continues training from the current weights, which
    is how the loop retrains between cycles.
    """

    def __init__(self, num_classes=5, levels=3, base_channels=16, height=64,
                 width=128, learning_rate=1e-4, batch_size=16, epochs_per_cycle=10,
                 initial_epochs=0, momentum=0.9, seed=0, target_layer="dec1",
                 warm_start=False):
        self.num_classes = num_classes
        self.levels = levels
        self.base_channels = base_channels
        self.height = height
        self.width = width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs_per_cycle = epochs_per_cycle
        self.initial_epochs = initial_epochs
        self.momentum = momentum
        self.seed = seed
        self.target_layer = target_layer
        self.warm_start = warm_start

    @classmethod
    def from_config(cls, config: ModelConfig, warm_start: bool = False) -> "UNetSegmenter":
        return cls(warm_start=warm_start, **config.to_dict())

    def config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.__dataclass_fields__})

    # -- internal -----------------------------------------------------------

    def _build(self) -> None:
        ModelConfig(**{k: getattr(self, k) for k in ModelConfig.__dataclass_fields__})
        torch.manual_seed(self.seed)
        self.net_ = UNet(self.num_classes, self.levels, self.base_channels)
        self.net_.eval()
        self._fit_calls = 0
        self._param_version = 0

    def _ensure_net(self) -> UNet:
        if not hasattr(self, "net_"):
            self._build()
        return self.net_

    def _net_at(self, dtype: torch.dtype) -> UNet:
        """The network itself, or a cached float64 twin for high-precision
        gradient checks (rebuilt whenever the parameters change)."""
        net = self._ensure_net()
        if dtype == torch.float32:
            return net
        version = getattr(self, "_param_version", 0)
        if getattr(self, "_net64_version", None) != version:
            self._net64 = copy.deepcopy(net).double()
            self._net64.eval()
            self._net64_version = version
        return self._net64

    def _to_batch(self, X: np.ndarray) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3:
            X = X[None]
        if X.shape[1:3] != (self.height, self.width) or X.shape[3] != 3:
            raise ShapeMismatchError(
                f"input {X.shape[1:]} does not match configured {self.height}x{self.width}x3")
        return torch.from_numpy(np.ascontiguousarray(X.transpose(0, 3, 1, 2)))

    # -- sklearn surface -----------------------------------------------------

    def fit(self, X: np.ndarray, y: np.ndarray, epochs: int | None = None) -> "UNetSegmenter":
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 4 or len(X) == 0:
            raise ValueError("fit expects a nonempty (N, H, W, 3) array")
        if y.shape != X.shape[:3]:
            raise ShapeMismatchError(f"labels {y.shape} do not match images {X.shape[:3]}")
        if not (hasattr(self, "net_") and self.warm_start):
            self._build()
        net = self.net_
        net.train()
        xb_all = self._to_batch(X)
        yb_all = torch.from_numpy(y)
        opt = torch.optim.SGD(net.parameters(), lr=self.learning_rate, momentum=self.momentum)
        loss_fn = nn.CrossEntropyLoss(ignore_index=IGNORE)
        rng = np.random.default_rng(self.seed * 9973 + self._fit_calls)
        self._fit_calls += 1
        report = TrainingReport()
        n = len(X)
        for _epoch in range(epochs if epochs is not None else self.epochs_per_cycle):
            order = rng.permutation(n)
            batch_losses = []
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                opt.zero_grad()
                logits = net(xb_all[idx])
                loss = loss_fn(logits, yb_all[idx])
                if not torch.isfinite(loss):
                    raise DivergenceError(f"training loss became {loss.item()!r}")
                loss.backward()
                opt.step()
                batch_losses.append(float(loss.detach()))
            report.epoch_losses.append(float(np.mean(batch_losses)))
            report.epochs_run += 1
        net.eval()
        self._param_version = getattr(self, "_param_version", 0) + 1
        self.report_ = report
        return self

    def fit_samples(self, labeled_samples: list, epochs: int | None = None) -> TrainingReport:
        """Train on Sample objects; every sample must carry ground truth."""
        if not labeled_samples:
            raise ValueError("cannot train on an empty labeled set")
        missing = [s.id for s in labeled_samples if s.gt is None]
        if missing:
            raise ValueError(f"samples without gt in training set: {missing[:5]}")
        X = np.stack([s.image.pixels for s in labeled_samples])
        y = np.stack([s.gt.labels for s in labeled_samples])
        self.fit(X, y, epochs=epochs)
        return self.report_

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        net = self._ensure_net()
        net.eval()
        with torch.no_grad():
            logits = net(self._to_batch(X))
            probs = F.softmax(logits, dim=1)
        return probs.numpy()

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    # -- spec operations ------------------------------------------------------

    def predict_probs(self, image: Image) -> ProbMap:
        probs = self.predict_proba(image.pixels[None])[0]
        return ProbMap(probs)

    def _resolve_layer(self, net: UNet, target_layer: str | None):
        layers = net.named_feature_layers()
        name = target_layer or self.target_layer
        if name not in layers:
            raise UnknownLayerError(f"layer {name!r}; available: {sorted(layers)}")
        return layers[name]

    def class_score_with_grads(
        self, image: Image, target_class: int, target_layer: str | None = None,
        ignore_mask: np.ndarray | None = None, double_precision: bool = False,
    ) -> GradCamContext:
        """Exact gradients of the summed class logit w.r.t. a feature layer.

        The class score is the sum of pre-softmax logits of ``target_class``
        over all pixels (optionally restricted by ``ignore_mask`` where True
        marks excluded pixels). ``double_precision`` runs the pass on a
        float64 copy, which gradient-vs-finite-difference checks need to
        resolve small steps.
        """
        if not (0 <= target_class < self.num_classes):
            raise ValueError(f"target_class {target_class} outside [0, {self.num_classes})")
        dtype = torch.float64 if double_precision else torch.float32
        net = self._net_at(dtype)
        layer = self._resolve_layer(net, target_layer)
        net.eval()
        captured: dict[str, torch.Tensor] = {}

        def hook(_module, _inputs, output):
            output.retain_grad()
            captured["out"] = output

        handle = layer.register_forward_hook(hook)
        try:
            x = self._to_batch(image.pixels[None]).to(dtype)
            logits = net(x)
            class_map = logits[0, target_class]
            if ignore_mask is not None:
                keep = torch.from_numpy(np.asarray(~ignore_mask)).to(dtype)
                score = (class_map * keep).sum()
            else:
                score = class_map.sum()
            net.zero_grad(set_to_none=True)
            score.backward()
        finally:
            handle.remove()
        acts = captured["out"].detach()[0].numpy().copy()
        grad_t = captured["out"].grad
        grads = (grad_t[0].numpy().copy() if grad_t is not None
                 else np.zeros_like(acts))
        net.zero_grad(set_to_none=True)
        z_pos = float(grads[grads > 0].sum()) if np.any(grads > 0) else 0.0
        return GradCamContext(acts, grads, target_class, z_pos)

    def class_score_with_perturbation(
        self, image: Image, target_class: int, target_layer: str | None = None,
        index: tuple[int, int, int] | None = None, delta: float = 0.0,
        ignore_mask: np.ndarray | None = None, double_precision: bool = False,
    ) -> float:
        """Forward-only class score, optionally nudging one activation entry.

        This is the independent route used to finite-difference-check the
        analytic gradients: no autograd state is involved.
        """
        if not (0 <= target_class < self.num_classes):
            raise ValueError(f"target_class {target_class} outside [0, {self.num_classes})")
        dtype = torch.float64 if double_precision else torch.float32
        net = self._net_at(dtype)
        layer = self._resolve_layer(net, target_layer)
        net.eval()

        def hook(_module, _inputs, output):
            if index is None or delta == 0.0:
                return output
            bumped = output.clone()
            k, i, j = index
            bumped[0, k, i, j] = bumped[0, k, i, j] + delta
            return bumped

        handle = layer.register_forward_hook(hook)
        try:
            with torch.no_grad():
                logits = net(self._to_batch(image.pixels[None]).to(dtype))
                class_map = logits[0, target_class]
                if ignore_mask is not None:
                    keep = torch.from_numpy(np.asarray(~ignore_mask)).to(dtype)
                    return float((class_map * keep).sum())
                return float(class_map.sum())
        finally:
            handle.remove()

    # -- checkpointing --------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        """Named parameter arrays with the model config as a JSON header."""
        net = self._ensure_net()
        arrays = {f"param/{k}": v.numpy() for k, v in net.state_dict().items()}
        header = json.dumps({"schema": "segxal/1", "config": self.config().to_dict(),
                             "fit_calls": getattr(self, "_fit_calls", 0)})
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            zf.writestr("header.json", header)
            for k, v in arrays.items():
                buf = io.BytesIO()
                np.save(buf, v)
                zf.writestr(k + ".npy", buf.getvalue())

    @classmethod
    def load_checkpoint(cls, path) -> "UNetSegmenter":
        with zipfile.ZipFile(path, "r") as zf:
            header = json.loads(zf.read("header.json").decode("utf-8"))
            est = cls.from_config(ModelConfig.from_dict(header["config"]))
            est._build()
            state = {}
            for name in zf.namelist():
                if name.startswith("param/") and name.endswith(".npy"):
                    key = name[len("param/"):-len(".npy")]
                    state[key] = torch.from_numpy(np.load(io.BytesIO(zf.read(name))))
        est.net_.load_state_dict(state)
        est.net_.eval()
        est._fit_calls = header.get("fit_calls", 0)
        est._param_version = est._fit_calls
        return est
