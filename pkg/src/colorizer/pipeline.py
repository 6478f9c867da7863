"""Model assembly, training variants, and the colorize/decode path.

The network is a stack of conv rows from an ArchitectureConfig (each row:
optional 2x nearest upsample, 3x3 conv, ReLU, optional BatchNorm) topped by
a 1x1 head. Classification variants predict a distribution over the gamut
bins and train with (optionally rebalanced) softmax cross-entropy; L2
variants regress the two chroma channels directly. Inference decodes the
predicted distribution with the annealed mean and lifts it to input
resolution bilinearly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import engine
from .arch import (
    ArchitectureConfig,
    ArchitectureError,
    fingerprint,
    format_architecture,
    parse_architecture,
    validate_architecture,
)
from .colorspace import LabImage, RgbImage, lab_to_srgb, split_channels, srgb_to_lab
from .dataio import CheckpointData, ImageFolderDataset
from .engine import AdamState, BatchNormState
from .quantize import ColorDistribution, GamutBins, decode_annealed_mean, encode_soft, export_probability_maps
from .rebalance import PriorWeights, pixel_weights

VARIANTS = ("class_rebal", "class", "l2", "l2_finetune")
REGRESSION_HEAD_SCALE = 100.0
MIN_INPUT_SIDE = 8
DEFAULT_TEMPERATURE = 0.38


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite (learning rate too high or corrupt batch)."""


@dataclass
class TrainConfig:
    variant: str = "class_rebal"
    iterations: int = 2000
    batch_size: int = 4
    seed: int = 0
    lr_schedule: tuple = (3e-5, 1e-5, 3e-6)
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    encode_k: int = 5
    encode_sigma: float = 5.0
    plateau_window: int = 1000
    plateau_tol: float = 1e-3

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.encode_k < 1 or self.encode_sigma <= 0:
            raise ValueError("bad soft-encoding parameters")
        if not self.lr_schedule or any(lr <= 0 for lr in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.plateau_window < 1:
            raise ValueError("plateau window must be positive")

    @property
    def objective(self) -> str:
        return "regression" if self.variant in ("l2", "l2_finetune") else "classification"


class ColorNet:
    """The trainable network: parameter dict + per-layer batchnorm state."""

    def __init__(self, cfg: ArchitectureConfig, head_channels: int,
                 objective: str, seed: int = 0):
        self.cfg = cfg
        self.head_channels = int(head_channels)
        self.objective = objective
        self.head_scale = REGRESSION_HEAD_SCALE if objective == "regression" else 1.0
        self.derived = validate_architecture(cfg)
        self.params: dict[str, np.ndarray] = {}
        self.bn: dict[str, BatchNormState] = {}
        rng = np.random.default_rng(seed)
        cin = cfg.in_channels
        for row in cfg.rows:
            self.params[f"{row.name}.w"] = engine.he_normal(
                (row.out_channels, cin, 3, 3), rng)
            self.params[f"{row.name}.b"] = np.zeros(row.out_channels, dtype=np.float32)
            if row.batchnorm:
                self.params[f"{row.name}.bn_gamma"] = np.ones(row.out_channels,
                                                              dtype=np.float32)
                self.params[f"{row.name}.bn_beta"] = np.zeros(row.out_channels,
                                                              dtype=np.float32)
                self.bn[row.name] = BatchNormState.create(row.out_channels)
            cin = row.out_channels
        if objective == "regression":
            # start at exactly zero chroma so predictions grow toward the
            # conditional mean instead of decaying from saturated noise
            self.params["head.w"] = np.zeros((head_channels, cin, 1, 1),
                                             dtype=np.float32)
        else:
            self.params["head.w"] = engine.he_normal((head_channels, cin, 1, 1), rng)
        self.params["head.b"] = np.zeros(head_channels, dtype=np.float32)
        self.rng_state = rng.bit_generator.state

    @property
    def head_size(self) -> int:
        return self.derived[-1].x

    def forward(self, x: np.ndarray, training: bool):
        """Run the stack; returns (logits, caches) with caches for backward."""
        caches = []
        h = x
        for row in self.cfg.rows:
            entry = {"name": row.name, "upsampled": row.stride == 0.5,
                     "batchnorm": row.batchnorm}
            if row.stride == 0.5:
                h = engine.upsample_nearest_forward(h, 2)
            stride = int(row.stride) if row.stride >= 1 else 1
            h, entry["conv"] = engine.conv2d_forward(
                h, self.params[f"{row.name}.w"], self.params[f"{row.name}.b"],
                stride=stride, dilation=row.dilation, pad=row.dilation)
            h, entry["relu"] = engine.relu_forward(h)
            if row.batchnorm:
                h, entry["bn"] = engine.batchnorm_forward(
                    h, self.params[f"{row.name}.bn_gamma"],
                    self.params[f"{row.name}.bn_beta"], self.bn[row.name],
                    training)
            caches.append(entry)
        logits, head_cache = engine.conv2d_forward(
            h, self.params["head.w"], self.params["head.b"],
            stride=1, dilation=1, pad=0)
        caches.append({"head": head_cache})
        if self.objective == "regression":
            logits = logits * np.float32(self.head_scale)
        return logits, caches

    def backward(self, grad_logits: np.ndarray, caches) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        if self.objective == "regression":
            g = g * np.float32(self.head_scale)
        g, grads["head.w"], grads["head.b"] = engine.conv2d_backward(
            g, caches[-1]["head"])
        for entry in reversed(caches[:-1]):
            name = entry["name"]
            if entry["batchnorm"]:
                g, grads[f"{name}.bn_gamma"], grads[f"{name}.bn_beta"] = \
                    engine.batchnorm_backward(g, entry["bn"])
            g = engine.relu_backward(g, entry["relu"])
            g, grads[f"{name}.w"], grads[f"{name}.b"] = engine.conv2d_backward(
                g, entry["conv"])
            if entry["upsampled"]:
                g = engine.upsample_nearest_backward(g, 2)
        return grads


def build_model(cfg: ArchitectureConfig, head_channels: int,
                objective: str = "classification", seed: int = 0) -> ColorNet:
    """Validate the config's declared X/Sa/De cells and build the network."""
    if objective not in ("classification", "regression"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "regression" and head_channels != 2:
        raise ValueError("regression head must have 2 channels")
    return ColorNet(cfg, head_channels, objective, seed=seed)


# ------------------------------------------------------------ data plumbing

def area_downsample(Y: np.ndarray, factor: int) -> np.ndarray:
    """Downsample (H, W, C) chroma by integer-factor area averaging."""
    h, w, c = Y.shape
    if h % factor or w % factor:
        raise ValueError(f"size {h}x{w} not divisible by factor {factor}")
    return Y.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def normalize_lightness(L: np.ndarray) -> np.ndarray:
    """Center/scale the lightness plane to roughly [-1, 1] for conv1."""
    return ((L - 50.0) / 50.0).astype(np.float32)


def prepare_example(img: RgbImage, head_size: int):
    """RGB image -> (network input (1,H,W), chroma target at head resolution)."""
    lab = srgb_to_lab(img)
    X, Y = split_channels(lab)
    factor = X.shape[0] // head_size
    if factor * head_size != X.shape[0]:
        raise ValueError(f"input {X.shape} incompatible with head size {head_size}")
    return normalize_lightness(X)[None], area_downsample(Y, factor)


# ------------------------------------------------------------ training

@dataclass
class TrainResult:
    loss_curve: list          # (iteration, loss, lr) tuples
    checkpoint: CheckpointData
    model: ColorNet


def _batch_images(dataset: ImageFolderDataset, iteration: int, batch_size: int):
    base = iteration * batch_size
    return [dataset.image_at(base + j) for j in range(batch_size)]


def _classification_batch(images, model: ColorNet, bins: GamutBins,
                          cfg: TrainConfig, weights: Optional[np.ndarray]):
    xs, zs = [], []
    for img in images:
        x, y_ds = prepare_example(img, model.head_size)
        xs.append(x)
        zs.append(encode_soft(y_ds, bins, k=cfg.encode_k,
                              sigma=cfg.encode_sigma).probs)
    x = np.stack(xs)
    z_hwq = np.stack(zs)
    if weights is None:
        v = np.ones(z_hwq.shape[:3], dtype=np.float32)
    else:
        v = pixel_weights(z_hwq, weights).astype(np.float32)
    targets = np.ascontiguousarray(z_hwq.transpose(0, 3, 1, 2))
    return x, targets, v


def _regression_batch(images, model: ColorNet):
    xs, ys = [], []
    for img in images:
        x, y_ds = prepare_example(img, model.head_size)
        xs.append(x)
        ys.append(y_ds.transpose(2, 0, 1).astype(np.float32))
    return np.stack(xs), np.stack(ys)


def make_checkpoint(model: ColorNet, adam: AdamState, bins: GamutBins,
                    variant: str, iteration: int, lr_stage: int,
                    loss_tail: list) -> CheckpointData:
    arch_text = format_architecture(model.cfg)
    return CheckpointData(
        arch_text=arch_text,
        variant=variant,
        head_channels=model.head_channels,
        iteration=iteration,
        lr_stage=lr_stage,
        grid_step=bins.grid_step,
        lattice_extent=bins.lattice_extent,
        centers=bins.centers.copy(),
        params={k: v.copy() for k, v in model.params.items()},
        bn_running={name: {"mean": st.running_mean.copy(),
                           "var": st.running_var.copy(),
                           "num_batches_tracked": st.num_batches_tracked}
                    for name, st in model.bn.items()},
        adam=AdamState(lr=adam.lr, beta1=adam.beta1, beta2=adam.beta2,
                       eps=adam.eps, weight_decay=adam.weight_decay,
                       step=adam.step,
                       m={k: v.copy() for k, v in adam.m.items()},
                       v={k: v.copy() for k, v in adam.v.items()}),
        rng_state=json.loads(json.dumps(model.rng_state, default=int)),
        loss_tail=list(loss_tail),
        fingerprint=fingerprint(model.cfg, model.head_channels, variant),
    )


def model_from_checkpoint(ckpt: CheckpointData) -> tuple[ColorNet, GamutBins]:
    """Rebuild the network and gamut bins persisted in a checkpoint."""
    cfg = parse_architecture(ckpt.arch_text)
    objective = "regression" if ckpt.variant in ("l2", "l2_finetune") else "classification"
    want = fingerprint(cfg, ckpt.head_channels, ckpt.variant)
    if ckpt.fingerprint and ckpt.fingerprint != want:
        raise ArchitectureError("checkpoint fingerprint does not match its architecture")
    model = ColorNet(cfg, ckpt.head_channels, objective, seed=0)
    for name, arr in ckpt.params.items():
        if name not in model.params:
            raise ArchitectureError(f"checkpoint parameter {name!r} not in architecture")
        if model.params[name].shape != arr.shape:
            raise ArchitectureError(f"checkpoint parameter {name!r} has shape "
                                    f"{arr.shape}, expected {model.params[name].shape}")
        model.params[name] = arr.astype(np.float32).copy()
    for name, stats in ckpt.bn_running.items():
        st = model.bn[name]
        st.running_mean = stats["mean"].astype(np.float32).copy()
        st.running_var = stats["var"].astype(np.float32).copy()
        st.num_batches_tracked = int(stats["num_batches_tracked"])
    model.rng_state = ckpt.rng_state
    bins = GamutBins(grid_step=ckpt.grid_step, lattice_extent=ckpt.lattice_extent,
                     centers=ckpt.centers.copy())
    if objective == "classification" and ckpt.head_channels != bins.q:
        raise ArchitectureError(f"checkpoint head predicts {ckpt.head_channels} "
                                f"bins but carries {bins.q} centers")
    return model, bins


def model_for_finetune(source: CheckpointData, seed: int = 0) -> tuple[ColorNet, GamutBins]:
    """Fresh 2-channel regression head on the trunk of a classification
    checkpoint (the l2_finetune variant)."""
    if source.variant in ("l2", "l2_finetune"):
        raise ValueError("l2_finetune needs a classification source checkpoint")
    src_model, bins = model_from_checkpoint(source)
    cfg = src_model.cfg
    model = ColorNet(cfg, 2, "regression", seed=seed)
    for name, arr in src_model.params.items():
        if name.startswith("head."):
            continue
        model.params[name] = arr.copy()
    for name, st in src_model.bn.items():
        model.bn[name].running_mean = st.running_mean.copy()
        model.bn[name].running_var = st.running_var.copy()
        model.bn[name].num_batches_tracked = st.num_batches_tracked
    return model, bins


def train(model: ColorNet, dataset: ImageFolderDataset, cfg: TrainConfig,
          bins: GamutBins, priors: Optional[PriorWeights] = None,
          resume: Optional[CheckpointData] = None,
          checkpoint_every: int = 0,
          checkpoint_cb: Optional[Callable[[CheckpointData], None]] = None
          ) -> TrainResult:
    """Run the training loop; deterministic for a fixed config and dataset.

    ``resume`` continues a previous run bit-exactly (same dataset and config
    required). ``checkpoint_cb`` receives a CheckpointData every
    ``checkpoint_every`` iterations and at the end.
    """
    cfg.validate()
    if cfg.variant == "class_rebal" and priors is None:
        raise ValueError("class_rebal training requires precomputed priors")
    if priors is not None and priors.q != bins.q:
        raise ValueError(f"priors Q={priors.q} != bins Q={bins.q}")
    if cfg.objective == "classification" and model.head_channels != bins.q:
        raise ValueError(f"model head predicts {model.head_channels} classes "
                         f"but gamut has {bins.q} bins")

    weights = priors.weights if cfg.variant == "class_rebal" else None
    tail_len = 2 * cfg.plateau_window

    if resume is not None:
        start = resume.iteration
        lr_stage = resume.lr_stage
        adam = resume.adam
        adam.m = {k: v.astype(np.float32).copy() for k, v in adam.m.items()}
        adam.v = {k: v.astype(np.float32).copy() for k, v in adam.v.items()}
        losses = [float("nan")] * (start - len(resume.loss_tail)) + list(resume.loss_tail)
    else:
        start = 0
        lr_stage = 0
        adam = AdamState(lr=cfg.lr_schedule[0], beta1=cfg.beta1, beta2=cfg.beta2,
                         weight_decay=cfg.weight_decay)
        losses = []

    curve = []
    for it in range(start, cfg.iterations):
        images = _batch_images(dataset, it, cfg.batch_size)
        if cfg.objective == "classification":
            x, targets, v = _classification_batch(images, model, bins, cfg, weights)
            logits, caches = model.forward(x, training=True)
            loss, grad = engine.weighted_softmax_xent(logits, targets, v)
        else:
            x, targets = _regression_batch(images, model)
            preds, caches = model.forward(x, training=True)
            loss, grad = engine.l2_loss(preds, targets)
        if not np.isfinite(loss):
            raise TrainingDivergedError(
                f"loss became {loss} at iteration {it} (lr={adam.lr:g}): "
                "learning rate too high or corrupt batch")
        grads = model.backward(grad, caches)
        engine.adam_step(model.params, grads, adam)

        losses.append(loss)
        curve.append((it + 1, loss, adam.lr))

        done = it + 1
        if (done % cfg.plateau_window == 0 and done >= tail_len
                and lr_stage + 1 < len(cfg.lr_schedule)):
            recent = np.mean(losses[done - cfg.plateau_window:done])
            previous = np.mean(losses[done - tail_len:done - cfg.plateau_window])
            if recent > previous * (1.0 - cfg.plateau_tol):
                lr_stage += 1
                adam.lr = cfg.lr_schedule[lr_stage]

        if checkpoint_every and checkpoint_cb and done % checkpoint_every == 0 \
                and done < cfg.iterations:
            checkpoint_cb(make_checkpoint(model, adam, bins, cfg.variant, done,
                                          lr_stage, losses[-tail_len:]))

    final = make_checkpoint(model, adam, bins, cfg.variant, cfg.iterations,
                            lr_stage, losses[-tail_len:])
    if checkpoint_cb:
        checkpoint_cb(final)
    return TrainResult(loss_curve=curve, checkpoint=final, model=model)


def smoothed_loss(curve, iteration: int, window: int = 100) -> float:
    """Mean loss over the ``window`` iterations ending at ``iteration``."""
    values = [loss for it, loss, _ in curve if iteration - window < it <= iteration]
    if not values:
        raise ValueError(f"no loss entries in window ending at {iteration}")
    return float(np.mean(values))


# ------------------------------------------------------------ inference

def _softmax_channels(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_distribution(model: ColorNet, img: RgbImage,
                         bins: GamutBins) -> ColorDistribution:
    """Eval-mode forward pass to a per-pixel distribution at head resolution."""
    if model.objective != "classification":
        raise ValueError("distributions exist only for classification models")
    lab = srgb_to_lab(img)
    x = normalize_lightness(lab.L)[None, None]
    logits, _ = model.forward(x, training=False)
    probs = _softmax_channels(logits)[0].transpose(1, 2, 0)
    return ColorDistribution(probs=probs)


def colorize_lab(model: ColorNet, img: RgbImage, bins: GamutBins,
                 T: float = DEFAULT_TEMPERATURE) -> LabImage:
    """Predict chroma for an image; returns Lab before sRGB quantization.

    The input's own L plane passes through bit-exactly; predicted chroma is
    decoded (annealed mean at temperature T for classification models),
    bilinearly lifted to input resolution, and recombined.
    """
    if min(img.height, img.width) < MIN_INPUT_SIDE:
        raise ValueError(f"input must be at least {MIN_INPUT_SIDE}px per side")
    lab = srgb_to_lab(img)
    x = normalize_lightness(lab.L)[None, None]
    logits, _ = model.forward(x, training=False)
    if model.objective == "classification":
        probs = _softmax_channels(logits)[0].transpose(1, 2, 0)
        ab_head = decode_annealed_mean(ColorDistribution(probs=probs), bins, T=T)
    else:
        ab_head = logits[0].transpose(1, 2, 0).astype(np.float32)
    ab_small = ab_head.transpose(2, 0, 1)[None].astype(np.float64)
    ab_full = engine.bilinear_upsample(ab_small, img.height, img.width)[0]
    return LabImage(L=lab.L, a=ab_full[0], b=ab_full[1])


def colorize(model: ColorNet, img: RgbImage, bins: GamutBins,
             T: float = DEFAULT_TEMPERATURE) -> RgbImage:
    """Colorize an image from its lightness channel."""
    return lab_to_srgb(colorize_lab(model, img, bins, T=T))


def dump_distributions(model: ColorNet, img: RgbImage, bins: GamutBins,
                       stride: int = 1):
    """Per-bin spatial probability maps of the model's prediction."""
    dist = predict_distribution(model, img, bins)
    return export_probability_maps(dist, bins, stride=stride)
