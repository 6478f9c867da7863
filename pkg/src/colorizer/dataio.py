"""Bit-exact image I/O, dataset iteration, and the persisted file formats.

PPM (binary P6, maxval 255) is the required image codec: zero dependencies
and byte-exact round trips. Priors are a diff-able text format; checkpoints
are binary with a JSON header. Every loader validates and rejects, never
silently repairs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .colorspace import RgbImage
from .engine import AdamState, bilinear_upsample
from .quantize import GamutBins
from .rebalance import PriorWeights

log = logging.getLogger(__name__)

PRIORS_MAGIC = "colorizer-priors 1"
CHECKPOINT_MAGIC = b"CFZ1"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or corrupted persisted file."""


# ---------------------------------------------------------------- PPM I/O

def _read_ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> RgbImage:
    """Read a binary P6 PPM with maxval 255. Comments are tolerated."""
    buf = Path(path).read_bytes()
    magic, pos = _read_ppm_token(buf, 0)
    if magic == b"P3":
        raise FormatError("ASCII PPM (P3) is not supported, use binary P6")
    if magic != b"P6":
        raise FormatError(f"not a PPM file (magic {magic!r})")
    wtok, pos = _read_ppm_token(buf, pos)
    htok, pos = _read_ppm_token(buf, pos)
    mtok, pos = _read_ppm_token(buf, pos)
    try:
        width, height, maxval = int(wtok), int(htok), int(mtok)
    except ValueError as exc:
        raise FormatError(f"bad PPM header field: {exc}") from exc
    if width < 1 or height < 1:
        raise FormatError("PPM dimensions must be positive")
    if maxval != 255:
        raise FormatError(f"PPM maxval must be 255, got {maxval}")
    pos += 1  # exactly one whitespace byte separates header from pixels
    need = width * height * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise FormatError(f"truncated PPM payload: {len(data)} of {need} bytes")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(data=arr.copy())


def write_ppm(path, img: RgbImage) -> None:
    """Write binary P6, minimal canonical header, never comments."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img.data).tobytes())


# ------------------------------------------------------------- dataset

def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def resize_shorter_and_crop(img: RgbImage, size: int) -> RgbImage:
    """Bilinear-resize the shorter side to ``size``, then center crop."""
    h, w = img.height, img.width
    scale = size / min(h, w)
    nh = size if h <= w else max(size, int(round(h * scale)))
    nw = size if w < h else max(size, int(round(w * scale)))
    if (nh, nw) != (h, w):
        x = img.data.astype(np.float64).transpose(2, 0, 1)[None]
        x = bilinear_upsample(x, nh, nw)
        data = _round_half_away(np.clip(x[0].transpose(1, 2, 0), 0, 255)).astype(np.uint8)
    else:
        data = img.data
    top = (nh - size) // 2
    left = (nw - size) // 2
    return RgbImage(data=np.ascontiguousarray(data[top:top + size, left:left + size]))


class ImageFolderDataset:
    """Deterministic dataset over the .ppm files of a directory.

    Files are taken in lexicographic name order, eagerly decoded, resized and
    center-cropped to size x size. Unreadable files are skipped with a
    warning. Epoch shuffles derive from (seed, epoch) only, so iteration
    order is reproducible and resumable at any global index.
    """

    def __init__(self, directory, size: int, seed: int = 0):
        self.directory = Path(directory)
        self.size = int(size)
        self.seed = int(seed)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"dataset directory {directory} does not exist")
        paths = sorted(p for p in self.directory.iterdir()
                       if p.is_file() and p.suffix == ".ppm")
        self.images: list[RgbImage] = []
        self.paths: list[Path] = []
        for p in paths:
            try:
                self.images.append(resize_shorter_and_crop(read_ppm(p), self.size))
                self.paths.append(p)
            except (FormatError, OSError) as exc:
                log.warning("skipping unreadable image %s: %s", p, exc)
        if not self.images:
            raise FormatError(f"no readable .ppm images in {directory}")

    def __len__(self) -> int:
        return len(self.images)

    def epoch_order(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng((self.seed, epoch))
        return rng.permutation(len(self.images))

    def image_at(self, global_index: int) -> RgbImage:
        """The image at a position of the infinite shuffled stream."""
        epoch, offset = divmod(global_index, len(self.images))
        return self.images[self.epoch_order(epoch)[offset]]

    def __iter__(self):
        for i in self.epoch_order(0):
            yield self.images[i]


def load_dataset(directory, size: int, seed: int = 0) -> ImageFolderDataset:
    return ImageFolderDataset(directory, size, seed)


# ------------------------------------------------------------- priors file

def _fmt(x: float) -> str:
    return repr(float(x))


def save_priors(path, priors: PriorWeights, bins: GamutBins) -> None:
    """Human-readable, diff-able text serialization of priors + bins."""
    priors.validate()
    if priors.q != bins.q:
        raise ValueError(f"priors Q={priors.q} != bins Q={bins.q}")
    lines = [
        PRIORS_MAGIC,
        f"grid_step {_fmt(bins.grid_step)}",
        f"lattice_extent {_fmt(bins.lattice_extent)}",
        f"q {bins.q}",
        f"lambda {_fmt(priors.lam)}",
        f"sigma {_fmt(priors.sigma)}",
        f"pixel_count {priors.pixel_count}",
        f"has_lambda0 {int(priors.weights_lambda0 is not None)}",
        "centers",
    ]
    lines.extend(f"{_fmt(a)} {_fmt(b)}" for a, b in bins.centers)
    for name, arr in (("prior", priors.prior),
                      ("smoothed_prior", priors.smoothed_prior),
                      ("weights", priors.weights)):
        lines.append(name)
        lines.extend(_fmt(v) for v in arr)
    if priors.weights_lambda0 is not None:
        lines.append("weights_lambda0")
        lines.extend(_fmt(v) for v in priors.weights_lambda0)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_priors(path) -> tuple[PriorWeights, GamutBins]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(lines)

    def next_line() -> str:
        try:
            return next(it)
        except StopIteration:
            raise FormatError("truncated priors file") from None

    if next_line() != PRIORS_MAGIC:
        raise FormatError("not a colorizer priors file")

    def scalar(name, conv):
        line = next_line()
        key, _, val = line.partition(" ")
        if key != name:
            raise FormatError(f"expected {name!r}, found {line!r}")
        return conv(val)

    grid_step = scalar("grid_step", float)
    extent = scalar("lattice_extent", float)
    q = scalar("q", int)
    lam = scalar("lambda", float)
    sigma = scalar("sigma", float)
    pixel_count = scalar("pixel_count", int)
    has_l0 = scalar("has_lambda0", int)

    def block(name, ncols):
        if next_line() != name:
            raise FormatError(f"expected section {name!r}")
        rows = []
        for _ in range(q):
            parts = next_line().split()
            if len(parts) != ncols:
                raise FormatError(f"bad row in section {name!r}")
            rows.append([float(v) for v in parts])
        arr = np.array(rows, dtype=np.float64)
        return arr if ncols > 1 else arr[:, 0]

    centers = block("centers", 2)
    prior = block("prior", 1)
    smoothed = block("smoothed_prior", 1)
    weights = block("weights", 1)
    w_l0 = block("weights_lambda0", 1) if has_l0 else None
    if next_line() != "end":
        raise FormatError("missing end marker")

    bins = GamutBins(grid_step=grid_step, lattice_extent=extent, centers=centers)
    priors = PriorWeights(prior=prior, smoothed_prior=smoothed, weights=weights,
                          lam=lam, sigma=sigma, pixel_count=pixel_count,
                          weights_lambda0=w_l0)
    if bins.q != q:
        raise FormatError(f"centers count {bins.q} != declared q {q}")
    try:
        priors.validate()
    except ValueError as exc:
        raise FormatError(f"priors file violates invariants: {exc}") from exc
    return priors, bins


# ----------------------------------------------------------- checkpoints

@dataclass
class CheckpointData:
    """Everything needed to resume training bit-exactly."""

    arch_text: str
    variant: str
    head_channels: int
    iteration: int
    lr_stage: int
    grid_step: float
    lattice_extent: float
    centers: np.ndarray
    params: dict
    bn_running: dict        # name -> {"mean", "var", "num_batches_tracked"}
    adam: AdamState
    rng_state: dict
    loss_tail: list = field(default_factory=list)
    fingerprint: str = ""


def _dtype_code(arr: np.ndarray) -> str:
    code = arr.dtype.str
    if code not in ("<f4", "<f8", "<i8"):
        raise FormatError(f"unsupported checkpoint dtype {code}")
    return code


def save_checkpoint(path, ckpt: CheckpointData) -> None:
    """Binary checkpoint: magic, JSON header, raw little-endian blocks."""
    blocks: list[np.ndarray] = []
    manifest = []

    def add_block(kind: str, name: str, arr: np.ndarray):
        arr = np.ascontiguousarray(arr)
        manifest.append({"kind": kind, "name": name,
                         "dtype": _dtype_code(arr), "shape": list(arr.shape)})
        blocks.append(arr)

    add_block("centers", "centers", ckpt.centers.astype(np.float64))
    for name in sorted(ckpt.params):
        add_block("param", name, ckpt.params[name])
    for name in sorted(ckpt.bn_running):
        add_block("bn_mean", name, ckpt.bn_running[name]["mean"])
        add_block("bn_var", name, ckpt.bn_running[name]["var"])
    for name in sorted(ckpt.adam.m):
        add_block("adam_m", name, ckpt.adam.m[name])
        add_block("adam_v", name, ckpt.adam.v[name])

    header = {
        "version": CHECKPOINT_VERSION,
        "arch_text": ckpt.arch_text,
        "variant": ckpt.variant,
        "head_channels": ckpt.head_channels,
        "iteration": ckpt.iteration,
        "lr_stage": ckpt.lr_stage,
        "grid_step": ckpt.grid_step,
        "lattice_extent": ckpt.lattice_extent,
        "fingerprint": ckpt.fingerprint,
        "adam": {"lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps,
                 "weight_decay": ckpt.adam.weight_decay, "step": ckpt.adam.step},
        "bn_tracked": {name: ckpt.bn_running[name]["num_batches_tracked"]
                       for name in sorted(ckpt.bn_running)},
        "rng_state": ckpt.rng_state,
        "loss_tail": ckpt.loss_tail,
        "manifest": manifest,
    }
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += len(head_bytes).to_bytes(8, "little")
    out += head_bytes
    for arr in blocks:
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> CheckpointData:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a colorizer checkpoint (bad magic)")
    hlen = int.from_bytes(buf[4:12], "little")
    try:
        header = json.loads(buf[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")

    pos = 12 + hlen
    arrays = []
    for entry in header["manifest"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        raw = buf[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise FormatError("truncated checkpoint payload")
        arrays.append(np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy())
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint payload")

    centers = None
    params = {}
    bn_running = {}
    adam_m = {}
    adam_v = {}
    for entry, arr in zip(header["manifest"], arrays):
        kind, name = entry["kind"], entry["name"]
        if kind == "centers":
            centers = arr
        elif kind == "param":
            params[name] = arr
        elif kind == "bn_mean":
            bn_running.setdefault(name, {})["mean"] = arr
        elif kind == "bn_var":
            bn_running.setdefault(name, {})["var"] = arr
        elif kind == "adam_m":
            adam_m[name] = arr
        elif kind == "adam_v":
            adam_v[name] = arr
        else:
            raise FormatError(f"unknown block kind {kind!r}")
    if centers is None:
        raise FormatError("checkpoint has no bin centers block")
    for name, tracked in header["bn_tracked"].items():
        if name not in bn_running:
            raise FormatError(f"batchnorm stats missing for {name!r}")
        bn_running[name]["num_batches_tracked"] = int(tracked)

    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                     eps=a["eps"], weight_decay=a["weight_decay"],
                     step=a["step"], m=adam_m, v=adam_v)
    return CheckpointData(
        arch_text=header["arch_text"], variant=header["variant"],
        head_channels=int(header["head_channels"]),
        iteration=int(header["iteration"]), lr_stage=int(header["lr_stage"]),
        grid_step=float(header["grid_step"]),
        lattice_extent=float(header["lattice_extent"]),
        centers=centers, params=params, bn_running=bn_running, adam=adam,
        rng_state=header["rng_state"], loss_tail=list(header["loss_tail"]),
        fingerprint=header["fingerprint"])
