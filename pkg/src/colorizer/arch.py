"""Network architecture descriptions and their derived-column bookkeeping.

An architecture is a text document with one record per conv layer:

    input <size> <channels>
    <name> <X> <C> <S> <D> <Sa> <De> <bn|-> <loss|->

X is the declared output resolution, C the output channels, S the stride
(0.5 denotes a 2x nearest upsample before the convolution, 2 a downsampling
convolution), D the kernel dilation. Sa (accumulated stride: the spacing of
the layer's input grid relative to network input pixels) and De (effective
dilation: D times Sa) are declared for cross-checking; the builder recomputes
both and refuses configs whose declared cells disagree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources

from .engine import conv_output_size

KERNEL = 3  # all trunk convolutions are 3x3; the loss head is 1x1


class ArchitectureError(ValueError):
    """Malformed architecture text or derived-column mismatch."""


@dataclass(frozen=True)
class LayerSpec:
    """One conv row: geometry, flags and the declared derived cells."""

    name: str
    out_channels: int
    stride: float
    dilation: int
    batchnorm: bool
    loss_head: bool
    declared_x: int
    declared_sa: float
    declared_de: float


@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int
    in_channels: int
    rows: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class DerivedColumns:
    """Computed (X, Sa, De) for one row."""

    x: int
    sa: float
    de: float


def derive_columns(cfg: ArchitectureConfig) -> list[DerivedColumns]:
    """Recompute output size, accumulated stride and effective dilation.

    An upsampling row (stride 0.5) halves the accumulated stride before its
    convolution runs; a strided convolution multiplies it afterwards.
    """
    out = []
    acc = 1.0
    size = cfg.input_size
    for row in cfg.rows:
        if row.stride not in (0.5, 1.0, 2.0):
            raise ArchitectureError(f"{row.name}: stride must be 0.5, 1 or 2")
        if row.dilation < 1:
            raise ArchitectureError(f"{row.name}: dilation must be >= 1")
        if row.stride == 0.5:
            acc *= 0.5
            size *= 2
            conv_stride = 1
        else:
            conv_stride = int(row.stride)
        sa = acc
        de = row.dilation * sa
        size = conv_output_size(size, KERNEL, conv_stride, row.dilation,
                                pad=row.dilation)
        if conv_stride > 1:
            acc *= conv_stride
        out.append(DerivedColumns(x=size, sa=sa, de=de))
    return out


def validate_architecture(cfg: ArchitectureConfig) -> list[DerivedColumns]:
    """Check declared X/Sa/De cells against the recomputed ones."""
    if not cfg.rows:
        raise ArchitectureError("architecture has no layers")
    if not cfg.rows[-1].loss_head:
        raise ArchitectureError("last layer must carry the loss head")
    if sum(r.loss_head for r in cfg.rows) != 1:
        raise ArchitectureError("exactly one layer may carry the loss head")
    derived = derive_columns(cfg)
    for row, d in zip(cfg.rows, derived):
        for cell, declared, computed in (("X", row.declared_x, d.x),
                                         ("Sa", row.declared_sa, d.sa),
                                         ("De", row.declared_de, d.de)):
            if declared != computed:
                raise ArchitectureError(
                    f"{row.name}: declared {cell}={declared} but the stride "
                    f"plan gives {computed}")
    return derived


def parse_architecture(text: str) -> ArchitectureConfig:
    rows = []
    input_size = None
    in_channels = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "input":
            if len(parts) != 3:
                raise ArchitectureError(f"line {lineno}: input needs size and channels")
            input_size, in_channels = int(parts[1]), int(parts[2])
            continue
        if len(parts) != 9:
            raise ArchitectureError(
                f"line {lineno}: expected 9 fields (name X C S D Sa De bn loss)")
        name, x, c, s, d, sa, de, bn, loss = parts
        for flag, allowed in ((bn, ("bn", "-")), (loss, ("loss", "-"))):
            if flag not in allowed:
                raise ArchitectureError(f"line {lineno}: bad flag {flag!r}")
        rows.append(LayerSpec(
            name=name, out_channels=int(c), stride=float(s), dilation=int(d),
            batchnorm=(bn == "bn"), loss_head=(loss == "loss"),
            declared_x=int(x), declared_sa=float(sa), declared_de=float(de)))
    if input_size is None:
        raise ArchitectureError("missing input line")
    return ArchitectureConfig(input_size=input_size, in_channels=in_channels,
                              rows=tuple(rows))


def format_architecture(cfg: ArchitectureConfig) -> str:
    def num(v: float) -> str:
        return str(int(v)) if float(v).is_integer() else str(v)

    lines = [f"input {cfg.input_size} {cfg.in_channels}"]
    for r in cfg.rows:
        lines.append(" ".join([
            r.name, str(r.declared_x), str(r.out_channels), num(r.stride),
            str(r.dilation), num(r.declared_sa), num(r.declared_de),
            "bn" if r.batchnorm else "-", "loss" if r.loss_head else "-"]))
    return "\n".join(lines) + "\n"


def load_architecture(path) -> ArchitectureConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_architecture(f.read())


def _builtin(name: str) -> ArchitectureConfig:
    text = resources.files("colorizer").joinpath(f"arch/{name}.txt").read_text()
    return parse_architecture(text)


def full_scale_config() -> ArchitectureConfig:
    """The full 224-input architecture; every declared X/Sa/De cell is
    re-derived and enforced at build time."""
    return _builtin("full224")


def desk_config() -> ArchitectureConfig:
    """Same stride/dilation plan with channel widths divided by 8 and a
    64x64 input; trains in minutes on a laptop CPU."""
    return _builtin("desk64")


def fingerprint(cfg: ArchitectureConfig, head_channels: int, variant: str) -> str:
    payload = format_architecture(cfg) + f"head {head_channels}\nvariant {variant}\n"
    return hashlib.sha256(payload.encode()).hexdigest()
