"""Assembly of the attention U-Net family from the published layer tables,
plus shape tracing, parameter counting, and checkpoint serialization.

Three networks are built in: ``raunet1`` (2D localization, 256x256 slices),
``raunet2`` (3D, 224x224x32 patches) and ``raunet_brain`` (3D, 64^3 patches,
4 input modalities). Entries mirror the tables row for row: an encoder of
(pool -> residual) levels with a doubled-up bottleneck, a decoder whose
long-range skips pass through attention modules of mask depth 0..levels-2
(top of decoder downward), and a sigmoid convolution head.

Desk-scale variants shrink the channel base and/or level count; a network's
exact configuration is captured by its descriptor string, e.g.
``raunet2(base=8,levels=3)``, which is also what checkpoints store.

Checkpoint container (little-endian): magic ``RAWT1``; u32 length-prefixed
UTF-8 descriptor; u32 blob count; per blob a u32 length-prefixed UTF-8 name,
u8 rank, rank u32 extents, then float32 scalars in C order. Blobs hold every
trainable parameter in entry order followed by the batch-norm running
statistics; round-trips are bit-exact.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

import numpy as np

from voxseg import autodiff as ad
from voxseg.autodiff import Tensor
from voxseg.blocks import (
    AttentionModule,
    AttentionModuleSpec,
    ConvLayer,
    ResidualBlock,
    ResidualBlockSpec,
)
from voxseg.errors import DataError, ShapeError

CHECKPOINT_MAGIC = b"RAWT1"

# name -> (ndim, in_channels, default base width, channel doubling starts at
# Res1 instead of Res2, canonical input spatial extents)
_FAMILIES = {
    "raunet1": (2, 1, 16, False, (256, 256)),
    "raunet2": (3, 1, 32, False, (32, 224, 224)),
    "raunet_brain": (3, 4, 32, True, (64, 64, 64)),
}
DEFAULT_LEVELS = 5


@dataclass(frozen=True)
class LayerEntry:
    name: str
    kind: str  # input | conv | pool | residual | attention | upsample | sigmoid_head
    sources: tuple = ()  # earlier entries feeding this one; empty = previous entry
    in_channels: int = 0
    out_channels: int = 0
    depth: int = 0  # attention mask depth


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    descriptor: str
    ndim: int
    in_channels: int
    base_channels: int
    levels: int
    entries: tuple = field(default_factory=tuple)
    input_spatial: tuple = ()

    def entry(self, name: str) -> LayerEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def _plan_entries(name: str, in_channels: int, base: int, levels: int, early_double: bool):
    """Entry list mirroring the table layout for an arbitrary level count."""
    if levels < 2:
        raise DataError("networks need at least 2 levels")
    cap = 2 ** (levels - 1)

    def enc_ch(i):  # Res_i output channels, i = 1..levels+1
        power = min(i if early_double else i - 1, levels - 1)
        return base * min(2**power, cap)

    entries = [LayerEntry("Input", "input", out_channels=in_channels)]
    entries.append(LayerEntry("Conv1", "conv", in_channels=in_channels, out_channels=base))
    prev = base
    for i in range(1, levels + 1):
        entries.append(LayerEntry(f"Pool{i}", "pool", in_channels=prev, out_channels=prev))
        ch = enc_ch(i)
        entries.append(LayerEntry(f"Res{i}", "residual", in_channels=prev, out_channels=ch))
        prev = ch
    bottleneck = enc_ch(levels + 1)
    entries.append(
        LayerEntry(f"Res{levels + 1}", "residual", in_channels=prev, out_channels=bottleneck)
    )
    prev = bottleneck
    entries.append(LayerEntry("Up1", "upsample", in_channels=prev, out_channels=prev))

    for j in range(1, levels):
        skip = f"Res{levels - j}"
        skip_ch = enc_ch(levels - j)
        entries.append(
            LayerEntry(
                f"Att{j}",
                "attention",
                sources=(skip,),
                in_channels=skip_ch,
                out_channels=skip_ch,
                depth=j - 1,
            )
        )
        entries.append(
            LayerEntry(
                f"Res{levels + 1 + j}",
                "residual",
                sources=(f"Up{j}", f"Att{j}"),
                in_channels=prev + skip_ch,
                out_channels=skip_ch,
            )
        )
        prev = skip_ch
        entries.append(
            LayerEntry(f"Up{j + 1}", "upsample", in_channels=prev, out_channels=prev)
        )
    entries.append(
        LayerEntry(
            "Conv2",
            "conv",
            sources=(f"Up{levels}", "Conv1"),
            in_channels=prev + base,
            out_channels=base,
        )
    )
    entries.append(LayerEntry("Conv3", "sigmoid_head", in_channels=base, out_channels=1))
    return tuple(entries)


_DESCRIPTOR_RE = re.compile(r"^(?P<name>[a-z0-9_]+)(?:\((?P<args>[^)]*)\))?$")


def parse_descriptor(descriptor: str):
    m = _DESCRIPTOR_RE.match(descriptor.strip())
    if not m:
        raise DataError(f"malformed network descriptor {descriptor!r}")
    name = m.group("name")
    base = levels = None
    if m.group("args"):
        for part in m.group("args").split(","):
            key, _, value = part.partition("=")
            key = key.strip()
            if key == "base":
                base = int(value)
            elif key == "levels":
                levels = int(value)
            else:
                raise DataError(f"unknown descriptor field {key!r} in {descriptor!r}")
    return name, base, levels


def make_spec(descriptor: str, *, base_channels=None, levels=None) -> NetworkSpec:
    name, d_base, d_levels = parse_descriptor(descriptor)
    if name not in _FAMILIES:
        raise DataError(f"unknown network {name!r}; expected one of {sorted(_FAMILIES)}")
    ndim, in_ch, default_base, early_double, canonical = _FAMILIES[name]
    base = base_channels if base_channels is not None else (d_base or default_base)
    lev = levels if levels is not None else (d_levels or DEFAULT_LEVELS)
    if base < 1:
        raise DataError("base channel width must be positive")
    parts = []
    if base != default_base:
        parts.append(f"base={base}")
    if lev != DEFAULT_LEVELS:
        parts.append(f"levels={lev}")
    desc = name + (f"({','.join(parts)})" if parts else "")
    spatial = canonical if lev == DEFAULT_LEVELS else tuple(2**lev for _ in range(ndim))
    return NetworkSpec(
        name=name,
        descriptor=desc,
        ndim=ndim,
        in_channels=in_ch,
        base_channels=base,
        levels=lev,
        entries=_plan_entries(name, in_ch, base, lev, early_double),
        input_spatial=spatial,
    )


class Network:
    """A built network: spec plus initialized layers, callable on tensors."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=ad.DEFAULT_DTYPE):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = {}
        for e in spec.entries:
            if e.kind in ("conv", "sigmoid_head"):
                self.layers[e.name] = ConvLayer(
                    e.in_channels, e.out_channels, 3, spec.ndim, rng, dtype
                )
            elif e.kind == "residual":
                self.layers[e.name] = ResidualBlock(
                    ResidualBlockSpec(e.in_channels, e.out_channels), spec.ndim, rng, dtype
                )
            elif e.kind == "attention":
                self.layers[e.name] = AttentionModule(
                    AttentionModuleSpec(e.in_channels, e.depth), spec.ndim, rng, dtype
                )

    @property
    def descriptor(self) -> str:
        return self.spec.descriptor

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        spec = self.spec
        if x.data.ndim != spec.ndim + 2:
            raise ShapeError(
                f"{spec.name} expects rank-{spec.ndim + 2} input, got rank {x.data.ndim}"
            )
        if x.shape[1] != spec.in_channels:
            raise ShapeError(
                f"{spec.name} expects {spec.in_channels} input channels, got {x.shape[1]}"
            )
        trace_shapes(spec, (x.shape[1],) + tuple(x.shape[2:]))  # validates divisibility
        outputs = {}
        prev = None
        for e in spec.entries:
            if e.kind == "input":
                out = x
            elif e.kind == "pool":
                out = ad.max_pool(prev, window=2)
            elif e.kind == "upsample":
                out = ad.upsample(prev, factor=2)
            else:
                if e.sources:
                    feeds = [outputs[s] for s in e.sources]
                    inp = feeds[0]
                    for extra in feeds[1:]:
                        inp = ad.concat_channels(inp, extra)
                else:
                    inp = prev
                layer = self.layers[e.name]
                if e.kind == "conv":
                    out = layer.forward(inp)
                elif e.kind == "sigmoid_head":
                    out = ad.sigmoid(layer.forward(inp))
                elif e.kind == "residual":
                    out = layer.forward(inp, mode)
                elif e.kind == "attention":
                    out = layer.forward(inp, mode)
                else:
                    raise DataError(f"unknown entry kind {e.kind!r}")
            outputs[e.name] = out
            prev = out
        return prev

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for e in self.spec.entries:
            layer = self.layers.get(e.name)
            if layer is None:
                continue
            for key, p in layer.parameters().items():
                params[f"{e.name}.{key}"] = p
        return params

    def states(self):
        states = {}
        for e in self.spec.entries:
            layer = self.layers.get(e.name)
            if layer is None:
                continue
            for key, s in layer.states().items():
                states[f"{e.name}.{key}"] = s
        return states

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None


def build(descriptor: str, *, base_channels=None, levels=None, seed: int = 0, dtype=ad.DEFAULT_DTYPE) -> Network:
    """Build and initialize a network from its name or descriptor string."""
    return Network(
        make_spec(descriptor, base_channels=base_channels, levels=levels),
        seed=seed,
        dtype=dtype,
    )


def trace_shapes(spec: NetworkSpec, input_shape) -> list:
    """Symbolic forward trace: [(entry name, (channels, *spatial)), ...].

    ``input_shape`` is channels-first without the batch axis. Divisibility
    violations are reported with the offending entry named.
    """
    channels, spatial = int(input_shape[0]), tuple(int(v) for v in input_shape[1:])
    if len(spatial) != spec.ndim:
        raise ShapeError(
            f"{spec.name} is {spec.ndim}D; input shape {tuple(input_shape)} has "
            f"{len(spatial)} spatial extents"
        )
    if channels != spec.in_channels:
        raise ShapeError(
            f"{spec.name} expects {spec.in_channels} input channels, got {channels}"
        )
    shapes = {}
    trace = []
    prev = None
    for e in spec.entries:
        if e.kind == "input":
            out = (channels,) + spatial
        elif e.kind == "pool":
            ch, sp = prev[0], prev[1:]
            for extent in sp:
                if extent % 2:
                    raise ShapeError(
                        f"{e.name}: spatial extents {sp} not divisible by 2"
                    )
                if extent < 2:
                    raise ShapeError(f"{e.name}: extent too small to pool, got {sp}")
            out = (ch,) + tuple(v // 2 for v in sp)
        elif e.kind == "upsample":
            out = (prev[0],) + tuple(v * 2 for v in prev[1:])
        elif e.kind == "attention":
            src = shapes[e.sources[0]]
            need = 1 << e.depth
            for extent in src[1:]:
                if extent % need:
                    raise ShapeError(
                        f"{e.name}: mask depth {e.depth} needs extents divisible by "
                        f"{need}, got {src[1:]}"
                    )
            out = (e.out_channels,) + src[1:]
        else:  # conv, residual, sigmoid_head
            if e.sources:
                feeds = [shapes[s] for s in e.sources]
                for f in feeds[1:]:
                    if f[1:] != feeds[0][1:]:
                        raise ShapeError(
                            f"{e.name}: concat sources disagree on spatial extents"
                        )
                in_ch = sum(f[0] for f in feeds)
                sp = feeds[0][1:]
            else:
                in_ch, sp = prev[0], prev[1:]
            if in_ch != e.in_channels:
                raise ShapeError(
                    f"{e.name}: expected {e.in_channels} input channels, got {in_ch}"
                )
            out = (e.out_channels,) + sp
        shapes[e.name] = out
        trace.append((e.name, out))
        prev = out
    return trace


def count_parameters(net: Network) -> int:
    """Exact number of trainable scalars (weights, biases, BN gammas/betas)."""
    return sum(p.data.size for p in net.parameters().values())


# ---------------------------------------------------------------------------
# checkpoints


def _blobs(net: Network):
    for name, p in net.parameters().items():
        yield name, p.data
    for name, s in net.states().items():
        yield f"{name}.running_mean", s.running_mean
        yield f"{name}.running_var", s.running_var


def save_checkpoint(path, net: Network) -> None:
    blobs = list(_blobs(net))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        desc = net.descriptor.encode("utf-8")
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=ad.DEFAULT_DTYPE) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if view[:5].tobytes() != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise DataError(f"{path}: truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (dlen,) = struct.unpack("<I", take(4))
    descriptor = take(dlen).tobytes().decode("utf-8")
    net = build(descriptor, dtype=dtype)
    expected = dict(_blobs(net))
    (count,) = struct.unpack("<I", take(4))
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).tobytes().decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n_scalars = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * n_scalars), dtype="<f4").reshape(shape)
        if name not in expected:
            raise DataError(f"{path}: unexpected blob {name!r} for {descriptor}")
        target = expected[name]
        if tuple(target.shape) != tuple(shape):
            raise DataError(
                f"{path}: blob {name!r} has shape {shape}, network needs "
                f"{tuple(target.shape)}"
            )
        target[...] = data.astype(target.dtype)
        seen.add(name)
    if pos != len(view):
        raise DataError(f"{path}: trailing bytes after last blob")
    missing = set(expected) - seen
    if missing:
        raise DataError(f"{path}: checkpoint is missing blobs: {sorted(missing)[:4]} ...")
    return net
