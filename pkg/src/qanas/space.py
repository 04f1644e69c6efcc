"""Block-structured search space around MobileNetV2.

A space is a linear chain of inverted-bottleneck blocks, each with its own
choice lists for kernel size, width multiplier, expansion factor and number
of repetitions, followed by a 1x1 "conv2" stage and a dense classifier.
Every weighted layer of a materialized architecture gets its own weight
bitwidth drawn from ``bitwidth_choices``.

Block numbers are 1-based everywhere (config files, ``stride_after_blocks``,
``LayerSpec.group``); group 0 is the stem and group ``len(blocks) + 1`` the
head (conv2 + classifier).
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

LAYER_KINDS = (
    "conv",
    "depthwise_conv",
    "pointwise_conv",
    "dense",
    "batchnorm",
    "relu6",
    "global_pool",
    "residual_add",
)
WEIGHTED_KINDS = frozenset({"conv", "depthwise_conv", "pointwise_conv", "dense"})


class SpaceError(ValueError):
    """Raised for malformed spaces or genomes that do not belong to a space."""


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _check_choices(name: str, choices: Sequence) -> None:
    if len(choices) == 0:
        raise SpaceError(f"{name}: empty choice list")
    if len(set(choices)) != len(choices):
        raise SpaceError(f"{name}: duplicate choices {list(choices)}")


@dataclass(frozen=True)
class BlockSpec:
    kernel_size_choices: tuple[int, ...]
    width_multiplier_choices: tuple[float, ...]
    expansion_choices: tuple[int, ...]
    repetition_choices: tuple[int, ...]
    # index into each choice list, in the order (k, alpha, e, n)
    seed: tuple[int, int, int, int]
    base_width: int

    def __post_init__(self):
        lists = self.choice_lists()
        names = ("kernel_size", "width_multiplier", "expansion", "repetitions")
        for name, choices, s in zip(names, lists, self.seed):
            _check_choices(name, choices)
            if not 0 <= s < len(choices):
                raise SpaceError(f"{name}: seed index {s} out of range")
        if any(k < 1 for k in self.kernel_size_choices):
            raise SpaceError("kernel sizes must be positive")
        if any(a <= 0 for a in self.width_multiplier_choices):
            raise SpaceError("width multipliers must be positive")
        if any(e < 1 for e in self.expansion_choices):
            raise SpaceError("expansion factors must be positive")
        if any(n < 0 for n in self.repetition_choices):
            raise SpaceError("repetitions must be non-negative")
        if self.base_width < 1:
            raise SpaceError("base width must be positive")

    def choice_lists(self) -> tuple[tuple, tuple, tuple, tuple]:
        return (
            self.kernel_size_choices,
            self.width_multiplier_choices,
            self.expansion_choices,
            self.repetition_choices,
        )

    @property
    def size(self) -> int:
        return math.prod(len(c) for c in self.choice_lists())


@dataclass(frozen=True)
class SearchSpaceSpec:
    blocks: tuple[BlockSpec, ...]
    conv2_filter_choices: tuple[int, ...]
    conv2_seed: int
    bitwidth_choices: tuple[int, ...]
    bitwidth_seed: int
    stride_after_blocks: tuple[int, ...]
    input_shape: tuple[int, int, int]
    num_classes: int
    stem_base_width: int = 32
    stem_kernel_size: int = 3

    def __post_init__(self):
        if not self.blocks:
            raise SpaceError("space needs at least one block")
        _check_choices("conv2_filters", self.conv2_filter_choices)
        _check_choices("bitwidth", self.bitwidth_choices)
        if not 0 <= self.conv2_seed < len(self.conv2_filter_choices):
            raise SpaceError("conv2 seed index out of range")
        if not 0 <= self.bitwidth_seed < len(self.bitwidth_choices):
            raise SpaceError("bitwidth seed index out of range")
        if any(f < 1 for f in self.conv2_filter_choices):
            raise SpaceError("conv2 filter counts must be positive")
        for b in self.stride_after_blocks:
            if not 1 <= b <= len(self.blocks):
                raise SpaceError(f"stride_after_blocks: invalid block number {b}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpaceError(f"bad input shape {self.input_shape}")
        if self.num_classes < 1:
            raise SpaceError("num_classes must be positive")

    @property
    def head_group(self) -> int:
        return len(self.blocks) + 1


@dataclass(frozen=True)
class BlockGenome:
    kernel_size: int
    width_multiplier: float
    expansion: int
    repetitions: int

    def values(self) -> tuple:
        return (self.kernel_size, self.width_multiplier, self.expansion, self.repetitions)


@dataclass(frozen=True)
class ArchitectureGenome:
    blocks: tuple[BlockGenome, ...]
    conv2_filters: int

    def to_dict(self) -> dict:
        return {
            "blocks": [list(b.values()) for b in self.blocks],
            "conv2_filters": self.conv2_filters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureGenome":
        blocks = tuple(
            BlockGenome(int(k), float(a), int(e), int(n)) for k, a, e, n in d["blocks"]
        )
        return cls(blocks, int(d["conv2_filters"]))


@dataclass(frozen=True)
class QuantizationPolicy:
    weight_bitwidths: tuple[int, ...]
    activation_bitwidth: int = 8
    bias_bitwidth: int = 32

    def __len__(self) -> int:
        return len(self.weight_bitwidths)

    @classmethod
    def uniform(cls, n_layers: int, bits: int) -> "QuantizationPolicy":
        return cls(tuple([bits] * n_layers))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int = 1
    stride: int = 1
    in_channels: int = 1
    out_channels: int = 1
    group: int = 0
    # residual_add only: index of the layer whose input is the shortcut
    skip_from: int | None = None
    in_hw: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpaceError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpaceError(f"{self.kind}: channel counts must be positive")
        if self.kind == "residual_add":
            if self.stride != 1 or self.in_channels != self.out_channels:
                raise SpaceError("residual_add needs stride 1 and matching channels")
            if self.skip_from is None:
                raise SpaceError("residual_add needs skip_from")

    @property
    def quantizable(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def weight_shape(self) -> tuple[int, ...] | None:
        k, cin, cout = self.kernel_size, self.in_channels, self.out_channels
        if self.kind == "conv":
            return (k, k, cin, cout)
        if self.kind == "depthwise_conv":
            return (k, k, cin)
        if self.kind in ("pointwise_conv", "dense"):
            return (cin, cout)
        return None

    @property
    def n_weights(self) -> int:
        shape = self.weight_shape
        return math.prod(shape) if shape else 0

    @property
    def n_biases(self) -> int:
        return self.out_channels if self.quantizable else 0


# --------------------------------------------------------------------------
# genomes


def seed_genome(space: SearchSpaceSpec) -> ArchitectureGenome:
    blocks = tuple(
        BlockGenome(*(choices[i] for choices, i in zip(b.choice_lists(), b.seed)))
        for b in space.blocks
    )
    return ArchitectureGenome(blocks, space.conv2_filter_choices[space.conv2_seed])


def seed_policy(space: SearchSpaceSpec, genome: ArchitectureGenome) -> QuantizationPolicy:
    bits = space.bitwidth_choices[space.bitwidth_seed]
    return QuantizationPolicy.uniform(quantizable_layers(genome, space), bits)


def validate_genome(genome: ArchitectureGenome, space: SearchSpaceSpec) -> None:
    if len(genome.blocks) != len(space.blocks):
        raise SpaceError(
            f"genome has {len(genome.blocks)} blocks, space has {len(space.blocks)}"
        )
    names = ("kernel_size", "width_multiplier", "expansion", "repetitions")
    for i, (g, b) in enumerate(zip(genome.blocks, space.blocks), start=1):
        for name, v, choices in zip(names, g.values(), b.choice_lists()):
            if v not in choices:
                raise SpaceError(f"block {i}: {name}={v} not in {list(choices)}")
    if genome.conv2_filters not in space.conv2_filter_choices:
        raise SpaceError(f"conv2_filters={genome.conv2_filters} not a choice")


def validate_policy(
    policy: QuantizationPolicy, genome: ArchitectureGenome, space: SearchSpaceSpec
) -> None:
    n = quantizable_layers(genome, space)
    if len(policy) != n:
        raise SpaceError(f"policy has {len(policy)} entries, genome has {n} weighted layers")
    bad = [b for b in policy.weight_bitwidths if b not in space.bitwidth_choices]
    if bad:
        raise SpaceError(f"bitwidths {sorted(set(bad))} not in {list(space.bitwidth_choices)}")


def sample_genome(space: SearchSpaceSpec, rng: np.random.Generator) -> ArchitectureGenome:
    blocks = []
    for b in space.blocks:
        values = [choices[int(rng.integers(len(choices)))] for choices in b.choice_lists()]
        blocks.append(BlockGenome(*values))
    conv2 = space.conv2_filter_choices[int(rng.integers(len(space.conv2_filter_choices)))]
    return ArchitectureGenome(tuple(blocks), conv2)


def sample_policy(
    space: SearchSpaceSpec, genome: ArchitectureGenome, rng: np.random.Generator
) -> QuantizationPolicy:
    n = quantizable_layers(genome, space)
    idx = rng.integers(len(space.bitwidth_choices), size=n)
    return QuantizationPolicy(tuple(int(space.bitwidth_choices[i]) for i in idx))


# --------------------------------------------------------------------------
# structure


def _layers_per_repetition(expansion: int) -> int:
    # depthwise + project, plus expand unless e == 1
    return 2 if expansion == 1 else 3


def quantizable_layer_groups(genome: ArchitectureGenome, space: SearchSpaceSpec) -> list[int]:
    """Group number of every weighted layer, in materialization order."""
    groups = [0]
    for i, g in enumerate(genome.blocks, start=1):
        groups.extend([i] * (g.repetitions * _layers_per_repetition(g.expansion)))
    groups.extend([space.head_group, space.head_group])
    return groups


def quantizable_layers(genome: ArchitectureGenome, space: SearchSpaceSpec) -> int:
    return len(quantizable_layer_groups(genome, space))


def channels(alpha: float, base_width: int) -> int:
    return max(1, round_half_away(alpha * base_width))


def _out_size(size: int, stride: int) -> int:
    return -(-size // stride)


def materialize(genome: ArchitectureGenome, space: SearchSpaceSpec) -> list[LayerSpec]:
    """Expand a genome into the concrete layer chain.

    Stem conv (stride 1), then per block ``n`` inverted bottlenecks, then a
    1x1 conv with ``conv2_filters`` outputs, global average pooling and a
    dense classifier. Convolutions use "same" padding, so a stride-2 stage
    maps ``h`` to ``ceil(h / 2)``. A stride of 2 is owed after each block in
    ``stride_after_blocks`` and paid by the next bottleneck that exists;
    strides still owed after the last block are dropped.
    """
    validate_genome(genome, space)
    h, w, cin = space.input_shape
    layers: list[LayerSpec] = []

    def add(kind, **kw):
        layers.append(LayerSpec(kind, group=group, in_hw=(h, w), **kw))

    group = 0
    c = channels(genome.blocks[0].width_multiplier, space.stem_base_width)
    add("conv", kernel_size=space.stem_kernel_size, in_channels=cin, out_channels=c)
    add("batchnorm", in_channels=c, out_channels=c)
    add("relu6", in_channels=c, out_channels=c)

    owed = 0
    for group, (g, b) in enumerate(zip(genome.blocks, space.blocks), start=1):
        cout = channels(g.width_multiplier, b.base_width)
        for _ in range(g.repetitions):
            stride = 1
            if owed:
                stride, owed = 2, owed - 1
            start = len(layers)
            cin = c
            hidden = cin * g.expansion
            if g.expansion != 1:
                add("pointwise_conv", in_channels=cin, out_channels=hidden)
                add("batchnorm", in_channels=hidden, out_channels=hidden)
                add("relu6", in_channels=hidden, out_channels=hidden)
            add(
                "depthwise_conv",
                kernel_size=g.kernel_size,
                stride=stride,
                in_channels=hidden,
                out_channels=hidden,
            )
            h, w = _out_size(h, stride), _out_size(w, stride)
            add("batchnorm", in_channels=hidden, out_channels=hidden)
            add("relu6", in_channels=hidden, out_channels=hidden)
            add("pointwise_conv", in_channels=hidden, out_channels=cout)
            add("batchnorm", in_channels=cout, out_channels=cout)
            if stride == 1 and cin == cout:
                add("residual_add", in_channels=cout, out_channels=cout, skip_from=start)
            c = cout
        if group in space.stride_after_blocks:
            owed += 1

    if h < 1 or w < 1:
        raise SpaceError(f"spatial size collapsed to {h}x{w}")
    group = space.head_group
    add("pointwise_conv", in_channels=c, out_channels=genome.conv2_filters)
    c = genome.conv2_filters
    add("batchnorm", in_channels=c, out_channels=c)
    add("relu6", in_channels=c, out_channels=c)
    add("global_pool", in_channels=c, out_channels=c)
    add("dense", in_channels=c, out_channels=space.num_classes)
    return layers


def final_spatial_size(layers: Sequence[LayerSpec]) -> tuple[int, int]:
    pool = next(l for l in layers if l.kind == "global_pool")
    return pool.in_hw


# --------------------------------------------------------------------------
# counting


def cardinality(space: SearchSpaceSpec) -> tuple[int, int]:
    """Exact (architectures, seed-architecture quantization policies)."""
    archs = math.prod(b.size for b in space.blocks) * len(space.conv2_filter_choices)
    n_layers = quantizable_layers(seed_genome(space), space)
    return archs, len(space.bitwidth_choices) ** n_layers


def total_mixed_precision_networks(space: SearchSpaceSpec) -> int:
    """Exact count of (architecture, policy) pairs, letting the policy length
    follow each architecture's own weighted-layer count."""
    nb = len(space.bitwidth_choices)
    total = nb ** 3  # stem + conv2 + dense
    for b in space.blocks:
        per_block = sum(
            nb ** (n * _layers_per_repetition(e))
            for e in b.expansion_choices
            for n in b.repetition_choices
        )
        total *= len(b.kernel_size_choices) * len(b.width_multiplier_choices) * per_block
    return total * len(space.conv2_filter_choices)


# --------------------------------------------------------------------------
# surrogate featurization


def _ordinal(value, choices: Sequence) -> float:
    return choices.index(value) / (len(choices) - 1)


def encoding_length(space: SearchSpaceSpec) -> int:
    n = sum(len(c) > 1 for b in space.blocks for c in b.choice_lists())
    n += len(space.conv2_filter_choices) > 1
    if len(space.bitwidth_choices) > 1:
        n += 2 * (len(space.blocks) + 2)
    return n


def encode(
    genome: ArchitectureGenome,
    policy: QuantizationPolicy | None,
    space: SearchSpaceSpec,
) -> np.ndarray:
    """Fixed-length vector in [0, 1]^d for the surrogate.

    Genes with a single choice carry no information and get no slot. Each
    remaining gene is its ordinal index scaled to [0, 1]. Bitwidths are
    summarized per group (stem, each block, head) as normalized (mean, min).
    Blocks with zero repetitions encode 0 in all their slots. ``policy=None``
    (unquantized) encodes every bitwidth slot as 1.
    """
    out: list[float] = []
    for g, b in zip(genome.blocks, space.blocks):
        absent = g.repetitions == 0
        for v, choices in zip(g.values(), b.choice_lists()):
            if len(choices) > 1:
                out.append(0.0 if absent else _ordinal(v, choices))
    if len(space.conv2_filter_choices) > 1:
        out.append(_ordinal(genome.conv2_filters, space.conv2_filter_choices))

    bits = space.bitwidth_choices
    if len(bits) > 1:
        n_groups = len(space.blocks) + 2
        if policy is None:
            out.extend([1.0] * (2 * n_groups))
        else:
            lo, hi = min(bits), max(bits)
            groups = np.asarray(quantizable_layer_groups(genome, space))
            bw = np.asarray(policy.weight_bitwidths, dtype=float)
            if len(bw) != len(groups):
                raise SpaceError("policy length does not match genome")
            for gi in range(n_groups):
                sel = bw[groups == gi]
                if sel.size == 0:
                    out.extend([0.0, 0.0])
                else:
                    out.append((sel.mean() - lo) / (hi - lo))
                    out.append((sel.min() - lo) / (hi - lo))
    return np.asarray(out, dtype=float)


def distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"encoding length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


# --------------------------------------------------------------------------
# config files


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _seed_index(section, key, choices, parse):
    seed_value = parse(section[f"{key}_seed"])[0]
    if seed_value not in choices:
        raise SpaceError(f"[{section.name}] {key}_seed={seed_value} not in {list(choices)}")
    return choices.index(seed_value)


def parse_space(text: str) -> SearchSpaceSpec:
    """Parse the INI space schema (see ``configs/table1.ini``)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if "space" not in cp:
        raise SpaceError("missing [space] section")
    sp = cp["space"]
    block_names = sorted(
        (s for s in cp.sections() if s.startswith("block.")), key=lambda s: int(s.split(".")[1])
    )
    if [int(s.split(".")[1]) for s in block_names] != list(range(1, len(block_names) + 1)):
        raise SpaceError("block sections must be numbered block.1 .. block.N")
    blocks = []
    for name in block_names:
        sec = cp[name]
        ks = _ints(sec["kernel_size"])
        al = _floats(sec["width_multiplier"])
        ex = _ints(sec["expansion"])
        rp = _ints(sec["repetitions"])
        seed = (
            _seed_index(sec, "kernel_size", ks, _ints),
            _seed_index(sec, "width_multiplier", al, _floats),
            _seed_index(sec, "expansion", ex, _ints),
            _seed_index(sec, "repetitions", rp, _ints),
        )
        blocks.append(BlockSpec(ks, al, ex, rp, seed, int(sec["base_width"])))
    conv2 = _ints(sp["conv2_filters"])
    bits = _ints(sp["bitwidth"])
    return SearchSpaceSpec(
        blocks=tuple(blocks),
        conv2_filter_choices=conv2,
        conv2_seed=_seed_index(sp, "conv2_filters", conv2, _ints),
        bitwidth_choices=bits,
        bitwidth_seed=_seed_index(sp, "bitwidth", bits, _ints),
        stride_after_blocks=_ints(sp.get("stride_after_blocks", "")),
        input_shape=_ints(sp["input_shape"]),
        num_classes=int(sp["num_classes"]),
        stem_base_width=int(sp.get("stem_base_width", "32")),
        stem_kernel_size=int(sp.get("stem_kernel_size", "3")),
    )


def load_space(name_or_path: str | Path) -> SearchSpaceSpec:
    """Load a bundled space by name (``table1``, ``table1_cifar100``, ``toy``)
    or an INI file by path."""
    p = Path(name_or_path)
    if p.suffix == ".ini" and p.exists():
        return parse_space(p.read_text())
    res = resources.files("qanas") / "configs" / f"{name_or_path}.ini"
    if not res.is_file():
        raise SpaceError(f"no such space config: {name_or_path}")
    return parse_space(res.read_text())


def with_input(space: SearchSpaceSpec, input_shape, num_classes: int) -> SearchSpaceSpec:
    from dataclasses import replace

    return replace(space, input_shape=tuple(input_shape), num_classes=int(num_classes))
