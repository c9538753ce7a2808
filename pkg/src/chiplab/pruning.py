"""Chip selection, layer removal and pruned inference.

A pruned model keeps backbone layers 0..l plus the selected chip. Because the
truncated forward pass performs exactly the same operations as the prefix of
the full pass, its output distribution is bit-identical to applying the chip
to the full model's layer-l trace.

Pruned model file layout (little-endian):
    magic  b"CTPM"
    u16    version (1)
    u32    kept-layer count (l + 1)
    u32*7  original backbone config
    u8     chip kind, then u32*4 chip header (n_layers=1, C, d_model, hidden)
    f32    retained backbone tensors in declaration order, then chip tensors
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import backbone as bb
from .chips import (KIND_CODES, ChipBank, LinearChip, MlpChip, _chip_shapes,
                    chip_forward)
from .errors import ContractViolation, FormatError

MAGIC = b"CTPM"
VERSION = 1

DEFAULT_VALIDATION_SIZE = 200


@dataclass(frozen=True)
class Fixed:
    layer: int
    name = "fixed"


@dataclass(frozen=True)
class Validate:
    n_validation: int = DEFAULT_VALIDATION_SIZE
    name = "validate"

    def __post_init__(self):
        if self.n_validation < 1:
            raise ContractViolation("n_validation must be >= 1")


@dataclass(frozen=True)
class Optimal:
    name = "optimal"


@dataclass
class SelectionReport:
    strategy: str
    accuracies: list | None  # per-layer accuracies the decision used, if any
    n_examples: int


def prune_ratio(n_layers: int, layer: int) -> float:
    """Fraction of transformer layers removed when keeping layers 0..layer."""
    if not 0 <= layer < n_layers:
        raise ContractViolation(f"layer {layer} out of range for {n_layers} layers")
    return (n_layers - (layer + 1)) / n_layers


class _Subset:
    """First-n view of a feature source."""

    def __init__(self, source, n):
        self.source = source
        self.n = n
        self.n_layers = source.n_layers
        self.d_model = source.d_model

    def __len__(self):
        return self.n

    def label(self, i):
        return self.source.label(i)

    def trace(self, i):
        return self.source.trace(i)


def select_chip(bank: ChipBank, strategy, validation_pool=None, eval_source=None):
    """Pick a layer per the strategy; ties go to the smallest layer index.

    Validate scores every chip on the first ``n_validation`` examples of
    ``validation_pool`` (callers pass a seeded shuffle of the training pool);
    Optimal scores on ``eval_source``.
    """
    from .training import evaluate_bank

    if isinstance(strategy, Fixed):
        if not 0 <= strategy.layer < bank.n_layers:
            raise ContractViolation(
                f"fixed layer {strategy.layer} out of range for {bank.n_layers} layers")
        return strategy.layer, SelectionReport(strategy="fixed", accuracies=None, n_examples=0)
    if isinstance(strategy, Validate):
        if validation_pool is None or len(validation_pool) < strategy.n_validation:
            have = 0 if validation_pool is None else len(validation_pool)
            raise ContractViolation(
                f"validation pool has {have} examples, need {strategy.n_validation}")
        accs = evaluate_bank(bank, _Subset(validation_pool, strategy.n_validation))
        layer = int(np.argmax(accs))
        return layer, SelectionReport(strategy="validate", accuracies=accs,
                                      n_examples=strategy.n_validation)
    if isinstance(strategy, Optimal):
        if eval_source is None or len(eval_source) == 0:
            raise ContractViolation("optimal selection needs a non-empty eval source")
        accs = evaluate_bank(bank, eval_source)
        layer = int(np.argmax(accs))
        return layer, SelectionReport(strategy="optimal", accuracies=accs,
                                      n_examples=len(eval_source))
    raise ContractViolation(f"unknown selection strategy {strategy!r}")


# ---------------------------------------------------------------------------
# pruned models


@dataclass
class PrunedModel:
    weights: bb.BackboneWeights  # config.n_layers == selected_layer + 1
    selected_layer: int
    chip: object
    n_layers_full: int

    @property
    def ratio(self) -> float:
        return prune_ratio(self.n_layers_full, self.selected_layer)


def _truncate_weights(w: bb.BackboneWeights, layer: int) -> bb.BackboneWeights:
    config = replace(w.config, n_layers=layer + 1)
    tensors = {"embedding": w.tensors["embedding"]}
    for i in range(layer + 1):
        for name in bb.LAYER_PARAMS:
            key = f"layers.{i}.{name}"
            tensors[key] = w.tensors[key]
    return bb.BackboneWeights(config, tensors)


def build_pruned_model(w: bb.BackboneWeights, bank: ChipBank, layer: int) -> PrunedModel:
    if not 0 <= layer < w.config.n_layers:
        raise ContractViolation(f"layer {layer} out of range for {w.config.n_layers} layers")
    if bank.n_layers != w.config.n_layers:
        raise ContractViolation("bank and backbone disagree on layer count")
    if bank.d_model != w.config.d_model:
        raise ContractViolation("bank and backbone disagree on d_model")
    return PrunedModel(weights=_truncate_weights(w, layer), selected_layer=layer,
                       chip=bank.chips[layer], n_layers_full=w.config.n_layers)


def pruned_infer(model: PrunedModel, tokens):
    """(predicted class, distribution) from the truncated forward pass."""
    h = bb.forward_truncated(model.weights, tokens, model.selected_layer)
    probs = chip_forward(model.chip, h)
    return int(np.argmax(probs)), probs


@dataclass
class MultiChipModel:
    weights: bb.BackboneWeights  # layers 0..max attached layer
    entries: list = field(default_factory=list)  # (task_id, layer, chip)
    n_layers_full: int = 0

    @property
    def max_layer(self) -> int:
        return max(layer for _, layer, _ in self.entries)


def build_multichip_model(w: bb.BackboneWeights, entries) -> MultiChipModel:
    """``entries`` is a list of (task_id, layer, chip); keeps layers 0..max."""
    entries = list(entries)
    if not entries:
        raise ContractViolation("multi-chip model needs at least one chip")
    for task_id, layer, chip in entries:
        if not 0 <= layer < w.config.n_layers:
            raise ContractViolation(f"layer {layer} out of range (task {task_id!r})")
    l_max = max(layer for _, layer, _ in entries)
    return MultiChipModel(weights=_truncate_weights(w, l_max), entries=entries,
                          n_layers_full=w.config.n_layers)


def multichip_infer(model: MultiChipModel, tokens) -> dict:
    """Run kept layers once; every chip reads its own layer's last-token state."""
    states = bb.layer_states(model.weights, tokens)
    out = {}
    for task_id, layer, chip in model.entries:
        probs = chip_forward(chip, states[layer][-1])
        out[task_id] = (int(np.argmax(probs)), probs)
    return out


# ---------------------------------------------------------------------------
# serialization


def save_pruned(model: PrunedModel, path) -> None:
    w = model.weights
    c = replace(w.config, n_layers=model.n_layers_full)
    chip = model.chip
    hidden = chip.w2.shape[0] if isinstance(chip, MlpChip) else 0
    n_classes = chip.w1.shape[0] if isinstance(chip, MlpChip) else chip.w.shape[0]
    head = MAGIC + struct.pack("<H", VERSION)
    head += struct.pack("<I", model.selected_layer + 1)
    head += struct.pack("<7I", c.n_layers, c.d_model, c.n_heads, c.d_ff,
                        c.vocab_size, c.max_seq_len, c.seed)
    head += struct.pack("<B4I", KIND_CODES[chip.kind], 1, n_classes, c.d_model, hidden)
    with open(path, "wb") as fh:
        fh.write(head)
        for name in bb._param_shapes(w.config):
            fh.write(w.tensors[name].tobytes())
        for _, p in chip.params():
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_pruned(path) -> PrunedModel:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError("magic", f"bad magic {magic!r}, expected {MAGIC!r}", path)
        rest = fh.read(2 + 4 + 28 + 17)
        if len(rest) != 51:
            raise FormatError("truncation", "file shorter than the fixed header", path)
        (version,) = struct.unpack("<H", rest[:2])
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}", path)
        (kept,) = struct.unpack("<I", rest[2:6])
        cfg_fields = struct.unpack("<7I", rest[6:34])
        kind_code, chip_layers, n_classes, d_model, hidden = struct.unpack("<B4I", rest[34:])
        kinds = {v: k for k, v in KIND_CODES.items()}
        if kind_code not in kinds or chip_layers != 1:
            raise FormatError("header", "invalid chip header", path)
        kind = kinds[kind_code]
        try:
            full_config = bb.BackboneConfig(*cfg_fields)
        except ContractViolation as err:
            raise FormatError("header", f"invalid config in header: {err}", path) from err
        if not 1 <= kept <= full_config.n_layers:
            raise FormatError("header", f"kept-layer count {kept} out of range", path)
        if d_model != full_config.d_model:
            raise FormatError("dims", "chip d_model disagrees with backbone config", path)
        trunc_config = replace(full_config, n_layers=kept)
        tensors = {}
        for name, shape in bb._param_shapes(trunc_config).items():
            n_bytes = int(np.prod(shape)) * 4
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise FormatError("truncation",
                                  f"expected {n_bytes} bytes for {name}, got {len(buf)}", path)
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        arrays = {}
        for name, shape in _chip_shapes(kind, n_classes, d_model, hidden):
            n_bytes = int(np.prod(shape)) * 4
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise FormatError("truncation",
                                  f"expected {n_bytes} bytes for chip {name}, got {len(buf)}", path)
            arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("length", "trailing bytes after final tensor", path)
    chip = LinearChip(**arrays) if kind == "linear" else MlpChip(**arrays)
    weights = bb.BackboneWeights(trunc_config, tensors)
    return PrunedModel(weights=weights, selected_layer=kept - 1, chip=chip,
                       n_layers_full=full_config.n_layers)
