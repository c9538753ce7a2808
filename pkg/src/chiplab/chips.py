"""Probing classifiers ("chips") attached to backbone layers.

A linear chip maps a hidden state straight to class probabilities,
softmax(W x + b). An MLP chip inserts one hidden ReLU layer,
softmax(W1 relu(W2 x + b2) + b1). Forward passes are exact compositions of
the shared kernels, so they are bit-reproducible against them. Gradients are
analytic; ReLU uses subgradient 0 at 0.

Chip bank file layout (little-endian):
    magic  b"CTCH"
    u16    version (1)
    u8     kind (0 = linear, 1 = mlp)
    u32*4  n_layers, n_classes, d_model, hidden_dim (0 for linear)
    f32    per-layer tensors in field order:
           linear: w, b        mlp: w2, b2, w1, b1
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, FormatError
from .kernels import AdamState, matvec, nll_loss, relu, softmax

MAGIC = b"CTCH"
VERSION = 1
INIT_STD = 0.02
DEFAULT_HIDDEN = 256
KIND_CODES = {"linear": 0, "mlp": 1}


@dataclass
class LinearChip:
    w: np.ndarray  # (n_classes, d_model)
    b: np.ndarray  # (n_classes,)

    kind = "linear"

    def params(self):
        return [("w", self.w), ("b", self.b)]


@dataclass
class MlpChip:
    w2: np.ndarray  # (hidden, d_model)
    b2: np.ndarray  # (hidden,)
    w1: np.ndarray  # (n_classes, hidden)
    b1: np.ndarray  # (n_classes,)

    kind = "mlp"

    def params(self):
        return [("w2", self.w2), ("b2", self.b2), ("w1", self.w1), ("b1", self.b1)]


def _check_dims(kind, n_classes, d_model, hidden_dim):
    if kind not in KIND_CODES:
        raise ContractViolation(f"unknown chip kind {kind!r}")
    if n_classes < 2:
        raise ContractViolation(f"n_classes must be >= 2, got {n_classes}")
    if d_model < 1:
        raise ContractViolation(f"d_model must be >= 1, got {d_model}")
    if kind == "mlp" and hidden_dim < 1:
        raise ContractViolation(f"hidden_dim must be >= 1 for mlp chips, got {hidden_dim}")


def chip_init(kind: str, n_classes: int, d_model: int, hidden_dim: int,
              layer: int, master_seed: int):
    """Weights ~ normal(0, 0.02) seeded by master_seed XOR layer; biases zero."""
    _check_dims(kind, n_classes, d_model, hidden_dim)
    rng = np.random.Generator(np.random.PCG64(master_seed ^ layer))
    if kind == "linear":
        w = (rng.standard_normal((n_classes, d_model)) * INIT_STD).astype(np.float32)
        return LinearChip(w=w, b=np.zeros(n_classes, dtype=np.float32))
    w2 = (rng.standard_normal((hidden_dim, d_model)) * INIT_STD).astype(np.float32)
    w1 = (rng.standard_normal((n_classes, hidden_dim)) * INIT_STD).astype(np.float32)
    return MlpChip(w2=w2, b2=np.zeros(hidden_dim, dtype=np.float32),
                   w1=w1, b1=np.zeros(n_classes, dtype=np.float32))


def chip_zero(kind: str, n_classes: int, d_model: int, hidden_dim: int = DEFAULT_HIDDEN):
    """All-zero chip; outputs the uniform distribution for any input."""
    _check_dims(kind, n_classes, d_model, hidden_dim)
    if kind == "linear":
        return LinearChip(w=np.zeros((n_classes, d_model), dtype=np.float32),
                          b=np.zeros(n_classes, dtype=np.float32))
    return MlpChip(w2=np.zeros((hidden_dim, d_model), dtype=np.float32),
                   b2=np.zeros(hidden_dim, dtype=np.float32),
                   w1=np.zeros((n_classes, hidden_dim), dtype=np.float32),
                   b1=np.zeros(n_classes, dtype=np.float32))


def chip_forward(chip, x: np.ndarray) -> np.ndarray:
    """Class distribution for hidden state ``x``; sums to 1 within 1e-6."""
    x = np.asarray(x)
    if chip.kind == "linear":
        if x.shape != (chip.w.shape[1],):
            raise ContractViolation(f"input shape {x.shape} != (d_model,) = ({chip.w.shape[1]},)")
        return softmax(matvec(chip.w, x) + chip.b)
    if x.shape != (chip.w2.shape[1],):
        raise ContractViolation(f"input shape {x.shape} != (d_model,) = ({chip.w2.shape[1]},)")
    r = relu(matvec(chip.w2, x) + chip.b2)
    return softmax(matvec(chip.w1, r) + chip.b1)


def chip_loss_and_grad(chip, x: np.ndarray, label: int):
    """Cross-entropy loss and analytic gradients, keyed like chip.params()."""
    x = np.asarray(x, dtype=np.float32)
    if chip.kind == "linear":
        probs = chip_forward(chip, x)
        loss = nll_loss(probs, label)
        dz = probs.copy()
        dz[label] -= np.float32(1.0)
        return loss, {"w": np.outer(dz, x), "b": dz}
    u = matvec(chip.w2, x) + chip.b2
    r = relu(u)
    probs = softmax(matvec(chip.w1, r) + chip.b1)
    loss = nll_loss(probs, label)
    dz = probs.copy()
    dz[label] -= np.float32(1.0)
    dr = matvec(chip.w1.T, dz)
    du = np.where(u > 0, dr, np.float32(0.0))
    return loss, {"w2": np.outer(du, x), "b2": du, "w1": np.outer(dz, r), "b1": dz}


# ---------------------------------------------------------------------------
# banks: one chip per backbone layer, plus per-chip optimizer state


@dataclass
class ChipBank:
    kind: str
    n_classes: int
    d_model: int
    hidden_dim: int  # 0 for linear banks
    chips: list
    opt_states: list  # per layer: dict param-name -> AdamState
    step_counts: list  # per layer: completed optimizer steps

    @property
    def n_layers(self) -> int:
        return len(self.chips)


def init_bank(kind: str, n_layers: int, n_classes: int, d_model: int,
              hidden_dim: int = DEFAULT_HIDDEN, master_seed: int = 0) -> ChipBank:
    if n_layers < 1:
        raise ContractViolation(f"n_layers must be >= 1, got {n_layers}")
    _check_dims(kind, n_classes, d_model, hidden_dim)
    hidden = hidden_dim if kind == "mlp" else 0
    chips = [chip_init(kind, n_classes, d_model, hidden_dim, layer, master_seed)
             for layer in range(n_layers)]
    states = [{name: AdamState.zeros_like(p) for name, p in chip.params()} for chip in chips]
    return ChipBank(kind=kind, n_classes=n_classes, d_model=d_model, hidden_dim=hidden,
                    chips=chips, opt_states=states, step_counts=[0] * n_layers)


def multichip_loss(bank: ChipBank, trace: np.ndarray, label: int) -> float:
    """Sum of per-layer chip losses on one hidden trace; float64 accumulation."""
    trace = np.asarray(trace)
    if trace.shape[0] != bank.n_layers:
        raise ContractViolation(
            f"trace has {trace.shape[0]} layers, bank has {bank.n_layers}")
    total = 0.0
    for layer, chip in enumerate(bank.chips):
        total += nll_loss(chip_forward(chip, trace[layer]), label)
    return total


# ---------------------------------------------------------------------------
# serialization


def _bank_payload(bank: ChipBank) -> bytes:
    return b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes()
                    for chip in bank.chips for _, p in chip.params())


def serialize_bank(bank: ChipBank) -> bytes:
    head = MAGIC + struct.pack("<H", VERSION) + struct.pack(
        "<B4I", KIND_CODES[bank.kind], bank.n_layers, bank.n_classes,
        bank.d_model, bank.hidden_dim)
    return head + _bank_payload(bank)


def save_bank(bank: ChipBank, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_bank(bank))


def _chip_shapes(kind, n_classes, d_model, hidden_dim):
    if kind == "linear":
        return [("w", (n_classes, d_model)), ("b", (n_classes,))]
    return [("w2", (hidden_dim, d_model)), ("b2", (hidden_dim,)),
            ("w1", (n_classes, hidden_dim)), ("b1", (n_classes,))]


def load_bank(path) -> ChipBank:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError("magic", f"bad magic {magic!r}, expected {MAGIC!r}", path)
        rest = fh.read(2 + 17)
        if len(rest) != 19:
            raise FormatError("truncation", "file shorter than the fixed header", path)
        (version,) = struct.unpack("<H", rest[:2])
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}", path)
        kind_code, n_layers, n_classes, d_model, hidden = struct.unpack("<B4I", rest[2:])
        kinds = {v: k for k, v in KIND_CODES.items()}
        if kind_code not in kinds:
            raise FormatError("header", f"unknown chip kind code {kind_code}", path)
        kind = kinds[kind_code]
        try:
            _check_dims(kind, n_classes, d_model, hidden if kind == "mlp" else 1)
            if n_layers < 1:
                raise ContractViolation("n_layers must be >= 1")
        except ContractViolation as err:
            raise FormatError("header", f"invalid dims in header: {err}", path) from err
        shapes = _chip_shapes(kind, n_classes, d_model, hidden)
        chips = []
        for _ in range(n_layers):
            arrays = {}
            for name, shape in shapes:
                n_bytes = int(np.prod(shape)) * 4
                buf = fh.read(n_bytes)
                if len(buf) != n_bytes:
                    raise FormatError("truncation",
                                      f"expected {n_bytes} bytes for {name}, got {len(buf)}", path)
                arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            chips.append(LinearChip(**arrays) if kind == "linear" else MlpChip(**arrays))
        if fh.read(1):
            raise FormatError("length", "trailing bytes after final tensor", path)
    states = [{name: AdamState.zeros_like(p) for name, p in chip.params()} for chip in chips]
    return ChipBank(kind=kind, n_classes=n_classes, d_model=d_model, hidden_dim=hidden,
                    chips=chips, opt_states=states, step_counts=[0] * n_layers)
