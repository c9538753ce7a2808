"""Synthetic classification tasks, dataset splitting, and the feature cache.

Token id layout shared by every task kind: ids [0, C) are reserved label
tokens (used as pretraining targets, never emitted into inputs), id C is the
QUERY token closing every sequence, and the remaining ids are partitioned
into task-specific content groups plus filler.

Task kinds:
  majority-token   A unique START marker splits the sequence; the label is
                   the group holding the majority among group tokens after
                   the marker (3 tokens for the winner, 1 for every other
                   group). Pre-marker counts complement the window counts so
                   every group's whole-sequence total is identical: the
                   unordered bag of tokens carries zero label information,
                   which keeps the earliest layers at chance while the label
                   is still a plain majority count over the marked window.
  key-lookup       Exactly one value token hidden among filler; the label is
                   the group that value token belongs to.
  parity-of-count  Label = (number of tokens from a designated counted set)
                   mod 2. Requires n_classes == 2.

Feature cache file layout (little-endian):
    magic  b"CTFC"
    u16    version (1)
    10x    reserved zero bytes
    u32    n_layers
    u32    d_model
    u32    n_classes
    u64    n_examples
    then n_examples records of: label u32, then n_layers*d_model float32
The file size is exactly 36 + n_examples * (4 + n_layers*d_model*4) bytes.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneWeights, forward_trace
from .errors import ContractViolation, FormatError

TASK_KINDS = ("majority-token", "key-lookup", "parity-of-count")

CACHE_MAGIC = b"CTFC"
CACHE_VERSION = 1
CACHE_PREAMBLE = 16  # magic + version + reserved
CACHE_HEADER = 20  # n_layers, d_model, n_classes u32 each + n_examples u64

# post-marker window counts for the majority-token generator
WINDOW_WIN = 3
WINDOW_LOSE = 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int
    seq_len: int
    n_classes: int
    n_examples: int
    seed: int

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractViolation(f"unknown task kind {self.kind!r}")
        if self.n_classes < 2:
            raise ContractViolation(f"n_classes must be >= 2, got {self.n_classes}")
        if self.kind == "parity-of-count" and self.n_classes != 2:
            raise ContractViolation("parity-of-count requires n_classes == 2")
        if self.n_examples < 1:
            raise ContractViolation(f"n_examples must be >= 1, got {self.n_examples}")
        if self.seq_len < 2:
            raise ContractViolation(f"seq_len must be >= 2, got {self.seq_len}")
        if self.seed < 0:
            raise ContractViolation("seed must be non-negative")
        _layout(self)  # raises if vocab/seq_len cannot host the task


@dataclass
class LabeledExample:
    tokens: np.ndarray  # int64 token ids
    label: int


class _Layout:
    """Token-id ranges for one task spec."""

    def __init__(self, spec: TaskSpec):
        c = spec.n_classes
        self.query = c
        usable = spec.vocab_size - c - 1
        content = spec.seq_len - 1
        if spec.kind == "majority-token":
            self.start_marker = c + 1
            usable -= 1
            k = usable // (c + 1)
            if k < 1:
                raise ContractViolation(
                    f"vocab_size {spec.vocab_size} too small for majority-token with C={c}")
            # window counts: winner 3, others 1; pre-marker counts complement
            # them so each group totals WINDOW_WIN + WINDOW_LOSE tokens
            pre_group = (c - 1) * WINDOW_WIN + WINDOW_LOSE
            post_group = WINDOW_WIN + (c - 1) * WINDOW_LOSE
            fill_total = spec.seq_len - 2 - pre_group - post_group
            if fill_total < 2:
                raise ContractViolation(
                    f"seq_len {spec.seq_len} too small for majority-token with C={c}")
            self.group_size = k
            self.pre_fill = fill_total // 2
            self.post_fill = fill_total - self.pre_fill
            self.filler_start = c + 2 + c * k
        elif spec.kind == "key-lookup":
            k = (usable - 1) // c
            if k < 1:
                raise ContractViolation(
                    f"vocab_size {spec.vocab_size} too small for key-lookup with C={c}")
            self.group_size = k
            self.filler_start = c + 1 + c * k
        else:  # parity-of-count
            k = usable // 2
            if k < 1 or usable - k < 1:
                raise ContractViolation(
                    f"vocab_size {spec.vocab_size} too small for parity-of-count")
            self.counted_size = k
            self.filler_start = c + 1 + k
        self.filler_size = spec.vocab_size - self.filler_start
        if self.filler_size < 1:
            raise ContractViolation("no filler token ids left; increase vocab_size")
        self.spec = spec

    def group_range(self, g):
        start = self.spec.n_classes + 2 + g * self.group_size
        return start, start + self.group_size

    def value_range(self, g):
        start = self.spec.n_classes + 1 + g * self.group_size
        return start, start + self.group_size

    def counted_range(self):
        start = self.spec.n_classes + 1
        return start, start + self.counted_size


def _layout(spec: TaskSpec) -> _Layout:
    return _Layout(spec)


def _balanced_labels(rng, n, c):
    labels = np.arange(n, dtype=np.int64) % c
    rng.shuffle(labels)
    return labels


def gen_synthetic(spec: TaskSpec) -> list:
    """Deterministic dataset for ``spec``; same seed gives identical examples."""
    lay = _layout(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    labels = _balanced_labels(rng, spec.n_examples, spec.n_classes)
    content = spec.seq_len - 1
    out = []
    for y in labels:
        y = int(y)
        if spec.kind == "majority-token":
            pre, post = [], []
            for g in range(spec.n_classes):
                lo, hi = lay.group_range(g)
                n_post = WINDOW_WIN if g == y else WINDOW_LOSE
                n_pre = WINDOW_WIN + WINDOW_LOSE - n_post
                post.append(rng.integers(lo, hi, size=n_post))
                pre.append(rng.integers(lo, hi, size=n_pre))
            pre.append(rng.integers(lay.filler_start, spec.vocab_size, size=lay.pre_fill))
            post.append(rng.integers(lay.filler_start, spec.vocab_size, size=lay.post_fill))
            pre_part = np.concatenate(pre)
            post_part = np.concatenate(post)
            rng.shuffle(pre_part)
            rng.shuffle(post_part)
            tokens = np.concatenate(
                [pre_part, [lay.start_marker], post_part, [lay.query]]).astype(np.int64)
            out.append(LabeledExample(tokens=tokens, label=y))
            continue
        parts = []
        if spec.kind == "key-lookup":
            lo, hi = lay.value_range(y)
            parts.append(rng.integers(lo, hi, size=1))
            n_fill = content - 1
        else:  # parity-of-count
            lo, hi = lay.counted_range()
            count = int(rng.integers(0, (content - y) // 2 + 1)) * 2 + y
            parts.append(rng.integers(lo, hi, size=count))
            n_fill = content - count
        parts.append(rng.integers(lay.filler_start, spec.vocab_size, size=n_fill))
        tokens = np.concatenate(parts)
        rng.shuffle(tokens)
        tokens = np.concatenate([tokens, [lay.query]]).astype(np.int64)
        out.append(LabeledExample(tokens=tokens, label=y))
    return out


def task_label(spec: TaskSpec, tokens) -> int:
    """The labeling function: recomputes the class of a token sequence."""
    lay = _layout(spec)
    tokens = np.asarray(tokens)
    if spec.kind == "majority-token":
        marks = np.flatnonzero(tokens == lay.start_marker)
        if len(marks) != 1:
            raise ContractViolation("majority-token sequence needs exactly one start marker")
        window = tokens[marks[0] + 1:]
        counts = []
        for g in range(spec.n_classes):
            lo, hi = lay.group_range(g)
            counts.append(int(((window >= lo) & (window < hi)).sum()))
        return int(np.argmax(counts))
    if spec.kind == "key-lookup":
        for g in range(spec.n_classes):
            lo, hi = lay.value_range(g)
            if ((tokens >= lo) & (tokens < hi)).any():
                return g
        raise ContractViolation("sequence contains no value token")
    lo, hi = lay.counted_range()
    return int(((tokens >= lo) & (tokens < hi)).sum()) % 2


def split(data: list, fractions, seed: int):
    """Disjoint, exhaustive (train, validation, eval) split; floors go to train."""
    if len(fractions) != 3:
        raise ContractViolation("fractions must be a (train, validation, eval) triple")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractViolation(f"fractions must be non-negative and sum to 1, got {fractions}")
    n = len(data)
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    n_val = int(fractions[1] * n)
    n_eval = int(fractions[2] * n)
    n_train = n - n_val - n_eval
    train = [data[i] for i in order[:n_train]]
    val = [data[i] for i in order[n_train:n_train + n_val]]
    evl = [data[i] for i in order[n_train + n_val:]]
    return train, val, evl


# ---------------------------------------------------------------------------
# feature cache


@dataclass
class FeatureCache:
    n_layers: int
    d_model: int
    n_classes: int
    labels: np.ndarray  # (n,) int64
    features: np.ndarray  # (n, n_layers, d_model) float32

    @property
    def n_examples(self) -> int:
        return len(self.labels)


def _record_dtype(n_layers, d_model):
    return np.dtype([("label", "<u4"), ("feat", "<f4", (n_layers, d_model))])


def write_cache(cache: FeatureCache, path) -> None:
    n = cache.n_examples
    rec = np.empty(n, dtype=_record_dtype(cache.n_layers, cache.d_model))
    rec["label"] = cache.labels
    rec["feat"] = cache.features
    head = CACHE_MAGIC + struct.pack("<H", CACHE_VERSION) + b"\x00" * 10 + struct.pack(
        "<3IQ", cache.n_layers, cache.d_model, cache.n_classes, n)
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(rec.tobytes())


def extract_features(w: BackboneWeights, data: list, n_classes: int, path) -> FeatureCache:
    """Run the backbone over ``data`` and store every per-layer last-token state."""
    if not data:
        raise ContractViolation("cannot extract features from an empty dataset")
    if n_classes < 2:
        raise ContractViolation(f"n_classes must be >= 2, got {n_classes}")
    n = len(data)
    cfg = w.config
    features = np.empty((n, cfg.n_layers, cfg.d_model), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i, ex in enumerate(data):
        if not 0 <= ex.label < n_classes:
            raise ContractViolation(f"label {ex.label} out of range for {n_classes} classes")
        features[i] = forward_trace(w, ex.tokens)
        labels[i] = ex.label
    cache = FeatureCache(n_layers=cfg.n_layers, d_model=cfg.d_model,
                         n_classes=n_classes, labels=labels, features=features)
    try:
        write_cache(cache, path)
    except OSError as err:
        raise FormatError("io", f"failed to write cache: {err}", path) from err
    return cache


def read_cache(path, expect_layers: int | None = None, expect_d_model: int | None = None,
               expect_classes: int | None = None) -> FeatureCache:
    """Read and strictly validate a feature cache file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < CACHE_PREAMBLE + CACHE_HEADER:
        raise FormatError("truncation",
                          f"file has {len(blob)} bytes, shorter than the "
                          f"{CACHE_PREAMBLE + CACHE_HEADER}-byte header", path)
    if blob[:4] != CACHE_MAGIC:
        raise FormatError("magic", f"bad magic {blob[:4]!r}, expected {CACHE_MAGIC!r}", path)
    (version,) = struct.unpack("<H", blob[4:6])
    if version != CACHE_VERSION:
        raise FormatError("version", f"unsupported version {version}", path)
    n_layers, d_model, n_classes, n = struct.unpack(
        "<3IQ", blob[CACHE_PREAMBLE:CACHE_PREAMBLE + CACHE_HEADER])
    if n_layers < 1 or d_model < 1 or n_classes < 2:
        raise FormatError("header", f"implausible dims ({n_layers}, {d_model}, {n_classes})", path)
    expected = CACHE_PREAMBLE + CACHE_HEADER + n * (4 + n_layers * d_model * 4)
    if len(blob) < expected:
        raise FormatError("truncation",
                          f"expected {expected} bytes, got {len(blob)}", path)
    if len(blob) > expected:
        raise FormatError("length",
                          f"expected {expected} bytes, got {len(blob)} (trailing data)", path)
    if expect_layers is not None and n_layers != expect_layers:
        raise FormatError("dims", f"cache has {n_layers} layers, expected {expect_layers}", path)
    if expect_d_model is not None and d_model != expect_d_model:
        raise FormatError("dims", f"cache d_model {d_model}, expected {expect_d_model}", path)
    if expect_classes is not None and n_classes != expect_classes:
        raise FormatError("dims", f"cache has {n_classes} classes, expected {expect_classes}", path)
    rec = np.frombuffer(blob[CACHE_PREAMBLE + CACHE_HEADER:],
                        dtype=_record_dtype(n_layers, d_model))
    labels = rec["label"].astype(np.int64)
    if n > 0 and labels.max() >= n_classes:
        raise FormatError("header", "cache contains a label outside its declared class count", path)
    features = np.ascontiguousarray(rec["feat"], dtype=np.float32)
    return FeatureCache(n_layers=int(n_layers), d_model=int(d_model),
                        n_classes=int(n_classes), labels=labels, features=features)
