"""Simultaneous training of a chip bank against a frozen feature source.

A feature source is anything with ``__len__``, ``label(i)``, ``trace(i)``,
``n_layers`` and ``d_model``: either live backbone traces or a feature cache.
Both yield bit-identical float32 vectors for the same data, so training from
a cache reproduces live training byte for byte.

Each example's trace is computed once and shared read-only by all chips; one
Adam step per chip per batch, from that chip's own analytic gradient. Chips
are independent, so the layer-parallel path is bit-identical to sequential
execution.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneWeights, forward_trace
from .chips import ChipBank, chip_forward, chip_loss_and_grad
from .data import FeatureCache
from .errors import ContractViolation
from .kernels import AdamHyper, adam_step


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 1
    batch_size: int = 1
    max_examples: int = 20_000
    eval_every: int = 2_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    master_seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "max_examples", "eval_every"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive, got {getattr(self, name)}")
        if self.eval_every > self.max_examples:
            raise ContractViolation(
                f"eval_every ({self.eval_every}) must not exceed max_examples "
                f"({self.max_examples})")
        if self.master_seed < 0:
            raise ContractViolation("master_seed must be non-negative")

    def hyper(self) -> AdamHyper:
        return AdamHyper(lr=self.learning_rate, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


class TraceDataset:
    """Live feature source: runs the backbone per example."""

    def __init__(self, weights: BackboneWeights, examples: list):
        self.weights = weights
        self.examples = examples
        self.n_layers = weights.config.n_layers
        self.d_model = weights.config.d_model

    def __len__(self):
        return len(self.examples)

    def label(self, i: int) -> int:
        return self.examples[i].label

    def trace(self, i: int) -> np.ndarray:
        return forward_trace(self.weights, self.examples[i].tokens)


class ArrayDataset:
    """In-memory feature source over (n, n_layers, d_model) float32 features."""

    def __init__(self, features: np.ndarray, labels):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 3:
            raise ContractViolation(f"features must be (n, layers, d_model), got {features.shape}")
        self.features = features
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.shape != (features.shape[0],):
            raise ContractViolation("labels and features disagree on example count")
        self.n_layers = features.shape[1]
        self.d_model = features.shape[2]

    @classmethod
    def from_cache(cls, cache: FeatureCache) -> "ArrayDataset":
        return cls(cache.features, cache.labels)

    def __len__(self):
        return len(self.labels)

    def label(self, i: int) -> int:
        return int(self.labels[i])

    def trace(self, i: int) -> np.ndarray:
        return self.features[i]


def _check_source(bank: ChipBank, source, what: str):
    if source.n_layers != bank.n_layers:
        raise ContractViolation(
            f"{what} has {source.n_layers} layers, bank has {bank.n_layers}")
    if source.d_model != bank.d_model:
        raise ContractViolation(
            f"{what} d_model {source.d_model} != bank d_model {bank.d_model}")


def evaluate_bank(bank: ChipBank, source) -> list:
    """Per-layer accuracy; argmax ties resolve to the smallest class index."""
    _check_source(bank, source, "eval source")
    n = len(source)
    if n == 0:
        raise ContractViolation("evaluation set must be non-empty")
    correct = [0] * bank.n_layers
    for i in range(n):
        trace = source.trace(i)
        label = source.label(i)
        for layer, chip in enumerate(bank.chips):
            probs = chip_forward(chip, trace[layer])
            if int(np.argmax(probs)) == label:
                correct[layer] += 1
    return [c / n for c in correct]


def _train_one_chip(bank, layer, feats, labels, hyper):
    chip = bank.chips[layer]
    grads = None
    loss_sum = 0.0
    for x, y in zip(feats, labels):
        loss, g = chip_loss_and_grad(chip, x[layer], y)
        loss_sum += loss
        if grads is None:
            grads = g
        else:
            for name in grads:
                grads[name] += g[name]
    if len(feats) > 1:
        scale = np.float32(1.0 / len(feats))
        for name in grads:
            grads[name] *= scale
    bank.step_counts[layer] += 1
    t = bank.step_counts[layer]
    state = bank.opt_states[layer]
    for name, param in chip.params():
        adam_step(param, grads[name], state[name], hyper, t)
    return loss_sum


def train_bank(bank: ChipBank, train_source, eval_source, cfg: TrainConfig,
               workers: int = 1, layer_subset=None):
    """Train every chip (or ``layer_subset``) over shuffled examples.

    Returns ``(bank, curves)`` where curves[layer] is a list of
    (step, eval accuracy) pairs recorded every ``cfg.eval_every`` steps and at
    the final step. The backbone (when training live) is never written to.
    """
    _check_source(bank, train_source, "train source")
    if eval_source is not None:
        _check_source(bank, eval_source, "eval source")
    n_avail = len(train_source)
    if n_avail == 0:
        raise ContractViolation("training set must be non-empty")
    n_used = min(n_avail, cfg.max_examples)
    layers = list(range(bank.n_layers)) if layer_subset is None else sorted(set(layer_subset))
    for layer in layers:
        if not 0 <= layer < bank.n_layers:
            raise ContractViolation(f"layer {layer} out of range")

    hyper = cfg.hyper()
    steps_per_epoch = (n_used + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    rng = np.random.Generator(np.random.PCG64(cfg.master_seed))
    curves = [[] for _ in range(bank.n_layers)]
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def record_eval(step):
        accs = evaluate_bank(bank, eval_source)
        for layer in range(bank.n_layers):
            curves[layer].append((step, accs[layer]))

    try:
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(n_avail)[:n_used]
            for start in range(0, n_used, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                labels = []
                for i in batch:
                    y = train_source.label(int(i))
                    if not 0 <= y < bank.n_classes:
                        raise ContractViolation(
                            f"label {y} out of range for {bank.n_classes} classes")
                    labels.append(y)
                feats = [train_source.trace(int(i)) for i in batch]
                if pool is None:
                    for layer in layers:
                        _train_one_chip(bank, layer, feats, labels, hyper)
                else:
                    jobs = [pool.submit(_train_one_chip, bank, layer, feats, labels, hyper)
                            for layer in layers]
                    for job in jobs:
                        job.result()
                step += 1
                if eval_source is not None and (step % cfg.eval_every == 0 or step == total_steps):
                    record_eval(step)
    finally:
        if pool is not None:
            pool.shutdown()
    return bank, curves


def curves_to_rows(curves) -> list:
    """Flatten per-layer curves into (step, layer, accuracy) rows, step-major."""
    rows = []
    for layer, pairs in enumerate(curves):
        for step, acc in pairs:
            rows.append((step, layer, acc))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows
