"""A minimal frozen decoder-only transformer.

Pre-norm blocks: LayerNorm -> causal attention -> residual, then
LayerNorm -> GELU feed-forward -> residual. Chips read the raw residual
stream at the last token position of each layer; no final normalization is
ever applied, so the probed vector and the pruned-inference vector are the
same array. There are no positional embeddings: the synthetic tasks are
functions of aggregate sequence content, and causal masking alone provides
the ordering guarantees the contracts need.

Weight file layout (little-endian):
    magic  b"CTBW"
    u16    version (1)
    u32*7  n_layers, d_model, n_heads, d_ff, vocab_size, max_seq_len, seed
    f32    tensors in declaration order: embedding, then per layer
           ln1_scale, ln1_bias, wq, wk, wv, wo, ln2_scale, ln2_bias,
           w_in, w_out
"""

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, FormatError
from .kernels import AdamHyper, AdamState, adam_step

MAGIC = b"CTBW"
VERSION = 1
INIT_STD = 0.02
LN_EPS = 1e-5
GELU_C = 0.7978845608028654  # sqrt(2/pi)

LAYER_PARAMS = ("ln1_scale", "ln1_bias", "wq", "wk", "wv", "wo",
                "ln2_scale", "ln2_bias", "w_in", "w_out")


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    seed: int

    def __post_init__(self):
        if self.n_layers < 1:
            raise ContractViolation(f"n_layers must be >= 1, got {self.n_layers}")
        if self.vocab_size < 2:
            raise ContractViolation(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.d_model < 1 or self.d_ff < 1 or self.max_seq_len < 1 or self.n_heads < 1:
            raise ContractViolation("d_model, d_ff, n_heads and max_seq_len must be positive")
        if self.d_model % self.n_heads != 0:
            raise ContractViolation(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0 <= self.seed < 2**32:
            raise ContractViolation(f"seed must fit in u32, got {self.seed}")


def _param_shapes(config: BackboneConfig) -> dict:
    d, f = config.d_model, config.d_ff
    shapes = {"embedding": (config.vocab_size, d)}
    for i in range(config.n_layers):
        layer = {
            "ln1_scale": (d,), "ln1_bias": (d,),
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "ln2_scale": (d,), "ln2_bias": (d,),
            "w_in": (f, d), "w_out": (d, f),
        }
        for name in LAYER_PARAMS:
            shapes[f"layers.{i}.{name}"] = layer[name]
    return shapes


class BackboneWeights:
    """Immutable parameter set; arrays are frozen at construction."""

    def __init__(self, config: BackboneConfig, tensors: dict):
        expected = _param_shapes(config)
        if set(tensors) != set(expected):
            raise ContractViolation("backbone tensor set does not match the config")
        self.config = config
        self.tensors = {}
        for name, shape in expected.items():
            t = np.ascontiguousarray(tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise ContractViolation(f"tensor {name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ContractViolation(f"tensor {name} contains non-finite values")
            t.flags.writeable = False
            self.tensors[name] = t

    def layer(self, i: int) -> dict:
        return {name: self.tensors[f"layers.{i}.{name}"] for name in LAYER_PARAMS}

    def serialize(self) -> bytes:
        c = self.config
        head = MAGIC + struct.pack("<H", VERSION) + struct.pack(
            "<7I", c.n_layers, c.d_model, c.n_heads, c.d_ff,
            c.vocab_size, c.max_seq_len, c.seed)
        body = b"".join(self.tensors[name].tobytes() for name in _param_shapes(c))
        return head + body

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample until every draw lies within +-2 standard deviations
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return (z * std).astype(np.float32)


def init_backbone(config: BackboneConfig) -> BackboneWeights:
    """Deterministic initialization; same config (incl. seed) gives identical bytes."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    shapes = _param_shapes(config)
    tensors = {}
    for name, shape in shapes.items():
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_scale"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif short.endswith("_bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _trunc_normal(rng, shape, INIT_STD)
    return BackboneWeights(config, tensors)


# ---------------------------------------------------------------------------
# forward passes


def _layernorm(x, scale, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(LN_EPS))
    return (x - mu) * inv * scale + bias


def _gelu(u):
    return np.float32(0.5) * u * (np.float32(1.0) + np.tanh(
        np.float32(GELU_C) * (u + np.float32(0.044715) * u * u * u)))


def _causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.float32)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def _attention(a, layer, n_heads):
    s, d = a.shape
    dh = d // n_heads
    q = (a @ layer["wq"].T).reshape(s, n_heads, dh).transpose(1, 0, 2)
    k = (a @ layer["wk"].T).reshape(s, n_heads, dh).transpose(1, 0, 2)
    v = (a @ layer["wv"].T).reshape(s, n_heads, dh).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) * np.float32(1.0 / np.sqrt(dh))
    scores = scores + _causal_mask(s)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=-1, keepdims=True)
    o = (p @ v).transpose(1, 0, 2).reshape(s, d)
    return o @ layer["wo"].T


def _check_tokens(config: BackboneConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] < 1:
        raise ContractViolation("token sequence must be non-empty and one-dimensional")
    if ids.shape[0] > config.max_seq_len:
        raise ContractViolation(
            f"sequence length {ids.shape[0]} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ContractViolation("token id out of vocabulary range")
    return ids


def layer_states(w: BackboneWeights, tokens, upto: int | None = None) -> list:
    """Residual-stream output of each layer for all positions, layers 0..upto."""
    config = w.config
    ids = _check_tokens(config, tokens)
    last = config.n_layers - 1 if upto is None else upto
    if not 0 <= last < config.n_layers:
        raise ContractViolation(f"layer index {last} out of range for {config.n_layers} layers")
    x = w.tensors["embedding"][ids]
    states = []
    for i in range(last + 1):
        layer = w.layer(i)
        a = _layernorm(x, layer["ln1_scale"], layer["ln1_bias"])
        x = x + _attention(a, layer, config.n_heads)
        h = _layernorm(x, layer["ln2_scale"], layer["ln2_bias"])
        x = x + _gelu(h @ layer["w_in"].T) @ layer["w_out"].T
        states.append(x)
    return states


def forward_trace(w: BackboneWeights, tokens) -> np.ndarray:
    """Last-token hidden state of every layer, shape (n_layers, d_model)."""
    states = layer_states(w, tokens)
    return np.stack([s[-1] for s in states])


def forward_truncated(w: BackboneWeights, tokens, layer: int) -> np.ndarray:
    """Run layers 0..layer only; bit-identical to forward_trace(...)[layer]."""
    states = layer_states(w, tokens, upto=layer)
    return states[layer][-1].copy()


# ---------------------------------------------------------------------------
# pretraining (desk-scale substitute for a pretrained LLM)
#
# Objective per example: next-token prediction over the sequence plus
# prediction of the label token (class c maps to reserved token id c) at the
# last position, both read through the tied embedding. Examples are processed
# in small internal batches with batched matmuls; manual backprop. The input
# weights are copied and the copy is trained, so the original stays frozen.

PRETRAIN_BATCH = 4
LM_WEIGHT = 0.1


def _forward_cached(tensors, config, ids):
    # ids: (batch, seq); activations are (batch, seq, d_model)
    x = tensors["embedding"][ids]
    cache = []
    n_heads = config.n_heads
    b, s, d = x.shape
    dh = d // n_heads
    for i in range(config.n_layers):
        layer = {name: tensors[f"layers.{i}.{name}"] for name in LAYER_PARAMS}
        c = {}
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.float32(LN_EPS))
        a_hat = (x - mu) * inv
        a = a_hat * layer["ln1_scale"] + layer["ln1_bias"]
        c.update(inv1=inv, a_hat=a_hat, a=a)
        q = (a @ layer["wq"].T).reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
        k = (a @ layer["wk"].T).reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
        v = (a @ layer["wv"].T).reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) * np.float32(1.0 / np.sqrt(dh))
        scores = scores + _causal_mask(s)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        o_cat = (p @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
        x = x + o_cat @ layer["wo"].T
        c.update(q=q, k=k, v=v, p=p, o_cat=o_cat)
        mu2 = x.mean(axis=-1, keepdims=True)
        var2 = x.var(axis=-1, keepdims=True)
        inv2 = 1.0 / np.sqrt(var2 + np.float32(LN_EPS))
        h_hat = (x - mu2) * inv2
        h = h_hat * layer["ln2_scale"] + layer["ln2_bias"]
        u = h @ layer["w_in"].T
        g = _gelu(u)
        x = x + g @ layer["w_out"].T
        c.update(inv2=inv2, h_hat=h_hat, h=h, u=u, g=g)
        cache.append(c)
    return x, cache


def _layernorm_backward(dy, x_hat, inv, scale):
    d_scale = (dy * x_hat).reshape(-1, x_hat.shape[-1]).sum(axis=0)
    d_bias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx_hat = dy * scale
    n = x_hat.shape[-1]
    dx = inv * (dx_hat
                - dx_hat.mean(axis=-1, keepdims=True)
                - x_hat * (dx_hat * x_hat).sum(axis=-1, keepdims=True) / np.float32(n))
    return dx, d_scale, d_bias


def _gelu_backward(du, u):
    t = np.tanh(np.float32(GELU_C) * (u + np.float32(0.044715) * u * u * u))
    dt = (np.float32(1.0) - t * t) * np.float32(GELU_C) * (
        np.float32(1.0) + np.float32(3 * 0.044715) * u * u)
    return du * (np.float32(0.5) * (np.float32(1.0) + t) + np.float32(0.5) * u * dt)


def _loss_and_grads(tensors, config, ids, labels):
    # ids: (batch, seq), labels: (batch,). Loss per example: label-token CE at
    # the last position + LM_WEIGHT * mean next-token CE; averaged over batch.
    x, cache = _forward_cached(tensors, config, ids)
    emb = tensors["embedding"]
    b, s, d = x.shape
    logits = x @ emb.T
    z = logits.astype(np.float64)
    z -= z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=-1, keepdims=True)
    targets = np.empty((b, s), dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    targets[:, -1] = labels
    picked = np.maximum(np.take_along_axis(probs, targets[:, :, None], axis=-1)[:, :, 0], 1e-300)
    nll = -np.log(picked)
    label_loss = float(nll[:, -1].mean())
    lm_loss = float(nll[:, :-1].mean()) if s > 1 else 0.0
    loss = label_loss + LM_WEIGHT * lm_loss

    d_logits = probs.astype(np.float32)
    np.subtract.at(d_logits, (np.arange(b)[:, None], np.arange(s)[None, :], targets),
                   np.float32(1.0))
    d_logits *= np.float32(1.0 / b)
    if s > 1:
        d_logits[:, :-1] *= np.float32(LM_WEIGHT / (s - 1))
    grads = {name: np.zeros_like(t) for name, t in tensors.items()}
    flat_x = x.reshape(-1, d)
    flat_dl = d_logits.reshape(-1, d_logits.shape[-1])
    grads["embedding"] += flat_dl.T @ flat_x
    dx = d_logits @ emb

    n_heads = config.n_heads
    dh = d // n_heads
    for i in reversed(range(config.n_layers)):
        layer = {name: tensors[f"layers.{i}.{name}"] for name in LAYER_PARAMS}
        c = cache[i]
        # feed-forward branch
        dg = dx @ layer["w_out"]
        grads[f"layers.{i}.w_out"] += dx.reshape(-1, d).T @ c["g"].reshape(-1, c["g"].shape[-1])
        du = _gelu_backward(dg, c["u"])
        grads[f"layers.{i}.w_in"] += du.reshape(-1, du.shape[-1]).T @ c["h"].reshape(-1, d)
        dh_norm = du @ layer["w_in"]
        dx_mid, d_s2, d_b2 = _layernorm_backward(dh_norm, c["h_hat"], c["inv2"], layer["ln2_scale"])
        grads[f"layers.{i}.ln2_scale"] += d_s2
        grads[f"layers.{i}.ln2_bias"] += d_b2
        dx = dx + dx_mid
        # attention branch
        do_cat = dx @ layer["wo"]
        grads[f"layers.{i}.wo"] += dx.reshape(-1, d).T @ c["o_cat"].reshape(-1, d)
        do = do_cat.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
        dp = do @ c["v"].transpose(0, 1, 3, 2)
        dv = c["p"].transpose(0, 1, 3, 2) @ do
        ds = c["p"] * (dp - (dp * c["p"]).sum(axis=-1, keepdims=True))
        ds = ds * np.float32(1.0 / np.sqrt(dh))
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]
        dq_cat = dq.transpose(0, 2, 1, 3).reshape(b, s, d)
        dk_cat = dk.transpose(0, 2, 1, 3).reshape(b, s, d)
        dv_cat = dv.transpose(0, 2, 1, 3).reshape(b, s, d)
        flat_a = c["a"].reshape(-1, d)
        grads[f"layers.{i}.wq"] += dq_cat.reshape(-1, d).T @ flat_a
        grads[f"layers.{i}.wk"] += dk_cat.reshape(-1, d).T @ flat_a
        grads[f"layers.{i}.wv"] += dv_cat.reshape(-1, d).T @ flat_a
        da = dq_cat @ layer["wq"] + dk_cat @ layer["wk"] + dv_cat @ layer["wv"]
        dx_in, d_s1, d_b1 = _layernorm_backward(da, c["a_hat"], c["inv1"], layer["ln1_scale"])
        grads[f"layers.{i}.ln1_scale"] += d_s1
        grads[f"layers.{i}.ln1_bias"] += d_b1
        dx = dx + dx_in
    np.add.at(grads["embedding"], ids.reshape(-1), dx.reshape(-1, d))
    return loss, grads


PRETRAIN_SALT = 0x7072_6531  # distinct data stream from the chip-training datasets


def pretrain_backbone(w: BackboneWeights, task, steps: int, lr: float,
                      loss_callback=None) -> BackboneWeights:
    """Train a copy of ``w`` to predict the task label token at the last position.

    Returns new frozen weights; the input is untouched. ``steps`` examples are
    drawn deterministically from the task seed, batch size 1, Adam updates.
    """
    from .data import gen_synthetic  # local import to avoid a cycle

    config = w.config
    if task.vocab_size != config.vocab_size:
        raise ContractViolation(
            f"task vocab {task.vocab_size} != backbone vocab {config.vocab_size}")
    if task.seq_len > config.max_seq_len:
        raise ContractViolation(
            f"task seq_len {task.seq_len} exceeds max_seq_len {config.max_seq_len}")
    if steps < 0:
        raise ContractViolation("steps must be >= 0")

    tensors = {name: t.copy() for name, t in w.tensors.items()}
    if steps == 0:
        return BackboneWeights(config, tensors)

    stream = replace(task, n_examples=steps * PRETRAIN_BATCH,
                     seed=(task.seed ^ PRETRAIN_SALT) % 2**63)
    data = gen_synthetic(stream)
    hyper = AdamHyper(lr=lr)
    states = {name: AdamState.zeros_like(t) for name, t in tensors.items()}
    for t_step in range(1, steps + 1):
        batch = data[(t_step - 1) * PRETRAIN_BATCH:t_step * PRETRAIN_BATCH]
        ids = np.stack([np.asarray(ex.tokens, dtype=np.int64) for ex in batch])
        labels = np.array([ex.label for ex in batch], dtype=np.int64)
        loss, grads = _loss_and_grads(tensors, config, ids, labels)
        for name, tensor in tensors.items():
            adam_step(tensor, grads[name], states[name], hyper, t_step)
        if loss_callback is not None:
            loss_callback(t_step, loss)
    return BackboneWeights(config, tensors)


# ---------------------------------------------------------------------------
# serialization


def save_weights(w: BackboneWeights, path) -> None:
    with open(path, "wb") as fh:
        fh.write(w.serialize())


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError("truncation", f"expected {n} bytes for {what}, got {len(buf)}", path)
    return buf


def load_weights(path) -> BackboneWeights:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != MAGIC:
            raise FormatError("magic", f"bad magic {magic!r}, expected {MAGIC!r}", path)
        (version,) = struct.unpack("<H", _read_exact(fh, 2, path, "version"))
        if version != VERSION:
            raise FormatError("version", f"unsupported version {version}", path)
        fields = struct.unpack("<7I", _read_exact(fh, 28, path, "header"))
        try:
            config = BackboneConfig(*fields)
        except ContractViolation as err:
            raise FormatError("header", f"invalid config in header: {err}", path) from err
        tensors = {}
        for name, shape in _param_shapes(config).items():
            n_bytes = int(np.prod(shape)) * 4
            buf = _read_exact(fh, n_bytes, path, name)
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        extra = fh.read(1)
        if extra:
            raise FormatError("length", "trailing bytes after final tensor", path)
    return BackboneWeights(config, tensors)
