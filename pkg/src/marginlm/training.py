"""Cross-entropy training over BPTT batches, perplexity evaluation, and
versioned checkpoints.

Training is fully deterministic given the model seed: batches are served
in corpus order, the LSTM state carries across windows within an epoch
(detached so gradients stay inside one window), and no randomness enters
the loop.  The learning rate halves when validation perplexity stops
improving.

Checkpoint layout: 8 magic bytes, little-endian uint32 format version,
uint32 header length, UTF-8 JSON header, then the parameter arrays as
little-endian 64-bit floats in ``named_parameters`` order.  The header
is self-contained: dimensions, head config, and the full vocabulary
(words, counts, hash), so a checkpoint alone suffices for evaluation
and plotting.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import SENTENCE_BOUNDARY, UNK, Vocabulary, batches
from .heads import ContextScale, HeadConfig, Margin, WordScale, head_logits
from .model import LmModel

MAGIC = b"MARGINLM"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training encounters non-finite losses or parameters."""


class Optimizer(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = 1e-3
    grad_clip_norm: float = 5.0
    epochs: int = 5
    bptt_len: int = 32
    num_streams: int = 16
    seed: int = 0
    lr_decay: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("learning_rate and grad_clip_norm must be "
                             "positive")
        if self.epochs < 1 or self.bptt_len < 1 or self.num_streams < 1:
            raise ValueError("epochs, bptt_len and num_streams must be "
                             "positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")


@dataclass(frozen=True)
class EvalReport:
    """Perplexity summary: ppl = exp(-total_log_prob / token_count)."""

    total_log_prob: float
    token_count: int
    perplexity: float


@dataclass(frozen=True)
class EpochReport:
    epoch: int
    train_ppl: float
    valid: EvalReport


class Sgd:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.values -= self.lr * p.grad


class Adam:
    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(kind: Optimizer, params: list[Tensor], lr: float):
    return Adam(params, lr) if Optimizer(kind) is Optimizer.ADAM \
        else Sgd(params, lr)


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def _params_finite(model: LmModel) -> bool:
    return all(np.all(np.isfinite(p.values)) for p in model.parameters())


def evaluate_ppl(model: LmModel, ids: np.ndarray, vocab: Vocabulary,
                 config: HeadConfig, num_streams: int = 16,
                 bptt_len: int = 64) -> EvalReport:
    """Perplexity of the full softmax over every token of the split.

    The split is cut into ``num_streams`` contiguous streams evaluated in
    parallel with zero initial state; a boundary token provides context
    for the very first position, so all tokens (boundaries included) are
    predicted exactly once.  The margin applies only under
    ``eval_with_margin``; a pure function of (parameters, data, config).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty evaluation split")
    full = np.concatenate([[vocab.sb_id], ids])
    n_pred = ids.size
    s = min(num_streams, n_pred)
    q = -(-n_pred // s)  # ceil
    inputs = np.zeros((s, q), dtype=np.int64)
    targets = np.zeros((s, q), dtype=np.int64)
    mask = np.zeros((s, q), dtype=bool)
    for row in range(s):
        lo = row * q
        hi = min(lo + q, n_pred)
        if hi > lo:
            inputs[row, :hi - lo] = full[lo:hi]
            targets[row, :hi - lo] = full[lo + 1:hi + 1]
            mask[row, :hi - lo] = True

    total = 0.0
    state = model.zero_state(s)
    with ad.no_grad():
        for w0 in range(0, q, bptt_len):
            w1 = min(w0 + bptt_len, q)
            h, state = model.forward(inputs[:, w0:w1], state)
            flat = h.reshape((s * (w1 - w0), model.d_hidden))
            t_flat = targets[:, w0:w1].ravel()
            m_flat = mask[:, w0:w1].ravel()
            g_scale = None
            if (not config.classic_normalize
                    and config.g_mode is ContextScale.MAX_NORM):
                # padding rows must not contribute to the batch max
                norms = np.linalg.norm(flat.values, axis=1)
                g_scale = np.full_like(norms, norms[m_flat].max())
            logits = head_logits(flat, model.w_out, model.b_out, t_flat,
                                 config, training=False, g_scale=g_scale,
                                 counts=vocab.counts)
            lp = ad.log_softmax(logits.values.astype(np.float64))
            picked = lp[np.arange(t_flat.size), t_flat]
            total += float(picked[m_flat].sum())
    return EvalReport(total_log_prob=total, token_count=n_pred,
                      perplexity=math.exp(-total / n_pred))


def train(model: LmModel, vocab: Vocabulary, train_ids: np.ndarray,
          valid_ids: np.ndarray, head_config: HeadConfig,
          train_config: TrainConfig,
          metrics_path: Optional[str] = None,
          on_batch: Optional[Callable[[int, int, float], None]] = None
          ) -> list[EpochReport]:
    """Train in place; returns one report per epoch.

    Appends ``epoch<TAB>train_ppl<TAB>valid_ppl`` lines to ``metrics_path``
    when given; ``on_batch(epoch, batch_index, loss)`` observes every step.
    Aborts with the offending batch index if the loss or any parameter
    goes non-finite.
    """
    cfg = train_config
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate)
    reports: list[EpochReport] = []
    best_valid = math.inf
    for epoch in range(cfg.epochs):
        state = model.zero_state(cfg.num_streams)
        nll_sum = 0.0
        tok_count = 0
        for bi, batch in enumerate(batches(train_ids, cfg.num_streams,
                                           cfg.bptt_len)):
            state = state.detach() if batch.carry_state \
                else model.zero_state(cfg.num_streams)
            t_flat = batch.targets.ravel()
            # overflow in a diverging run surfaces as a non-finite loss,
            # reported below rather than as numpy warnings
            with np.errstate(over="ignore", invalid="ignore",
                             divide="ignore"):
                h, state = model.forward(batch.inputs, state)
                flat = h.reshape((t_flat.size, model.d_hidden))
                logits = head_logits(flat, model.w_out, model.b_out, t_flat,
                                     head_config, training=True,
                                     counts=vocab.counts)
                loss = ad.softmax_cross_entropy(logits, t_flat)
                if not np.isfinite(loss.values):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {bi}")
                model.zero_grads()
                loss.backward()
                clip_gradients(model.parameters(), cfg.grad_clip_norm)
                opt.step()
            if not _params_finite(model):
                raise TrainingError(
                    f"non-finite parameter after epoch {epoch}, batch {bi}")
            nll_sum += float(loss.values) * t_flat.size
            tok_count += t_flat.size
            if on_batch is not None:
                on_batch(epoch, bi, float(loss.values))
        mean_nll = nll_sum / tok_count
        train_ppl = math.exp(mean_nll) if mean_nll < 700 else math.inf
        valid = evaluate_ppl(model, valid_ids, vocab, head_config)
        reports.append(EpochReport(epoch, train_ppl, valid))
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(f"{epoch}\t{train_ppl:.6f}"
                        f"\t{valid.perplexity:.6f}\n")
        if valid.perplexity < best_valid:
            best_valid = valid.perplexity
        else:
            opt.lr *= cfg.lr_decay
    return reports


def save_checkpoint(model: LmModel, vocab: Vocabulary,
                    head_config: HeadConfig, path) -> None:
    names = []
    blobs = []
    for name, p in model.named_parameters():
        names.append({"name": name, "shape": list(p.shape)})
        blobs.append(np.ascontiguousarray(p.values,
                                          dtype="<f8").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "dims": {"vocab_size": model.vocab_size,
                 "d_hidden": model.d_hidden,
                 "d_emb": model.d_emb},
        "param_dtype": model.dtype.name,
        "head_config": head_config.to_dict(),
        "vocab_sha256": vocab.sha256(),
        "vocab": {"words": vocab.words,
                  "counts": [int(c) for c in vocab.counts]},
        "arrays": names,
    }
    raw = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path, expected_vocab: Optional[Vocabulary] = None
                    ) -> tuple[LmModel, Vocabulary, HeadConfig]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = len(MAGIC) + 8
    if off + header_len > len(data):
        raise ValueError(f"{path}: truncated header")
    header = json.loads(data[off:off + header_len].decode("utf-8"))
    off += header_len

    words = header["vocab"]["words"]
    counts = np.asarray(header["vocab"]["counts"], dtype=np.int64)
    vocab = Vocabulary(words, counts, words.index(UNK),
                       words.index(SENTENCE_BOUNDARY))
    if vocab.sha256() != header["vocab_sha256"]:
        raise ValueError(f"{path}: vocab hash mismatch (corrupt header)")
    if expected_vocab is not None \
            and expected_vocab.sha256() != header["vocab_sha256"]:
        raise ValueError(
            f"{path}: checkpoint was built with a different vocabulary")

    dims = header["dims"]
    model = LmModel(dims["vocab_size"], dims["d_hidden"],
                    d_emb=dims["d_emb"], dtype=np.dtype(header["param_dtype"]))
    head_config = HeadConfig.from_dict(header["head_config"])

    params = model.named_parameters()
    if [e["name"] for e in header["arrays"]] != [n for n, _ in params]:
        raise ValueError(f"{path}: unexpected parameter manifest")
    for entry, (_, p) in zip(header["arrays"], params):
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise ValueError(f"{path}: array {entry['name']} has shape "
                             f"{shape}, expected {p.shape}")
        n_bytes = int(np.prod(shape)) * 8
        if off + n_bytes > len(data):
            raise ValueError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(data[off:off + n_bytes],
                            dtype="<f8").reshape(shape)
        p.values = arr.astype(model.dtype)
        off += n_bytes
    if off != len(data):
        raise ValueError(f"{path}: trailing data after arrays")
    return model, vocab, head_config
