"""A small trainable transformer encoder with guided attention heads.

The encoder is built on the package's own reverse-mode autodiff so every
gradient (task loss, per-head guiding loss, combined objective) can be
verified against central finite differences. Training is plain mini-batch
gradient descent, deterministic under a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .javacode import CodeUnit
from .patterns import (
    HeadAssignment,
    PatternMatrix,
    PatternSpec,
    ast_pattern_specs,
    build_pattern,
    syntax_pattern_specs,
)
from .subtok import AlignedSequence, MASK_ID


class NonFiniteLoss(RuntimeError):
    """Training aborted because the loss became NaN or infinite."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite loss at step {step}")


class DimMismatch(ValueError):
    """Attention matrix and pattern matrix shapes disagree."""


@dataclass
class ModelConfig:
    num_layers: int = 4
    heads: int = 4
    d_model: int = 64
    ffn_dim: int = 128
    vocab_size: int = 0
    max_len: int = 64
    mask_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by the head count")
        if not (0.0 < self.mask_rate < 1.0):
            raise ValueError("mask_rate must lie strictly between 0 and 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


def positional_encoding(position: int, d_model: int) -> np.ndarray:
    """Sinusoidal encoding: dims (2i, 2i+1) carry sin/cos of pos/10000^(2i/d)."""
    vec = np.zeros(d_model, dtype=np.float64)
    even = np.arange(0, d_model, 2)
    angles = position / np.power(10000.0, even / d_model)
    vec[0::2] = np.sin(angles)
    vec[1::2] = np.cos(angles[: d_model // 2])
    return vec


def positional_encoding_table(max_len: int, d_model: int) -> np.ndarray:
    return np.stack([positional_encoding(p, d_model) for p in range(max_len)])


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f, v = cfg.d_model, cfg.ffn_dim, cfg.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (v, d))]
    for l in range(cfg.num_layers):
        shapes += [
            (f"layer{l}.wq", (d, d)),
            (f"layer{l}.wk", (d, d)),
            (f"layer{l}.wv", (d, d)),
            (f"layer{l}.wo", (d, d)),
            (f"layer{l}.bo", (d,)),
            (f"layer{l}.ln1_g", (d,)),
            (f"layer{l}.ln1_b", (d,)),
            (f"layer{l}.ffn_w1", (d, f)),
            (f"layer{l}.ffn_b1", (f,)),
            (f"layer{l}.ffn_w2", (f, d)),
            (f"layer{l}.ffn_b2", (d,)),
            (f"layer{l}.ln2_g", (d,)),
            (f"layer{l}.ln2_b", (d,)),
        ]
    shapes += [
        ("mlm_w", (d, v)),
        ("mlm_b", (v,)),
        ("cls_w", (d, 1)),
        ("cls_b", (1,)),
    ]
    return shapes


def _init_param(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.split(".")[-1]
    if leaf in ("ln1_g", "ln2_g"):
        return np.ones(shape, dtype=np.float64)
    if leaf in ("bo", "ln1_b", "ln2_b", "ffn_b1", "ffn_b2", "mlm_b", "cls_b"):
        return np.zeros(shape, dtype=np.float64)
    return rng.normal(0.0, 0.02, size=shape)


class GuidedModel:
    """Encoder parameters plus head-guiding assignment and alpha schedule."""

    def __init__(self, config: ModelConfig, assignment: HeadAssignment, alpha0: float = 1.0):
        if assignment.heads_per_layer != config.heads:
            raise ValueError("assignment head count disagrees with the model config")
        if assignment.num_layers != config.num_layers:
            raise ValueError("assignment layer count disagrees with the model config")
        if config.vocab_size <= 0:
            raise ValueError("vocab_size must be set before building a model")
        self.config = config
        self.assignment = assignment
        self.alpha0 = float(alpha0)
        self.total_steps = 0
        self.step = 0
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_param(name, shape, rng))
            for name, shape in _param_shapes(config)
        }
        self.pos_table = positional_encoding_table(config.max_len, config.d_model)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def alpha(self, t: float) -> float:
        return self.alpha0 * (1.0 - t)


@dataclass(eq=False)
class ForwardTrace:
    """Per-layer attention tensors, hidden states, and output logits."""

    attention: list[Tensor]  # each (B, h, n, n)
    hidden: list[Tensor]  # embeddings plus each layer output, (B, n, d)
    logits: Tensor  # (B, n, V)
    cls_logit: Tensor  # (B,)
    valid: np.ndarray  # (B, n) bool

    def attention_array(self, item: int) -> np.ndarray:
        """Attention for one batch item as an (L, h, n, n) array."""
        return np.stack([layer.data[item] for layer in self.attention])


def forward(model: GuidedModel, ids: np.ndarray, valid: np.ndarray) -> ForwardTrace:
    """Run the encoder stack; attention rows are softmax over real columns."""
    cfg = model.config
    p = model.params
    batch, n = ids.shape
    if n > cfg.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {cfg.max_len}")

    x = ad.add_const(ad.embedding(p["embed"], ids), model.pos_table[:n])
    attention: list[Tensor] = []
    hidden: list[Tensor] = [x]
    key_valid = valid[:, None, None, :]

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(
            ad.reshape(t, (batch, n, cfg.heads, cfg.d_k)), (0, 2, 1, 3)
        )

    for l in range(cfg.num_layers):
        q = split_heads(ad.matmul(x, p[f"layer{l}.wq"]))
        k = split_heads(ad.matmul(x, p[f"layer{l}.wk"]))
        v = split_heads(ad.matmul(x, p[f"layer{l}.wv"]))
        scores = ad.scale(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(cfg.d_k)
        )
        att = ad.masked_softmax(scores, key_valid)
        attention.append(att)
        context = ad.reshape(
            ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (batch, n, cfg.d_model)
        )
        projected = ad.add(ad.matmul(context, p[f"layer{l}.wo"]), p[f"layer{l}.bo"])
        x = ad.layer_norm(
            ad.add(x, projected), p[f"layer{l}.ln1_g"], p[f"layer{l}.ln1_b"]
        )
        inner = ad.relu(ad.add(ad.matmul(x, p[f"layer{l}.ffn_w1"]), p[f"layer{l}.ffn_b1"]))
        ffn_out = ad.add(ad.matmul(inner, p[f"layer{l}.ffn_w2"]), p[f"layer{l}.ffn_b2"])
        x = ad.layer_norm(
            ad.add(x, ffn_out), p[f"layer{l}.ln2_g"], p[f"layer{l}.ln2_b"]
        )
        hidden.append(x)

    logits = ad.add(ad.matmul(x, p["mlm_w"]), p["mlm_b"])
    cls_logit = ad.reshape(
        ad.add(ad.matmul(ad.select_position(x, 0), p["cls_w"]), p["cls_b"]), (batch,)
    )
    return ForwardTrace(attention, hidden, logits, cls_logit, valid)


def apply_mlm_mask(
    seq: AlignedSequence,
    rate: float,
    rng: np.random.Generator,
    vocab_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Independently select non-special positions at the given rate.

    Selected positions go to [MASK] with probability 0.8, stay unchanged
    with 0.1, and become a uniform random vocabulary id with 0.1. If the
    draw selects nothing, one maskable position is forced so the sequence
    always contributes a gradient. Returns (masked ids, selected indices).
    """
    maskable = [pos for pos in range(seq.real_len) if seq.alignment[pos] is not None]
    if not maskable:
        raise ValueError(f"unit {seq.unit_id!r} has no maskable position")
    draws = rng.random(len(maskable)) < rate
    selected = [pos for pos, hit in zip(maskable, draws) if hit]
    if not selected:
        selected = [maskable[int(rng.integers(len(maskable)))]]
    masked = seq.ids.copy()
    for pos in selected:
        action = rng.random()
        if action < 0.8:
            masked[pos] = MASK_ID
        elif action < 0.9:
            pass
        else:
            masked[pos] = int(rng.integers(vocab_size))
    return masked, np.array(selected, dtype=np.int64)


def mlm_loss(trace: ForwardTrace, targets: np.ndarray, selected: np.ndarray) -> Tensor:
    """Cross-entropy at the selected positions, mean-reduced over their count."""
    return ad.cross_entropy_masked(trace.logits, targets, selected)


def _masked_frobenius(diff: np.ndarray, row_mask: np.ndarray, col_mask: np.ndarray) -> float:
    masked = diff * (row_mask[:, None] & col_mask[None, :])
    return float(np.sqrt((masked * masked).sum()))


def ag_loss(attention_head: np.ndarray, pattern: PatternMatrix) -> float:
    """Frobenius distance between one head's attention and its target.

    Only included rows and real (non-pad) columns participate; a pattern
    with every row excluded scores 0.
    """
    head = np.asarray(attention_head, dtype=np.float64)
    if head.shape != pattern.values.shape:
        raise DimMismatch(
            f"attention {head.shape} vs pattern {pattern.values.shape}"
        )
    col_mask = np.arange(head.shape[1]) < pattern.real_len
    return _masked_frobenius(head - pattern.values, pattern.row_included, col_mask)


def sag_loss(
    attention: np.ndarray,
    assignment: HeadAssignment,
    unit_patterns: dict[PatternSpec, PatternMatrix],
) -> float:
    """Guiding loss summed over every guided (layer, head) pair.

    attention is the (L, h, n, n) stack for a single sequence.
    """
    total = 0.0
    for layer in range(assignment.num_layers):
        for head, spec in assignment.guided_heads:
            total += ag_loss(attention[layer, head], unit_patterns[spec])
    return total


@dataclass
class Instance:
    """One training/eval item: sequence, source unit, prebuilt patterns."""

    seq: AlignedSequence
    unit: CodeUnit
    patterns: dict[PatternSpec, PatternMatrix]
    label: Optional[int] = None


def prepare_instances(
    units: Sequence[CodeUnit],
    seqs: Sequence[AlignedSequence],
    assignment: HeadAssignment,
    labels: Optional[Sequence[int]] = None,
) -> list[Instance]:
    """Build each unit's pattern matrices for the assignment's distinct specs."""
    specs = assignment.distinct_specs
    out = []
    for idx, (unit, seq) in enumerate(zip(units, seqs)):
        pats = {spec: build_pattern(seq, unit, spec) for spec in specs}
        out.append(Instance(seq, unit, pats, None if labels is None else labels[idx]))
    return out


@dataclass(eq=False)
class Batch:
    ids: np.ndarray  # (B, n) model input (possibly masked)
    targets: np.ndarray  # (B, n) original ids
    selected: Optional[np.ndarray]  # (B, n) bool, None for clone batches
    valid: np.ndarray  # (B, n) bool
    labels: Optional[np.ndarray] = None  # (B,) clone labels
    pattern_targets: Optional[np.ndarray] = None  # (B, h, n, n)
    pattern_rows: Optional[np.ndarray] = None  # (B, h, n) bool
    head_guided: Optional[np.ndarray] = None  # (h,) bool

    @property
    def size(self) -> int:
        return int(self.ids.shape[0])


def _stack_patterns(
    instances: Sequence[Instance], assignment: HeadAssignment, n: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    batch = len(instances)
    h = assignment.heads_per_layer
    targets = np.zeros((batch, h, n, n), dtype=np.float64)
    rows = np.zeros((batch, h, n), dtype=bool)
    guided = np.zeros(h, dtype=bool)
    for head, spec in assignment.guided_heads:
        guided[head] = True
        for b, inst in enumerate(instances):
            pm = inst.patterns[spec]
            targets[b, head] = pm.values
            rows[b, head] = pm.row_included
    return targets, rows, guided


def make_batch(
    instances: Sequence[Instance],
    model: GuidedModel,
    rng: Optional[np.random.Generator],
    task: str = "cloze",
) -> Batch:
    """Assemble padded arrays; cloze batches get fresh MLM mask draws."""
    cfg = model.config
    n = cfg.max_len
    originals = np.stack([inst.seq.ids for inst in instances])
    valid = np.stack(
        [np.arange(n) < inst.seq.real_len for inst in instances]
    )
    labels = None
    selected = None
    ids = originals
    if task == "cloze":
        ids = np.empty_like(originals)
        selected = np.zeros((len(instances), n), dtype=bool)
        for b, inst in enumerate(instances):
            masked, chosen = apply_mlm_mask(inst.seq, cfg.mask_rate, rng, cfg.vocab_size)
            ids[b] = masked
            selected[b, chosen] = True
    else:
        labels = np.array([inst.label for inst in instances], dtype=np.float64)

    targets, rows, guided = _stack_patterns(instances, model.assignment, n)
    return Batch(ids, originals, selected, valid, labels, targets, rows, guided)


@dataclass(frozen=True)
class LossParts:
    task: float
    sag: float
    alpha: float


def _sag_value(trace: ForwardTrace, batch: Batch) -> float:
    if batch.head_guided is None or not batch.head_guided.any():
        return 0.0
    mask = (
        batch.pattern_rows[:, :, :, None]
        & batch.valid[:, None, None, :]
        & batch.head_guided[None, :, None, None]
    )
    total = 0.0
    for layer_att in trace.attention:
        diff = (layer_att.data - batch.pattern_targets) * mask
        total += np.sqrt((diff * diff).sum(axis=(-1, -2))).sum()
    return total / batch.size


def total_loss(
    model: GuidedModel, batch: Batch, t: float, task: str = "cloze"
) -> tuple[Tensor, LossParts]:
    """Combined objective L_task + alpha(t) * guiding loss.

    With alpha == 0 the returned tensor IS the task loss, so the two are
    bit-identical, not merely close.
    """
    if not (0.0 <= t <= 1.0):
        raise ValueError("training progress t must lie in [0, 1]")
    trace = forward(model, batch.ids, batch.valid)
    if task == "cloze":
        task_term = mlm_loss(trace, batch.targets, batch.selected)
    elif task == "clone":
        task_term = ad.bce_with_logits(trace.cls_logit, batch.labels)
    else:
        raise ValueError(f"unknown task {task!r}")

    alpha = model.alpha(t)
    sag_value = _sag_value(trace, batch)
    if alpha == 0.0 or batch.head_guided is None or not batch.head_guided.any():
        return task_term, LossParts(task_term.item(), sag_value, alpha)

    layer_terms = [
        ad.guiding_frobenius(
            layer_att,
            batch.pattern_targets,
            batch.pattern_rows,
            batch.valid,
            batch.head_guided,
        )
        for layer_att in trace.attention
    ]
    sag_term = ad.scale(ad.add_scalars(layer_terms), 1.0 / batch.size)
    loss = ad.add_scalars([task_term, ad.scale(sag_term, alpha)])
    return loss, LossParts(task_term.item(), sag_term.item(), alpha)


@dataclass
class Hyper:
    lr: float = 3e-4
    epochs: int = 3
    batch_size: int = 32
    alpha0: float = 1.0
    lam: float = 0.5
    specs: tuple[PatternSpec, ...] = field(
        default_factory=lambda: syntax_pattern_specs() + ast_pattern_specs()
    )
    folds: int = 5


@dataclass(frozen=True)
class TrainStep:
    step: int
    task_loss: float
    sag_loss: float
    alpha: float


def train(
    model: GuidedModel,
    instances: Sequence[Instance],
    hyper: Hyper,
    task: str = "cloze",
    seed: Optional[int] = None,
) -> list[TrainStep]:
    """Mini-batch gradient descent on the combined objective.

    Deterministic under a fixed seed: shuffling and mask draws come from one
    generator consumed in a fixed order, independent of parameter values.
    """
    rng = np.random.default_rng(model.config.seed if seed is None else seed)
    count = len(instances)
    if count == 0:
        raise ValueError("cannot train on an empty instance list")
    steps_per_epoch = ceil(count / hyper.batch_size)
    total = hyper.epochs * steps_per_epoch
    model.alpha0 = float(hyper.alpha0)
    model.total_steps = total

    log: list[TrainStep] = []
    params = model.parameters()
    step = 0
    for _ in range(hyper.epochs):
        order = rng.permutation(count)
        for s in range(steps_per_epoch):
            chosen = order[s * hyper.batch_size : (s + 1) * hyper.batch_size]
            batch = make_batch([instances[i] for i in chosen], model, rng, task)
            t = step / (total - 1) if total > 1 else 0.0
            loss, parts = total_loss(model, batch, t, task)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(step)
            model.zero_grad()
            loss.backward()
            for p in params.values():
                if p.grad is not None:
                    p.data -= hyper.lr * p.grad
            log.append(TrainStep(step, parts.task, parts.sag, parts.alpha))
            step += 1
            model.step = step
    return log


def write_train_log_csv(log: Sequence[TrainStep], path: str | Path) -> None:
    lines = ["step,task_loss,sag_loss,alpha"]
    lines += [
        f"{e.step},{e.task_loss!r},{e.sag_loss!r},{e.alpha!r}" for e in log
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gradient_check(
    model: GuidedModel,
    batch: Batch,
    epsilon: float = 1e-4,
    num_samples: int = 200,
    t: float = 0.3,
    task: str = "cloze",
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples num_samples parameter coordinates across all tensors. A central
    difference is only a gradient estimate where the loss is locally smooth,
    so coordinates whose perturbation flips any relu activation are skipped
    and replaced by fresh samples. The denominator is floored at 1e-6 so
    coordinates with a true zero gradient compare finite-difference noise
    against zero sanely.
    """
    rng = rng or np.random.default_rng(0)
    loss, _ = total_loss(model, batch, t, task)
    model.zero_grad()
    loss.backward()
    base_signature = ad.relu_activation_signature(loss)
    params = model.parameters()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    names = list(params)
    sizes = np.array([params[name].data.size for name in names])
    bounds = np.cumsum(sizes)
    total_coords = int(bounds[-1])
    candidates = iter(rng.permutation(total_coords))

    def _eval():
        value, _ = total_loss(model, batch, t, task)
        signature = ad.relu_activation_signature(value)
        smooth = all(
            np.array_equal(a, b) for a, b in zip(signature, base_signature)
        )
        return value.item(), smooth

    worst = 0.0
    checked = 0
    wanted = min(num_samples, total_coords)
    for coord in candidates:
        if checked >= wanted:
            break
        which = int(np.searchsorted(bounds, coord, side="right"))
        local = int(coord - (bounds[which - 1] if which > 0 else 0))
        tensor = params[names[which]]
        original = tensor.data.flat[local]

        tensor.data.flat[local] = original + epsilon
        f_plus, smooth_plus = _eval()
        tensor.data.flat[local] = original - epsilon
        f_minus, smooth_minus = _eval()
        tensor.data.flat[local] = original
        if not (smooth_plus and smooth_minus):
            continue

        finite = (f_plus - f_minus) / (2.0 * epsilon)
        exact = analytic[names[which]].flat[local]
        rel = abs(exact - finite) / max(abs(exact), abs(finite), 1e-6)
        worst = max(worst, rel)
        checked += 1
    return worst


CHECKPOINT_MAGIC = b"SGLM"
CHECKPOINT_VERSION = 1


def save_model(model: GuidedModel, path: str | Path) -> None:
    """Binary checkpoint: magic, version, JSON config block, f64 tensors."""
    header = {
        "config": {
            "num_layers": model.config.num_layers,
            "heads": model.config.heads,
            "d_model": model.config.d_model,
            "ffn_dim": model.config.ffn_dim,
            "vocab_size": model.config.vocab_size,
            "max_len": model.config.max_len,
            "mask_rate": model.config.mask_rate,
            "seed": model.config.seed,
        },
        "alpha0": model.alpha0,
        "total_steps": model.total_steps,
        "step": model.step,
        "assignment": {
            "num_layers": model.assignment.num_layers,
            "heads_per_layer": model.assignment.heads_per_layer,
            "head_specs": [
                None if s is None else str(s) for s in model.assignment.head_specs
            ],
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", CHECKPOINT_VERSION))
        handle.write(struct.pack("<I", len(blob)))
        handle.write(blob)
        for name, _ in _param_shapes(model.config):
            handle.write(model.params[name].data.astype("<f8").tobytes())


def load_model(path: str | Path) -> GuidedModel:
    with open(path, "rb") as handle:
        if handle.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", handle.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", handle.read(4))
        header = json.loads(handle.read(blob_len).decode("utf-8"))
        config = ModelConfig(**header["config"])
        spec_strings = header["assignment"]["head_specs"]
        assignment = HeadAssignment(
            header["assignment"]["num_layers"],
            header["assignment"]["heads_per_layer"],
            tuple(
                None if s is None else PatternSpec.from_string(s) for s in spec_strings
            ),
        )
        model = GuidedModel(config, assignment, alpha0=header["alpha0"])
        model.total_steps = header["total_steps"]
        model.step = header["step"]
        for name, shape in _param_shapes(config):
            raw = handle.read(8 * int(np.prod(shape)))
            model.params[name].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return model
