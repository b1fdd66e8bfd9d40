"""Optimisation loops: teacher pretraining and the three distillation pipelines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import AdapterPair, init_nullspace, init_random, refine
from .config import RunConfig, format_config
from .data import SynthDataset
from .losses import (
    LossBreakdown,
    Projection,
    layer_info,
    layer_kd,
    layer_outlier,
    make_projection,
    partition_kd,
    total_loss,
)
from .linalg import row_quantiles
from .metrics import gram_distance, patch_cosine
from .nullspace import null_report
from .tensor import Tensor
from .vit import VitModel, block, build, classify, forward_tokens

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Inconsistent run setup (layer map, shapes)."""


class DivergenceError(ArithmeticError):
    """A loss became NaN or infinite; the message names the step."""


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Single-cycle cosine annealing from lr_start (step 0) to lr_end (step total)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; return the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


class AdamW:
    """Adam moments with decoupled weight decay on matrix-shaped parameters."""

    def __init__(self, params: list[Tensor], weight_decay: float = 0.05, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i : i + batch]


def accuracy(model: VitModel, data: SynthDataset, batch: int = 256) -> float:
    hits = 0
    with T.no_grad():
        for i in range(0, len(data), batch):
            logits = classify(model, data.images[i : i + batch]).data
            hits += int(np.sum(np.argmax(logits, axis=1) == data.labels[i : i + batch]))
    return hits / len(data)


def train_teacher(spec, data: SynthDataset, epochs: int, lr: float = 1e-3, lr_end: float = 1e-6,
                  batch: int = 64, weight_decay: float = 0.05, clip_norm: float = 1.0,
                  seed: int | None = None) -> VitModel:
    """Cross-entropy training of a ViT on the synthetic task."""
    model = build(spec)
    seed = spec.seed if seed is None else seed
    if epochs == 0:
        model.meta["train_accuracy"] = accuracy(model, data)
        return model
    model.requires_grad_(True)
    params = model.trainable()
    opt = AdamW(params, weight_decay)
    steps_per_epoch = math.ceil(len(data) / batch)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 17, epoch])
        for idx in _batches(len(data), batch, rng):
            opt.zero_grad()
            try:
                loss = T.cross_entropy(classify(model, data.images[idx]), data.labels[idx])
                loss.backward()
            except T.NonFiniteError as exc:
                raise DivergenceError(f"teacher loss diverged at step {step}: {exc}") from exc
            clip_grad_norm(params, clip_norm)
            opt.step(lr_at(step, total, lr, lr_end))
            step += 1
        log.info("teacher epoch %d loss %.4f", epoch, float(loss.data))
    model.requires_grad_(False)
    for p in model.params.values():
        p.grad = None
    model.meta["train_accuracy"] = accuracy(model, data)
    return model


# -- distillation --------------------------------------------------------------

STEP_COLUMNS = ["step", "epoch", "lr", "kd", "outlier", "info", "total", "outlier_term", "inlier_term", "grad_norm"]
EPOCH_COLUMNS = [
    "epoch", "layer", "outlier_count", "gd_teacher_refined", "gd_teacher_student",
    "cos_teacher_refined", "cos_next", "outlier_share",
]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None

    def steps_csv(self) -> str:
        lines = [",".join(STEP_COLUMNS)]
        lines += [",".join(_fmt(r[c]) for c in STEP_COLUMNS) for r in self.steps]
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        lines = [",".join(EPOCH_COLUMNS)]
        lines += [",".join(_fmt(r[c]) for c in EPOCH_COLUMNS) for r in self.epochs]
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.steps], dtype=np.float64)

    def epoch_rows(self, layer: int) -> list[dict]:
        return [r for r in self.epochs if r["layer"] == layer]


@dataclass
class TeacherCache:
    """Frozen teacher tokens per distillation layer, plus next-block outputs."""

    tokens: dict[int, np.ndarray]  # layer -> (M, 1+N, D), artifacts included
    next_tokens: dict[int, np.ndarray]  # intermediate layer -> (M, N, D)
    flags: dict[int, np.ndarray]  # layer -> (M, N) patches above the alpha-quantile


def teacher_cache(teacher: VitModel, images: np.ndarray, layers, alpha: float, chunk: int = 256) -> TeacherCache:
    layers = sorted(layers)
    final = teacher.spec.depth - 1
    toks = {l: [] for l in layers}
    nxt = {l: [] for l in layers if l != final}
    with T.no_grad():
        for i in range(0, len(images), chunk):
            out = forward_tokens(teacher, images[i : i + chunk], layers)
            for l in layers:
                toks[l].append(out[l].data)
                if l != final:
                    nxt[l].append(block(teacher, l + 1, out[l]).data[:, 1:])
    tokens = {l: np.concatenate(v) for l, v in toks.items()}
    flags = {}
    for l, x in tokens.items():
        norms = np.linalg.norm(x[:, 1:].astype(np.float64), axis=-1)
        flags[l] = norms > row_quantiles(norms, alpha)[:, None]
    return TeacherCache(tokens, {l: np.concatenate(v) for l, v in nxt.items()}, flags)


@dataclass
class DistillResult:
    student: VitModel
    adapters: dict[int, AdapterPair]
    projections: dict[int, Projection]
    log: RunLog
    config: RunConfig

    def state(self) -> dict[str, np.ndarray]:
        out = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        for l, p in self.projections.items():
            out[f"proj.{l}.weight"] = p.weight.data
        for l, a in self.adapters.items():
            out[f"adapter.{l}.down"] = a.b_down.data
            out[f"adapter.{l}.up"] = a.b_up.data
        return out


def make_adapters(cfg: RunConfig, teacher: VitModel) -> dict[int, AdapterPair]:
    from .adapter import zeros

    adapters = {}
    for l in cfg.layers:
        blank = zeros(l, teacher.spec.dim, cfg.rank)
        if cfg.init == "nullspace":
            adapters[l] = init_nullspace(blank, null_report(teacher, l, cfg.rank))
        else:
            adapters[l] = init_random(blank, cfg.seed)
    return adapters


def _mask_target(tokens: Tensor, ratio: float, rng: np.random.Generator) -> Tensor:
    B, N, _ = tokens.shape
    k = int(round(ratio * N))
    keep = np.ones((B, N, 1), tokens.dtype)
    for b in range(B):
        keep[b, rng.choice(N, size=k, replace=False)] = 0.0
    return tokens * Tensor(keep)


class Distiller:
    """Holds the state of one distillation run; ``run`` executes the schedule."""

    def __init__(self, cfg: RunConfig, teacher: VitModel, data: SynthDataset):
        self.cfg = cfg
        self.teacher = teacher
        self.data = data
        final = teacher.spec.depth - 1
        if cfg.layers[-1] != final:
            raise TrainingError(f"distillation layers {cfg.layers} must end at the teacher's last layer {final}")
        for l in cfg.layers:
            if not 0 <= l <= final:
                raise TrainingError(f"distillation layer {l} outside the teacher")
        if cfg.student.image != teacher.spec.image or cfg.student.patch != teacher.spec.patch:
            raise TrainingError("student and teacher must share the patch layout")
        try:
            self.student_taps = {l: cfg.student_layer(l) for l in cfg.layers}
        except ValueError as exc:
            raise TrainingError(str(exc)) from exc
        self.final = final
        self.student = build(cfg.student).requires_grad_(True)
        self.projections = {
            l: make_projection(l, cfg.student.dim, teacher.spec.dim, cfg.seed) for l in cfg.layers
        }
        self.use_adapters = cfg.method == "singer"
        self.adapters = make_adapters(cfg, teacher) if self.use_adapters else {}
        self.lambda_out = cfg.lambda_out if self.use_adapters else 0.0
        self.lambda_info = cfg.lambda_info if self.use_adapters else 0.0
        self.cache = teacher_cache(teacher, data.images, cfg.layers, cfg.alpha)
        self.eval_idx = np.arange(min(cfg.eval_images, len(data)))
        self.log = RunLog()

    def parameters(self) -> list[Tensor]:
        params = self.student.trainable()
        params += [p.weight for _, p in sorted(self.projections.items())]
        for _, a in sorted(self.adapters.items()):
            params += a.parameters()
        return params

    def _refined(self, layer: int, idx: np.ndarray, rng: np.random.Generator | None) -> tuple[Tensor, Tensor]:
        f = Tensor(self.cache.tokens[layer][idx, 1:])
        if self.use_adapters:
            f_hat, _ = refine(f, self.adapters[layer])
        elif self.cfg.method == "mask" and rng is not None:
            f_hat = _mask_target(f, self.cfg.mask_ratio, rng)
        else:
            f_hat = f
        return f, f_hat

    def _next_block(self, layer: int, idx: np.ndarray, f_hat: Tensor) -> Tensor:
        cls = Tensor(self.cache.tokens[layer][idx, :1])
        x = T.concat([cls, f_hat], axis=1)
        return block(self.teacher, layer + 1, x)[:, 1:]

    def losses(self, idx: np.ndarray, step: int | None = None) -> LossBreakdown:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 99, step]) if step is not None else None
        s_tokens = forward_tokens(self.student, self.data.images[idx], sorted(set(self.student_taps.values())))
        kd_terms, out_terms, info_terms = [], [], []
        per_layer = {}
        o_term = i_term = 0.0
        for l in cfg.layers:
            f, f_hat = self._refined(l, idx, rng)
            s = s_tokens[self.student_taps[l]][:, 1:]
            kd = layer_kd(f_hat, s, self.projections[l])
            kd_terms.append(kd)
            row = {"kd": float(kd.data), "outlier": 0.0, "info": 0.0}
            if self.use_adapters:
                out = layer_outlier(f_hat, cfg.alpha, method=cfg.quantile_method)
                if l == self.final:
                    info = layer_info(f_hat, f, cfg.gram == "normalized")
                else:
                    nxt_ref = Tensor(self.cache.next_tokens[l][idx])
                    info = layer_info(self._next_block(l, idx, f_hat), nxt_ref, cfg.gram == "normalized")
                out_terms.append(out)
                info_terms.append(info)
                row["outlier"] = float(out.data)
                row["info"] = float(info.data)
            per_layer[l] = row
            a, b = partition_kd(f_hat.data, s.data @ self.projections[l].weight.data, None, self.cache.flags[l][idx])
            o_term += a
            i_term += b
        kd_sum = kd_terms[0]
        for t in kd_terms[1:]:
            kd_sum = kd_sum + t
        out_sum = sum(out_terms[1:], out_terms[0]) if out_terms else 0.0
        info_sum = sum(info_terms[1:], info_terms[0]) if info_terms else 0.0
        return total_loss(kd_sum, out_sum, info_sum, self.lambda_out, self.lambda_info, per_layer, o_term, i_term)

    def evaluate(self, epoch: int) -> None:
        idx = self.eval_idx
        with T.no_grad():
            s_tokens = forward_tokens(self.student, self.data.images[idx], sorted(set(self.student_taps.values())))
            for l in self.cfg.layers:
                f, f_hat = self._refined(l, idx, None)
                fd, hd = f.data.astype(np.float64), f_hat.data.astype(np.float64)
                s = s_tokens[self.student_taps[l]].data[:, 1:] @ self.projections[l].weight.data
                n_f = np.linalg.norm(fd, axis=-1)
                n_h = np.linalg.norm(hd, axis=-1)
                q = row_quantiles(n_f, self.cfg.alpha)
                if l == self.final:
                    cos_next = float(np.mean(patch_cosine(fd, hd)[0]))
                else:
                    nxt = self._next_block(l, idx, f_hat).data
                    cos_next = float(np.mean(patch_cosine(self.cache.next_tokens[l][idx], nxt)[0]))
                o, i = partition_kd(hd, s, None, self.cache.flags[l][idx])
                self.log.epochs.append({
                    "epoch": epoch,
                    "layer": l,
                    "outlier_count": int(np.sum(n_h > q[:, None])),
                    "gd_teacher_refined": float(np.mean(gram_distance(fd, hd))),
                    "gd_teacher_student": float(np.mean(gram_distance(fd, s))),
                    "cos_teacher_refined": float(np.mean(patch_cosine(fd, hd)[0])),
                    "cos_next": cos_next,
                    "outlier_share": o / (o + i) if o + i > 0 else 0.0,
                })

    def run(self) -> DistillResult:
        cfg = self.cfg
        params = self.parameters()
        opt = AdamW(params, cfg.weight_decay)
        n = len(self.data)
        steps_per_epoch = math.ceil(n / cfg.batch)
        total = cfg.epochs * steps_per_epoch
        teacher_before = {k: v.data.copy() for k, v in self.teacher.params.items()}
        self.evaluate(0)
        step = 0
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 23, epoch])
            for idx in _batches(n, cfg.batch, rng):
                lr = lr_at(step, total, cfg.lr_start, cfg.lr_end)
                opt.zero_grad()
                try:
                    parts = self.losses(idx, step)
                    parts.tensor.backward()
                except T.NonFiniteError as exc:
                    raise DivergenceError(f"loss is not finite at step {step}: {exc}") from exc
                gnorm = clip_grad_norm(params, cfg.clip_norm)
                opt.step(lr)
                self.log.steps.append({
                    "step": step, "epoch": epoch, "lr": lr, "kd": parts.kd, "outlier": parts.outlier,
                    "info": parts.info, "total": parts.total, "outlier_term": parts.outlier_term,
                    "inlier_term": parts.inlier_term, "grad_norm": gnorm,
                })
                step += 1
            self.evaluate(epoch + 1)
            log.info("distill %s epoch %d total %.5f", cfg.method, epoch, self.log.steps[-1]["total"])
        for k, v in self.teacher.params.items():
            if not np.array_equal(v.data, teacher_before[k]):
                raise RuntimeError(f"teacher weight {k} changed during distillation")
        self.student.requires_grad_(False)
        for p in params:
            p.grad = None
        return DistillResult(self.student, self.adapters, self.projections, self.log, cfg)


def distill(config: RunConfig, teacher: VitModel, data: SynthDataset) -> DistillResult:
    """Jointly optimise student, projections and (for SiNGER) adapters."""
    return Distiller(config, teacher, data).run()


def write_run(result: DistillResult, out_dir) -> Path:
    """Checkpoint, per-step CSV, per-epoch CSV and config text into ``out_dir``."""
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = format_config(result.config)
    ckpt = out / "checkpoint.sngr"
    save_checkpoint(result.state(), ckpt, manifest)
    (out / "steps.csv").write_text(result.log.steps_csv(), newline="\n")
    (out / "epochs.csv").write_text(result.log.epochs_csv(), newline="\n")
    (out / "config.txt").write_text(manifest, newline="\n")
    result.log.checkpoint = str(ckpt)
    return ckpt
