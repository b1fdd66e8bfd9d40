"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, load_model, save_model
from .config import ConfigError, RunConfig, load_config, parse_pairs, parse_config, spec_from_pairs
from .linalg import ConvergenceError
from .losses import LossError
from .metrics import MetricError, MetricReport, cka, gram_distance, linear_probe, norm_stats, patch_cosine_stats, summary
from .nullspace import BasisError, norm_energy_correlation, null_report, spectrum_rows, sublayer_deltas, subspace_energy
from .training import DivergenceError, TrainingError, distill, train_teacher, write_run
from .vit import ArtifactPlan, ModelError, VitModel, forward_tokens, from_state, inject_artifacts, pooled_features, without_artifacts

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
DATA_ERRORS = (OSError, data_mod.FormatError, CheckpointError, ConfigError, ModelError, TrainingError, LossError,
               MetricError, BasisError, ValueError)
NUMERIC_ERRORS = (DivergenceError, T.NonFiniteError, ConvergenceError, FloatingPointError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_text(path, text: str) -> None:
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, newline="\n")


def _csv(header: list[str], rows) -> str:
    out = [",".join(header)]
    for row in rows:
        out.append(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    return "\n".join(out) + "\n"


# -- model loading ---------------------------------------------------------------


def load_any(path) -> tuple[VitModel, dict]:
    """Load a model checkpoint or the student inside a distillation checkpoint.

    Returns the model and, for distillation checkpoints, their extra tensors
    (projections, adapters) plus the parsed run config under ``"config"``.
    """
    ckpt = load_checkpoint(path)
    pairs = parse_pairs(ckpt.manifest)
    if "model.depth" in pairs:
        return load_model(path), {}
    if "student.depth" in pairs:
        cfg = parse_config(ckpt.manifest)
        state = {k[8:]: v for k, v in ckpt.tensors.items() if k.startswith("student.")}
        extra = {k: v for k, v in ckpt.tensors.items() if not k.startswith("student.")}
        extra["config"] = cfg
        return from_state(spec_from_pairs(pairs, "student"), state), extra
    raise CheckpointError(f"{path}: manifest describes neither a model nor a run")


# -- subcommands -------------------------------------------------------------------


def cmd_synth(a) -> None:
    ds = data_mod.generate(a.seed, a.count)
    data_mod.save(ds, a.out)
    print(f"wrote {len(ds)} images to {a.out}")


def cmd_train_teacher(a) -> None:
    cfg = load_config(a.config) if a.config else RunConfig()
    ds = data_mod.load(a.data)
    model = train_teacher(cfg.teacher, ds, cfg.teacher_epochs, cfg.teacher_lr, batch=cfg.batch,
                          weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    save_model(model, a.out)
    print(f"train_accuracy {model.meta['train_accuracy']!r}")


def cmd_inject(a) -> None:
    model = without_artifacts(load_model(a.teacher))
    plan = ArtifactPlan(a.layers, a.fraction, a.gain, a.seed)
    save_model(inject_artifacts(model, plan), a.out)
    print(f"planted {plan.count(model.spec.num_patches)} tokens per image at layers {list(plan.layers)}")


def cmd_distill(a) -> None:
    text = Path(a.config).read_text() if a.config else ""
    cfg = parse_config(text)
    teacher = load_model(a.teacher)
    if teacher.spec != cfg.teacher:
        cfg = parse_config(text, RunConfig(teacher=teacher.spec, layers=(teacher.spec.depth - 1,)))
    if a.method:
        cfg = replace(cfg, method=a.method)
    ds = data_mod.load(a.data)
    result = distill(cfg, teacher, ds)
    ckpt = write_run(result, a.out)
    print(f"wrote {ckpt}")


def cmd_nullspace(a) -> None:
    model, _ = load_any(a.ckpt)
    layers = [a.layer] if a.layer is not None else list(range(model.spec.depth))
    rows = []
    for l in layers:
        rep = null_report(model, l, a.rank, a.rho, a.eps)
        rows += spectrum_rows(rep)
        print(f"layer {l} (basis from block {rep.source_layer}): k_energy {rep.k_energy} k_eps {rep.k_eps} "
              f"r_eps {rep.r_eps} null_bound {rep.null_bound!r}", file=sys.stderr)
    _write_text(a.out, _csv(["layer", "index", "sigma", "cum_energy"], rows))


def cmd_sublayer(a) -> None:
    model, _ = load_any(a.ckpt)
    ds = data_mod.load(a.data)
    images = ds.images[: a.limit] if a.limit else ds.images
    rows = []
    for l in range(model.spec.depth):
        for name, stats in sublayer_deltas(model, l, images).items():
            rows.append((l, name, stats["mean"], stats["median"], stats["p95"]))
    _write_text(a.out, _csv(["layer", "quantity", "mean", "median", "p95"], rows))


def cmd_subspace(a) -> None:
    model, _ = load_any(a.ckpt)
    ds = data_mod.load(a.data)
    images = ds.images[: a.limit] if a.limit else ds.images
    layers = a.layers or tuple(range(model.spec.depth))
    with T.no_grad():
        toks = forward_tokens(model, images, layers)
    rows = []
    for l in layers:
        rep = null_report(model, l, a.rank)
        F = toks[l].data[:, 1:].astype(np.float64)
        for name, basis in (("null", rep.null_basis), ("principal", rep.principal_basis)):
            e = subspace_energy(F, basis)
            corr = []
            for img in F:
                try:
                    corr.append(norm_energy_correlation(img, basis))
                except ValueError:
                    pass
            c = float(np.mean(corr)) if corr else float("nan")
            rows.append((l, name, float(e.mean()), float(np.median(e)), float(np.quantile(e, 0.95)), c))
    _write_text(a.out, _csv(["layer", "basis", "mean", "median", "p95", "norm_corr"], rows))


def _eval_features(teacher: VitModel, student: VitModel, extra: dict, layer: int, images):
    with T.no_grad():
        ft = forward_tokens(teacher, images, [layer])[layer].data[:, 1:].astype(np.float64)
        cfg = extra.get("config")
        s_layer = cfg.student_layer(layer) if cfg is not None else layer
        fs = forward_tokens(student, images, [s_layer])[s_layer].data[:, 1:].astype(np.float64)
    proj = extra.get(f"proj.{layer}.weight")
    fs_proj = fs @ proj.astype(np.float64) if proj is not None else fs
    return ft, fs, fs_proj


def cmd_eval(a) -> None:
    metrics = [m.strip() for m in a.metrics.split(",") if m.strip()]
    bad = sorted(set(metrics) - {"gram", "cka", "cos", "norms", "probe"})
    if bad:
        raise UsageError(f"unknown metrics: {', '.join(bad)}")
    teacher, _ = load_any(a.teacher)
    student, extra = load_any(a.student)
    ds = data_mod.load(a.data)
    layer = teacher.spec.depth - 1 if a.layer is None else a.layer
    idx = slice(0, a.limit) if a.limit else slice(None)
    ft, fs, fs_proj = _eval_features(teacher, student, extra, layer, ds.images[idx])
    report = MetricReport(extra={"layer": layer, "images": len(ft)})
    if "gram" in metrics:
        if fs_proj.shape != ft.shape:
            raise MetricError("gram distance needs matching widths; pass a run checkpoint with a projection")
        report.gram_distance = summary(gram_distance(ft, fs_proj))
    if "cka" in metrics:
        report.cka = float(np.mean(cka(ft, fs)))
    if "cos" in metrics:
        if fs_proj.shape != ft.shape:
            raise MetricError("patch cosine needs matching widths; pass a run checkpoint with a projection")
        report.cosine = patch_cosine_stats(ft, fs_proj)
    if "norms" in metrics:
        report.norm_summary = {
            "teacher": norm_stats(ft, a.alpha)["quantiles"],
            "student": norm_stats(fs_proj, a.alpha)["quantiles"],
        }
    if "probe" in metrics:
        report.probe_accuracy = linear_probe(pooled_features(student, ds.images[idx]), ds.labels[idx])
    _write_text(a.out, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_export(a) -> None:
    run = Path(a.run)
    steps = (run / "steps.csv").read_text()
    epochs = (run / "epochs.csv").read_text()
    if a.format == "csv":
        text = steps if a.table == "steps" else epochs
    else:
        def rows(text):
            lines = text.strip("\n").split("\n")
            head = lines[0].split(",")
            return [dict(zip(head, (json.loads(v) if v not in ("nan", "inf", "-inf") else v for v in ln.split(","))))
                    for ln in lines[1:]]

        config = parse_pairs((run / "config.txt").read_text())
        text = json.dumps({"config": config, "steps": rows(steps), "epochs": rows(epochs)}, indent=1, sort_keys=True) + "\n"
    _write_text(a.out, text)


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="singerlab", description="Nullspace-guided teacher refinement lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate the synthetic dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-teacher", help="train a teacher ViT with cross-entropy")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("inject-artifacts", help="attach a high-norm artifact plan to a teacher")
    s.add_argument("--teacher", required=True)
    s.add_argument("--layers", type=_ints, required=True)
    s.add_argument("--fraction", type=float, default=0.05)
    s.add_argument("--gain", type=float, default=10.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_inject)

    s = sub.add_parser("distill", help="distil a student from a frozen teacher")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=["singer", "fitnet", "mask"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distill)

    an = sub.add_parser("analyze", help="spectral and token diagnostics")
    asub = an.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    s = asub.add_parser("nullspace", help="linearised-FFN spectrum per layer")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layer", type=int)
    s.add_argument("--rank", type=int, default=16)
    s.add_argument("--rho", type=float, default=0.999)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(func=cmd_nullspace)
    s = asub.add_parser("sublayer", help="relative change of attention and FFN sublayers")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sublayer)
    s = asub.add_parser("subspace-energy", help="token energy in null and principal bases")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--rank", type=int, default=16)
    s.add_argument("--layers", type=_ints)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_subspace)

    s = sub.add_parser("eval", help="compare teacher and student features")
    s.add_argument("--teacher", required=True)
    s.add_argument("--student", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", default="gram,cka,cos,norms,probe")
    s.add_argument("--layer", type=int)
    s.add_argument("--alpha", type=float, default=0.95)
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export", help="dump a run log as CSV or JSON")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=["csv", "json"], required=True)
    s.add_argument("--table", choices=["steps", "epochs"], default="steps")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export)
    return p


def _threads() -> int:
    raw = os.environ.get("SINGER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SINGER_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"SINGER_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        threads = _threads()
    except UsageError as exc:
        if str(exc).startswith("SINGER_THREADS"):
            print(f"singerlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=threads):
            args.func(args)
    except UsageError as exc:
        print(f"singerlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"singerlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"singerlab: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
