"""Command-line experiment runner.

    sinklab run <config>... [--force] [--trace-every N] [--jobs N]
    sinklab compare <run_dir>... [--baseline LABEL] [--csv PATH]
    sinklab plot-data <run_dir>
    sinklab configs [OUTDIR]

Exit codes: 0 success (a diverged run is a success), 2 bad config,
3 I/O failure or an existing output directory without ``--force``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import re
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import instrument as ins
from . import quantsim as qs
from .model import ConfigError, ModelConfig, build_model, forward, load_checkpoint, param_count, save_checkpoint
from .train import RunConfig, RunMetrics, eval_batches, mean_loss, tokenize, train_loop, windows

log = logging.getLogger("sinklab")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
SEED_ENV = "SINKLAB_SEED"
BUNDLED = "bundled"
EVAL_FRACTION = 0.05
CALIB_BATCHES = 4


class IOFailure(OSError):
    pass


@dataclass
class ExperimentConfig:
    model: ModelConfig
    run: RunConfig
    label: str
    output_dir: str
    corpus_path: str = BUNDLED
    quant: list = field(default_factory=list)
    source: Optional[Path] = None

    KEYS = ("model", "run", "label", "output_dir", "corpus_path", "quant")

    @classmethod
    def from_dict(cls, d: dict, source: Optional[Path] = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(d) - set(cls.KEYS))
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        for k in ("model", "run", "label", "output_dir"):
            if k not in d:
                raise ConfigError(f"missing required key: {k}")
        if not isinstance(d["label"], str) or not d["label"]:
            raise ConfigError("label must be a non-empty string")
        quant = d.get("quant") or []
        if isinstance(quant, dict):
            quant = [quant]
        try:
            specs = [qs.QuantSpec.from_dict(q) for q in quant]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"quant: {e}") from None
        return cls(
            model=ModelConfig.from_dict(d["model"]),
            run=RunConfig.from_dict(d["run"]),
            label=d["label"],
            output_dir=d["output_dir"],
            corpus_path=d.get("corpus_path", BUNDLED),
            quant=specs,
            source=source,
        )

    def to_dict(self) -> dict:
        d = {
            "label": self.label,
            "model": self.model.to_dict(),
            "run": self.run.to_dict(),
            "corpus_path": self.corpus_path,
            "output_dir": self.output_dir,
        }
        if self.quant:
            d["quant"] = [q.to_dict() for q in self.quant]
        return d


def _line_of(text: str, msg: str) -> Optional[int]:
    # offending names come last in our messages, so try those first
    for key in reversed(re.findall(r"[A-Za-z_][A-Za-z0-9_]*", msg)):
        m = re.search(rf'"{re.escape(key)}"\s*:', text)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return None


def bundled_config_path(name: str) -> Optional[Path]:
    stem = name[:-5] if name.endswith(".json") else name
    p = resources.files("sinklab") / "configs" / f"{stem}.json"
    return Path(str(p)) if p.is_file() else None


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate a config file; errors carry ``file:line`` where it can be found."""
    path = Path(path)
    if not path.exists():
        bundled = bundled_config_path(path.name)
        if bundled is None:
            raise IOFailure(f"config not found: {path}")
        path = bundled
    try:
        text = path.read_text()
    except OSError as e:
        raise IOFailure(str(e)) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    try:
        cfg = ExperimentConfig.from_dict(raw, source=path)
    except (ConfigError, TypeError) as e:
        line = _line_of(text, str(e))
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {e}") from None
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            s = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        cfg.model = dataclasses.replace(cfg.model, seed=s)
        cfg.run = dataclasses.replace(cfg.run, seed=s)
    return cfg


def bundled_corpus() -> bytes:
    return (resources.files("sinklab") / "data" / "corpus.txt").read_bytes()


def load_corpus(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.corpus_path == BUNDLED:
        return tokenize(bundled_corpus())
    p = Path(cfg.corpus_path)
    if not p.is_absolute() and cfg.source is not None and not p.exists():
        p = cfg.source.parent / p
    try:
        return tokenize(p.read_bytes())
    except OSError as e:
        raise IOFailure(f"cannot read corpus: {e}") from None


def split_corpus(ids: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Held-out tail for evaluation; a tiny corpus is used for both."""
    n_eval = int(len(ids) * EVAL_FRACTION)
    if n_eval <= seq_len + 1 or len(ids) - n_eval <= seq_len + 1:
        return ids, ids
    return ids[:-n_eval], ids[-n_eval:]


def _prepare_output(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise IOFailure(f"output directory {out} exists (use --force to overwrite)")
        shutil.rmtree(out)
    try:
        (out / "traces").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOFailure(str(e)) from None


def execute(cfg: ExperimentConfig, force: bool = False, trace_every: Optional[int] = None) -> dict:
    """Train, evaluate and write every run artifact; returns the summary dict."""
    if trace_every is not None:
        cfg.run = dataclasses.replace(cfg.run, trace_every=trace_every).validate()
    out = Path(cfg.output_dir)
    _prepare_output(out, force)
    ids = load_corpus(cfg)
    train_ids, eval_ids = split_corpus(ids, cfg.run.seq_len)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    model = build_model(cfg.model)
    traces = out / "traces"
    with open(out / "metrics.jsonl", "w") as mfh:

        def on_log(rec):
            mfh.write(rec.to_json() + "\n")
            if rec.step % 100 == 0 or rec.diverged:
                log.info("[%s] step %d loss %.4f max|h| %.3g", cfg.label, rec.step, rec.loss, rec.max_abs_activation)

        def on_trace(step, tr):
            tr.save(traces / f"step_{step:06d}.npz")

        metrics = train_loop(model, train_ids, cfg.run, on_trace=on_trace, on_log=on_log)

    batches = eval_batches(eval_ids, cfg.run.eval_batches, cfg.run.batch_size, cfg.run.seq_len)
    final_loss = float("nan") if metrics.diverged else mean_loss(model, batches)
    save_checkpoint(model, out / "checkpoint.snkm")

    probe_ids = batches[0][0]
    _, tr = forward(model, probe_ids, trace=True)
    tr.meta["label"] = cfg.label
    tr.save(traces / "final.npz")
    if all(np.isfinite(tr.hidden).reshape(-1)):
        (out / "sink_report.json").write_text(ins.sink_report(tr).to_json() + "\n")
    else:
        (out / "sink_report.json").write_text(json.dumps({"error": "non-finite activations"}) + "\n")
    nrep = ins.norm_weight_deviation(model)
    (out / "norm_weights.json").write_text(json.dumps(nrep.to_dict(), indent=2) + "\n")

    if cfg.quant and not metrics.diverged:
        calib_it = windows(train_ids, cfg.run.batch_size, cfg.run.seq_len, cfg.run.seed + 1)
        calib = [next(calib_it)[0] for _ in range(CALIB_BATCHES)]
        reports = [qs.eval_quantized(model, spec, batches, calib) for spec in cfg.quant]
        qs.write_quant_report(out / "quant_report.json", reports)

    summary = {
        "label": cfg.label,
        "final_eval_loss": final_loss,
        "diverged": metrics.diverged,
        "peak_abs_activation": metrics.peak_abs_activation,
        "steps_run": metrics.steps_run,
        "param_count": param_count(cfg.model),
        "config_hash": cfg.model.config_hash(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_experiment(config_path, force: bool = False, trace_every: Optional[int] = None) -> int:
    try:
        cfg = load_experiment(config_path)
        summary = execute(cfg, force=force, trace_every=trace_every)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    status = "diverged" if summary["diverged"] else f"eval loss {summary['final_eval_loss']:.4f}"
    print(f"{summary['label']}: {status}, peak |h| {summary['peak_abs_activation']:.3g} -> {cfg.output_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare


def two_sig(x: float) -> float:
    """Round to two significant digits."""
    if not math.isfinite(x) or x == 0:
        return x
    return float(f"{x:.2g}")


@dataclass
class CompareRow:
    label: str
    loss: Optional[float]
    outliers: float
    diverged: bool
    gap: Optional[float] = None

    def cells(self) -> list[str]:
        loss = "-" if self.diverged or self.loss is None else f"{self.loss:.3f}"
        gap = "-" if self.gap is None else f"{self.gap:+.3f}"
        out = "-" if self.diverged else f"{two_sig(self.outliers):,.0f}" if self.outliers >= 10 else f"{two_sig(self.outliers):.2g}"
        return [self.label, out, loss, gap]


CLAIMS = [
    ("GA outliers <= baseline", "row02", "row01", "outliers"),
    ("GatedNorm outliers <= baseline", "row20", "row01", "outliers"),
    ("GatedNorm outliers <= GA", "row20", "row02", "outliers"),
    ("PreAffine outliers <= GA", "row19", "row02", "outliers"),
    ("GatedNorm loss <= GA", "row20", "row02", "loss"),
]


def read_run(run_dir) -> CompareRow:
    run_dir = Path(run_dir)
    mpath = run_dir / "metrics.jsonl"
    if not mpath.exists():
        raise IOFailure(f"missing metrics.jsonl in {run_dir}")
    recs = RunMetrics.read_jsonl(mpath)
    spath = run_dir / "summary.json"
    summary = json.loads(spath.read_text()) if spath.exists() else {}
    diverged = bool(summary.get("diverged", any(r["diverged"] for r in recs)))
    peak = max((r["max_abs_activation"] for r in recs), default=float("nan"))
    loss = summary.get("final_eval_loss", recs[-1]["loss"] if recs else None)
    if loss is not None and not math.isfinite(loss):
        loss = None
    return CompareRow(summary.get("label", run_dir.name), loss, peak, diverged)


def compare(run_dirs, baseline: Optional[str] = None, csv_path=None) -> tuple[list[CompareRow], list[dict]]:
    rows = [read_run(d) for d in run_dirs]
    by_label = {r.label: r for r in rows}
    base = by_label.get(baseline) if baseline else rows[0] if rows else None
    if baseline and base is None:
        raise ConfigError(f"baseline label {baseline!r} not among runs")
    for r in rows:
        if base is not None and r.loss is not None and base.loss is not None and not r.diverged:
            r.gap = r.loss - base.loss

    claims = []
    for desc, subj, ref, metric in CLAIMS:
        a, b = by_label.get(subj), by_label.get(ref)
        if a is None or b is None:
            continue
        va = a.outliers if metric == "outliers" else a.loss
        vb = b.outliers if metric == "outliers" else b.loss
        ok = va is not None and vb is not None and not a.diverged and va <= vb
        claims.append({"claim": desc, "subject": subj, "reference": ref, "metric": metric, "subject_value": va, "reference_value": vb, "pass": bool(ok)})

    if csv_path is not None:
        csv_path = Path(csv_path)
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "outliers", "final_loss", "gap", "diverged", "baseline"])
            for r in rows:
                w.writerow(r.cells() + [int(r.diverged), base.label if base else ""])
        csv_path.with_suffix(".claims.json").write_text(json.dumps(claims, indent=2) + "\n")
    return rows, claims


def format_table(rows: list[CompareRow], claims: list[dict]) -> str:
    header = ["label", "outliers", "final loss", "gap"]
    body = [r.cells() for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(line, widths))) for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    for c in claims:
        lines.append(f"[{'PASS' if c['pass'] else 'FAIL'}] {c['claim']} ({c['subject']} vs {c['reference']})")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# plot data


def _latest_trace(run_dir: Path) -> Optional[Path]:
    tdir = run_dir / "traces"
    if (tdir / "final.npz").exists():
        return tdir / "final.npz"
    steps = sorted(tdir.glob("step_*.npz")) if tdir.exists() else []
    return steps[-1] if steps else None


def export_plot_data(run_dir, figures: bool = True) -> list[Path]:
    """Write series / reordered-hidden / attention CSVs (and PNG renderings) into ``run_dir/plots``."""
    run_dir = Path(run_dir)
    recs = RunMetrics.read_jsonl(run_dir / "metrics.jsonl")
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)
    written = []

    series = out / "series.csv"
    with series.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "grad_norm", "max_abs_activation"])
        for r in recs:
            w.writerow([r["step"], r["loss"], r["lr"], r["grad_norm"], r["max_abs_activation"]])
    written.append(series)
    if figures:
        from . import plotting

        s = [r["step"] for r in recs]
        written.append(
            plotting.plot_training_curves(
                s, [r["loss"] for r in recs], [r["max_abs_activation"] for r in recs], [r["lr"] for r in recs], out / "training_curves.png", run_dir.name
            )
        )

    tpath = _latest_trace(run_dir)
    if tpath is None:
        log.warning("no traces in %s; exported the step series only", run_dir)
        return written
    tr = ins.ActivationTrace.load(tpath)
    seq_len = tr.ids.shape[1] if tr.ids is not None and tr.ids.ndim == 2 else None
    mat, order = ins.reordered_hidden_matrix(tr, seq_len)
    p = out / "hidden_reordered.csv"
    ins.write_matrix_csv(p, mat, header=[f"d{j}" for j in order])
    written.append(p)
    if tr.attn:
        attn = ins.average_attention_map(tr)
        p = out / "attention_avg.csv"
        ins.write_matrix_csv(p, attn)
        written.append(p)
    if figures:
        from . import plotting

        written.append(plotting.plot_hidden_heatmap(mat, order, out / "hidden_reordered.png"))
        if tr.attn:
            written.append(plotting.plot_attention_map(attn, out / "attention_avg.png"))
        ck = run_dir / "checkpoint.snkm"
        if ck.exists():
            rep = ins.norm_weight_deviation(load_checkpoint(ck))
            written.append(plotting.plot_norm_weights(rep.weights, out / "norm_weights.png", rep.pre_weights))
    return written


# --------------------------------------------------------------------------
# entry point


def _run_one(args) -> int:
    path, force, trace_every = args
    return run_experiment(path, force=force, trace_every=trace_every)


def write_bundled_configs(outdir) -> list[Path]:
    from .experiments import experiment_configs

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, cfg in experiment_configs().items():
        p = outdir / f"{name}.json"
        p.write_text(json.dumps(cfg, indent=2) + "\n")
        paths.append(p)
    return paths


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sinklab", description="outlier / sink experiments on desk-scale transformers")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="train and evaluate one or more experiment configs")
    r.add_argument("configs", nargs="+")
    r.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    r.add_argument("--trace-every", type=int, default=None)
    r.add_argument("--jobs", type=int, default=1, help="run several configs in parallel processes")

    c = sub.add_parser("compare", help="side-by-side comparison of finished runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--baseline", default=None)
    c.add_argument("--csv", default=None)

    p = sub.add_parser("plot-data", help="export plot matrices and figures for a run")
    p.add_argument("run_dir")
    p.add_argument("--no-figures", action="store_true")

    g = sub.add_parser("configs", help="list bundled configs or write them to OUTDIR")
    g.add_argument("outdir", nargs="?")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.cmd == "run":
        jobs = [(c, args.force, args.trace_every) for c in args.configs]
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as ex:
                codes = list(ex.map(_run_one, jobs))
        else:
            codes = [_run_one(j) for j in jobs]
        return max(codes)
    if args.cmd == "compare":
        try:
            rows, claims = compare(args.run_dirs, args.baseline, args.csv)
        except ConfigError as e:
            print(f"config error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as e:
            print(f"io error: {e}", file=sys.stderr)
            return EXIT_IO
        print(format_table(rows, claims))
        return EXIT_OK
    if args.cmd == "plot-data":
        try:
            for p in export_plot_data(args.run_dir, figures=not args.no_figures):
                print(p)
        except OSError as e:
            print(f"io error: {e}", file=sys.stderr)
            return EXIT_IO
        return EXIT_OK
    if args.cmd == "configs":
        if args.outdir:
            for p in write_bundled_configs(args.outdir):
                print(p)
        else:
            from .experiments import experiment_configs

            for name in experiment_configs():
                print(name)
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
