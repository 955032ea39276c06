"""Command-line driver: ``gfl-recon {train,attack,sweep,report}``.

Exit codes: 0 success, 1 internal error, 2 configuration or input error.
Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import experiment as ex
from . import nn
from .federation import round_trace_csv
from .graph import GraphFormatError
from .manipulation import objective_trace_csv
from .metrics import MetricReport, config_hash, full_report, score_reconstruction

OUT_ENV = "GFL_RECON_OUT"
MANIFEST = "manifest_{verb}.json"
CHECKSUMS = "checksums.sha256"
METRIC_FIELDS = ("attack_auc", "attack_precision", "attack_ap", "main_acc", "auc_cus_before", "auc_cus_after",
                 "hist_overlap_l1")


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int = 1):
        super().__init__(message)
        self.stage = stage
        self.code = code


class _Stage:
    """Context manager that tags failures with a stage name and times the stage."""

    def __init__(self, name: str, timings: dict):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is None or isinstance(exc, StageError):
            return False
        input_error = isinstance(exc, (FileNotFoundError, GraphFormatError, ex.ConfigError))
        raise StageError(self.name, f"{type(exc).__name__}: {exc}", 2 if input_error else 1) from exc


# --- file helpers ---------------------------------------------------------

def write_atomic(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": "\n"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_checksums(out: Path) -> None:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != CHECKSUMS and not p.name.startswith("."))
    lines = [f"{sha256_file(p)}  {p.relative_to(out).as_posix()}" for p in files]
    write_atomic(out / CHECKSUMS, "\n".join(lines) + "\n")


def verify_checksums(out: Path) -> list[str]:
    """Relative names of files whose content no longer matches the checksum list."""
    path = out / CHECKSUMS
    if not path.exists():
        return []
    bad = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        digest, name = line.split("  ", 1)
        target = out / name
        if not target.exists() or sha256_file(target) != digest:
            bad.append(name)
    return bad


def source_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+src.{h.hexdigest()[:12]}"


def histogram_csv(st: dict) -> str:
    lines = ["bin_left,bin_right,count_benign,count_manipulated"]
    e = st["hist_edges"]
    for i in range(len(st["hist_benign"])):
        lines.append(f"{e[i]!r},{e[i + 1]!r},{int(st['hist_benign'][i])},{int(st['hist_manipulated'][i])}")
    return "\n".join(lines) + "\n"


def scored_pairs_csv(pairs, scores, labels=None) -> str:
    head = "u,v,score" + (",true_label" if labels is not None else "")
    lines = [head]
    for i, (u, v) in enumerate(np.asarray(pairs).tolist()):
        row = f"{u},{v},{float(scores[i])!r}"
        if labels is not None:
            row += f",{int(labels[i])}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def _manifest(cfg: ex.ExperimentConfig, verb: str, seeds, timings: dict, files, deterministic: bool, extra=None) -> str:
    data = {
        "verb": verb,
        "config_hash": config_hash(cfg.fingerprint_dict()),
        "source_version": source_version(),
        "seeds": [int(s) for s in seeds],
        "deterministic": deterministic,
        "stage_seconds": None if deterministic else {k: round(v, 6) for k, v in sorted(timings.items())},
        "defense": {"kind": cfg.defense.kind, "strength": cfg.defense.strength},
        "files": sorted(files),
    }
    if extra:
        data.update(extra)
    return _json(data)


# --- verbs ----------------------------------------------------------------

def _seeds(cfg, args):
    return [args.seed] if args.seed is not None else list(cfg.evaluation.seeds)


def cmd_train(cfg: ex.ExperimentConfig, out: Path, seeds, deterministic: bool) -> None:
    timings, files = {}, []
    outputs = {}
    for seed in seeds:
        with _Stage("load", timings):
            data = ex.prepare(cfg, seed)
        with _Stage("train", timings):
            trained = ex.train(cfg, data, seed)
        with _Stage("stealth", timings):
            st = ex.stealth(cfg, data, trained.state.global_model, ex.manipulated_features(data, trained.manipulated), seed)
        d = f"seed_{seed}"
        outputs[f"{d}/round_trace.csv"] = round_trace_csv(trained.state.trace)
        if trained.manipulated is not None:
            outputs[f"{d}/objective_trace.csv"] = objective_trace_csv(trained.manipulated)
        outputs[f"{d}/histogram.csv"] = histogram_csv(st)
        outputs[f"{d}/train_summary.json"] = _json({
            "seed": seed,
            "main_acc": trained.test_acc,
            "auc_cus_before": st["auc_cus_before"],
            "auc_cus_after": st["auc_cus_after"],
            "hist_overlap_l1": st["hist_overlap_l1"],
        })
        (out / d).mkdir(parents=True, exist_ok=True)
        nn.save_model(trained.state.global_model, out / d / ".model.tmp")
        os.replace(out / d / ".model.tmp", out / d / "global_model.bin")
        files.append(f"{d}/global_model.bin")
    files += list(outputs)
    write_atomic(out / "config.json", _json(cfg.to_dict()))
    files.append("config.json")
    write_atomic(out / MANIFEST.format(verb="train"), _manifest(cfg, "train", seeds, timings, files, deterministic))
    for name, text in outputs.items():
        write_atomic(out / name, text)
    write_checksums(out)


def cmd_attack(cfg: ex.ExperimentConfig, out: Path, seeds, deterministic: bool) -> None:
    timings, outputs = {}, {}
    for seed in seeds:
        d = out / f"seed_{seed}"
        with _Stage("load", timings):
            data = ex.prepare(cfg, seed)
            model_path = d / "global_model.bin"
            if not model_path.exists():
                raise StageError("load", f"no trained model at {model_path}; run 'train' first", 2)
            model = nn.load_model(model_path)
            summary = json.loads((d / "train_summary.json").read_text(encoding="utf-8"))
        with _Stage("attack", timings):
            sealed = ex.evaluation_pairs(cfg, data, seed)
            oracle = ex.make_oracle(cfg, data, model, seed)
            outcome = ex.run_attack(cfg, data, oracle, sealed.pairs, seed)
        with _Stage("evaluate", timings):
            scored = score_reconstruction(outcome.result, sealed)
            report = full_report(scored, summary["main_acc"], summary, seed, cfg.fingerprint_dict())
        outputs[f"seed_{seed}/scored_pairs.csv"] = scored_pairs_csv(sealed.pairs, scored["scores"], scored["labels"])
        outputs[f"seed_{seed}/report.json"] = report.to_json()
    write_atomic(out / MANIFEST.format(verb="attack"),
                 _manifest(cfg, "attack", seeds, timings, list(outputs), deterministic))
    for name, text in outputs.items():
        write_atomic(out / name, text)
    write_checksums(out)


def _sweep_job(job):
    cfg_dict, assignments, seed, deterministic = job
    nn.set_deterministic(deterministic)
    try:
        cfg = ex.with_values(ex.config_from_dict(cfg_dict), assignments)
        return ex.run_cell(cfg, seed).report, None
    except Exception as exc:  # a failed cell is recorded, not fatal
        return None, f"{type(exc).__name__}: {exc}"


def _mean_std(values):
    if not values:
        return float("nan"), float("nan")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def sweep_rows(cells, seeds, results):
    """One row per grid cell with mean/std over seeds; failures counted and listed."""
    keys = list(cells[0])
    header = keys + ["seeds_ok"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")] + ["errors"]
    rows = [",".join(header)]
    for i, cell in enumerate(cells):
        reports, errors = [], []
        for j, seed in enumerate(seeds):
            rep, err = results[i * len(seeds) + j]
            (reports.append(rep) if rep is not None else errors.append(f"seed {seed}: {err}"))
        row = [str(cell[k]) for k in keys] + [str(len(reports))]
        for m in METRIC_FIELDS:
            mean, std = _mean_std([getattr(r, m) for r in reports])
            row += [repr(mean), repr(std)]
        row.append('"' + "; ".join(errors).replace('"', "'") + '"' if errors else "")
        rows.append(",".join(row))
    return "\n".join(rows) + "\n"


def cmd_sweep(cfg: ex.ExperimentConfig, out: Path, seeds, deterministic: bool, workers: int) -> None:
    timings = {}
    with _Stage("config", timings):
        cells = ex.grid_cells(cfg)
        for cell in cells:
            ex.with_values(cfg, cell)
    jobs = [(cfg.to_dict(), cell, seed, deterministic) for cell in cells for seed in seeds]
    with _Stage("sweep", timings):
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_sweep_job, jobs))
        else:
            results = [_sweep_job(j) for j in jobs]
    outputs = {"sweep.csv": sweep_rows(cells, seeds, results)}
    for (assign, seed), (rep, _) in zip([(c, s) for c in cells for s in seeds], results):
        if rep is not None:
            idx = cells.index(assign)
            outputs[f"cells/cell_{idx:03d}/seed_{seed}/report.json"] = rep.to_json()
    outputs["cells/index.json"] = _json([{"cell": i, **c} for i, c in enumerate(cells)])
    write_atomic(out / "config.json", _json(cfg.to_dict()))
    write_atomic(out / MANIFEST.format(verb="sweep"),
                 _manifest(cfg, "sweep", seeds, timings, list(outputs) + ["config.json"], deterministic,
                           {"grid": {k: list(v) for k, v in cfg.sweep.grid}}))
    for name, text in outputs.items():
        write_atomic(out / name, text)
    write_checksums(out)


def _read_sweep(path: Path):
    lines = path.read_text(encoding="utf-8").splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",", len(header) - 1)
        rows.append(dict(zip(header, parts)))
    return header, rows


def matrix_csv(header, rows, metric="attack_auc") -> str | None:
    """Two-key sweeps as a matrix: rows = first key, columns = second key, cells 'mean±std'."""
    keys = header[: header.index("seeds_ok")]
    if len(keys) != 2:
        return None
    r_vals = list(dict.fromkeys(r[keys[0]] for r in rows))
    c_vals = list(dict.fromkeys(r[keys[1]] for r in rows))
    cell = {(r[keys[0]], r[keys[1]]): r for r in rows}
    lines = [f"{keys[0]}\\{keys[1]}," + ",".join(c_vals)]
    for rv in r_vals:
        out = []
        for cv in c_vals:
            r = cell[(rv, cv)]
            out.append(f"{float(r[metric + '_mean']):.4f}±{float(r[metric + '_std']):.4f}")
        lines.append(rv + "," + ",".join(out))
    return "\n".join(lines) + "\n"


def cmd_report(run_dir: Path, out: Path) -> str:
    manifests = sorted(run_dir.glob("manifest_*.json"))
    if not manifests:
        raise StageError("report", f"no manifest found in {run_dir}", 2)
    for m in manifests:
        try:
            json.loads(m.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise StageError("report", f"corrupt manifest {m.name}: {exc}", 2) from exc
    for name in verify_checksums(run_dir):
        print(f"warning: checksum mismatch for {name}", file=sys.stderr)

    lines = [f"run directory: {run_dir}"]
    for m in manifests:
        data = json.loads(m.read_text(encoding="utf-8"))
        lines.append(f"{m.name}: verb={data['verb']} config_hash={data['config_hash']} seeds={data['seeds']}")
    outputs = {}
    reports = []
    for path in sorted(run_dir.glob("seed_*/report.json")):
        try:
            reports.append(MetricReport.from_json(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError) as exc:
            raise StageError("report", f"corrupt report {path.relative_to(run_dir)}: {exc}", 2) from exc
    if reports:
        lines.append("")
        lines.append("seed " + " ".join(f"{f:>16}" for f in METRIC_FIELDS))
        for r in sorted(reports, key=lambda r: r.seed):
            lines.append(f"{r.seed:>4} " + " ".join(f"{getattr(r, f):>16.4f}" for f in METRIC_FIELDS))
        stats = [_mean_std([getattr(r, f) for r in reports]) for f in METRIC_FIELDS]
        lines.append("mean " + " ".join(f"{m:>16.4f}" for m, _ in stats))
        lines.append(" std " + " ".join(f"{s:>16.4f}" for _, s in stats))
        csv = ["seed," + ",".join(METRIC_FIELDS)]
        csv += [f"{r.seed}," + ",".join(repr(getattr(r, f)) for f in METRIC_FIELDS) for r in sorted(reports, key=lambda r: r.seed)]
        outputs["summary.csv"] = "\n".join(csv) + "\n"
    for path in sorted(run_dir.glob("seed_*/histogram.csv")):
        outputs[f"histogram_{path.parent.name}.csv"] = path.read_text(encoding="utf-8")
    sweep = run_dir / "sweep.csv"
    if sweep.exists():
        header, rows = _read_sweep(sweep)
        outputs["sweep_table.csv"] = sweep.read_text(encoding="utf-8")
        matrix = matrix_csv(header, rows)
        if matrix is not None:
            outputs["matrix.csv"] = matrix
        lines.append("")
        lines.append(f"sweep: {len(rows)} cells")
        for r in rows:
            keys = header[: header.index("seeds_ok")]
            desc = " ".join(f"{k}={r[k]}" for k in keys)
            lines.append(f"  {desc}: attack_auc {float(r['attack_auc_mean']):.4f} ± {float(r['attack_auc_std']):.4f}"
                         f" (ok seeds {r['seeds_ok']})")
    text = "\n".join(lines) + "\n"
    outputs["summary.txt"] = text
    for name, body in outputs.items():
        write_atomic(out / "report" / name, body)
    return text


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfl-recon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("train", "attack", "sweep", "report"):
        sp = sub.add_parser(verb)
        if verb == "report":
            sp.add_argument("run_dir", nargs="?", help="run directory (default: --out)")
        sp.add_argument("--config", help="TOML experiment file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
        sp.add_argument("--seed", type=int, help="run only this seed")
        sp.add_argument("--deterministic", action="store_true", help="single thread, deterministic kernels")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or output.root, per config hash)")
        sp.add_argument("--workers", type=int, default=1, help="parallel sweep cells")
    return p


def resolve_out(cfg: ex.ExperimentConfig, args) -> Path:
    if args.out:
        return Path(args.out)
    root = cfg.output.root or os.environ.get(OUT_ENV) or "runs"
    return Path(root) / config_hash(cfg.fingerprint_dict())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        nn.set_deterministic(True)
    try:
        try:
            cfg = ex.load_config(args.config, args.set)
        except ex.ConfigError as exc:
            raise StageError("config", str(exc), 2) from exc
        if args.workers < 1:
            raise StageError("config", "--workers must be >= 1", 2)
        out = resolve_out(cfg, args)
        seeds = _seeds(cfg, args)
        if args.verb == "train":
            cmd_train(cfg, out, seeds, args.deterministic)
        elif args.verb == "attack":
            cmd_attack(cfg, out, seeds, args.deterministic)
        elif args.verb == "sweep":
            cmd_sweep(cfg, out, seeds, args.deterministic, args.workers)
        else:
            run_dir = Path(args.run_dir) if args.run_dir else out
            print(cmd_report(run_dir, Path(args.out) if args.out else run_dir), end="")
        return 0
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error [internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
