"""Command-line entry point: ``saunet3d train|predict|evaluate|ablate|plot|phantom make``.

Exit codes: 0 success, 2 usage or input error, 3 state or corruption error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__
from .metrics import evaluate_cases
from .model import ConfigError, ModelConfig, layer_listing, predict_case
from .phantom import PhantomConfig, generate_dataset
from .preprocessing import plan_geometry
from .training import (
    CheckpointError,
    DivergenceError,
    LossTrace,
    TrainConfig,
    checkpoint_extra,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .volume_io import (
    VolumeIOError,
    find_file,
    list_case_ids,
    load_dataset,
    load_mask,
    read_index,
    save_mask,
    save_case,
    write_index,
)

log = logging.getLogger("saunet3d")

EXIT_OK, EXIT_INPUT, EXIT_STATE = 0, 2, 3


class CliFailure(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def fail(message: str, code: int = EXIT_INPUT):
    raise CliFailure(message, code)


def _run(fn, *args, **kwargs) -> None:
    try:
        fn(*args, **kwargs)
    except CliFailure as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)


# -- config loading ---------------------------------------------------------

def load_run_config(path: Path, seed: Optional[int] = None) -> tuple[ModelConfig, TrainConfig]:
    """Read ``{"model": ..., "train": ...}`` or a run manifest with a ``config`` block."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        fail(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        fail(f"config {path} is not valid JSON: {exc}")
    if "config" in raw:
        raw = raw["config"]
    try:
        model_cfg = ModelConfig.from_dict(raw.get("model", {}))
        train_raw = dict(raw.get("train", {}))
        if seed is not None:
            train_raw["seed"] = seed
        train_cfg = TrainConfig.from_dict(train_raw)
    except (ConfigError, ValueError, TypeError) as exc:
        fail(f"invalid config: {exc}")
    return model_cfg, train_cfg


def _load_data(data: Path):
    if not data.is_dir():
        fail(f"data directory not found: {data}")
    try:
        cases = load_dataset(data)
    except VolumeIOError as exc:
        fail(str(exc))
    if not cases:
        fail(f"no cases found in {data}")
    return cases


# -- commands ---------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="saunet3d")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Lesion segmentation pipeline for anisotropic 3D volumes."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def do_train(config: Path, data: Path, out: Path, seed: Optional[int]) -> None:
    model_cfg, train_cfg = load_run_config(config, seed)
    cases = _load_data(data)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, trace = train(model_cfg, train_cfg, cases, out_dir=out,
                             on_step=lambda r: log.info("step %d loss %.5f", r.step, r.total))
    except DivergenceError as exc:
        fail(f"training diverged: {exc}", EXIT_STATE)
    except ValueError as exc:
        fail(str(exc))
    final = out / f"ckpt_{train_cfg.steps}.bin"
    if not final.exists():
        save_checkpoint(model, final, extra=checkpoint_extra(train_cfg, train_cfg.steps))
    trace.write_csv(out / "trace.csv")
    manifest = {
        "tool": "saunet3d",
        "version": __version__,
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
        "seed": train_cfg.seed,
        "checkpoints": sorted(p.name for p in out.glob("ckpt_*.bin")),
        "final_checkpoint": final.name,
        "dataset": {"dir": str(data.resolve()), "cases": [c.id for c in cases]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    last = trace.records[-1].total if trace.records else float("nan")
    click.echo(f"trained {train_cfg.steps} steps on {len(cases)} cases; final loss {last:.5f}")


@main.command("train")
@click.option("--config", type=click.Path(path_type=Path), required=True)
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None, help="Override the training seed.")
def cmd_train(config, data, out, seed):
    """Train from scratch; writes checkpoints, trace.csv and manifest.json."""
    _run(do_train, config, data, out, seed)


def do_predict(ckpt: Path, data: Path, out: Path) -> None:
    if not ckpt.exists():
        fail(f"checkpoint not found: {ckpt}")
    try:
        model, manifest = load_checkpoint(ckpt)
    except CheckpointError as exc:
        fail(str(exc), EXIT_STATE)
    pre = manifest.get("extra", {}).get("preprocessing", {})
    canonical = tuple(pre.get("canonical_shape", (256, 256, 128)))
    n_chunks = int(pre.get("n_chunks", 4))
    normalize = bool(pre.get("normalize", True))
    cases = _load_data(data)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        try:
            pred = predict_case(model, case, canonical, n_chunks, normalize)
        except ValueError as exc:
            fail(f"case {case.id}: {exc}", EXIT_STATE)
        save_mask(pred, out / f"{case.id}_pred.raw", case.image.spacing)
        plan_geometry(case.image.shape, canonical).save(out / f"{case.id}_geometry.json")
    write_index(out, cases)
    click.echo(f"wrote {len(cases)} predictions to {out}")


@main.command("predict")
@click.option("--ckpt", type=click.Path(path_type=Path), required=True)
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def cmd_predict(ckpt, data, out):
    """Predict a binary WMH mask per case at its original shape."""
    _run(do_predict, ckpt, data, out)


def do_evaluate(pred: Path, truth: Path, out: Path, connectivity: int, dilation: int) -> None:
    for d in (pred, truth):
        if not d.is_dir():
            fail(f"directory not found: {d}")
    pred_ids = set(list_case_ids(pred, "pred"))
    truth_ids = set(list_case_ids(truth, "truth"))
    unmatched = sorted(pred_ids ^ truth_ids)
    if unmatched:
        fail("unpaired case ids: " + ", ".join(unmatched))
    if not pred_ids:
        fail("no cases to evaluate")
    scanners = {**read_index(pred), **read_index(truth)}
    pairs = []
    try:
        for cid in sorted(pred_ids):
            p = load_mask(find_file(pred, f"{cid}_pred")).data
            t = load_mask(find_file(truth, f"{cid}_truth")).data
            pairs.append((cid, p, t, scanners.get(cid, "unknown")))
    except VolumeIOError as exc:
        fail(str(exc))
    report = evaluate_cases(pairs, connectivity=connectivity, dilation=dilation)
    report.write_csv(out)
    report.write_json(out.with_suffix(".json"))
    for line in report.scanner_lines():
        click.echo(line)
    click.echo(report.summary_line())
    if report.failures:
        fail("failed cases: " + ", ".join(cid for cid, _ in report.failures), EXIT_STATE)


@main.command("evaluate")
@click.option("--pred", type=click.Path(path_type=Path), required=True)
@click.option("--truth", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Report CSV path.")
@click.option("--connectivity", type=click.Choice(["6", "18", "26"]), default="26")
@click.option("--dilation", type=int, default=0, help="Prediction dilation before lesion matching.")
def cmd_evaluate(pred, truth, out, connectivity, dilation):
    """Compute DICE, AVD and lesion F1 against truth masks."""
    _run(do_evaluate, pred, truth, out, int(connectivity), dilation)


def load_suite(path: Path) -> dict:
    try:
        suite = json.loads(Path(path).read_text())
    except FileNotFoundError:
        fail(f"suite file not found: {path}")
    except json.JSONDecodeError as exc:
        fail(f"suite {path} is not valid JSON: {exc}")
    if not suite.get("variants"):
        fail("suite lists no variants")
    names = [v.get("name") for v in suite["variants"]]
    if None in names or len(set(names)) != len(names):
        fail("every variant needs a unique name")
    return suite


def do_ablate(suite_path: Path, data: Path, out: Path) -> None:
    suite = load_suite(suite_path)
    cases = _load_data(data)
    out.mkdir(parents=True, exist_ok=True)
    base_model = suite.get("base_model", {})
    rows, failed = [], []
    for variant in suite["variants"]:
        name = variant["name"]
        vdir = out / name
        vdir.mkdir(exist_ok=True)
        try:
            model_cfg = ModelConfig.from_dict({**base_model, **variant.get("model", {})})
            train_cfg = TrainConfig.from_dict({**suite.get("train", {}), **variant.get("train", {})})
            (vdir / "layers.txt").write_text("\n".join(layer_listing(model_cfg)) + "\n")
            model, trace = train(model_cfg, train_cfg, cases)
            trace.write_csv(vdir / "trace.csv")
            pairs = []
            for case in cases:
                pred = predict_case(model, case, train_cfg.canonical_shape, train_cfg.n_chunks, train_cfg.normalize)
                pairs.append((case.id, pred.data, case.truth.data, case.scanner))
            report = evaluate_cases(pairs)
            report.write_csv(vdir / "report.csv")
            o = report.overall
            rows.append({"variant": name, "dice": o.dice, "avd": o.avd, "f1": o.f1, "status": "ok"})
        except Exception as exc:  # noqa: BLE001 - recorded, suite continues
            log.error("variant %s failed: %s", name, exc)
            failed.append(name)
            rows.append({"variant": name, "dice": None, "avd": None, "f1": None, "status": f"failed: {exc}"})
        click.echo(f"{name}: {rows[-1]['status']}")
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["variant", "dice", "avd", "f1", "status"])
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    if failed:
        fail("variants failed: " + ", ".join(failed), EXIT_STATE)


@main.command("ablate")
@click.option("--suite", "suite_path", type=click.Path(path_type=Path), required=True)
@click.option("--data", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def cmd_ablate(suite_path, data, out):
    """Train and evaluate each named variant; writes ablation.csv."""
    _run(do_ablate, suite_path, data, out)


def _read_report_groups(path: Path) -> list[dict]:
    if path.suffix == ".json":
        rows = json.loads(path.read_text())["cases"]
        rows = [{"scanner": r["scanner"], "dice": r["dice"], "avd": r["avd"], "f1": r["f1"]} for r in rows]
    else:
        with path.open(newline="") as fh:
            lines = []
            for line in fh:
                if not line.strip():
                    break
                lines.append(line)
        rows = list(csv.DictReader(lines))
    if not rows:
        fail(f"report {path} has no case rows")
    groups: dict[str, list] = {}
    try:
        for r in rows:
            groups.setdefault(r["scanner"], []).append(r)
        out = []
        for name, rs in groups.items():
            avds = [float(r["avd"]) for r in rs if r["avd"] not in ("", None)]
            out.append({
                "scanner": name,
                "dice": float(np.mean([float(r["dice"]) for r in rs])),
                "avd": float(np.mean(avds)) if avds else None,
                "f1": float(np.mean([float(r["f1"]) for r in rs])),
            })
    except (KeyError, ValueError) as exc:
        fail(f"malformed report {path}: {exc}")
    return out


def do_plot(trace: Optional[Path], report: Optional[Path], out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if (trace is None) == (report is None):
        fail("give exactly one of --trace or --report")
    src = trace or report
    if not src.exists():
        fail(f"file not found: {src}")
    fig, ax = plt.subplots(figsize=(6, 4))
    if trace is not None:
        try:
            t = LossTrace.read_csv(trace)
        except (KeyError, ValueError, TypeError) as exc:
            fail(f"malformed trace {trace}: {exc}")
        if not t.records:
            fail(f"trace {trace} is empty")
        steps = [r.step for r in t.records]
        series = {"total": t.totals, "ce": [r.ce for r in t.records], "dice": [r.dice for r in t.records]}
        for name, ys in series.items():
            ax.plot(steps, ys, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        sidecar = {"kind": "trace", "steps": steps, **series}
    else:
        groups = _read_report_groups(report)
        x = np.arange(len(groups))
        width = 0.25
        for i, metric in enumerate(("dice", "avd", "f1")):
            vals = [g[metric] if g[metric] is not None else 0.0 for g in groups]
            ax.bar(x + (i - 1) * width, vals, width, label=metric.upper())
        ax.set_xticks(x, [g["scanner"] for g in groups], rotation=20, ha="right")
        ax.legend()
        sidecar = {"kind": "report", "groups": groups}
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
    click.echo(f"wrote {out}")


@main.command("plot")
@click.option("--trace", type=click.Path(path_type=Path), default=None)
@click.option("--report", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def cmd_plot(trace, report, out):
    """Loss curve from a trace CSV, or per-scanner bars from a report."""
    _run(do_plot, trace, report, out)


@main.group("phantom")
def phantom_group():
    """Synthetic phantom data."""


def do_phantom_make(out: Path, n: int, seed: int, config: Optional[Path]) -> None:
    if n < 1:
        fail("--n must be >= 1")
    cfg = PhantomConfig()
    if config is not None:
        try:
            cfg = PhantomConfig.from_dict(json.loads(config.read_text()))
        except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
            fail(f"bad phantom config {config}: {exc}")
    cases = generate_dataset(n, cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, out)
    write_index(out, cases)
    click.echo(f"wrote {n} phantom cases to {out}")


@phantom_group.command("make")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--n", type=int, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--config", type=click.Path(path_type=Path), default=None, help="PhantomConfig JSON.")
def cmd_phantom_make(out, n, seed, config):
    """Write N phantom cases in the raw+JSON format."""
    _run(do_phantom_make, out, n, seed, config)


if __name__ == "__main__":
    main()
