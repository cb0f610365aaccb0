"""``uqvol`` command line.

Exit codes: 0 success, 1 failure (or partial failure of a pipeline run),
2 invalid invocation. Errors go to stderr as ``uqvol: error: <kind>: <message>``.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .aggregate import aggregate as aggregate_stack
from .calibration import ece_report
from .losses import LOSSES, ClassWeights, class_weights, finite_difference_check, one_hot
from .metrics import score_report
from .pipeline import load_config, run_pipeline
from .ravu import curve_rows, ravu_curve, region_partition
from .report import atomic_write_text, bundle_digest, csv_text, write_manifest
from .stats import PairedSample, wilcoxon_signed_rank
from .synth import SynthSpec, generate
from .volume import LabelVolume, McStack, ProbVolume, ScalarMap, clip_hu, crop, read_bundle, resample, write_bundle


def _triple(kind=float):
    def convert(ctx, param, value):
        if value is None:
            return None
        try:
            parts = tuple(kind(v) for v in value.split(","))
        except ValueError:
            raise click.BadParameter(f"expected three comma-separated values, got {value!r}")
        if len(parts) != 3:
            raise click.BadParameter(f"expected three comma-separated values, got {value!r}")
        return parts

    return convert


def _fail(exc: Exception) -> None:
    click.echo(f"uqvol: error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, SystemExit):
            raise
        except Exception as exc:
            _fail(exc)

    return wrapper


def _read(path, kind):
    vol = read_bundle(path)
    if not isinstance(vol, kind):
        raise click.BadParameter(f"{path} is a {vol.kind} bundle, expected {kind.kind}")
    return vol


def _manifest_for(out: Path, command: str, flags: dict, inputs: dict, outputs, decisions=None):
    write_manifest(
        out.with_name(out.name + ".manifest.json") if out.suffix else out / "manifest.json",
        command,
        {k: str(v) if isinstance(v, Path) else v for k, v in flags.items()},
        {k: bundle_digest(v) for k, v in inputs.items()},
        outputs,
        decisions or {},
    )


@click.group()
@click.version_option(__version__, prog_name="uqvol")
@click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="Parallel workers.")
@click.option("--seed", default=None, type=int, help="Override the random seed where one is used.")
@click.pass_context
def main(ctx, jobs, seed):
    """Evaluate Monte-Carlo segmentation outputs: calibration, uncertainty and accuracy."""
    ctx.obj = {"jobs": jobs, "seed": seed}


@main.command()
@click.option("--stack", "stack_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def aggregate(stack_dir, out):
    """Average a stack and write mean-prob, prediction and entropy bundles."""
    stack = _read(stack_dir, McStack)
    result = aggregate_stack(stack)
    write_bundle(result.mean_prob, out / "mean_prob")
    write_bundle(result.prediction, out / "prediction")
    write_bundle(result.entropy, out / "entropy")
    outputs = [f for d in ("mean_prob", "prediction", "entropy") for f in sorted((out / d).iterdir())]
    _manifest_for(out, "aggregate", {"stack": stack_dir}, {"stack": stack_dir}, outputs)
    click.echo(f"aggregated M={stack.M} samples into {out}")


def _write_table(out: Path, header, rows, doc):
    if out.suffix == ".json":
        atomic_write_text(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        atomic_write_text(out, csv_text(header, rows))


@main.command()
@click.option("--pred", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--metric", type=click.Choice(["dice", "hd95"]), default="dice", show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="report.json or report.csv")
@guarded
def score(pred, gt, metric, out):
    """Per-class DICE or HD95 with the mean over classes."""
    p, g = _read(pred, LabelVolume), _read(gt, LabelVolume)
    rep = score_report(p, g, metric)
    names = p.meta.class_names
    rows = [(c, names[c], rep.per_class[c], rep.flags.get(c, "")) for c in rep.included_classes]
    rows.append(("mean", "mean", rep.mean, ""))
    doc = {
        "metric": metric,
        "per_class": {names[c]: rep.per_class[c] for c in rep.included_classes},
        "flags": {names[c]: f for c, f in rep.flags.items()},
        "mean": rep.mean,
    }
    _write_table(out, ["class_id", "class_name", metric, "flag"], rows, doc)
    decisions = {"background": "excluded", "empty_both_dice": 1.0}
    if metric == "hd95":
        decisions["hd95"] = "pooled symmetric 6-connected boundary distances, linear percentile"
    _manifest_for(out, "score", {"metric": metric}, {"pred": pred, "gt": gt}, [out], decisions)
    click.echo(f"mean {metric}: {rep.mean}")


@main.command()
@click.option("--mean-prob", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--pred", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--bins", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--selection", type=click.Choice(["predicted", "all"]), default="predicted", show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path), help="report.json or report.csv")
@guarded
def ece(mean_prob, pred, gt, bins, selection, out):
    """Per-class expected calibration error; reliability bins go to <out>_reliability.csv."""
    sel = "predicted-class" if selection == "predicted" else "class-channel-all"
    mp, p, g = _read(mean_prob, ProbVolume), _read(pred, LabelVolume), _read(gt, LabelVolume)
    rep = ece_report(mp, p, g, bins, sel)
    names = mp.meta.class_names
    rows = [
        (c, names[c], t.n_selected, t.ece_weighted, t.ece_paper, ";".join(t.flags))
        for c, t in rep.tables.items()
    ]
    rows.append(("mean", "mean", None, rep.mean_weighted, rep.mean_paper, ""))
    bin_rows = [
        (c, names[c], b.lo, b.hi, b.count, b.mean_conf, b.accuracy)
        for c, t in rep.tables.items()
        for b in t.bins
    ]
    doc = {
        "bins": bins,
        "selection": sel,
        "headline": "ece_weighted",
        "classes": {
            names[c]: {"ece_weighted": t.ece_weighted, "ece_paper": t.ece_paper, "n_selected": t.n_selected}
            for c, t in rep.tables.items()
        },
        "mean_weighted": rep.mean_weighted,
        "mean_paper": rep.mean_paper,
    }
    _write_table(out, ["class_id", "class_name", "n_selected", "ece_weighted", "ece_paper", "flag"], rows, doc)
    rel = out.with_name(out.stem + "_reliability.csv")
    atomic_write_text(
        rel, csv_text(["class_id", "class_name", "lo", "hi", "count", "mean_conf", "accuracy"], bin_rows)
    )
    _manifest_for(
        out,
        "ece",
        {"bins": bins, "selection": sel},
        {"mean_prob": mean_prob, "pred": pred, "gt": gt},
        [out, rel],
        {
            "ece_headline": "ece_weighted",
            "ece_paper": "unweighted mean over non-empty bins",
            "ece_selection": sel,
            "ece_bins": bins,
        },
    )
    click.echo(f"mean ece_weighted: {rep.mean_weighted}  mean ece_paper: {rep.mean_paper}")


@main.command()
@click.option("--entropy", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--pred", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--filter", "filter_dims", default="3,3,1", show_default=True, callback=_triple(int))
@click.option("--roi", default="whole", show_default=True, help="whole or band:<radius>")
@click.option("--thresholds", default="auto:50", show_default=True, help="auto:<n>[,<tmax>] or t1,t2,...")
@click.option("--regions-out", type=click.Path(path_type=Path), help="Write the region mask as a label bundle.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@guarded
def ravu(entropy, pred, gt, filter_dims, roi, thresholds, regions_out, out):
    """R-AvU curve: p(u|i) and p(u|a,~a) over an entropy threshold sweep."""
    h, p, g = _read(entropy, ScalarMap), _read(pred, LabelVolume), _read(gt, LabelVolume)
    regions = region_partition(p, g, filter_dims, roi)
    curve = ravu_curve(h, regions, thresholds)
    header = ["threshold", "n_ac", "n_au", "n_ic", "n_iu", "p_u_i", "p_u_a"]
    atomic_write_text(out, csv_text(header, curve_rows(curve)))
    outputs = [out]
    if regions_out:
        write_bundle(regions.as_label_volume(), regions_out)
    _manifest_for(
        out,
        "ravu",
        {"filter": list(filter_dims), "roi": regions.roi, "thresholds": thresholds},
        {"entropy": entropy, "pred": pred, "gt": gt},
        outputs,
        {"uncertain_rule": "entropy > threshold", "near_accurate": "pooled with accurate", "roi": regions.roi},
    )
    for flag in curve.flags:
        click.echo(f"warning: {flag}", err=True)
    click.echo(f"wrote {len(curve.thresholds)} thresholds to {out}")


@main.command()
@click.option("--prob", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--loss", type=click.Choice(sorted(LOSSES)), default="dice", show_default=True)
@click.option("--weights", default="auto", show_default=True, help="auto or comma-separated per-class weights")
@click.option("--fd-samples", default=64, show_default=True, type=click.IntRange(min=1))
@click.pass_context
@guarded
def losscheck(ctx, prob, gt, loss, weights, fd_samples):
    """Evaluate a loss on a volume and check its gradient by central differences."""
    pv, g = _read(prob, ProbVolume), _read(gt, LabelVolume)
    ids = tuple(range(pv.meta.n_classes))
    if weights == "auto":
        w = class_weights([g], ids)
    else:
        w = ClassWeights(ids, [float(x) for x in weights.split(",")])
    y = one_hot(g.voxels, ids)
    p = pv.channels.astype(np.float64)
    fn = LOSSES[loss]
    value = fn(p, y, w).value
    rng = np.random.Generator(np.random.Philox(ctx.obj["seed"] or 0))
    idx = rng.choice(p.size, size=min(fd_samples, p.size), replace=False)
    err = finite_difference_check(fn, p, y, w, indices=idx)
    click.echo(f"loss={loss} value={value!r} max_rel_fd_error={err!r} checked={len(idx)}")


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.pass_context
@guarded
def synth(ctx, spec_path, out):
    """Generate gt, stack and pred bundles from a synthetic spec."""
    with open(spec_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if ctx.obj["seed"] is not None:
        doc["seed"] = ctx.obj["seed"]
    gt, stack, pred = generate(SynthSpec.from_dict(doc))
    write_bundle(gt, out / "gt")
    write_bundle(stack, out / "stack")
    write_bundle(pred, out / "pred")
    click.echo(f"wrote gt, stack (M={stack.M}) and pred to {out}")


@main.group()
def stats():
    """Paired statistical comparisons."""


def _read_scores(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    col = header.index("score") if "score" in header else 1
    return {r[0]: float(r[col]) for r in body if r}


@stats.command()
@click.option("--a", "a_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--b", "b_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--mode", type=click.Choice(["exact", "approx"]), default="exact", show_default=True)
@guarded
def wilcoxon(a_path, b_path, mode):
    """Wilcoxon signed-rank test on two CSVs of per-patient scores (label,score)."""
    a, b = _read_scores(a_path), _read_scores(b_path)
    labels = [k for k in a if k in b]
    if not labels:
        raise ValueError("the two score files share no patient labels")
    sample = PairedSample(labels, [a[k] for k in labels], [b[k] for k in labels])
    r = wilcoxon_signed_rank(sample, "exact" if mode == "exact" else "normal-approx")
    flags = ",".join(r.flags) or "-"
    click.echo(f"W={r.W!r} n_eff={r.n_eff} p_two_sided={r.p_two_sided!r} mode={r.mode} flags={flags}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--jobs", default=None, type=click.IntRange(min=1), help="Overrides the global --jobs.")
@click.pass_context
@guarded
def pipeline(ctx, config_path, out, jobs):
    """Run the full evaluation over every model x patient in a config."""
    config = load_config(config_path)
    if ctx.obj["seed"] is not None:
        config["seed"] = ctx.obj["seed"]
    result = run_pipeline(config, out, jobs=jobs or ctx.obj["jobs"])
    for cell in result.failures:
        click.echo(f"uqvol: error: cell {cell.model}/{cell.patient}: {cell.error}", err=True)
    n = len(result.cells)
    click.echo(f"{n - len(result.failures)}/{n} cells succeeded; results in {out}")
    if result.failures:
        sys.exit(1)


@main.command()
@click.option("--in", "src", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--clip", default=None, help="lo,hi Hounsfield window, e.g. -125,225")
@click.option("--crop-center", default=None, callback=_triple(int))
@click.option("--crop-size", default=None, callback=_triple(int))
@click.option("--resample", "new_spacing", default=None, callback=_triple(float))
@click.option("--mode", type=click.Choice(["nearest", "trilinear"]), default=None)
@guarded
def preprocess(src, out, clip, crop_center, crop_size, new_spacing, mode):
    """Resample, crop and clip a bundle (in that order)."""
    vol = read_bundle(src)
    if new_spacing:
        vol = resample(vol, new_spacing, mode or ("nearest" if isinstance(vol, LabelVolume) else "trilinear"))
    if crop_center or crop_size:
        if not (crop_center and crop_size):
            raise click.UsageError("--crop-center and --crop-size go together")
        vol = crop(vol, crop_center, crop_size)
    if clip:
        if not isinstance(vol, ScalarMap):
            raise click.UsageError("--clip applies to scalar bundles only")
        lo, hi = (float(x) for x in clip.split(","))
        vol = clip_hu(vol, lo, hi)
    write_bundle(vol, out)
    click.echo(f"wrote {vol.kind} bundle with dims {vol.meta.dims} to {out}")


if __name__ == "__main__":
    main()
