"""End-to-end evaluation over models x patients.

Config (JSON)::

    {
      "patients": {
        "pat01": {"gt": "data/pat01/gt"},                  # ground-truth bundle
        "pat02": {"synth": {"dims": [...], "shapes": [...], "seed": 2}}
      },
      "models": {
        "DropOut-CE": {"stacks": {"pat01": "data/pat01/dropout_ce"}},
        "FlipOut-CE": {"synth": {"calib": {...}, "unc": {...}, "seed": 5}}
      },
      "options": {"bins": 10, "selection": "predicted-class", "filter": [3, 3, 1],
                  "roi": "whole", "thresholds": "auto:50"},
      "seed": 0
    }

A synthetic cell merges the patient's synth document with the model's
(model keys win, nested dicts merged) and seeds it with
``[seed, patient seed, model seed]``. Ground truth for a synthetic patient is
the rasterized patient shapes, shared by every model.
"""

from __future__ import annotations

import copy
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


from .aggregate import aggregate
from .calibration import ece_report
from .metrics import score_report
from .ravu import curve_rows, pool_curves, ravu_curve, ravu_report, region_partition
from .report import atomic_write_text, bundle_digest, csv_text, json_digest, write_manifest
from .stats import PairedSample, wilcoxon_signed_rank
from .synth import SynthSpec, generate, rasterize
from .volume import LabelVolume, McStack, read_bundle

DEFAULT_OPTIONS = {
    "bins": 10,
    "selection": "predicted-class",
    "filter": [3, 3, 1],
    "roi": "whole",
    "thresholds": "auto:50",
}

RESULT_FILES = ("dice.csv", "hd95.csv", "ece.csv", "ravu.csv", "ravu_patients.csv", "wilcoxon.csv")


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    config["_base_dir"] = str(path.parent.resolve())
    return config


def _resolve(config: dict, p) -> Path:
    p = Path(p)
    if not p.is_absolute() and config.get("_base_dir"):
        p = Path(config["_base_dir"]) / p
    return p


def _synth_doc(config: dict, patient: str, model: str) -> dict:
    pdoc = config["patients"][patient]["synth"]
    mdoc = config["models"][model].get("synth", {})
    doc = deep_merge(pdoc, {k: v for k, v in mdoc.items() if k != "seed"})
    doc["seed"] = [int(config.get("seed", 0)), int(pdoc.get("seed", 0)), int(mdoc.get("seed", 0))]
    return doc


def _load_gt(config: dict, patient: str) -> LabelVolume:
    p = config["patients"][patient]
    if "gt" in p:
        vol = read_bundle(_resolve(config, p["gt"]))
        if not isinstance(vol, LabelVolume):
            raise ValueError(f"ground truth for {patient} is not a label bundle")
        return vol
    spec = SynthSpec.from_dict(p["synth"])
    return LabelVolume(spec.meta, rasterize(spec))


def _load_stack(config: dict, patient: str, model: str) -> McStack:
    m = config["models"][model]
    if "stacks" in m:
        if patient not in m["stacks"]:
            raise ValueError(f"model {model} has no stack for patient {patient}")
        vol = read_bundle(_resolve(config, m["stacks"][patient]))
        if not isinstance(vol, McStack):
            raise ValueError(f"{m['stacks'][patient]} is not a stack bundle")
        return vol
    if "synth" not in config["patients"][patient]:
        raise ValueError(f"model {model} is synthetic but patient {patient} has no synth spec")
    _, stack, _ = generate(SynthSpec.from_dict(_synth_doc(config, patient, model)))
    return stack


def _digest_or_note(fn) -> str:
    # a missing input is reported by its cell; the manifest just notes it
    try:
        return fn()
    except Exception as exc:
        return f"unavailable: {type(exc).__name__}"


def input_digests(config: dict) -> dict:
    out = {}
    for patient, p in config["patients"].items():
        if "gt" in p:
            out[f"gt/{patient}"] = _digest_or_note(lambda: bundle_digest(_resolve(config, p["gt"])))
        else:
            out[f"gt/{patient}"] = json_digest(p.get("synth"))
    for model, m in config["models"].items():
        for patient in config["patients"]:
            key = f"stack/{model}/{patient}"
            if "stacks" in m and patient in m["stacks"]:
                path = m["stacks"][patient]
                out[key] = _digest_or_note(lambda: bundle_digest(_resolve(config, path)))
            elif "synth" in m and "synth" in config["patients"][patient]:
                out[key] = json_digest(_synth_doc(config, patient, model))
    return out


def validate_config(config: dict) -> None:
    for key in ("patients", "models"):
        if not isinstance(config.get(key), dict) or not config[key]:
            raise ValueError(f"config needs a non-empty '{key}' mapping")
    for patient, p in config["patients"].items():
        if "gt" not in p and "synth" not in p:
            raise ValueError(f"patient {patient} needs 'gt' or 'synth'")
    for model, m in config["models"].items():
        if "stacks" not in m and "synth" not in m:
            raise ValueError(f"model {model} needs 'stacks' or 'synth'")
    unknown = set(config.get("options", {})) - set(DEFAULT_OPTIONS)
    if unknown:
        raise ValueError(f"unknown pipeline options: {sorted(unknown)}")


@dataclass
class CellResult:
    model: str
    patient: str
    class_names: tuple = ()
    dice: dict = field(default_factory=dict)
    dice_flags: dict = field(default_factory=dict)
    dice_mean: float | None = None
    hd95: dict = field(default_factory=dict)
    hd95_flags: dict = field(default_factory=dict)
    hd95_mean: float | None = None
    ece: dict = field(default_factory=dict)
    ece_mean: float | None = None
    ece_paper_mean: float | None = None
    curve: object = None
    error: str | None = None


def evaluate_cell(config: dict, model: str, patient: str) -> CellResult:
    """Run aggregate -> scores -> ECE -> R-AvU for one model x patient; never raises."""
    opts = {**DEFAULT_OPTIONS, **config.get("options", {})}
    cell = CellResult(model, patient)
    try:
        gt = _load_gt(config, patient)
        stack = _load_stack(config, patient, model)
        if stack.meta != gt.meta:
            raise ValueError("stack and ground truth grids differ")
        agg = aggregate(stack)
        pred = agg.prediction
        cell.class_names = gt.meta.class_names
        d = score_report(pred, gt, "dice")
        cell.dice, cell.dice_flags, cell.dice_mean = d.per_class, d.flags, d.mean
        h = score_report(pred, gt, "hd95")
        cell.hd95, cell.hd95_flags, cell.hd95_mean = h.per_class, h.flags, h.mean
        e = ece_report(agg.mean_prob, pred, gt, int(opts["bins"]), opts["selection"])
        cell.ece = {
            c: (t.n_selected, t.ece_weighted, t.ece_paper, ";".join(t.flags)) for c, t in e.tables.items()
        }
        cell.ece_mean, cell.ece_paper_mean = e.mean_weighted, e.mean_paper
        regions = region_partition(pred, gt, opts["filter"], opts["roi"])
        cell.curve = ravu_curve(agg.entropy, regions, opts["thresholds"])
    except Exception as exc:
        cell.error = f"{type(exc).__name__}: {exc}"
        cell.curve = None
    return cell


def _cell_job(args):
    config, model, patient = args
    return evaluate_cell(config, model, patient)


@dataclass
class PipelineResult:
    out_dir: Path
    cells: list
    manifest: dict

    @property
    def failures(self) -> list:
        return [c for c in self.cells if c.error]


def _score_rows(cells, attr: str):
    for c in cells:
        if c.error:
            continue
        scores, flags = getattr(c, attr), getattr(c, attr + "_flags")
        for cid in sorted(scores):
            yield c.model, c.patient, cid, c.class_names[cid], scores[cid], flags.get(cid, "")
        yield c.model, c.patient, "mean", "mean", getattr(c, attr + "_mean"), ""


def _wilcoxon_rows(cells, models, patients):
    by_key = {(c.model, c.patient): c for c in cells if not c.error}
    for metric in ("dice_mean", "hd95_mean", "ece_mean"):
        for a, b in itertools.combinations(models, 2):
            pairs = [
                (p, getattr(by_key[(a, p)], metric), getattr(by_key[(b, p)], metric))
                for p in patients
                if (a, p) in by_key and (b, p) in by_key
            ]
            pairs = [t for t in pairs if t[1] is not None and t[2] is not None]
            if not pairs:
                yield metric, a, b, 0, 0, None, None, "", "no_pairs"
                continue
            sample = PairedSample([t[0] for t in pairs], [t[1] for t in pairs], [t[2] for t in pairs])
            r = wilcoxon_signed_rank(sample, "exact")
            yield metric, a, b, len(pairs), r.n_eff, r.W, r.p_two_sided, r.mode, ";".join(r.flags)


def run_pipeline(config: dict, out_dir, jobs: int = 1, timestamp: str | None = None) -> PipelineResult:
    out_dir = Path(out_dir)
    validate_config(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    opts = {**DEFAULT_OPTIONS, **config.get("options", {})}
    models = list(config["models"])
    patients = list(config["patients"])
    tasks = [(config, m, p) for m in models for p in patients]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_cell_job, tasks))
    else:
        cells = [_cell_job(t) for t in tasks]

    files = {}
    header = ["model", "patient", "class_id", "class_name", "score", "flag"]
    files["dice.csv"] = csv_text(header, _score_rows(cells, "dice"))
    files["hd95.csv"] = csv_text(header, _score_rows(cells, "hd95"))

    ece_rows = []
    for c in cells:
        if c.error:
            continue
        for cid in sorted(c.ece):
            n, w, p, flag = c.ece[cid]
            ece_rows.append((c.model, c.patient, cid, c.class_names[cid], n, w, p, flag))
        ece_rows.append((c.model, c.patient, "mean", "mean", None, c.ece_mean, c.ece_paper_mean, ""))
    files["ece.csv"] = csv_text(
        ["model", "patient", "class_id", "class_name", "n_selected", "ece_weighted", "ece_paper", "flag"],
        ece_rows,
    )

    pooled = {}
    long_rows = []
    for m in models:
        curves = [c.curve for c in cells if c.model == m and c.curve is not None]
        for c in cells:
            if c.model == m and c.curve is not None:
                long_rows += [(m, c.patient) + r for r in curve_rows(c.curve)]
        if curves:
            pooled[m] = pool_curves(curves)
            long_rows += [(m, "pooled") + r for r in curve_rows(pooled[m])]
    if pooled:
        files["ravu.csv"] = ravu_report(pooled)
    else:
        files["ravu.csv"] = csv_text(["threshold"], [])
    files["ravu_patients.csv"] = csv_text(
        ["model", "patient", "threshold", "n_ac", "n_au", "n_ic", "n_iu", "p_u_i", "p_u_a"], long_rows
    )
    files["wilcoxon.csv"] = csv_text(
        ["metric", "model_a", "model_b", "n_pairs", "n_eff", "W", "p_two_sided", "mode", "flags"],
        _wilcoxon_rows(cells, models, patients),
    )
    for name in RESULT_FILES:
        atomic_write_text(out_dir / name, files[name])

    diagnostics = [
        {"model": c.model, "patient": c.patient, "error": c.error} for c in cells if c.error
    ]
    public_config = {k: v for k, v in config.items() if not k.startswith("_")}
    manifest = write_manifest(
        out_dir / "manifest.json",
        command="pipeline",
        flags={"config": public_config, "jobs": jobs},
        inputs=input_digests(config),
        outputs=[out_dir / n for n in RESULT_FILES],
        decisions={
            "ece_headline": "ece_weighted",
            "ece_selection": opts["selection"],
            "ece_bins": int(opts["bins"]),
            "roi": opts["roi"],
            "thresholds": opts["thresholds"],
            "opening_filter": list(opts["filter"]),
            "uncertain_rule": "entropy > threshold",
            "ravu_pooling": "per-patient curves plus voxel-pooled aggregate",
            "wilcoxon": "exact, two-sided, zero differences discarded, per-patient means",
        },
        diagnostics=diagnostics,
        timestamp=timestamp,
    )
    return PipelineResult(out_dir, cells, manifest)


def synthetic_cohort_config(
    n_patients: int = 4,
    deltas=(0.0, 0.1, 0.2),
    dims=(160, 160, 48),
    n_classes: int = 10,
    M: int = 30,
    spacing=(0.8, 0.8, 2.5),
    seed: int = 0,
) -> dict:
    """Config for a synthetic cohort: one overconfident model per ``delta``.

    Each patient gets ``n_classes - 1`` ellipsoidal organs at jittered
    positions plus one false-positive blob, one false-negative blob and a
    one-voxel boundary shift. Model ``k`` emits confidences uniform on
    [0.6, 1] next to organ boundaries (1 elsewhere) with accuracy
    ``confidence - deltas[k]`` there, and high entropy on the injected errors.
    """
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    # organ sizes are tuned for 160x160x48 and scaled for other grids
    s_xy, s_z = min(nx, ny) / 160.0, nz / 48.0

    def scaled(r, s):
        return max(1, int(round(r * s)))

    patients = {}
    for p in range(n_patients):
        shapes = []
        for c in range(1, n_classes):
            angle = 2 * np.pi * (c - 1) / max(1, n_classes - 1)
            radii = [
                scaled(rng.integers(6, 12), s_xy),
                scaled(rng.integers(6, 12), s_xy),
                scaled(rng.integers(3, 6), s_z),
            ]
            wobble = scaled(4, s_xy)
            center = [
                int(nx / 2 + 0.3 * nx * np.cos(angle) + rng.integers(-wobble, wobble + 1)),
                int(ny / 2 + 0.3 * ny * np.sin(angle) + rng.integers(-wobble, wobble + 1)),
                int(nz / 2 + rng.integers(-nz // 6, nz // 6 + 1)),
            ]
            shapes.append({"class_id": c, "geometry": "ellipsoid", "center": center, "radii": radii})
        fp_shape = shapes[int(rng.integers(0, len(shapes)))]
        fn_shape = shapes[int(rng.integers(0, len(shapes)))]
        shift_class = int(rng.integers(1, n_classes))
        # false-positive blob just outside its organ, towards the volume centre
        cx, cy, cz = fp_shape["center"]
        step = fp_shape["radii"][0] + scaled(4, s_xy)
        fp_loc = [cx - step if cx > nx // 2 else cx + step, cy, cz]
        errors = [
            {"kind": "blob_fp", "class_id": fp_shape["class_id"], "magnitude_voxels": [7, 7, 3],
             "location": fp_loc},
            {"kind": "blob_fn", "class_id": fn_shape["class_id"], "magnitude_voxels": [5, 5, 3],
             "location": fn_shape["center"]},
            {"kind": "boundary_shift", "class_id": shift_class, "magnitude_voxels": 1, "direction": [1, 0, 0]},
        ]
        patients[f"patient_{p + 1:02d}"] = {
            "synth": {
                "dims": list(dims),
                "spacing": list(spacing),
                "n_classes": n_classes,
                "shapes": shapes,
                "errors": errors,
                "seed": p + 1,
            }
        }
    models = {}
    for k, delta in enumerate(deltas):
        models[f"model_delta_{delta:g}"] = {
            "synth": {
                "calib": {
                    "mode": "overconfident" if delta > 0 else "calibrated",
                    "delta": float(delta),
                    "confidence": {"dist": "boundary", "low": 0.6, "high": 1.0, "width": 1},
                    "apply_to": "band",
                },
                "unc": {"on_errors": "high", "on_correct": "low", "jitter": 0.05, "M": M},
                "seed": 100 + k,
            }
        }
    return {"patients": patients, "models": models, "options": dict(DEFAULT_OPTIONS), "seed": seed}
