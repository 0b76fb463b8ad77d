"""Implementations of the ``train``, ``adapt``, ``eval`` and ``report`` commands.

Each command takes a resolved config (see :mod:`tea.config`) and writes its
outputs plus the resolved config into ``output_dir``. Results documents are
JSON with sorted keys; apart from ``wall_clock_s`` they are byte-identical
for identical configs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .adapt import adapt_run, predict
from .energy import EnergyView, energy_marginal, softmax
from .metrics import (CorruptionGrid, ReliabilityBins, accuracy, average_accuracy, ece_mce,
                      energy_summary, mce, reliability)
from .nn import TRAIN_STATS
from .persist import export_sample_grid, load_checkpoint, save_checkpoint
from .rng import RngStream
from .sgld import sgld_chain
from .shiftbench import (CorruptionSpec, LabeledDataset, Mixture2DSpec, Shift2D, batches,
                         corrupt, gen_glyphs, gen_mixture2d, load_idx)
from .zoo import mlp2d, small_cnn, train_source

log = logging.getLogger(__name__)

RESULTS_SCHEMA = "tea.results"
RESULTS_VERSION = 1


class RunError(RuntimeError):
    """Input problems detected at run time (exit code 2)."""


# --- datasets and models ------------------------------------------------------

def _mixture_spec(d):
    cov = [[d["std"] ** 2, 0.0], [0.0, d["std"] ** 2]]
    s = d["shift"]
    shift = Shift2D(s["rotation_deg"], tuple(s["translation"]), s["scale"], s["noise_std"])
    return Mixture2DSpec(tuple(tuple(m) for m in d["means"]), tuple(cov for _ in d["means"]),
                         d["n_per_class"], shift)


def _check_paths(d, keys):
    for k in keys:
        p = d[k]
        if p is None or not os.path.exists(p):
            raise config_mod.ConfigError(f"data path data.{k} is missing or does not exist: {p}")


def num_classes(cfg):
    d = cfg["data"]
    if d["kind"] == "mixture2d":
        return len(d["means"])
    if d["kind"] == "glyphs":
        return d["num_classes"]
    return int(load_dataset(cfg, "train").labels.max()) + 1


def load_dataset(cfg, split, shifted=False):
    """``train`` or ``test`` split; ``shifted`` applies the configured test shift."""
    d = cfg["data"]
    root = RngStream(cfg["seed"]).child("data")
    if d["kind"] == "mixture2d":
        spec = _mixture_spec(d)
        if split == "test" and not shifted:
            spec = Mixture2DSpec(spec.means, spec.covs, spec.n_per_class)
        return gen_mixture2d(spec, split, root)
    if d["kind"] == "glyphs":
        n = d["n_train"] if split == "train" else d["n_test"]
        ds = gen_glyphs(n, root.child(split), d["image_size"], d["num_classes"])
    else:
        keys = ("train_images", "train_labels") if split == "train" else ("test_images", "test_labels")
        _check_paths(d, keys)
        ds = load_idx(d[keys[0]], d[keys[1]])
        if ds.inputs.ndim == 3:
            ds = LabeledDataset(ds.inputs[:, None], ds.labels, ds.provenance)
    if split == "test" and shifted and d["corruption"]:
        c = d["corruption"]
        spec = CorruptionSpec(c["kind"], c["severity"])
        x = corrupt(ds.inputs, spec, RngStream(cfg["seed"]).child("corrupt"))
        ds = LabeledDataset(x, ds.labels, dict(ds.provenance, corruption=c["kind"],
                                                severity=c["severity"]))
    return ds


def build_layers(cfg):
    m = cfg["model"]
    k = num_classes(cfg)
    if m["arch"] == "mlp2d":
        return mlp2d(m["hidden"], k, m["norm"], m["groups"])
    size = cfg["data"]["image_size"]
    if cfg["data"]["kind"] == "idx":
        size = load_dataset(cfg, "train").inputs.shape[-1]
    return small_cnn(size, tuple(m["channels"]), k, m["norm"], m["groups"])


def _check_model(model, cfg):
    layers, shape = build_layers(cfg)
    if tuple(layers) != model.layers or tuple(shape) != model.input_shape:
        raise RunError("checkpoint topology does not match the configured model")


# --- outputs ------------------------------------------------------------------

def _out_dir(cfg):
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _rounded(metrics):
    out = {}
    for k, v in metrics.items():
        if v is None:
            out[k] = None
        elif k.startswith("mce_corruption"):
            out[k] = round(v, 2)
        else:
            out[k] = round(100.0 * v, 2)
    return out


def dump_doc(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_doc(doc, path):
    with open(path, "w") as f:
        f.write(dump_doc(doc))


def _new_doc(cfg, command, method):
    return {"schema": RESULTS_SCHEMA, "schema_version": RESULTS_VERSION, "command": command,
            "config_hash": config_mod.config_hash(cfg), "method": method, "seed": cfg["seed"]}


def _trace_rows(trace):
    return [{"batch": r.batch, "step": r.step, "loss": r.loss, "e_test": r.e_test,
             "e_neg": r.e_neg, "acc": r.acc, "rejected": r.rejected} for r in trace.records]


# --- commands -----------------------------------------------------------------

def cmd_train(cfg):
    out = _out_dir(cfg)
    train = load_dataset(cfg, "train")
    layers, shape = build_layers(cfg)
    t = cfg["train"]
    model = train_source(layers, shape, train, RngStream(cfg["seed"]).child("train"),
                         t["epochs"], t["batch_size"], t["lr"])
    save_checkpoint(model, out / "checkpoint.teac")
    clean = load_dataset(cfg, "test", shifted=False)
    acc = accuracy(predict(model, clean.inputs, "SOURCE"), clean.labels)
    write_doc({"clean_accuracy": acc, "config_hash": config_mod.config_hash(cfg)},
              out / "train.json")
    print(f"clean test accuracy: {acc:.4f}")
    return model, acc


def _adapt_batches(cfg, ds, batch_size, salt):
    bs = batch_size or len(ds)
    seed = RngStream(cfg["seed"]).child("shuffle", *salt).seed
    return batches(ds, bs, shuffle_seed=seed)


def _run_method(model, cfg, ds, salt):
    acfg = config_mod.adapt_config(cfg)
    bl = _adapt_batches(cfg, ds, cfg["adapt"]["batch_size"], salt)
    rng = RngStream(cfg["seed"]).child("adapt", *salt)
    adapted, trace = adapt_run(model, [b[0] for b in bl], acfg, rng, labels=[b[1] for b in bl])
    logits = np.concatenate(trace.logits)
    labels = np.concatenate([b[1] for b in bl])
    return adapted, trace, logits, labels


def _source_energy_trace(model, ds):
    # energy of the unadapted model on the test set, for reference in traces
    return float(energy_marginal(predict(model, ds.inputs, "SOURCE")).mean())


def cmd_adapt(cfg, checkpoint, dump_samples=False):
    t0 = time.perf_counter()
    model = load_checkpoint(checkpoint)
    _check_model(model, cfg)
    if dump_samples and (len(model.input_shape) != 3 or model.input_shape[0] != 1):
        raise RunError("--dump-samples needs single-channel image models")
    out = _out_dir(cfg)
    ds = load_dataset(cfg, "test", shifted=True)
    method = cfg["adapt"]["method"]
    adapted, trace, logits, labels = _run_method(model, cfg, ds, ("adapt",))
    bins = reliability(softmax(logits), labels)
    ece, mcal = ece_mce(bins)
    energies = energy_marginal(logits)
    metrics = {"accuracy": accuracy(logits, labels), "aver_acc": None, "mce_corruption": None,
               "ece": ece, "max_calibration_error": mcal}
    doc = _new_doc(cfg, "adapt", method)
    doc.update({
        "provenance": ds.provenance,
        "metrics": metrics,
        "display": _rounded(metrics),
        "reliability": bins.to_dict(),
        "energy": {"source_mean": _source_energy_trace(model, ds),
                   "final": energy_summary(energies)},
        "trace": _trace_rows(trace),
    })
    doc["wall_clock_s"] = time.perf_counter() - t0
    write_doc(doc, out / "results.json")
    with open(out / "trace.csv", "w") as f:
        f.write(trace.to_csv())
    save_checkpoint(adapted, out / "adapted.teac")
    if dump_samples:
        acfg = config_mod.adapt_config(cfg)
        neg, _ = sgld_chain(EnergyView(adapted, TRAIN_STATS), acfg.sgld, (64,) + model.input_shape,
                            RngStream(cfg["seed"]).child("samples"))
        export_sample_grid(neg, out / "samples.pgm")
    print(f"{method}: accuracy {metrics['accuracy']:.4f}, ECE {ece:.4f}")
    return doc, adapted


def _threads():
    try:
        return max(1, int(os.environ.get("TEA_THREADS", "1")))
    except ValueError:
        return 1


def cmd_eval(cfg, checkpoint, baseline=None):
    """Corruption grid: each cell adapts a fresh copy of the source model."""
    t0 = time.perf_counter()
    if cfg["data"]["kind"] == "mixture2d":
        raise config_mod.ConfigError("eval builds an image corruption grid; data.kind must be glyphs or idx")
    base_doc = None
    if baseline is not None:
        try:
            with open(baseline) as f:
                base_doc = json.load(f)
        except FileNotFoundError:
            raise RunError(f"baseline results not found: {baseline}") from None
        _check_compatible([base_doc])
    model = load_checkpoint(checkpoint)
    _check_model(model, cfg)
    out = _out_dir(cfg)
    clean = load_dataset(cfg, "test")
    method = cfg["adapt"]["method"]
    kinds, sevs = cfg["eval"]["corruptions"], sorted(cfg["eval"]["severities"])
    cells = [(k, s) for k in kinds for s in sevs]
    corrupt_root = RngStream(cfg["seed"]).child("corrupt")

    def run_cell(cell):
        k, s = cell
        x = corrupt(clean.inputs, CorruptionSpec(k, s), corrupt_root)
        ds = LabeledDataset(x, clean.labels, dict(clean.provenance, corruption=k, severity=s))
        _, trace, logits, labels = _run_method(model, cfg, ds, (k, s))
        return {"error": 1.0 - accuracy(logits, labels),
                "bins": reliability(softmax(logits), labels),
                "energy": energy_marginal(logits),
                "trace": trace}

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = dict(zip(cells, pool.map(run_cell, cells)))

    grid = CorruptionGrid(kinds, sevs, [[results[(k, s)]["error"] for s in sevs] for k in kinds], method)
    bins = ReliabilityBins()
    for c in cells:
        bins = bins.merge(results[c]["bins"])
    ece, mcal = ece_mce(bins)
    top = sevs[-1]
    sev_grid = CorruptionGrid(kinds, [top], grid.errors[:, -1:], method)
    metrics = {"accuracy": average_accuracy(sev_grid), "aver_acc": average_accuracy(grid),
               "mce_corruption": None, "mce_corruption_top_severity": None,
               "ece": ece, "max_calibration_error": mcal}
    if base_doc is not None:
        bgrid = grid_from_doc(base_doc)
        metrics["mce_corruption"] = mce(grid, bgrid)
        metrics["mce_corruption_top_severity"] = mce(sev_grid, _top_column(bgrid, top))
    per_sev = {str(s): energy_summary(np.concatenate([results[(k, s)]["energy"] for k in kinds]))
               for s in sevs}
    per_sev_acc = {str(s): float(1.0 - grid.errors[:, j].mean()) for j, s in enumerate(sevs)}
    doc = _new_doc(cfg, "eval", method)
    doc.update({
        "provenance": clean.provenance,
        "baseline_config_hash": base_doc["config_hash"] if base_doc else None,
        "metrics": metrics,
        "display": _rounded(metrics),
        "grid": {"corruptions": kinds, "severities": sevs, "error": grid.errors.tolist()},
        "reliability": bins.to_dict(),
        "energy_by_severity": per_sev,
        "accuracy_by_severity": per_sev_acc,
        "energy_by_cell": {k: {str(s): energy_summary(results[(k, s)]["energy"]) for s in sevs}
                           for k in kinds},
        "trace": {f"{k}/{s}": _trace_rows(results[(k, s)]["trace"]) for k, s in cells},
    })
    doc["wall_clock_s"] = time.perf_counter() - t0
    write_doc(doc, out / "results.json")
    print(f"{method}: severity-{top} acc {metrics['accuracy']:.4f}, AverAcc {metrics['aver_acc']:.4f}, "
          f"ECE {ece:.4f}")
    return doc


def grid_from_doc(doc):
    g = doc.get("grid")
    if g is None:
        raise RunError("results document has no corruption grid (produced by eval?)")
    return CorruptionGrid(g["corruptions"], g["severities"], g["error"], doc.get("method", ""))


def _top_column(grid, sev):
    j = grid.severities.index(sev)
    return CorruptionGrid(grid.corruptions, [sev], grid.errors[:, j:j + 1], grid.method)


def _check_compatible(docs):
    for d in docs:
        if d.get("schema") != RESULTS_SCHEMA or d.get("schema_version") != RESULTS_VERSION:
            raise RunError(f"unsupported results schema {d.get('schema')!r} v{d.get('schema_version')}")


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


REPORT_TABLES = {
    "severity5.csv": ("method", "command", "accuracy", "mce_corruption"),
    "all_severities.csv": ("method", "command", "aver_acc", "mce_corruption"),
    "calibration.csv": ("method", "command", "ece", "max_calibration_error"),
    "energy_trace.csv": ("method", "command", "cell", "batch", "step", "loss", "e_test", "e_neg", "acc"),
}


def cmd_report(docs, out_dir):
    """Comparison tables across results documents.

    Columns are fixed by ``REPORT_TABLES``. ``accuracy`` is the top-severity
    accuracy for eval documents and the shifted-set accuracy for adapt
    documents. mCE is recomputed against the SOURCE eval document when one is
    present. Accuracy, AverAcc and calibration columns are fractions; mCE is
    in percent.
    """
    if not docs:
        raise RunError("report needs at least one results document")
    _check_compatible(docs)
    grids = [grid_from_doc(d) if "grid" in d else None for d in docs]
    have = [g for g in grids if g is not None]
    for g in have[1:]:
        if g.corruptions != have[0].corruptions or g.severities != have[0].severities:
            raise RunError("results documents cover different corruption grids")
    source = next((g for d, g in zip(docs, grids) if d["method"] == "SOURCE" and g is not None), None)
    sev5, allsev, cal, trace = [], [], [], []
    for d, g in zip(docs, grids):
        m = d["metrics"]
        mce_all, mce_top = m.get("mce_corruption"), m.get("mce_corruption_top_severity")
        if source is not None and g is not None:
            top = g.severities[-1]
            mce_all = mce(g, source)
            mce_top = mce(_top_column(g, top), _top_column(source, top))
        who = (d["method"], d["command"])
        sev5.append(who + (m["accuracy"], mce_top))
        allsev.append(who + (m.get("aver_acc"), mce_all))
        cal.append(who + (m["ece"], m["max_calibration_error"]))
        tr = d.get("trace", [])
        items = tr.items() if isinstance(tr, dict) else [("", tr)]
        for cell, rows in items:
            for r in rows:
                trace.append(who + (cell, r["batch"], r["step"], r["loss"], r["e_test"],
                              r["e_neg"], r["acc"]))
    rows = {"severity5.csv": sev5, "all_severities.csv": allsev, "calibration.csv": cal,
            "energy_trace.csv": trace}
    tables = {name: _csv(REPORT_TABLES[name], rows[name]) for name in REPORT_TABLES}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in tables.items():
        with open(out / name, "w") as f:
            f.write(text)
    return tables
