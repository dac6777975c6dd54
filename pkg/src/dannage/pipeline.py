"""Run orchestration: configs, dataset folders, fold training and run manifests.

A dataset folder holds ``counts.tsv`` and ``metadata.tsv`` (``.csv`` also
accepted) and optionally ``lengths.tsv``. Its directory name is the dataset
id used for leave-one-set-out folds.
"""

import copy
import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import adversary as adv
from . import evaluation as ev
from . import ingest
from .bsf import write_ranking
from .errors import ConfigError, DataLeakError, EmptyGeneSetError
from .tensor import RngState

LOSO, HOLDOUT, INTERVENTION = "loso", "holdout", "intervention"
CONFIG_SECTIONS = ("alpha_grid", "validation_fraction", "preprocess", "model", "intervention",
                   "probe")


# -- configuration -----------------------------------------------------------

def paper_defaults():
    text = resources.files("dannage").joinpath("configs/paper-defaults.json").read_text()
    return json.loads(text)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(ref=None, seed=None):
    """Resolve ``ref`` (None, ``"paper-defaults"`` or a JSON path) over the defaults."""
    cfg = paper_defaults()
    if ref not in (None, "paper-defaults"):
        try:
            user = json.loads(Path(ref).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ref}: {exc}") from exc
        unknown = set(user) - set(CONFIG_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = _merge(cfg, user)
    if seed is not None:
        cfg["model"]["seed"] = int(seed)
    adv.ModelConfig.from_dict({**cfg["model"], "input_dim": 1}).validate()
    return cfg


def config_digest(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    name: str
    counts: ingest.CountMatrix
    meta: ingest.MetadataTable
    files: tuple


def _find(folder, stem):
    for ext in (".tsv", ".csv", ".txt"):
        p = folder / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_dataset(folder):
    folder = Path(folder)
    counts_path, meta_path = _find(folder, "counts"), _find(folder, "metadata")
    if counts_path is None or meta_path is None:
        raise FileNotFoundError(f"{folder} needs counts.tsv and metadata.tsv")
    counts = ingest.parse_counts(counts_path)
    meta = ingest.parse_metadata(meta_path)
    files = [counts_path, meta_path]
    lengths_path = _find(folder, "lengths")
    if lengths_path is not None:
        counts = counts.with_lengths(ingest.parse_gene_lengths(lengths_path))
        files.append(lengths_path)
    return Dataset(folder.name, counts, meta, tuple(files))


def check_disjoint(datasets):
    seen = {}
    for ds in datasets:
        for s in ds.counts.sample_ids:
            if s in seen:
                raise DataLeakError(f"sample {s!r} appears in datasets {seen[s]!r} and {ds.name!r}")
            seen[s] = ds.name
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise DataLeakError("dataset names must be unique")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- preprocessing for one fold ----------------------------------------------

@dataclass
class Prepared:
    artifact: ingest.PreprocessArtifact
    train: ingest.ExpressionMatrix
    holdout: ingest.ExpressionMatrix  # may have zero rows
    meta: ingest.MetadataTable
    dataset_of: dict


def prepare(train_sets, holdout_sets=(), preprocess=None, allowlist=None):
    """Gene selection and standardization from ``train_sets`` only.

    With several training datasets a gene must pass the filters in each of
    them. Holdout matrices are transformed with the training artifact.
    """
    kw = dict(preprocess or {})
    gs = None
    for ds in train_sets:
        g = ingest.filter_genes(ds.counts, ds.meta, allowlist=allowlist, **kw)
        gs = g if gs is None else gs.intersect(g)
    if not gs.genes:
        raise EmptyGeneSetError("no gene passes the filters in every training dataset")
    train = ingest.ExpressionMatrix.concat([ingest.cpm_log_transform(ds.counts, gs)
                                            for ds in train_sets])
    art = ingest.fit_standardizer(train, gs)
    x_train = ingest.apply_standardizer(train, art)
    parts = [ingest.transform_holdout(ds.counts, art) for ds in holdout_sets]
    if parts:
        holdout = ingest.ExpressionMatrix.concat(parts)
    else:
        holdout = ingest.ExpressionMatrix(art.gene_set.genes, (), np.zeros((0, len(gs.genes))))
    rows = [r for ds in (*train_sets, *holdout_sets) for r in ds.meta.subset(ds.counts.sample_ids).rows]
    dataset_of = {s: ds.name for ds in (*train_sets, *holdout_sets) for s in ds.counts.sample_ids}
    return Prepared(art, x_train, holdout, ingest.MetadataTable(rows), dataset_of)


def inner_split(sample_ids, fraction, seed):
    """Random validation subset of the training samples, for model selection."""
    n = len(sample_ids)
    n_val = int(round(fraction * n))
    if n_val == 0:
        return tuple(sample_ids), ()
    if n - n_val < 2:
        raise ConfigError("validation fraction leaves fewer than two training samples")
    order = RngState(seed).permutation(n)
    val = set(order[:n_val].tolist())
    train = tuple(s for i, s in enumerate(sample_ids) if i not in val)
    return train, tuple(s for i, s in enumerate(sample_ids) if i in val)


# -- tables ------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(rows, path, fmt="tsv", columns=None):
    """Write dict rows as TSV or JSON; ``path`` gets the matching suffix."""
    path = Path(path).with_suffix(f".{fmt}")
    columns = columns or (list(rows[0]) if rows else [])
    if fmt == "json":
        doc = [{c: (float(r[c]) if isinstance(r[c], np.floating) else r[c]) for c in columns}
               for r in rows]
        path.write_text(json.dumps(doc, indent=1) + "\n")
    else:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_cell(r[c]) for c in columns])
    return path


def read_table(path):
    """Rows of a TSV (all cells as strings) or JSON table."""
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


# -- training ----------------------------------------------------------------

@dataclass
class FoldJob:
    name: str
    out_dir: str
    model_cfg: dict
    prepared: Prepared
    validation_fraction: float
    save_stride: bool
    fmt: str


def run_fold(job):
    """Train one model and write its outputs; returns a summary dict."""
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prep = job.prepared
    mcfg = adv.ModelConfig.from_dict({**job.model_cfg, "input_dim": len(prep.artifact.gene_set.genes)})
    if mcfg.use_bsf and mcfg.bsf_cut_threshold >= mcfg.input_dim:
        print(f"[{job.name}] note: cut threshold {mcfg.bsf_cut_threshold:g} >= {mcfg.input_dim} "
              "genes, so the sparsity penalty is inactive", flush=True)
    fit_ids, val_ids = inner_split(prep.train.sample_ids, job.validation_fraction, mcfg.seed)
    vocab = {a: prep.meta.subset(prep.train.sample_ids).vocabulary(a) for a in mcfg.attributes}
    train = adv.Split.from_tables(prep.train.subset_samples(fit_ids), prep.meta, vocab)
    val = adv.Split.from_tables(prep.train.subset_samples(val_ids), prep.meta, vocab) if val_ids else None

    model = adv.build_model(mcfg, {a: len(v) for a, v in vocab.items()})
    ck_dir = out / "checkpoints"

    def on_checkpoint(ck):
        if job.save_stride:
            ck_dir.mkdir(exist_ok=True)
            ck.save(ck_dir / f"epoch_{ck.epoch:04d}.npz")

    def on_epoch(ck):
        row = ck.meta["trace"][-1]
        if row["epoch"] % 10 == 0 or row["epoch"] == mcfg.max_epochs:
            print(f"[{job.name}] epoch {row['epoch']} L_task={row['L_task']:.4g} "
                  f"L_BP={row['L_BP']:.4g} val_MAE={row['val_MAE']:.4g}", flush=True)

    res = adv.fit(model, train, val, on_checkpoint=on_checkpoint, on_epoch=on_epoch)
    best = res.best.model()
    prep.artifact.save(out / "artifact.json")
    res.best.save(out / "best.npz")
    res.trace.save(out / "trace.tsv")

    groups = [("train", fit_ids), ("val", val_ids), ("holdout", prep.holdout.sample_ids)]
    pred_rows, latent_rows = [], []
    for split_name, ids in groups:
        if not ids:
            continue
        x = (prep.holdout if split_name == "holdout" else prep.train).subset_samples(ids).values
        f = adv.encode(best, x)
        y = adv.predict_age(best, x)
        for s, fi, yi in zip(ids, f, y):
            r = prep.meta[s]
            base = {"sample_id": s, "dataset": prep.dataset_of[s], "split": split_name,
                    "sex": r.sex, "tissue": r.tissue, "platform": r.platform,
                    "series_id": r.series_id}
            pred_rows.append({**base, "age": r.age, "predicted_age": float(yi)})
            latent_rows.append({**base, **{f"f{k:03d}": float(v) for k, v in enumerate(fi)}})
    write_table(pred_rows, out / "predictions", job.fmt)
    write_table(latent_rows, out / "latent", job.fmt)
    if mcfg.use_bsf:
        write_ranking(adv.gene_ranking(best, prep.artifact.gene_set.genes), out / "ranking.tsv")
    summary = {"fold": job.name, "best_epoch": res.best.epoch, "flags": res.flags,
               "n_genes": mcfg.input_dim, "n_train": len(fit_ids), "n_val": len(val_ids),
               "n_holdout": len(prep.holdout.sample_ids),
               "checkpoint_epochs": res.checkpoint_epochs if job.save_stride else []}
    (out / "fold.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def alpha_dir(alpha):
    return f"alpha_{float(alpha):g}"


def plan_folds(datasets, mode, holdout=None):
    """List of ``(fold name, train datasets, holdout datasets)``."""
    by_name = {ds.name: ds for ds in datasets}
    if mode == LOSO:
        if len(datasets) < 3:
            raise ConfigError("leave-one-set-out needs at least three datasets")
        return [(ds.name, [d for d in datasets if d is not ds], [ds]) for ds in datasets]
    if mode == HOLDOUT:
        names = list(holdout or [datasets[-1].name])
        missing = [n for n in names if n not in by_name]
        if missing:
            raise ConfigError(f"unknown holdout datasets {missing}")
        train = [d for d in datasets if d.name not in names]
        if not train:
            raise ConfigError("holdout mode needs at least one training dataset")
        return [("+".join(names), train, [by_name[n] for n in names])]
    if mode == INTERVENTION:
        return [("model", list(datasets), [])]
    raise ConfigError(f"unknown mode {mode!r}")


def run_train(datasets, mode, cfg, out, alphas=None, holdout=None, jobs=1, fmt="tsv",
              allowlist=None):
    check_disjoint(datasets)
    folds = plan_folds(datasets, mode, holdout)
    model_cfg = dict(cfg["model"])
    if mode == INTERVENTION:
        model_cfg.update(cfg["intervention"])
    alphas = list(cfg["alpha_grid"] if alphas is None else alphas)
    out = Path(out)
    prepared = {name: prepare(tr, ho, cfg["preprocess"], allowlist) for name, tr, ho in folds}
    fold_jobs = []
    for a in alphas:
        for name, _, _ in folds:
            fold_jobs.append(FoldJob(f"{alpha_dir(a)}/{name}",
                                     str(out / alpha_dir(a) / f"fold_{name}"),
                                     {**model_cfg, "alpha": float(a)}, prepared[name],
                                     cfg["validation_fraction"], mode == INTERVENTION, fmt))
    if jobs > 1 and len(fold_jobs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_fold, fold_jobs))
    return [run_fold(j) for j in fold_jobs]


# -- evaluation of a finished run --------------------------------------------

def _float_or_nan(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def collect_folds(run_dir):
    """Holdout predictions of every fold, grouped by alpha."""
    out = {}
    for adir in sorted(Path(run_dir).glob("alpha_*")):
        alpha = float(adir.name.split("_", 1)[1])
        folds = []
        for i, fdir in enumerate(sorted(adir.glob("fold_*"))):
            pred = next((p for p in (fdir / "predictions.tsv", fdir / "predictions.json") if p.exists()),
                        None)
            if pred is None:
                continue
            rows = [r for r in read_table(pred) if r["split"] == "holdout"]
            by_ds = {}
            for r in rows:
                by_ds.setdefault(r["dataset"], []).append(r)
            for ds, rs in sorted(by_ds.items()):
                folds.append(ev.FoldResult(
                    ds, i, tuple(r["sample_id"] for r in rs),
                    np.array([_float_or_nan(r["age"]) for r in rs]),
                    np.array([_float_or_nan(r["predicted_age"]) for r in rs]),
                    tuple(r["tissue"] for r in rs)))
        out[alpha] = folds
    return out


def evaluate_run(run_dir, out, fmt="tsv"):
    """Per-dataset metrics, cross-dataset CV per alpha, and tissue-bias variance."""
    by_alpha = collect_folds(run_dir)
    if not any(by_alpha.values()):
        raise EmptyGeneSetError(f"no holdout predictions under {run_dir}")
    metric_rows, stab_rows, bias_rows = [], [], []
    for alpha, folds in sorted(by_alpha.items()):
        if not folds:
            continue
        for f in folds:
            m = f.metrics
            metric_rows.append({"alpha": alpha, "dataset": f.dataset_id, "fold": f.fold,
                                "n": len(f.sample_ids), "MAE": m.mae, "R2": m.r2})
        rep = ev.stability_report(folds, alpha)
        for r in rep.rows():
            stab_rows.append({"alpha": r["alpha"], "metric": r["metric"],
                              "cv_percent": r["cv_percent"],
                              "datasets": ",".join(rep.datasets),
                              "means": ",".join(repr(v) for v in (rep.mae if r["metric"] == "MAE"
                                                                  else rep.r2))})
        _, res, tissues = ev.fold_averaged_residuals(folds)
        tb = ev.tissue_bias_variance(res, tissues)
        bias_rows.append({"alpha": alpha, "tissue_bias_variance": float("nan") if tb is None else tb,
                          "n_tissues": len(set(tissues))})
    out = Path(out)
    return [write_table(metric_rows, out / "metrics", fmt),
            write_table(stab_rows, out / "stability", fmt),
            write_table(bias_rows, out / "tissue_bias", fmt)]


def predict_with_checkpoint(checkpoint, artifact, datasets):
    """Apply a trained model to new datasets; rows like a fold's predictions."""
    ck = adv.Checkpoint.load(checkpoint)
    model = ck.model()
    art = ingest.PreprocessArtifact.load(artifact)
    rows = []
    for ds in datasets:
        have = set(ds.counts.gene_ids)
        missing = [g for g in art.gene_set.genes if g not in have]
        if missing:
            print(f"[{ds.name}] {len(missing)} model genes absent; imputed at the training mean",
                  flush=True)
        x = ingest.transform_holdout(ds.counts, art)
        y = adv.predict_age(model, x.values)
        for s, yi in zip(x.sample_ids, y):
            r = ds.meta[s]
            rows.append({"sample_id": s, "dataset": ds.name, "split": "holdout", "sex": r.sex,
                         "tissue": r.tissue, "platform": r.platform, "series_id": r.series_id,
                         "age": r.age, "predicted_age": float(yi)})
    return rows


# -- run manifest -------------------------------------------------------------

def _now():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = time.gmtime(int(epoch)) if epoch else time.gmtime()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


class RunManifest:
    """Provenance of one command invocation, written as ``manifest.json``.

    ``manifest_hash`` covers the command, config, inputs, tool version and
    seed; runs with equal hashes produce byte-identical outputs. Timestamps
    are recorded but not hashed (``SOURCE_DATE_EPOCH`` pins them).
    """

    def __init__(self, command, cfg, inputs, seed):
        self.command = command
        self.config_hash = config_digest(cfg) if cfg is not None else None
        self.inputs = {}
        self.add_inputs(inputs)
        self.seed = seed
        self.started = _now()

    def add_inputs(self, paths):
        for p in paths:
            self.inputs[str(p)] = file_digest(p)

    @property
    def manifest_hash(self):
        key = {"command": self.command, "config": self.config_hash, "inputs": sorted(self.inputs.values()),
               "version": __version__, "seed": self.seed}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()

    def write(self, out_dir):
        out_dir = Path(out_dir)
        outputs = {}
        for p in sorted(out_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                outputs[str(p.relative_to(out_dir))] = file_digest(p)
        doc = {"tool": "dannage", "version": __version__, "command": self.command,
               "config_hash": self.config_hash, "inputs": self.inputs, "seed": self.seed,
               "manifest_hash": self.manifest_hash, "started": self.started, "finished": _now(),
               "outputs": outputs}
        (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return doc
