"""Command line front end.

Every subcommand writes only under ``--out`` and finishes with a
``manifest.json``. Errors go to stderr as ``ErrorName: message``; exit codes
are 0 ok, 2 input error, 3 empty result, 4 numerics.
"""

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import adversary as adv
from . import evaluation as ev
from . import ingest, pipeline, synth
from .bsf import write_ranking
from .errors import DannageError, StratifyError

ATTRS = ingest.ATTRIBUTES


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=None,
                   help="JSON config file or 'paper-defaults' (the default)")
    g.add_argument("--seed", type=int, default=None, help="override the configured seed")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--jobs", type=int, default=1, help="parallel folds")
    g.add_argument("--format", choices=("tsv", "json"), default="tsv", help="table format")
    return p


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(prog="dannage",
                                     description="Adversarial age prediction from RNA-seq counts.")
    parser.add_argument("--version", action="version", version=f"dannage {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="filter genes and standardize one dataset")
    p.add_argument("--counts", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--lengths")
    p.add_argument("--allowlist")

    p = sub.add_parser("train", parents=[common], help="train models over dataset folders")
    p.add_argument("data", nargs="+", help="dataset folders (counts.tsv + metadata.tsv)")
    p.add_argument("--mode", choices=(pipeline.LOSO, pipeline.HOLDOUT, pipeline.INTERVENTION),
                   default=pipeline.LOSO)
    p.add_argument("--holdout", action="append", help="held-out dataset name (holdout mode)")
    p.add_argument("--alpha", type=float, action="append",
                   help="adversarial strength; repeat for a grid (default: configured grid)")
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--allowlist")

    p = sub.add_parser("evaluate", parents=[common], help="metrics and stability of a training run")
    p.add_argument("run", nargs="?", help="output directory of 'train'")
    p.add_argument("--checkpoint", help="apply this checkpoint to --data instead")
    p.add_argument("--artifact", help="preprocessing artifact matching --checkpoint")
    p.add_argument("--data", nargs="+", default=[], help="dataset folders to predict")

    p = sub.add_parser("probe", parents=[common], help="linear probe for attribute leakage")
    p.add_argument("latent", help="latent table written by 'train'")
    p.add_argument("--attribute", action="append", choices=ATTRS,
                   help="attribute to probe; repeat (default: all)")
    p.add_argument("--splits", default="train,val", help="comma-separated splits to use")
    p.add_argument("--divergence", action="store_true",
                   help="also report the mean pairwise domain-classifier divergence")

    p = sub.add_parser("compare", parents=[common], help="Welch tests with BH adjustment")
    p.add_argument("table", help="table with model, tissue, sex, age, group and a value column")
    p.add_argument("--contrast", choices=("control-vs-treated", "young-vs-old"),
                   default="control-vs-treated")
    p.add_argument("--value", default="predicted_age")
    p.add_argument("--control", default="Control")
    p.add_argument("--treated", default="ELAM")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic multi-environment suite")
    d = synth.SynthConfig()
    p.add_argument("--n-samples", type=int, default=d.n_samples, help="samples per environment")
    p.add_argument("--n-genes", type=int, default=d.n_genes)
    p.add_argument("--k-signal", type=int, default=d.k_signal)
    p.add_argument("--k-confound", type=int, default=d.k_confound)
    p.add_argument("--noise-std", type=float, default=d.noise_std)
    p.add_argument("--signal-strength", type=float, default=d.signal_strength)
    p.add_argument("--confound-strength", type=float, default=d.confound_strength)
    p.add_argument("--correlated", action="store_true", help="couple environment and age")
    p.add_argument("--split-by", choices=("series_id", "tissue", "platform", "none"),
                   default="series_id", help="one dataset folder per level")

    p = sub.add_parser("export-genes", parents=[common], help="ranked gene list from a gate layer")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--artifact", required=True)
    p.add_argument("--threshold", type=float, default=None)
    return parser


# -- commands ----------------------------------------------------------------

def cmd_preprocess(args, cfg, out):
    counts = ingest.parse_counts(args.counts)
    meta = ingest.parse_metadata(args.metadata)
    inputs = [args.counts, args.metadata]
    if args.lengths:
        counts = counts.with_lengths(ingest.parse_gene_lengths(args.lengths))
        inputs.append(args.lengths)
    allow = None
    if args.allowlist:
        allow = ingest.parse_allowlist(args.allowlist)
        inputs.append(args.allowlist)
    gs = ingest.filter_genes(counts, meta, allowlist=allow, **cfg["preprocess"])
    for note in gs.notes:
        print(note, flush=True)
    expr = ingest.cpm_log_transform(counts, gs)
    art = ingest.fit_standardizer(expr, gs)
    art.save(out / "artifact.json")
    ingest.write_expression(ingest.apply_standardizer(expr, art), out / "expression.tsv")
    rows = [{"gene_id": g, "status": "kept"} for g in gs.genes]
    rows += [{"gene_id": g, "status": why} for g, why in sorted(gs.provenance.items())]
    pipeline.write_table(rows, out / "genes", args.format)
    print(f"kept {len(gs.genes)} of {counts.n_genes} genes", flush=True)
    return inputs


def cmd_train(args, cfg, out):
    datasets = [pipeline.load_dataset(d) for d in args.data]
    if args.epochs is not None:
        cfg["model"]["max_epochs"] = args.epochs
        cfg["intervention"]["max_epochs"] = args.epochs
    allow = ingest.parse_allowlist(args.allowlist) if args.allowlist else None
    summaries = pipeline.run_train(datasets, args.mode, cfg, out, alphas=args.alpha,
                                   holdout=args.holdout, jobs=args.jobs, fmt=args.format,
                                   allowlist=allow)
    for s in summaries:
        print(f"[{s['fold']}] best epoch {s['best_epoch']}", flush=True)
    inputs = [f for ds in datasets for f in ds.files]
    return inputs + ([args.allowlist] if args.allowlist else [])


def cmd_evaluate(args, cfg, out):
    if args.checkpoint:
        if not args.artifact or not args.data:
            raise SystemExit("evaluate --checkpoint needs --artifact and --data")
        datasets = [pipeline.load_dataset(d) for d in args.data]
        rows = pipeline.predict_with_checkpoint(args.checkpoint, args.artifact, datasets)
        pipeline.write_table(rows, out / "predictions", args.format)
        metrics = []
        for ds in datasets:
            y = np.array([r["age"] for r in rows if r["dataset"] == ds.name])
            p = np.array([r["predicted_age"] for r in rows if r["dataset"] == ds.name])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                m = ev.regression_metrics(y, p)
            metrics.append({"dataset": ds.name, "n": len(y), "MAE": m.mae, "R2": m.r2})
        pipeline.write_table(metrics, out / "metrics", args.format)
        return [args.checkpoint, args.artifact] + [f for ds in datasets for f in ds.files]
    if not args.run:
        raise SystemExit("evaluate needs a run directory or --checkpoint")
    pipeline.evaluate_run(args.run, out, args.format)
    run = Path(args.run)
    return sorted(p for p in run.rglob("predictions.*") if p.is_file())


def cmd_probe(args, cfg, out):
    splits = set(args.splits.split(","))
    rows = [r for r in pipeline.read_table(args.latent) if r["split"] in splits]
    if not rows:
        raise StratifyError(f"no rows in splits {sorted(splits)}")
    fcols = [c for c in rows[0] if c.startswith("f") and c[1:].isdigit()]
    f = np.array([[float(r[c]) for c in fcols] for r in rows])
    pk = cfg["probe"]
    results = []
    for a in args.attribute or ATTRS:
        labels = [r[a] for r in rows]
        rep = ev.probe_attribute(f, labels, seed=cfg["model"]["seed"], attribute=a, **pk)
        row = rep.as_dict()
        if args.divergence:
            row["divergence"] = ev.mean_pairwise_divergence(f, labels, seed=cfg["model"]["seed"], **pk)
        results.append(row)
        print(f"{a}: balanced accuracy {rep.balanced_accuracy:.3f} "
              f"(permuted {rep.permutation_accuracy:.3f}, chance {1 / rep.n_classes:.3f})", flush=True)
    pipeline.write_table(results, out / "probe", args.format)
    return [args.latent]


def cmd_compare(args, cfg, out):
    rows = pipeline.read_table(args.table)
    for r in rows:
        r[args.value] = float(r[args.value])
    res = ev.compare_groups(rows, args.contrast, args.value, args.control, args.treated)
    if not res:
        print("no complete stratum to compare", flush=True)
    pipeline.write_table([r.as_dict() for r in res], out / "comparison", args.format,
                         columns=list(ev.GroupComparison.__dataclass_fields__))
    return [args.table]


def cmd_synth(args, cfg, out):
    scfg = synth.SynthConfig(n_samples=args.n_samples, n_genes=args.n_genes,
                             k_signal=args.k_signal, k_confound=args.k_confound,
                             noise_std=args.noise_std, signal_strength=args.signal_strength,
                             confound_strength=args.confound_strength, correlated=args.correlated,
                             seed=cfg["model"]["seed"])
    counts, meta, truth = synth.generate(scfg)
    split = None if args.split_by == "none" else args.split_by
    dirs = synth.write_dataset(out, counts, meta, truth, scfg, split_by=split)
    print(f"wrote {len(dirs)} dataset folder(s), {counts.n_samples} samples", flush=True)
    return []


def cmd_export_genes(args, cfg, out):
    model = adv.Checkpoint.load(args.checkpoint).model()
    art = ingest.PreprocessArtifact.load(args.artifact)
    ranking = adv.gene_ranking(model, art.gene_set.genes, args.threshold)
    write_ranking(ranking, out / "ranking.tsv")
    print(f"{len(ranking)} genes above threshold", flush=True)
    return [args.checkpoint, args.artifact]


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
            "probe": cmd_probe, "compare": cmd_compare, "synth": cmd_synth,
            "export-genes": cmd_export_genes}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest_inputs = []
        if args.config not in (None, "paper-defaults"):
            manifest_inputs.append(args.config)
        manifest = pipeline.RunManifest(argv, cfg, manifest_inputs, cfg["model"]["seed"])
        manifest.add_inputs(COMMANDS[args.command](args, cfg, out))
        manifest.write(out)
    except DannageError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
