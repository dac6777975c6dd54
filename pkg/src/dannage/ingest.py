"""Count-matrix ingestion, gene filtering and leak-free normalization.

The flow for one dataset is::

    counts = parse_counts("counts.tsv")
    meta = parse_metadata("metadata.tsv")
    genes = filter_genes(counts, meta)
    expr = cpm_log_transform(counts, genes)
    art = fit_standardizer(expr)            # training data only
    x = apply_standardizer(expr, art)

Holdout matrices go through ``cpm_log_transform`` and ``apply_standardizer``
with the artifact fitted on training data; nothing computed from a holdout
ever feeds back into the artifact.
"""

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountValueError,
    DuplicateIdError,
    EmptyGeneSetError,
    MetadataMismatchError,
    ParseError,
    ZeroLibraryError,
)

TRANSFORM_TAG = "cpm_log2_zscore_v1"
ATTRIBUTES = ("sex", "tissue", "platform", "series_id")
METADATA_COLUMNS = ("sample_id", "age") + ATTRIBUTES
DEGENERATE_STD = 1e-12


def _delimiter(path, fmt):
    if fmt in (None, "auto"):
        return "," if str(path).lower().endswith(".csv") else "\t"
    return {"tsv": "\t", "csv": ",", "tab": "\t"}.get(fmt, fmt)


def _check_unique(ids, what):
    seen = set()
    for i in ids:
        if i in seen:
            raise DuplicateIdError(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class CountMatrix:
    gene_ids: tuple
    sample_ids: tuple
    counts: np.ndarray  # genes x samples, int64
    gene_lengths: np.ndarray = None  # per gene, bp; None when unknown

    def __post_init__(self):
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape != (len(self.gene_ids), len(self.sample_ids)):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.gene_ids)} genes x {len(self.sample_ids)} samples")
        _check_unique(self.gene_ids, "gene")
        _check_unique(self.sample_ids, "sample")
        if counts.size and counts.min() < 0:
            g, s = np.argwhere(counts < 0)[0]
            raise CountValueError(self.gene_ids[g], self.sample_ids[s], counts[g, s])
        counts = counts.astype(np.int64, copy=True)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        if self.gene_lengths is not None:
            lengths = np.asarray(self.gene_lengths, dtype=np.float64).copy()
            if lengths.shape != (len(self.gene_ids),):
                raise ValueError("gene_lengths must have one entry per gene")
            lengths.flags.writeable = False
            object.__setattr__(self, "gene_lengths", lengths)

    @property
    def n_genes(self):
        return len(self.gene_ids)

    @property
    def n_samples(self):
        return len(self.sample_ids)

    def gene_index(self):
        return {g: i for i, g in enumerate(self.gene_ids)}

    def subset_genes(self, genes):
        idx = self.gene_index()
        rows = [idx[g] for g in genes]
        lengths = None if self.gene_lengths is None else self.gene_lengths[rows]
        return CountMatrix(tuple(genes), self.sample_ids, self.counts[rows], lengths)

    def subset_samples(self, samples):
        idx = {s: i for i, s in enumerate(self.sample_ids)}
        cols = [idx[s] for s in samples]
        return CountMatrix(self.gene_ids, tuple(samples), self.counts[:, cols], self.gene_lengths)

    def with_lengths(self, lengths):
        """Attach lengths from a ``{gene_id: bp}`` mapping; unknown genes get NaN."""
        arr = np.array([lengths.get(g, np.nan) for g in self.gene_ids], dtype=np.float64)
        return CountMatrix(self.gene_ids, self.sample_ids, self.counts, arr)


@dataclass(frozen=True)
class MetadataRow:
    sample_id: str
    age: float
    sex: str
    tissue: str
    platform: str
    series_id: str


class MetadataTable:
    """Per-sample age target plus the categorical attribute set."""

    def __init__(self, rows):
        rows = list(rows)
        _check_unique([r.sample_id for r in rows], "sample")
        for r in rows:
            if not (math.isfinite(r.age) and r.age >= 0):
                raise ValueError(f"age for sample {r.sample_id!r} must be finite and >= 0, got {r.age}")
        self.rows = tuple(rows)
        self._by_id = {r.sample_id: r for r in rows}

    def __len__(self):
        return len(self.rows)

    def __contains__(self, sample_id):
        return sample_id in self._by_id

    def __getitem__(self, sample_id):
        return self._by_id[sample_id]

    @property
    def sample_ids(self):
        return tuple(r.sample_id for r in self.rows)

    def vocabulary(self, attribute):
        return tuple(sorted({getattr(r, attribute) for r in self.rows}))

    def ages(self, samples):
        return np.array([self._by_id[s].age for s in samples], dtype=np.float64)

    def labels(self, samples, attribute):
        return [getattr(self._by_id[s], attribute) for s in samples]

    def subset(self, samples):
        return MetadataTable(self._by_id[s] for s in samples)

    def merge(self, other):
        return MetadataTable(self.rows + other.rows)


@dataclass(frozen=True)
class GeneSet:
    genes: tuple
    # excluded gene -> name of the filter that removed it
    provenance: dict = field(default_factory=dict)
    notes: tuple = ()

    def __len__(self):
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def intersect(self, other):
        keep = set(other.genes)
        prov = dict(self.provenance)
        for g in self.genes:
            if g not in keep:
                prov.setdefault(g, "absent_from_other_dataset")
        return GeneSet(tuple(g for g in self.genes if g in keep), prov, self.notes + other.notes)


@dataclass(frozen=True)
class ExpressionMatrix:
    gene_ids: tuple
    sample_ids: tuple
    values: np.ndarray  # samples x genes

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (len(self.sample_ids), len(self.gene_ids)):
            raise ValueError("values must be samples x genes")
        if not np.all(np.isfinite(values)):
            raise ValueError("expression values must be finite")
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "values", values)

    def subset_samples(self, samples):
        idx = {s: i for i, s in enumerate(self.sample_ids)}
        return ExpressionMatrix(self.gene_ids, tuple(samples), self.values[[idx[s] for s in samples]])

    @staticmethod
    def concat(mats):
        genes = mats[0].gene_ids
        if any(m.gene_ids != genes for m in mats):
            raise ValueError("cannot concatenate matrices with different gene order")
        samples = sum((m.sample_ids for m in mats), ())
        return ExpressionMatrix(genes, samples, np.vstack([m.values for m in mats]))


@dataclass(frozen=True)
class PreprocessArtifact:
    gene_set: GeneSet
    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple = ()  # genes whose std was replaced by 1.0
    transform_tag: str = TRANSFORM_TAG

    def to_dict(self):
        return {
            "transform_tag": self.transform_tag,
            "genes": list(self.gene_set.genes),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("transform_tag") != TRANSFORM_TAG:
            raise ValueError(f"unsupported transform tag {d.get('transform_tag')!r}")
        return cls(GeneSet(tuple(d["genes"])), np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64), tuple(d.get("degenerate", ())))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# -- parsing -----------------------------------------------------------------

def parse_counts(path, fmt="auto"):
    """Read a genes x samples count table.

    The header row holds sample ids (its first cell, the gene-id column name,
    is ignored); every following row is ``gene_id, count, count, ...``.
    """
    delim = _delimiter(path, fmt)
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delim)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty count file", line=1) from None
        samples = [s.strip() for s in header[1:]]
        genes, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line=lineno)
            gene = row[0].strip()
            vals = []
            for sample, cell in zip(samples, row[1:]):
                cell = cell.strip()
                try:
                    v = int(cell)
                except ValueError:
                    raise CountValueError(gene, sample, cell) from None
                if v < 0:
                    raise CountValueError(gene, sample, v)
                vals.append(v)
            genes.append(gene)
            rows.append(vals)
    counts = np.array(rows, dtype=np.int64).reshape(len(genes), len(samples))
    return CountMatrix(genes, samples, counts)


def parse_metadata(path, fmt="auto"):
    delim = _delimiter(path, fmt)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        missing = [c for c in METADATA_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise MetadataMismatchError(f"metadata is missing required columns {missing}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                age = float(rec["age"])
            except (TypeError, ValueError):
                raise ParseError(f"age {rec['age']!r} is not a number", line=lineno) from None
            rows.append(MetadataRow(rec["sample_id"].strip(), age,
                                    *(rec[a].strip() for a in ATTRIBUTES)))
    return MetadataTable(rows)


def parse_gene_lengths(path, fmt="auto"):
    delim = _delimiter(path, fmt)
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delim)
        if not {"gene_id", "length_bp"} <= set(reader.fieldnames or ()):
            raise ParseError("gene length table needs columns gene_id, length_bp", line=1)
        for lineno, rec in enumerate(reader, start=2):
            try:
                out[rec["gene_id"].strip()] = float(rec["length_bp"])
            except ValueError:
                raise ParseError(f"bad length {rec['length_bp']!r}", line=lineno) from None
    return out


def parse_allowlist(path):
    return {line.strip() for line in Path(path).read_text().splitlines() if line.strip()}


def write_counts(counts, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id", *counts.sample_ids])
        for g, row in zip(counts.gene_ids, counts.counts):
            w.writerow([g, *row.tolist()])


def write_metadata(meta, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(METADATA_COLUMNS)
        for r in meta.rows:
            w.writerow([r.sample_id, repr(float(r.age)), r.sex, r.tissue, r.platform, r.series_id])


def write_expression(m, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", *m.gene_ids])
        for s, row in zip(m.sample_ids, m.values):
            w.writerow([s, *(repr(float(v)) for v in row)])


# -- filtering and normalization --------------------------------------------

def min_expressed_samples(n_tissue, tissue_frac=0.2):
    return max(1, math.ceil(tissue_frac * n_tissue))


def filter_genes(counts, meta, min_len_bp=500, expr_count=10, tissue_frac=0.2, allowlist=None):
    """Select the genes expressed in every tissue of a dataset.

    Filters run in order: optional allowlist intersection, zero total count,
    length below ``min_len_bp`` (skipped when lengths are unknown), then the
    per-tissue expression rule. Within a tissue of ``N`` samples a gene is
    expressed when at least ``max(1, ceil(tissue_frac * N))`` samples have a
    count of ``expr_count`` or more. The result keeps genes expressed in all
    tissues, sorted lexicographically.
    """
    missing = [s for s in counts.sample_ids if s not in meta]
    if missing:
        raise MetadataMismatchError(f"{len(missing)} samples lack metadata, e.g. {missing[0]!r}")

    provenance = {}
    notes = []
    keep = np.ones(counts.n_genes, dtype=bool)

    def drop(mask, reason):
        for i in np.flatnonzero(keep & mask):
            provenance[counts.gene_ids[i]] = reason
        keep[mask] = False

    if allowlist is not None:
        allowed = set(allowlist)
        drop(np.array([g not in allowed for g in counts.gene_ids], dtype=bool), "allowlist")

    drop(counts.counts.sum(axis=1) == 0, "zero_total_count")

    if counts.gene_lengths is None:
        notes.append("length filter skipped: no gene lengths supplied")
    else:
        lengths = counts.gene_lengths
        # genes without a known length are kept; only a known short length excludes
        drop(np.nan_to_num(lengths, nan=np.inf) < min_len_bp, "short_length")

    tissues = {}
    for j, s in enumerate(counts.sample_ids):
        tissues.setdefault(meta[s].tissue, []).append(j)
    for tissue in sorted(tissues):
        cols = tissues[tissue]
        need = min_expressed_samples(len(cols), tissue_frac)
        if len(cols) < need:  # never true for need = max(1, ceil(frac * N)), kept verbatim
            notes.append(f"tissue {tissue!r} dropped: {len(cols)} < {need} samples")
            continue
        n_expr = (counts.counts[:, cols] >= expr_count).sum(axis=1)
        drop(n_expr < need, f"not_expressed:{tissue}")

    genes = tuple(sorted(counts.gene_ids[i] for i in np.flatnonzero(keep)))
    if not genes:
        raise EmptyGeneSetError("no gene survived filtering")
    return GeneSet(genes, provenance, tuple(notes))


def library_sizes(counts):
    lib = counts.counts.sum(axis=0)
    for s, v in zip(counts.sample_ids, lib):
        if v <= 0:
            raise ZeroLibraryError(s)
    return lib


def cpm(counts):
    """Counts per million, genes x samples, library size over all genes."""
    lib = library_sizes(counts).astype(np.float64)
    return counts.counts.astype(np.float64) / lib * 1e6


def cpm_log_transform(counts, gene_set):
    genes = tuple(gene_set)
    idx = counts.gene_index()
    absent = [g for g in genes if g not in idx]
    if absent:
        raise ValueError(f"{len(absent)} genes of the gene set are not in the count matrix")
    values = np.log2(cpm(counts)[[idx[g] for g in genes]] + 1.0)
    return ExpressionMatrix(genes, counts.sample_ids, values.T)


def fit_standardizer(train, gene_set=None):
    if train.values.shape[0] == 0 or train.values.shape[1] == 0:
        raise ValueError("cannot fit a standardizer on an empty matrix")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)  # population (1/N)
    bad = std < DEGENERATE_STD
    std = np.where(bad, 1.0, std)
    if gene_set is None or tuple(gene_set) != train.gene_ids:
        gene_set = GeneSet(train.gene_ids, dict(getattr(gene_set, "provenance", {}) or {}),
                           getattr(gene_set, "notes", ()))
    degenerate = tuple(g for g, b in zip(train.gene_ids, bad) if b)
    return PreprocessArtifact(gene_set, mean, std, degenerate)


def apply_standardizer(m, art):
    """Align ``m`` to the artifact's gene order and z-score it.

    Genes of the artifact that ``m`` lacks come out as all-zero columns, i.e.
    imputed at the training mean. Genes of ``m`` outside the artifact are
    dropped.
    """
    src = {g: i for i, g in enumerate(m.gene_ids)}
    genes = art.gene_set.genes
    out = np.zeros((len(m.sample_ids), len(genes)), dtype=np.float64)
    present = [j for j, g in enumerate(genes) if g in src]
    if present:
        cols = [src[genes[j]] for j in present]
        out[:, present] = (m.values[:, cols] - art.mean[present]) / art.std[present]
    return ExpressionMatrix(genes, m.sample_ids, out)


def missing_genes(m, art):
    have = set(m.gene_ids)
    return tuple(g for g in art.gene_set.genes if g not in have)


def transform_holdout(counts, art):
    """Normalize a holdout count matrix with training statistics only."""
    have = set(counts.gene_ids)
    genes = [g for g in art.gene_set.genes if g in have]
    return apply_standardizer(cpm_log_transform(counts, genes), art)
