"""Synthetic multi-environment count data with planted age and attribute signal.

Log-expression for gene ``j`` and sample ``s`` is

    base[j] + signal_strength * a[j] * age01[s]   (age genes)
    base[j] + confound_strength * b[j, env[s]]    (attribute genes)
    base[j]                                       (other genes)

plus Gaussian noise, with ``age01`` the age rescaled to ``[0, 1]``. Values are
exponentiated and rounded to integer counts (minimum 1), so the generated
tables go through the regular ingest path.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import CountMatrix, MetadataRow, MetadataTable, write_counts, write_metadata

DEFAULT_ENVIRONMENTS = (
    ("liver", "platformA", "series0"),
    ("muscle", "platformA", "series1"),
    ("brain", "platformB", "series2"),
    ("heart", "platformB", "series3"),
)


@dataclass
class SynthConfig:
    n_samples: int = 150  # per environment
    n_genes: int = 500
    k_signal: int = 20
    k_confound: int = 20
    environments: tuple = DEFAULT_ENVIRONMENTS
    sexes: tuple = ("F", "M")
    age_range: tuple = (2.0, 30.0)
    noise_std: float = 0.2
    signal_strength: float = 1.0
    confound_strength: float = 2.0
    base_log_mean: tuple = (4.0, 7.0)
    correlated: bool = False  # couple environment and age
    seed: int = 0

    def __post_init__(self):
        self.environments = tuple(tuple(e) for e in self.environments)
        self.sexes = tuple(self.sexes)
        self.age_range = tuple(self.age_range)
        self.base_log_mean = tuple(self.base_log_mean)
        if self.k_signal + self.k_confound > self.n_genes:
            raise ValueError("k_signal + k_confound must not exceed n_genes")
        if self.n_samples < 1 or not self.environments:
            raise ValueError("need samples and at least one environment")
        if self.age_range[1] <= self.age_range[0]:
            raise ValueError("age_range must be increasing")


@dataclass
class PlantedTruth:
    gene_ids: tuple
    signal_idx: np.ndarray
    signal_coef: np.ndarray
    confound_idx: np.ndarray
    confound_coef: np.ndarray  # k_confound x n_environments
    environment: np.ndarray  # per sample
    log_expression: np.ndarray = field(repr=False)  # genes x samples, before rounding

    @property
    def signal_genes(self):
        return tuple(self.gene_ids[i] for i in self.signal_idx)

    @property
    def confound_genes(self):
        return tuple(self.gene_ids[i] for i in self.confound_idx)

    def to_dict(self):
        return {"signal_genes": list(self.signal_genes),
                "signal_coef": self.signal_coef.tolist(),
                "confound_genes": list(self.confound_genes),
                "confound_coef": self.confound_coef.tolist()}


def generate(cfg):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n_env = len(cfg.environments)
    n = cfg.n_samples * n_env
    lo, hi = cfg.age_range

    env = np.repeat(np.arange(n_env), cfg.n_samples)
    if cfg.correlated:
        # each environment covers its own slice of the age range, with overlap
        width = (hi - lo) / n_env
        start = lo + env * width * 0.75
        ages = start + rng.random(n) * width * 1.5
        ages = np.clip(ages, lo, hi)
    else:
        ages = lo + rng.random(n) * (hi - lo)
    sexes = rng.integers(0, len(cfg.sexes), size=n)

    order = rng.permutation(cfg.n_genes)
    signal_idx = np.sort(order[:cfg.k_signal])
    confound_idx = np.sort(order[cfg.k_signal:cfg.k_signal + cfg.k_confound])
    signal_coef = rng.uniform(0.5, 1.5, cfg.k_signal) * rng.choice([-1.0, 1.0], cfg.k_signal)
    confound_coef = rng.standard_normal((cfg.k_confound, n_env))

    base = rng.uniform(*cfg.base_log_mean, size=cfg.n_genes)
    logx = base[:, None] + cfg.noise_std * rng.standard_normal((cfg.n_genes, n))
    age01 = (ages - lo) / (hi - lo)
    logx[signal_idx] += cfg.signal_strength * signal_coef[:, None] * age01[None, :]
    logx[confound_idx] += cfg.confound_strength * confound_coef[:, env]
    counts = np.maximum(np.rint(np.exp(logx)), 1).astype(np.int64)

    width = len(str(cfg.n_genes - 1))
    gene_ids = tuple(f"G{j:0{width}d}" for j in range(cfg.n_genes))
    sample_ids = tuple(f"{cfg.environments[e][2]}_S{i:05d}" for i, e in enumerate(env))
    rows = []
    for s, e, a, x in zip(sample_ids, env, ages, sexes):
        tissue, platform, series = cfg.environments[e]
        rows.append(MetadataRow(s, float(a), cfg.sexes[x], tissue, platform, series))
    truth = PlantedTruth(gene_ids, signal_idx, signal_coef, confound_idx, confound_coef, env, logx)
    return CountMatrix(gene_ids, sample_ids, counts), MetadataTable(rows), truth


def write_dataset(out_dir, counts, meta, truth=None, cfg=None, split_by=None):
    """Write ``counts.tsv`` and ``metadata.tsv``; one directory per level of ``split_by``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if split_by is None:
        groups = {"": counts.sample_ids}
    else:
        groups = {}
        for s in counts.sample_ids:
            groups.setdefault(getattr(meta[s], split_by), []).append(s)
    for name in sorted(groups):
        d = out_dir / name if name else out_dir
        d.mkdir(parents=True, exist_ok=True)
        samples = tuple(groups[name])
        write_counts(counts.subset_samples(samples), d / "counts.tsv")
        write_metadata(meta.subset(samples), d / "metadata.tsv")
        written.append(d)
    if truth is not None:
        doc = truth.to_dict()
        if cfg is not None:
            doc["config"] = asdict(cfg)
        (out_dir / "truth.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return written
