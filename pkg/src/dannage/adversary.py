"""Three-network adversarial age model and its alternating training loop.

An encoder maps expression profiles to a latent representation ``F``; an
age head regresses chronological age from ``F``; a multi-head bias predictor
classifies each sample attribute from ``F``. Every training step runs

1. ``bp_updates`` bias-predictor updates (encoder held fixed),
2. ``dist_updates`` encoder updates on ``-alpha * H + Omega`` (bias predictor
   frozen), ``H`` being the summed attribute cross-entropy and ``Omega`` the
   encoder's own regularization,
3. one age update of encoder and age head on squared error.
"""

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bsf import BsfLayer, SparsityPenalty, export_ranking
from .errors import BatchError, ConfigError, LabelError, NumericsError, ShapeError
from .evaluation import attribute_r2, regression_metrics
from .ingest import ATTRIBUTES
from .tensor import (
    EVAL,
    TRAIN,
    Adam,
    BatchNorm,
    Dense,
    Dropout,
    GaussianNoise,
    ReLU,
    RngState,
    Sequential,
    categorical_cross_entropy,
    load_arrays,
    mse_loss,
    one_hot,
    save_arrays,
    softmax,
)

EARLY_STOPPING = "early_stopping"
FIXED = "fixed"


@dataclass
class ModelConfig:
    input_dim: int = 0
    latent_dim: int = 60
    use_bsf: bool = False
    alpha: float = 1.0
    lr_bp: float = 3e-4
    lr_dist: float = 2e-4
    lr_task: float = 1e-3
    batch_size: int = 64
    steps_per_epoch: int = 50
    bp_updates: int = 5
    dist_updates: int = 2
    task_updates: int = 1
    burn_in_epochs: int = 50
    max_epochs: int = 300
    checkpoint_every: int = 10
    schedule: str = EARLY_STOPPING  # or "fixed": run max_epochs, pick among stride checkpoints
    select_epoch: int = None  # fixed schedule: report this checkpoint instead of the val-best
    seed: int = 0
    # architecture
    encoder_widths: tuple = (256, 256, 106, 64)
    bp_width: int = 256
    bp_head_width: int = 128
    trunk_depth: int = 1
    dropout: float = 0.3
    noise_std: float = 0.05
    use_noise: bool = True
    encoder_l2: float = 0.0
    task_l2: float = 1e-4
    bp_l2: float = 0.0
    bn_momentum: float = 0.99
    bn_eps: float = 1e-3
    # gate
    bsf_strength: float = 1e-2
    bsf_cut_threshold: float = 3000.0
    mask_threshold: float = 0.5
    bsf_per_sample: bool = False
    bsf_l1: float = 0.0
    # adversary
    attributes: tuple = ATTRIBUTES
    head_weights: dict = None
    fresh_batch_per_update: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.attributes = tuple(self.attributes)

    def validate(self):
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be positive")
        if self.latent_dim < 4:
            raise ConfigError("latent_dim must be at least 4")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        for name in ("bp_updates", "dist_updates", "task_updates", "burn_in_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "steps_per_epoch", "max_epochs", "checkpoint_every",
                     "bp_width", "bp_head_width", "trunk_depth"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if any(w <= 0 for w in self.encoder_widths) or len(self.encoder_widths) != 4:
            raise ConfigError("encoder_widths must be four positive widths")
        if self.schedule not in (EARLY_STOPPING, FIXED):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        return self

    def to_dict(self):
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["attributes"] = list(self.attributes)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def head_dims(latent_dim):
    return max(1, latent_dim // 2), max(1, latent_dim // 4)


# -- data --------------------------------------------------------------------

@dataclass
class Split:
    """Model-ready samples: standardized inputs, ages and encoded attributes."""

    sample_ids: tuple
    x: np.ndarray
    ages: np.ndarray
    labels: dict = field(default_factory=dict)  # attribute -> int codes, -1 if unseen
    vocab: dict = field(default_factory=dict)  # attribute -> class names

    def __len__(self):
        return len(self.sample_ids)

    @classmethod
    def from_tables(cls, expr, meta, vocab=None, attributes=ATTRIBUTES):
        samples = expr.sample_ids
        if vocab is None:
            vocab = {a: meta.subset(samples).vocabulary(a) for a in attributes}
        labels = {}
        for a in attributes:
            lookup = {c: i for i, c in enumerate(vocab[a])}
            labels[a] = np.array([lookup.get(v, -1) for v in meta.labels(samples, a)], dtype=np.int64)
        return cls(samples, expr.values, meta.ages(samples), labels, dict(vocab))

    def onehot(self, attribute, idx=None):
        codes = self.labels[attribute] if idx is None else self.labels[attribute][idx]
        if np.any(codes < 0):
            raise LabelError(f"samples with unseen {attribute} labels cannot enter the bias loss")
        return one_hot(codes, len(self.vocab[attribute]))


# -- model -------------------------------------------------------------------

class AdversarialModel:
    def __init__(self, cfg, attribute_classes):
        cfg.validate()
        missing = [a for a in cfg.attributes if a not in attribute_classes]
        if missing:
            raise ConfigError(f"no class count for attributes {missing}")
        self.cfg = cfg
        self.attribute_classes = {a: int(attribute_classes[a]) for a in cfg.attributes}
        init_rng, self.layer_rng, self.batch_rng = RngState.spawn(cfg.seed, 3)
        self.bsf = None
        self.encoder = self._build_encoder(init_rng)
        self.task_head = self._build_task_head(init_rng)
        self.bp_trunk, self.bp_heads = self._build_bias_predictor(init_rng)
        for net in self.nets().values():
            net.flatten()
        bp_groups = [p for net in self.bp_nets() for p in net.optim_params()]
        self.opt_bp = Adam(bp_groups, cfg.lr_bp, name="opt_bp")
        self.opt_dist = Adam(self.encoder.optim_params(), cfg.lr_dist, name="opt_dist")
        self.opt_task = Adam(self.encoder.optim_params() + self.task_head.optim_params(),
                             cfg.lr_task, name="opt_task")

    # construction

    def _build_encoder(self, rng):
        c = self.cfg
        w1, w2, w3, w4 = c.encoder_widths
        layers = []
        if c.use_bsf:
            self.bsf = BsfLayer(c.input_dim, SparsityPenalty(c.bsf_strength, c.bsf_cut_threshold),
                                c.mask_threshold, c.bsf_per_sample, c.bsf_l1)
            layers.append(self.bsf)

        def block(i, d_in, d_out, dropout):
            out = [Dense(d_in, d_out, rng, c.encoder_l2, name=f"encoder/dense{i}"),
                   BatchNorm(d_out, c.bn_momentum, c.bn_eps, name=f"encoder/bn{i}"),
                   ReLU(d_out)]
            if dropout:
                out.append(Dropout(d_out, c.dropout))
            return out

        layers += block(0, c.input_dim, w1, False)
        layers += block(1, w1, w2, True)
        layers += block(2, w2, w3, True)
        if c.use_noise:
            layers.append(GaussianNoise(w3, c.noise_std))
        layers += block(3, w3, w4, False)
        layers.append(Dense(w4, c.latent_dim, rng, c.encoder_l2, init="glorot_uniform",
                            name="encoder/latent"))
        return Sequential(layers, "encoder")

    def _build_task_head(self, rng):
        c = self.cfg
        h1, h2 = head_dims(c.latent_dim)
        return Sequential([
            Dense(c.latent_dim, h1, rng, c.task_l2, name="task/dense0"), ReLU(h1),
            Dense(h1, h2, rng, c.task_l2, name="task/dense1"), ReLU(h2),
            Dense(h2, 1, rng, c.task_l2, init="glorot_uniform", name="task/out"),
        ], "task")

    def _build_bias_predictor(self, rng):
        c = self.cfg
        trunk, d_in = [], c.latent_dim
        for i in range(c.trunk_depth):
            trunk += [Dense(d_in, c.bp_width, rng, c.bp_l2, name=f"bp/trunk{i}"),
                      BatchNorm(c.bp_width, c.bn_momentum, c.bn_eps, name=f"bp/trunk_bn{i}"),
                      ReLU(c.bp_width), Dropout(c.bp_width, c.dropout)]
            d_in = c.bp_width
        heads = {}
        for a in c.attributes:
            k = self.attribute_classes[a]
            heads[a] = Sequential([
                Dense(c.bp_width, c.bp_head_width, rng, c.bp_l2, name=f"bp/{a}/dense"),
                ReLU(c.bp_head_width), Dropout(c.bp_head_width, c.dropout),
                Dense(c.bp_head_width, k, rng, c.bp_l2, init="glorot_uniform", name=f"bp/{a}/logits"),
            ], f"bp/{a}")
        return Sequential(trunk, "bp/trunk"), heads

    # parameter groups

    def nets(self):
        return {"encoder": self.encoder, "task": self.task_head, "bp/trunk": self.bp_trunk,
                **{f"bp/{a}": h for a, h in self.bp_heads.items()}}

    def bp_nets(self):
        return [self.bp_trunk, *self.bp_heads.values()]

    def bp_params(self):
        return [p for net in self.bp_nets() for p in net.params()]

    def optimizers(self):
        return [self.opt_bp, self.opt_dist, self.opt_task]

    def head_weight(self, attribute):
        hw = self.cfg.head_weights or {}
        return float(hw.get(attribute, 1.0))

    # state

    def state_arrays(self):
        arrays = {}
        for net in self.nets().values():
            for p in net.params():
                arrays[p.name] = p.values
            arrays.update(net.buffers())
        return arrays

    def group_digest(self, group):
        """Hash of one parameter group: 'encoder', 'task' or 'bp' (incl. buffers)."""
        h = hashlib.sha256()
        nets = self.nets()
        names = [n for n in nets if n == group or (group == "bp" and n.startswith("bp/"))]
        for n in sorted(names):
            for p in nets[n].params():
                h.update(p.name.encode())
                h.update(p.values.tobytes())
            for k, v in sorted(nets[n].buffers().items()):
                h.update(k.encode())
                h.update(v.tobytes())
        return h.hexdigest()

    def snapshot(self):
        arrays = {f"model/{k}": v.copy() for k, v in self.state_arrays().items()}
        opt_meta = {}
        for opt in self.optimizers():
            meta, arr = opt.state()
            opt_meta[opt.name] = meta
            arrays.update({f"optim/{k}": v.copy() for k, v in arr.items()})
        meta = {"optimizers": opt_meta,
                "rng": {"layer": self.layer_rng.get_state(), "batch": self.batch_rng.get_state()}}
        return arrays, meta

    def restore(self, arrays, meta):
        for k, v in self.state_arrays().items():
            v[...] = arrays[f"model/{k}"]
        for opt in self.optimizers():
            prefix = "optim/"
            opt.load_state(meta["optimizers"][opt.name],
                           {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        self.layer_rng.set_state(meta["rng"]["layer"])
        self.batch_rng.set_state(meta["rng"]["batch"])


def build_model(cfg, attribute_classes):
    """Fresh model with He-uniform dense kernels and gate weights at 1.0."""
    return AdversarialModel(cfg, attribute_classes)


# -- losses ------------------------------------------------------------------

def _bias_forward_backward(model, f, data, idx, mode, update_stats, need_grad):
    """Sum of per-head cross-entropies; fills bias-predictor grads.

    Returns ``(H, dH/dF)``; the latter only when ``need_grad``.
    """
    h, trunk_tape = model.bp_trunk.forward(f, mode, model.layer_rng, update_stats)
    total = 0.0
    gh = np.zeros_like(h)
    for a, head in model.bp_heads.items():
        logits, tape = head.forward(h, mode, model.layer_rng, update_stats)
        ce, g = categorical_cross_entropy(logits, data.onehot(a, idx))
        w = model.head_weight(a)
        total += w * ce
        gh += head.backward(tape, w * g)
    gf = model.bp_trunk.backward(trunk_tape, gh)
    return total, (gf if need_grad else None)


def bias_loss(model, data, idx):
    """Bias-predictor cross-entropy ``H``; gradients land in bias-predictor params only.

    The encoder runs in train mode (dropout and noise active) but with its
    running statistics frozen, since it is not being trained here.
    """
    f, _ = model.encoder.forward(data.x[idx], TRAIN, model.layer_rng, update_stats=False)
    h, _ = _bias_forward_backward(model, f, data, idx, TRAIN, True, False)
    return h


def distiller_loss(model, data, idx, alpha=None):
    """``L_dist = -alpha * H + Omega``; gradients land in encoder params only.

    Returns ``(L_dist, H, Omega)``. The bias predictor is frozen: its
    batch statistics are used but its running statistics stay untouched and
    the gradients computed for it are discarded.
    """
    alpha = model.cfg.alpha if alpha is None else alpha
    f, enc_tape = model.encoder.forward(data.x[idx], TRAIN, model.layer_rng, update_stats=True)
    h, gf = _bias_forward_backward(model, f, data, idx, TRAIN, False, True)
    for net in model.bp_nets():
        net.zero_grad()
    omega = model.encoder.penalty()
    model.encoder.backward(enc_tape, -alpha * gf, with_penalty=True, need_input_grad=False)
    return -alpha * h + omega, h, omega


def task_loss(model, data, idx):
    """Squared age error plus the age head's l2; grads into encoder and age head."""
    f, enc_tape = model.encoder.forward(data.x[idx], TRAIN, model.layer_rng, update_stats=True)
    y, task_tape = model.task_head.forward(f, TRAIN, model.layer_rng, update_stats=True)
    mse, g = mse_loss(y[:, 0], data.ages[idx])
    gf = model.task_head.backward(task_tape, g[:, None], with_penalty=True)
    model.encoder.backward(enc_tape, gf, with_penalty=False, need_input_grad=False)
    return mse + model.task_head.penalty()


# -- training ----------------------------------------------------------------

@dataclass
class StepRecord:
    l_bp: float
    l_dist: float
    l_task: float
    h_dist: float


def _batch(model, n):
    return np.sort(model.batch_rng.integers(n, model.cfg.batch_size))


def train_step(model, data):
    cfg = model.cfg
    if cfg.batch_size < 2:
        raise BatchError("batch norm needs at least two samples per batch")
    n = len(data)
    idx = _batch(model, n)

    def next_idx():
        return _batch(model, n) if cfg.fresh_batch_per_update else idx

    bp_losses = []
    for i in range(cfg.bp_updates):
        b = idx if i == 0 else next_idx()
        bp_losses.append(bias_loss(model, data, b))
        model.opt_bp.step()
    dist_losses, dist_h = [], []
    for _ in range(cfg.dist_updates):
        ld, h, _ = distiller_loss(model, data, next_idx())
        dist_losses.append(ld)
        dist_h.append(h)
        model.opt_dist.step()
    task_losses = []
    for _ in range(cfg.task_updates):
        task_losses.append(task_loss(model, data, next_idx()))
        model.opt_task.step()
    rec = StepRecord(*(float(np.mean(v)) if v else 0.0
                       for v in (bp_losses, dist_losses, task_losses, dist_h)))
    if not all(np.isfinite([rec.l_bp, rec.l_dist, rec.l_task])):
        raise NumericsError("non-finite training loss")
    return rec


def encode(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.cfg.input_dim:
        raise ShapeError(f"expected {model.cfg.input_dim} aligned genes, got shape {x.shape}")
    if model.bsf is not None and not model.bsf.mask().any():
        warnings.warn("every gate is below the mask threshold; the encoder sees an all-zero input",
                      RuntimeWarning, stacklevel=2)
    f, _ = model.encoder.forward(x, EVAL)
    return f


def predict_age(model, x):
    y, _ = model.task_head.forward(encode(model, x), EVAL)
    return y[:, 0].copy()


def predict_attributes(model, x=None, f=None):
    """Class probabilities of every bias-predictor head, eval mode."""
    f = encode(model, x) if f is None else f
    h, _ = model.bp_trunk.forward(f, EVAL)
    return {a: softmax(head.forward(h, EVAL)[0]) for a, head in model.bp_heads.items()}


def attribute_r2_by_head(model, data, f=None):
    probs = predict_attributes(model, data.x, f)
    out = {}
    for a, p in probs.items():
        keep = data.labels[a] >= 0
        out[a] = attribute_r2(p[keep], data.onehot(a, np.flatnonzero(keep))) if keep.any() else float("nan")
    return out


# -- checkpoints and traces ---------------------------------------------------

@dataclass
class Checkpoint:
    epoch: int
    arrays: dict
    meta: dict  # optimizer step counts, rng states, config, vocab, selection state

    def save(self, path):
        save_arrays(path, self.arrays, {"epoch": self.epoch, **self.meta})

    @classmethod
    def load(cls, path):
        arrays, manifest = load_arrays(path)
        epoch = manifest.pop("epoch")
        return cls(epoch, arrays, manifest)

    def model(self):
        cfg = ModelConfig.from_dict(self.meta["config"])
        model = AdversarialModel(cfg, self.meta["attribute_classes"])
        model.restore(self.arrays, self.meta)
        return model

    @property
    def vocab(self):
        return {a: tuple(v) for a, v in self.meta.get("vocab", {}).items()}


def make_checkpoint(model, epoch, vocab=None, extra=None):
    arrays, meta = model.snapshot()
    meta.update({"config": model.cfg.to_dict(), "attribute_classes": model.attribute_classes,
                 "vocab": {a: list(v) for a, v in (vocab or {}).items()}})
    meta.update(extra or {})
    return Checkpoint(epoch, arrays, meta)


TRACE_HEAD = ("epoch", "L_task", "L_BP", "L_dist", "H_dist", "val_MAE")
_INT_COLUMNS = ("epoch", "selected")


class TrainTrace:
    def __init__(self, rows=None):
        self.rows = list(rows or [])

    def append(self, row):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def columns(self):
        """Fixed leading columns, then the rest alphabetically, ``selected`` last."""
        present = set(self.rows[0]) if self.rows else set()
        head = [c for c in TRACE_HEAD if c in present]
        rest = sorted(present - set(head) - {"selected"})
        return head + rest + (["selected"] if "selected" in present else [])

    def to_tsv(self):
        if not self.rows:
            return ""
        cols = self.columns()
        lines = ["\t".join(cols)]
        for r in self.rows:
            lines.append("\t".join(_fmt(r[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_tsv())

    @classmethod
    def load(cls, path):
        with open(path, newline="") as fh:
            rows = []
            for r in csv.DictReader(fh, delimiter="\t"):
                rows.append({k: (int(v) if k in _INT_COLUMNS else _parse(v)) for k, v in r.items()})
        return cls(rows)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v):
    try:
        return float(v)
    except ValueError:
        return v


@dataclass
class FitResult:
    best: Checkpoint
    final: Checkpoint
    trace: TrainTrace
    checkpoint_epochs: list
    flags: list = field(default_factory=list)


def fit(model, train, val=None, resume=None, resume_best=None, on_checkpoint=None,
        on_epoch=None):
    """Train for ``cfg.max_epochs`` epochs of ``cfg.steps_per_epoch`` steps.

    Model selection uses validation age MAE over epochs after the burn-in.
    With the fixed schedule only the stride checkpoints (every
    ``checkpoint_every`` epochs) are candidates, and ``select_epoch`` wins
    when set. ``resume`` continues from a checkpoint produced by this
    function; pass the best checkpoint seen so far as ``resume_best``.
    """
    cfg = model.cfg
    if val is not None and set(train.sample_ids) & set(val.sample_ids):
        raise ValueError("training and validation splits overlap")
    if len(train) < 2:
        raise BatchError("training split needs at least two samples")

    trace = TrainTrace()
    start = 1
    best, best_mae = None, np.inf
    stride_epochs = []
    if resume is not None:
        model.restore(resume.arrays, resume.meta)
        trace = TrainTrace(resume.meta.get("trace", []))
        best_mae = resume.meta.get("best_val_mae", np.inf)
        stride_epochs = list(resume.meta.get("stride_epochs", []))
        start = resume.epoch + 1
        best = resume_best
    last_good = make_checkpoint(model, start - 1, train.vocab)

    def checkpoint(epoch):
        return make_checkpoint(model, epoch, train.vocab, {
            "trace": [dict(r) for r in trace.rows], "best_val_mae": best_mae,
            "stride_epochs": list(stride_epochs)})

    for epoch in range(start, cfg.max_epochs + 1):
        steps = []
        try:
            for _ in range(cfg.steps_per_epoch):
                steps.append(train_step(model, train))
        except (NumericsError, FloatingPointError) as exc:
            raise NumericsError(f"epoch {epoch}: {exc}", checkpoint=last_good) from exc
        row = {"epoch": epoch,
               "L_task": float(np.mean([s.l_task for s in steps])),
               "L_BP": float(np.mean([s.l_bp for s in steps])),
               "L_dist": float(np.mean([s.l_dist for s in steps])),
               "H_dist": float(np.mean([s.h_dist for s in steps]))}
        val_mae = float("nan")
        if val is not None and len(val):
            pred = predict_age(model, val.x)
            if not np.all(np.isfinite(pred)):
                raise NumericsError(f"epoch {epoch}: non-finite validation predictions",
                                    checkpoint=last_good)
            val_mae = regression_metrics(val.ages, pred).mae
        row["val_MAE"] = val_mae
        for a, r2 in attribute_r2_by_head(model, train).items():
            row[f"r2_train_{a}"] = r2
        is_stride = epoch % cfg.checkpoint_every == 0
        eligible = epoch > cfg.burn_in_epochs and (cfg.schedule == EARLY_STOPPING or is_stride)
        improved = False
        if cfg.schedule == FIXED and cfg.select_epoch is not None:
            improved = epoch == cfg.select_epoch
        elif eligible and np.isfinite(val_mae) and val_mae < best_mae:
            improved = True
        if improved:
            best_mae = val_mae if np.isfinite(val_mae) else best_mae
        row["selected"] = int(improved)
        trace.append(row)
        if is_stride:
            stride_epochs.append(epoch)
        ck = checkpoint(epoch)
        if improved:
            best = ck
        if is_stride and on_checkpoint is not None:
            on_checkpoint(ck)
        if on_epoch is not None:
            on_epoch(ck)
        last_good = ck

    flags = []
    final = last_good
    if best is None:
        flags.append("no epoch eligible for selection; returning the final epoch")
        best = final
    return FitResult(best, final, trace, stride_epochs, flags)


def gene_ranking(model, gene_ids, mask_threshold=None):
    if model.bsf is None:
        raise ConfigError("model has no gate layer")
    thr = model.cfg.mask_threshold if mask_threshold is None else mask_threshold
    return export_ranking(model.bsf.w.values, gene_ids, thr)
