"""Small dense-network kernel with exact reverse-mode gradients.

Networks are plain sequential stacks of layers. ``Sequential.forward``
returns the output together with a :class:`Tape` holding every activation
needed by ``Sequential.backward``; gradients accumulate into
``Param.grads``. Everything runs in float64.
"""

import io
import json
import math
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, LabelError, NumericsError, ShapeError, TapeError

TRAIN = "train"
EVAL = "eval"


class RngState:
    """Seeded random stream; ``(seed, counter)`` identifies its position."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @classmethod
    def spawn(cls, seed, n):
        """``n`` independent streams derived from one seed."""
        children = np.random.SeedSequence(int(seed)).spawn(n)
        return [cls(int(c.generate_state(1, dtype=np.uint64)[0])) for c in children]

    @property
    def generator(self):
        return self._gen

    def random(self, size):
        self.counter += 1
        return self._gen.random(size)

    def normal(self, size):
        self.counter += 1
        return self._gen.standard_normal(size)

    def integers(self, high, size):
        self.counter += 1
        return self._gen.integers(0, high, size=size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def get_state(self):
        return {"seed": self.seed, "counter": self.counter,
                "bit_generator": _jsonable(self._gen.bit_generator.state)}

    def set_state(self, state):
        self.seed = int(state["seed"])
        self.counter = int(state["counter"])
        self._gen.bit_generator.state = state["bit_generator"]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


class Param:
    __slots__ = ("name", "values", "grads", "clip", "version")

    def __init__(self, name, values, clip=None):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grads = np.zeros_like(self.values)
        self.clip = clip
        self.version = 0

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grads[...] = 0.0


class FlatParams:
    """Contiguous storage for several parameters.

    Member ``Param.values``/``grads`` become views into two flat buffers so an
    optimizer can update (and the network zero) them in one vectorized pass.
    """

    clip = None

    def __init__(self, params, name):
        self.name = name
        self.members = list(params)
        total = sum(p.values.size for p in self.members)
        self.values = np.empty(total)
        self.grads = np.zeros(total)
        off = 0
        for p in self.members:
            n = p.values.size
            self.values[off:off + n] = p.values.reshape(-1)
            p.values = self.values[off:off + n].reshape(p.values.shape)
            p.grads = self.grads[off:off + n].reshape(p.values.shape)
            off += n

    @property
    def version(self):
        return self.members[0].version if self.members else 0

    @version.setter
    def version(self, value):
        for p in self.members:
            p.version = value

    def zero_grad(self):
        self.grads.fill(0.0)


# -- layers ------------------------------------------------------------------

class Layer:
    kind = "identity"
    in_dim = out_dim = None

    def params(self):
        return []

    def buffers(self):
        return {}

    def describe(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x, mode, rng, update_stats=True):
        return x, None

    def backward(self, cache, g):
        return g

    def penalty(self):
        return 0.0

    def penalty_backward(self):
        pass


class Identity(Layer):
    def __init__(self, dim):
        self.in_dim = self.out_dim = dim


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_dim, out_dim, rng, l2=0.0, init="he_uniform", name="dense"):
        self.in_dim, self.out_dim, self.l2 = in_dim, out_dim, float(l2)
        if init == "he_uniform":
            limit = math.sqrt(6.0 / in_dim)
        else:  # glorot_uniform, for layers without a relu after them
            limit = math.sqrt(6.0 / (in_dim + out_dim))
        kernel = (rng.random((in_dim, out_dim)) * 2.0 - 1.0) * limit
        self.w = Param(f"{name}/kernel", kernel)
        self.b = Param(f"{name}/bias", np.zeros(out_dim))

    def params(self):
        return [self.w, self.b]

    def describe(self):
        return {**super().describe(), "l2": self.l2}

    def forward(self, x, mode, rng, update_stats=True):
        y = x @ self.w.values
        y += self.b.values
        return y, x

    def backward(self, x, g, need_input_grad=True):
        self.w.grads += x.T @ g
        self.b.grads += g.sum(axis=0)
        return g @ self.w.values.T if need_input_grad else None

    def penalty(self):
        return self.l2 * float(np.sum(self.w.values ** 2)) if self.l2 else 0.0

    def penalty_backward(self):
        if self.l2:
            self.w.grads += 2.0 * self.l2 * self.w.values


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, dim, momentum=0.99, eps=1e-3, name="bn"):
        self.in_dim = self.out_dim = dim
        self.momentum, self.eps = momentum, eps
        self.gamma = Param(f"{name}/gamma", np.ones(dim))
        self.beta = Param(f"{name}/beta", np.zeros(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self._name = name

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self._name}/running_mean": self.running_mean,
                f"{self._name}/running_var": self.running_var}

    def forward(self, x, mode, rng, update_stats=True):
        if mode == EVAL:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            return self.gamma.values * xhat + self.beta.values, None
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if update_stats:
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1.0 - m) * mu
            self.running_var[...] = m * self.running_var + (1.0 - m) * var
        return self.gamma.values * xhat + self.beta.values, (xhat, inv)

    def backward(self, cache, g):
        if cache is None:
            # eval mode: a fixed affine map
            return g * self.gamma.values / np.sqrt(self.running_var + self.eps)
        xhat, inv = cache
        self.gamma.grads += (g * xhat).sum(axis=0)
        self.beta.grads += g.sum(axis=0)
        gx = g * self.gamma.values
        n = g.shape[0]
        return inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))


class ReLU(Layer):
    kind = "relu"

    def __init__(self, dim):
        self.in_dim = self.out_dim = dim

    def forward(self, x, mode, rng, update_stats=True):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, g):
        return g * mask


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, dim, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.in_dim = self.out_dim = dim
        self.rate = float(rate)

    def describe(self):
        return {**super().describe(), "rate": self.rate}

    def forward(self, x, mode, rng, update_stats=True):
        if mode == EVAL or self.rate == 0.0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, keep, g):
        return g if keep is None else g * keep


class GaussianNoise(Layer):
    kind = "gaussian_noise"

    def __init__(self, dim, std):
        if std < 0:
            raise ValueError("noise std must be >= 0")
        self.in_dim = self.out_dim = dim
        self.std = float(std)

    def describe(self):
        return {**super().describe(), "std": self.std}

    def forward(self, x, mode, rng, update_stats=True):
        if mode == EVAL or self.std == 0.0:
            return x, None
        return x + self.std * rng.normal(x.shape), None


class Softmax(Layer):
    kind = "softmax"

    def __init__(self, dim):
        self.in_dim = self.out_dim = dim

    def forward(self, x, mode, rng, update_stats=True):
        p = softmax(x)
        return p, p

    def backward(self, p, g):
        return p * (g - (g * p).sum(axis=1, keepdims=True))


# -- stacks and tapes --------------------------------------------------------

@dataclass
class Tape:
    net: "Sequential"
    caches: list
    mode: str
    versions: tuple
    consumed: bool = False


class Sequential:
    def __init__(self, layers, name="net"):
        self.layers = list(layers)
        self.name = name
        self.flat = None
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"{name}: layer dims do not chain ({a.kind} -> {b.kind}: "
                                 f"{a.out_dim} != {b.in_dim})")

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def flatten(self):
        """Move unconstrained parameters into contiguous storage."""
        free = [p for p in self.params() if p.clip is None]
        if free:
            self.flat = FlatParams(free, f"{self.name}/flat")
        return self

    def optim_params(self):
        """Parameters as an optimizer should see them (flat group plus constrained ones)."""
        if self.flat is None:
            return self.params()
        return [self.flat] + [p for p in self.params() if p.clip is not None]

    def buffers(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def manifest(self):
        return [layer.describe() for layer in self.layers]

    def zero_grad(self):
        if self.flat is not None:
            self.flat.zero_grad()
            for p in self.params():
                if p.clip is not None:
                    p.zero_grad()
            return
        for p in self.params():
            p.zero_grad()

    def _versions(self):
        return tuple(p.version for p in self.params())

    def forward(self, x, mode=TRAIN, rng=None, update_stats=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected input width {self.in_dim}, got shape {x.shape}")
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}")
        if mode == TRAIN and rng is None:
            raise ValueError("train mode needs an RngState")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, mode, rng, update_stats)
            caches.append(cache)
        # NaN and inf propagate through every layer kind, so checking the output suffices
        if not np.isfinite(np.add.reduce(x, axis=None)):
            raise NumericsError(f"{self.name}: non-finite activation")
        return x, Tape(self, caches, mode, self._versions())

    def backward(self, tape, g, with_penalty=True, need_input_grad=True):
        """Zero this stack's gradients, then backpropagate ``g``.

        Returns the gradient with respect to the stack input (None when
        ``need_input_grad`` is false and the first layer is dense). With
        ``with_penalty`` the layers' own regularization gradients (dense l2,
        gate sparsity) are added.
        """
        if tape.net is not self:
            raise TapeError(f"{self.name}: tape belongs to another network")
        if tape.consumed:
            raise TapeError(f"{self.name}: tape already used for a backward pass")
        if tape.versions != self._versions():
            raise TapeError(f"{self.name}: parameters changed since this tape was recorded")
        tape.consumed = True
        self.zero_grad()
        for i in range(len(self.layers) - 1, -1, -1):
            layer, cache = self.layers[i], tape.caches[i]
            if i == 0 and not need_input_grad and isinstance(layer, Dense):
                g = layer.backward(cache, g, need_input_grad=False)
            else:
                g = layer.backward(cache, g)
        if with_penalty:
            for layer in self.layers:
                layer.penalty_backward()
        return g

    def penalty(self):
        return float(sum(layer.penalty() for layer in self.layers))


# -- losses ------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise EmptyBatchError("empty batch")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction length {pred.size} != target length {target.size}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def categorical_cross_entropy(logits, onehot):
    """Mean natural-log cross-entropy of softmax(logits); gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    onehot = np.asarray(onehot, dtype=np.float64)
    if logits.shape[0] == 0:
        raise EmptyBatchError("empty batch")
    if logits.shape != onehot.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {onehot.shape}")
    if not (np.all((onehot == 0) | (onehot == 1)) and np.all(onehot.sum(axis=1) == 1)):
        raise LabelError("every label row must be one-hot")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = float(-(onehot * logp).sum() / n)
    return loss, (np.exp(logp) - onehot) / n


def one_hot(indices, k):
    out = np.zeros((len(indices), k))
    out[np.arange(len(indices)), indices] = 1.0
    return out


# -- optimizer ---------------------------------------------------------------

class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, name="adam"):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.name = name
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self, grads=None):
        grads = [p.grads for p in self.params] if grads is None else list(grads)
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter expected")
        for p, g in zip(self.params, grads):
            if g.shape != p.values.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter {p.name} {p.values.shape}")
            # a single reduction: any NaN/inf in g makes the sum non-finite
            if not np.isfinite(np.add.reduce(g, axis=None)):
                raise NumericsError(f"non-finite gradient for {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step_size = self.lr / (1.0 - b1 ** self.t)
        v_scale = 1.0 / np.sqrt(1.0 - b2 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            # p -= lr * m_hat / (sqrt(v_hat) + eps), computed in place
            tmp = g * (1.0 - b1)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= v_scale
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step_size
            p.values -= tmp
            if p.clip is not None:
                np.clip(p.values, p.clip[0], p.clip[1], out=p.values)
            p.version += 1

    def state(self):
        arrays = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            arrays[f"{self.name}/m/{i}"] = m
            arrays[f"{self.name}/v/{i}"] = v
        return {"t": self.t, "lr": self.lr}, arrays

    def load_state(self, meta, arrays):
        self.t = int(meta["t"])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"{self.name}/m/{i}"]
            self.v[i][...] = arrays[f"{self.name}/v/{i}"]


def adam_step(opt, params=None, grads=None):
    if params is not None and [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ShapeError("parameters do not match the optimizer state")
    opt.step(grads)
    return opt.params


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tol


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps parameters whose true gradient is zero (a dense bias
    feeding batchnorm, say) from turning roundoff into large ratios.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(loss_fn, params, tol, h=1e-5, floor=1e-6):
    """Compare analytic gradients against central differences.

    ``loss_fn()`` must return the scalar loss and leave the analytic gradient
    in each ``Param.grads``; it must be a deterministic function of the
    parameter values (reseed any randomness inside it).
    """
    loss_fn()
    analytic = [p.grads.copy() for p in params]
    report = GradCheckReport(0.0, tol)
    for p, a in zip(params, analytic):
        numeric = np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            nflat[i] = (fp - fm) / (2.0 * h)
        err = float(relative_error(a, numeric, floor).max()) if a.size else 0.0
        report.per_param[p.name] = err
        report.max_rel_error = max(report.max_rel_error, err)
    loss_fn()  # leave grads consistent with the unperturbed values
    return report


def grad_check(net, loss, x, tol, seed=0, h=1e-5, target=None):
    """Finite-difference check of every parameter of ``net`` under ``loss``.

    ``loss(y)`` returns ``(value, dvalue/dy)``; when ``target`` is given it is
    called as ``loss(y, target)``. The stack runs in train mode with a freshly
    seeded stream for every evaluation, so dropout masks and noise are held
    fixed and batch statistics are part of the function.
    """
    def fn():
        y, tape = net.forward(x, TRAIN, RngState(seed), update_stats=False)
        val, g = loss(y) if target is None else loss(y, target)
        net.backward(tape, g)
        return val + net.penalty()

    return check_gradients(fn, net.params(), tol, h)


# -- checkpoint files --------------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, arrays, manifest):
    """Write an ``.npz``-compatible archive with a JSON manifest.

    Entry timestamps are fixed so identical contents give identical bytes.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=_ZIP_DATE), buf.getvalue())


def load_arrays(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, manifest
