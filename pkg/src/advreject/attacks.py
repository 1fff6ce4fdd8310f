"""Adversarial example generators against a source network.

All attacks work on batches, never modify their inputs, and return points
inside the ``[0, 1]`` box.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .nn import Network, model_hash

logger = logging.getLogger(__name__)


class AttackKind(str, enum.Enum):
    FGS = "fgs"
    DEEPFOOL = "deepfool"
    BOXMIN = "boxmin"


class PreconditionError(ValueError):
    """Attack input violates a precondition (e.g. already misclassified)."""


@dataclass
class AttackConfig:
    """Hyperparameters for all three generators.

    ``fgs_epsilon=None`` means "tune on the attacked samples" to reach
    ``target_fool_rate``.
    """

    fgs_epsilon: float | None = None
    epsilon_grid: list = field(default_factory=lambda: [0.005 * 2**j for j in range(9)])
    target_fool_rate: float = 1.0
    deepfool_max_iter: int = 50
    overshoot: float = 0.02
    stability: float = 1e-4
    box_c_range: tuple = (1e-3, 1e3)
    box_steps: int = 12
    box_iterations: int = 100
    box_step_size: float = 0.05
    box_target: str = "runner-up"

    def __post_init__(self):
        if self.fgs_epsilon is not None and self.fgs_epsilon < 0:
            raise ValueError("fgs_epsilon must be >= 0")
        if self.deepfool_max_iter < 1:
            raise ValueError("deepfool_max_iter must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        lo, hi = self.box_c_range
        if not 0 < lo < hi:
            raise ValueError(f"box_c_range must satisfy 0 < low < high, got {self.box_c_range}")
        if self.box_target != "runner-up":
            raise ValueError("only the 'runner-up' box target rule is supported")
        self.epsilon_grid = sorted(float(e) for e in self.epsilon_grid)
        self.box_c_range = (float(lo), float(hi))

    def to_dict(self):
        d = asdict(self)
        d["box_c_range"] = list(self.box_c_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "box_c_range" in d:
            d["box_c_range"] = tuple(d["box_c_range"])
        return cls(**d)


def _network(net):
    if isinstance(net, Network):
        return net
    inner = getattr(net, "network_", None)
    if isinstance(inner, Network):
        return inner
    raise TypeError(f"expected a Network or fitted NeuralNetClassifier, got {type(net).__name__}")


def distortion(x, x_adv):
    """Root-mean-square difference between two equal-shape samples."""
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    return np.sqrt(np.mean((x - x_adv) ** 2))


def batch_distortion(X, X_adv):
    X = np.asarray(X, dtype=np.float64)
    X_adv = np.asarray(X_adv, dtype=np.float64)
    if X.shape != X_adv.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_adv.shape}")
    diff = (X - X_adv).reshape(len(X), -1)
    return np.sqrt(np.mean(diff**2, axis=1))


def fgs(net, x, y, epsilon):
    """Fast gradient sign step ``clip(x + eps * sign(grad_x loss), 0, 1)``."""
    net = _network(net)
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    g = net.input_gradient(x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def fool_rate(net, X, y, epsilon):
    net = _network(net)
    return float(np.mean(net.predict(fgs(net, X, y, epsilon)) != np.asarray(y)))


def tune_epsilon(net, X, y, target_fool_rate=1.0, grid=None):
    """Smallest grid epsilon whose FGS adversaries fool at least ``target_fool_rate``.

    Returns ``(epsilon, reached)``. When no grid value reaches the target the
    largest one is returned with ``reached=False`` and a warning is issued.
    """
    net = _network(net)
    if len(X) == 0:
        raise ValueError("cannot tune epsilon on an empty sample set")
    grid = sorted(grid if grid is not None else AttackConfig().epsilon_grid)
    best = 0.0
    for eps in grid:
        rate = fool_rate(net, X, y, eps)
        logger.debug("fgs eps=%g fool rate %.4f", eps, rate)
        best = max(best, rate)
        if rate >= target_fool_rate:
            return eps, True
    warnings.warn(
        f"FGS fool rate target {target_fool_rate:.3f} not reached on grid (best {best:.3f}); "
        f"using eps={grid[-1]:g}",
        RuntimeWarning,
        stacklevel=2,
    )
    return grid[-1], False


@dataclass
class DeepFoolResult:
    perturbed: np.ndarray
    perturbation: np.ndarray  # accumulated step before overshoot and clipping
    iterations: np.ndarray
    success: np.ndarray


def deepfool(net, x, max_iter=50, overshoot=0.02, stability=1e-4, label=None):
    """Multiclass DeepFool on logits.

    Each iteration linearises every logit difference ``f_k - f_k0`` at the
    current iterate, steps onto the closest linearised boundary (plus the
    ``stability`` constant), and stops once the overshot, clipped point
    ``clip(x + (1 + overshoot) * r)`` leaves class ``k0``. Accepts one sample
    or a batch; ``k0`` is the network's prediction on the clean input, which
    must equal ``label`` when one is given.
    """
    net = _network(net)
    xb = np.asarray(x, dtype=np.float64)
    single = xb.shape == net.input_shape
    if single:
        xb = xb[None]
    n = len(xb)
    k0 = net.predict(xb)
    if label is not None and np.any(k0 != np.atleast_1d(label)):
        raise PreconditionError("DeepFool requires inputs the network classifies correctly")
    r_tot = np.zeros_like(xb)
    iters = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    current = xb.copy()
    out = xb.copy()
    for _ in range(max_iter):
        active = np.flatnonzero(~done)
        if len(active) == 0:
            break
        f, jac = net.logit_jacobian(current[active])
        rows = np.arange(len(active))
        f_diff = f - f[rows, k0[active]][:, None]
        w = jac - jac[rows, k0[active]][:, None]
        # drop components that would push a coordinate already on the box boundary outwards
        cur = current[active][:, None]
        w = np.where(((cur <= 0.0) & (w < 0)) | ((cur >= 1.0) & (w > 0)), 0.0, w)
        w_flat = w.reshape(len(active), net.n_classes, -1)
        norms = np.linalg.norm(w_flat, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f_diff) / norms
        ratio[rows, k0[active]] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        l = np.argmin(ratio, axis=1)
        f_l = np.abs(f_diff[rows, l])
        n_l = norms[rows, l]
        ok = np.isfinite(ratio[rows, l])
        coef = np.where(ok, (f_l + stability) / np.where(ok, n_l, 1.0) ** 2, 0.0)
        step = coef.reshape((-1,) + (1,) * (xb.ndim - 1)) * w[rows, l]
        r_tot[active] += step
        iters[active] += 1
        out[active] = np.clip(xb[active] + (1 + overshoot) * r_tot[active], 0.0, 1.0)
        current[active] = out[active]
        # keep only the part of the step the box allows
        r_tot[active] = (out[active] - xb[active]) / (1 + overshoot)
        crossed = net.predict(out[active]) != k0[active]
        done[active[crossed | ~ok]] = True
    success = net.predict(out) != k0
    res = DeepFoolResult(out, r_tot, iters, success)
    if single:
        return DeepFoolResult(out[0], r_tot[0], iters[0], bool(success[0]))
    return res


@dataclass
class BoxMinResult:
    perturbed: np.ndarray
    success: np.ndarray
    target: np.ndarray
    penalty: np.ndarray  # largest successful penalty weight c (nan on failure)


def _runner_up(probs):
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, 1]


def box_min_perturbation(net, x, y, target=None, config=None):
    """Box-constrained minimum perturbation towards ``target``.

    Approximately minimises ``c * ||r||^2 + loss(x + r, target)`` over
    ``x + r`` in ``[0, 1]`` with proximal projected gradient descent, and
    bisects ``c`` (geometrically, ``config.box_steps`` rounds) for the
    largest penalty that still lands in ``target``. The closest successful
    iterate seen anywhere in the search is returned. ``target`` defaults to
    the runner-up class of ``net(x)``.
    """
    cfg = config or AttackConfig()
    net = _network(net)
    xb = np.asarray(x, dtype=np.float64)
    single = xb.shape == net.input_shape
    if single:
        xb = xb[None]
    n = len(xb)
    y = np.atleast_1d(np.asarray(y)).astype(np.intp)
    probs = net.forward(xb)
    if np.any(np.argmax(probs, axis=1) != y):
        raise PreconditionError("box-min attack requires correctly classified inputs")
    if target is None:
        target = _runner_up(probs)
    target = np.broadcast_to(np.atleast_1d(np.asarray(target)).astype(np.intp), (n,)).copy()
    if np.any(target == y):
        raise PreconditionError("target class must differ from the true label")

    lo = np.full(n, np.log(cfg.box_c_range[0]))
    hi = np.full(n, np.log(cfg.box_c_range[1]))
    best = xb.copy()
    best_dist = np.full(n, np.inf)
    best_c = np.full(n, np.nan)
    shape = (-1,) + (1,) * (xb.ndim - 1)
    alpha = cfg.box_step_size
    for round_ in range(cfg.box_steps):
        # first round probes the weakest penalty so a feasible c is known early
        log_c = lo if round_ == 0 else 0.5 * (lo + hi)
        c = np.exp(log_c).reshape(shape)
        cur = xb.copy()
        hit = np.zeros(n, dtype=bool)
        for _ in range(cfg.box_iterations):
            z = cur - alpha * net.input_gradient(cur, target)
            cur = np.clip((2 * c * alpha * xb + z) / (1 + 2 * c * alpha), 0.0, 1.0)
            pred = net.predict(cur)
            d = batch_distortion(xb, cur)
            better = (pred == target) & (d < best_dist)
            best[better] = cur[better]
            best_dist[better] = d[better]
            best_c[better] = np.exp(log_c[better])
            hit |= pred == target
        if round_ == 0:
            # the weakest-penalty probe only seeds best; bisection runs on [lo, hi]
            continue
        lo = np.where(hit, log_c, lo)
        hi = np.where(hit, hi, log_c)
    success = np.isfinite(best_dist)
    if single:
        return BoxMinResult(best[0], bool(success[0]), int(target[0]), float(best_c[0]))
    return BoxMinResult(best, success, target, best_c)


@dataclass
class AdversarialExample:
    original: np.ndarray
    perturbed: np.ndarray
    true_label: int
    source_prediction: int
    kind: AttackKind
    distortion: float
    success: bool


class AdversarySet:
    """Adversaries generated from one clean set, stored column-wise."""

    def __init__(self, kind, originals, perturbed, labels, source_predictions, meta=None):
        self.kind = AttackKind(kind)
        self.originals = np.asarray(originals, dtype=np.float64)
        self.perturbed = np.asarray(perturbed, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.intp)
        self.source_predictions = np.asarray(source_predictions, dtype=np.intp)
        self.meta = dict(meta or {})
        if self.originals.shape != self.perturbed.shape:
            raise ValueError("originals and perturbed shapes differ")
        if not (len(self.labels) == len(self.source_predictions) == len(self.originals)):
            raise ValueError("per-example arrays have inconsistent lengths")
        self.distortions = batch_distortion(self.originals, self.perturbed) if len(self.originals) else np.zeros(0)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return AdversarialExample(
            self.originals[i],
            self.perturbed[i],
            int(self.labels[i]),
            int(self.source_predictions[i]),
            self.kind,
            float(self.distortions[i]),
            bool(self.success[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def success(self):
        """Whether the source network is fooled."""
        return self.source_predictions != self.labels

    def fooling(self):
        """Subset of examples that fool the source network."""
        m = self.success
        return AdversarySet(
            self.kind, self.originals[m], self.perturbed[m], self.labels[m], self.source_predictions[m], self.meta
        )

    def summary(self):
        return {
            "kind": self.kind.value,
            "count": len(self),
            "fooling": int(self.success.sum()),
            "mean_distortion": float(self.distortions.mean()) if len(self) else 0.0,
        }


def correctly_classified(net, X, y):
    net = _network(net)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.intp)
    mask = net.predict(X) == y if len(X) else np.zeros(0, dtype=bool)
    return X[mask], y[mask]


def generate_adversary_set(net, X, y, kind, config=None, already_filtered=False):
    """Attack every sample the source network classifies correctly.

    The returned set keeps all attempts; use :meth:`AdversarySet.fooling`
    for the successful ones.
    """
    cfg = config or AttackConfig()
    net = _network(net)
    kind = AttackKind(kind)
    if not already_filtered:
        X, y = correctly_classified(net, X, y)
    meta = {"config": cfg.to_dict(), "source_model_hash": model_hash(net)}
    if len(X) == 0:
        return AdversarySet(kind, X, X, y, y, meta)
    if kind is AttackKind.FGS:
        eps = cfg.fgs_epsilon
        if eps is None:
            eps, reached = tune_epsilon(net, X, y, cfg.target_fool_rate, cfg.epsilon_grid)
            meta["epsilon_reached_target"] = reached
        meta["epsilon"] = eps
        adv = fgs(net, X, y, eps)
    elif kind is AttackKind.DEEPFOOL:
        res = deepfool(net, X, cfg.deepfool_max_iter, cfg.overshoot, cfg.stability, label=y)
        adv = res.perturbed
        meta["mean_iterations"] = float(np.mean(res.iterations))
    else:
        res = box_min_perturbation(net, X, y, None, cfg)
        adv = res.perturbed
        meta["targets"] = res.target.tolist()
    return AdversarySet(kind, X, adv, y, net.predict(adv), meta)


class AdversaryGenerator(TransformerMixin, BaseEstimator):
    """Transformer wrapper: ``fit`` tunes FGS epsilon, ``transform`` perturbs.

    ``transform(X, y)`` needs the true labels; inputs the source network
    misclassifies are passed through unchanged.
    """

    def __init__(self, source, kind="fgs", config=None):
        self.source = source
        self.kind = kind
        self.config = config

    def fit(self, X, y):
        cfg = self.config or AttackConfig()
        self.epsilon_ = cfg.fgs_epsilon
        if AttackKind(self.kind) is AttackKind.FGS and self.epsilon_ is None:
            Xc, yc = correctly_classified(self.source, X, y)
            self.epsilon_, self.reached_target_ = tune_epsilon(
                self.source, Xc, yc, cfg.target_fool_rate, cfg.epsilon_grid
            )
        return self

    def transform(self, X, y):
        net = _network(self.source)
        cfg = self.config or AttackConfig()
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(np.intp)
        out = X.copy()
        mask = net.predict(X) == y
        if not mask.any():
            return out
        kind = AttackKind(self.kind)
        if kind is AttackKind.FGS:
            eps = getattr(self, "epsilon_", None)
            if eps is None:
                raise ValueError("call fit() first or set config.fgs_epsilon")
            out[mask] = fgs(net, X[mask], y[mask], eps)
        elif kind is AttackKind.DEEPFOOL:
            out[mask] = deepfool(net, X[mask], cfg.deepfool_max_iter, cfg.overshoot, cfg.stability).perturbed
        else:
            out[mask] = box_min_perturbation(net, X[mask], y[mask], None, cfg).perturbed
        return out


# -- persistence -------------------------------------------------------------

TENSOR_MAGIC = b"ADVT"
TENSOR_VERSION = 1


def write_tensors(path, arrays):
    """Write equal-shape float64 arrays as one flat little-endian file.

    Header: magic ``ADVT``, u32 version, u64 count, u32 ndim, ndim x u32 dims;
    payload: ``count`` row-major records of ``prod(dims)`` float64 values.
    """
    arrays = np.ascontiguousarray(arrays, dtype="<f8")
    count, *dims = arrays.shape
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<IQI", TENSOR_VERSION, count, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(arrays.tobytes())


def read_tensors(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not an adversary tensor file")
    version, count, ndim = struct.unpack_from("<IQI", data, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor file version {version}")
    off = 4 + struct.calcsize("<IQI")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    expected = count * int(np.prod(dims, dtype=np.int64)) * 8
    if len(data) - off != expected:
        raise ValueError(f"{path}: payload has {len(data) - off} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f8", offset=off).reshape((count, *dims)).astype(np.float64)


def save_adversary_set(adv, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(adv)
    write_tensors(directory / "tensors.bin", np.concatenate([adv.originals, adv.perturbed]))
    manifest = {
        **adv.summary(),
        "shape": list(adv.originals.shape[1:]),
        "labels": adv.labels.tolist(),
        "source_predictions": adv.source_predictions.tolist(),
        "meta": adv.meta,
        "tensors_sha256": hashlib.sha256((directory / "tensors.bin").read_bytes()).hexdigest(),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_adversary_set(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = read_tensors(directory / "tensors.bin")
    n = manifest["count"]
    if len(tensors) != 2 * n:
        raise ValueError(f"{directory}: expected {2 * n} tensors, found {len(tensors)}")
    return AdversarySet(
        manifest["kind"],
        tensors[:n],
        tensors[n:],
        manifest["labels"],
        manifest["source_predictions"],
        manifest.get("meta"),
    )
