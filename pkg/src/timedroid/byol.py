"""BYOL pre-training on binary feature vectors, one model per modality.

Online network: encoder -> projector -> predictor. Target network: encoder ->
projector, updated only by exponential moving average of the online weights
(batch-norm running statistics included). Views are produced by feature
dropout, which can only switch present features off.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .artifacts import fingerprint, load_arrays, save_arrays
from .errors import DegenerateBatch, FingerprintMismatch, ShapeMismatch
from .features import MODALITIES, FeatureVector
from .nn import Mlp, MlpSpec

MODEL_FORMAT = "timedroid-byol/1"
NORM_EPS = 1e-12


@dataclass(frozen=True)
class ByolConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    tau: float = 0.99
    dropout: float = 0.2
    encoder_hidden: tuple = (512, 256)
    embed_dim: int = 128
    projector_hidden: int = 256
    projection_dim: int = 64
    predictor_hidden: int = 256
    seed: int | None = None

    def validate(self):
        if self.seed is None:
            raise ValueError("BYOL training needs an explicit seed")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 0 or self.batch_size < 2 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 2 and lr > 0 required")
        return self

    def to_json(self):
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["encoder_hidden"] = tuple(d.get("encoder_hidden", (512, 256)))
        return cls(**d)


def augment(x, p, rng):
    """Feature dropout: zero each set bit independently with probability ``p``.

    Works on a :class:`FeatureVector` or any 0/1 array; never sets a bit.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if isinstance(x, FeatureVector):
        return FeatureVector(x.modality, x.fingerprint, augment(x.bits, p, rng))
    x = np.asarray(x)
    if p == 0.0:
        return x.copy()
    keep = rng.random(x.shape) >= p
    return (x * keep).astype(x.dtype, copy=False)


def _normalize(v):
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v / np.maximum(norm, NORM_EPS), norm


def _cos_term(q, z):
    """Mean over rows of ``2 - 2 cos(q, z)`` and its gradient w.r.t. ``q``.
    ``z`` is a constant (stop-gradient)."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    qn, qnorm = _normalize(q)
    zn, _ = _normalize(z)
    cos = (qn * zn).sum(axis=-1, keepdims=True)
    n = q.shape[0]
    loss = float((2.0 - 2.0 * cos).mean())
    dq = -2.0 / n * (zn - cos * qn) / np.maximum(qnorm, NORM_EPS)
    # a zero prediction has no direction; its term is the constant 2 there,
    # so it contributes no gradient instead of a 1/eps spike
    dq = np.where(qnorm > NORM_EPS, dq, 0.0)
    return loss, dq


def byol_loss(q1, z2, q2, z1):
    """Symmetrised BYOL loss ``[2 - 2cos(q1, z2)] + [2 - 2cos(q2, z1)]``,
    averaged over rows. Lies in [0, 8]."""
    return _cos_term(q1, z2)[0] + _cos_term(q2, z1)[0]


def byol_loss_grad(q1, z2, q2, z1):
    """Loss plus gradients w.r.t. the predictions only."""
    l1, d1 = _cos_term(q1, z2)
    l2, d2 = _cos_term(q2, z1)
    return l1 + l2, d1, d2


def ema_update(target, online, tau):
    """``target <- tau * target + (1 - tau) * online`` for every parameter and
    batch-norm buffer. ``target``/``online`` are :class:`Mlp` or equal-length
    sequences of them."""
    if isinstance(target, Mlp):
        target, online = [target], [online]
    if len(target) != len(online):
        raise ShapeMismatch("target and online networks have different depth")
    for t, o in zip(target, online):
        for store in ("params", "buffers"):
            ts, os_ = getattr(t, store), getattr(o, store)
            if ts.keys() != os_.keys():
                raise ShapeMismatch(f"{store} keys differ: {sorted(ts)} vs {sorted(os_)}")
            for k in ts:
                if ts[k].shape != os_[k].shape:
                    raise ShapeMismatch(f"{k}: {ts[k].shape} vs {os_[k].shape}")
                ts[k] = tau * ts[k] + (1.0 - tau) * os_[k]
    return target


ONLINE_PARTS = ("encoder", "projector", "predictor")
TARGET_PARTS = ("encoder", "projector")


@dataclass
class ByolModel:
    modality: str
    input_fingerprint: str
    config: ByolConfig
    online: dict            # part -> Mlp
    target: dict            # part -> Mlp (no predictor)
    loss_curve: list = field(default_factory=list)  # (epoch, step, loss)

    @classmethod
    def create(cls, input_dim, config, modality="", input_fingerprint=""):
        config.validate()
        rng = np.random.default_rng([config.seed, 1])
        enc = MlpSpec.hidden_stack((input_dim, *config.encoder_hidden, config.embed_dim))
        proj = MlpSpec.hidden_stack((config.embed_dim, config.projector_hidden, config.projection_dim))
        pred = MlpSpec.hidden_stack((config.projection_dim, config.predictor_hidden, config.projection_dim))
        online = {"encoder": Mlp(enc, rng), "projector": Mlp(proj, rng), "predictor": Mlp(pred, rng)}
        target = {p: online[p].copy() for p in TARGET_PARTS}
        return cls(modality, input_fingerprint, config, online, target)

    @property
    def input_dim(self):
        return self.online["encoder"].spec.widths[0]

    def update_target(self, tau=None):
        tau = self.config.tau if tau is None else tau
        ema_update([self.target[p] for p in TARGET_PARTS], [self.online[p] for p in TARGET_PARTS], tau)

    def target_project(self, x):
        h, _ = self.target["encoder"].forward(x, train=True, update_stats=False)
        z, _ = self.target["projector"].forward(h, train=True, update_stats=False)
        return z

    def online_forward(self, x, update_stats=True):
        caches = {}
        h = x
        for part in ONLINE_PARTS:
            h, caches[part] = self.online[part].forward(h, train=True, update_stats=update_stats)
        return h, caches

    def online_backward(self, dq, caches, grads):
        d = dq
        for part in reversed(ONLINE_PARTS):
            g, d = self.online[part].backward(d, caches[part])
            for k, v in g.items():
                key = f"{part}.{k}"
                grads[key] = grads[key] + v if key in grads else v
        return grads

    def loss_and_grads(self, v1, v2, update_stats=True):
        """Symmetric loss on two views and its gradient w.r.t. online
        parameters. Target outputs enter as constants, so no target key ever
        appears in the returned gradients."""
        z1 = self.target_project(v1)
        z2 = self.target_project(v2)
        q1, c1 = self.online_forward(v1, update_stats)
        q2, c2 = self.online_forward(v2, update_stats)
        loss, dq1, dq2 = byol_loss_grad(q1, z2, q2, z1)
        grads = {}
        self.online_backward(dq1, c1, grads)
        self.online_backward(dq2, c2, grads)
        return loss, grads

    def online_params(self):
        return {f"{part}.{k}": v for part in ONLINE_PARTS for k, v in self.online[part].params.items()}

    def encode(self, X, batch_size=4096):
        """Eval-mode online encoder output (the embedding)."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeMismatch(f"{self.modality}: expected width {self.input_dim}, got {X.shape}")
        enc = self.online["encoder"]
        out = [enc(X[i:i + batch_size], train=False) for i in range(0, len(X), batch_size)]
        return np.vstack(out) if out else np.zeros((0, enc.spec.widths[-1]))

    @property
    def fingerprint(self):
        h = fingerprint({"modality": self.modality, "input": self.input_fingerprint, "config": self.config.to_json()})
        arr = self.online["encoder"].params
        digest = hashlib.sha256(h.encode())
        for k in sorted(arr):
            digest.update(np.ascontiguousarray(arr[k]).tobytes())
        return digest.hexdigest()

    def save(self, path):
        arrays = {}
        for part in ONLINE_PARTS:
            arrays.update(self.online[part].state(f"online.{part}"))
        for part in TARGET_PARTS:
            arrays.update(self.target[part].state(f"target.{part}"))
        arrays["loss_curve"] = np.array(self.loss_curve, dtype=np.float64).reshape(-1, 3)
        meta = {
            "format": MODEL_FORMAT,
            "modality": self.modality,
            "input_fingerprint": self.input_fingerprint,
            "config": self.config.to_json(),
            "specs": {part: self.online[part].spec.to_json() for part in ONLINE_PARTS},
            "fingerprint": self.fingerprint,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        if meta.get("format") != MODEL_FORMAT:
            raise ValueError(f"{path}: not a BYOL model file")
        specs = {p: MlpSpec.from_json(s) for p, s in meta["specs"].items()}
        online = {p: Mlp.from_state(specs[p], arrays, f"online.{p}") for p in ONLINE_PARTS}
        target = {p: Mlp.from_state(specs[p], arrays, f"target.{p}") for p in TARGET_PARTS}
        curve = [tuple(r) for r in arrays["loss_curve"].tolist()]
        model = cls(meta["modality"], meta["input_fingerprint"], ByolConfig.from_json(meta["config"]), online, target, curve)
        if model.fingerprint != meta["fingerprint"]:
            raise FingerprintMismatch(f"{path}: stored weights do not match recorded fingerprint")
        return model

    def write_loss_curve(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "step", "loss"])
            for epoch, step, loss in self.loss_curve:
                w.writerow([int(epoch), int(step), repr(float(loss))])

    def epoch_losses(self):
        by_epoch = {}
        for epoch, _, loss in self.loss_curve:
            by_epoch.setdefault(int(epoch), []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def train_byol(X, config, modality="", input_fingerprint="", log=None):
    """Pre-train one modality. Deterministic for a given ``config.seed``.

    Each step draws a batch, makes two dropout views, takes a momentum-SGD
    step on the online network (cosine-decayed learning rate), then moves
    the target toward the online weights.
    """
    config.validate()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateBatch(f"need at least 2 samples to pre-train, got shape {X.shape}")
    model = ByolModel.create(X.shape[1], config, modality, input_fingerprint)
    rng = np.random.default_rng([config.seed, 2])
    bs = min(config.batch_size, X.shape[0])
    steps_per_epoch = len(_batches(X.shape[0], bs, np.random.default_rng(0)))
    total = max(1, config.epochs * steps_per_epoch)
    velocity = {k: np.zeros_like(v) for k, v in model.online_params().items()}
    step = 0
    for epoch in range(config.epochs):
        for idx in _batches(X.shape[0], bs, rng):
            x = X[idx]
            v1 = augment(x, config.dropout, rng)
            v2 = augment(x, config.dropout, rng)
            loss, grads = model.loss_and_grads(v1, v2)
            lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            for part in ONLINE_PARTS:
                params = model.online[part].params
                for k in params:
                    key = f"{part}.{k}"
                    g = grads[key]
                    if config.weight_decay and k.startswith("W"):
                        g = g + config.weight_decay * params[k]
                    velocity[key] = config.momentum * velocity[key] + g
                    params[k] = params[k] - lr * velocity[key]
            model.update_target()
            model.loss_curve.append((epoch, step, loss))
            step += 1
        if log is not None and model.loss_curve:
            log.info("%s epoch %d/%d loss %.4f", modality, epoch + 1, config.epochs, model.epoch_losses()[-1])
    return model


@dataclass
class Embedding:
    ids: list
    X: np.ndarray                   # (n, sum of embed dims), fixed modality order
    model_fingerprints: dict        # modality -> BYOL model fingerprint
    order: tuple = MODALITIES

    @property
    def fingerprint(self):
        return fingerprint({"order": list(self.order), "models": self.model_fingerprints})

    def rows(self, ids):
        pos = {s: i for i, s in enumerate(self.ids)}
        return self.X[[pos[s] for s in ids]]

    def save(self, path):
        save_arrays(path, {"X": self.X}, {
            "ids": self.ids, "order": list(self.order),
            "model_fingerprints": self.model_fingerprints, "fingerprint": self.fingerprint,
        })

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        return cls(meta["ids"], arrays["X"], meta["model_fingerprints"], tuple(meta["order"]))


def embed(models, matrices, order=MODALITIES):
    """Concatenate per-modality encoder outputs in the fixed modality order.

    ``models`` and ``matrices`` map modality -> :class:`ByolModel` /
    :class:`~timedroid.features.FeatureMatrix`. The order is part of the
    contract; any other permutation is refused.
    """
    if tuple(order) != MODALITIES:
        raise ValueError(f"embedding order is fixed to {MODALITIES}, got {tuple(order)}")
    if set(models) != set(MODALITIES) or set(matrices) != set(MODALITIES):
        raise ValueError(f"need exactly the modalities {MODALITIES}")
    ids = matrices[MODALITIES[0]].ids
    parts = []
    for m in MODALITIES:
        model, mat = models[m], matrices[m]
        if model.modality and model.modality != m:
            raise ValueError(f"model for {m} was trained on {model.modality}")
        if model.input_fingerprint != mat.fingerprint:
            raise FingerprintMismatch(
                f"{m}: model trained on columns {model.input_fingerprint[:12]}, matrix has {mat.fingerprint[:12]}"
            )
        if mat.ids != ids:
            raise ValueError(f"{m}: matrix rows are not aligned with {MODALITIES[0]}")
        parts.append(model.encode(mat.X))
    return Embedding(list(ids), np.hstack(parts), {m: models[m].fingerprint for m in MODALITIES})
