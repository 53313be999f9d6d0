"""Small numpy MLPs (linear -> optional batch norm -> optional ReLU) with
hand-written backprop. float64 throughout."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBatch, ShapeMismatch

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    batchnorm: tuple
    relu: tuple

    def __post_init__(self):
        n = len(self.widths) - 1
        if n < 1:
            raise ValueError("an MLP needs at least one layer")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.widths}")
        if len(self.batchnorm) != n or len(self.relu) != n:
            raise ValueError("need one batchnorm/relu flag per layer")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @classmethod
    def hidden_stack(cls, widths):
        """BN + ReLU after every layer except the last (plain linear output)."""
        n = len(widths) - 1
        flags = tuple(i < n - 1 for i in range(n))
        return cls(tuple(int(w) for w in widths), flags, flags)

    def to_json(self):
        return {"widths": list(self.widths), "batchnorm": list(self.batchnorm), "relu": list(self.relu)}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["widths"]), tuple(d["batchnorm"]), tuple(d["relu"]))


class Mlp:
    def __init__(self, spec, rng=None, params=None, buffers=None):
        self.spec = spec
        if params is None:
            params, buffers = self._init(spec, rng or np.random.default_rng(0))
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    @staticmethod
    def _init(spec, rng):
        params, buffers = {}, {}
        for i in range(spec.n_layers):
            fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
            bound = np.sqrt(6.0 / fan_in)  # He-uniform for ReLU stacks
            params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
            if spec.batchnorm[i]:
                params[f"gamma{i}"] = np.ones(fan_out)
                params[f"beta{i}"] = np.zeros(fan_out)
                buffers[f"mean{i}"] = np.zeros(fan_out)
                buffers[f"var{i}"] = np.ones(fan_out)
        return params, buffers

    def copy(self):
        return Mlp(
            self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def forward(self, x, train=True, update_stats=True):
        """Returns ``(out, cache)``. Train mode normalizes with batch
        statistics (and folds them into running stats when ``update_stats``);
        eval mode uses the running statistics."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.widths[0]:
            raise ShapeMismatch(f"expected (batch, {self.spec.widths[0]}), got {x.shape}")
        if train and any(self.spec.batchnorm) and x.shape[0] < 2:
            raise DegenerateBatch(f"batch norm in train mode needs >= 2 rows, got {x.shape[0]}")
        cache = []
        h = x
        for i in range(self.spec.n_layers):
            p = self.params
            layer = {"x": h}
            h = h @ p[f"W{i}"] + p[f"b{i}"]
            if self.spec.batchnorm[i]:
                if train:
                    mu = h.mean(axis=0)
                    var = h.var(axis=0)
                    if update_stats:
                        n = h.shape[0]
                        self.buffers[f"mean{i}"] = BN_MOMENTUM * self.buffers[f"mean{i}"] + (1 - BN_MOMENTUM) * mu
                        self.buffers[f"var{i}"] = (
                            BN_MOMENTUM * self.buffers[f"var{i}"] + (1 - BN_MOMENTUM) * var * n / (n - 1)
                        )
                else:
                    mu = self.buffers[f"mean{i}"]
                    var = self.buffers[f"var{i}"]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (h - mu) * inv_std
                layer["xhat"] = xhat
                layer["inv_std"] = inv_std
                h = p[f"gamma{i}"] * xhat + p[f"beta{i}"]
            if self.spec.relu[i]:
                layer["mask"] = h > 0
                h = h * layer["mask"]
            cache.append(layer)
        return h, {"layers": cache, "train": train}

    def __call__(self, x, train=False):
        return self.forward(x, train=train, update_stats=False)[0]

    def backward(self, dout, cache):
        """Gradients of a scalar loss w.r.t. parameters and the input, given
        ``dout = dL/d(out)``. Train-mode batch norm backprops through the
        batch statistics; eval-mode treats them as constants."""
        grads = {}
        d = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(self.spec.n_layers)):
            layer = cache["layers"][i]
            if self.spec.relu[i]:
                d = d * layer["mask"]
            if self.spec.batchnorm[i]:
                xhat, inv_std = layer["xhat"], layer["inv_std"]
                grads[f"gamma{i}"] = (d * xhat).sum(axis=0)
                grads[f"beta{i}"] = d.sum(axis=0)
                dxhat = d * self.params[f"gamma{i}"]
                if cache["train"]:
                    n = d.shape[0]
                    d = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    d = dxhat * inv_std
            x = layer["x"]
            grads[f"W{i}"] = x.T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            d = d @ self.params[f"W{i}"].T
        return grads, d

    def state(self, prefix):
        out = {f"{prefix}.{k}": v for k, v in self.params.items()}
        out.update({f"{prefix}.buf.{k}": v for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_state(cls, spec, arrays, prefix):
        params, buffers = {}, {}
        for k, v in arrays.items():
            if k.startswith(prefix + ".buf."):
                buffers[k[len(prefix) + 5:]] = np.array(v, dtype=np.float64)
            elif k.startswith(prefix + "."):
                params[k[len(prefix) + 1:]] = np.array(v, dtype=np.float64)
        return cls(spec, params=params, buffers=buffers)
