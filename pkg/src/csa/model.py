"""Differentiable event-time models.

One shared encoder maps covariates to a latent representation; on top of it
sit, depending on the configured mode:

* ``csa``       stochastic event-time heads per arm fed by a planar-flow
                transform of uniform noise,
* ``csa-info``  the same plus an independent censoring flow and per-arm
                censoring heads,
* ``aft-ln`` / ``aft-w``  parametric heads emitting log-normal or Weibull
                distribution parameters,
* ``sr``        deterministic per-arm regression heads.

All parameters live in one flat float64 vector so the optimizer and the
gradient checks can treat the model as a plain function R^n -> R. Hidden
layers use leaky-ReLU, batch normalization and dropout; output layers end in
an exponential so sampled times are strictly positive.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concat, lift, no_grad, parameter

MODES = ("csa", "csa-info", "aft-ln", "aft-w", "sr")

# np.exp overflows just above 709; fail a little earlier with a clear message
_EXP_OVERFLOW = 700.0

CHECKPOINT_SCHEMA_VERSION = 1


class ModelOverflowError(RuntimeError):
    """Raised when an exponential output layer would overflow."""

    def __init__(self, preactivation: float):
        self.preactivation = float(preactivation)
        super().__init__(
            f"exponential output overflow: pre-activation {self.preactivation:.3f} "
            f"exceeds {_EXP_OVERFLOW}"
        )


@dataclass
class ModelConfig:
    mode: str
    input_dim: int
    hidden_dim: int = 100
    latent_dim: int = 100
    noise_dim: int = 100
    concat_hidden: int = 200
    dropout: float = 0.2
    leaky_slope: float = 0.01
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    output_scale: float = 1.0
    noise_dist: str = "uniform"  # "gaussian" accepted as an alternative source

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.noise_dist not in ("uniform", "gaussian"):
            raise ValueError("noise_dist must be 'uniform' or 'gaussian'")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


class Affine:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm:
    """Batch normalization with EMA running statistics for evaluation."""

    def __init__(self, gamma: Tensor, beta: Tensor, momentum: float, eps: float):
        self.gamma = gamma
        self.beta = beta
        self.momentum = momentum
        self.eps = eps
        width = gamma.data.size
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if train:
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mu.data.ravel()
            self.running_var = m * self.running_var + (1.0 - m) * var.data.ravel()
            z = centered / (var + self.eps).sqrt()
        else:
            z = (x - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))
        return z * self.gamma + self.beta


def _dropout(x: Tensor, p: float, train: bool, rng) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode forward needs a noise stream (rng)")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * mask


class HiddenLayer:
    """affine -> batch norm -> leaky ReLU -> dropout"""

    def __init__(self, affine: Affine, bn: BatchNorm, slope: float, dropout: float):
        self.affine = affine
        self.bn = bn
        self.slope = slope
        self.dropout = dropout

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        h = self.bn(self.affine(x), train).leaky_relu(self.slope)
        return _dropout(h, self.dropout, train, rng)


@dataclass
class PlanarFlowParams:
    """Single-layer skip transform eps + U tanh(W eps + b)."""

    U: Tensor
    W: Tensor
    b: Tensor


def planar_transform(eps, flow: PlanarFlowParams) -> Tensor:
    """Apply the planar skip transform to a (n, d) block of noise draws."""
    eps = lift(eps)
    return eps + (eps @ flow.W.T + flow.b).tanh() @ flow.U.T


class FlowHead:
    """Two-layer head whose second layer sees [h1, transformed noise]."""

    def __init__(self, layer1: HiddenLayer, layer2: HiddenLayer, out: Affine,
                 output_scale: float):
        self.layer1 = layer1
        self.layer2 = layer2
        self.out = out
        self.output_scale = output_scale

    def __call__(self, r: Tensor, eps_tilde: Tensor, train: bool, rng) -> Tensor:
        h1 = self.layer1(r, train, rng)
        h2 = self.layer2(concat([h1, eps_tilde], axis=1), train, rng)
        pre = self.out(h2).reshape(h2.data.shape[0])
        return _positive_output(pre, self.output_scale)


class AftHead:
    """Two-layer trunk with distribution-parameter outputs."""

    def __init__(self, layer1, layer2, out_a: Affine, out_b: Affine,
                 family: str, output_scale: float):
        self.layer1 = layer1
        self.layer2 = layer2
        self.out_a = out_a
        self.out_b = out_b
        self.family = family
        self.output_scale = output_scale

    def __call__(self, r: Tensor, train: bool, rng):
        h = self.layer2(self.layer1(r, train, rng), train, rng)
        n = h.data.shape[0]
        a = self.out_a(h).reshape(n)
        b = self.out_b(h).reshape(n)
        if self.family == "log-normal":
            mu = a + math.log(self.output_scale)
            sigma = b.softplus()
            _require_finite(mu.data, "log-normal location")
            _require_finite(sigma.data, "log-normal scale")
            return mu, sigma
        lam = a.softplus() * self.output_scale
        k = b.softplus()
        _require_finite(lam.data, "Weibull scale")
        _require_finite(k.data, "Weibull shape")
        return lam, k


class SrHead:
    def __init__(self, layer1, layer2, out: Affine, output_scale: float):
        self.layer1 = layer1
        self.layer2 = layer2
        self.out = out
        self.output_scale = output_scale

    def __call__(self, r: Tensor, train: bool, rng) -> Tensor:
        h = self.layer2(self.layer1(r, train, rng), train, rng)
        pre = self.out(h).reshape(h.data.shape[0])
        return _positive_output(pre, self.output_scale)


def _positive_output(pre: Tensor, scale: float) -> Tensor:
    peak = float(np.max(pre.data)) if pre.data.size else 0.0
    if not np.isfinite(pre.data).all() or peak > _EXP_OVERFLOW:
        raise ModelOverflowError(peak)
    return pre.exp() * scale


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class SurvivalModel:
    """Mode-specific network ensemble over one flat parameter vector."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._spec: list[tuple[str, tuple, str]] = []  # (name, shape, init kind)
        self._declare()
        total = sum(int(np.prod(shape)) for _, shape, _ in self._spec)
        self.flat = np.zeros(total)
        self.param_names: list[str] = []
        self.param_tensors: list[Tensor] = []
        self._tensors: dict[str, Tensor] = {}
        offset = 0
        for name, shape, _ in self._spec:
            size = int(np.prod(shape))
            view = self.flat[offset:offset + size].reshape(shape)
            t = parameter(view)
            t.data = view  # keep the flat buffer as backing storage
            self.param_names.append(name)
            self.param_tensors.append(t)
            self._tensors[name] = t
            offset += size
        self._build()

    # -- architecture declaration -------------------------------------------

    def _declare(self):
        c = self.config
        self._declare_hidden("encoder.1", c.input_dim, c.hidden_dim)
        self._declare_hidden("encoder.2", c.hidden_dim, c.latent_dim)
        if c.mode in ("csa", "csa-info"):
            self._declare_flow("event_flow")
            for arm in (0, 1):
                self._declare_flow_head(f"event_head.{arm}")
            if c.mode == "csa-info":
                self._declare_flow("censor_flow")
                for arm in (0, 1):
                    self._declare_flow_head(f"censor_head.{arm}")
        elif c.mode in ("aft-ln", "aft-w"):
            for arm in (0, 1):
                self._declare_trunk_head(f"aft_head.{arm}", n_outputs=2)
        else:  # sr
            for arm in (0, 1):
                self._declare_trunk_head(f"sr_head.{arm}", n_outputs=1)

    def _declare_hidden(self, name, n_in, n_out):
        self._spec.append((f"{name}.W", (n_in, n_out), "weight"))
        self._spec.append((f"{name}.b", (n_out,), "weight"))
        self._spec.append((f"{name}.gamma", (n_out,), "one"))
        self._spec.append((f"{name}.beta", (n_out,), "zero"))

    def _declare_flow(self, name):
        d = self.config.noise_dim
        self._spec.append((f"{name}.U", (d, d), "weight"))
        self._spec.append((f"{name}.W", (d, d), "weight"))
        self._spec.append((f"{name}.b", (d,), "weight"))

    def _declare_flow_head(self, name):
        c = self.config
        self._declare_hidden(f"{name}.1", c.latent_dim, c.hidden_dim)
        self._declare_hidden(f"{name}.2", c.hidden_dim + c.noise_dim, c.concat_hidden)
        self._spec.append((f"{name}.out.W", (c.concat_hidden, 1), "weight"))
        self._spec.append((f"{name}.out.b", (1,), "weight"))

    def _declare_trunk_head(self, name, n_outputs):
        c = self.config
        self._declare_hidden(f"{name}.1", c.latent_dim, c.hidden_dim)
        self._declare_hidden(f"{name}.2", c.hidden_dim, c.hidden_dim)
        outs = ("out_a", "out_b")[:n_outputs] if n_outputs == 2 else ("out",)
        for out in outs:
            self._spec.append((f"{name}.{out}.W", (c.hidden_dim, 1), "weight"))
            self._spec.append((f"{name}.{out}.b", (1,), "weight"))

    # -- component assembly ---------------------------------------------------

    def _hidden(self, name) -> HiddenLayer:
        c = self.config
        affine = Affine(self._tensors[f"{name}.W"], self._tensors[f"{name}.b"])
        bn = BatchNorm(self._tensors[f"{name}.gamma"], self._tensors[f"{name}.beta"],
                       c.bn_momentum, c.bn_eps)
        self.batch_norms[name] = bn
        return HiddenLayer(affine, bn, c.leaky_slope, c.dropout)

    def _affine(self, name) -> Affine:
        return Affine(self._tensors[f"{name}.W"], self._tensors[f"{name}.b"])

    def _build(self):
        c = self.config
        self.batch_norms: dict[str, BatchNorm] = {}
        self.encoder = [self._hidden("encoder.1"), self._hidden("encoder.2")]
        self.event_flow = self.censor_flow = None
        self.event_heads = self.censor_heads = None
        self.aft_heads = self.sr_heads = None
        if c.mode in ("csa", "csa-info"):
            self.event_flow = PlanarFlowParams(
                self._tensors["event_flow.U"], self._tensors["event_flow.W"],
                self._tensors["event_flow.b"])
            self.event_heads = [
                FlowHead(self._hidden(f"event_head.{arm}.1"),
                         self._hidden(f"event_head.{arm}.2"),
                         self._affine(f"event_head.{arm}.out"),
                         c.output_scale)
                for arm in (0, 1)
            ]
            if c.mode == "csa-info":
                self.censor_flow = PlanarFlowParams(
                    self._tensors["censor_flow.U"], self._tensors["censor_flow.W"],
                    self._tensors["censor_flow.b"])
                self.censor_heads = [
                    FlowHead(self._hidden(f"censor_head.{arm}.1"),
                             self._hidden(f"censor_head.{arm}.2"),
                             self._affine(f"censor_head.{arm}.out"),
                             c.output_scale)
                    for arm in (0, 1)
                ]
        elif c.mode in ("aft-ln", "aft-w"):
            family = "log-normal" if c.mode == "aft-ln" else "weibull"
            self.aft_heads = [
                AftHead(self._hidden(f"aft_head.{arm}.1"),
                        self._hidden(f"aft_head.{arm}.2"),
                        self._affine(f"aft_head.{arm}.out_a"),
                        self._affine(f"aft_head.{arm}.out_b"),
                        family, c.output_scale)
                for arm in (0, 1)
            ]
        else:
            self.sr_heads = [
                SrHead(self._hidden(f"sr_head.{arm}.1"),
                       self._hidden(f"sr_head.{arm}.2"),
                       self._affine(f"sr_head.{arm}.out"),
                       c.output_scale)
                for arm in (0, 1)
            ]

    # -- parameter vector ------------------------------------------------------

    def initialize(self, rng, low: float = -0.01, high: float = 0.01) -> "SurvivalModel":
        offset = 0
        for name, shape, kind in self._spec:
            size = int(np.prod(shape))
            if kind == "weight":
                self.flat[offset:offset + size] = rng.uniform(low, high, size=size)
            elif kind == "one":
                self.flat[offset:offset + size] = 1.0
            else:
                self.flat[offset:offset + size] = 0.0
            offset += size
        return self

    def n_params(self) -> int:
        return self.flat.size

    def get_flat(self) -> np.ndarray:
        return self.flat.copy()

    def set_flat(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != self.flat.shape:
            raise ValueError(f"expected {self.flat.shape} parameters, got {vector.shape}")
        self.flat[:] = vector

    def zero_grads(self) -> None:
        for t in self.param_tensors:
            t.grad = None

    def grad_flat(self) -> np.ndarray:
        parts = []
        for t in self.param_tensors:
            if t.grad is None:
                parts.append(np.zeros(t.data.size))
            else:
                parts.append(np.asarray(t.grad).ravel())
        return np.concatenate(parts)

    def get_state(self) -> dict:
        """Full trainable + running-statistics snapshot."""
        return {
            "flat": self.flat.copy(),
            "bn": {name: (bn.running_mean.copy(), bn.running_var.copy())
                   for name, bn in self.batch_norms.items()},
        }

    def set_state(self, state: dict) -> None:
        self.set_flat(state["flat"])
        for name, (mean, var) in state["bn"].items():
            bn = self.batch_norms[name]
            bn.running_mean = mean.copy()
            bn.running_var = var.copy()

    # -- forward -----------------------------------------------------------------

    def encode(self, x, train: bool = False, rng=None) -> Tensor:
        x = lift(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        if not np.isfinite(x.data).all():
            raise ValueError("non-finite covariate input")
        if x.data.shape[1] != self.config.input_dim:
            raise ValueError(
                f"expected {self.config.input_dim} covariates, got {x.data.shape[1]}")
        h = self.encoder[0](x, train, rng)
        return self.encoder[1](h, train, rng)

    def draw_noise(self, n: int, rng) -> np.ndarray:
        if self.config.noise_dist == "gaussian":
            return rng.standard_normal((n, self.config.noise_dim))
        return rng.random((n, self.config.noise_dim))

    def sample_time(self, r, arm: int, role: str = "event", eps=None,
                    train: bool = False, rng=None) -> Tensor:
        """One sampled time per row of ``r`` using the role-matching flow."""
        if self.config.mode not in ("csa", "csa-info"):
            raise ValueError(f"sample_time is undefined in mode {self.config.mode!r}")
        if role == "event":
            flow, heads = self.event_flow, self.event_heads
        elif role == "censor":
            if self.config.mode != "csa-info":
                raise ValueError("censoring head requires mode 'csa-info'")
            flow, heads = self.censor_flow, self.censor_heads
        else:
            raise ValueError(f"unknown role {role!r}")
        r = lift(r)
        if eps is None:
            if rng is None:
                raise ValueError("either eps or rng must be supplied")
            eps = self.draw_noise(r.data.shape[0], rng)
        return heads[int(arm)](r, planar_transform(eps, flow), train, rng)

    def aft_forward(self, r, arm: int, train: bool = False, rng=None):
        if self.config.mode not in ("aft-ln", "aft-w"):
            raise ValueError(f"aft_forward is undefined in mode {self.config.mode!r}")
        return self.aft_heads[int(arm)](lift(r), train, rng)

    def sr_forward(self, r, arm: int, train: bool = False, rng=None) -> Tensor:
        if self.config.mode != "sr":
            raise ValueError(f"sr_forward is undefined in mode {self.config.mode!r}")
        return self.sr_heads[int(arm)](lift(r), train, rng)

    # -- evaluation-time sampling ---------------------------------------------

    def sample_event_times(self, X, arm: int, n_draws: int, rng) -> np.ndarray:
        """(n_subjects, n_draws) event-time draws in evaluation mode."""
        mode = self.config.mode
        with no_grad():
            r = self.encode(X, train=False)
            n = r.data.shape[0]
            if mode in ("csa", "csa-info"):
                draws = np.empty((n, n_draws))
                for s in range(n_draws):
                    eps = self.draw_noise(n, rng)
                    draws[:, s] = self.sample_time(r, arm, "event", eps=eps).data
                return draws
            if mode == "aft-ln":
                mu, sigma = self.aft_forward(r, arm)
                z = rng.standard_normal((n, n_draws))
                return np.exp(mu.data[:, None] + sigma.data[:, None] * z)
            if mode == "aft-w":
                lam, k = self.aft_forward(r, arm)
                u = rng.random((n, n_draws))
                return lam.data[:, None] * (-np.log(u)) ** (1.0 / k.data[:, None])
            t = self.sr_forward(r, arm)
            return np.repeat(t.data[:, None], n_draws, axis=1)


def init_model(config: ModelConfig, seed: int, init_low: float = -0.01,
               init_high: float = 0.01) -> SurvivalModel:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return SurvivalModel(config).initialize(rng, init_low, init_high)


# ---------------------------------------------------------------------------
# module-level op aliases
# ---------------------------------------------------------------------------


def encode(model: SurvivalModel, x, train: bool = False, rng=None) -> Tensor:
    return model.encode(x, train=train, rng=rng)


def sample_time(model: SurvivalModel, r, arm: int, role: str = "event", eps=None,
                train: bool = False, rng=None) -> Tensor:
    return model.sample_time(r, arm, role=role, eps=eps, train=train, rng=rng)


def aft_forward(model: SurvivalModel, r, arm: int, train: bool = False, rng=None):
    return model.aft_forward(r, arm, train=train, rng=rng)


def sr_forward(model: SurvivalModel, r, arm: int, train: bool = False, rng=None) -> Tensor:
    return model.sr_forward(r, arm, train=train, rng=rng)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _encode_array(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def checkpoint_payload(model: SurvivalModel) -> dict:
    manifest = {name: list(shape) for name, shape, _ in model._spec}
    bn = {
        name: {"mean": _encode_array(b.running_mean), "var": _encode_array(b.running_var)}
        for name, b in sorted(model.batch_norms.items())
    }
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "event-time-model",
        "config": asdict(model.config),
        "shapes": manifest,
        "order": list(model.param_names),
        "params": _encode_array(model.flat),
        "bn_stats": bn,
    }


def save_checkpoint(model: SurvivalModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_payload(model), fh, sort_keys=True)
        fh.write("\n")


def model_from_payload(payload: dict) -> SurvivalModel:
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {payload.get('schema_version')!r}")
    config = ModelConfig(**payload["config"])
    model = SurvivalModel(config)
    if payload["order"] != model.param_names:
        raise ValueError("checkpoint parameter manifest does not match the architecture")
    for name, shape, _ in model._spec:
        if list(payload["shapes"][name]) != list(shape):
            raise ValueError(f"shape mismatch for {name}")
    model.set_flat(_decode_array(payload["params"], (model.flat.size,)))
    for name, stats in payload["bn_stats"].items():
        bn = model.batch_norms[name]
        bn.running_mean = _decode_array(stats["mean"], bn.running_mean.shape)
        bn.running_var = _decode_array(stats["var"], bn.running_var.shape)
    return model


def load_checkpoint(path) -> SurvivalModel:
    with open(path) as fh:
        return model_from_payload(json.load(fh))
