"""Classification-diffusion copula.

Copula samples ``u`` are mapped to the Gaussian scale, ``z = Phi^{-1}(u)``,
and pushed through an Ornstein-Uhlenbeck process that keeps standard normal
marginals while erasing cross-dimensional dependence.  A classifier over the
diffusion times {0, T_1, ..., T_K} then gives

* the copula density as a probability ratio, ``log c(u) = logit_0 - logit_K``
  (class priors cancel because training classes are balanced), and
* scores ``grad_z log p_s(z) = grad_z (logit_s - logit_K) - z`` used both in
  the denoising term of the loss and by annealed Langevin sampling.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import ndiff as nd
from .normal import std_normal_cdf, std_normal_inv_cdf

log = logging.getLogger(__name__)

U_CLAMP = 1e-6


@dataclass(frozen=True)
class DiffusionSchedule:
    times: tuple[float, ...]

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 1 or t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("diffusion times must be positive and strictly increasing")

    @classmethod
    def geometric(cls, K: int = 10, t_min: float = 0.05, t_max: float = 4.0) -> "DiffusionSchedule":
        return cls(tuple(float(x) for x in np.geomspace(t_min, t_max, K)))

    @property
    def K(self) -> int:
        return len(self.times)

    @property
    def decay(self) -> np.ndarray:
        """a_s = exp(-T_s), with a_0 = 1 prepended (index = class id)."""
        return np.concatenate([[1.0], np.exp(-np.asarray(self.times))])

    @property
    def sigma(self) -> np.ndarray:
        """sigma_s = sqrt(1 - exp(-2 T_s)), with sigma_0 = 0 prepended."""
        return np.concatenate([[0.0], np.sqrt(-np.expm1(-2.0 * np.asarray(self.times)))])


def gaussianize(u) -> np.ndarray:
    """Clamp to [1e-6, 1 - 1e-6] and apply Phi^{-1} componentwise."""
    return std_normal_inv_cdf(np.clip(np.asarray(u, dtype=np.float64), U_CLAMP, 1.0 - U_CLAMP))


def ou_perturb(z0, s: int, schedule: DiffusionSchedule, rng: np.random.Generator,
               return_noise: bool = False):
    """z_s = a_s z0 + sigma_s eps (identity diffusion)."""
    z0 = np.asarray(z0, dtype=np.float64)
    a, sig = schedule.decay[s], schedule.sigma[s]
    eps = rng.standard_normal(z0.shape)
    zs = a * z0 + sig * eps
    return (zs, eps) if return_noise else zs


@dataclass
class CdcModel:
    dim: int
    schedule: DiffusionSchedule
    params: dict[str, nd.Tensor]
    hidden: tuple[int, ...] = (256, 256)

    @property
    def n_classes(self) -> int:
        return self.schedule.K + 1

    def parameters(self) -> list[nd.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def copy(self) -> "CdcModel":
        return CdcModel(self.dim, self.schedule,
                        {k: nd.Tensor(v.data.copy(), True, k) for k, v in self.params.items()},
                        self.hidden)

    def score(self, z, s) -> np.ndarray:
        return score(self, z, s).data

    def to_json(self, config: "CdcTrainConfig | None" = None) -> str:
        doc = {
            "format": "diffcopula.cdc",
            "version": 1,
            "dim": self.dim,
            "hidden": list(self.hidden),
            "schedule": list(self.schedule.times),
            "config": asdict(config) if config is not None else None,
            "params": {k: {"shape": list(self.params[k].shape),
                           "data": self.params[k].data.ravel().tolist()} for k in sorted(self.params)},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CdcModel":
        doc = json.loads(text)
        if doc.get("format") != "diffcopula.cdc" or doc.get("version") != 1:
            raise ValueError("not a version-1 CDC document")
        schedule = DiffusionSchedule(tuple(doc["schedule"]))
        hidden = tuple(doc["hidden"])
        shapes = _param_shapes(doc["dim"], hidden, schedule.K + 1)
        params = {}
        for name, shape in shapes.items():
            entry = doc["params"].get(name)
            if entry is None or tuple(entry["shape"]) != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}")
            params[name] = nd.Tensor(np.array(entry["data"]).reshape(shape), True, name)
        return cls(doc["dim"], schedule, params, hidden)


def _param_shapes(dim: int, hidden: tuple[int, ...], n_classes: int) -> dict[str, tuple[int, ...]]:
    sizes = (dim, *hidden, n_classes)
    shapes = {}
    for i in range(len(sizes) - 1):
        shapes[f"W{i}"] = (sizes[i], sizes[i + 1])
        shapes[f"b{i}"] = (sizes[i + 1],)
    return shapes


def init_cdc(dim: int, schedule: DiffusionSchedule | None = None, hidden=(256, 256),
             rng: np.random.Generator | None = None) -> CdcModel:
    """Glorot-uniform hidden layers; the output layer starts at zero (independence copula)."""
    schedule = schedule or DiffusionSchedule.geometric()
    rng = rng or np.random.default_rng(0)
    shapes = _param_shapes(dim, tuple(hidden), schedule.K + 1)
    last = len(hidden)
    params = {}
    for name, shape in shapes.items():
        if name.startswith("b") or name == f"W{last}":
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = nd.Tensor(value, requires_grad=True, name=name)
    return CdcModel(dim, schedule, params, tuple(hidden))


def _forward(model: CdcModel, z: nd.Tensor) -> tuple[nd.Tensor, list[nd.Tensor]]:
    p = model.params
    h, acts = z, []
    for i in range(len(model.hidden)):
        h = nd.tanh(h @ p[f"W{i}"] + p[f"b{i}"])
        acts.append(h)
    n = len(model.hidden)
    return h @ p[f"W{n}"] + p[f"b{n}"], acts


def _check_dim(model: CdcModel, z) -> nd.Tensor:
    z = z if isinstance(z, nd.Tensor) else nd.Tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
    if z.ndim != 2 or z.shape[1] != model.dim:
        raise ValueError(f"expected inputs of dimension {model.dim}, got shape {z.shape}")
    return z


def logits(model: CdcModel, z) -> nd.Tensor:
    return _forward(model, _check_dim(model, z))[0]


def classify(model: CdcModel, z) -> nd.Tensor:
    """Log-probabilities over the K+1 diffusion-time classes."""
    return nd.log_softmax(logits(model, z))


def _logit_gap_grad(model: CdcModel, z: nd.Tensor, s) -> nd.Tensor:
    """grad_z (logit_s - logit_K), written out as a differentiable graph.

    Expressing the input gradient with ordinary ops (rather than a nested
    backward pass) lets training differentiate through it w.r.t. the weights.
    """
    p = model.params
    n = len(model.hidden)
    _, acts = _forward(model, z)
    rows = z.shape[0]
    s = np.broadcast_to(np.asarray(s, dtype=np.int64), (rows,))
    sel = np.zeros((rows, model.n_classes))
    sel[np.arange(rows), s] += 1.0
    sel[:, model.schedule.K] -= 1.0
    g = nd.Tensor(sel) @ nd.transpose(p[f"W{n}"])
    for i in range(n - 1, -1, -1):
        g = g * (1.0 - nd.square(acts[i]))
        g = g @ nd.transpose(p[f"W{i}"])
    return g


def score(model, z, s) -> nd.Tensor:
    """grad_z log p_s(z) = grad_z(logit_s - logit_K) - z.  ``s`` is an int or per-row ints."""
    zt = _check_dim(model, z)
    return _logit_gap_grad(model, zt, s) - zt


def copula_log_density(model: CdcModel, u) -> np.ndarray:
    """log c(u) = logit_0 - logit_K at z = Phi^{-1}(clamped u)."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    lg = logits(model, gaussianize(np.atleast_2d(u))).data
    out = lg[:, 0] - lg[:, model.schedule.K]
    return out[0] if single else out


@dataclass
class CdcTrainConfig:
    alpha: float = 1.0
    batch_size: int = 512
    steps: int = 4000
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256)
    K: int = 10
    t_min: float = 0.05
    t_max: float = 4.0
    class_sampling: str = "balanced"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.class_sampling != "balanced":
            raise ValueError("only balanced class sampling is supported")
        self.hidden = tuple(self.hidden)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.geometric(self.K, self.t_min, self.t_max)


@dataclass
class CdcBatch:
    zs: np.ndarray
    classes: np.ndarray
    noise: np.ndarray


def draw_cdc_batch(z0: np.ndarray, schedule: DiffusionSchedule, rng: np.random.Generator) -> CdcBatch:
    """Balanced class labels, OU-perturbed inputs and the injected noise."""
    classes = rng.integers(0, schedule.K + 1, size=z0.shape[0])
    noise = rng.standard_normal(z0.shape)
    a, sig = schedule.decay[classes][:, None], schedule.sigma[classes][:, None]
    return CdcBatch(a * z0 + sig * noise, classes, noise)


def cdc_loss_terms(model: CdcModel, batch: CdcBatch, alpha: float = 1.0
                   ) -> tuple[nd.Tensor, nd.Tensor, nd.Tensor]:
    """(total, cross-entropy, denoising MSE) for a pre-drawn batch."""
    z = nd.Tensor(batch.zs)
    n = z.shape[0]
    onehot = np.zeros((n, model.n_classes))
    onehot[np.arange(n), batch.classes] = 1.0
    ce = -nd.sum_(nd.Tensor(onehot / n) * classify(model, z))
    noisy = batch.classes >= 1
    if noisy.any():
        sig = model.schedule.sigma[batch.classes][:, None]
        eps_hat = -nd.Tensor(sig) * score(model, z, batch.classes)
        weight = nd.Tensor((noisy / noisy.sum())[:, None])
        mse = nd.sum_(weight * nd.square(eps_hat - batch.noise))
    else:
        mse = nd.Tensor(0.0)
    return ce * alpha + mse, ce, mse


def cdc_loss(model: CdcModel, z0, config: CdcTrainConfig, rng: np.random.Generator) -> nd.Tensor:
    return cdc_loss_terms(model, draw_cdc_batch(np.asarray(z0, float), model.schedule, rng), config.alpha)[0]


class CopulaTrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


def train_cdc(u_panel, config: CdcTrainConfig, rng: np.random.Generator | None = None,
              log_every: int = 100) -> tuple[CdcModel, list[dict]]:
    """Fit the time classifier on copula data ``u_panel`` (n x d) with AdamW."""
    u_panel = np.asarray(u_panel, dtype=np.float64)
    if u_panel.ndim != 2 or np.any(u_panel < 0) or np.any(u_panel > 1):
        raise ValueError("u_panel must be an (n, d) array in [0, 1]")
    rng = rng or np.random.default_rng(config.seed)
    z_data = gaussianize(u_panel)
    model = init_cdc(u_panel.shape[1], config.schedule(), config.hidden, rng)
    history: list[dict] = []
    params = model.parameters()
    state = nd.OptState(lr=config.lr, weight_decay=config.weight_decay)
    ce_acc, mse_acc, bad = [], [], 0
    for step in range(config.steps):
        idx = rng.integers(0, z_data.shape[0], size=config.batch_size)
        batch = draw_cdc_batch(z_data[idx], model.schedule, rng)
        with nd.Tape() as tape:
            total, ce, mse = cdc_loss_terms(model, batch, config.alpha)
        grads = tape.backward(total)
        ok = nd.adam_step(params, [grads[p] for p in params], state,
                          lr=nd.one_cycle_lr(step, config.steps, config.lr))
        bad = 0 if ok and np.isfinite(total.data) else bad + 1
        if bad >= 10:
            raise CopulaTrainingDiverged(f"CDC training diverged at step {step}", history)
        ce_acc.append(float(ce.data))
        mse_acc.append(float(mse.data))
        if (step + 1) % log_every == 0 or step + 1 == config.steps:
            history.append({"step": step + 1, "ce": float(np.mean(ce_acc)), "mse": float(np.mean(mse_acc))})
            log.info("step %d ce=%.4f mse=%.4f", step + 1, history[-1]["ce"], history[-1]["mse"])
            ce_acc, mse_acc = [], []
    return model, history


# -- sampling ------------------------------------------------------------------

@dataclass
class LangevinConfig:
    """Annealed Langevin settings.

    Level ``s`` uses step ``step_scale * sigma_s^2 / sigma_K^2`` for
    ``steps_per_level`` iterations; a final ``final_steps`` iterations at the
    data level (class 0) use ``final_step``.
    """

    steps_per_level: int = 20
    step_scale: float = 0.5
    final_steps: int = 100
    final_step: float = 0.02
    max_restarts: int = 3
    chunk: int = 50_000


class SamplerFailure(RuntimeError):
    pass


def annealed_langevin(score_fn: Callable[[np.ndarray, int], np.ndarray], schedule: DiffusionSchedule,
                      dim: int, n: int, rng: np.random.Generator,
                      config: LangevinConfig | None = None) -> np.ndarray:
    """Run annealed Langevin from N(0, I) down to the data level; returns z (n, dim)."""
    config = config or LangevinConfig()
    sig = schedule.sigma
    plan = [(s, config.step_scale * sig[s] ** 2 / sig[-1] ** 2, config.steps_per_level)
            for s in range(schedule.K, 0, -1)]
    plan.append((0, config.final_step, config.final_steps))
    z = rng.standard_normal((n, dim))
    pending = np.arange(n)
    for attempt in range(config.max_restarts + 1):
        zc = z[pending]
        with np.errstate(over="ignore", invalid="ignore"):
            for s, eta, steps in plan:
                for _ in range(steps):
                    zc = zc + 0.5 * eta * score_fn(zc, s) + math.sqrt(eta) * rng.standard_normal(zc.shape)
        z[pending] = zc
        bad = ~np.all(np.isfinite(zc), axis=1)
        if not bad.any():
            return z
        pending = pending[bad]
        log.warning("restarting %d non-finite Langevin chains (attempt %d)", pending.size, attempt + 1)
        z[pending] = rng.standard_normal((pending.size, dim))
    raise SamplerFailure(f"{pending.size} Langevin chains stayed non-finite after restarts")


def langevin_sample(model: CdcModel, n: int, rng: np.random.Generator,
                    config: LangevinConfig | None = None) -> np.ndarray:
    """Draw ``n`` copula samples in (0, 1)^d."""
    config = config or LangevinConfig()
    if n == 0:
        return np.empty((0, model.dim))
    out = []
    for start in range(0, n, config.chunk):
        m = min(config.chunk, n - start)
        z = annealed_langevin(model.score, model.schedule, model.dim, m, rng, config)
        out.append(std_normal_cdf(z))
    return np.vstack(out)


def independence_sample(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Independence-copula ablation."""
    return rng.uniform(size=(n, dim))


__all__ = [
    "DiffusionSchedule", "CdcModel", "CdcTrainConfig", "LangevinConfig", "CdcBatch",
    "gaussianize", "ou_perturb", "init_cdc", "logits", "classify", "score",
    "copula_log_density", "draw_cdc_batch", "cdc_loss_terms", "cdc_loss", "train_cdc",
    "annealed_langevin", "langevin_sample", "independence_sample", "std_normal_cdf",
    "std_normal_inv_cdf",
]
