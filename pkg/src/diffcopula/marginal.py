"""Heterogeneous mixture marginals and the mixture density network.

The mixture has nine components in a fixed order: three Normal, three
Laplace and three Student-t.  All distribution routines accept parameters
with arbitrary leading batch dimensions.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import gammaln, stdtr

from . import ndiff as nd
from .ingest import N_FEATURES, WindowSet
from .normal import std_normal_cdf

log = logging.getLogger(__name__)

N_NORMAL = N_LAPLACE = N_STUDENT = 3
N_COMPONENTS = N_NORMAL + N_LAPLACE + N_STUDENT
FAMILIES = ("normal",) * N_NORMAL + ("laplace",) * N_LAPLACE + ("student_t",) * N_STUDENT
HEAD_DIM = 3 * N_COMPONENTS + N_STUDENT
SCALE_FLOOR = 1e-6
DOF_CAP = 100.0
_LOG_2PI = math.log(2.0 * math.pi)
_NS = slice(0, N_NORMAL)
_LS = slice(N_NORMAL, N_NORMAL + N_LAPLACE)
_TS = slice(N_NORMAL + N_LAPLACE, N_COMPONENTS)


class InvalidParams(ValueError):
    pass


@dataclass
class MixtureParams:
    """Mixture weights, locations, scales (..., 9) and Student-t dofs (..., 3)."""

    weights: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    dof: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.loc = np.asarray(self.loc, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.dof = np.asarray(self.dof, dtype=np.float64)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.weights.shape[:-1]

    def __getitem__(self, index) -> "MixtureParams":
        return MixtureParams(self.weights[index], self.loc[index], self.scale[index], self.dof[index])

    def validate(self) -> "MixtureParams":
        w, mu, s, nu = self.weights, self.loc, self.scale, self.dof
        if w.shape[-1] != N_COMPONENTS or mu.shape != w.shape or s.shape != w.shape:
            raise InvalidParams(f"expected (..., {N_COMPONENTS}) arrays, got {w.shape}, {mu.shape}, {s.shape}")
        if nu.shape != w.shape[:-1] + (N_STUDENT,):
            raise InvalidParams(f"dof must have shape (..., {N_STUDENT})")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-9):
            raise InvalidParams("weights must be non-negative and sum to one")
        if np.any(s <= 0) or np.any(nu <= 2):
            raise InvalidParams("scales must be positive and dof > 2")
        if not all(np.all(np.isfinite(a)) for a in (w, mu, s, nu)):
            raise InvalidParams("non-finite mixture parameters")
        return self

    @classmethod
    def single(cls, family: str, loc: float = 0.0, scale: float = 1.0, dof: float = 5.0) -> "MixtureParams":
        """A mixture with all weight on the first component of ``family``."""
        w = np.zeros(N_COMPONENTS)
        w[FAMILIES.index(family)] = 1.0
        return cls(w, np.full(N_COMPONENTS, loc), np.full(N_COMPONENTS, scale), np.full(N_STUDENT, dof))

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def _component_log_pdf(params: MixtureParams, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)[..., None]
    x = (y - params.loc) / params.scale
    log_s = np.log(params.scale)
    out = np.empty(np.broadcast_shapes(x.shape, params.loc.shape))
    out[..., _NS] = -0.5 * x[..., _NS] ** 2 - 0.5 * _LOG_2PI - log_s[..., _NS]
    out[..., _LS] = -np.abs(x[..., _LS]) - math.log(2.0) - log_s[..., _LS]
    nu = params.dof
    xt = x[..., _TS]
    out[..., _TS] = (gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * math.pi)
                     - log_s[..., _TS] - 0.5 * (nu + 1) * np.log1p(xt * xt / nu))
    return out


def mixture_log_pdf(params: MixtureParams, y) -> np.ndarray:
    """log sum_k pi_k f_k(y), via log-sum-exp over components."""
    params.validate()
    with np.errstate(divide="ignore"):
        terms = np.log(params.weights) + _component_log_pdf(params, y)
    m = terms.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(terms - m).sum(axis=-1, keepdims=True)))[..., 0]


def component_cdf(params: MixtureParams, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)[..., None]
    x = (y - params.loc) / params.scale
    out = np.empty(np.broadcast_shapes(x.shape, params.loc.shape))
    out[..., _NS] = std_normal_cdf(x[..., _NS])
    xl = x[..., _LS]
    half = 0.5 * np.exp(-np.abs(xl))
    out[..., _LS] = np.where(xl < 0, half, 1.0 - half)
    out[..., _TS] = stdtr(params.dof, x[..., _TS])
    return out


def mixture_cdf(params: MixtureParams, y) -> np.ndarray:
    """sum_k pi_k F_k(y)."""
    return (params.weights * component_cdf(params, y)).sum(axis=-1)


def _bracket_halfwidth(params: MixtureParams) -> np.ndarray:
    inflate = np.ones_like(params.scale)
    # Student-t quantiles at 1e-12 grow like (1e-12)^(-1/nu); widen accordingly.
    inflate[..., _TS] = np.maximum(1.0, np.power(1e-12, -1.0 / params.dof) / 60.0)
    return 60.0 * params.scale * inflate


def mixture_inverse_cdf(params: MixtureParams, u, max_iter: int = 200) -> np.ndarray:
    """Numeric quantile by bracketing, then Newton steps safeguarded by bisection.

    ``u`` broadcasts against the parameter batch shape; e.g. params with batch
    shape (T, 1) and u of shape (T, m) gives m quantiles per row.
    """
    u = np.asarray(u, dtype=np.float64)
    if np.any(~((u > 0.0) & (u < 1.0))):
        raise ValueError("u must lie strictly inside (0, 1)")
    half = _bracket_halfwidth(params)
    lo = (params.loc - half).min(axis=-1)
    hi = (params.loc + half).max(axis=-1)
    shape = np.broadcast_shapes(u.shape, lo.shape)
    lo = np.broadcast_to(lo, shape).copy()
    hi = np.broadcast_to(hi, shape).copy()
    u = np.broadcast_to(u, shape)
    for _ in range(200):
        width = hi - lo
        low_bad = mixture_cdf(params, lo) > u
        high_bad = mixture_cdf(params, hi) < u
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, lo - width, lo)
        hi = np.where(high_bad, hi + width, hi)
    # flatten to one row per query so converged rows can drop out
    flat = MixtureParams(*(np.broadcast_to(a, shape + a.shape[-1:]).reshape(-1, a.shape[-1])
                           for a in (params.weights, params.loc, params.scale, params.dof))).validate()
    lo, hi, u = lo.reshape(-1), hi.reshape(-1), u.reshape(-1)
    x = 0.5 * (lo + hi)
    act = np.arange(x.size)
    tiny = 4.0 * np.finfo(float).eps
    for it in range(max_iter):
        if act.size == 0:
            break
        sub = flat[act]
        xa, la, ha, ua = x[act], lo[act], hi[act], u[act]
        F = mixture_cdf(sub, xa)
        below = F < ua
        la = np.where(below, xa, la)
        ha = np.where(below, ha, xa)
        lo[act], hi[act] = la, ha
        done = (np.abs(F - ua) <= 1e-15) | (ha - la <= tiny * np.maximum(np.abs(la), np.abs(ha)) + 1e-300)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = xa - (F - ua) / np.exp(mixture_log_pdf(sub, xa))
        # every fourth step bisects so the bracket always shrinks
        newton = np.isfinite(step) & (step > la) & (step < ha) & (it % 4 != 3)
        x[act] = np.where(done, xa, np.where(newton, step, 0.5 * (la + ha)))
        act = act[~done]
    return x.reshape(shape)


def mdn_sample(params: MixtureParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` samples from a single (unbatched) mixture."""
    if params.batch_shape:
        raise ValueError("mdn_sample expects unbatched parameters")
    comp = rng.choice(N_COMPONENTS, size=n, p=params.weights / params.weights.sum())
    loc, scale = params.loc[comp], params.scale[comp]
    fam = np.searchsorted([N_NORMAL, N_NORMAL + N_LAPLACE], comp, side="right")
    draws = np.empty(n)
    m0, m1, m2 = fam == 0, fam == 1, fam == 2
    draws[m0] = rng.standard_normal(m0.sum())
    draws[m1] = rng.laplace(size=m1.sum())
    draws[m2] = rng.standard_t(params.dof[comp[m2] - N_NORMAL - N_LAPLACE])
    return loc + scale * draws


# -- mixture density network --------------------------------------------------

@dataclass
class MdnConfig:
    temperature: float = 0.5
    entropy_coef: float = 0.01
    encourage_entropy: bool = True
    peak_lr: float = 3e-5
    weight_decay: float = 1e-5
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    hidden: int = 64
    layers: int = 2
    feature_hidden: int = 32
    k: int = 14
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be non-negative")

    @classmethod
    def full_scale(cls, **overrides) -> "MdnConfig":
        """Encoder sized as in the original experiments (5 layers x 128)."""
        return cls(**{"hidden": 128, "layers": 5, **overrides})


@dataclass
class MdnModel:
    config: MdnConfig
    params: dict[str, nd.Tensor]
    y_scale: float = 1.0
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(N_FEATURES))

    def parameters(self) -> list[nd.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def copy(self) -> "MdnModel":
        return MdnModel(self.config, {k: nd.Tensor(v.data.copy(), True, k) for k, v in self.params.items()},
                        self.y_scale, self.feature_mean.copy(), self.feature_std.copy())

    def to_json(self) -> str:
        doc = {
            "format": "diffcopula.mdn",
            "version": 1,
            "config": asdict(self.config),
            "normalization": {"y_scale": self.y_scale,
                              "feature_mean": self.feature_mean.tolist(),
                              "feature_std": self.feature_std.tolist()},
            "params": {k: {"shape": list(self.params[k].shape),
                           "data": self.params[k].data.ravel().tolist()} for k in sorted(self.params)},
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MdnModel":
        doc = json.loads(text)
        if doc.get("format") != "diffcopula.mdn" or doc.get("version") != 1:
            raise ValueError("not a version-1 MDN document")
        config = MdnConfig(**doc["config"])
        expected = _param_shapes(config)
        params = {}
        for name, shape in expected.items():
            entry = doc["params"].get(name)
            if entry is None or tuple(entry["shape"]) != shape:
                raise ValueError(f"parameter {name}: expected shape {shape}")
            params[name] = nd.Tensor(np.array(entry["data"]).reshape(shape), True, name)
        norm = doc["normalization"]
        return cls(config, params, float(norm["y_scale"]), np.array(norm["feature_mean"]),
                   np.array(norm["feature_std"]))


def _param_shapes(cfg: MdnConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for layer in range(cfg.layers):
        fan_in = 1 if layer == 0 else cfg.hidden
        shapes[f"lstm{layer}.W"] = (fan_in + cfg.hidden, 4 * cfg.hidden)
        shapes[f"lstm{layer}.b"] = (4 * cfg.hidden,)
    shapes["feat.W"] = (N_FEATURES, cfg.feature_hidden)
    shapes["feat.b"] = (cfg.feature_hidden,)
    shapes["head.W"] = (cfg.hidden + cfg.feature_hidden, HEAD_DIM)
    shapes["head.b"] = (HEAD_DIM,)
    return shapes


def _inv_softplus(x: float) -> float:
    return math.log(math.expm1(x))


def init_mdn(config: MdnConfig, rng: np.random.Generator | None = None, *, y_scale: float = 1.0,
             feature_mean=None, feature_std=None) -> MdnModel:
    """Glorot-uniform weights; head biases start every component at unit scale."""
    rng = rng or np.random.default_rng(config.seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = nd.Tensor(value, requires_grad=True, name=name)
    h = config.hidden
    for layer in range(config.layers):
        params[f"lstm{layer}.b"].data[h:2 * h] = 1.0  # forget gate
    head_b = params["head.b"].data
    head_b[N_COMPONENTS:2 * N_COMPONENTS] = np.linspace(-0.1, 0.1, N_COMPONENTS)
    head_b[2 * N_COMPONENTS:3 * N_COMPONENTS] = _inv_softplus(1.0)
    head_b[3 * N_COMPONENTS:] = _inv_softplus(3.0)
    params["head.W"].data *= 0.1
    return MdnModel(config, params, float(y_scale),
                    np.zeros(N_FEATURES) if feature_mean is None else np.asarray(feature_mean, float),
                    np.ones(N_FEATURES) if feature_std is None else np.asarray(feature_std, float))


def _encode(model: MdnModel, lagged: np.ndarray, features: np.ndarray) -> nd.Tensor:
    """Raw head output (B, 30) for normalised inputs."""
    cfg, p = model.config, model.params
    x = lagged / model.y_scale
    f = (features - model.feature_mean) / model.feature_std
    batch, h = x.shape[0], cfg.hidden
    seq = [nd.Tensor(x[:, t:t + 1]) for t in range(x.shape[1])]
    for layer in range(cfg.layers):
        W, b = p[f"lstm{layer}.W"], p[f"lstm{layer}.b"]
        hs = nd.Tensor(np.zeros((batch, h)))
        cs = nd.Tensor(np.zeros((batch, h)))
        out = []
        for xt in seq:
            gates = nd.concat([xt, hs], axis=1) @ W + b
            i = nd.sigmoid(gates[:, :h])
            fg = nd.sigmoid(gates[:, h:2 * h])
            g = nd.tanh(gates[:, 2 * h:3 * h])
            o = nd.sigmoid(gates[:, 3 * h:])
            cs = fg * cs + i * g
            hs = o * nd.tanh(cs)
            out.append(hs)
        seq = out
    feat = nd.tanh(nd.Tensor(f) @ p["feat.W"] + p["feat.b"])
    return nd.concat([seq[-1], feat], axis=1) @ p["head.W"] + p["head.b"]


def _split_head(raw: nd.Tensor, temperature: float):
    k = N_COMPONENTS
    log_w = nd.log_softmax(raw[:, :k], temperature=temperature)
    loc = raw[:, k:2 * k]
    scale = nd.softplus(raw[:, 2 * k:3 * k]) + SCALE_FLOOR
    dof = nd.minimum(nd.softplus(raw[:, 3 * k:]) + 2.0, DOF_CAP)
    return log_w, loc, scale, dof


def _windows_arrays(windows) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(windows, WindowSet):
        return windows.lagged, windows.features
    lagged = np.atleast_2d(np.asarray(windows.lagged, dtype=np.float64))
    feats = windows.features.as_array() if hasattr(windows.features, "as_array") else windows.features
    return lagged, np.atleast_2d(np.asarray(feats, dtype=np.float64))


def mdn_forward(model: MdnModel, windows) -> MixtureParams:
    """Mixture parameters (in return units) for a window or a WindowSet."""
    lagged, feats = _windows_arrays(windows)
    try:
        with nd.Tape():  # finite-checking forward, nothing recorded for constants
            raw = _encode(model, lagged, feats)
            log_w, loc, scale, dof = _split_head(raw, model.config.temperature)
    except nd.NonFiniteError as exc:
        raise FloatingPointError(f"MDN forward produced non-finite activations: {exc}") from exc
    s = model.y_scale
    params = MixtureParams(np.exp(log_w.data), loc.data * s, scale.data * s, dof.data)
    params.weights /= params.weights.sum(axis=-1, keepdims=True)
    if not isinstance(windows, WindowSet):
        params = params[0]
    return params


def mixture_log_pdf_graph(log_w: nd.Tensor, loc: nd.Tensor, scale: nd.Tensor, dof: nd.Tensor,
                          y: np.ndarray) -> nd.Tensor:
    """Differentiable per-row mixture log density; ``y`` has shape (B,)."""
    yy = nd.Tensor(np.asarray(y, dtype=np.float64)[:, None])
    x = (yy - loc) / scale
    log_s = nd.log(scale)
    xn, xl, xt = x[:, _NS], x[:, _LS], x[:, _TS]
    normal = nd.scale(nd.square(xn), -0.5) - 0.5 * _LOG_2PI - log_s[:, _NS]
    laplace = -nd.abs_smooth(xl) - math.log(2.0) - log_s[:, _LS]
    half_nu1 = (dof + 1.0) * 0.5
    student = (nd.lgamma(half_nu1) - nd.lgamma(dof * 0.5) - nd.log(dof * math.pi) * 0.5
               - log_s[:, _TS] - half_nu1 * nd.log(nd.square(xt) / dof + 1.0))
    comps = nd.concat([normal, laplace, student], axis=1)
    return nd.logsumexp(log_w + comps, axis=1)


def mdn_loss(model: MdnModel, batch: WindowSet, *, entropy_coef: float | None = None) -> nd.Tensor:
    """Mean NLL (in normalised units) minus/plus lambda times mean mixture-weight entropy."""
    cfg = model.config
    lam = cfg.entropy_coef if entropy_coef is None else entropy_coef
    raw = _encode(model, batch.lagged, batch.features)
    log_w, loc, scale, dof = _split_head(raw, cfg.temperature)
    logp = mixture_log_pdf_graph(log_w, loc, scale, dof, batch.targets / model.y_scale)
    loss = -nd.mean(logp)
    if lam:
        entropy = -nd.sum_(nd.exp(log_w) * log_w, axis=1)
        sign = -1.0 if cfg.encourage_entropy else 1.0
        loss = loss + nd.mean(entropy) * (sign * lam)
    return loss


def mdn_nll(model: MdnModel, windows: WindowSet) -> float:
    """Mean negative log-likelihood of the targets in return units."""
    params = mdn_forward(model, windows)
    return float(-np.mean(mixture_log_pdf(params, windows.targets)))


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


def train_mdn(windows: WindowSet, config: MdnConfig, rng: np.random.Generator | None = None
              ) -> tuple[MdnModel, list[dict]]:
    """Fit an MDN with AdamW and a one-cycle schedule.

    The trailing ``val_fraction`` of the windows is held out; the parameters
    with the best validation NLL are returned along with a per-epoch log.
    """
    if len(windows) == 0:
        raise ValueError("empty training set")
    rng = rng or np.random.default_rng(config.seed)
    n_val = int(len(windows) * config.val_fraction)
    if len(windows) - n_val < 1:
        n_val = 0
    fit, val = windows[:len(windows) - n_val], windows[len(windows) - n_val:]
    y_scale = float(np.std(fit.targets)) or 1.0
    f_mean = fit.features.mean(axis=0)
    f_std = fit.features.std(axis=0)
    f_std[f_std < 1e-12] = 1.0
    model = init_mdn(config, rng, y_scale=y_scale, feature_mean=f_mean, feature_std=f_std)
    history: list[dict] = []
    if config.epochs <= 0:
        return model, history

    params = model.parameters()
    state = nd.OptState(lr=config.peak_lr, weight_decay=config.weight_decay)
    steps_per_epoch = max(1, math.ceil(len(fit) / config.batch_size))
    total = steps_per_epoch * config.epochs
    eval_set = val if len(val) else fit
    initial = _normalised_nll(model, eval_set)
    best, best_nll, bad_epochs, step = model.copy(), initial, 0, 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(fit))
        losses = []
        for start in range(0, len(fit), config.batch_size):
            batch = fit[order[start:start + config.batch_size]]
            with nd.Tape() as tape:
                loss = mdn_loss(model, batch)
            grads = tape.backward(loss)
            ok = nd.adam_step(params, [grads[p] for p in params], state,
                              lr=nd.one_cycle_lr(step, total, config.peak_lr))
            if not ok:
                log.warning("epoch %d: non-finite gradient, step skipped", epoch)
            losses.append(float(loss.data))
            step += 1
        val_nll = _normalised_nll(model, eval_set)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_nll": val_nll, "skipped_steps": state.skipped})
        log.info("epoch %d train_loss=%.5f val_nll=%.5f", epoch, history[-1]["train_loss"], val_nll)
        if val_nll < best_nll:
            best, best_nll = model.copy(), val_nll
        diverged = not np.isfinite(val_nll) or val_nll > max(10.0 * abs(initial), initial + 10.0)
        bad_epochs = bad_epochs + 1 if diverged else 0
        if bad_epochs >= 3:
            raise TrainingDiverged(f"MDN training diverged at epoch {epoch}", history)
    return best, history


def _normalised_nll(model: MdnModel, windows: WindowSet) -> float:
    try:
        return mdn_nll(model, windows) - math.log(model.y_scale)
    except FloatingPointError:
        return math.inf
