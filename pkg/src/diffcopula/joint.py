"""Sklar assembly: marginal PIT, joint density and two-stage joint sampling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cdc import U_CLAMP, CdcModel, LangevinConfig, copula_log_density, langevin_sample
from .ingest import WindowSet
from .marginal import MdnModel, MixtureParams, mdn_forward, mixture_cdf, mixture_inverse_cdf, mixture_log_pdf

BUNDLE_VERSION = 1


@dataclass
class ModelBundle:
    marginals: list[MdnModel]
    copula: CdcModel
    asset_ids: list[str]
    interval: int = 600
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.copula.dim != len(self.marginals):
            raise ValueError(f"copula dimension {self.copula.dim} != {len(self.marginals)} marginals")
        if len(self.asset_ids) != len(self.marginals):
            raise ValueError("one asset id per marginal required")

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def save(self, directory) -> None:
        """Directory layout: marginal_<i>.json per asset, copula.json, manifest.json."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, model in enumerate(self.marginals):
            name = f"marginal_{i}.json"
            (out / name).write_text(model.to_json())
            files.append(name)
        (out / "copula.json").write_text(self.copula.to_json())
        manifest = {"format": "diffcopula.bundle", "version": BUNDLE_VERSION,
                    "asset_ids": self.asset_ids, "interval": self.interval,
                    "marginals": files, "copula": "copula.json", "extra": self.extra}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        src = Path(directory)
        manifest = json.loads((src / "manifest.json").read_text())
        if manifest.get("format") != "diffcopula.bundle" or manifest.get("version") != BUNDLE_VERSION:
            raise ValueError(f"{src}: not a version-{BUNDLE_VERSION} model bundle")
        marginals = [MdnModel.from_json((src / f).read_text()) for f in manifest["marginals"]]
        copula = CdcModel.from_json((src / manifest["copula"]).read_text())
        return cls(marginals, copula, manifest["asset_ids"], manifest["interval"], manifest.get("extra", {}))


def _check_aligned(bundle: ModelBundle, windows: Sequence[WindowSet]) -> None:
    if len(windows) != bundle.dim:
        raise ValueError(f"expected windows for {bundle.dim} assets, got {len(windows)}")
    n = len(windows[0])
    for w in windows[1:]:
        if len(w) != n or not np.array_equal(w.timestamps, windows[0].timestamps):
            raise ValueError("per-asset windows are not aligned on the same target timestamps")


def marginal_params(bundle: ModelBundle, windows: Sequence[WindowSet]) -> list[MixtureParams]:
    _check_aligned(bundle, windows)
    return [mdn_forward(m, w) for m, w in zip(bundle.marginals, windows)]


def pit_panel(bundle: ModelBundle, windows: Sequence[WindowSet],
              params: list[MixtureParams] | None = None) -> np.ndarray:
    """u[t, i] = F_i(y_t^i | X_t) for aligned per-asset windows."""
    params = params or marginal_params(bundle, windows)
    return np.column_stack([mixture_cdf(p, w.targets) for p, w in zip(params, windows)])


def joint_log_density(bundle: ModelBundle, windows: Sequence[WindowSet], y=None,
                      return_parts: bool = False):
    """log p(y | X) = sum_i log p_i(y_i | X) + log c(u) per timestep.

    ``y`` defaults to the window targets; pass an (n, d) array to evaluate
    other points under the same conditioning windows.
    """
    params = marginal_params(bundle, windows)
    if y is None:
        y = np.column_stack([w.targets for w in windows])
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    marg = np.column_stack([mixture_log_pdf(p, y[:, i]) for i, p in enumerate(params)])
    u = np.column_stack([mixture_cdf(p, y[:, i]) for i, p in enumerate(params)])
    log_c = np.atleast_1d(copula_log_density(bundle.copula, u))
    total = marg.sum(axis=1) + log_c
    if return_parts:
        return total, marg, log_c
    return total


@dataclass
class ForecastDistribution:
    samples: np.ndarray          # (T, m, d)
    params: list[MixtureParams]  # per asset, batch shape (T,)
    timestamps: np.ndarray       # (T,)
    u: np.ndarray                # (T, m, d) copula samples behind ``samples``


def samples_from_u(params: Sequence[MixtureParams], u: np.ndarray) -> np.ndarray:
    """Inverse-PIT copula samples ``u`` (T, m, d) through each asset's mixture."""
    u = np.clip(u, U_CLAMP, 1.0 - U_CLAMP)
    out = np.empty_like(u)
    for i, p in enumerate(params):
        batched = MixtureParams(p.weights[:, None], p.loc[:, None], p.scale[:, None], p.dof[:, None])
        out[:, :, i] = mixture_inverse_cdf(batched, u[:, :, i])
    return out


def joint_sample(bundle: ModelBundle, windows: Sequence[WindowSet], m: int, rng: np.random.Generator,
                 langevin: LangevinConfig | None = None, copula_sampler=None) -> ForecastDistribution:
    """m joint draws per conditioning timestep: copula sample, then inverse marginal CDFs.

    ``copula_sampler(n, rng) -> (n, d)`` overrides the Langevin sampler
    (e.g. an independence ablation).
    """
    params = marginal_params(bundle, windows)
    T, d = len(windows[0]), bundle.dim
    if m == 0 or T == 0:
        return ForecastDistribution(np.empty((T, m, d)), params, windows[0].timestamps.copy(),
                                    np.empty((T, m, d)))
    if copula_sampler is None:
        u = langevin_sample(bundle.copula, T * m, rng, langevin)
    else:
        u = copula_sampler(T * m, rng)
    u = u.reshape(T, m, d)
    y = samples_from_u(params, u)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite joint sample")
    return ForecastDistribution(y, params, windows[0].timestamps.copy(), u)
