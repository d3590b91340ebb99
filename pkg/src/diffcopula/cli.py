"""Command-line driver: ingest, synth, train, sample, evaluate, report.

Every subcommand reads an optional JSON run config (``--config``); command
line flags override the file.  Exit codes: 0 success, 1 usage error,
2 data error, 3 training failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cdc import (CdcTrainConfig, CopulaTrainingDiverged, LangevinConfig, SamplerFailure, init_cdc,
                  langevin_sample, train_cdc)
from .ingest import AlignedPanel, DataError, align_panel, make_windows, parse_ohlcv, resample
from .joint import ModelBundle, joint_sample, pit_panel
from .marginal import MdnConfig, TrainingDiverged, train_mdn
from .metrics import REPORT_FILES, EvalConfig, build_reports, read_csv, svg_plot
from .synth import SynthSpec, generate

log = logging.getLogger("diffcopula")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    data: dict[str, str] = field(default_factory=dict)
    panel: str = ""
    bundle: str = ""
    interval: int = 600
    k: int = 14
    split_fraction: float = 0.8
    mdn: dict = field(default_factory=lambda: {"peak_lr": 3e-3})
    cdc: dict = field(default_factory=dict)
    langevin: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)
    copula_pool: int = 20_000
    out: str = "run"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {**dataclasses.asdict(base), **doc}
        if "mdn" in doc:
            merged["mdn"] = {**base.mdn, **doc["mdn"]}
        return cls(**merged)

    def mdn_config(self) -> MdnConfig:
        return MdnConfig(**{"seed": self.seed, "k": self.k, **self.mdn})

    def cdc_config(self) -> CdcTrainConfig:
        return CdcTrainConfig(**{"seed": self.seed, **self.cdc})

    def langevin_config(self) -> LangevinConfig:
        return LangevinConfig(**self.langevin)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**{"seed": self.seed, **self.eval})

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def panel_path(self) -> Path:
        return Path(self.panel) if self.panel else self.out_dir / "panel.csv"

    @property
    def bundle_path(self) -> Path:
        return Path(self.bundle) if self.bundle else self.out_dir / "bundle"


def stream(seed: int, name: str) -> np.random.Generator:
    """Named RNG stream: independent of every other name, stable across runs and platforms."""
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# -- subcommands ---------------------------------------------------------------------

def cmd_ingest(cfg: RunConfig, files: list[str], assets: list[str] | None) -> Path:
    sources = dict(cfg.data)
    for f in files:
        sources[Path(f).stem] = f
    if assets:
        missing = [a for a in assets if a not in sources]
        if missing:
            raise UsageError(f"no data path for assets {missing}")
        sources = {a: sources[a] for a in assets}
    if len(sources) < 2:
        raise UsageError("ingest needs at least two asset files")
    series = {}
    for asset, path in sources.items():
        p = Path(path)
        if not p.exists():
            raise DataError(f"{p}: file not found")
        bars = parse_ohlcv(p.read_text(), asset)
        series[asset] = resample(bars, cfg.interval)
    panel = align_panel(series)
    out = cfg.panel_path
    _write(out, panel.to_csv())
    manifest = {"assets": panel.asset_ids, "interval": cfg.interval,
                "rows": int(panel.timestamps.shape[0]), "return_rows": int(panel.returns.shape[0]),
                "sources": {a: str(sources[a]) for a in panel.asset_ids},
                "input_rows": {a: len(series[a]) for a in panel.asset_ids}}
    _write(out.with_suffix(".manifest.json"), _dump(manifest))
    log.info("wrote %s (%d assets, %d returns)", out, panel.n_assets, panel.returns.shape[0])
    return out


def cmd_synth(cfg: RunConfig, overrides: dict) -> Path:
    params = {"seed": cfg.seed, **cfg.synth, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        spec = SynthSpec(**params)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth spec: {exc}") from None
    result = generate(spec)
    out = cfg.panel_path
    _write(out, result.panel.to_csv())
    truth = {**result.truth, "spec": dataclasses.asdict(spec)}
    _write(out.with_suffix(".truth.json"), _dump(truth))
    if result.u is not None:
        rows = "\n".join(",".join(repr(float(v)) for v in row) for row in result.u)
        header = ",".join(f"u_{a}" for a in result.panel.asset_ids)
        _write(out.with_suffix(".truth_u.csv"), f"{header}\n{rows}\n")
    log.info("wrote %s (%s, d=%d, n=%d)", out, spec.kind, spec.d, spec.n)
    return out


def load_panel(cfg: RunConfig, assets: list[str] | None = None) -> AlignedPanel:
    path = cfg.panel_path
    if not path.exists():
        raise DataError(f"{path}: panel not found (run ingest or synth first)")
    panel = AlignedPanel.from_csv(path.read_text())
    if assets:
        missing = [a for a in assets if a not in panel.asset_ids]
        if missing:
            raise DataError(f"{path}: assets {missing} not in panel")
        idx = [panel.asset_ids.index(a) for a in assets]
        panel = AlignedPanel(list(assets), panel.timestamps, panel.closes[:, idx], panel.returns[:, idx])
    return panel


def _train_history_path(cfg: RunConfig, name: str) -> Path:
    return cfg.out_dir / "logs" / name


def cmd_train_marginal(cfg: RunConfig, assets: list[str] | None) -> ModelBundle:
    panel = load_panel(cfg, assets)
    train, _ = make_windows(panel, cfg.k, cfg.split_fraction)
    mdn_cfg = cfg.mdn_config()
    marginals = []
    for asset, windows in zip(panel.asset_ids, train):
        log.info("training marginal %s on %d windows", asset, len(windows))
        try:
            model, history = train_mdn(windows, mdn_cfg, stream(cfg.seed, f"marginal/{asset}"))
        except TrainingDiverged as exc:
            _write(_train_history_path(cfg, f"marginal_{asset}.json"), _dump(exc.history))
            raise
        _write(_train_history_path(cfg, f"marginal_{asset}.json"), _dump(history))
        marginals.append(model)
    copula = init_cdc(panel.n_assets, cfg.cdc_config().schedule(), cfg.cdc_config().hidden,
                      stream(cfg.seed, "cdc/init"))
    bundle = ModelBundle(marginals, copula, list(panel.asset_ids), cfg.interval,
                         {"k": cfg.k, "split_fraction": cfg.split_fraction, "copula_trained": False})
    bundle.save(cfg.bundle_path)
    return bundle


def cmd_train_copula(cfg: RunConfig, assets: list[str] | None) -> ModelBundle:
    bundle = load_bundle(cfg)
    panel = load_panel(cfg, assets or bundle.asset_ids)
    train, _ = make_windows(panel, cfg.k, cfg.split_fraction)
    u = pit_panel(bundle, train)
    cdc_cfg = cfg.cdc_config()
    log.info("training copula on %d PIT points (d=%d)", u.shape[0], u.shape[1])
    try:
        copula, history = train_cdc(u, cdc_cfg, stream(cfg.seed, "cdc/train"))
    except CopulaTrainingDiverged as exc:
        _write(_train_history_path(cfg, "copula.json"), _dump(exc.history))
        raise
    _write(_train_history_path(cfg, "copula.json"), _dump(history))
    bundle = ModelBundle(bundle.marginals, copula, bundle.asset_ids, bundle.interval,
                         {**bundle.extra, "copula_trained": True})
    bundle.save(cfg.bundle_path)
    return bundle


def load_bundle(cfg: RunConfig) -> ModelBundle:
    path = cfg.bundle_path
    if not (path / "manifest.json").exists():
        raise DataError(f"{path}: no model bundle (run train first)")
    return ModelBundle.load(path)


def _test_windows(cfg: RunConfig, bundle: ModelBundle):
    panel = load_panel(cfg)
    if panel.n_assets != bundle.dim:
        raise DataError(f"bundle has {bundle.dim} assets but panel has {panel.n_assets}")
    if list(panel.asset_ids) != list(bundle.asset_ids):
        raise DataError(f"panel assets {panel.asset_ids} do not match bundle {bundle.asset_ids}")
    _, test = make_windows(panel, cfg.k, cfg.split_fraction)
    if len(test[0]) == 0:
        raise DataError("empty test split")
    return test


def _copula_pool_sampler(cfg: RunConfig, bundle: ModelBundle):
    """Langevin draws from a pool of at most ``copula_pool`` chains.

    The copula is unconditional, so when more draws are requested than the
    pool holds, pool members are reassigned by a seeded index draw.
    """
    langevin = cfg.langevin_config()

    def sampler(n: int, rng: np.random.Generator) -> np.ndarray:
        size = min(n, cfg.copula_pool)
        pool = langevin_sample(bundle.copula, size, rng, langevin)
        if size == n:
            return pool
        return pool[rng.integers(0, size, size=n)]
    return sampler


def forecast(cfg: RunConfig, bundle: ModelBundle, m: int):
    test = _test_windows(cfg, bundle)
    dist = joint_sample(bundle, test, m, stream(cfg.seed, "langevin/sample"),
                        copula_sampler=_copula_pool_sampler(cfg, bundle))
    return test, dist


def cmd_sample(cfg: RunConfig) -> Path:
    bundle = load_bundle(cfg)
    m = cfg.eval_config().samples
    _, dist = forecast(cfg, bundle, m)
    lines = ["timestamp,draw," + ",".join(bundle.asset_ids)]
    for t, ts in enumerate(dist.timestamps):
        for j in range(m):
            lines.append(f"{int(ts)},{j}," + ",".join(repr(float(v)) for v in dist.samples[t, j]))
    out = cfg.out_dir / "samples.csv"
    _write(out, "\n".join(lines) + "\n")
    return out


def cmd_evaluate(cfg: RunConfig) -> Path:
    bundle = load_bundle(cfg)
    ecfg = cfg.eval_config()
    test, dist = forecast(cfg, bundle, ecfg.samples)
    observed = np.column_stack([w.targets for w in test])
    pit = pit_panel(bundle, test, dist.params)
    reports = build_reports(observed, dist.samples, pit, bundle.asset_ids, dist.timestamps, ecfg,
                            stream(cfg.seed, "eval/tail-draw"))
    out = cfg.out_dir / "report"
    for name, text in reports.items():
        _write(out / name, text)
    log.info("wrote %d report files to %s", len(reports), out)
    return out


def cmd_report(cfg: RunConfig) -> Path:
    """SVG renderings of the report CSVs."""
    src = cfg.out_dir / "report"
    missing = [f for f in REPORT_FILES if not (src / f).exists()]
    if missing:
        raise DataError(f"{src}: missing report files {missing} (run evaluate first)")
    out = cfg.out_dir / "figures"

    def table(name):
        header, rows = read_csv((src / name).read_text())
        return header, rows

    def grouped(rows, key_col, x_col, y_col):
        groups: dict[str, tuple[list, list]] = {}
        for r in rows:
            xs, ys = groups.setdefault(r[key_col], ([], []))
            xs.append(float(r[x_col]))
            ys.append(float(r[y_col]))
        return {k: (np.array(a), np.array(b)) for k, (a, b) in groups.items()}

    _, rows = table("pit_curve.csv")
    _write(out / "pit_curve.svg", svg_plot(grouped(rows, 0, 1, 2), "PIT cumulative distribution",
                                           xlabel="u", ylabel="ECDF", diagonal=True))
    _, rows = table("qq.csv")
    _write(out / "qq.svg", svg_plot(grouped(rows, 0, 1, 2), "Normal QQ of PIT", kind="scatter",
                                    xlabel="theoretical", ylabel="empirical", diagonal=True))
    _, rows = table("systemic.csv")
    _write(out / "systemic.svg", svg_plot(grouped(rows, 0, 1, 2), "Systemic event probability",
                                          xlabel="k assets in tail", ylabel="model probability"))
    _, rows = table("black_swan.csv")
    swans = {"timesteps": (np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows]))}
    _write(out / "black_swan.svg", svg_plot(swans, "Black-swan map", kind="scatter",
                                            xlabel="event magnitude", ylabel="Mahalanobis surprise"))
    _, rows = table("corr_extremes.csv")
    corr = {"frobenius": (np.array([float(r[0]) for r in rows]), np.array([float(r[1]) for r in rows])),
            "bias": (np.array([float(r[0]) for r in rows]), np.array([float(r[2]) for r in rows]))}
    _write(out / "corr_extremes.svg", svg_plot(corr, "Correlation error at extremes", xlabel="q"))
    return out


# -- argument parsing ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _float_list(text: str) -> list[float]:
    try:
        return [float(s) for s in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--assets", type=_csv_list, help="comma-separated asset ids")
    common.add_argument("--interval", type=int, help="resample interval in seconds")
    common.add_argument("--quantiles", type=_float_list, help="comma-separated extreme quantiles")
    common.add_argument("--tail-threshold", type=float, help="tail accuracy threshold")
    common.add_argument("--samples", type=int, help="forecast samples per timestep")
    common.add_argument("--panel", help="panel CSV (default OUT/panel.csv)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="diffcopula", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="OHLCV CSVs -> aligned return panel")
    p.add_argument("files", nargs="*", help="per-asset CSV files (asset id = file stem)")
    p = sub.add_parser("synth", parents=[common], help="synthetic panel with ground-truth sidecar")
    p.add_argument("--kind", choices=["gaussian-copula", "clayton-copula", "t-copula", "ar-vol-panel"])
    p.add_argument("--dim", type=int, dest="d")
    p.add_argument("--rho", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--n", type=int)
    for name, text in (("train-marginal", "fit per-asset MDN marginals"),
                       ("train-copula", "fit the diffusion copula on training PITs"),
                       ("train", "fit marginals then copula"),
                       ("sample", "joint forecast samples for the test split"),
                       ("evaluate", "write report CSVs for the test split"),
                       ("report", "render report CSVs as SVG")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"{path}: config not found")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    cfg = RunConfig.from_dict(doc)
    for flag in ("seed", "out", "interval", "panel"):
        value = getattr(args, flag)
        if value is not None:
            setattr(cfg, flag, value)
    ev = dict(cfg.eval)
    if args.quantiles is not None:
        ev["quantiles"] = args.quantiles
    if args.tail_threshold is not None:
        ev["tail_threshold"] = args.tail_threshold
    if args.samples is not None:
        ev["samples"] = args.samples
    cfg.eval = ev
    try:
        cfg.eval_config(), cfg.mdn_config(), cfg.cdc_config(), cfg.langevin_config()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "ingest":
        cmd_ingest(cfg, args.files, args.assets)
    elif cmd == "synth":
        cmd_synth(cfg, {"kind": args.kind, "d": args.d, "rho": args.rho, "theta": args.theta, "n": args.n})
    elif cmd == "train-marginal":
        cmd_train_marginal(cfg, args.assets)
    elif cmd == "train-copula":
        cmd_train_copula(cfg, args.assets)
    elif cmd == "train":
        cmd_train_marginal(cfg, args.assets)
        cmd_train_copula(cfg, args.assets)
    elif cmd == "sample":
        cmd_sample(cfg)
    elif cmd == "evaluate":
        cmd_evaluate(cfg)
    elif cmd == "report":
        cmd_report(cfg)
    _write(cfg.out_dir / "logs" / f"{cmd}.config.json", _dump(dataclasses.asdict(cfg)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and argparse usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return run(args)
    except UsageError as exc:
        print(f"diffcopula: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"diffcopula: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, CopulaTrainingDiverged, SamplerFailure, FloatingPointError) as exc:
        print(f"diffcopula: training failure: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
