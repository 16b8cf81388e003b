"""Command-line experiment runner.

Subcommands: run, ablate, spectrum, drift, perturb. Configuration is a flat
``key = value`` file; any key can also be given as a flag, and flags win.
Relative output directories are placed under ``$EFCPP_OUTPUT_ROOT`` when it
is set.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .efm import default_perturbation_scale, perturbation_report, spectrum_analysis
from .linalg import numerical_rank, read_matrix, write_matrix
from .metrics import MetricsReport, class_mean_drift, prototype_gap
from .model import ModelSnapshot, load_checkpoint, save_checkpoint
from .prototypes import DriftCompensationConfig, PrototypeStore
from .regularizers import RegularizerConfig
from .scenario import (SplitSpec, SyntheticStreamSpec, TaskStream, build_splits,
                       generate_synthetic_stream, load_csv_dataset)
from .trainer import RunResult, TaskState, TrainConfig, TrainingDivergedError, run_stream

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "EFCPP_OUTPUT_ROOT"
RANK_TOLS = (1e-6, 1e-8, 1e-10)
ABLATION_COLUMNS = ["regularizer", "F", "PL", "A_step"]


class ConfigError(ValueError):
    pass


def _opt(default, help: str):
    return field(default=default, metadata={"help": help})


@dataclass
class ExperimentConfig:
    # scenario
    mode: str = _opt("cold", "warm or cold start")
    steps: int = _opt(10, "number of incremental steps after the (optional) warm first task")
    classes: int = _opt(50, "total number of classes")
    first_task_classes: int = _opt(0, "classes in the warm first task (0 for cold start)")
    # data
    data: str = _opt("synthetic", "'synthetic' or the path of a label,f0,... training CSV")
    test_data: str = _opt("", "optional held-out CSV; otherwise test_fraction is split off")
    test_fraction: float = _opt(0.25, "per-class held-out fraction for CSV data")
    input_dim: int = _opt(64, "synthetic input dimension")
    train_per_class: int = _opt(200, "synthetic training samples per class")
    test_per_class: int = _opt(100, "synthetic test samples per class")
    mean_scale: float = _opt(1.0, "variance of synthetic class means")
    within_scale: float = _opt(1.0, "synthetic within-class variance")
    shared_dim: int = _opt(8, "dimension of the subspace holding synthetic class means (0: full)")
    stream_drift: float = _opt(0.0, "per-task input rotation angle scale of the synthetic stream")
    data_seed: int = _opt(0, "seed of the synthetic data draw")
    # training
    strategy: str = _opt("efcpp", "efcpp, efc, finetune or reg_ablation")
    epochs: int = _opt(10, "backbone epochs per incremental task")
    first_task_epochs: int = _opt(0, "epochs for the first task (0: same as epochs)")
    rebalance_epochs: int = _opt(10, "classifier re-balancing epochs")
    batch_size: int = _opt(64, "mini-batch size")
    lr_first_task: float = _opt(1e-3, "Adam step size on the first task")
    lr_backbone: float = _opt(1e-3, "Adam step size for the backbone on later tasks")
    lr_head: float = _opt(1e-3, "Adam step size for the new head columns")
    lr_rebalance: float = _opt(1e-2, "step size of the re-balancing optimizer")
    rebalance_optimizer: str = _opt("sgd", "sgd or adam")
    weight_decay: float = _opt(2e-4, "L2 weight decay")
    hidden: str = _opt("128,64", "comma-separated hidden layer widths")
    feature_dim: int = _opt(64, "feature (penultimate) dimension")
    diagonal_cov: bool = _opt(False, "store diagonal prototype covariances only")
    # regularizer
    regularizer: str = _opt("efm", "efm, fd, efim, kd or none")
    lambda_efm: float = _opt(10.0, "EFM penalty weight")
    eta: float = _opt(0.1, "isotropic damping of the EFM penalty")
    lambda_fd: float = _opt(1.0, "feature distillation weight")
    fd_squared: bool = _opt(False, "use the squared feature distillation norm")
    lambda_efim: float = _opt(1e5, "diagonal Fisher (EWC) weight")
    lambda_kd: float = _opt(50.0, "knowledge distillation weight")
    kd_temperature: float = _opt(2.0, "knowledge distillation temperature")
    # prototypes
    sigma2: float = _opt(0.09, "kernel width of the drift compensation weights")
    drift_compensation: bool = _opt(True, "update stored prototype means after each task")
    # orchestration
    seeds: str = _opt("1,2,3,4,5", "comma-separated run seeds (also shuffle the class order)")
    output: str = _opt("runs", "output directory")
    jobs: int = _opt(1, "seeds run in parallel processes")
    checkpoints: bool = _opt(True, "save per-task checkpoints for spectrum/drift/perturb")
    variants: str = _opt("efm,fd,kd,efim,no_update", "ablation rows")
    # analysis commands
    run_dir: str = _opt("", "run directory to analyse (default: output)")
    analysis_seed: int = _opt(-1, "seed to analyse (-1: first of seeds)")
    perturb_task: int = _opt(0, "task whose checkpoint is perturbed")
    perturb_scale: float = _opt(-1.0, "perturbation std (<0: 0.5 * sqrt(trace(E) / rank))")
    perturb_equal_norm: bool = _opt(True, "rescale both perturbation modes to the same norm")

    # -- parsing -------------------------------------------------------------

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, key: str, raw: str):
        kinds = {f.name: type(f.default) for f in fields(cls)}
        if key not in kinds:
            raise ConfigError(f"unknown config key {key!r}")
        kind = kinds[key]
        raw = raw.strip()
        try:
            if kind is bool:
                low = raw.lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            return kind(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> dict:
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            k, v = line.split("=", 1)
            k = k.strip()
            if k in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {k!r}")
            values[k] = cls.coerce(k, v)
        return values

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    # -- derived objects -----------------------------------------------------

    @property
    def seed_list(self) -> list[int]:
        try:
            seeds = [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds: bad list {self.seeds!r}") from None
        if not seeds:
            raise ConfigError("seeds: at least one seed is required")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("seeds: duplicates")
        return seeds

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.classes, self.steps, self.first_task_classes, self.mode)

    def stream_spec(self) -> SyntheticStreamSpec:
        return SyntheticStreamSpec(self.classes, self.input_dim, self.train_per_class,
                                   self.test_per_class, self.mean_scale, self.within_scale,
                                   self.shared_dim, self.stream_drift, self.data_seed)

    def build_stream(self, seed: int) -> TaskStream:
        spec = self.split_spec()
        splits = build_splits(spec, seed)
        if self.data == "synthetic":
            return generate_synthetic_stream(self.stream_spec(), splits, spec.start_index)
        return load_csv_dataset(self.data, splits, self.test_data or None, self.test_fraction,
                                seed=seed, start_index=spec.start_index)

    def train_config(self, seed: int) -> TrainConfig:
        try:
            hidden = tuple(int(h) for h in self.hidden.split(",") if h.strip())
        except ValueError:
            raise ConfigError(f"hidden: bad list {self.hidden!r}") from None
        reg = RegularizerConfig(self.regularizer, self.lambda_efm, self.eta, self.lambda_fd,
                                self.fd_squared, self.lambda_efim, self.lambda_kd,
                                self.kd_temperature)
        return TrainConfig(
            strategy=self.strategy, epochs=self.epochs,
            first_task_epochs=self.first_task_epochs or None,
            rebalance_epochs=self.rebalance_epochs, batch_size=self.batch_size,
            lr_first_task=self.lr_first_task, lr_backbone=self.lr_backbone,
            lr_head=self.lr_head, lr_rebalance=self.lr_rebalance,
            rebalance_optimizer=self.rebalance_optimizer, weight_decay=self.weight_decay,
            hidden=hidden, feature_dim=self.feature_dim, seed=seed, regularizer=reg,
            drift=DriftCompensationConfig(self.sigma2, self.drift_compensation),
            diagonal_cov=self.diagonal_cov)

    def output_dir(self) -> Path:
        out = Path(self.output)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def validate(self) -> None:
        """Fail fast, before any training, on anything the modules would reject."""
        try:
            self.split_spec()
            if self.data == "synthetic":
                self.stream_spec()
            else:
                if not Path(self.data).is_file():
                    raise ConfigError(f"data: no such file {self.data!r}")
                if self.test_data and not Path(self.test_data).is_file():
                    raise ConfigError(f"test_data: no such file {self.test_data!r}")
                if not 0.0 < self.test_fraction < 1.0:
                    raise ConfigError("test_fraction must lie in (0, 1)")
            self.train_config(self.seed_list[0])
            if self.rebalance_optimizer not in ("sgd", "adam"):
                raise ConfigError("rebalance_optimizer must be sgd or adam")
            if self.jobs < 1:
                raise ConfigError("jobs must be >= 1")
            for v in self.variant_list:
                if v not in VARIANTS:
                    raise ConfigError(f"variants: unknown {v!r}; choose from {sorted(VARIANTS)}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]


# ablation rows -> config overrides
VARIANTS = {
    "efm": {"strategy": "efcpp", "regularizer": "efm"},
    "fd": {"strategy": "reg_ablation", "regularizer": "fd"},
    "kd": {"strategy": "reg_ablation", "regularizer": "kd"},
    "efim": {"strategy": "reg_ablation", "regularizer": "efim"},
    "none": {"strategy": "reg_ablation", "regularizer": "none"},
    "no_update": {"strategy": "efcpp", "regularizer": "efm", "drift_compensation": False},
    "efc": {"strategy": "efc", "regularizer": "efm"},
    "finetune": {"strategy": "finetune"},
}


# --------------------------------------------------------------------------- probes


def current_task_drift(stream: TaskStream, state: TaskState, prev: ModelSnapshot | None,
                       k: int):
    """Class-mean drift of the classes of task k across its own training, in the E_k metric.

    Uses held-out data through the stream's test gate; nothing here reaches
    the learner. Returns None on the first task.
    """
    if prev is None or state.efm is None:
        return None
    xt, yt = stream.test_data(k)
    start, stop = stream.tasks[k].columns
    per_class = {c: xt[yt == c] for c in range(start, stop)}
    return class_mean_drift(prev.features, state.extractor.features, state.efm.matrix,
                            per_class)


def checkpoint_probe(directory: Path):
    def probe(stream, state, prev, k):
        d = directory / f"task_{k}"
        save_checkpoint(d, state.extractor, state.head)
        if state.efm is not None:
            write_matrix(d / "efm.efmm", state.efm.matrix)
        if len(state.store):
            state.store.save(d / "prototypes")
        return str(d)
    return probe


# --------------------------------------------------------------------------- artifacts


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def aggregate(reports: list[MetricsReport]) -> dict:
    """Mean and sample standard deviation across seeds (std is 0 for one seed)."""
    out = {}
    for key in ("A_step", "A_inc", "F", "PL"):
        vals = np.array([getattr(r, key) for r in reports])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[key] = {"mean": float(vals.mean()), "std": std}
    return out


def run_one_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path | None) -> dict:
    """Train one seed and write its artifacts; returns the per-seed summary."""
    stream = cfg.build_stream(seed)
    probes = {"drift": current_task_drift}
    if seed_dir is not None and cfg.checkpoints:
        probes["checkpoint"] = checkpoint_probe(seed_dir / "checkpoints")
    result: RunResult = run_stream(stream, cfg.train_config(seed), probes)
    report = result.report
    drift = [None if d is None else d.average for d in result.probes["drift"]]
    summary = {"seed": seed, "strategy": cfg.strategy, "regularizer": cfg.regularizer,
               "metrics": asdict(report), "drift": drift,
               "A_step_per_task": [tl.A_step for tl in result.logs]}
    if seed_dir is not None:
        seed_dir.mkdir(parents=True, exist_ok=True)
        (seed_dir / "accuracy.csv").write_text(result.accuracy.to_csv())
        (seed_dir / "metrics.json").write_text(report.to_json() + "\n")
        with open(seed_dir / "tasks.jsonl", "w") as fh:
            for tl, d in zip(result.logs, drift):
                final = {p: c[-1] for p, c in tl.phases.items() if c}
                fh.write(_dumps({"task": tl.task, "A_step": tl.A_step,
                                 "final_loss": final, "drift": d}) + "\n")
        with open(seed_dir / "timing.jsonl", "w") as fh:
            for tl in result.logs:
                fh.write(_dumps({"task": tl.task, "seconds": tl.timing}) + "\n")
    return summary


def run_seeds(cfg: ExperimentConfig, out: Path | None) -> list[dict]:
    seeds = cfg.seed_list
    dirs = [None if out is None else out / f"seed_{s}" for s in seeds]
    if cfg.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(run_one_seed, [cfg] * len(seeds), seeds, dirs))
    return [run_one_seed(cfg, s, d) for s, d in zip(seeds, dirs)]


def _write_echo(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())


def cmd_run(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir()
    _write_echo(cfg, out)
    summaries = run_seeds(cfg, out)
    with open(out / "runs.jsonl", "w") as fh:
        for s in summaries:
            fh.write(_dumps(s) + "\n")
    reports = [MetricsReport(**s["metrics"]) for s in summaries]
    agg = {"strategy": cfg.strategy, "regularizer": cfg.regularizer,
           "seeds": cfg.seed_list, "metrics": aggregate(reports)}
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    for key, v in agg["metrics"].items():
        print(f"{key:7s} {v['mean']:.4f} +- {v['std']:.4f}")
    return 0


def ablation_rows(cfg: ExperimentConfig, out: Path | None = None) -> list[dict]:
    rows = []
    for name in cfg.variant_list:
        vcfg = replace(cfg, **VARIANTS[name])
        vout = None if out is None else out / name
        summaries = run_seeds(vcfg, vout)
        agg = aggregate([MetricsReport(**s["metrics"]) for s in summaries])
        rows.append({"regularizer": name, "F": agg["F"]["mean"], "PL": agg["PL"]["mean"],
                     "A_step": agg["A_step"]["mean"], "runs": summaries})
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r["regularizer"]] + [repr(float(r[k])) for k in ABLATION_COLUMNS[1:]])
    return buf.getvalue()


def cmd_ablate(cfg: ExperimentConfig) -> int:
    out = cfg.output_dir()
    _write_echo(cfg, out)
    rows = ablation_rows(replace(cfg, checkpoints=False), out)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    with open(out / "ablation_runs.jsonl", "w") as fh:
        for r in rows:
            for s in r["runs"]:
                fh.write(_dumps({"variant": r["regularizer"], **s}) + "\n")
    for r in rows:
        print(f"{r['regularizer']:10s} A_step {r['A_step']:.4f}  F {r['F']:.4f}  PL {r['PL']:.4f}")
    return 0


# --------------------------------------------------------------------------- analysis


def _seed_dir(cfg: ExperimentConfig) -> Path:
    base = Path(cfg.run_dir) if cfg.run_dir else cfg.output_dir()
    seed = cfg.analysis_seed if cfg.analysis_seed >= 0 else cfg.seed_list[0]
    d = base / f"seed_{seed}" / "checkpoints"
    if not d.is_dir():
        raise FileNotFoundError(f"no checkpoints under {d}; run the 'run' command first")
    return d


def _task_dirs(ckpt: Path) -> list[Path]:
    dirs = sorted(ckpt.glob("task_*"), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"{ckpt} holds no task checkpoints")
    return dirs


def _efm_of(d: Path) -> np.ndarray:
    path = d / "efm.efmm"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing (strategy without an EFM?)")
    return read_matrix(path)


def cmd_spectrum(cfg: ExperimentConfig) -> int:
    ckpt = _seed_dir(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    spec_rows, rank_rows = [], []
    for d in _task_dirs(ckpt):
        k = int(d.name.split("_")[1])
        _, head = load_checkpoint(d)
        sp = spectrum_analysis(_efm_of(d))
        for i, ev in enumerate(sp.eigenvalues):
            spec_rows.append([k, i, repr(float(ev))])
        rank_rows.append([k, head.num_classes]
                         + [numerical_rank(sp.eigenvalues, tol) for tol in RANK_TOLS])
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_index", "eigen_index", "eigenvalue"])
        w.writerows(spec_rows)
    with open(out / "rank.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "classes_seen"] + [f"rank_{tol:g}" for tol in RANK_TOLS])
        w.writerows(rank_rows)
    for r in rank_rows:
        print(f"task {r[0]}: {r[1]} classes, rank {r[2:]}")
    return 0


def cmd_drift(cfg: ExperimentConfig) -> int:
    """Per-task class-mean drift and stored-prototype error against true class means."""
    ckpt = _seed_dir(cfg)
    seed = cfg.analysis_seed if cfg.analysis_seed >= 0 else cfg.seed_list[0]
    stream = cfg.build_stream(seed)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    dirs = _task_dirs(ckpt)
    models = [load_checkpoint(d)[0] for d in dirs]
    summary, gaps = [], []
    for k in range(1, len(dirs)):
        xt, yt = stream.test_data(k)
        start, stop = stream.tasks[k].columns
        rep = class_mean_drift(models[k - 1].features, models[k].features, _efm_of(dirs[k]),
                               {c: xt[yt == c] for c in range(start, stop)})
        (out / f"drift_task{k}.csv").write_text(rep.to_csv())
        summary.append([k, repr(rep.average)])
        if (dirs[k] / "prototypes").is_dir():
            store = PrototypeStore.load(dirs[k] / "prototypes")
            true = {}
            for i in range(k):
                xi, yi = stream.test_data(i)
                f = models[k].features(xi)
                for c in range(*stream.tasks[i].columns):
                    true[c] = f[yi == c].mean(axis=0)
            for c, g in prototype_gap(store.means(), true, _efm_of(dirs[k])).items():
                gaps.append([k, c, repr(g["euclidean"]), repr(g["efm"])])
    with open(out / "drift.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "delta"])
        w.writerows(summary)
    with open(out / "prototype_gap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "class", "euclidean", "efm"])
        w.writerows(gaps)
    for k, v in summary:
        print(f"task {k}: delta {float(v):.6g}")
    return 0


def cmd_perturb(cfg: ExperimentConfig) -> int:
    ckpt = _seed_dir(cfg)
    seed = cfg.analysis_seed if cfg.analysis_seed >= 0 else cfg.seed_list[0]
    d = ckpt / f"task_{cfg.perturb_task}"
    if not d.is_dir():
        raise FileNotFoundError(f"no checkpoint {d}")
    extractor, head = load_checkpoint(d)
    sp = spectrum_analysis(_efm_of(d))
    stream = cfg.build_stream(seed)
    xs, ys = zip(*(stream.test_data(i) for i in range(cfg.perturb_task + 1)))
    x, y = np.concatenate(xs), np.concatenate(ys)
    scale = cfg.perturb_scale if cfg.perturb_scale >= 0 else default_perturbation_scale(sp)
    radius = scale * np.sqrt(max(sp.rank, 1)) if cfg.perturb_equal_norm else None
    rng = np.random.default_rng(seed)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cols = ["mode", "noise_scale", "radius", "rank", "mean_abs_softmax_dev",
            "max_abs_softmax_dev", "accuracy_clean", "accuracy_perturbed"]
    with open(out / "perturb.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for mode in ("principal", "non-principal"):
            r = perturbation_report(extractor, head, sp, x, y, scale, mode, rng, radius)
            w.writerow([mode, repr(r.noise_scale), "" if radius is None else repr(float(radius)),
                        r.rank, repr(r.mean_abs_softmax_dev), repr(r.max_abs_softmax_dev),
                        repr(r.accuracy_clean), repr(r.accuracy_perturbed)])
            print(f"{mode:14s} max |dp| {r.max_abs_softmax_dev:.3g}  "
                  f"acc {r.accuracy_clean:.4f} -> {r.accuracy_perturbed:.4f}")
    return 0


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "spectrum": cmd_spectrum,
            "drift": cmd_drift, "perturb": cmd_perturb}


# --------------------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efcpp", description="Exemplar-free class-incremental experiments.",
        epilog=f"Relative output paths are resolved under ${OUTPUT_ROOT_ENV} when set.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value file; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    group = parser.add_argument_group("config keys")
    for f in fields(ExperimentConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None,
                           metavar=type(f.default).__name__.upper(),
                           help=f"{f.metadata['help']} (default: {f.default})")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(ExperimentConfig.from_text(path.read_text(), str(path)))
    for key in ExperimentConfig.keys():
        raw = getattr(args, key)
        if raw is not None:
            values[key] = ExperimentConfig.coerce(key, raw)
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    tic = time.perf_counter()
    try:
        status = COMMANDS[args.command](cfg)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 4
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - tic)
    return status


if __name__ == "__main__":
    sys.exit(main())
