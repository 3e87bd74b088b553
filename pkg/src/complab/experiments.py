"""Run files, single training runs and the named ablations.

A run file is INI text with a ``[run]`` and a ``[train]`` section::

    [run]
    design = design1_conv        ; builtin name, or: spec = path/to/net.net
    scale = small                ; full | small | tiny
    dataset = synthetic          ; a CIFAR-10 binary directory, or synthetic
    output = runs/d1c-seed1

    [train]
    seed = 1
    epochs = 20                  ; default depends on scale
    batch_size = 128
    policy = poly                ; fixed exponential step inverse poly sigmoid
    lambda0 = 0.05
    gamma = 0.1
    c = 1.0
    step = 0                     ; 0 -> a third of the run (step policy)
    l1 = 0
    l2 = 0
    dropout = yes
    batch_norm = yes
    augment = yes
    balancing = none             ; none | uniform | stratified

Unknown keys are rejected so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .analyzer import count_params
from .data import ImageSet, load_cifar10, synthetic_cifar
from .model import build_model
from .netspec import DESIGN_NAMES, NetSpec, load_spec
from .optim import DecayPolicy, MetricsLog, TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scale:
    divisor: int
    train_size: int
    test_size: int
    epochs: int


SCALES = {
    "full": Scale(1, 50000, 10000, 60),
    "small": Scale(4, 10000, 2000, 20),
    "tiny": Scale(8, 512, 256, 2),
}


@dataclass
class RunFile:
    design: str = "design1_conv"
    scale: str = "small"
    dataset: str = "synthetic"
    output: str = "runs/run"
    train: TrainConfig = field(default_factory=TrainConfig)
    train_size: int | None = None
    test_size: int | None = None
    auto_step: bool = False  # step policy: decay every third of the run

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; expected one of {tuple(SCALES)}")

    def spec(self) -> NetSpec:
        return load_spec(self.design).scaled(SCALES[self.scale].divisor)

    def to_dict(self) -> dict:
        return asdict(self)


_RUN_KEYS = {"design", "spec", "scale", "dataset", "output", "train_size", "test_size"}
_TRAIN_KEYS = {"seed", "epochs", "batch_size", "policy", "lambda0", "gamma", "c", "step", "max_iter",
               "l1", "l2", "dropout", "batch_norm", "augment", "balancing"}


def parse_runfile(text: str, base_dir: str | Path = ".") -> RunFile:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.read_string(text)
    run = cp["run"] if cp.has_section("run") else {}
    tr = cp["train"] if cp.has_section("train") else {}
    for sect, allowed in (("run", _RUN_KEYS), ("train", _TRAIN_KEYS)):
        if cp.has_section(sect):
            extra = set(cp[sect]) - allowed
            if extra:
                raise ValueError(f"unknown keys in [{sect}]: {sorted(extra)}")
    scale = run.get("scale", "small")
    if scale not in SCALES:
        raise ValueError(f"unknown scale {scale!r}; expected one of {tuple(SCALES)}")
    design = run.get("design", "design1_conv")
    if "spec" in run:
        design = str(Path(base_dir) / run["spec"])
    elif design not in DESIGN_NAMES:
        raise ValueError(f"unknown design {design!r}; valid names: {', '.join(DESIGN_NAMES)}")
    dataset = run.get("dataset", "synthetic")
    if dataset != "synthetic":
        dataset = str(Path(base_dir) / dataset)

    def yes(key, default=True):
        return cp.getboolean("train", key, fallback=default) if cp.has_section("train") else default

    step = int(tr.get("step", 0))
    policy = DecayPolicy(kind=tr.get("policy", "poly"), lambda0=float(tr.get("lambda0", 0.05)),
                         gamma=float(tr.get("gamma", 0.1)), c=float(tr.get("c", 1.0)),
                         step=max(step, 1), max_iter=int(tr.get("max_iter", 1)))
    cfg = TrainConfig(batch_size=int(tr.get("batch_size", 128)),
                      epochs=int(tr.get("epochs", SCALES[scale].epochs)), seed=int(tr.get("seed", 1)),
                      policy=policy, l1_coeff=float(tr.get("l1", 0)), l2_coeff=float(tr.get("l2", 0)),
                      dropout_enabled=yes("dropout"), bn_enabled=yes("batch_norm"), augment=yes("augment"),
                      balancing=tr.get("balancing", "none"))
    out = Path(base_dir) / run.get("output", "runs/run")
    return RunFile(design=design, scale=scale, dataset=dataset, output=str(out), train=cfg,
                   train_size=int(run["train_size"]) if "train_size" in run else None,
                   test_size=int(run["test_size"]) if "test_size" in run else None,
                   auto_step=policy.kind == "step" and step == 0)


def load_runfile(path) -> RunFile:
    path = Path(path)
    return parse_runfile(path.read_text(encoding="utf-8"), base_dir=path.parent)


@lru_cache(maxsize=2)
def _cifar(root: str) -> tuple[ImageSet, ImageSet]:
    return load_cifar10(root)


def load_data(run: RunFile) -> tuple[ImageSet, ImageSet]:
    sc = SCALES[run.scale]
    ntr = run.train_size or sc.train_size
    nte = run.test_size or sc.test_size
    if run.dataset == "synthetic":
        return synthetic_cifar(ntr, seed=0), synthetic_cifar(nte, seed=1)
    tr, te = _cifar(run.dataset)
    return tr.subset(ntr), te.subset(nte)


def resolve_config(run: RunFile, n_train: int) -> TrainConfig:
    """Fill run-length dependent policy fields (poly horizon, step size)."""
    cfg = run.train
    steps = n_train // cfg.batch_size
    total = max(steps * cfg.epochs, 1)
    pol = cfg.policy
    if pol.kind == "poly" and pol.max_iter <= 1:
        pol = replace(pol, max_iter=total)
    if pol.kind == "step" and run.auto_step:
        pol = replace(pol, step=max(total // 3, 1))
    return replace(cfg, policy=pol)


def execute(run: RunFile, write: bool = True) -> tuple[MetricsLog, dict]:
    """Train one run and (optionally) persist CSV, summary and config into ``run.output``."""
    train_set, test_set = load_data(run)
    cfg = resolve_config(run, len(train_set))
    spec = run.spec()
    model = build_model(spec, np.random.default_rng([cfg.seed, 0]), bn_enabled=cfg.bn_enabled,
                        dropout_enabled=cfg.dropout_enabled)
    _, total = count_params(spec, bn=cfg.bn_enabled)
    out = Path(run.output)
    resolved = {**run.to_dict(), "train": cfg.to_dict(), "train_images": len(train_set),
                "test_images": len(test_set)}
    csv_path = out / "metrics.csv"
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
        csv_path.write_text("epoch,train_loss,train_acc,test_acc,lr\n")

    def append(rec):
        if write:
            with csv_path.open("a") as fh:
                fh.write(f"{rec.epoch},{rec.train_loss:.10g},{rec.train_acc:.10g},{rec.test_acc:.10g},{rec.lr:.10g}\n")

    mlog = train(model, train_set, test_set, cfg, on_epoch=append)
    summary = {"model": spec.name, "design": run.design, "scale": run.scale, "seed": cfg.seed,
               "params": total, "params_K": round(total / 1000), **mlog.summary(), "config": resolved}
    if write:
        np.savez(out / "weights.npz", *model.state_arrays())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return mlog, summary


def load_trained(run_dir) -> tuple["Model", RunFile]:
    """Rebuild the model of a finished run from its config and stored weights."""
    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    train_cfg = cfg.pop("train")
    for k in ("train_images", "test_images"):
        cfg.pop(k, None)
    run = RunFile(**cfg, train=TrainConfig(**train_cfg))
    model = build_model(run.spec(), np.random.default_rng(0), bn_enabled=run.train.bn_enabled,
                        dropout_enabled=run.train.dropout_enabled)
    with np.load(run_dir / "weights.npz") as z:
        model.load_state(z[f"arr_{i}"] for i in range(len(z.files)))
    return model, run


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    model: str
    label: str
    design: str
    overrides: tuple = ()
    reference_acc: float | None = None


# reference test accuracies (%) as reported for the full-scale CIFAR-10 runs
ABLATIONS: dict[str, list[Variant]] = {
    "designs": [
        Variant("design 1", "max_pool", "design1", reference_acc=89.4),
        Variant("design 2", "fast reduction", "design2", reference_acc=86.8),
        Variant("design 3", "shallow block3", "design3", reference_acc=87.9),
    ],
    "conv_vs_pool": [
        Variant("design 1_conv", "strided conv", "design1_conv", reference_acc=91.7),
        Variant("design 1 (max_pooling)", "max_pool", "design1", reference_acc=89.4),
    ],
    "regularization": [
        Variant("design 1_conv", "dropout=yes bn=yes", "design1_conv", reference_acc=91.7),
        Variant("design 1_conv", "dropout=yes bn=no", "design1_conv", (("bn_enabled", False),), 88.2),
        Variant("design 1_conv", "dropout=no bn=yes", "design1_conv", (("dropout_enabled", False),), 90.1),
    ],
    "lr_policy": [
        Variant("design 1_conv", "polynomial", "design1_conv", reference_acc=91.7),
        Variant("design 1_conv", "step", "design1_conv", (("policy", "step"),), 90.1),
    ],
    "reduction_rate": [
        Variant("design 1_conv", "first_layer_stride=no", "design1_conv", reference_acc=91.7),
        Variant("design 1_conv_stride", "first_layer_stride=yes", "design1_conv_stride", reference_acc=89.4),
    ],
    "depth": [
        Variant("design 1_conv", "compositional", "design1_conv", reference_acc=91.7),
        Variant("design 4", "deeper residual", "design4", reference_acc=89.3),
    ],
}


def variant_runfile(v: Variant, seed: int, scale: str, dataset: str, out_root: Path,
                    epochs: int | None = None) -> RunFile:
    cfg = TrainConfig(seed=seed, epochs=epochs if epochs is not None else SCALES[scale].epochs)
    for key, val in v.overrides:
        if key == "policy":
            cfg = replace(cfg, policy=DecayPolicy(kind=val, lambda0=cfg.policy.lambda0))
        else:
            cfg = replace(cfg, **{key: val})
    return RunFile(design=v.design, scale=scale, dataset=dataset, train=cfg,
                   output=str(out_root / run_slug(v) / f"seed{seed}"),
                   auto_step=cfg.policy.kind == "step")


def run_slug(v: Variant) -> str:
    extra = "-".join(f"{k}={val}" for k, val in v.overrides)
    return v.design + (f"-{extra}" if extra else "")


def _run_cached(run: RunFile) -> dict:
    """Reuse a finished run whose stored config matches; otherwise train."""
    summ = Path(run.output) / "summary.json"
    if summ.is_file() and (Path(run.output) / "weights.npz").is_file():
        old = json.loads(summ.read_text())
        train_set_n = old.get("config", {}).get("train_images")
        if train_set_n is not None:
            want = {**run.to_dict(), "train": resolve_config(run, train_set_n).to_dict()}
            have = {k: old["config"][k] for k in want}
            if json.loads(json.dumps(want)) == have:
                return old
    return execute(run)[1]


def _run_safe(run: RunFile) -> dict:
    try:
        return _run_cached(run)
    except Exception as exc:  # a failed variant becomes a marked row
        log.exception("run %s failed", run.output)
        return {"error": f"{type(exc).__name__}: {exc}", "seed": run.train.seed}


@dataclass
class AblationRow:
    model: str
    variant: str
    params_K: int
    mean_test_acc: float | None
    std: float | None
    seeds: list[int]
    accs: list[float]
    reference_acc: float | None
    failures: list[str] = field(default_factory=list)


@dataclass
class AblationResult:
    name: str
    scale: str
    rows: list[AblationRow]

    def to_dict(self):
        return asdict(self)

    def to_markdown(self) -> str:
        lines = [f"### {self.name} ({self.scale} scale)", "",
                 "| model | variant | #params (K) | test_accuracy (%) | std | seeds | reference (%) |",
                 "|---|---|---|---|---|---|---|"]
        for r in self.rows:
            acc = "FAILED" if r.mean_test_acc is None else f"{100 * r.mean_test_acc:.1f}"
            std = "-" if r.std is None else f"{100 * r.std:.1f}"
            ref = "-" if r.reference_acc is None else f"{r.reference_acc:.1f}"
            lines.append(f"| {r.model} | {r.variant} | {r.params_K} | {acc} | {std} | "
                         f"{','.join(map(str, r.seeds))} | {ref} |")
        fails = [f for r in self.rows for f in r.failures]
        if fails:
            lines += [""] + [f"- failure: {f}" for f in fails]
        return "\n".join(lines) + "\n"


def run_ablation(name: str, scale: str = "small", seeds=(1, 2, 3), dataset: str = "synthetic",
                 out_root: str | Path = "results", parallel_seeds: int = 1,
                 epochs: int | None = None) -> AblationResult:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; expected one of {tuple(ABLATIONS)}")
    root = Path(out_root) / scale
    runs = [(v, variant_runfile(v, s, scale, dataset, root, epochs)) for v in ABLATIONS[name] for s in seeds]
    if parallel_seeds > 1:
        with ProcessPoolExecutor(max_workers=parallel_seeds) as pool:
            results = list(pool.map(_run_safe, [r for _, r in runs]))
    else:
        results = [_run_safe(r) for _, r in runs]
    rows = []
    for v in ABLATIONS[name]:
        mine = [(r, res) for (vv, r), res in zip(runs, results) if vv is v]
        ok = [res for _, res in mine if "error" not in res]
        accs = [res["final_test_acc"] for res in ok]
        spec = load_spec(v.design).scaled(SCALES[scale].divisor)
        bn = dict(v.overrides).get("bn_enabled", True)
        params_k = round(count_params(spec, bn=bn)[1] / 1000)
        rows.append(AblationRow(
            model=v.model, variant=v.label, params_K=params_k,
            mean_test_acc=float(np.mean(accs)) if accs else None,
            std=float(np.std(accs)) if accs else None,
            seeds=[res["seed"] for res in ok], accs=accs, reference_acc=v.reference_acc,
            failures=[f"seed {res['seed']}: {res['error']}" for _, res in mine if "error" in res]))
    result = AblationResult(name=name, scale=scale, rows=rows)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"ablation_{name}.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    (root / f"ablation_{name}.md").write_text(result.to_markdown())
    return result


@dataclass(frozen=True)
class Direction:
    ablation: str
    better: str  # variant labels
    worse: str
    text: str


MIN_RUN_ACC = 0.40  # every desk-scale run must clear this, far above 10% chance

# orderings of the mean test accuracy expected to survive a shrunk setup
DIRECTIONS = (
    Direction("conv_vs_pool", "strided conv", "max_pool", "design1_conv > design1"),
    Direction("designs", "max_pool", "fast reduction", "design1 > design2"),
    Direction("lr_policy", "polynomial", "step", "poly > step"),
    Direction("regularization", "dropout=yes bn=yes", "dropout=yes bn=no", "BN on > BN off"),
    Direction("reduction_rate", "first_layer_stride=no", "first_layer_stride=yes",
              "design1_conv > design1_conv_stride"),
)


@dataclass
class DirectionCheck:
    text: str
    better_acc: float | None
    worse_acc: float | None

    @property
    def holds(self) -> bool:
        return None not in (self.better_acc, self.worse_acc) and self.better_acc > self.worse_acc


def check_directions(results: dict[str, AblationResult]) -> list[DirectionCheck]:
    out = []
    for d in DIRECTIONS:
        rows = {r.variant: r for r in results[d.ablation].rows}
        out.append(DirectionCheck(d.text, rows[d.better].mean_test_acc, rows[d.worse].mean_test_acc))
    return out


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def collect_summaries(results_dir) -> list[dict]:
    rows = []
    for p in sorted(Path(results_dir).rglob("summary.json")):
        s = json.loads(p.read_text())
        rows.append({"model": s.get("model", "?"), "run": str(p.parent.relative_to(results_dir)),
                     "seed": s.get("seed"), "params_K": s.get("params_K"),
                     "final_test_acc": s.get("final_test_acc"), "epochs": s.get("epochs")})
    rows.sort(key=lambda r: (r["model"], r["run"]))
    return rows


def render_report(rows: list[dict], fmt: str = "markdown") -> str:
    if not rows:
        return ""
    cols = ["model", "run", "seed", "params_K", "final_test_acc", "epochs"]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}" if math.isfinite(v) else str(v)
        return "" if v is None else str(v)

    if fmt == "csv":
        return "\n".join([",".join(cols)] + [",".join(cell(r[c]) for c in cols) for r in rows]) + "\n"
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(cell(r[c]) for c in cols) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def default_dataset() -> str:
    from .data import DATA_ENV
    return os.environ.get(DATA_ENV) or "synthetic"
