"""Training runs, convergence reports and the train-kind x test-kind error matrix.

Every (dataset kind, seed) training run is cached under
``<out_dir>/runs/<kind>-s<seed>/`` together with its epoch CSV, the selected
checkpoint and a ``run.json`` summary, so convergence and matrix reports can
share runs and be regenerated without retraining.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (GenConfig, find_mnist, load_mnist, load_packed, mnist_subset,
                      read_manifest)
from .geometry import DatasetKind
from .nn import (Network, TrainConfig, default_architecture, evaluate, load_checkpoint,
                 predict, prepare_images, save_checkpoint, train, write_epoch_csv,
                 NumericalDivergence)

log = logging.getLogger(__name__)

MATRIX_KINDS = (DatasetKind.OFFS, DatasetKind.ANGLE, DatasetKind.ROT)


class MissingDataset(FileNotFoundError):
    pass


@dataclass
class ExperimentConfig:
    data_root: str = "data"
    out_dir: str = "results"
    image_size: tuple[int, int] = (64, 64)
    downscale: int = 1
    learning_rate: float = 0.01
    batch_size: int = 8
    max_epochs: int = 300
    target_val_accuracy: float = 0.95
    patience: int | None = None
    dtype: str = "float32"
    deterministic: bool = False
    architecture: list = field(default_factory=default_architecture)

    def hash(self) -> str:
        """Digest of everything that influences a training run (paths excluded)."""
        d = asdict(self)
        for k in ("data_root", "out_dir"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def np_dtype(self):
        return np.float64 if self.deterministic else np.dtype(self.dtype)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs,
                           target_val_accuracy=self.target_val_accuracy, seed=seed,
                           patience=self.patience)

    def input_shape(self):
        h, w = self.image_size
        return (h // self.downscale, w // self.downscale, 1)


def dataset_dir(cfg: ExperimentConfig, kind) -> Path:
    return Path(cfg.data_root) / DatasetKind(kind).value


def load_split(cfg: ExperimentConfig, kind, split: str):
    path = dataset_dir(cfg, kind) / f"{split}.knz"
    if not path.exists():
        raise MissingDataset(f"dataset file {path} not found; run `generate` first")
    images, labels = load_packed(path)
    return prepare_images(images, cfg.downscale, cfg.np_dtype), labels.astype(np.int64)


def dataset_config(cfg: ExperimentConfig, kind) -> dict:
    path = dataset_dir(cfg, kind) / "config.json"
    return json.loads(path.read_text()) if path.exists() else {}


@dataclass
class RunResult:
    kind: str
    seed: int
    run_id: str
    config_hash: str
    outcome: str
    reached_epoch: int | None
    selected_epoch: int
    epochs_trained: int
    checkpoint: str
    epochs_csv: str
    test_error: dict = field(default_factory=dict)

    @property
    def succeeded(self) -> bool:
        return self.reached_epoch is not None


def run_dir(cfg: ExperimentConfig, kind, seed: int) -> Path:
    return Path(cfg.out_dir) / "runs" / f"{DatasetKind(kind).value}-s{seed}"


def run_hash(cfg: ExperimentConfig, kind) -> str:
    """Training config digest combined with the dataset's generation config."""
    data = json.dumps(dataset_config(cfg, kind), sort_keys=True)
    return hashlib.sha256((cfg.hash() + data).encode()).hexdigest()[:12]


def run_training(cfg: ExperimentConfig, kind, seed: int, reuse: bool = True) -> RunResult:
    """Train one fresh model on ``kind``; cached runs with a matching config hash are reused."""
    kind = DatasetKind(kind)
    rdir = run_dir(cfg, kind, seed)
    summary = rdir / "run.json"
    key = run_hash(cfg, kind)
    if reuse and summary.exists():
        cached = RunResult(**json.loads(summary.read_text()))
        if cached.config_hash == key:
            return cached
    train_set = load_split(cfg, kind, "train")
    val_set = load_split(cfg, kind, "val")
    rdir.mkdir(parents=True, exist_ok=True)
    net = Network(cfg.architecture, cfg.input_shape(), seed=seed, dtype=cfg.np_dtype)
    records = []

    def progress(rec):
        records.append(rec)
        write_epoch_csv(rdir / "epochs.csv", records if not cfg.deterministic
                        else [_zero_time(r) for r in records])
        log.info("%s seed %d epoch %d: train %.4f/%.3f val %.4f/%.3f (%.1fs)", kind.value, seed,
                 rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.seconds)

    run_id = f"{kind.value}-s{seed}-{key}"
    try:
        result = train(net, train_set, val_set, cfg.train_config(seed), on_epoch=progress)
        outcome, reached, selected = result.outcome, result.reached_epoch, result.selected_epoch
    except NumericalDivergence as exc:
        log.warning("%s seed %d diverged: %s", kind.value, seed, exc)
        outcome, reached, selected = "Diverged", None, 0
    ckpt = rdir / "model.knzm"
    save_checkpoint(ckpt, net)
    res = RunResult(kind.value, seed, run_id, key, outcome, reached, selected,
                    len(records), str(ckpt), str(rdir / "epochs.csv"))
    summary.write_text(json.dumps(asdict(res), indent=2) + "\n")
    return res


def _zero_time(rec):
    # wall-clock time is the one non-reproducible column
    return type(rec)(**{**asdict(rec), "seconds": 0.0})


def save_run(cfg: ExperimentConfig, res: RunResult) -> None:
    path = run_dir(cfg, res.kind, res.seed) / "run.json"
    path.write_text(json.dumps(asdict(res), indent=2) + "\n")


def load_model(cfg: ExperimentConfig, res: RunResult) -> Network:
    return load_checkpoint(res.checkpoint, dtype=cfg.np_dtype)


# --- convergence ---------------------------------------------------------

@dataclass
class ConvergenceReport:
    kind: str
    seeds: list
    outcomes: list
    epochs_to_target: list
    median_epochs: float | None
    failures: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, kind, runs):
        reached = [r.reached_epoch for r in runs if r.reached_epoch is not None]
        return cls(kind=DatasetKind(kind).value if kind != "mnist" else kind,
                   seeds=[r.seed for r in runs], outcomes=[r.outcome for r in runs],
                   epochs_to_target=[r.reached_epoch for r in runs],
                   median_epochs=statistics.median(reached) if reached else None,
                   failures=len(runs) - len(reached))


CONVERGENCE_FIELDS = ("kind", "seed", "outcome", "epochs_to_target", "median_epochs", "failures")


def write_convergence_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CONVERGENCE_FIELDS)
        for rep in reports:
            for seed, outcome, ep in zip(rep.seeds, rep.outcomes, rep.epochs_to_target):
                w.writerow([rep.kind, seed, outcome, "" if ep is None else ep,
                            "" if rep.median_epochs is None else rep.median_epochs,
                            rep.failures])


def run_convergence(kinds, seeds, cfg: ExperimentConfig) -> list:
    """Epochs-to-target for each kind over ``seeds``; writes ``convergence.csv``."""
    reports = []
    for kind in kinds:
        runs = [run_training(cfg, kind, s) for s in seeds]
        reports.append(ConvergenceReport.from_runs(kind, runs))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_convergence_csv(out / "convergence.csv", reports)
    return reports


def ordering_holds(reports) -> dict:
    """Check median epochs(OFFS) >= median epochs(ANGLE) and >= median epochs(ROT).

    A kind that never reached the target counts as infinitely slow.
    """
    med = {r.kind: (r.median_epochs if r.median_epochs is not None else float("inf"))
           for r in reports}
    offs = med[DatasetKind.OFFS.value]
    return {k: offs >= med[k] for k in (DatasetKind.ANGLE.value, DatasetKind.ROT.value)}


# --- error matrix --------------------------------------------------------

@dataclass
class MatrixCell:
    train_kind: str
    test_kind: str
    error_rate_percent: float
    per_seed_percent: list
    epochs_trained: list
    checkpoint_ids: list


@dataclass
class ErrorMatrix:
    cells: list
    seeds: list
    config_hash: str
    architecture: list

    def cell(self, train_kind, test_kind) -> MatrixCell:
        tr, te = DatasetKind(train_kind).value, DatasetKind(test_kind).value
        for c in self.cells:
            if c.train_kind == tr and c.test_kind == te:
                return c
        raise KeyError((tr, te))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["train_kind", "test_kind", "error_rate_percent", "per_seed_percent",
                    "epochs_trained", "checkpoint_ids", "config_hash"])
        for c in self.cells:
            w.writerow([c.train_kind, c.test_kind, f"{c.error_rate_percent:.4f}",
                        " ".join(f"{e:.4f}" for e in c.per_seed_percent),
                        " ".join(str(e) for e in c.epochs_trained),
                        " ".join(c.checkpoint_ids), self.config_hash])
        return buf.getvalue()

    def to_markdown(self) -> str:
        names = [k.value.upper() for k in MATRIX_KINDS]
        lines = ["| model | # epochs | trained on \\ tested on | " + " | ".join(names) + " |",
                 "|---|---|---|" + "---|" * len(names)]
        for tr in MATRIX_KINDS:
            row = [self.cell(tr, te) for te in MATRIX_KINDS]
            epochs = "/".join(str(e) for e in row[0].epochs_trained)
            vals = " | ".join(f"{c.error_rate_percent:.1f}" for c in row)
            lines.append(f"| small CNN | {epochs} | {tr.value.upper()} | {vals} |")
        lines.append("")
        lines.append(f"Test error rates [%], mean over seeds {self.seeds}; "
                     f"config {self.config_hash}.")
        return "\n".join(lines) + "\n"


def evaluate_run(cfg: ExperimentConfig, res: RunResult, test_kinds, cache=None) -> dict:
    """Test error (fraction) of a run's selected checkpoint on each test kind."""
    net = load_model(cfg, res)
    errors = {}
    for kind in test_kinds:
        kind = DatasetKind(kind)
        if cache is not None and kind not in cache:
            cache[kind] = load_split(cfg, kind, "test")
        x, y = cache[kind] if cache is not None else load_split(cfg, kind, "test")
        errors[kind.value] = evaluate(net, x, y)
    return errors


def run_matrix(cfg: ExperimentConfig, seeds) -> ErrorMatrix:
    """Train on each of OFFS/ANGLE/ROT and test on all three; writes CSV + markdown."""
    for kind in MATRIX_KINDS:
        if not (dataset_dir(cfg, kind) / "test.knz").exists():
            raise MissingDataset(f"{kind.value} dataset missing under {cfg.data_root}")
    test_cache = {}
    per = {}
    for tr in MATRIX_KINDS:
        for s in seeds:
            res = run_training(cfg, tr, s)
            missing = [k for k in MATRIX_KINDS if k.value not in res.test_error]
            if missing:
                res.test_error.update(evaluate_run(cfg, res, missing, test_cache))
                save_run(cfg, res)
            per[tr, s] = res
    cells = []
    for tr in MATRIX_KINDS:
        for te in MATRIX_KINDS:
            runs = [per[tr, s] for s in seeds]
            errs = [100.0 * r.test_error[te.value] for r in runs]
            cells.append(MatrixCell(tr.value, te.value, float(np.mean(errs)), errs,
                                    [r.epochs_trained for r in runs], [r.run_id for r in runs]))
    matrix = ErrorMatrix(cells, list(seeds), cfg.hash(), cfg.architecture)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "matrix.csv").write_text(matrix.to_csv())
    (out / "matrix.md").write_text(matrix.to_markdown())
    return matrix


# --- COMB ----------------------------------------------------------------

def stratified_errors(net: Network, x, y, manifest_rows) -> dict:
    """Error rate per manifest perturbation kind ("none" = valid samples)."""
    pred = predict(net, x)
    kinds = np.array([r["kind"] for r in manifest_rows])
    out = {}
    for k in sorted(set(kinds)):
        sel = kinds == k
        out[str(k)] = float((pred[sel] != y[sel]).mean())
    return out


def run_comb(cfg: ExperimentConfig, seeds) -> ConvergenceReport:
    kind = DatasetKind.COMB
    if not (dataset_dir(cfg, kind) / "test.knz").exists():
        raise MissingDataset(f"comb dataset missing under {cfg.data_root}")
    runs = [run_training(cfg, kind, s) for s in seeds]
    x, y = load_split(cfg, kind, "test")
    rows = [r for r in read_manifest(dataset_dir(cfg, kind) / "manifest.csv")
            if r["split"] == "test"]
    breakdown = {}
    for res in runs:
        net = load_model(cfg, res)
        strat = stratified_errors(net, x, y, rows)
        strat["all"] = evaluate(net, x, y)
        breakdown[res.seed] = strat
    report = ConvergenceReport.from_runs(kind, runs)
    report.extra["test_error_by_kind"] = breakdown
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comb.json").write_text(json.dumps(asdict(report), indent=2) + "\n")
    return report


# --- MNIST reference -----------------------------------------------------

def prepare_mnist(images) -> np.ndarray:
    """MNIST is white ink on black; map intensities to [0, 1] with ink high."""
    return (np.asarray(images, dtype=np.float32) / 255.0)[..., None]


def run_mnist_reference(cfg: ExperimentConfig, seed: int = 0, mnist_root=None,
                        max_epochs: int | None = None) -> ConvergenceReport:
    """Train a 10-way head on the 30k/10k/10k MNIST subset.

    Reports epochs to 95% validation accuracy and the first epoch whose test
    error drops below 5%.
    """
    root = Path(mnist_root) if mnist_root else Path(cfg.data_root) / "mnist"
    if find_mnist(root) is None:
        raise MissingDataset(f"MNIST IDX files not found under {root}")
    raw = load_mnist(root)
    (xtr, ytr), (xte, yte), _ = mnist_subset(raw["train_images"], raw["train_labels"], seed)
    sizes = (len(xtr), len(raw["val_images"]), len(xte))
    x, xv, xt = (prepare_mnist(a).astype(cfg.np_dtype) for a in (xtr, raw["val_images"], xte))
    y, yv, yt = (np.asarray(a, dtype=np.int64) for a in (ytr, raw["val_labels"], yte))
    arch = cfg.architecture[:-1] + [{"type": "Dense", "out": 10}]
    net = Network(arch, x.shape[1:], seed=seed, dtype=cfg.np_dtype)
    tcfg = cfg.train_config(seed)
    if max_epochs is not None:
        tcfg.max_epochs = max_epochs
    test_errors = []

    def track(rec):
        test_errors.append(evaluate(net, xt, yt))

    result = train(net, (x, y), (xv, yv), tcfg, on_epoch=track)
    below = [i + 1 for i, e in enumerate(test_errors) if e < 0.05]
    res = RunResult("mnist", seed, f"mnist-s{seed}-{cfg.hash()}", cfg.hash(), result.outcome,
                    result.reached_epoch, result.selected_epoch, len(result.records), "", "")
    report = ConvergenceReport.from_runs("mnist", [res])
    report.extra.update(subset_sizes=sizes, test_error_per_epoch=test_errors,
                        epochs_to_test_error_below_5pct=below[0] if below else None)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mnist.json").write_text(json.dumps(asdict(report), indent=2) + "\n")
    return report


# --- chance control ------------------------------------------------------

def shuffled_label_error(net: Network, x, y, seed: int = 0) -> float:
    """Error against a random permutation of the labels; sits at chance for any model."""
    perm_y = np.random.default_rng(seed).permutation(y)
    return evaluate(net, x, perm_y)


def default_gen_config(kind, cfg: ExperimentConfig, counts=(8000, 2000, 2000),
                       master_seed: int = 0, supersample: int = 8, write_png=False) -> GenConfig:
    from .raster import RasterConfig
    h, w = cfg.image_size
    return GenConfig(kind=kind, counts=counts, image=RasterConfig(w, h, supersample),
                     master_seed=master_seed, write_png=write_png)
