"""Patient-level cross-validation, Adam with gradient accumulation, early stopping."""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .datamodel import Cohort, fit_bins, with_bins
from .matfile import atomic_write
from .model import ABLATIONS, ModelConfig, ProtoSurvModel, config_from_strings
from .rng import substream, substream_seed
from .survival import c_index

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    epochs_max: int = 50
    patience: int = 10
    grad_accum: int = 32
    n_folds: int = 5
    seed: int = 1
    K_H: int = 12
    K_S: int = 8
    blend_alpha: float = 0.1
    k_min: int = 60
    ema_beta: float = 0.95
    lambda_div: float = 0.2
    nll_alpha: float = 0.4
    n_bins: int = 4
    ablation: frozenset = field(default_factory=frozenset)
    topk_strategy: str = "hardcode"
    topk_proportion: float = 1.0
    # architecture / plumbing
    d: int = 512
    d_gate: int = 256
    n_heads: int = 4
    dropout: float = 0.25
    blend_normalize_t: bool = True
    diversity_form: str = "supp"
    logit_scale: float = 1.0
    ema: bool = True
    patient_risk: str = "mean"
    dtype: str = "float64"

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)
        for name in ("lr", "epochs_max", "patience", "grad_accum", "n_folds", "K_H", "K_S", "n_bins", "d"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda_div < 0:
            raise ValueError("weight_decay and lambda_div must be >= 0")
        if not 0 < self.blend_alpha < 1:
            raise ValueError("blend_alpha must lie in (0, 1)")
        if not 0 < self.ema_beta < 1:
            raise ValueError("ema_beta must lie in (0, 1)")
        if not 0 <= self.nll_alpha <= 1:
            raise ValueError("nll_alpha must lie in [0, 1]")
        unknown = self.ablation - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")
        if {"hist_only", "st_only"} <= self.ablation:
            raise ValueError("hist_only and st_only are mutually exclusive")
        if self.topk_strategy not in ("hardcode", "proportion"):
            raise ValueError(f"unknown topk_strategy {self.topk_strategy!r}")
        if self.patient_risk not in ("mean", "max"):
            raise ValueError(f"unknown patient_risk aggregation {self.patient_risk!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")

    def model_config(self, d_hist: int, d_st: int) -> ModelConfig:
        return ModelConfig(
            d_hist=d_hist, d_st=d_st, d=self.d, n_heads=self.n_heads, d_gate=self.d_gate,
            K_H=self.K_H, K_S=self.K_S, n_bins=self.n_bins, blend_alpha=self.blend_alpha,
            blend_normalize_t=self.blend_normalize_t, k_min=self.k_min,
            topk_strategy=self.topk_strategy, topk_proportion=self.topk_proportion,
            logit_scale=self.logit_scale, ema_beta=self.ema_beta, lambda_div=self.lambda_div,
            diversity_form=self.diversity_form, nll_alpha=self.nll_alpha, dropout=self.dropout,
            ablation=self.ablation)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, frozenset):
                v = ",".join(sorted(v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def parse_flat(text: str, cls, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines (``#`` starts a comment) checked against ``cls`` fields."""
    raw = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in known:
            raise ValueError(f"{source}:{lineno}: unknown key {k!r}")
        if k in raw:
            raise ValueError(f"{source}:{lineno}: duplicate key {k!r}")
        raw[k] = v
    return raw


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    return config_from_strings(parse_flat(text, TrainConfig, source), TrainConfig)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------- folds


def split_folds(cohort: Cohort, n_folds: int, seed: int) -> list[tuple[list[str], list[str]]]:
    """Partition patients (not slides) into ``n_folds`` validation groups."""
    pids = cohort.patient_ids
    if len(pids) < n_folds:
        raise ValueError(f"{len(pids)} patients cannot fill {n_folds} folds")
    perm = substream(seed, "folds").permutation(len(pids))
    groups = np.array_split(perm, n_folds)
    out = []
    for g in groups:
        val = sorted(pids[i] for i in g)
        vs = set(val)
        out.append(([p for p in pids if p not in vs], val))
    return out


def assert_no_leakage(train_cohort: Cohort, val_cohort: Cohort) -> None:
    overlap = set(train_cohort.patient_ids) & set(val_cohort.patient_ids)
    if overlap:
        raise AssertionError(f"patients in both train and val: {sorted(overlap)}")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with decoupled weight decay (AdamW form)."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class GradAccumulator:
    """Sums per-bag gradients; ``mean()`` gives their average."""

    def __init__(self, params):
        self.params = list(params)
        self.reset()

    def reset(self) -> None:
        self.sums = [np.zeros_like(p.data) for p in self.params]
        self.count = 0

    def add(self) -> None:
        for s, p in zip(self.sums, self.params):
            if p.grad is not None:
                s += p.grad
            p.grad = None
        self.count += 1

    def mean(self) -> list[np.ndarray]:
        return [s / self.count for s in self.sums]


class EarlyStopper:
    """Stops once ``patience`` epochs pass without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = -1

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; returns True when training should stop."""
        if score > self.best:
            self.best, self.best_epoch = score, epoch
        return epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------- training


class FoldAborted(RuntimeError):
    pass


@dataclass
class FoldResult:
    fold_id: int
    best_epoch: int
    val_c_index_curve: list[float]
    c_index_best_pm1: float
    train_loss_curve: list[float]
    val_nll_curve: list[float]
    div_curve: list[tuple[float, float]]
    bin_edges: tuple[float, ...]
    best_state: dict = field(repr=False, default_factory=dict)
    checkpoint: str | None = None

    @property
    def c_index(self) -> float:
        return self.val_c_index_curve[self.best_epoch]


def best_pm1(curve: list[float], best: int) -> float:
    lo, hi = max(0, best - 1), min(len(curve) - 1, best + 1)
    return float(np.mean(curve[lo:hi + 1]))


def patient_risks(model: ProtoSurvModel, cohort: Cohort, how: str = "mean") -> tuple[list, list, list]:
    """Per-patient risk (slide risks aggregated), times and censor flags."""
    agg = np.mean if how == "mean" else np.max
    risks, times, cens = [], [], []
    for pid, bags in cohort.by_patient().items():
        risks.append(float(agg([model.risk(b) for b in bags])))
        times.append(bags[0].label.time)
        cens.append(bags[0].label.censored)
    return risks, times, cens


def evaluate(model: ProtoSurvModel, cohort: Cohort, how: str = "mean") -> float:
    return c_index(*patient_risks(model, cohort, how))


def _val_nll(model: ProtoSurvModel, cohort: Cohort) -> float:
    return float(np.mean([model.forward(b, train=False).nll.item() for b in cohort.bags]))


def train_fold(cohort: Cohort, train_ids, val_ids, cfg: TrainConfig, fold_id: int = 0) -> FoldResult:
    train_c = cohort.subset(train_ids)
    val_c = cohort.subset(val_ids)
    assert_no_leakage(train_c, val_c)
    edges = fit_bins([(lab.time, lab.censored) for lab in train_c.patient_labels().values()], cfg.n_bins)
    train_c, val_c = with_bins(train_c, edges), with_bins(val_c, edges)
    vl = list(val_c.patient_labels().values())
    if not any(not a.censored and a.time < b.time for a in vl for b in vl):
        raise ValueError(f"fold {fold_id}: validation patients have no comparable pairs")

    prev_dtype = dm.get_default_dtype()
    dm.set_default_dtype(np.float32 if cfg.dtype == "float32" else np.float64)
    try:
        d_hist, d_st = cohort.dims
        model = ProtoSurvModel(cfg.model_config(d_hist, d_st), seed=cfg.seed)
        params = model.parameters()
        opt = Adam(params, cfg.lr, cfg.weight_decay)
        acc = GradAccumulator(params)
        drop_rng = dm.DropoutRNG(substream_seed(cfg.seed, "dropout"))
        order_rng = substream(cfg.seed, "order")
        stopper = EarlyStopper(cfg.patience)
        curve, losses, val_nll, div_curve = [], [], [], []
        best_state: dict = {}
        for epoch in range(cfg.epochs_max):
            for bank in model.active_banks():
                bank.reset_epoch()
            bags = [train_c.bags[i] for i in order_rng.permutation(len(train_c.bags))]
            ep_loss = 0.0
            for bag in bags:
                try:
                    fwd = model.forward(bag, train=True, rng=drop_rng)
                except dm.NonFiniteError as exc:
                    raise FoldAborted(f"fold {fold_id} epoch {epoch}: non-finite value on bag "
                                      f"{bag.slide_id}: {exc}") from exc
                if not math.isfinite(fwd.loss.item()):
                    raise FoldAborted(f"fold {fold_id} epoch {epoch}: non-finite loss on bag {bag.slide_id}")
                ep_loss += fwd.loss.item()
                dm.backward(fwd.loss)
                acc.add()
                if acc.count == cfg.grad_accum:
                    opt.step(acc.mean())
                    acc.reset()
            if acc.count:
                opt.step(acc.mean())
                acc.reset()
            if cfg.ema:
                for bank in model.active_banks():
                    bank.ema_update()
            score = evaluate(model, val_c, cfg.patient_risk)
            curve.append(score)
            losses.append(ep_loss / len(bags))
            val_nll.append(_val_nll(model, val_c))
            div_curve.append(tuple(float(diversity_of(model, m)) for m in ("hist", "st")))
            log.info("fold %d epoch %d loss %.4f val_c %.4f", fold_id, epoch, losses[-1], score)
            stop = stopper.update(epoch, score)
            if stopper.best_epoch == epoch:
                best_state = model.state()
            if stop:
                break
    finally:
        dm.set_default_dtype(prev_dtype)
    best = stopper.best_epoch
    return FoldResult(fold_id, best, curve, best_pm1(curve, best), losses, val_nll, div_curve,
                      tuple(edges), best_state)


def diversity_of(model: ProtoSurvModel, modality: str) -> float:
    from .prototypes import diversity_loss

    return diversity_loss(model.banks[modality].P.data, model.cfg.diversity_form).item()


# ---------------------------------------------------------------- cross-validation


@dataclass
class CVSummary:
    folds: list[FoldResult]

    @property
    def scores(self) -> np.ndarray:
        return np.array([f.c_index_best_pm1 for f in self.folds])

    @property
    def mean(self) -> float:
        return float(self.scores.mean())

    @property
    def std(self) -> float:
        return float(self.scores.std())


def _fold_job(args):
    cohort, tr, va, cfg, i = args
    return train_fold(cohort, tr, va, cfg, i)


def run_cv(cohort: Cohort, cfg: TrainConfig, out_dir=None, jobs: int = 1) -> CVSummary:
    splits = split_folds(cohort, cfg.n_folds, cfg.seed)
    tasks = [(cohort, tr, va, cfg, i) for i, (tr, va) in enumerate(splits)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            folds = list(ex.map(_fold_job, tasks))
    else:
        folds = [_fold_job(t) for t in tasks]
    summary = CVSummary(folds)
    if out_dir is not None:
        write_results(summary, cohort, cfg, out_dir)
    return summary


def metrics_text(summary: CVSummary) -> str:
    lines = []
    for f in summary.folds:
        k = f"fold{f.fold_id}"
        lines += [
            f"{k}.best_epoch: {f.best_epoch}",
            f"{k}.epochs_trained: {len(f.val_c_index_curve)}",
            f"{k}.c_index: {f.c_index:.6f}",
            f"{k}.c_index_best_pm1: {f.c_index_best_pm1:.6f}",
            f"{k}.nll: {f.val_nll_curve[f.best_epoch]:.6f}",
            f"{k}.div_H: {f.div_curve[f.best_epoch][0]:.6f}",
            f"{k}.div_S: {f.div_curve[f.best_epoch][1]:.6f}",
        ]
    best = np.array([f.c_index for f in summary.folds])
    nll = np.array([f.val_nll_curve[f.best_epoch] for f in summary.folds])
    lines += [
        f"c_index_mean: {best.mean():.6f}",
        f"c_index_std: {best.std():.6f}",
        f"c_index_best_pm1_mean: {summary.mean:.6f}",
        f"c_index_best_pm1_std: {summary.std:.6f}",
        f"nll_mean: {nll.mean():.6f}",
        f"nll_std: {nll.std():.6f}",
    ]
    return "\n".join(lines) + "\n"


def write_results(summary: CVSummary, cohort: Cohort, cfg: TrainConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.txt", cfg.to_text())
    d_hist, d_st = cohort.dims
    for f in summary.folds:
        fdir = out / f"fold{f.fold_id}"
        fdir.mkdir(exist_ok=True)
        rows = ["epoch\tval_c_index\ttrain_loss\tval_nll\tdiv_H\tdiv_S"]
        for e, (c, l, v, dv) in enumerate(zip(f.val_c_index_curve, f.train_loss_curve,
                                               f.val_nll_curve, f.div_curve)):
            rows.append(f"{e}\t{c:.6f}\t{l:.6f}\t{v:.6f}\t{dv[0]:.6f}\t{dv[1]:.6f}")
        atomic_write(fdir / "curve.tsv", "\n".join(rows) + "\n")
        model = ProtoSurvModel(cfg.model_config(d_hist, d_st), seed=cfg.seed)
        model.load_state(f.best_state)
        ckpt = fdir / "checkpoint"
        model.save(ckpt, {"seed": cfg.seed, "best_epoch": f.best_epoch,
                          "bin_edges": ",".join(repr(e) for e in f.bin_edges)})
        f.checkpoint = str(ckpt)
    atomic_write(out / "metrics.txt", metrics_text(summary))
    from .plotting import plot_cv_curves, plot_loss_curves

    plot_cv_curves(summary, out / "cv_c_index.png")
    plot_loss_curves(summary, out / "cv_loss.png")


def shuffle_labels(cohort: Cohort, seed: int) -> Cohort:
    """Negative control: permute survival labels across patients (slides keep their patient)."""
    from .datamodel import Bag

    labels = cohort.patient_labels()
    pids = list(labels)
    perm = substream(seed, "label_shuffle").permutation(len(pids))
    remap = {p: labels[pids[j]] for p, j in zip(pids, perm)}
    bags = [Bag(b.patient_id, b.slide_id, b.hist, b.st, b.xy, remap[b.patient_id]) for b in cohort.bags]
    return Cohort(bags, cohort.bin_edges, dict(cohort.meta), {})
