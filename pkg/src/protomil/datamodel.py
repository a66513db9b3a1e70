"""Bags, cohorts, the synthetic cohort generator, time binning and cohort files."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .matfile import FormatError, atomic_write, read_kv, read_matrix, write_kv, write_matrix
from .rng import substream


class Instance(NamedTuple):
    hist_embedding: np.ndarray
    st_embedding: np.ndarray
    grid_xy: tuple[int, int]


@dataclass
class SurvivalLabel:
    time: float
    censored: bool
    bin: int | None = None

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValueError(f"survival time must be positive and finite, got {self.time}")


@dataclass(eq=False)
class Bag:
    """One slide: paired per-instance embeddings plus grid coordinates."""

    patient_id: str
    slide_id: str
    hist: np.ndarray  # (N, D_H)
    st: np.ndarray  # (N, D_S)
    xy: np.ndarray  # (N, 2) integer grid coordinates
    label: SurvivalLabel

    def __post_init__(self):
        self.hist = np.asarray(self.hist, dtype=np.float64)
        self.st = np.asarray(self.st, dtype=np.float64)
        self.xy = np.asarray(self.xy, dtype=np.int64).reshape(-1, 2)
        n = len(self.xy)
        if n < 1:
            raise ValueError(f"bag {self.slide_id} has no instances")
        if self.hist.shape[0] != n or self.st.shape[0] != n:
            raise ValueError(f"bag {self.slide_id}: row counts differ "
                             f"(hist {self.hist.shape[0]}, st {self.st.shape[0]}, xy {n})")
        if not (np.isfinite(self.hist).all() and np.isfinite(self.st).all()):
            raise ValueError(f"bag {self.slide_id}: non-finite embedding")
        if len(np.unique(self.xy, axis=0)) != n:
            raise ValueError(f"bag {self.slide_id}: duplicate grid coordinates")

    @property
    def n_instances(self) -> int:
        return len(self.xy)

    @property
    def instances(self) -> list[Instance]:
        return [Instance(self.hist[i], self.st[i], (int(x), int(y)))
                for i, (x, y) in enumerate(self.xy)]

    def grid_order(self) -> np.ndarray:
        """Row-major order over sorted (y, x)."""
        return np.lexsort((self.xy[:, 0], self.xy[:, 1]))

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.slide_id == other.slide_id
                and self.label.time == other.label.time
                and self.label.censored == other.label.censored
                and np.array_equal(self.hist, other.hist)
                and np.array_equal(self.st, other.st)
                and np.array_equal(self.xy, other.xy))


@dataclass(eq=False)
class Cohort:
    bags: list[Bag]
    bin_edges: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)  # generator ground truth, never serialized

    def __post_init__(self):
        seen = set()
        labels: dict[str, tuple[float, bool]] = {}
        for b in self.bags:
            if b.slide_id in seen:
                raise ValueError(f"duplicate slide_id {b.slide_id}")
            seen.add(b.slide_id)
            lab = (b.label.time, b.label.censored)
            if labels.setdefault(b.patient_id, lab) != lab:
                raise ValueError(f"patient {b.patient_id} has conflicting labels")
        edges = tuple(float(e) for e in self.bin_edges)
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"bin edges must be strictly ascending: {edges}")
        self.bin_edges = edges

    def __eq__(self, other):
        return (isinstance(other, Cohort) and self.bin_edges == other.bin_edges
                and len(self.bags) == len(other.bags)
                and all(a == b for a, b in zip(self.bags, other.bags)))

    @property
    def patient_ids(self) -> list[str]:
        return list(dict.fromkeys(b.patient_id for b in self.bags))

    def by_patient(self) -> dict[str, list[Bag]]:
        out: dict[str, list[Bag]] = {}
        for b in self.bags:
            out.setdefault(b.patient_id, []).append(b)
        return out

    def subset(self, patient_ids) -> "Cohort":
        keep = set(patient_ids)
        return Cohort([b for b in self.bags if b.patient_id in keep], self.bin_edges, dict(self.meta))

    def patient_labels(self) -> dict[str, SurvivalLabel]:
        return {pid: bags[0].label for pid, bags in self.by_patient().items()}

    @property
    def dims(self) -> tuple[int, int]:
        return self.bags[0].hist.shape[1], self.bags[0].st.shape[1]


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    n_patients: int = 60
    slides_per_patient: int = 2
    instances_per_slide_range: tuple[int, int] = (120, 180)
    d_hist: int = 1536
    d_st: int = 512
    n_latent_archetypes: int = 4
    risk_weights: tuple[float, ...] = (0.0, 3.0, 3.0, 6.0)
    censor_rate: float = 0.2
    noise_sigma: float = 0.5
    seed: int = 1
    # cross_modal: histology sees archetype // 2, ST sees archetype % 2, so each
    # modality observes only one factor of the joint archetype
    cross_modal: bool = False
    dirichlet_alpha: float = 1.0
    slide_concentration: float = 50.0
    time_scale: float = 36.0

    def __post_init__(self):
        self.instances_per_slide_range = tuple(int(v) for v in self.instances_per_slide_range)
        self.risk_weights = tuple(float(w) for w in self.risk_weights)
        _validate_synth(self)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _validate_synth(cfg: SynthConfig) -> None:
    lo, hi = cfg.instances_per_slide_range
    if cfg.n_patients < 1 or cfg.slides_per_patient < 1:
        raise ValueError("need at least one patient and one slide per patient")
    if lo < 1 or hi < lo:
        raise ValueError(f"empty instances_per_slide_range {cfg.instances_per_slide_range}")
    if cfg.n_latent_archetypes < 2:
        raise ValueError("n_latent_archetypes must be >= 2")
    if len(cfg.risk_weights) != cfg.n_latent_archetypes:
        raise ValueError("risk_weights length must equal n_latent_archetypes")
    if cfg.cross_modal and cfg.n_latent_archetypes % 2:
        raise ValueError("cross_modal generation needs an even number of archetypes")
    if not 0.0 <= cfg.censor_rate < 1.0:
        raise ValueError("censor_rate must be in [0, 1)")
    if cfg.d_hist < 1 or cfg.d_st < 1:
        raise ValueError("embedding dims must be positive")


def generate_synthetic_cohort(cfg: SynthConfig) -> Cohort:
    _validate_synth(cfg)
    rng = substream(cfg.seed, "data")
    A = cfg.n_latent_archetypes
    if cfg.cross_modal:
        hist_group = np.arange(A) // 2
        st_group = np.arange(A) % 2
    else:
        hist_group = st_group = np.arange(A)
    centers_h = rng.normal(size=(hist_group.max() + 1, cfg.d_hist))
    centers_s = rng.normal(size=(st_group.max() + 1, cfg.d_st))
    weights = np.asarray(cfg.risk_weights)

    bags, props, risks, slide_props, slide_arch = [], {}, {}, {}, {}
    lo, hi = cfg.instances_per_slide_range
    width = len(str(cfg.n_patients - 1))
    for p in range(cfg.n_patients):
        pid = f"P{p:0{width}d}"
        prop = rng.dirichlet(np.full(A, cfg.dirichlet_alpha))
        risk = float(prop @ weights)
        t_event = rng.exponential() * cfg.time_scale / math.exp(risk)
        censored = bool(rng.random() < cfg.censor_rate)
        u = rng.uniform(0.05, 1.0)
        t_obs = t_event * u if censored else t_event
        label = SurvivalLabel(float(t_obs), censored)
        props[pid], risks[pid] = prop, risk
        for s in range(cfg.slides_per_patient):
            sid = f"{pid}_S{s}"
            sp = rng.dirichlet(cfg.slide_concentration * prop + 1e-3)
            n = int(rng.integers(lo, hi + 1))
            arch = np.sort(rng.choice(A, size=n, p=sp))
            g = math.ceil(math.sqrt(1.5 * n))
            cells = np.sort(rng.choice(g * g, size=n, replace=False))
            xy = np.stack([cells % g, cells // g], axis=1)
            hist = centers_h[hist_group[arch]] + cfg.noise_sigma * rng.normal(size=(n, cfg.d_hist))
            st = centers_s[st_group[arch]] + cfg.noise_sigma * rng.normal(size=(n, cfg.d_st))
            bags.append(Bag(pid, sid, hist, st, xy, SurvivalLabel(label.time, label.censored)))
            slide_props[sid] = sp
            slide_arch[sid] = arch
    meta = {"seed": cfg.seed, "config_digest": cfg.digest()}
    truth = {"patient_proportions": props, "patient_risk": risks,
             "slide_proportions": slide_props, "instance_archetype": slide_arch}
    return Cohort(bags, (), meta, truth)


# ---------------------------------------------------------------- binning


def fit_bins(times: Sequence[tuple[float, bool]], n_bins: int = 4) -> tuple[float, ...]:
    """Quantile edges of the uncensored times (linear interpolation)."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if n_bins == 1:
        return ()
    events = np.array([t for t, c in times if not c], dtype=np.float64)
    if len(np.unique(events)) < n_bins:
        raise ValueError(f"need at least {n_bins} distinct uncensored times, got {len(np.unique(events))}")
    qs = np.arange(1, n_bins) / n_bins
    edges = tuple(float(e) for e in np.quantile(events, qs, method="linear"))
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"quantile edges collapse on tied times: {edges}")
    return edges


def assign_bin(time: float, edges: Sequence[float]) -> int:
    """Number of edges strictly below ``time``."""
    return int(np.searchsorted(np.asarray(edges, dtype=np.float64), time, side="left"))


def with_bins(cohort: Cohort, edges: Sequence[float]) -> Cohort:
    """Copy of ``cohort`` whose labels carry bins under ``edges``."""
    bags = []
    for b in cohort.bags:
        lab = SurvivalLabel(b.label.time, b.label.censored, assign_bin(b.label.time, edges))
        bags.append(Bag(b.patient_id, b.slide_id, b.hist, b.st, b.xy, lab))
    return Cohort(bags, tuple(edges), dict(cohort.meta), cohort.truth)


# ---------------------------------------------------------------- files

LABEL_HEADER = ["patient_id", "slide_id", "time", "censored"]


def save_cohort(cohort: Cohort, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(LABEL_HEADER)]
    for b in cohort.bags:
        rows.append(f"{b.patient_id}\t{b.slide_id}\t{repr(float(b.label.time))}\t{int(b.label.censored)}")
        write_matrix(d / f"{b.slide_id}.hist.mat", b.hist)
        write_matrix(d / f"{b.slide_id}.st.mat", b.st)
        atomic_write(d / f"{b.slide_id}.xy.tsv", "".join(f"{x}\t{y}\n" for x, y in b.xy))
    atomic_write(d / "labels.tsv", "\n".join(rows) + "\n")
    meta = dict(cohort.meta)
    if cohort.bin_edges:
        meta["bin_edges"] = ",".join(repr(e) for e in cohort.bin_edges)
    write_kv(d / "meta.txt", meta)


def _read_xy(path: Path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(path, lineno, f"expected 'x<TAB>y', got {line.rstrip()!r}")
            try:
                out.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise FormatError(path, lineno, "grid coordinates must be integers") from None
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def load_cohort(dir_path) -> Cohort:
    d = Path(dir_path)
    lab_path = d / "labels.tsv"
    if not lab_path.exists():
        raise FormatError(lab_path, None, "missing labels file")
    with open(lab_path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].split("\t") != LABEL_HEADER:
        raise FormatError(lab_path, 1, f"header must be {'<TAB>'.join(LABEL_HEADER)}")
    bags = []
    seen: dict[str, int] = {}
    patient_label: dict[str, tuple[float, bool, int]] = {}
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(lab_path, lineno, f"expected 4 fields, found {len(parts)}")
        pid, sid, t_s, c_s = parts
        if sid in seen:
            raise FormatError(lab_path, lineno, f"duplicate slide_id {sid!r} (first on line {seen[sid]})")
        seen[sid] = lineno
        try:
            t = float(t_s)
        except ValueError:
            raise FormatError(lab_path, lineno, f"time {t_s!r} is not a number") from None
        if not (t > 0 and math.isfinite(t)):
            raise FormatError(lab_path, lineno, f"time must be positive, got {t_s}")
        if c_s not in ("0", "1"):
            raise FormatError(lab_path, lineno, f"censored must be 0 or 1, got {c_s!r}")
        cen = c_s == "1"
        prev = patient_label.setdefault(pid, (t, cen, lineno))
        if prev[:2] != (t, cen):
            raise FormatError(lab_path, lineno, f"patient {pid!r} label differs from line {prev[2]}")
        files = [d / f"{sid}.hist.mat", d / f"{sid}.st.mat", d / f"{sid}.xy.tsv"]
        for f in files:
            if not f.exists():
                raise FormatError(f, None, f"missing file for slide {sid!r} (labels line {lineno})")
        hist = read_matrix(files[0])
        st = read_matrix(files[1])
        xy = _read_xy(files[2])
        for f, arr in zip(files[1:], (st, xy)):
            if len(arr) != len(hist):
                raise FormatError(f, None, f"{len(arr)} rows but {files[0].name} has {len(hist)}")
        if len(np.unique(xy, axis=0)) != len(xy):
            raise FormatError(files[2], None, "duplicate grid coordinates")
        bags.append(Bag(pid, sid, hist, st, xy, SurvivalLabel(t, cen)))
    for f in sorted(d.glob("*.hist.mat")):
        sid = f.name[: -len(".hist.mat")]
        if sid not in seen:
            raise FormatError(f, None, f"slide {sid!r} is not referenced in labels.tsv")
    meta, edges = {}, ()
    if (d / "meta.txt").exists():
        meta = read_kv(d / "meta.txt")
        if "bin_edges" in meta:
            edges = tuple(float(v) for v in meta.pop("bin_edges").split(","))
        if "seed" in meta:
            meta["seed"] = int(meta["seed"])
    return Cohort(bags, edges, meta)
