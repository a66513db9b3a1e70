"""Post-hoc analyses: attention exports, annotation concordance, DE and ORA."""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.metrics import cohen_kappa_score

from .datamodel import Bag
from .matfile import FormatError, atomic_write, format_matrix

log = logging.getLogger(__name__)

EXACT_MAX_N = 12
LOG2FC_PSEUDOCOUNT = 1e-9


# ---------------------------------------------------------------- attention export


def export_attention(model, bag: Bag, out_dir) -> dict[str, Path]:
    """Write similarity matrices, selected index sets, fusion weights and spatial plot data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fwd = model.forward(bag, train=False, with_loss=False)
    paths = {}
    for m, rec in fwd.records.items():
        p = out / f"{bag.slide_id}.{m}.sims.mat"
        atomic_write(p, format_matrix(rec.sims))
        paths[f"{m}.sims"] = p
        rows = ["prototype_id\trank\tinstance_idx"]
        for k, sel in enumerate(rec.selected):
            rows += [f"{k}\t{r}\t{int(j)}" for r, j in enumerate(sel)]
        p = out / f"{bag.slide_id}.{m}.selected.tsv"
        atomic_write(p, "\n".join(rows) + "\n")
        paths[f"{m}.selected"] = p
        # spatial map: each instance goes to its most similar prototype
        assign = rec.sims.argmax(axis=0)
        rows = ["x\ty\tprototype_id"] + [f"{x}\t{y}\t{int(a)}" for (x, y), a in zip(bag.xy, assign)]
        p = out / f"{bag.slide_id}.{m}.map.tsv"
        atomic_write(p, "\n".join(rows) + "\n")
        paths[f"{m}.map"] = p
    rows = ["prototype_id\tmodality\talpha"]
    rows += [f"{r}\t{m}\t{float(a)!r}" for (m, r), a in zip(fwd.pool_labels, fwd.alphas)]
    p = out / f"{bag.slide_id}.alphas.tsv"
    atomic_write(p, "\n".join(rows) + "\n")
    paths["alphas"] = p
    return paths


def apply_merge(assignments, merge_map: dict[int, int]) -> np.ndarray:
    """Relabel prototype assignments with an explicit user-supplied merge map."""
    return np.array([merge_map.get(int(a), int(a)) for a in assignments])


# ---------------------------------------------------------------- concordance


@dataclass
class ConcordanceResult:
    cosine: dict  # (prototype, category) -> cosine similarity
    kappa: float  # Cohen's kappa after greedy prototype-category matching
    matching: dict  # prototype -> category
    skipped: list  # categories with all-zero counts


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def greedy_match(pred, truth) -> dict:
    """Pair predicted labels to truth labels by repeatedly taking the largest co-occurrence."""
    ps, ts = sorted(set(pred)), sorted(set(truth))
    table = np.zeros((len(ps), len(ts)), dtype=int)
    for p, t in zip(pred, truth):
        table[ps.index(p), ts.index(t)] += 1
    match = {}
    table = table.astype(float)
    for _ in range(min(len(ps), len(ts))):
        i, j = np.unravel_index(np.argmax(table), table.shape)
        match[ps[i]] = ts[j]
        table[i, :] = -1
        table[:, j] = -1
    return match


def concordance(attn: np.ndarray, counts: np.ndarray, categories) -> ConcordanceResult:
    """attn: K x N prototype scores; counts: N x C annotation pixel counts."""
    attn = np.asarray(attn, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if attn.ndim != 2 or counts.ndim != 2 or attn.shape[1] != counts.shape[0]:
        raise ValueError(f"concordance: shapes {attn.shape} and {counts.shape} do not align")
    if counts.shape[0] < 2:
        raise ValueError("concordance needs at least two instances")
    categories = list(categories)
    keep = [c for c in range(counts.shape[1]) if counts[:, c].any()]
    skipped = [categories[c] for c in range(counts.shape[1]) if c not in keep]
    for name in skipped:
        log.warning("category %s has no annotated pixels; skipped", name)
    cos = {(k, categories[c]): _cos(attn[k], counts[:, c]) for k in range(attn.shape[0]) for c in keep}
    kappa, match = float("nan"), {}
    if keep:
        pred = attn.argmax(axis=0)
        truth = np.array(keep)[counts[:, keep].argmax(axis=1)]
        match = greedy_match(pred.tolist(), truth.tolist())
        mapped = np.array([match.get(int(p), -1) for p in pred])
        kappa = float(cohen_kappa_score(mapped, truth)) if len(set(mapped) | set(truth)) > 1 else 1.0
        match = {k: categories[c] for k, c in match.items()}
    return ConcordanceResult(cos, kappa, match, skipped)


# ---------------------------------------------------------------- statistics


def wilcoxon_rank_sum(a, b, method: str = "auto") -> tuple[float, float]:
    """Two-sided rank-sum test; returns (U of the first group, p).

    ``auto`` enumerates all splits of the pooled ranks when the total size
    is at most 12, otherwise uses the normal approximation with tie and
    continuity corrections. ``exact``/``normal`` force one path.
    """
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both groups must be nonempty")
    ranks = stats.rankdata(np.concatenate([a, b]))
    u = float(ranks[:na].sum() - na * (na + 1) / 2)
    mu = na * nb / 2
    n = na + nb
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        obs = abs(u - mu)
        hits = total = 0
        for idx in itertools.combinations(range(n), na):
            ui = ranks[list(idx)].sum() - na * (na + 1) / 2
            hits += abs(ui - mu) >= obs - 1e-9
            total += 1
        return u, hits / total
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = na * nb / 12 * ((n + 1) - (tie_counts ** 3 - tie_counts).sum() / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return u, float(min(1.0, 2 * stats.norm.sf(z)))


def bh_adjust(pvals) -> np.ndarray:
    p = np.asarray(pvals, dtype=float)
    if p.size == 0:
        return p
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    return np.minimum(stats.false_discovery_control(p, method="bh"), 1.0)


@dataclass
class DEResult:
    genes: list
    log2fc: np.ndarray
    pvals: np.ndarray
    padj: np.ndarray

    @property
    def significant(self) -> np.ndarray:
        return (self.padj < 0.05) & (self.log2fc > 2.0)

    def to_tsv(self) -> str:
        rows = ["gene\tlog2fc\tp\tp_adj\tsignificant"]
        for g, fc, p, q, s in zip(self.genes, self.log2fc, self.pvals, self.padj, self.significant):
            rows.append(f"{g}\t{fc:.6g}\t{p:.6g}\t{q:.6g}\t{int(s)}")
        return "\n".join(rows) + "\n"


def log2_fold_change(mean_in, mean_out, c: float = LOG2FC_PSEUDOCOUNT):
    return np.log2((np.asarray(mean_in) + c) / (np.asarray(mean_out) + c))


def differential_expression(expr: np.ndarray, in_set, genes=None) -> DEResult:
    expr = np.asarray(expr, dtype=float)
    mask = np.asarray(in_set, dtype=bool)
    if expr.ndim != 2 or mask.shape != (expr.shape[0],):
        raise ValueError(f"expression {expr.shape} and mask {mask.shape} do not align")
    if mask.sum() < 2 or (~mask).sum() < 2:
        raise ValueError("both groups need at least two spots")
    genes = list(genes) if genes is not None else [f"g{j}" for j in range(expr.shape[1])]
    if len(genes) != expr.shape[1]:
        raise ValueError(f"{len(genes)} gene names for {expr.shape[1]} columns")
    fc = log2_fold_change(expr[mask].mean(axis=0), expr[~mask].mean(axis=0))
    pv = np.ones(expr.shape[1])
    for j in range(expr.shape[1]):
        col = expr[:, j]
        if np.ptp(col) > 0:  # constant genes keep p = 1
            pv[j] = wilcoxon_rank_sum(col[mask], col[~mask])[1]
    return DEResult(genes, fc, pv, bh_adjust(pv))


@dataclass
class ORAResult:
    term: str
    k: int
    K: int
    n: int
    N: int
    p: float
    padj: float = 1.0

    @property
    def enriched(self) -> bool:
        return self.k > 0 and self.padj < 0.05


def hypergeom_tail(N: int, K: int, n: int, k: int) -> float:
    """P(X >= k) for X ~ Hypergeometric(N, K, n)."""
    if k <= 0:
        return 1.0
    return float(min(1.0, math.exp(stats.hypergeom.logsf(k - 1, N, K, n))))


def ora(query, term_sets: dict, background_size: int) -> list[ORAResult]:
    query = set(query)
    n, N = len(query), background_size
    if n > N:
        raise ValueError("query larger than background")
    out = []
    for term, members in term_sets.items():
        members = set(members)
        if len(members) > N:
            raise ValueError(f"term {term} larger than background")
        k = len(query & members)
        out.append(ORAResult(term, k, len(members), n, N, hypergeom_tail(N, len(members), n, k)))
    for r, q in zip(out, bh_adjust([r.p for r in out])):
        r.padj = float(q)
    return out


def ora_tsv(results: list[ORAResult]) -> str:
    rows = ["term\tk\tK\tn\tN\tp\tp_adj\tenriched"]
    rows += [f"{r.term}\t{r.k}\t{r.K}\t{r.n}\t{r.N}\t{r.p:.6g}\t{r.padj:.6g}\t{int(r.enriched)}" for r in results]
    return "\n".join(rows) + "\n"


def concordance_tsv(res: ConcordanceResult) -> str:
    rows = ["prototype_id\tcategory\tcosine"]
    rows += [f"{k}\t{c}\t{v:.6f}" for (k, c), v in sorted(res.cosine.items(), key=lambda kv: (kv[0][0], kv[0][1]))]
    rows.append(f"# cohen_kappa_greedy_matched\t{res.kappa:.6f}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- loaders


def load_annotations(path, slide_id: str, n_instances: int) -> tuple[np.ndarray, list[str]]:
    """Annotation TSV ``slide_id instance_idx category pixel_count`` -> (N x C counts, categories)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["slide_id", "instance_idx", "category", "pixel_count"]:
        raise FormatError(path, 1, "expected header slide_id\\tinstance_idx\\tcategory\\tpixel_count")
    entries = []
    for i, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(path, i, f"expected 4 fields, got {len(parts)}")
        if parts[0] != slide_id:
            continue
        try:
            idx, cnt = int(parts[1]), float(parts[3])
        except ValueError:
            raise FormatError(path, i, "non-numeric instance_idx or pixel_count") from None
        if not 0 <= idx < n_instances or cnt < 0:
            raise FormatError(path, i, f"instance_idx {idx} or count {cnt} out of range")
        entries.append((idx, parts[2], cnt))
    cats = sorted({c for _, c, _ in entries})
    counts = np.zeros((n_instances, len(cats)))
    for idx, c, cnt in entries:
        counts[idx, cats.index(c)] += cnt
    return counts, cats


def load_gene_list(path) -> list[str]:
    genes = [g.strip() for g in Path(path).read_text(encoding="utf-8").splitlines() if g.strip()]
    if len(set(genes)) != len(genes):
        raise FormatError(path, None, "duplicate gene names")
    return genes


def load_terms(path) -> dict[str, set[str]]:
    path = Path(path)
    terms = {}
    for i, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(path, i, "expected term<TAB>gene1,gene2,...")
        terms[parts[0]] = {g.strip() for g in parts[1].split(",") if g.strip()}
    return terms
