"""``protomil`` command line: gen, train, eval, interpret."""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import SynthConfig, generate_synthetic_cohort, load_cohort, save_cohort, with_bins
from .matfile import FormatError, atomic_write, read_matrix
from .model import ABLATIONS, ProtoSurvModel, config_from_strings
from .rng import resolve_seed

log = logging.getLogger("protomil")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seed: int
    started: str = field(default_factory=lambda: _now())
    finished: str = ""
    artifacts: list = field(default_factory=list)

    def write(self, out_dir) -> None:
        self.finished = _now()
        lines = [f"command: {self.command}", f"config_digest: {self.config_digest}", f"seed: {self.seed}",
                 f"started: {self.started}", f"finished: {self.finished}"]
        lines += [f"artifact: {a}" for a in self.artifacts]
        atomic_write(Path(out_dir) / "manifest.txt", "\n".join(lines) + "\n")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _read_config(path, cls):
    from .trainer import parse_flat

    if path is None:
        return {}, ""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        return parse_flat(text, cls, str(p)), text
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _build(cls, raw: dict, seed: int):
    raw = dict(raw, seed=str(seed))
    try:
        return config_from_strings(raw, cls)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cohort(path):
    if not Path(path).is_dir():
        raise UsageError(f"data directory not found: {path}")
    return load_cohort(path)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    raw, text = _read_config(args.config, SynthConfig)
    seed = resolve_seed(args.seed, raw.get("seed"))
    cfg = _build(SynthConfig, raw, seed)
    out = _prepare_out(args.out, args.force)
    man = RunManifest("gen", _digest(text), seed)
    save_cohort(generate_synthetic_cohort(cfg), out)
    man.artifacts = sorted(p.name for p in out.iterdir() if p.name != "manifest.txt")
    man.write(out)
    print(f"wrote cohort ({cfg.n_patients} patients) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_cv, shuffle_labels

    raw, text = _read_config(args.config, TrainConfig)
    seed = resolve_seed(args.seed, raw.get("seed"))
    if args.ablate:
        flags = {a.strip() for item in args.ablate for a in item.split(",") if a.strip()}
        unknown = flags - ABLATIONS
        if unknown:
            raise UsageError(f"unknown ablation(s) {sorted(unknown)}; choose from {sorted(ABLATIONS)}")
        current = {a for a in raw.get("ablation", "").split(",") if a.strip()}
        raw["ablation"] = ",".join(sorted(current | flags))
    cfg = _build(TrainConfig, raw, seed)
    cohort = _load_cohort(args.data)
    if args.shuffle_labels:
        cohort = shuffle_labels(cohort, seed)
    out = _prepare_out(args.out, args.force)
    man = RunManifest("train", _digest(text), seed)
    summary = run_cv(cohort, cfg, out, jobs=args.jobs)
    man.artifacts = ["metrics.txt", "config.txt", "cv_c_index.png", "cv_loss.png"] + [
        f"fold{f.fold_id}" for f in summary.folds]
    man.write(out)
    sys.stdout.write((out / "metrics.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import patient_risks
    from .survival import c_index

    model = ProtoSurvModel.load(args.checkpoint)
    cohort = _load_cohort(args.data)
    if cohort.dims != (model.cfg.d_hist, model.cfg.d_st):
        raise FormatError(args.checkpoint, None, f"checkpoint expects input dims "
                          f"{(model.cfg.d_hist, model.cfg.d_st)}, cohort has {cohort.dims}")
    risks, times, cens = patient_risks(model, cohort)
    score = c_index(risks, times, cens)
    rows = ["patient_id\trisk\ttime\tcensored"]
    rows += [f"{p}\t{r:.6f}\t{t!r}\t{int(c)}" for p, r, t, c in zip(cohort.by_patient(), risks, times, cens)]
    text = f"c_index: {score:.6f}\nn_patients: {len(risks)}\n"
    if args.out:
        out = _prepare_out(args.out, args.force)
        atomic_write(out / "eval.txt", text)
        atomic_write(out / "risks.tsv", "\n".join(rows) + "\n")
        RunManifest("eval", _digest(text), resolve_seed(args.seed), artifacts=["eval.txt", "risks.tsv"]).write(out)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_interpret(args) -> int:
    from . import interpret as it

    model = ProtoSurvModel.load(args.checkpoint)
    cohort = _load_cohort(args.data)
    bags = {b.slide_id: b for b in cohort.bags}
    if args.slide not in bags:
        known = ", ".join(sorted(bags))
        raise LookupError(f"unknown slide id {args.slide!r}; known ids: {known}")
    bag = bags[args.slide]
    if bag.hist.shape[1] != model.cfg.d_hist or bag.st.shape[1] != model.cfg.d_st:
        raise FormatError(args.checkpoint, None, "checkpoint input dims do not match the cohort")
    out = _prepare_out(args.out, args.force)
    man = RunManifest("interpret", _digest(Path(args.checkpoint, "model.txt").read_text()), resolve_seed(args.seed))
    paths = it.export_attention(model, bag, out)
    man.artifacts += sorted(p.name for p in paths.values())
    fwd = model.forward(bag, train=False, with_loss=False)

    if args.annotations:
        rec = fwd.records.get("hist")
        if rec is None:
            log.warning("no histology prototypes in this model; concordance skipped")
        else:
            counts, cats = it.load_annotations(args.annotations, bag.slide_id, bag.n_instances)
            if not cats:
                log.warning("no annotations for slide %s; concordance skipped", bag.slide_id)
            else:
                sims = rec.sims
                if args.merge:
                    sims = _merged_scores(sims, _parse_merge(args.merge))
                res = it.concordance(sims, counts, cats)
                atomic_write(out / "concordance.tsv", it.concordance_tsv(res))
                man.artifacts.append("concordance.tsv")
    else:
        print("note: no --annotations given; concordance skipped", file=sys.stderr)

    if args.expression and args.genes:
        rec = fwd.records.get("st")
        expr = read_matrix(args.expression)
        genes = it.load_gene_list(args.genes)
        terms = it.load_terms(args.terms) if args.terms else None
        if rec is None:
            log.warning("no ST prototypes in this model; differential expression skipped")
        elif expr.shape != (bag.n_instances, len(genes)):
            raise FormatError(args.expression, None, f"expected {bag.n_instances} x {len(genes)} matrix, "
                              f"got {expr.shape[0]} x {expr.shape[1]}")
        else:
            for k, sel in enumerate(rec.selected):
                mask = np.zeros(bag.n_instances, dtype=bool)
                mask[sel] = True
                if mask.sum() < 2 or (~mask).sum() < 2:
                    log.warning("prototype %d: groups too small for differential expression", k)
                    continue
                de = it.differential_expression(expr, mask, genes)
                atomic_write(out / f"de_proto{k}.tsv", de.to_tsv())
                man.artifacts.append(f"de_proto{k}.tsv")
                if terms is not None:
                    query = {g for g, s in zip(genes, de.significant) if s}
                    res = it.ora(query, {t: m & set(genes) for t, m in terms.items()}, len(genes))
                    atomic_write(out / f"ora_proto{k}.tsv", it.ora_tsv(res))
                    man.artifacts.append(f"ora_proto{k}.tsv")
            if terms is None:
                print("note: no --terms given; enrichment skipped", file=sys.stderr)
    else:
        print("note: --expression/--genes not given; differential expression skipped", file=sys.stderr)
    man.write(out)
    print(f"wrote interpretability bundle for {bag.slide_id} to {out}")
    return EXIT_OK


def _parse_merge(spec: str) -> dict[int, int]:
    try:
        return {int(a): int(b) for a, b in (pair.split(":") for pair in spec.split(",") if pair)}
    except ValueError:
        raise UsageError(f"--merge expects 'src:dst,...', got {spec!r}") from None


def _merged_scores(sims: np.ndarray, merge: dict[int, int]) -> np.ndarray:
    """Max score over each merged group; groups are ordered by their target id."""
    from .interpret import apply_merge

    mapped = apply_merge(range(sims.shape[0]), merge)
    return np.stack([sims[mapped == lab].max(axis=0) for lab in np.unique(mapped)])


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="protomil", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="overrides config and PROTOMIL_SEED")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")

    p = sub.add_parser("gen", help="generate a synthetic cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="patient-level cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--ablate", action="append", metavar="NAME", help=", ".join(sorted(ABLATIONS)))
    p.add_argument("--shuffle-labels", action="store_true", help="negative control: permute patient labels")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a cohort")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpret", help="export attention and run post-hoc analyses for one slide")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--annotations")
    p.add_argument("--expression", help="spots x genes matrix for the slide")
    p.add_argument("--genes", help="gene names, one per line")
    p.add_argument("--terms", help="term<TAB>gene,gene,... file")
    p.add_argument("--merge", help="explicit prototype merge map, e.g. '3:1,4:1'")
    common(p)
    p.set_defaults(func=cmd_interpret)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        ap.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"protomil {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and exit 1
        print(f"protomil {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
