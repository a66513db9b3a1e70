"""The full bag -> hazards network and its ablation switches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .datamodel import Bag
from .diffmath import Tensor
from .fusion import GatedAttention, stack
from .matfile import FormatError, read_kv, read_matrix, write_kv, write_matrix
from .prototypes import AttentionRecord, PrototypeBank, diversity_loss
from .spatial_encoder import SpatialEncoder
from .survival import SurvivalHead, SurvivalOutput, composite_loss, nll_loss

ABLATIONS = frozenset({"no_spatial_blend", "no_prototypes", "mean_pool_fusion", "hist_only", "st_only"})
MODALITIES = ("hist", "st")


@dataclass
class ModelConfig:
    d_hist: int = 1536
    d_st: int = 512
    d: int = 512
    n_heads: int = 4
    d_gate: int = 256
    K_H: int = 12
    K_S: int = 8
    n_bins: int = 4
    blend_alpha: float = 0.1
    blend_normalize_t: bool = True
    k_min: int = 60
    topk_strategy: str = "hardcode"
    topk_proportion: float = 1.0
    logit_scale: float = 1.0
    ema_beta: float = 0.95
    lambda_div: float = 0.2
    diversity_form: str = "supp"
    nll_alpha: float = 0.4
    dropout: float = 0.25
    ablation: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.ablation = frozenset(self.ablation)
        unknown = self.ablation - ABLATIONS
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}")
        if {"hist_only", "st_only"} <= self.ablation:
            raise ValueError("hist_only and st_only are mutually exclusive")

    @property
    def modalities(self) -> tuple[str, ...]:
        if "hist_only" in self.ablation:
            return ("hist",)
        if "st_only" in self.ablation:
            return ("st",)
        return MODALITIES


@dataclass
class BagForward:
    out: SurvivalOutput
    loss: Tensor | None
    nll: Tensor | None
    div: dict
    records: dict  # modality -> AttentionRecord (instance indices in original bag order)
    alphas: np.ndarray
    pool_labels: list  # (modality, row id) per fused row


class ProtoSurvModel:
    def __init__(self, cfg: ModelConfig, seed: int = 1):
        from .rng import substream

        self.cfg = cfg
        rng = substream(seed, "init")
        dims = {"hist": cfg.d_hist, "st": cfg.d_st}
        counts = {"hist": cfg.K_H, "st": cfg.K_S}
        self.encoders = {m: SpatialEncoder(dims[m], cfg.d, n_heads=cfg.n_heads, blend_alpha=cfg.blend_alpha,
                                           dropout=cfg.dropout, blend_normalize_t=cfg.blend_normalize_t,
                                           rng=rng, prefix=f"{m}.enc") for m in MODALITIES}
        self.banks = {m: PrototypeBank(counts[m], cfg.d, ema_beta=cfg.ema_beta, k_min=cfg.k_min,
                                       topk_strategy=cfg.topk_strategy, topk_proportion=cfg.topk_proportion,
                                       logit_scale=cfg.logit_scale, rng=rng, prefix=f"{m}.bank")
                      for m in MODALITIES}
        self.fusion = GatedAttention(cfg.d, cfg.d_gate, dropout=cfg.dropout, rng=rng)
        self.head = SurvivalHead(cfg.d, cfg.n_bins, rng=rng)

    # ------------------------------------------------------------ parameters

    def all_parameters(self) -> list[Tensor]:
        out = []
        for m in MODALITIES:
            out += self.encoders[m].parameters()
            out += self.banks[m].parameters()
        return out + self.fusion.parameters() + self.head.parameters()

    def parameters(self) -> list[Tensor]:
        """Parameters that the active configuration actually uses."""
        cfg = self.cfg
        out = []
        for m in cfg.modalities:
            enc = self.encoders[m]
            if "no_spatial_blend" in cfg.ablation:
                out += [enc.proj_w, enc.proj_b]
            else:
                out += enc.parameters()
            if "no_prototypes" not in cfg.ablation:
                out += self.banks[m].parameters()
        if "mean_pool_fusion" not in cfg.ablation:
            out += self.fusion.parameters()
        return out + self.head.parameters()

    def active_banks(self) -> list[PrototypeBank]:
        if "no_prototypes" in self.cfg.ablation:
            return []
        return [self.banks[m] for m in self.cfg.modalities]

    # ------------------------------------------------------------ forward

    def forward(self, bag: Bag, train: bool = False, rng: dm.DropoutRNG | None = None,
                routes: dict | None = None, with_loss: bool = True) -> BagForward:
        """One bag through the network.

        ``routes`` freezes the top-k index sets: missing entries are filled in,
        present entries are reused (used for gradient checks).
        """
        cfg = self.cfg
        order = bag.grid_order()
        inverse = np.argsort(order)
        feats = {"hist": bag.hist[order], "st": bag.st[order]}
        spatial = "no_spatial_blend" not in cfg.ablation
        pools, records, labels, divs = [], {}, [], {}
        for m in cfg.modalities:
            h = self.encoders[m].encode(feats[m], train, rng, spatial=spatial)
            h = dm.take_rows(h, inverse)  # back to the bag's own instance order
            if "no_prototypes" in cfg.ablation:
                pools.append(h)
                labels += [(m, j) for j in range(h.shape[0])]
                continue
            bank = self.banks[m]
            fixed = None if routes is None else routes.get(m)
            cond, rec = bank.forward_bag(h, train, fixed)
            if routes is not None:
                routes[m] = rec.selected
            pools.append(cond)
            records[m] = rec
            labels += [(m, k) for k in range(bank.k)]
            divs[m] = diversity_loss(bank.P, cfg.diversity_form)
        pool = stack(*pools) if len(pools) == 2 else pools[0]
        mode = "mean_pool" if "mean_pool_fusion" in cfg.ablation else "gated"
        fused = self.fusion.fuse(pool, train, rng, mode)
        out = self.head.predict(fused.h_fused)
        loss = nll = None
        if with_loss:
            if bag.label.bin is None:
                raise ValueError(f"bag {bag.slide_id} has no time bin; fit bin edges first")
            nll = nll_loss([out], [bag.label.bin], [bag.label.censored], cfg.nll_alpha)
            loss = composite_loss(nll, divs.get("hist"), divs.get("st"), cfg.lambda_div)
        return BagForward(out, loss, nll, divs, records, fused.alphas, labels)

    def risk(self, bag: Bag) -> float:
        return self.forward(bag, train=False, with_loss=False).out.risk

    # ------------------------------------------------------------ state

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.all_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.all_parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name}")
            arr = np.asarray(state[p.name])
            if arr.size != p.data.size:
                raise ValueError(f"checkpoint shape mismatch for {p.name}: "
                                 f"{arr.shape} vs model {p.data.shape}")
            p.data[...] = arr.reshape(p.data.shape)

    def save(self, dir_path, extra: dict | None = None) -> None:
        d = Path(dir_path)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for name, arr in self.state().items():
            write_matrix(d / f"{name}.mat", arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1))
            manifest[name] = "x".join(str(s) for s in arr.shape) or "scalar"
        write_kv(d / "manifest.txt", manifest)
        cfg = asdict(self.cfg)
        cfg["ablation"] = ",".join(sorted(self.cfg.ablation))
        write_kv(d / "model.txt", {**cfg, **(extra or {})})
        for m in MODALITIES:
            b = self.banks[m]
            write_kv(d / f"{m}.bank.txt", {"ema_beta": b.ema_beta, "k_min": b.k_min, "K": b.k})

    @classmethod
    def load(cls, dir_path) -> "ProtoSurvModel":
        d = Path(dir_path)
        if not (d / "model.txt").exists():
            raise FormatError(d / "model.txt", None, "not a checkpoint directory")
        raw = read_kv(d / "model.txt")
        cfg = config_from_strings(raw, ModelConfig)
        model = cls(cfg, seed=int(raw.get("seed", 1)))
        shapes = read_kv(d / "manifest.txt")
        state = {}
        for name, shape in shapes.items():
            arr = read_matrix(d / f"{name}.mat")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            state[name] = arr.reshape(dims)
        model.load_state(state)
        return model


def config_from_strings(raw: dict[str, str], cls):
    """Build a dataclass config from string values, coercing by field default type."""
    import dataclasses

    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        v = raw[f.name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            if v.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"{f.name}: expected a boolean, got {v!r}")
            kwargs[f.name] = v.lower() in ("true", "1")
        elif isinstance(default, int):
            kwargs[f.name] = int(v)
        elif isinstance(default, float):
            kwargs[f.name] = float(v)
        elif isinstance(default, (frozenset, set, tuple, list)):
            items = [s.strip() for s in v.replace(";", ",").split(",") if s.strip()]
            kwargs[f.name] = type(default)(items) if not isinstance(default, tuple) else tuple(
                float(s) for s in items)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)
