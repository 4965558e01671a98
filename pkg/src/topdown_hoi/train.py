"""Run configuration, optimisation, evaluation, gradient checking and the
loss-factor ablation grid."""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import (DataConfig, Dataset, Scene, ZsSplit, derive_seed, generate_dataset,
                   pair_targets, rng_for)
from .detr_lite import ConfigError, StackConfig, postprocess, save_checkpoint
from .evaluation import EvalReport, hoi_map
from .losses import LossConfig, combine, ordis_factors, scene_terms
from .matching import CostWeights, hungarian, pair_cost
from .model import HOIModel, ModelConfig
from .numerics import GradCheckReport, NumericError, Tensor

_STACK_KEYS = tuple(f.name for f in fields(StackConfig))


@dataclass
class RunConfig:
    # stack
    C1: int = 32
    C2: int = 8
    d: int = 64
    L: int = 16
    N_q: int = 8
    heads: int = 4
    enc_layers: int = 2
    inst_dec_layers: int = 1
    inter_dec_layers: int = 1
    ffn_dim: int = 64
    # nomination and fusion
    k_o: int = 5
    k_a: int = 5
    k: int = 10
    fusion: str = "full"
    # loss
    kappa: float = 2.0
    eps1: float = 1e-14
    eps2: float = 1e-7
    alpha: float = 0.25
    gamma: float = 2.0
    lambda_b: float = 2.5
    lambda_u: float = 1.0
    lambda_o: float = 1.0
    lambda_c: float = 1.0
    noobj_weight: float = 0.1
    use_beta: bool = True
    use_delta: bool = True
    use_zeta: bool = True
    omega_one: bool = False
    # optimiser
    lr: float = 2e-3
    lr_decay: float = 0.1
    lr_step: int = 25  # epochs between decays
    weight_decay: float = 1e-4
    grad_clip: float = 0.1  # max global norm; 0 disables
    epochs: int = 30
    batch_size: int = 4
    seed: int = 7
    top_n: int = 100
    # synthetic data
    split: str = "NF-UC"
    n_objects: int = 12
    n_actions: int = 10
    n_classes: int = 40
    rare_fraction: float = 0.2
    n_train: int = 200
    n_test: int = 100
    sigma: float = 0.1
    max_interactions: int = 3
    box_cells: list[int] = field(default_factory=lambda: [2, 2])
    unseen_objects: list[int] | None = None
    unseen_verbs: list[int] | None = None

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and isinstance(v, bool):
                raise ConfigError(f"{f.name} must be numeric, got {v!r}")
        for name in ("epochs", "batch_size", "top_n", "lr_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "kappa", "eps1", "eps2"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.gamma < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("gamma, weight_decay and grad_clip must be >= 0")
        self.stack_config()
        self.model_config()
        self.data_config()

    @classmethod
    def toy(cls, **over) -> "RunConfig":
        return cls(**over)

    @classmethod
    def full_scale(cls, **over) -> "RunConfig":
        base = dict(C1=256, C2=64, d=512, L=400, N_q=64, heads=8, enc_layers=6,
                    inst_dec_layers=3, inter_dec_layers=3, ffn_dim=2048, lr=1e-4,
                    lr_step=30, epochs=90, batch_size=8, grad_clip=0.1)
        base.update(over)
        return cls(**base)

    def stack_config(self) -> StackConfig:
        return StackConfig(**{k: getattr(self, k) for k in _STACK_KEYS})

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.stack_config(), self.k_o, self.k_a, self.k, self.fusion)

    def loss_config(self) -> LossConfig:
        return LossConfig(**{f.name: getattr(self, f.name) for f in fields(LossConfig)})

    def cost_weights(self) -> CostWeights:
        return CostWeights(self.lambda_b, self.lambda_u, self.lambda_o, self.lambda_c)

    def data_config(self) -> DataConfig:
        grid = self.stack_config().grid
        return DataConfig(seed=self.seed, n_objects=self.n_objects, n_actions=self.n_actions,
                          n_classes=self.n_classes, rare_fraction=self.rare_fraction, C1=self.C1,
                          grid=grid, n_train=self.n_train, n_test=self.n_test, sigma=self.sigma,
                          max_interactions=self.max_interactions, box_cells=self.box_cells,
                          split=self.split,
                          unseen_objects=self.unseen_objects, unseen_verbs=self.unseen_verbs)

    def to_json(self) -> dict:
        return asdict(self)

    def updated(self, **over) -> "RunConfig":
        unknown = set(over) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        d = asdict(self)
        d.update(over)
        return RunConfig(**d)


def coerce_override(cfg: RunConfig, key: str, raw: str):
    """Parse a ``--set key=value`` string into the type of that field."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    if key not in kinds:
        raise ConfigError(f"unknown config field {key!r}")
    kind = kinds[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str":
            return raw
        return json.loads(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


# --------------------------------------------------------------- optimiser


@dataclass
class AdamW:
    """Adam with decoupled weight decay and a step learning-rate schedule."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m.setdefault(k, np.zeros_like(p.data))
            v = self.v.setdefault(k, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            p.data *= 1 - lr * self.weight_decay
            p.data -= lr * mh / (np.sqrt(vh) + self.eps)


def lr_at(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


# ------------------------------------------------------------ batch losses


@dataclass
class FrozenScene:
    """Discrete and stop-gradient quantities of one scene's forward pass."""

    targets: list
    match: object
    omega: np.ndarray
    tmat: np.ndarray
    factors: object


def freeze_scene(model: HOIModel, scene: Scene, preds, columns: list[int],
                 cfg: RunConfig) -> FrozenScene:
    targets = pair_targets(scene, model.taxonomy)
    col = {c: j for j, c in enumerate(columns)}
    missing = sorted({c for t in targets for c in t.classes} - set(col))
    if missing:
        raise ValueError(f"training scene contains classes without a logit column: {missing}")
    d = preds.detached()
    cost = pair_cost(d["hoi_logits"], d["obj_logits"], d["human_box"], d["object_box"],
                     targets, col, cfg.cost_weights())
    match = hungarian(cost)
    factors, tmat = ordis_factors(d["hoi_logits"], match, targets, model.over, model.taxonomy,
                                  columns, columns, cfg.loss_config())
    return FrozenScene(targets, match, factors.omega, tmat, factors)


def batch_loss(model: HOIModel, scenes: list[Scene], columns: list[int], cfg: RunConfig,
               frozen: list[FrozenScene] | None = None):
    """Total loss of a batch; freezes matches and actuators unless given."""
    lc = cfg.loss_config()
    n_obj = model.taxonomy.n_objects
    terms, out_frozen = [], []
    for i, s in enumerate(scenes):
        preds = model.forward(s, columns)
        fz = frozen[i] if frozen is not None else freeze_scene(model, s, preds, columns, cfg)
        out_frozen.append(fz)
        terms.append(scene_terms(preds, fz.targets, fz.match, n_obj, fz.omega, fz.tmat, lc))
    total, parts = combine(terms, lc)
    return total, parts, out_frozen


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# ----------------------------------------------------------------- training


@dataclass
class RunRecord:
    epochs: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    report: str | None = None
    wall_time: float = 0.0


class TrainingDiverged(NumericError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")
        self.epoch = epoch


def train_scenes(ds: Dataset, split: ZsSplit) -> list[Scene]:
    seen = set(split.seen)
    return [s for s in ds.train if s.classes() <= seen]


def train_model(model: HOIModel, scenes: list[Scene], split: ZsSplit, cfg: RunConfig,
                log: Callable[[dict], None] | None = None) -> RunRecord:
    if not scenes:
        raise ValueError("no training scene is compatible with the split")
    rec = RunRecord()
    start = time.perf_counter()
    columns = list(split.seen)
    params = model.trainable()
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "epoch", epoch).permutation(len(scenes))
        lr = lr_at(cfg, epoch)
        sums: dict[str, float] = {}
        n_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[b:b + cfg.batch_size]]
            for p in params.values():
                p.grad = None
            try:
                with nx.Graph() as g:
                    total, parts, _ = batch_loss(model, batch, columns, cfg)
                g.backward(total)
            except NumericError as e:
                raise TrainingDiverged(epoch, str(e)) from None
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            parts["grad_norm"] = _clip(grads, cfg.grad_clip)
            opt.step(grads, lr)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        row = {"event": "epoch", "epoch": epoch, "lr": lr}
        row.update({k: v / n_batches for k, v in sums.items()})
        if not all(math.isfinite(v) for v in row.values() if isinstance(v, float)):
            raise TrainingDiverged(epoch, json.dumps(row))
        rec.epochs.append(row)
        if log is not None:
            log(row)
    rec.wall_time = time.perf_counter() - start
    return rec


def evaluate(model: HOIModel, scenes: list[Scene], split: ZsSplit, top_n: int = 100) -> EvalReport:
    dets = [postprocess(model.predict_eval(s), model.taxonomy, top_n) for s in scenes]
    return hoi_map(dets, [s.gts for s in scenes], model.taxonomy.n_classes, split.unseen)


def build_model(ds: Dataset, cfg: RunConfig) -> HOIModel:
    if ds.config.C1 != cfg.C1 or ds.config.L != cfg.L:
        raise ConfigError(f"dataset has C1={ds.config.C1}, L={ds.config.L}; "
                          f"config expects C1={cfg.C1}, L={cfg.L}")
    return HOIModel.create(cfg.model_config(), ds.taxonomy, ds.objects, ds.actions,
                           derive_seed(cfg.seed, "params"))


def run_training(ds: Dataset, split: ZsSplit, cfg: RunConfig, ckpt_path=None,
                 log=None) -> tuple[HOIModel, RunRecord]:
    model = build_model(ds, cfg)
    rec = train_model(model, train_scenes(ds, split), split, cfg, log)
    if ckpt_path is not None:
        save_checkpoint(model.params, ckpt_path)
        rec.checkpoint = str(ckpt_path)
    return model, rec


# ---------------------------------------------------------- gradient check


def gradcheck(cfg: RunConfig, n_scenes: int = 2, max_coords: int = 8, directions: int = 4,
              h: float = 1e-5, rel_tol: float = 1e-4) -> GradCheckReport:
    """Tape gradients of the full batch loss against central differences.

    Matches and actuator weights come from the unperturbed pass and stay
    fixed, as they do during training.
    """
    dcfg = cfg.data_config()
    dcfg.n_train, dcfg.n_test = n_scenes, 1
    ds = generate_dataset(dcfg)
    model = build_model(ds, cfg)
    scenes = ds.train[:n_scenes]
    columns = list(ds.split.seen)
    _, _, frozen = batch_loss(model, scenes, columns, cfg)

    def objective() -> Tensor:
        return batch_loss(model, scenes, columns, cfg, frozen)[0]

    return nx.finite_diff_check(objective, model.trainable(), h=h, rel_tol=rel_tol,
                                max_coords=max_coords, directions=directions,
                                seed=derive_seed(cfg.seed, "gradcheck") % (1 << 32))


# ----------------------------------------------------------------- ablation

ABLATION_COLUMNS = ("beta", "delta", "zeta", "omega_one", "unseen", "seen", "full")


def ablation_grid() -> list[dict]:
    """Every non-empty subset of the three factors, then the plain focal baseline."""
    rows = []
    for r in (1, 2, 3):
        for combo in itertools.combinations(("beta", "delta", "zeta"), r):
            rows.append({"use_beta": "beta" in combo, "use_delta": "delta" in combo,
                         "use_zeta": "zeta" in combo, "omega_one": False})
    rows.append({"use_beta": False, "use_delta": False, "use_zeta": False, "omega_one": True})
    return rows


def run_ablation(ds: Dataset, split: ZsSplit, cfg: RunConfig, log=None) -> list[dict]:
    out = []
    for flags in ablation_grid():
        model, _ = run_training(ds, split, cfg.updated(**flags), log=None)
        rep = evaluate(model, ds.test, split, cfg.top_n)
        row = {"beta": int(flags["use_beta"]), "delta": int(flags["use_delta"]),
               "zeta": int(flags["use_zeta"]), "omega_one": int(flags["omega_one"]),
               "unseen": rep.map_unseen, "seen": rep.map_seen, "full": rep.map_full}
        out.append(row)
        if log is not None:
            log({"event": "ablation_row", **row})
    return out


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]))
                        for k in ABLATION_COLUMNS})


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
