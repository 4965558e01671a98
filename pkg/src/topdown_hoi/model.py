"""The assembled detector: nominators, both co-attention blocks, the
transformer stack and the heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .coattention import ProbeOutput, block_params, init_coattention, osaca, ovaca
from .detr_lite import (ConfigError, Predictions, StackConfig, decode, encode,
                        init_stack_params, predict)
from .nominators import Nominations, nominate
from .numerics import Tensor
from .semantics import EmbeddingTable, hoi_class_embedding, over_matrix
from .taxonomy import Taxonomy

FUSION_MODES = ("full", "osaca", "none")


@dataclass
class ModelConfig:
    stack: StackConfig = field(default_factory=StackConfig)
    k_o: int = 5
    k_a: int = 5
    k: int = 10  # related verbs per nominated object
    fusion: str = "full"  # full: F_a + F_e; osaca: F_o + F_e; none: F_e alone

    def __post_init__(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        for name in ("k_o", "k_a", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class Trace:
    """Intermediate maps of one forward pass, kept for inspection and export."""

    nominations: Nominations
    f_o: ProbeOutput | None = None
    f_a: ProbeOutput | None = None
    f_e: Tensor | None = None
    f_i: Tensor | None = None
    attention: list = field(default_factory=list)


def init_params(cfg: ModelConfig, n_objects: int, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    c1, c2 = cfg.stack.C1, cfg.stack.C2
    params = {}
    params.update(init_coattention(c1, c2, rng, "osaca."))
    params.update(init_coattention(c1, c2, rng, "ovaca."))
    params.update(init_stack_params(cfg.stack, n_objects, rng))
    return params


class HOIModel:
    """Forward pass over single scenes; parameters live in ``self.params``.

    Nominations depend only on the frozen embeddings and the scene, so they
    are cached per scene object.
    """

    def __init__(self, cfg: ModelConfig, taxonomy: Taxonomy, objects: EmbeddingTable,
                 actions: EmbeddingTable, params: dict[str, Tensor]):
        if objects.dim != cfg.stack.d or actions.dim != cfg.stack.d:
            raise ConfigError(f"embedding dim {objects.dim}/{actions.dim} != d={cfg.stack.d}")
        if cfg.k_o + 1 > len(objects):
            raise ConfigError(f"k_o={cfg.k_o} needs at least {cfg.k_o + 1} objects")
        if cfg.k > len(actions):
            raise ConfigError(f"k={cfg.k} exceeds {len(actions)} actions")
        self.cfg = cfg
        self.taxonomy = taxonomy
        self.objects = objects
        self.actions = actions
        self.params = params
        self.over = over_matrix(objects, actions)
        self._class_embed: dict[tuple, Tensor] = {}
        self._noms: dict[int, tuple[object, Nominations]] = {}

    @classmethod
    def create(cls, cfg: ModelConfig, taxonomy, objects, actions, seed: int = 0) -> "HOIModel":
        return cls(cfg, taxonomy, objects, actions, init_params(cfg, taxonomy.n_objects, seed))

    def trainable(self) -> dict[str, Tensor]:
        """Parameters that influence the output under the current fusion mode."""
        drop = {"none": ("osaca.", "ovaca."), "osaca": ("ovaca.",), "full": ()}[self.cfg.fusion]
        return {k: v for k, v in self.params.items() if not k.startswith(drop)}

    def class_embed(self, classes) -> Tensor:
        key = tuple(int(c) for c in classes)
        if key not in self._class_embed:
            self._class_embed[key] = hoi_class_embedding(self.taxonomy, self.objects,
                                                         self.actions, key)
        return self._class_embed[key]

    def nominations(self, scene) -> Nominations:
        hit = self._noms.get(id(scene))
        if hit is not None and hit[0] is scene:
            return hit[1]
        nom = nominate(self.objects, self.actions, self.over, scene.v_c, self.cfg.k_o,
                       self.cfg.k_a, self.cfg.k, self.taxonomy.person_object_idx)
        # holding the scene keeps its id from being recycled
        self._noms[id(scene)] = (scene, nom)
        return nom

    def forward(self, scene, classes, mode: str = "train", trace: bool = False):
        """Predictions for one scene with one logit column per entry of ``classes``."""
        cfg = self.cfg.stack
        p = self.params
        tr = Trace(self.nominations(scene))
        rec = tr.attention if trace else None
        f_e = encode(Tensor(scene.v_b), cfg, p, record=rec)
        if self.cfg.fusion == "none":
            f_i = f_e
        else:
            f_o = osaca(scene, tr.nominations.objects, self.objects, block_params(p, "osaca."))
            tr.f_o = f_o
            if self.cfg.fusion == "osaca":
                f_i = nx.add(f_o.map, f_e)
            else:
                f_a = ovaca(scene, f_o, tr.nominations.actions, self.actions,
                            block_params(p, "ovaca."))
                tr.f_a = f_a
                f_i = nx.add(f_a.map, f_e)
        f_d = decode(f_i, cfg, p, record=rec)
        preds = predict(f_d, self.class_embed(classes), p, mode, expected_width=len(classes))
        if trace:
            tr.f_e, tr.f_i = f_e, f_i
            return preds, tr
        return preds

    def predict_eval(self, scene) -> Predictions:
        return self.forward(scene, range(self.taxonomy.n_classes), mode="eval")
