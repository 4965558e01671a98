"""Frozen top-down candidate selection: objects first, then the verbs they afford.

All rankings break ties toward the lower index so results do not depend on
sort stability or input order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .semantics import EmbeddingTable


class NominationError(ValueError):
    pass


@dataclass
class ObjectNomination:
    indices: list[int]  # k_o nominated objects followed by the person index
    scores: np.ndarray  # scene similarity of the k_o nominated objects
    person_idx: int

    @property
    def nominated(self) -> list[int]:
        return self.indices[:-1]

    def as_dict(self, table: EmbeddingTable | None = None) -> dict:
        d = {"indices": list(self.indices), "scores": [float(s) for s in self.scores],
             "person_idx": self.person_idx}
        if table is not None:
            d["names"] = [table.names[i] for i in self.indices]
        return d


@dataclass
class ActionNomination:
    indices: list[int]
    scores: np.ndarray
    provenance: list[int]  # object index that nominated each verb

    def as_dict(self, table: EmbeddingTable | None = None) -> dict:
        d = {"indices": list(self.indices), "scores": [float(s) for s in self.scores],
             "provenance": list(self.provenance)}
        if table is not None:
            d["names"] = [table.names[i] for i in self.indices]
        return d


def _rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    # descending score, ascending id
    return np.lexsort((ids, -scores))


def nominate_objects(table: EmbeddingTable, v_c, k_o: int, person_idx: int) -> ObjectNomination:
    n = len(table)
    if k_o < 1 or k_o + 1 > n:
        raise NominationError(f"k_o={k_o} out of range for {n} objects")
    v = np.asarray(v_c, dtype=np.float64).reshape(-1)
    s_os = table.vectors @ v
    ids = np.array([i for i in range(n) if i != person_idx])
    order = ids[_rank(s_os[ids], ids)][:k_o]
    return ObjectNomination([int(i) for i in order] + [int(person_idx)],
                            s_os[order].copy(), int(person_idx))


def related_verbs(over: np.ndarray, obj_indices, k: int) -> np.ndarray:
    """Top-``k`` verbs per object row of the relatedness matrix."""
    over = np.asarray(over)
    m = over.shape[1]
    if not 1 <= k <= m:
        raise NominationError(f"k={k} out of range for {m} verbs")
    verbs = np.arange(m)
    return np.array([_rank(over[o], verbs)[:k] for o in obj_indices], dtype=np.int64)


def action_scene_scores(nom: ObjectNomination, related: np.ndarray,
                        actions: EmbeddingTable, v_c) -> np.ndarray:
    """Verb-scene cosines weighted by exp(object-scene score) of the proposer."""
    related = np.asarray(related)
    if related.ndim != 2 or related.shape[0] != len(nom.scores):
        raise NominationError(
            f"related verbs shaped {related.shape}, expected ({len(nom.scores)}, K)")
    v = np.asarray(v_c, dtype=np.float64).reshape(-1)
    cos = actions.vectors[related] @ v  # K_o x K
    conf = np.repeat(np.exp(nom.scores)[:, None], related.shape[1], axis=1)
    return conf * cos


def nominate_actions(scores, related, k_a: int, obj_indices=None) -> ActionNomination:
    """Top-``k_a`` distinct verbs; a verb proposed twice keeps its best score."""
    scores = np.asarray(scores, dtype=np.float64)
    related = np.asarray(related)
    if scores.shape != related.shape:
        raise NominationError(f"scores {scores.shape} vs related {related.shape}")
    if obj_indices is None:
        obj_indices = list(range(related.shape[0]))
    best: dict[int, tuple[float, int]] = {}
    for p, o in enumerate(obj_indices):
        for q in range(related.shape[1]):
            v, s = int(related[p, q]), float(scores[p, q])
            cur = best.get(v)
            if cur is None or s > cur[0] or (s == cur[0] and o < cur[1]):
                best[v] = (s, int(o))
    if k_a < 1 or k_a > len(best):
        raise NominationError(f"k_a={k_a} but only {len(best)} distinct verbs available")
    verbs = np.array(sorted(best))
    vs = np.array([best[v][0] for v in verbs])
    top = verbs[_rank(vs, verbs)][:k_a]
    return ActionNomination([int(v) for v in top], np.array([best[v][0] for v in top]),
                            [best[v][1] for v in top])


@dataclass
class Nominations:
    objects: ObjectNomination
    actions: ActionNomination
    related: np.ndarray


def nominate(objects: EmbeddingTable, actions: EmbeddingTable, over: np.ndarray, v_c,
             k_o: int, k_a: int, k: int, person_idx: int) -> Nominations:
    """Run the full object-then-verb nomination chain for one scene."""
    onom = nominate_objects(objects, v_c, k_o, person_idx)
    rel = related_verbs(over, onom.nominated, k)
    s_as = action_scene_scores(onom, rel, actions, v_c)
    anom = nominate_actions(s_as, rel, k_a, onom.nominated)
    return Nominations(onom, anom, rel)
