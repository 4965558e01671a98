"""Asymmetric co-attention between a visual grid and several text candidates.

One visual map (C1 x L) is attended against N candidate embeddings, each
reshaped to C1 x 2. Candidates share the weights and are evaluated as a
batch along a leading axis, so the per-candidate affinities laid side by
side form the L x 2N rectangle. The fused per-candidate maps are averaged
over candidates to give the probed feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PARAM_SHAPES = {
    "W_v": ("C1", "C2"),
    "W_l": ("C1", "C2"),
    "W1": (2, "C2"),
    "W2": ("C1", "C2"),
    "W3": ("C1", "C2"),
    "W4": (2, "C2"),
    "W5": ("C1", "C2"),
    "W6": ("C1", "C2"),
}


def init_coattention(c1: int, c2: int, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    bound = np.sqrt(1.0 / c1)
    dims = {"C1": c1, "C2": c2}
    out = {}
    for name, shape in PARAM_SHAPES.items():
        shp = tuple(dims.get(s, s) for s in shape)
        out[prefix + name] = Tensor(rng.uniform(-bound, bound, size=shp),
                                    requires_grad=True, name=prefix + name)
    return out


def block_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Strip ``prefix`` from the keys of one co-attention block."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def reshape_guide(v, c1: int) -> np.ndarray:
    """Lay a length-2*C1 vector out as C1 x 2: first half is column 0."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != 2 * c1:
        raise ShapeError(f"cannot reshape length {v.size} to {c1} x 2")
    return v.reshape(2, c1).T.copy()


def flatten_guide(g) -> np.ndarray:
    return np.asarray(g).T.reshape(-1)


@dataclass
class ProbeOutput:
    map: Tensor  # C1 x L
    per_candidate_maps: Tensor  # N x C1 x L
    f1: Tensor | None = None  # N x C1 x L, softmax over L
    f2: Tensor | None = None
    affinity: Tensor | None = None  # N x L x 2


def _as_batch(cand) -> Tensor:
    c = cand.data if isinstance(cand, Tensor) else np.asarray(cand, dtype=np.float64)
    if c.ndim == 2:
        c = c[None]
    if c.ndim != 3 or c.shape[2] != 2:
        raise ShapeError(f"candidates must be N x C1 x 2, got {c.shape}")
    return cand if isinstance(cand, Tensor) and cand.ndim == 3 else Tensor(c)


def affinity(v_b, cand, p: dict[str, Tensor]) -> Tensor:
    """Per-candidate affinity (W_v^T V)^T (W_l^T cand): N x L x 2."""
    v_b = nx.as_tensor(v_b)
    cand = _as_batch(cand)
    c1 = p["W_v"].shape[0]
    if v_b.ndim != 2 or v_b.shape[0] != c1 or cand.shape[1] != c1:
        raise ShapeError(f"affinity: v_b {v_b.shape}, candidates {cand.shape}, C1={c1}")
    vis = nx.transpose(p["W_v"]) @ v_b  # C2 x L
    txt = nx.transpose(p["W_l"]) @ cand  # N x C2 x 2
    return nx.transpose(vis) @ txt


def _coattend(v_b: Tensor, v_c2: Tensor, cand: Tensor, p: dict[str, Tensor]):
    n = cand.shape[0]
    c1, L = v_b.shape
    gamma = affinity(v_b, cand, p)  # N x L x 2
    vbt = nx.transpose(v_b)  # L x C1
    s1 = nx.expand(vbt @ v_c2, (n, L, 2))
    p1 = (s1 + gamma) @ p["W1"]
    p2 = (nx.expand(vbt, (n, L, c1)) + gamma @ nx.transpose(v_c2)) @ p["W2"]
    q1 = gamma @ (nx.transpose(cand) @ p["W3"])
    q2 = (gamma @ nx.transpose(nx.transpose(v_c2) @ cand)) @ p["W4"]
    r1 = nx.tanh(p1 + q1)
    r2 = nx.tanh(p2 + q2)
    f1 = nx.softmax_axis(p["W5"] @ nx.transpose(r1), axis=2)  # N x C1 x L
    f2 = nx.softmax_axis(p["W6"] @ nx.transpose(r2), axis=2)
    fused = nx.layer_norm(f1 + f2, axis=1)
    return fused, f1, f2, gamma


def coattend_candidate(v_b, v_c2, cand, p: dict[str, Tensor]) -> Tensor:
    """Fused, layer-normalised attention map (C1 x L) for a single candidate."""
    cand = np.asarray(cand.data if isinstance(cand, Tensor) else cand, dtype=np.float64)
    if cand.ndim != 2:
        raise ShapeError(f"single candidate must be C1 x 2, got {cand.shape}")
    fused, *_ = _coattend(nx.as_tensor(v_b), nx.as_tensor(v_c2), Tensor(cand[None]), p)
    return nx.take(fused, 0)


def probe(v_b, v_c2, candidates, p: dict[str, Tensor]) -> ProbeOutput:
    cand = np.asarray(candidates.data if isinstance(candidates, Tensor) else candidates)
    if cand.size == 0 or cand.ndim != 3 or cand.shape[0] < 1:
        raise ShapeError("probe needs at least one candidate")
    fused, f1, f2, gamma = _coattend(nx.as_tensor(v_b), nx.as_tensor(v_c2),
                                     Tensor(cand), p)
    return ProbeOutput(nx.mean(fused, axis=0, order_free=True), fused, f1, f2, gamma)


def candidate_stack(table, indices, c1: int) -> np.ndarray:
    return np.stack([reshape_guide(table.vectors[i], c1) for i in indices])


def osaca(scene, object_nom, objects, p: dict[str, Tensor]) -> ProbeOutput:
    """Object-probed map: the visual grid attended against nominated objects."""
    c1 = p["W_v"].shape[0]
    v_c2 = reshape_guide(scene.v_c, c1)
    return probe(Tensor(scene.v_b), v_c2, candidate_stack(objects, object_nom.indices, c1), p)


def ovaca(scene, f_o: ProbeOutput | None, action_nom, actions, p: dict[str, Tensor]) -> ProbeOutput:
    """Verb-probed map conditioned on the object-probed map (V_b + F_o)."""
    c1 = p["W_v"].shape[0]
    v_oc = Tensor(scene.v_b) if f_o is None else nx.add(Tensor(scene.v_b), f_o.map)
    v_c2 = reshape_guide(scene.v_c, c1)
    return probe(v_oc, v_c2, candidate_stack(actions, action_nom.indices, c1), p)


def interaction_encoding(f_a, f_e) -> Tensor:
    fa = f_a.map if isinstance(f_a, ProbeOutput) else f_a
    return nx.add(fa, f_e)
