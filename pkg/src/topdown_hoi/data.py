"""Procedural HOI scenes, zero-shot splits and the on-disk dataset layout.

Generation is driven by integer seeds mixed through splitmix64, so every
scene can be regenerated independently of how many came before it. All
stored values are float32-representable, which keeps file round trips
bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .matching import PairTarget
from .semantics import EmbeddingTable, load_table, save_table
from .taxonomy import Taxonomy

FHDS_MAGIC = b"FHDS"
SETTINGS = ("UC", "RF-UC", "NF-UC", "UO", "UA", "UV")
_MASK = (1 << 64) - 1


class DataError(ValueError):
    pass


class SplitError(ValueError):
    pass


# ------------------------------------------------------------------ seeding


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags) -> int:
    """Mix a base seed with string/int tags into a 64-bit stream seed."""
    s = splitmix64(int(seed) & _MASK)
    for t in tags:
        v = zlib.crc32(t.encode()) if isinstance(t, str) else int(t)
        s = splitmix64(s ^ (v & _MASK))
    return s


def rng_for(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ----------------------------------------------------------------- taxonomy


def gen_taxonomy(seed: int, n_objects: int = 12, n_actions: int = 10, n_classes: int = 40,
                 rare_fraction: float = 0.2, dim: int = 64, power: float = 1.0,
                 max_frequency: int = 200) -> tuple[Taxonomy, EmbeddingTable, EmbeddingTable]:
    """Random taxonomy in which every object and every action joins some class.

    Action vectors lean halfway toward the mean of the objects they pair
    with, so object-verb relatedness carries real structure.
    """
    if n_objects < 2 or n_actions < 1:
        raise DataError("need at least 2 objects (one is person) and 1 action")
    if not max(n_objects, n_actions) <= n_classes <= n_objects * n_actions:
        raise DataError(f"n_classes={n_classes} infeasible for {n_objects} objects "
                        f"x {n_actions} actions (needs {max(n_objects, n_actions)}.."
                        f"{n_objects * n_actions})")
    if dim % 2:
        raise DataError(f"embedding dim must be even, got {dim}")
    rng = rng_for(seed, "taxonomy")
    o_perm = rng.permutation(n_objects)
    a_perm = rng.permutation(n_actions)
    pairs: list[tuple[int, int]] = []
    for i in range(max(n_objects, n_actions)):
        p = (int(a_perm[i % n_actions]), int(o_perm[i % n_objects]))
        if p not in pairs:
            pairs.append(p)
    rest = [(a, o) for a in range(n_actions) for o in range(n_objects) if (a, o) not in pairs]
    pick = rng.choice(len(rest), size=n_classes - len(pairs), replace=False)
    pairs += [rest[i] for i in sorted(pick)]
    pairs.sort(key=lambda p: (p[1], p[0]))

    ranks = rng.permutation(n_classes) + 1
    freq = np.maximum(1, np.round(max_frequency * ranks.astype(float) ** -power)).astype(int)
    n_rare = int(round(rare_fraction * n_classes))
    rare_ids = set(np.lexsort((np.arange(n_classes), freq))[:n_rare].tolist())

    objects = ["person"] + [f"object{i:02d}" for i in range(1, n_objects)]
    actions = [f"action{j:02d}" for j in range(n_actions)]
    tax = Taxonomy(objects, actions, pairs, [c in rare_ids for c in range(n_classes)],
                   person_object_idx=0, frequency=[int(f) for f in freq])

    obj_vec = _unit_rows(rng, n_objects, dim)
    noise = _unit_rows(rng, n_actions, dim)
    act_vec = np.empty((n_actions, dim))
    for j in range(n_actions):
        paired = [o for a, o in pairs if a == j]
        m = obj_vec[paired].mean(axis=0)
        v = 0.5 * m + 0.5 * noise[j]
        act_vec[j] = v / np.linalg.norm(v)
    return tax, EmbeddingTable(objects, obj_vec), EmbeddingTable(actions, act_vec)


# ------------------------------------------------------------------- splits


@dataclass
class ZsSplit:
    setting: str
    seen: list[int]
    unseen: list[int]
    unseen_objects: list[int] = field(default_factory=list)
    unseen_verbs: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.seen = sorted(int(c) for c in self.seen)
        self.unseen = sorted(int(c) for c in self.unseen)
        if set(self.seen) & set(self.unseen):
            raise SplitError("seen and unseen overlap")
        if not self.seen:
            raise SplitError(f"{self.setting} split leaves no seen class")

    @property
    def n_classes(self) -> int:
        return len(self.seen) + len(self.unseen)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ZsSplit":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "ZsSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def _scaled(ref_count: int, ref_total: int, total: int) -> int:
    return max(1, int(round(ref_count * total / ref_total)))


def zs_split(tax: Taxonomy, setting: str, seed: int = 0, unseen_objects=None,
             unseen_verbs=None, n_unseen: int | None = None) -> ZsSplit:
    """Seen/unseen partition of the HOI classes for one zero-shot setting.

    Class-level settings hide round(0.2 * C) classes. Object and verb
    settings hide every class touching the listed (or randomly drawn)
    objects or verbs.
    """
    if setting not in SETTINGS:
        raise SplitError(f"unknown setting {setting!r}; expected one of {', '.join(SETTINGS)}")
    C = tax.n_classes
    ids = np.arange(C)
    rng = rng_for(seed, "split", setting)
    u = int(round(0.2 * C)) if n_unseen is None else int(n_unseen)
    if setting in ("UC", "RF-UC", "NF-UC") and not 0 < u < C:
        raise SplitError(f"cannot hide {u} of {C} classes")
    uo: list[int] = []
    uv: list[int] = []
    if setting == "UC":
        unseen = rng.choice(C, size=u, replace=False).tolist()
    elif setting in ("RF-UC", "NF-UC"):
        rare = np.array(tax.rare, dtype=int)
        freq = np.array(tax.frequency if tax.frequency is not None else [0] * C)
        if setting == "RF-UC":
            order = np.lexsort((ids, freq, 1 - rare))
        else:
            order = np.lexsort((ids, -freq, rare))
        unseen = order[:u].tolist()
    elif setting == "UO":
        if unseen_objects is None:
            pool = [o for o in range(tax.n_objects) if o != tax.person_object_idx]
            k = min(len(pool) - 1, _scaled(12, 80, tax.n_objects))
            unseen_objects = sorted(rng.choice(pool, size=k, replace=False).tolist())
        uo = sorted(int(o) for o in unseen_objects)
        if tax.person_object_idx in uo:
            raise SplitError("the person object cannot be unseen")
        bad = [o for o in uo if not 0 <= o < tax.n_objects]
        if bad:
            raise SplitError(f"unseen objects out of range: {bad}")
        unseen = [c for c in range(C) if tax.object_of(c) in set(uo)]
    else:
        if unseen_verbs is None:
            ref = 22 if setting == "UA" else 20
            k = min(tax.n_actions - 1, _scaled(ref, 117, tax.n_actions))
            unseen_verbs = sorted(rng.choice(tax.n_actions, size=k, replace=False).tolist())
        uv = sorted(int(v) for v in unseen_verbs)
        bad = [v for v in uv if not 0 <= v < tax.n_actions]
        if bad:
            raise SplitError(f"unseen verbs out of range: {bad}")
        unseen = [c for c in range(C) if tax.action_of(c) in set(uv)]
    seen = sorted(set(range(C)) - set(unseen))
    return ZsSplit(setting, seen, unseen, uo, uv)


# ------------------------------------------------------------------- scenes


@dataclass
class GroundTruth:
    human_box: np.ndarray  # cx, cy, w, h
    object_box: np.ndarray
    hoi_class: int


@dataclass
class Scene:
    v_b: np.ndarray  # C1 x L
    v_c: np.ndarray  # d
    gts: list[GroundTruth]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene) or len(self.gts) != len(other.gts):
            return False
        return (np.array_equal(self.v_b, other.v_b) and np.array_equal(self.v_c, other.v_c)
                and all(a.hoi_class == b.hoi_class and np.array_equal(a.human_box, b.human_box)
                        and np.array_equal(a.object_box, b.object_box)
                        for a, b in zip(self.gts, other.gts)))

    def classes(self) -> set[int]:
        return {g.hoi_class for g in self.gts}


def pair_targets(scene: Scene, tax: Taxonomy) -> list[PairTarget]:
    """Group ground truths that share both boxes and the object into one target."""
    out: list[PairTarget] = []
    index: dict[tuple, int] = {}
    for g in scene.gts:
        o = tax.object_of(g.hoi_class)
        key = (tuple(g.human_box.tolist()), tuple(g.object_box.tolist()), o)
        if key in index:
            t = out[index[key]]
            if g.hoi_class not in t.classes:
                t.classes.append(g.hoi_class)
        else:
            index[key] = len(out)
            out.append(PairTarget(np.asarray(g.human_box, dtype=np.float64),
                                  np.asarray(g.object_box, dtype=np.float64), o, [g.hoi_class]))
    return out


def projection(seed: int, c1: int, d: int) -> np.ndarray:
    """Fixed d -> C1 map used to plant embeddings into grid tokens."""
    return rng_for(seed, "projection").standard_normal((c1, d)) * np.sqrt(2.0 / d) * 2.0


def _grid_box(rng: np.random.Generator, gh: int, gw: int, cells: tuple[int, int]) -> np.ndarray:
    lo, hi = cells
    h = int(rng.integers(min(lo, gh), min(hi, gh) + 1))
    w = int(rng.integers(min(lo, gw), min(hi, gw) + 1))
    r0 = int(rng.integers(0, gh - h + 1))
    c0 = int(rng.integers(0, gw - w + 1))
    return np.array([(c0 + w / 2) / gw, (r0 + h / 2) / gh, w / gw, h / gh])


def gen_scene(tax: Taxonomy, objects: EmbeddingTable, actions: EmbeddingTable, classes,
              seed: int, sigma: float = 0.1, c1: int = 32, grid: tuple[int, int] = (4, 4),
              proj: np.ndarray | None = None, max_interactions: int = 3,
              weights=None, action_gain: float = 0.5, reuse_prob: float = 0.7,
              box_cells: tuple[int, int] = (2, 2)) -> Scene:
    """One synthetic scene whose interactions are drawn from ``classes``.

    Object-box tokens carry the projected object embedding; human-box
    tokens carry the projected person embedding plus a share of the verb
    embedding, so both halves of a class are visible in the grid.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise DataError("scene needs at least one admissible class")
    gh, gw = grid
    d = objects.dim
    if proj is None:
        proj = projection(0, c1, d)
    rng = np.random.Generator(np.random.PCG64(seed))
    p = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        p = w / w.sum()
    n_int = int(rng.integers(1, max_interactions + 1))
    gts: list[GroundTruth] = []
    while len(gts) < n_int:
        if gts and rng.random() < reuse_prob:
            base = gts[int(rng.integers(len(gts)))]
            o = tax.object_of(base.hoi_class)
            used = {g.hoi_class for g in gts if np.array_equal(g.object_box, base.object_box)}
            alt = [c for c in classes if tax.object_of(c) == o and c not in used]
            if alt:
                c = alt[int(rng.integers(len(alt)))]
                gts.append(GroundTruth(base.human_box.copy(), base.object_box.copy(), c))
                continue
        c = int(rng.choice(classes, p=p))
        hb = _grid_box(rng, gh, gw, box_cells)
        ob = _near_box(rng, hb, gh, gw, box_cells)
        gts.append(GroundTruth(hb, ob, c))

    L = gh * gw
    v_b = sigma * rng.standard_normal((c1, L))
    planted_o: set[tuple] = set()
    person = objects.vectors[tax.person_object_idx]
    planted_h: set[tuple] = set()
    for g in gts:
        a, o = tax.hoi_classes[g.hoi_class][0], tax.object_of(g.hoi_class)
        okey = (tuple(g.object_box), o)
        if okey not in planted_o:
            planted_o.add(okey)
            for t in _cells(g.object_box, gh, gw):
                v_b[:, t] += proj @ objects.vectors[o]
        hkey = tuple(g.human_box)
        if hkey not in planted_h:
            planted_h.add(hkey)
            for t in _cells(g.human_box, gh, gw):
                v_b[:, t] += proj @ person
        for t in _cells(g.human_box, gh, gw):
            v_b[:, t] += action_gain * (proj @ actions.vectors[a])

    objs = sorted({tax.object_of(g.hoi_class) for g in gts})
    acts = sorted({tax.action_of(g.hoi_class) for g in gts})
    v_c = objects.vectors[objs].sum(axis=0) + actions.vectors[acts].sum(axis=0)
    v_c = v_c + sigma * rng.standard_normal(d)
    v_c = v_c / np.linalg.norm(v_c)
    return Scene(v_b.astype(np.float32).astype(np.float64),
                 v_c.astype(np.float32).astype(np.float64),
                 [GroundTruth(g.human_box.astype(np.float32).astype(np.float64),
                              g.object_box.astype(np.float32).astype(np.float64), g.hoi_class)
                  for g in gts])


def _near_box(rng: np.random.Generator, anchor: np.ndarray, gh: int, gw: int,
              cells: tuple[int, int]) -> np.ndarray:
    """A box whose top-left corner lies within one cell of ``anchor``'s."""
    lo, hi = cells
    h = int(rng.integers(min(lo, gh), min(hi, gh) + 1))
    w = int(rng.integers(min(lo, gw), min(hi, gw) + 1))
    ar = int(round((anchor[1] - anchor[3] / 2) * gh))
    ac = int(round((anchor[0] - anchor[2] / 2) * gw))
    r0 = int(np.clip(ar + rng.integers(-1, 2), 0, gh - h))
    c0 = int(np.clip(ac + rng.integers(-1, 2), 0, gw - w))
    return np.array([(c0 + w / 2) / gw, (r0 + h / 2) / gh, w / gw, h / gh])


def _cells(box, gh: int, gw: int) -> list[int]:
    cx, cy, w, h = box
    c0 = int(round((cx - w / 2) * gw))
    c1 = int(round((cx + w / 2) * gw))
    r0 = int(round((cy - h / 2) * gh))
    r1 = int(round((cy + h / 2) * gh))
    return [r * gw + c for r in range(r0, r1) for c in range(c0, c1)]


# ----------------------------------------------------------------- FHDS io


def save_scenes(scenes: list[Scene], path) -> None:
    buf = bytearray(FHDS_MAGIC)
    buf += struct.pack("<I", len(scenes))
    for s in scenes:
        buf += np.ascontiguousarray(s.v_b, dtype="<f4").tobytes()
        buf += np.ascontiguousarray(s.v_c, dtype="<f4").tobytes()
        buf += struct.pack("<H", len(s.gts))
        for g in s.gts:
            buf += np.concatenate([g.human_box, g.object_box]).astype("<f4").tobytes()
            buf += struct.pack("<H", g.hoi_class)
    Path(path).write_bytes(bytes(buf))


def load_scenes(path, c1: int, L: int, d: int) -> list[Scene]:
    """Read an FHDS file; grid and embedding sizes are not stored in it."""
    blob = Path(path).read_bytes()
    if blob[:4] != FHDS_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    try:
        (n,) = struct.unpack_from("<I", blob, 4)
        pos = 8
        out = []
        for _ in range(n):
            need = 4 * (c1 * L + d) + 2
            if pos + need > len(blob):
                raise DataError(f"{path}: truncated scene data")
            v_b = np.frombuffer(blob, "<f4", c1 * L, pos).reshape(c1, L).astype(np.float64)
            pos += 4 * c1 * L
            v_c = np.frombuffer(blob, "<f4", d, pos).astype(np.float64)
            pos += 4 * d
            (g,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            gts = []
            for _ in range(g):
                if pos + 34 > len(blob):
                    raise DataError(f"{path}: truncated ground truth")
                b = np.frombuffer(blob, "<f4", 8, pos).astype(np.float64)
                (c,) = struct.unpack_from("<H", blob, pos + 32)
                pos += 34
                gts.append(GroundTruth(b[:4].copy(), b[4:].copy(), int(c)))
            out.append(Scene(v_b, v_c, gts))
    except struct.error:
        raise DataError(f"{path}: truncated") from None
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return out


# --------------------------------------------------------- dataset directory


@dataclass
class DataConfig:
    seed: int = 7
    n_objects: int = 12
    n_actions: int = 10
    n_classes: int = 40
    rare_fraction: float = 0.2
    C1: int = 32
    grid: tuple[int, int] = (4, 4)
    n_train: int = 200
    n_test: int = 100
    sigma: float = 0.1
    max_interactions: int = 3
    box_cells: tuple[int, int] = (2, 2)  # min and max box side, in grid cells
    split: str = "NF-UC"
    unseen_objects: list[int] | None = None
    unseen_verbs: list[int] | None = None

    def __post_init__(self) -> None:
        self.grid = tuple(int(g) for g in self.grid)
        self.box_cells = tuple(int(c) for c in self.box_cells)
        if len(self.box_cells) != 2 or not 1 <= self.box_cells[0] <= self.box_cells[1]:
            raise DataError(f"box_cells must be (min, max) with 1 <= min <= max, got {self.box_cells}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise DataError(f"grid must be two positive extents, got {self.grid}")
        if self.split not in SETTINGS:
            raise DataError(f"split must be one of {SETTINGS}, got {self.split!r}")
        if self.sigma < 0:
            raise DataError("sigma must be non-negative")
        if self.n_train < 1 or self.n_test < 1:
            raise DataError("n_train and n_test must be positive")

    @property
    def d(self) -> int:
        return 2 * self.C1

    @property
    def L(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class Dataset:
    config: DataConfig
    taxonomy: Taxonomy
    objects: EmbeddingTable
    actions: EmbeddingTable
    split: ZsSplit
    train: list[Scene]
    test: list[Scene]


def generate_dataset(cfg: DataConfig) -> Dataset:
    tax, objects, actions = gen_taxonomy(cfg.seed, cfg.n_objects, cfg.n_actions, cfg.n_classes,
                                         cfg.rare_fraction, cfg.d)
    split = zs_split(tax, cfg.split, cfg.seed, cfg.unseen_objects, cfg.unseen_verbs)
    proj = projection(cfg.seed, cfg.C1, cfg.d)
    freq = np.array(tax.frequency, dtype=np.float64)
    kw = dict(sigma=cfg.sigma, c1=cfg.C1, grid=cfg.grid, proj=proj,
              max_interactions=cfg.max_interactions, box_cells=cfg.box_cells)
    train = [gen_scene(tax, objects, actions, split.seen, derive_seed(cfg.seed, "train", i),
                       weights=freq[split.seen], **kw) for i in range(cfg.n_train)]
    every = list(range(tax.n_classes))
    test = [gen_scene(tax, objects, actions, every, derive_seed(cfg.seed, "test", i), **kw)
            for i in range(cfg.n_test)]
    return Dataset(cfg, tax, objects, actions, split, train, test)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.taxonomy.save(out / "taxonomy.json")
    save_table(ds.objects, out / "objects.fheb")
    save_table(ds.actions, out / "actions.fheb")
    save_scenes(ds.train, out / "scenes.fhds")
    save_scenes(ds.test, out / "test_scenes.fhds")
    ds.split.save(out / "split.json")
    meta = asdict(ds.config)
    meta["grid"] = list(ds.config.grid)
    meta["box_cells"] = list(ds.config.box_cells)
    (out / "dataset.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a dataset directory")
    try:
        cfg = DataConfig(**json.loads((root / "dataset.json").read_text()))
        tax = Taxonomy.load(root / "taxonomy.json")
        objects = load_table(root / "objects.fheb")
        actions = load_table(root / "actions.fheb")
        split = ZsSplit.load(root / "split.json")
    except FileNotFoundError as e:
        raise DataError(f"dataset file missing: {e.filename}") from None
    train = load_scenes(root / "scenes.fhds", cfg.C1, cfg.L, cfg.d)
    test = load_scenes(root / "test_scenes.fhds", cfg.C1, cfg.L, cfg.d)
    return Dataset(cfg, tax, objects, actions, split, train, test)
