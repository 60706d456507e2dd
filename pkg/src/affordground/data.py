"""Procedural part-labeled shapes, probabilistic affordance masks, templated
instructions, evaluation splits and instruction corruption."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .backbone import PointCloud
from .text import InstructionRecord, split_words

MASK_SIGMA = 0.05
MASK_FLOOR = 0.01
MIN_CROP_FRACTION = 0.3


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Part:
    name: str
    kind: str                      # box | cylinder | sphere | disk
    center: tuple[float, float, float]
    size: tuple[float, ...]        # box: (sx, sy, sz); cylinder: (r, h); sphere: (r,); disk: (r,)
    axis: int = 1                  # cylinder/disk axis (0=x, 1=y, 2=z)


@dataclass(frozen=True)
class ShapeSpec:
    object_class: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        if len(self.parts) < 2:
            raise ValueError(f"{self.object_class}: a shape needs at least two parts")
        names = [p.name for p in self.parts]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.object_class}: duplicate part names {names}")

    @property
    def part_names(self) -> list[str]:
        return [p.name for p in self.parts]


def surface_area(part: Part) -> float:
    if part.kind == "box":
        sx, sy, sz = part.size
        return 2 * (sx * sy + sy * sz + sx * sz)
    if part.kind == "cylinder":
        r, h = part.size
        return 2 * np.pi * r * h + 2 * np.pi * r * r
    if part.kind == "sphere":
        return 4 * np.pi * part.size[0] ** 2
    if part.kind == "disk":
        return np.pi * part.size[0] ** 2
    raise ValueError(f"unknown primitive {part.kind!r}")


def _axis_frame(points: np.ndarray, axis: int) -> np.ndarray:
    """Map local (u, v, w) with w along ``axis`` to xyz."""
    order = {0: (2, 0, 1), 1: (0, 2, 1), 2: (0, 1, 2)}[axis]
    out = np.empty_like(points)
    for dst, src in zip(order, range(3)):
        out[:, dst] = points[:, src]
    return out


def _disk_points(rng, n, r):
    rad = r * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    return rad * np.cos(th), rad * np.sin(th)


def sample_surface(part: Part, n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros((0, 3))
    if part.kind == "box":
        s = np.asarray(part.size, dtype=np.float64)
        faces = np.array([s[0] * s[1], s[1] * s[2], s[0] * s[2]] * 2)
        face = rng.choice(6, size=n, p=faces / faces.sum())
        pts = (rng.random((n, 3)) - 0.5) * s
        fixed_axis = np.array([2, 0, 1, 2, 0, 1])[face]
        sign = np.where(face < 3, 0.5, -0.5)
        pts[np.arange(n), fixed_axis] = sign * s[fixed_axis]
    elif part.kind == "cylinder":
        r, h = part.size
        side, cap = 2 * np.pi * r * h, np.pi * r * r
        which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        pts = np.empty((n, 3))
        th = 2 * np.pi * rng.random(n)
        pts[:, 0], pts[:, 1] = r * np.cos(th), r * np.sin(th)
        pts[:, 2] = (rng.random(n) - 0.5) * h
        for cap_id, z in ((1, 0.5 * h), (2, -0.5 * h)):
            sel = which == cap_id
            pts[sel, 0], pts[sel, 1] = _disk_points(rng, int(sel.sum()), r)
            pts[sel, 2] = z
        pts = _axis_frame(pts, part.axis)
    elif part.kind == "sphere":
        v = rng.normal(size=(n, 3))
        pts = part.size[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif part.kind == "disk":
        pts = np.zeros((n, 3))
        pts[:, 0], pts[:, 1] = _disk_points(rng, n, part.size[0])
        pts = _axis_frame(pts, part.axis)
    else:
        raise ValueError(f"unknown primitive {part.kind!r}")
    return pts + np.asarray(part.center)


def generate_shape(spec: ShapeSpec, n_points: int, seed: int,
                   normalize: bool = True) -> tuple[PointCloud, np.ndarray]:
    """Area-proportional surface sampling of every part, centered and scaled to the unit ball."""
    if n_points < 8 * len(spec.parts):
        raise ValueError(f"need at least {8 * len(spec.parts)} points for {len(spec.parts)} parts")
    for p in spec.parts:
        if min(p.size) <= 0:
            raise ValueError(f"degenerate primitive {p.name!r} with size {p.size}")
    rng = np.random.default_rng(seed)
    areas = np.array([surface_area(p) for p in spec.parts])
    counts = rng.multinomial(n_points, areas / areas.sum())
    coords = np.concatenate([sample_surface(p, c, rng) for p, c in zip(spec.parts, counts)])
    labels = np.repeat(np.arange(len(spec.parts)), counts)
    if normalize:
        coords = coords - coords.mean(axis=0)
        coords = coords / np.linalg.norm(coords, axis=1).max()
    return PointCloud(coords, labels), labels


def generate_gt_mask(coords: np.ndarray, labels: np.ndarray, target_label: int,
                     sigma: float = MASK_SIGMA, floor: float = MASK_FLOOR) -> np.ndarray:
    """1 on the target part; Gaussian falloff of the distance to it elsewhere, zeroed below ``floor``."""
    labels = np.asarray(labels)
    on = labels == target_label
    if not on.any():
        raise ValueError(f"target part {target_label} has no points")
    mask = np.ones(len(labels))
    d, _ = cKDTree(coords[on]).query(coords[~on])
    off = np.exp(-d ** 2 / (2 * sigma ** 2))
    off[off < floor] = 0.0
    mask[~on] = off
    return mask


# ---------------------------------------------------------------------------
# affordance vocabulary and catalog
# ---------------------------------------------------------------------------

SEEN_AFFORDANCES = (
    "grasp", "contain", "lift", "open", "lay", "sit", "support", "wrapgrasp", "pour",
    "move", "display", "push", "listen", "wear", "press", "cut", "stab",
)

SYNONYMS = {
    "grip": "grasp", "store": "contain", "raise": "lift", "unseal": "open", "recline": "lay",
    "perch": "sit", "bear": "support", "clasp": "wrapgrasp", "decant": "pour", "shift": "move",
    "demonstrate": "display", "shove": "push", "hear": "listen", "don": "wear", "tap": "press",
    "slice": "cut", "pierce": "stab",
}


def _box(name, center, size):
    return Part(name, "box", center, size)


def _cyl(name, center, r, h, axis=1):
    return Part(name, "cylinder", center, (r, h), axis)


CATALOG: dict[str, tuple[ShapeSpec, dict[str, str]]] = {
    "mug": (ShapeSpec("mug", (
        _cyl("body", (0, 0, 0), 0.35, 0.8), _box("handle", (0.47, 0, 0), (0.15, 0.45, 0.08)))),
        {"grasp": "handle", "contain": "body", "pour": "body", "wrapgrasp": "body"}),
    "bag": (ShapeSpec("bag", (
        _box("body", (0, 0, 0), (0.9, 0.6, 0.3)), _box("strap", (0, 0.6, 0), (0.7, 0.06, 0.06)),
        _box("zipper", (0, 0.31, 0), (0.8, 0.02, 0.08)))),
        {"grasp": "strap", "lift": "strap", "open": "zipper", "contain": "body", "wear": "strap"}),
    "chair": (ShapeSpec("chair", (
        _box("seat", (0, 0, 0), (0.8, 0.1, 0.8)), _box("back", (0, 0.5, -0.35), (0.8, 0.9, 0.1)),
        _box("leg", (0, -0.45, 0), (0.5, 0.8, 0.5)))),
        {"sit": "seat", "support": "leg", "move": "back"}),
    "bed": (ShapeSpec("bed", (
        _box("mattress", (0, 0, 0), (1.6, 0.2, 0.9)), _box("headboard", (-0.85, 0.3, 0), (0.1, 0.8, 0.9)),
        _box("frame", (0, -0.25, 0), (1.6, 0.3, 0.9)))),
        {"lay": "mattress", "sit": "mattress", "support": "frame"}),
    "knife": (ShapeSpec("knife", (
        _box("blade", (0.35, 0, 0), (0.7, 0.15, 0.02)), _cyl("handle", (-0.25, 0, 0), 0.06, 0.45, axis=0))),
        {"cut": "blade", "stab": "blade", "grasp": "handle"}),
    "bottle": (ShapeSpec("bottle", (
        _cyl("body", (0, 0, 0), 0.3, 0.8), _cyl("neck", (0, 0.55, 0), 0.12, 0.3),
        _cyl("cap", (0, 0.75, 0), 0.14, 0.1))),
        {"contain": "body", "wrapgrasp": "body", "pour": "neck", "open": "cap"}),
    "door": (ShapeSpec("door", (
        _box("panel", (0, 0, 0), (0.9, 1.8, 0.08)), Part("knob", "sphere", (0.33, 0, 0.12), (0.08,)))),
        {"open": "knob", "push": "panel", "move": "panel"}),
    "headphone": (ShapeSpec("headphone", (
        _box("band", (0, 0.45, 0), (0.9, 0.08, 0.15)), _cyl("earcup", (0.5, 0, 0), 0.2, 0.12, axis=0))),
        {"listen": "earcup", "wear": "band", "grasp": "band"}),
    "monitor": (ShapeSpec("monitor", (
        _box("screen", (0, 0.3, 0), (1.2, 0.7, 0.06)), _box("stand", (0, -0.25, 0), (0.1, 0.4, 0.1)),
        Part("base", "disk", (0, -0.45, 0), (0.3,), 1))),
        {"display": "screen", "support": "base", "move": "stand"}),
    "laptop": (ShapeSpec("laptop", (
        _box("screen", (0, 0.35, -0.3), (1.0, 0.65, 0.04)), _box("keyboard", (0, 0, 0.05), (1.0, 0.05, 0.7)))),
        {"display": "screen", "press": "keyboard", "open": "screen"}),
    "faucet": (ShapeSpec("faucet", (
        _cyl("spout", (0.2, 0.3, 0), 0.06, 0.5, axis=0), _box("lever", (-0.1, 0.45, 0), (0.25, 0.05, 0.06)),
        _cyl("base", (-0.1, 0.05, 0), 0.12, 0.5))),
        {"open": "lever", "pour": "spout", "support": "base"}),
    "microwave": (ShapeSpec("microwave", (
        _box("body", (0, 0, 0), (1.0, 0.6, 0.6)), _box("door", (-0.1, 0, 0.31), (0.7, 0.5, 0.02)),
        _box("button", (0.4, 0, 0.31), (0.12, 0.3, 0.02)))),
        {"open": "door", "press": "button", "contain": "body"}),
    "scissors": (ShapeSpec("scissors", (
        _box("blade", (0.3, 0, 0), (0.6, 0.12, 0.03)), _box("handle", (-0.25, 0, 0), (0.35, 0.25, 0.05)))),
        {"cut": "blade", "grasp": "handle", "stab": "blade"}),
    "table": (ShapeSpec("table", (
        _box("top", (0, 0.3, 0), (1.4, 0.08, 0.8)), _box("leg", (0, -0.1, 0), (0.15, 0.75, 0.15)))),
        {"support": "top", "move": "leg"}),
}

DEFAULT_HELDOUT = ("scissors", "table")


@dataclass
class AffordanceVocab:
    seen: tuple[str, ...] = SEEN_AFFORDANCES
    synonyms: dict[str, str] = field(default_factory=lambda: dict(SYNONYMS))
    catalog: dict = field(default_factory=lambda: dict(CATALOG))

    def __post_init__(self):
        for word, target in self.synonyms.items():
            if target not in self.seen:
                raise ValueError(f"synonym {word!r} targets unknown affordance {target!r}")
        for cls, (spec, amap) in self.catalog.items():
            for aff, part in amap.items():
                if aff not in self.seen or part not in spec.part_names:
                    raise ValueError(f"{cls}: bad affordance mapping {aff!r} -> {part!r}")

    def affordance_id(self, word: str) -> int:
        """Seen id of ``word``; synonyms resolve to the seen word they stand for."""
        base = self.synonyms.get(word, word)
        try:
            return self.seen.index(base)
        except ValueError:
            raise KeyError(f"unknown affordance word {word!r}") from None

    def synonym_of(self, seen_word: str) -> str:
        for syn, base in self.synonyms.items():
            if base == seen_word:
                return syn
        raise KeyError(f"no synonym for {seen_word!r}")

    def pairs(self, classes) -> list[tuple[str, str]]:
        return [(c, a) for c in classes for a in self.catalog[c][1]]


# ---------------------------------------------------------------------------
# instructions
# ---------------------------------------------------------------------------

RAW_TEMPLATES = (
    "Where should you {aff} the {obj}?",
    "Which part of the {obj} would you {aff}?",
    "Show me where to {aff} this {obj}.",
)


def generate_instruction(object_class: str, parts, affordance_word: str, target_part: str,
                         vocab: AffordanceVocab, template: int = 0) -> InstructionRecord:
    """Fill the part-aware template; the focus slot position is recorded structurally."""
    parts = list(parts)
    if target_part not in parts:
        raise ValueError(f"target part {target_part!r} not among {parts}")
    head = f"A {object_class} consists of {', '.join(parts)}. For {affordance_word}, I should focus on the"
    structured = f"{head} {target_part}."
    raw = RAW_TEMPLATES[template % len(RAW_TEMPLATES)].format(aff=affordance_word, obj=object_class)
    return InstructionRecord(
        raw=raw,
        structured=structured,
        affordance_id=vocab.affordance_id(affordance_word),
        affordance_word=affordance_word,
        part_word=target_part,
        part_index=len(split_words(head)),
    )


# ---------------------------------------------------------------------------
# samples and splits
# ---------------------------------------------------------------------------

@dataclass
class AffordanceSample:
    sample_id: str
    object_class: str
    parts: list[str]
    target_part: str
    cloud: PointCloud
    instruction: InstructionRecord
    gt_mask: np.ndarray
    tags: tuple[str, ...] = ()
    template: int = 0
    crop_fraction: float = 1.0

    @property
    def coords(self) -> np.ndarray:
        return self.cloud.coords


@dataclass
class DataConfig:
    n_points: int = 2048
    samples_per_pair: int = 6
    test_per_pair: int = 1
    n_classes: int = len(CATALOG)
    heldout: tuple[str, ...] = DEFAULT_HELDOUT
    val_fraction: float = 0.1
    jitter: float = 0.15


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([zlib.crc32(str(p).encode()) for p in parts]).generate_state(1)[0])


def jitter_spec(spec: ShapeSpec, rng: np.random.Generator, amount: float) -> ShapeSpec:
    parts = []
    for p in spec.parts:
        size = tuple(float(s * rng.uniform(1 - amount, 1 + amount)) for s in p.size)
        center = tuple(float(c + rng.uniform(-0.3, 0.3) * amount * 0.5) for c in p.center)
        parts.append(replace(p, size=size, center=center))
    return ShapeSpec(spec.object_class, tuple(parts))


def make_sample(vocab: AffordanceVocab, object_class: str, affordance: str, seed: int, n_points: int,
                jitter: float, open_vocab: bool = False, partial: bool = False, tags=(),
                sample_id: str = "") -> AffordanceSample:
    spec, amap = vocab.catalog[object_class]
    rng = np.random.default_rng(seed)
    spec = jitter_spec(spec, rng, jitter)
    target = amap[affordance]
    target_label = spec.part_names.index(target)
    crop_fraction = 1.0
    if partial:
        dense, labels = generate_shape(spec, 4 * n_points, int(rng.integers(2 ** 31)))
        while not (labels == target_label).any():
            dense, labels = generate_shape(spec, 4 * n_points, int(rng.integers(2 ** 31)))
        coords, labels, crop_fraction = crop_half_space(dense.coords, labels, target_label, rng)
        keep = np.sort(rng.choice(len(coords), size=n_points, replace=False))
        while not (labels[keep] == target_label).any():
            keep = np.sort(rng.choice(len(coords), size=n_points, replace=False))
        cloud = PointCloud(coords[keep], labels[keep])
    else:
        cloud, _ = generate_shape(spec, n_points, int(rng.integers(2 ** 31)))
        # small parts can draw zero points at low N; the mask needs the target present
        while not (cloud.labels == target_label).any():
            cloud, _ = generate_shape(spec, n_points, int(rng.integers(2 ** 31)))
    word = vocab.synonym_of(affordance) if open_vocab else affordance
    template = int(rng.integers(len(RAW_TEMPLATES)))
    instr = generate_instruction(object_class, spec.part_names, word, target, vocab, template)
    mask = generate_gt_mask(cloud.coords, cloud.labels, target_label)
    return AffordanceSample(sample_id, object_class, spec.part_names, target, cloud, instr, mask,
                            tuple(tags), template, crop_fraction)


def crop_half_space(coords: np.ndarray, labels: np.ndarray, target_label: int, rng: np.random.Generator,
                    min_fraction: float = MIN_CROP_FRACTION, tries: int = 100):
    """Keep the points on one side of a random plane through the centroid."""
    centroid = coords.mean(axis=0)
    need = min(8, int((labels == target_label).sum()))
    if need == 0:
        raise ValueError(f"target part {target_label} has no points")
    for _ in range(tries):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        keep = (coords - centroid) @ normal <= 0
        frac = keep.mean()
        if frac >= min_fraction and (labels[keep] == target_label).sum() >= need:
            return coords[keep], labels[keep], float(frac)
    raise RuntimeError("could not find a half-space crop keeping enough points")


def make_splits(cfg: DataConfig, seed: int = 42, vocab: AffordanceVocab | None = None) -> dict[str, list[AffordanceSample]]:
    """Training/validation pools plus the four evaluation splits.

    seen: training classes and words; unseen: held-out classes only;
    open: synonym words only; partial: synonym words on half-space crops.
    """
    vocab = vocab or AffordanceVocab()
    classes = list(vocab.catalog)[: cfg.n_classes]
    heldout = [c for c in cfg.heldout if c in classes]
    train_classes = [c for c in classes if c not in heldout]
    if not heldout or len(train_classes) < 2:
        raise ValueError(f"catalog of {len(classes)} classes too small for the holdout {cfg.heldout}")

    def build(split, pairs, count, **kw):
        out = []
        for cls, aff in pairs:
            for j in range(count):
                sid = f"{split}-{cls}-{aff}-{j}"
                out.append(make_sample(vocab, cls, aff, _seed(seed, split, cls, aff, j), cfg.n_points,
                                       cfg.jitter, sample_id=sid, **kw))
        return out

    train_pairs = vocab.pairs(train_classes)
    pool = build("train", train_pairs, cfg.samples_per_pair, tags=("seen",))
    order = np.random.default_rng(_seed(seed, "val")).permutation(len(pool))
    n_val = max(1, int(round(cfg.val_fraction * len(pool))))
    val_idx = set(order[:n_val].tolist())
    return {
        "train": [s for i, s in enumerate(pool) if i not in val_idx],
        "val": [s for i, s in enumerate(pool) if i in val_idx],
        "seen": build("seen", train_pairs, cfg.test_per_pair, tags=("seen",)),
        "unseen": build("unseen", vocab.pairs(heldout), cfg.test_per_pair, tags=("unseen-object",)),
        "open": build("open", train_pairs, cfg.test_per_pair, open_vocab=True, tags=("open-vocab",)),
        "partial": build("partial", train_pairs, cfg.test_per_pair, open_vocab=True, partial=True,
                         tags=("open-vocab", "partial-view")),
    }


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

def _reword(sample: AffordanceSample, vocab: AffordanceVocab, seen_word: str, part: str) -> AffordanceSample:
    word = vocab.synonym_of(seen_word) if sample.instruction.affordance_word in vocab.synonyms else seen_word
    instr = generate_instruction(sample.object_class, sample.parts, word, part, vocab, sample.template)
    return replace(sample, instruction=instr)


CORRUPTION_MODES = ("affordance", "part-focus")


def corrupt_instructions(samples, rate: float, mode: str, seed: int,
                         vocab: AffordanceVocab | None = None) -> list[AffordanceSample]:
    """Alter exactly round(rate * n) eligible records; ground-truth masks stay untouched.

    ``affordance`` mode replaces the affordance with a different one (preferring
    another affordance of the same object, whose focus part then follows);
    ``part-focus`` mode points the focus slot at a different part.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}")
    vocab = vocab or AffordanceVocab()
    samples = list(samples)
    eligible = [i for i, s in enumerate(samples) if mode == "affordance" or len(s.parts) > 1]
    n_alter = min(len(eligible), int(round(rate * len(samples))))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(eligible, size=n_alter, replace=False).tolist()) if n_alter else []
    out = list(samples)
    for i in chosen:
        s = samples[i]
        current = vocab.seen[s.instruction.affordance_id]
        if mode == "affordance":
            amap = vocab.catalog[s.object_class][1]
            options = [a for a in amap if a != current] or [a for a in vocab.seen if a != current]
            new_aff = options[int(rng.integers(len(options)))]
            part = amap.get(new_aff, s.instruction.part_word)
            out[i] = _reword(s, vocab, new_aff, part)
        else:
            options = [p for p in s.parts if p != s.instruction.part_word]
            out[i] = _reword(s, vocab, current, options[int(rng.integers(len(options)))])
    return out


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _mask_dumps(mask: np.ndarray) -> str:
    return "".join(f"{float(v)!r}\n" for v in mask)


def save_split(samples, root, split: str) -> Path:
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = root / f"{split}.jsonl"
    with manifest.open("w") as fh:
        for s in samples:
            cloud_rel, mask_rel = f"clouds/{s.sample_id}.txt", f"masks/{s.sample_id}.txt"
            s.cloud.save(root / cloud_rel)
            (root / mask_rel).write_text(_mask_dumps(s.gt_mask))
            rec = {"id": s.sample_id, "object_class": s.object_class, "parts": s.parts,
                   "target_part": s.target_part, "cloud": cloud_rel, "mask": mask_rel,
                   "tags": list(s.tags), "template": s.template, "crop_fraction": s.crop_fraction,
                   "instruction": json.loads(s.instruction.to_line())}
            fh.write(json.dumps(rec) + "\n")
    return manifest


def load_split(manifest) -> list[AffordanceSample]:
    manifest = Path(manifest)
    root = manifest.parent
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        cloud = PointCloud.load(root / rec["cloud"])
        mask = np.array([float(v) for v in (root / rec["mask"]).read_text().split()], dtype=np.float64)
        instr = InstructionRecord.from_line(json.dumps(rec["instruction"]))
        out.append(AffordanceSample(rec["id"], rec["object_class"], rec["parts"], rec["target_part"], cloud,
                                    instr, mask, tuple(rec["tags"]), rec["template"], rec["crop_fraction"]))
    return out


def save_splits(splits: dict, root) -> dict[str, Path]:
    return {name: save_split(samples, root, name) for name, samples in splits.items()}
