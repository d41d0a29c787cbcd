"""Synthetic shapes with closed-grammar captions, plus point-cloud file IO."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, apply_rigid, normalize_unit_ball, quaternion_to_matrix
from .losses import TeacherFeatures
from .rng import Rng

FAMILIES = ("sphere", "box", "cylinder", "torus", "composite")
PRIMITIVES = ("sphere", "box", "cylinder", "torus")
COLORS = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.1, 0.2, 0.9), "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95), "black": (0.05, 0.05, 0.05), "orange": (1.0, 0.55, 0.0),
    "purple": (0.55, 0.1, 0.7),
}
RELATIONS = ("above", "beside")
# discrete size grids keep captions exact
SIZE_GRID = {
    "sphere": {"radius": (0.2, 0.3, 0.4, 0.5, 0.6)},
    "box": {"x": (0.4, 0.6, 0.8, 1.0), "y": (0.4, 0.6, 0.8, 1.0), "z": (0.4, 0.6, 0.8, 1.0)},
    "cylinder": {"radius": (0.2, 0.3, 0.4), "height": (0.4, 0.6, 0.8, 1.0)},
    "torus": {"radius": (0.4, 0.5, 0.6), "thickness": (0.1, 0.15, 0.2)},
}
PART_NAMES = {1: "one", 2: "two"}


class SpecError(ValueError):
    pass


class CloudFormatError(ValueError):
    pass


class EmptyCloudError(CloudFormatError):
    pass


@dataclass
class ShapeSpec:
    family: str
    params: dict[str, float] = field(default_factory=dict)
    color: str = "red"
    quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 0.0
    color_scheme: str = "solid"  # solid | shaded
    parts: list["ShapeSpec"] = field(default_factory=list)  # composite only: [top/left, bottom/right]
    relation: str = ""

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.noise < 0:
            raise SpecError("noise sigma must be >= 0")
        if self.color not in COLORS:
            raise SpecError(f"unknown color {self.color!r}")
        if self.color_scheme not in ("solid", "shaded"):
            raise SpecError(f"unknown color scheme {self.color_scheme!r}")
        if self.family == "composite":
            if len(self.parts) != 2 or self.relation not in RELATIONS:
                raise SpecError("composite needs two parts and a relation")
            for p in self.parts:
                if p.family == "composite":
                    raise SpecError("composites do not nest")
                p.validate()
            return
        need = set(SIZE_GRID[self.family])
        if set(self.params) != need:
            raise SpecError(f"{self.family} needs parameters {sorted(need)}, got {sorted(self.params)}")
        if any(not v > 0 for v in self.params.values()):
            raise SpecError("shape parameters must be positive")
        if self.family == "torus" and self.params["thickness"] >= self.params["radius"]:
            raise SpecError("torus thickness must be below its radius")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parts"] = [p.to_dict() for p in self.parts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        d = dict(d)
        d["parts"] = [cls.from_dict(p) for p in d.get("parts", [])]
        d["quat"] = tuple(d.get("quat", (1.0, 0.0, 0.0, 0.0)))
        d["translation"] = tuple(d.get("translation", (0.0, 0.0, 0.0)))
        return cls(**d)


@dataclass
class CaptionRecord:
    shape_id: str
    caption: str
    qa: list[tuple[str, str]] = field(default_factory=list)


# -- sampling ----------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:g}"


def _primitive_spec(family: str, rng: Rng) -> ShapeSpec:
    grid = SIZE_GRID[family]
    params = {}
    for i, (name, values) in enumerate(grid.items()):
        params[name] = float(values[int(rng.split(name).integers(len(values)))])
    color = list(COLORS)[int(rng.split("color").integers(len(COLORS)))]
    return ShapeSpec(family, params, color)


def random_spec(rng: Rng, families=FAMILIES, noise: float = 0.005, random_pose: bool = True) -> ShapeSpec:
    family = families[int(rng.split("family").integers(len(families)))]
    if family == "composite":
        a = _primitive_spec(PRIMITIVES[int(rng.split("fa").integers(4))], rng.split("a"))
        b = _primitive_spec(PRIMITIVES[int(rng.split("fb").integers(4))], rng.split("b"))
        relation = RELATIONS[int(rng.split("rel").integers(2))]
        spec = ShapeSpec("composite", {}, a.color, parts=[a, b], relation=relation)
    else:
        spec = _primitive_spec(family, rng)
    if random_pose:
        # yaw only: keeps "above" meaningful
        ang = float(rng.split("yaw").uniform((), 0.0, 2 * np.pi))
        spec.quat = (float(np.cos(ang / 2)), 0.0, 0.0, float(np.sin(ang / 2)))
    spec.noise = noise
    return spec


def _surface(spec: ShapeSpec, n: int, rng: Rng) -> np.ndarray:
    """Area-uniform samples on the analytic surface, centered at the origin."""
    p = spec.params
    if spec.family == "sphere":
        v = rng.split("dir").normal((n, 3))
        return p["radius"] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if spec.family == "box":
        ext = np.array([p["x"], p["y"], p["z"]])
        areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
        face_p = np.repeat(areas, 2) / (2 * areas.sum())
        face = np.searchsorted(np.cumsum(face_p), rng.split("face").uniform(n), side="right").clip(0, 5)
        pts = (rng.split("uv").uniform((n, 3)) - 0.5) * ext
        axis = face // 2
        sign = np.where(face % 2 == 0, -0.5, 0.5)
        pts[np.arange(n), axis] = sign * ext[axis]
        return pts
    if spec.family == "cylinder":
        r, h = p["radius"], p["height"]
        side, cap = 2 * np.pi * r * h, np.pi * r * r
        u = rng.split("part").uniform(n) * (side + 2 * cap)
        phi = rng.split("phi").uniform(n, 0.0, 2 * np.pi)
        z = (rng.split("z").uniform(n) - 0.5) * h
        rad = r * np.sqrt(rng.split("rad").uniform(n))
        on_side = u < side
        top = u >= side + cap
        rho = np.where(on_side, r, rad)
        z = np.where(on_side, z, np.where(top, h / 2, -h / 2))
        return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    if spec.family == "torus":
        big, t = p["radius"], p["thickness"]
        out = np.zeros((0, 2))
        r2 = rng.split("tube")
        i = 0
        while len(out) < n:
            # area element is proportional to (R + t cos v): rejection sample v
            v = r2.split(i).uniform(2 * n, 0.0, 2 * np.pi)
            acc = r2.split(f"acc{i}").uniform(2 * n) * (big + t) < big + t * np.cos(v)
            u = r2.split(f"u{i}").uniform(2 * n, 0.0, 2 * np.pi)
            out = np.concatenate([out, np.stack([u[acc], v[acc]], axis=1)])
            i += 1
        u, v = out[:n, 0], out[:n, 1]
        ring = big + t * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), t * np.sin(v)], axis=1)
    raise SpecError(f"no surface for {spec.family!r}")


def _half_extent(spec: ShapeSpec, axis: int) -> float:
    p = spec.params
    if spec.family == "sphere":
        return p["radius"]
    if spec.family == "box":
        return 0.5 * (p["x"], p["y"], p["z"])[axis]
    if spec.family == "cylinder":
        return p["height"] / 2 if axis == 2 else p["radius"]
    return p["thickness"] if axis == 2 else p["radius"] + p["thickness"]


def surface_area(spec: ShapeSpec) -> float:
    p = spec.params
    if spec.family == "sphere":
        return 4 * np.pi * p["radius"] ** 2
    if spec.family == "box":
        x, y, z = p["x"], p["y"], p["z"]
        return 2 * (x * y + y * z + x * z)
    if spec.family == "cylinder":
        return 2 * np.pi * p["radius"] * (p["radius"] + p["height"])
    if spec.family == "torus":
        return 4 * np.pi ** 2 * p["radius"] * p["thickness"]
    return sum(surface_area(q) for q in spec.parts)


def _colors(spec: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    base = np.broadcast_to(np.array(COLORS[spec.color]), pts.shape).copy()
    if spec.color_scheme == "shaded":
        shade = 0.75 + 0.25 * np.tanh(pts[:, 2:3] * 2.0)
        base = np.clip(base * shade, 0.0, 1.0)
    return base


def generate(spec: ShapeSpec, n_points: int, rng: Rng, shape_id: str = "") -> tuple[PointCloud, CaptionRecord]:
    if n_points < 8:
        raise SpecError("n_points must be >= 8")
    spec.validate()
    if spec.family == "composite":
        a, b = spec.parts
        axis = 2 if spec.relation == "above" else 0
        areas = np.array([surface_area(a), surface_area(b)])
        n_a = int(np.floor(n_points * areas[0] / areas.sum() + 0.5))
        n_a = min(max(n_a, 1), n_points - 1)
        pa = _surface(a, n_a, rng.split("part0"))
        pb = _surface(b, n_points - n_a, rng.split("part1"))
        gap = _half_extent(a, axis) + _half_extent(b, axis)
        off = np.zeros(3)
        off[axis] = gap / 2
        pa, pb = pa + off, pb - off
        pts = np.concatenate([pa, pb])
        cols = np.concatenate([_colors(a, pa), _colors(b, pb)])
    else:
        pts = _surface(spec, n_points, rng.split("surface"))
        cols = _colors(spec, pts)
    if spec.noise > 0:
        pts = pts + spec.noise * rng.split("noise").normal(pts.shape)
    pts = apply_rigid(pts, quaternion_to_matrix(np.array(spec.quat)), np.array(spec.translation))
    return PointCloud(pts, cols), caption_record(spec, shape_id)


# -- grammar -----------------------------------------------------------------------

def _primitive_phrase(spec: ShapeSpec) -> str:
    p = {k: _fmt(v) for k, v in spec.params.items()}
    head = f"a {spec.color} {spec.family}"
    if spec.family == "sphere":
        return f"{head} of radius {p['radius']}"
    if spec.family == "box":
        return f"{head} of size {p['x']} by {p['y']} by {p['z']}"
    if spec.family == "cylinder":
        return f"{head} of radius {p['radius']} and height {p['height']}"
    return f"{head} of radius {p['radius']} and thickness {p['thickness']}"


def caption(spec: ShapeSpec) -> str:
    if spec.family == "composite":
        a, b = spec.parts
        rel = "above" if spec.relation == "above" else "beside"
        return f"{_primitive_phrase(a)} {rel} {_primitive_phrase(b)}"
    return _primitive_phrase(spec)


def qa_pairs(spec: ShapeSpec) -> list[tuple[str, str]]:
    if spec.family == "composite":
        a, b = spec.parts
        qa = [("what shape is this ?", "composite"), ("what color is it ?", f"{a.color} and {b.color}"),
              ("how many parts ?", PART_NAMES[2])]
        if spec.relation == "above":
            qa.append(("which part is on top ?", a.family))
        else:
            qa.append(("which part is on the left ?", a.family))
        return qa
    return [("what shape is this ?", spec.family), ("what color is it ?", spec.color),
            ("how many parts ?", PART_NAMES[1])]


def caption_record(spec: ShapeSpec, shape_id: str = "") -> CaptionRecord:
    return CaptionRecord(shape_id, caption(spec), qa_pairs(spec))


def _parse_primitive(words: list[str], pos: int) -> tuple[ShapeSpec, int]:
    def expect(w):
        nonlocal pos
        if pos >= len(words) or words[pos] != w:
            raise SpecError(f"caption parse: expected {w!r} at word {pos}")
        pos += 1

    def number():
        nonlocal pos
        try:
            v = float(words[pos])
        except (IndexError, ValueError):
            raise SpecError(f"caption parse: expected a number at word {pos}") from None
        pos += 1
        return v

    expect("a")
    color, family = words[pos], words[pos + 1]
    pos += 2
    expect("of")
    if family == "box":
        expect("size")
        x = number(); expect("by"); y = number(); expect("by"); z = number()
        params = {"x": x, "y": y, "z": z}
    else:
        expect("radius")
        params = {"radius": number()}
        if family in ("cylinder", "torus"):
            expect("and")
            key = "height" if family == "cylinder" else "thickness"
            expect(key)
            params[key] = number()
    return ShapeSpec(family, params, color), pos


def parse_caption(text: str) -> ShapeSpec:
    """Inverse of :func:`caption` on the canonical fields (family, color, sizes, relation)."""
    words = text.split()
    spec, pos = _parse_primitive(words, 0)
    if pos == len(words):
        spec.validate()
        return spec
    rel = words[pos]
    if rel not in RELATIONS:
        raise SpecError(f"caption parse: unknown relation {rel!r}")
    other, pos = _parse_primitive(words, pos + 1)
    if pos != len(words):
        raise SpecError("caption parse: trailing words")
    out = ShapeSpec("composite", {}, spec.color, parts=[spec, other], relation=rel)
    out.validate()
    return out


def canonical(spec: ShapeSpec) -> dict:
    """Fields a caption determines."""
    if spec.family == "composite":
        return {"family": "composite", "relation": spec.relation, "parts": [canonical(p) for p in spec.parts]}
    return {"family": spec.family, "color": spec.color, "params": dict(sorted(spec.params.items()))}


# -- vocabulary --------------------------------------------------------------------

SPECIAL = ("<pad>", "<bos>", "<eos>", "<unk>", ":")
PROMPT_WORDS = ("describe", "the", "object", "what", "shape", "is", "this", "?", "color", "it", "how", "many",
                "parts", "which", "part", "on", "top", "left", "answer", "and")


class Vocab:
    """Whitespace word vocabulary over the closed grammar."""

    def __init__(self, words=None):
        if words is None:
            words = list(SPECIAL) + list(PROMPT_WORDS)
            words += ["a", "of", "radius", "size", "by", "height", "thickness", "composite"]
            words += list(PRIMITIVES) + list(COLORS) + list(RELATIONS) + list(PART_NAMES.values())
            nums = sorted({v for g in SIZE_GRID.values() for vals in g.values() for v in vals})
            words += [_fmt(v) for v in nums]
        seen = []
        for w in words:
            if w not in seen:
                seen.append(w)
        self.words = seen
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def bos(self) -> int:
        return self.index["<bos>"]

    @property
    def eos(self) -> int:
        return self.index["<eos>"]

    def encode(self, text: str) -> list[int]:
        unk = self.index["<unk>"]
        return [self.index.get(w, unk) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


CAPTION_PROMPT = "describe the object :"


@dataclass
class TextExample:
    ids: np.ndarray  # input ids
    targets: np.ndarray  # next-token targets per position
    loss_mask: np.ndarray  # True where the target is part of the response


def text_example(vocab: Vocab, prompt: str, response: str) -> TextExample:
    """``<bos> prompt response <eos>``; the loss covers response words and eos."""
    p = [vocab.bos] + vocab.encode(prompt)
    r = vocab.encode(response) + [vocab.eos]
    seq = np.array(p + r, dtype=np.int64)
    ids = seq[:-1]
    targets = seq[1:]
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(p) - 1:] = True
    return TextExample(ids, targets, mask)


def caption_example(vocab: Vocab, record: CaptionRecord) -> TextExample:
    return text_example(vocab, CAPTION_PROMPT, record.caption)


# -- file formats ------------------------------------------------------------------

PFPC_MAGIC = b"PFPC"
PFTF_MAGIC = b"PFTF"
PFPC_VERSION = 1


def save_xyz(path, cloud: PointCloud, with_colors: bool = True) -> None:
    rows = cloud.features() if with_colors else cloud.positions
    with open(path, "w") as f:
        f.write("# x y z" + (" r g b" if with_colors else "") + "\n")
        for row in rows:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def _load_xyz(path) -> tuple[np.ndarray, np.ndarray | None]:
    rows, ncol = [], None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 6):
                raise CloudFormatError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(parts)}")
            if ncol is not None and len(parts) != ncol:
                raise CloudFormatError(f"{path}:{lineno}: column count changed from {ncol} to {len(parts)}")
            ncol = len(parts)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise EmptyCloudError(f"{path}: empty point cloud")
    arr = np.array(rows)
    return arr[:, :3], (arr[:, 3:] if ncol == 6 else None)


def save_pfpc(path, cloud: PointCloud, with_colors: bool = True) -> None:
    with open(path, "wb") as f:
        f.write(PFPC_MAGIC + struct.pack("<IQI", PFPC_VERSION, cloud.N, 1 if with_colors else 0))
        f.write(cloud.positions.astype("<f4").tobytes())
        if with_colors:
            f.write(cloud.colors.astype("<f4").tobytes())


def _load_pfpc(path) -> tuple[np.ndarray, np.ndarray | None]:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != PFPC_MAGIC:
        raise CloudFormatError(f"{path}: bad pfpc header (magic {raw[:4]!r})")
    version, n, flags = struct.unpack_from("<IQI", raw, 4)
    if version != PFPC_VERSION:
        raise CloudFormatError(f"{path}: unsupported pfpc version {version}")
    if n == 0:
        raise EmptyCloudError(f"{path}: empty point cloud")
    has_col = bool(flags & 1)
    want = 20 + 12 * n * (2 if has_col else 1)
    if len(raw) != want:
        raise CloudFormatError(f"{path}: header says {n} points ({want} bytes) but file has {len(raw)} bytes")
    pos = np.frombuffer(raw, "<f4", 3 * n, 20).reshape(n, 3).astype(np.float64)
    col = np.frombuffer(raw, "<f4", 3 * n, 20 + 12 * n).reshape(n, 3).astype(np.float64) if has_col else None
    return pos, col


def load_cloud(path, fmt: str | None = None, normalize: bool = True) -> PointCloud:
    path = Path(path)
    if fmt is None:
        fmt = "pfpc-binary" if path.suffix == ".pfpc" else "xyz-text"
    if fmt == "xyz-text":
        pos, col = _load_xyz(path)
    elif fmt == "pfpc-binary":
        pos, col = _load_pfpc(path)
    else:
        raise CloudFormatError(f"unknown cloud format {fmt!r}")
    if normalize:
        pos = normalize_unit_ball(pos)
    return PointCloud(pos, col)


def save_teacher(path, features: np.ndarray) -> None:
    features = np.asarray(features)
    m, d = features.shape
    with open(path, "wb") as f:
        f.write(PFTF_MAGIC + struct.pack("<QQ", m, d))
        f.write(features.astype("<f4").tobytes())


def load_teacher(path) -> TeacherFeatures:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != PFTF_MAGIC:
        raise CloudFormatError(f"{path}: bad teacher-feature header")
    m, d = struct.unpack_from("<QQ", raw, 4)
    if len(raw) != 20 + 4 * m * d:
        raise CloudFormatError(f"{path}: teacher header says {m}x{d} but payload has {len(raw) - 20} bytes")
    feats = np.frombuffer(raw, "<f4", m * d, 20).reshape(m, d).astype(np.float64)
    return TeacherFeatures(feats, str(path))


# -- datasets ----------------------------------------------------------------------

@dataclass
class Sample:
    shape_id: str
    spec: ShapeSpec
    cloud: PointCloud
    record: CaptionRecord


def make_dataset(n: int, seed: int, n_points: int = 1024, families=FAMILIES, noise: float = 0.005,
                 random_pose: bool = True) -> list[Sample]:
    root = Rng(seed).split("dataset")
    out = []
    for i in range(n):
        r = root.split(i)
        spec = random_spec(r.split("spec"), families, noise, random_pose)
        sid = f"shape{i:05d}"
        cloud, rec = generate(spec, n_points, r.split("points"), sid)
        out.append(Sample(sid, spec, cloud, rec))
    return out


def regenerate(sample: Sample, n_points: int, seed: int = 0) -> PointCloud:
    """The same analytic shape sampled at another resolution."""
    cloud, _ = generate(sample.spec, n_points, Rng(seed).split("regen").split(sample.shape_id))
    return cloud


def write_dataset(out_dir, samples: list[Sample], seed: int, n_points: int) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        save_pfpc(out_dir / "clouds" / f"{s.shape_id}.pfpc", s.cloud)
        entries.append({"id": s.shape_id, "spec": s.spec.to_dict(), "caption": s.record.caption,
                        "qa": [list(q) for q in s.record.qa]})
    manifest = {"schema_version": 1, "seed": seed, "n_points": n_points, "count": len(samples),
                "shapes": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_dataset(out_dir) -> list[Sample]:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    samples = []
    for e in manifest["shapes"]:
        spec = ShapeSpec.from_dict(e["spec"])
        cloud = load_cloud(out_dir / "clouds" / f"{e['id']}.pfpc", normalize=False)
        samples.append(Sample(e["id"], spec, cloud, CaptionRecord(e["id"], e["caption"],
                                                                   [tuple(q) for q in e["qa"]])))
    return samples
