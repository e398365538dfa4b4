"""Deterministic synthetic tracking sequences with ground truth.

A :class:`ScenarioSpec` describes textured shapes moving along piecewise-linear
keyframe trajectories over a static textured background, plus occluders. Rendering
produces frames, tight ground-truth boxes, full-occlusion flags, an NL description
of the target and per-frame ground-truth flow of the target region.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

from nltrack.geometry import BBox

COLORS = {
    "red": (215, 40, 40),
    "green": (40, 190, 60),
    "blue": (45, 70, 220),
    "yellow": (225, 210, 40),
}
SHAPES = ("square", "circle", "triangle")
OCCLUDER_COLOR = (128, 128, 128)
FULL_OCCLUSION_COVERAGE = 0.9


class SpecError(ValueError):
    """Invalid scenario; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ObjectSpec:
    shape: str
    color: str
    # keyframes (frame, cx, cy); linear interpolation between them, held at the ends
    path: list[tuple[int, float, float]]
    size: tuple[int, int] = (32, 32)
    # optional keyframes (frame, w, h) overriding ``size``
    sizes: list[tuple[int, int, int]] = field(default_factory=list)
    # optional keyframes (frame, t) blending the color toward white by t in [0, 1]
    fade: list[tuple[int, float]] = field(default_factory=list)
    texture_seed: int = 0


@dataclass
class OccluderSpec:
    start: int
    end: int
    # fixed (x, y, w, h) region, or None to follow the target with ``margin`` px
    region: tuple[int, int, int, int] | None = None
    margin: int = 6


@dataclass
class ScenarioSpec:
    name: str
    length: int
    objects: list[ObjectSpec]
    target: int = 0
    occluders: list[OccluderSpec] = field(default_factory=list)
    frame_size: tuple[int, int] = (320, 240)
    background_seed: int = 0
    seed: int = 0

    @property
    def description(self) -> str:
        obj = self.objects[self.target]
        return f"{obj.color} {obj.shape} moving {_direction(obj.path)}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        try:
            d["objects"] = [ObjectSpec(**{**o, "path": [tuple(p) for p in o["path"]],
                                          "size": tuple(o.get("size", (32, 32)))})
                            for o in d["objects"]]
            d["occluders"] = [OccluderSpec(**o) for o in d.get("occluders", [])]
            if "frame_size" in d:
                d["frame_size"] = tuple(d["frame_size"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise SpecError("spec", f"malformed scenario: {exc}") from exc

    def validate(self) -> None:
        fw, fh = self.frame_size
        if self.length < 1:
            raise SpecError("length", f"must be >= 1, got {self.length}")
        if not self.objects:
            raise SpecError("objects", "at least one object is required")
        if not 0 <= self.target < len(self.objects):
            raise SpecError("target", f"index {self.target} out of range")
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPES:
                raise SpecError(f"objects[{i}].shape", f"unknown shape {obj.shape!r}")
            if obj.color not in COLORS:
                raise SpecError(f"objects[{i}].color", f"unknown color {obj.color!r}")
            if not obj.path:
                raise SpecError(f"objects[{i}].path", "needs at least one keyframe")
            for t in range(self.length):
                x, y, w, h = _object_rect(obj, t)
                if x < 0 or y < 0 or x + w > fw or y + h > fh:
                    raise SpecError(f"objects[{i}].path", f"object leaves the frame at t={t}")
        for i, occ in enumerate(self.occluders):
            if occ.end <= occ.start:
                raise SpecError(f"occluders[{i}]", "empty interval")


def _direction(path) -> str:
    dx = path[-1][1] - path[0][1]
    dy = path[-1][2] - path[0][2]
    if max(abs(dx), abs(dy)) < 8:
        return "around"
    if abs(dx) >= abs(dy):
        return "right" if dx > 0 else "left"
    return "down" if dy > 0 else "up"


def _interp(keys, t: int):
    if t <= keys[0][0]:
        return keys[0][1:]
    for (t0, *a), (t1, *b) in zip(keys, keys[1:]):
        if t0 <= t <= t1:
            f = (t - t0) / (t1 - t0) if t1 > t0 else 1.0
            return tuple(u + f * (v - u) for u, v in zip(a, b))
    return keys[-1][1:]


def _object_rect(obj: ObjectSpec, t: int) -> tuple[int, int, int, int]:
    cx, cy = _interp(obj.path, t)
    w, h = _interp(obj.sizes, t) if obj.sizes else obj.size
    w, h = int(round(w)), int(round(h))
    return int(round(cx - w / 2.0)), int(round(cy - h / 2.0)), w, h


def object_boxes(spec: ScenarioSpec, t: int) -> list[BBox]:
    """Bounding rectangles of every object at frame ``t`` (shape-agnostic)."""
    return [BBox.from_xywh(*_object_rect(obj, t)) for obj in spec.objects]


def occluder_boxes(spec: ScenarioSpec, t: int, target_box: BBox) -> list[BBox]:
    out = []
    for occ in spec.occluders:
        if occ.start <= t < occ.end:
            if occ.region is not None:
                out.append(BBox.from_xywh(*occ.region))
            else:
                m = occ.margin
                out.append(BBox(target_box.cx, target_box.cy, target_box.w + 2 * m, target_box.h + 2 * m))
    return out


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        return ((xs - w / 2) / (w / 2)) ** 2 + ((ys - h / 2) / (h / 2)) ** 2 <= 1.0 + 1e-9
    # apex at the top center, base along the bottom row
    return np.abs(xs - w / 2) <= (w / 2) * ys / h + 0.5


def _texture(seed: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=(max(h // 4, 2), max(w // 4, 2)))
    fine = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_LINEAR)
    return 0.6 * fine + 0.4 * rng.uniform(-1.0, 1.0, size=(h, w))


def background(spec: ScenarioSpec) -> np.ndarray:
    fw, fh = spec.frame_size
    tex = _texture(spec.background_seed + 7919, fh, fw)
    rng = np.random.default_rng(spec.background_seed)
    base = rng.uniform(90, 130, size=3)
    img = base[None, None, :] + 18.0 * tex[..., None]
    return np.clip(img, 0, 255)


@dataclass
class RenderedSequence:
    frames: list[np.ndarray]
    boxes: list[BBox]
    occluded: list[bool]
    flows: list[np.ndarray]
    description: str


def _fade_color(obj: ObjectSpec, t: int) -> np.ndarray:
    col = np.asarray(COLORS[obj.color], dtype=np.float64)
    if obj.fade:
        (f,) = _interp(obj.fade, t)
        col = col + f * (255.0 - col)
    return col


def render(spec: ScenarioSpec) -> RenderedSequence:
    """Render every frame of ``spec``; pure function of the spec."""
    spec.validate()
    fw, fh = spec.frame_size
    bg = background(spec)
    frames, boxes, occluded, flows = [], [], [], []
    prev_rect = None
    for t in range(spec.length):
        img = bg.copy()
        target_rect = None
        for i, obj in enumerate(spec.objects):
            x, y, w, h = _object_rect(obj, t)
            mask = shape_mask(obj.shape, w, h)
            tex = _texture(obj.texture_seed * 1009 + i + 1, h, w)
            col = _fade_color(obj, t)
            patch = np.clip(col[None, None, :] * (1.0 + 0.22 * tex[..., None]), 0, 255)
            region = img[y:y + h, x:x + w]
            region[mask] = patch[mask]
            if i == spec.target:
                target_rect = (x, y, w, h)
        target_mask = np.zeros((fh, fw), dtype=bool)
        tx, ty, tw, th = target_rect
        target_mask[ty:ty + th, tx:tx + tw] = shape_mask(spec.objects[spec.target].shape, tw, th)
        covered = np.zeros((fh, fw), dtype=bool)
        for occ in spec.occluders:
            if not occ.start <= t < occ.end:
                continue
            if occ.region is not None:
                ox, oy, ow, oh = occ.region
            else:
                m = occ.margin
                ox, oy, ow, oh = tx - m, ty - m, tw + 2 * m, th + 2 * m
            x0, y0 = max(ox, 0), max(oy, 0)
            x1, y1 = min(ox + ow, fw), min(oy + oh, fh)
            img[y0:y1, x0:x1] = OCCLUDER_COLOR
            covered[y0:y1, x0:x1] = True
        n_target = target_mask.sum()
        occluded.append(bool((covered & target_mask).sum() > FULL_OCCLUSION_COVERAGE * n_target))
        ys, xs = np.nonzero(target_mask)
        boxes.append(BBox.from_corners(xs.min(), ys.min(), xs.max() + 1.0, ys.max() + 1.0))
        flow = np.zeros((fh, fw, 2), dtype=np.float32)
        if prev_rect is not None:
            px, py, pw, ph = prev_rect
            prev_mask = shape_mask(spec.objects[spec.target].shape, pw, ph)
            sub = flow[py:py + ph, px:px + pw]
            sub[prev_mask] = ((tx + tw / 2.0) - (px + pw / 2.0), (ty + th / 2.0) - (py + ph / 2.0))
        flows.append(flow)
        prev_rect = target_rect
        frames.append(np.round(img).astype(np.uint8))
    return RenderedSequence(frames, boxes, occluded, flows, spec.description)


def write_flow(path, flow: np.ndarray) -> None:
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flow(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = struct.unpack("<ii", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * 2:
        raise ValueError(f"{path}: expected {w}x{h}x2 floats, got {data.size}")
    return data.reshape(h, w, 2).copy()


def write_sequence(seq: RenderedSequence, out_dir, spec: ScenarioSpec | None = None) -> Path:
    """Write the OTB-style directory layout that :mod:`nltrack.evaluation` ingests."""
    from nltrack.evaluation import write_groundtruth
    from nltrack.imaging import save_frame

    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    for t, frame in enumerate(seq.frames):
        save_frame(out / "img" / f"{t + 1:04d}.png", frame)
        if t > 0:
            write_flow(out / "flow" / f"{t + 1:04d}.flo", seq.flows[t])
    write_groundtruth(out / "groundtruth_rect.txt", seq.boxes)
    (out / "full_occlusion.txt").write_text("".join(f"{int(o)}\n" for o in seq.occluded))
    (out / "nlp.txt").write_text(seq.description + "\n")
    if spec is not None:
        (out / "scenario.json").write_text(spec.to_json() + "\n")
    return out


def _bounce_path(start, velocity, length, frame_size, size):
    """Keyframes for constant-speed motion reflecting off the frame border."""
    fw, fh = frame_size
    half_w, half_h = size[0] / 2 + 2, size[1] / 2 + 2
    x, y = start
    vx, vy = velocity
    path = [(0, x, y)]
    for t in range(1, length):
        nx, ny = x + vx, y + vy
        bounced = False
        if not half_w <= nx <= fw - half_w:
            vx, bounced = -vx, True
            nx = x + vx
        if not half_h <= ny <= fh - half_h:
            vy, bounced = -vy, True
            ny = y + vy
        if bounced:
            path.append((t - 1, x, y))
        x, y = nx, ny
    path.append((length - 1, x, y))
    return path


def _pick_other(rng, options, exclude):
    return str(rng.choice([o for o in options if o != exclude]))


def clean_scenario(seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(seed)
    color = str(rng.choice(list(COLORS)))
    shape = str(rng.choice(SHAPES))
    target = ObjectSpec(shape, color, _bounce_path((80, 120), (3, 1), 80, (320, 240), (32, 32)),
                        texture_seed=seed)
    distractor = ObjectSpec(_pick_other(rng, SHAPES, shape), _pick_other(rng, list(COLORS), color),
                            [(0, 250, 60), (79, 230, 190)], texture_seed=seed + 1)
    return ScenarioSpec("clean", 80, [target, distractor], background_seed=seed, seed=seed)


def fast_motion_scenario(seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(seed + 100)
    color = str(rng.choice(list(COLORS)))
    # 17 px per frame: beyond half the siamese search margin, within the block matcher's reach
    target = ObjectSpec("square", color, _bounce_path((60, 70), (15.0, 8.0), 150, (320, 240), (32, 32)),
                        texture_seed=seed + 3)
    occ = OccluderSpec(40, 52, region=None, margin=6)
    return ScenarioSpec("fast_motion", 150, [target], occluders=[occ],
                        background_seed=seed + 11, seed=seed)


def occlusion_scenario(seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(seed + 200)
    color = str(rng.choice(list(COLORS)))
    shape = str(rng.choice(SHAPES))
    # hidden while the occluder escorts it across the frame, then revealed far away
    path = [(0, 70, 70), (40, 90, 80), (44, 90, 80), (52, 250, 170), (160, 260, 180)]
    target = ObjectSpec(shape, color, path, texture_seed=seed + 5)
    distractor = ObjectSpec(_pick_other(rng, SHAPES, shape), _pick_other(rng, list(COLORS), color),
                            [(0, 240, 60), (159, 200, 70)], texture_seed=seed + 6)
    occ = OccluderSpec(42, 57, region=None, margin=6)
    return ScenarioSpec("occlusion", 160, [target, distractor], occluders=[occ],
                        background_seed=seed + 22, seed=seed)


def distractor_scenario(seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(seed + 300)
    shape = str(rng.choice(SHAPES))
    colors = list(rng.permutation(list(COLORS)))
    target = ObjectSpec(shape, str(colors[0]), [(0, 70, 120), (99, 200, 110)], texture_seed=seed + 7)
    d1 = ObjectSpec(shape, str(colors[1]), [(0, 150, 60), (99, 270, 70)], texture_seed=seed + 8)
    d2 = ObjectSpec(shape, str(colors[2]), [(0, 260, 190), (99, 120, 190)], texture_seed=seed + 9)
    return ScenarioSpec("distractor", 100, [target, d1, d2], background_seed=seed + 33, seed=seed)


def appearance_scenario(seed: int = 0) -> ScenarioSpec:
    rng = np.random.default_rng(seed + 400)
    color = str(rng.choice(list(COLORS)))
    target = ObjectSpec("square", color, [(0, 80, 80), (119, 230, 160)],
                        sizes=[(0, 28, 28), (119, 44, 40)], fade=[(0, 0.0), (119, 0.35)],
                        texture_seed=seed + 10)
    return ScenarioSpec("appearance", 120, [target], background_seed=seed + 44, seed=seed)


SCENARIOS = {
    "clean": clean_scenario,
    "fast_motion": fast_motion_scenario,
    "occlusion": occlusion_scenario,
    "distractor": distractor_scenario,
    "appearance": appearance_scenario,
}


def standard_suite(seed: int = 0) -> list[ScenarioSpec]:
    suite = []
    for name, make in SCENARIOS.items():
        spec = make(seed)
        spec.name = f"{name}_s{seed}" if seed else name
        suite.append(spec)
    return suite


def random_training_scene(seed: int, length: int = 40) -> ScenarioSpec:
    """Short scene with a moving target and up to two differently-colored distractors."""
    rng = np.random.default_rng(seed)
    fw, fh = 320, 240
    colors = list(rng.permutation(list(COLORS)))
    objects = []
    n = int(rng.integers(1, 4))
    for i in range(n):
        w = int(rng.integers(24, 44))
        h = int(np.clip(w * rng.uniform(0.75, 1.33), 22, 46))
        start = (rng.uniform(w, fw - w), rng.uniform(h, fh - h))
        ang = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.5, 5.0)
        shape = str(rng.choice(SHAPES))
        color = str(colors[i])
        objects.append(ObjectSpec(shape, color,
                                  _bounce_path(start, (speed * math.cos(ang), speed * math.sin(ang)),
                                               length, (fw, fh), (w, h)),
                                  size=(w, h), texture_seed=seed * 7 + i))
    occluders = []
    if rng.uniform() < 0.5:
        ox, oy = int(rng.integers(0, fw - 60)), int(rng.integers(0, fh - 60))
        occluders.append(OccluderSpec(0, length, region=(ox, oy, int(rng.integers(30, 60)), int(rng.integers(30, 60)))))
    return ScenarioSpec(f"train_{seed}", length, objects, occluders=occluders,
                        background_seed=seed + 1, seed=seed)
