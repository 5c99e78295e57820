"""Random tomato plant scenes built from a repeating organ pattern.

Each internode of the main stem carries three leaves followed by one truss of
fruit. Organ traits (internode length, leaf angle/size, fruit count and size)
are drawn uniformly from the ranges in TraitConfig, so a plant is a pure
function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfigError
from .geometry import Pose6DoF

KINDS = ("stem_segment", "leaf", "tomato")
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
_LEAF_HEIGHTS = (0.3, 0.6, 0.9)  # fraction of the internode where each leaf attaches


@dataclass(frozen=True)
class TraitConfig:
    internode_count_range: tuple[int, int] = (4, 8)
    internode_length_range: tuple[float, float] = (0.05, 0.12)
    leaf_angle_range: tuple[float, float] = (30.0, 70.0)  # degrees from the stem axis
    leaf_length_range: tuple[float, float] = (0.12, 0.25)
    leaf_width_range: tuple[float, float] = (0.04, 0.08)
    tomatoes_per_truss_range: tuple[int, int] = (3, 6)
    tomato_radius_range: tuple[float, float] = (0.02, 0.04)
    stem_radius: float = 0.008

    def validate(self) -> None:
        for name in (
            "internode_count_range",
            "internode_length_range",
            "leaf_angle_range",
            "leaf_length_range",
            "leaf_width_range",
            "tomatoes_per_truss_range",
            "tomato_radius_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise InvalidConfigError(f"{name}: empty interval [{lo}, {hi}]")
            if lo <= 0:
                raise InvalidConfigError(f"{name}: values must be positive, got {lo}")
        if self.stem_radius <= 0:
            raise InvalidConfigError("stem_radius must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TraitConfig:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class OrganPrimitive:
    """One analytic organ.

    Local geometry per kind:
      tomato        sphere of `radius` centred at the pose origin
      stem_segment  cylinder of `radius`, base at the origin, extending `length` along local +z
      leaf          flat ellipse in the local xy plane, semi-axes length/2 (x) and width/2 (y)
    """

    kind: str
    pose: Pose6DoF
    dimensions: dict
    object_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown organ kind {self.kind!r}")
        if (self.object_id is not None) and self.kind != "tomato":
            raise InvalidConfigError("only tomatoes carry an object_id")
        if any(v <= 0 for v in self.dimensions.values()):
            raise InvalidConfigError(f"non-positive dimension in {self.dimensions}")

    @property
    def center(self) -> np.ndarray:
        if self.kind == "stem_segment":
            return self.pose.apply([0.0, 0.0, self.dimensions["length"] / 2])
        return self.pose.translation

    def bounding_radius(self) -> float:
        d = self.dimensions
        if self.kind == "tomato":
            return d["radius"]
        if self.kind == "stem_segment":
            return math.hypot(d["length"] / 2, d["radius"])
        return max(d["length"], d["width"]) / 2

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.dimensions
        R = self.pose.R
        if self.kind == "tomato":
            c, r = self.pose.translation, d["radius"]
            return c - r, c + r
        if self.kind == "stem_segment":
            a = self.pose.translation
            b = self.pose.apply([0.0, 0.0, d["length"]])
            axis = R[:, 2]
            ext = d["radius"] * np.sqrt(np.clip(1.0 - axis**2, 0.0, None))
            return np.minimum(a, b) - ext, np.maximum(a, b) + ext
        c = self.pose.translation
        ext = np.sqrt((R[:, 0] * d["length"] / 2) ** 2 + (R[:, 1] * d["width"] / 2) ** 2)
        return c - ext, c + ext

    def translated(self, offset) -> OrganPrimitive:
        pose = Pose6DoF(self.pose.translation + np.asarray(offset, float), self.pose.rotation)
        return OrganPrimitive(self.kind, pose, dict(self.dimensions), self.object_id)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "pose": {
                "translation": self.pose.translation.tolist(),
                "rotation_wxyz": self.pose.rotation.tolist(),
            },
            "dimensions": dict(self.dimensions),
        }
        if self.object_id is not None:
            out["object_id"] = self.object_id
        return out

    @classmethod
    def from_dict(cls, d: dict) -> OrganPrimitive:
        return cls(d["kind"], Pose6DoF.from_dict(d["pose"]), dict(d["dimensions"]), d.get("object_id"))


@dataclass
class PlantScene:
    target_plant: list[OrganPrimitive]
    background_plants: list[list[OrganPrimitive]] = field(default_factory=list)
    stem_axis: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))
    seed: int = 0
    traits: TraitConfig = field(default_factory=TraitConfig)

    @property
    def tomatoes(self) -> list[OrganPrimitive]:
        return [p for p in self.target_plant if p.kind == "tomato"]

    @property
    def n_tomatoes(self) -> int:
        return len(self.tomatoes)

    def all_primitives(self) -> list[OrganPrimitive]:
        prims = list(self.target_plant)
        for plant in self.background_plants:
            prims.extend(plant)
        return prims

    def plant_height(self) -> float:
        return max(float(p.aabb()[1][2]) for p in self.target_plant)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "traits": asdict(self.traits),
            "stem_axis": {"point": list(self.stem_axis[0]), "direction": list(self.stem_axis[1])},
            "organs": [p.to_dict() for p in self.target_plant],
            "background": [{"organs": [p.to_dict() for p in plant]} for plant in self.background_plants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PlantScene:
        axis = d.get("stem_axis", {"point": [0, 0, 0], "direction": [0, 0, 1]})
        return cls(
            target_plant=[OrganPrimitive.from_dict(o) for o in d["organs"]],
            background_plants=[[OrganPrimitive.from_dict(o) for o in b["organs"]] for b in d.get("background", [])],
            stem_axis=(tuple(axis["point"]), tuple(axis["direction"])),
            seed=int(d["seed"]),
            traits=TraitConfig.from_dict(d["traits"]),
        )


def _frame(x_axis, y_axis, origin) -> Pose6DoF:
    x = np.asarray(x_axis, float)
    x /= np.linalg.norm(x)
    y = np.asarray(y_axis, float)
    y -= x * (x @ y)
    y /= np.linalg.norm(y)
    return Pose6DoF.from_matrix(np.column_stack([x, y, np.cross(x, y)]), origin)


def _uniform(rng, interval) -> float:
    lo, hi = interval
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def generate_plant(seed: int, cfg: TraitConfig = TraitConfig(), tracked: bool = True) -> list[OrganPrimitive]:
    """Build one plant rooted at the origin with its stem along +z.

    With `tracked`, tomatoes get object ids 0..k-1 in generation order.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.internode_count_range
    n_internodes = int(rng.integers(lo, hi + 1))
    phase = float(rng.uniform(0.0, 2 * math.pi))
    up = np.array([0.0, 0.0, 1.0])
    stem_r = cfg.stem_radius

    organs: list[OrganPrimitive] = []
    next_id = 0
    z = 0.0
    for j in range(n_internodes):
        length = _uniform(rng, cfg.internode_length_range)
        organs.append(
            OrganPrimitive(
                "stem_segment",
                Pose6DoF([0.0, 0.0, z], [1.0, 0.0, 0.0, 0.0]),
                {"radius": stem_r, "length": length},
            )
        )
        base_az = phase + j * _GOLDEN_ANGLE
        for k, frac in enumerate(_LEAF_HEIGHTS):
            az = base_az + k * 2 * math.pi / 3
            angle = _uniform(rng, cfg.leaf_angle_range)
            leaf_len = _uniform(rng, cfg.leaf_length_range)
            leaf_w = _uniform(rng, cfg.leaf_width_range)
            a = math.radians(angle)
            direction = np.array([math.sin(a) * math.cos(az), math.sin(a) * math.sin(az), math.cos(a)])
            tangent = np.array([-math.sin(az), math.cos(az), 0.0])
            attach = np.array([0.0, 0.0, z + frac * length])
            center = attach + direction * (stem_r + leaf_len / 2)
            organs.append(
                OrganPrimitive(
                    "leaf",
                    _frame(direction, tangent, center),
                    {"length": leaf_len, "width": leaf_w, "angle_deg": angle},
                )
            )

        # truss hangs between the first two leaves, zig-zagging outward
        truss_az = base_az + math.pi / 3
        outward = np.array([math.cos(truss_az), math.sin(truss_az), 0.0])
        lateral = np.cross(up, outward)
        lo, hi = cfg.tomatoes_per_truss_range
        n_fruit = int(rng.integers(lo, hi + 1))
        radii = [_uniform(rng, cfg.tomato_radius_range) for _ in range(n_fruit)]
        top = z + length
        dist = stem_r + radii[0] + 0.01
        for k, r in enumerate(radii):
            if k:
                dist += 0.75 * (radii[k - 1] + r)
            side = 0.5 * r * (1 if k % 2 else -1)
            center = outward * dist + lateral * side + np.array([0.0, 0.0, top - 0.02 - 0.01 * k])
            organs.append(
                OrganPrimitive(
                    "tomato",
                    Pose6DoF(center, [1.0, 0.0, 0.0, 0.0]),
                    {"radius": r},
                    next_id if tracked else None,
                )
            )
            next_id += 1
        z = top
    return organs


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_scene(
    seed: int,
    cfg: TraitConfig = TraitConfig(),
    n_background: int = 2,
    standoff: float = 1.0,
    background_axis=(0.0, 1.0, 0.0),
    lateral_spread: float = 0.8,
) -> PlantScene:
    """Target plant at the origin plus untracked distractor plants.

    Background plants sit entirely beyond the plane at `standoff` meters along
    `background_axis`, each from a seed derived from the scene seed.
    """
    if n_background < 0:
        raise InvalidConfigError("n_background must be >= 0")
    cfg.validate()
    target = generate_plant(seed, cfg, tracked=True)
    axis = np.asarray(background_axis, float)
    axis /= np.linalg.norm(axis)
    side = np.cross([0.0, 0.0, 1.0], axis)
    if np.linalg.norm(side) < 1e-9:
        raise InvalidConfigError("background_axis must not be vertical")
    side /= np.linalg.norm(side)
    rng = np.random.default_rng(_child_seed(seed, 0))
    background = []
    for b in range(n_background):
        plant = generate_plant(_child_seed(seed, b + 1), cfg, tracked=False)
        depth = min(_axis_extent_min(p, axis) for p in plant)
        shift = standoff - depth + 0.02 + float(rng.uniform(0.0, 0.4))
        offset = axis * shift + side * float(rng.uniform(-lateral_spread, lateral_spread))
        background.append([p.translated(offset) for p in plant])
    return PlantScene(target, background, ((0.0, 0.0, 0.0), (0.0, 0.0, 1.0)), seed, cfg)


def _axis_extent_min(p: OrganPrimitive, axis: np.ndarray) -> float:
    """Smallest projection of the primitive onto `axis` (conservative, via its AABB)."""
    lo, hi = p.aabb()
    return float(np.where(axis >= 0, lo, hi) @ axis)
