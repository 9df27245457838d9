from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from common.errors import ConfigError, ValidationError
from common.seeding import rng

DEFAULT_H = 64
DEFAULT_W = 48
PATCH = 4

# Fixed sRGB palette. Discrete colours keep "identity preserved" checks exact.
PALETTE: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("black", (20, 20, 20)),
    ("white", (235, 235, 235)),
    ("red", (220, 40, 40)),
    ("green", (40, 170, 70)),
    ("blue", (40, 80, 210)),
    ("yellow", (240, 210, 50)),
    ("orange", (240, 140, 30)),
    ("purple", (130, 60, 170)),
    ("cyan", (60, 200, 210)),
    ("pink", (240, 150, 190)),
    ("brown", (120, 80, 40)),
    ("gray", (128, 128, 128)),
)
PALETTE_NAMES = tuple(name for name, _ in PALETTE)
PALETTE_RGB = np.array([rgb for _, rgb in PALETTE], dtype=np.uint8)

PATTERNS = ("solid", "hstripe", "vstripe", "checker")
STRIPE_PERIODS = (4, 8)

TORSO_CENTER_RANGE = (0.3, 0.7)
TORSO_WIDTH_RANGE = (0.25, 0.45)
TORSO_HEIGHT_RANGE = (0.3, 0.5)
ARM_ANGLE_RANGE = (-60.0, 60.0)

# flat "product image" garment: centred rectangle of this size on a blank panel
FLAT_GARMENT_FRACTION = 0.5


def palette_color(index: int) -> tuple[int, int, int]:
    if not 0 <= index < len(PALETTE):
        raise ValidationError(f"palette index out of range: {index}")
    return PALETTE[index][1]


@dataclass(frozen=True)
class TorsoRect:
    """Normalized rectangle: centre (cx, cy), width w and height h, all as fractions of the image."""

    cx: float
    cy: float
    w: float
    h: float

    def pixel_bounds(self, H: int, W: int) -> tuple[int, int, int, int]:
        """(y0, y1, x0, x1), half-open, rounded half-up."""

        def rnd(v: float) -> int:
            return int(math.floor(v + 0.5))

        return (
            rnd((self.cy - self.h / 2) * H),
            rnd((self.cy + self.h / 2) * H),
            rnd((self.cx - self.w / 2) * W),
            rnd((self.cx + self.w / 2) * W),
        )


@dataclass(frozen=True)
class PersonSpec:
    torso_rect: TorsoRect
    head_color: int
    pants_color: int
    background_color: int
    arm_angles: tuple[float, float]
    held_item: bool
    item_color: int
    seed: int

    def __post_init__(self) -> None:
        r = self.torso_rect
        if not (0.0 <= r.cx - r.w / 2 and r.cx + r.w / 2 <= 1.0 and 0.0 <= r.cy - r.h / 2 and r.cy + r.h / 2 <= 1.0):
            raise ValidationError(f"torso_rect leaves the image: {r}")
        for name in ("head_color", "pants_color", "background_color", "item_color"):
            palette_color(getattr(self, name))
        for a in self.arm_angles:
            if not ARM_ANGLE_RANGE[0] <= a <= ARM_ANGLE_RANGE[1]:
                raise ValidationError(f"arm angle out of range: {a}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["arm_angles"] = list(self.arm_angles)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PersonSpec":
        return cls(
            torso_rect=TorsoRect(**d["torso_rect"]),
            head_color=int(d["head_color"]),
            pants_color=int(d["pants_color"]),
            background_color=int(d["background_color"]),
            arm_angles=(float(d["arm_angles"][0]), float(d["arm_angles"][1])),
            held_item=bool(d["held_item"]),
            item_color=int(d["item_color"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class GarmentSpec:
    pattern: str
    color_a: int
    color_b: int
    stripe_period: int = 4

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValidationError(f"unknown garment pattern: {self.pattern}")
        palette_color(self.color_a)
        palette_color(self.color_b)
        if self.pattern != "solid" and self.color_a == self.color_b:
            raise ValidationError("patterned garments need color_a != color_b")
        if self.stripe_period not in STRIPE_PERIODS:
            raise ValidationError(f"stripe_period must be one of {STRIPE_PERIODS}, got {self.stripe_period}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GarmentSpec":
        return cls(
            pattern=str(d["pattern"]),
            color_a=int(d["color_a"]),
            color_b=int(d["color_b"]),
            stripe_period=int(d["stripe_period"]),
        )


@dataclass(frozen=True, eq=False)
class RenderedPerson:
    """
    image: H×W×3 float32 in [0,1]; garment_mask: H×W float32 in {0,1}.
    person_spec is None for a flat garment-only panel (garment-to-person reference).
    """

    image: np.ndarray
    garment_mask: np.ndarray
    person_spec: PersonSpec | None
    garment_spec: GarmentSpec

    @property
    def size(self) -> tuple[int, int]:
        return int(self.image.shape[0]), int(self.image.shape[1])

    @property
    def is_flat(self) -> bool:
        return self.person_spec is None

    def same_pixels(self, other: "RenderedPerson") -> bool:
        return np.array_equal(self.image, other.image) and np.array_equal(self.garment_mask, other.garment_mask)


def sample_specs(rng_seed: int) -> tuple[PersonSpec, GarmentSpec]:
    g = rng(rng_seed)

    torso = TorsoRect(
        cx=float(g.uniform(*TORSO_CENTER_RANGE)),
        cy=float(g.uniform(*TORSO_CENTER_RANGE)),
        w=float(g.uniform(*TORSO_WIDTH_RANGE)),
        h=float(g.uniform(*TORSO_HEIGHT_RANGE)),
    )
    background, head, pants = (int(c) for c in g.choice(len(PALETTE), size=3, replace=False))
    arms = (float(g.uniform(*ARM_ANGLE_RANGE)), float(g.uniform(*ARM_ANGLE_RANGE)))
    held = bool(g.random() < 0.5)
    # the item never shares a colour with anything it can be drawn over
    item = int(g.choice([c for c in range(len(PALETTE)) if c not in (background, head, pants)]))

    person = PersonSpec(
        torso_rect=torso,
        head_color=head,
        pants_color=pants,
        background_color=background,
        arm_angles=arms,
        held_item=held,
        item_color=item,
        seed=int(rng_seed),
    )

    pattern = PATTERNS[int(g.integers(len(PATTERNS)))]
    color_a, color_b = (int(c) for c in g.choice(len(PALETTE), size=2, replace=False))
    if pattern == "solid":
        color_b = color_a
    garment = GarmentSpec(
        pattern=pattern,
        color_a=color_a,
        color_b=color_b,
        stripe_period=STRIPE_PERIODS[int(g.integers(len(STRIPE_PERIODS)))],
    )
    return person, garment


def _check_dims(H: int, W: int, patch: int) -> None:
    if H <= 0 or W <= 0 or H % patch != 0 or W % patch != 0:
        raise ConfigError(f"image size {H}x{W} must be positive multiples of the patch size {patch}")


def torso_mask(person: PersonSpec, H: int, W: int) -> np.ndarray:
    y0, y1, x0, x1 = person.torso_rect.pixel_bounds(H, W)
    mask = np.zeros((H, W), dtype=np.float32)
    mask[y0:y1, x0:x1] = 1.0
    return mask


def _garment_pattern(garment: GarmentSpec, h: int, w: int) -> np.ndarray:
    """h×w×3 uint8 tile, pattern phase anchored at the tile's top-left corner."""
    yy, xx = np.mgrid[0:h, 0:w]
    p = garment.stripe_period
    if garment.pattern == "solid":
        use_b = np.zeros((h, w), dtype=bool)
    elif garment.pattern == "hstripe":
        use_b = (yy // p) % 2 == 1
    elif garment.pattern == "vstripe":
        use_b = (xx // p) % 2 == 1
    else:
        use_b = (yy // p + xx // p) % 2 == 1

    tile = np.empty((h, w, 3), dtype=np.uint8)
    tile[...] = PALETTE_RGB[garment.color_a]
    tile[use_b] = PALETTE_RGB[garment.color_b]
    return tile


def _item_box(person: PersonSpec, hand: tuple[float, float], H: int, W: int) -> tuple[int, int, int, int]:
    """Item square near the hand, pushed sideways out of the torso so it stays visible."""
    size = max(2, W // 16)
    y0, y1, x0, x1 = person.torso_rect.pixel_bounds(H, W)

    ix = int(round(hand[0])) - size // 2
    iy = int(round(hand[1])) - size // 2
    ix = min(max(ix, 0), W - size)
    iy = min(max(iy, 0), H - size)

    overlaps = ix < x1 and ix + size > x0 and iy < y1 and iy + size > y0
    if overlaps:
        if x1 + size <= W:
            ix = x1
        elif x0 - size >= 0:
            ix = x0 - size
        else:
            raise ConfigError(f"image width {W} leaves no room for the held item")
    return ix, iy, ix + size, iy + size


def render(person: PersonSpec, garment: GarmentSpec, H: int = DEFAULT_H, W: int = DEFAULT_W, patch: int = PATCH) -> RenderedPerson:
    """
    Draw order: background, pants, arms, head, held item, garment.
    The garment is painted last over the torso rectangle, so everything outside the mask is independent of it.
    """
    _check_dims(H, W, patch)
    y0, y1, x0, x1 = person.torso_rect.pixel_bounds(H, W)

    canvas = Image.new("RGB", (W, H), palette_color(person.background_color))
    draw = ImageDraw.Draw(canvas)

    # pants under the torso
    inset = (x1 - x0) // 6
    if y1 < H:
        draw.rectangle([x0 + inset, y1, x1 - 1 - inset, H - 1], fill=palette_color(person.pants_color))

    # arms hang from the shoulders; 0° is straight down, positive swings outward
    skin = palette_color(person.head_color)
    arm_len = 0.35 * H
    thickness = max(1, W // 24)
    hands: list[tuple[float, float]] = []
    for side, angle in zip((-1.0, 1.0), person.arm_angles):
        sx = float(x0) if side < 0 else float(x1 - 1)
        sy = float(y0 + 1)
        rad = math.radians(angle)
        hx = sx + side * math.sin(rad) * arm_len
        hy = sy + math.cos(rad) * arm_len
        draw.line([(sx, sy), (hx, hy)], fill=skin, width=thickness)
        hands.append((hx, hy))

    # head sits on top of the torso
    r = max(2, int(round(0.08 * H)))
    hcx = (x0 + x1 - 1) / 2.0
    draw.ellipse([hcx - r, y0 - 2 * r, hcx + r, y0], fill=skin)

    if person.held_item:
        bx0, by0, bx1, by1 = _item_box(person, hands[1], H, W)
        draw.rectangle([bx0, by0, bx1 - 1, by1 - 1], fill=palette_color(person.item_color))

    pixels = np.asarray(canvas, dtype=np.uint8).copy()
    pixels[y0:y1, x0:x1] = _garment_pattern(garment, y1 - y0, x1 - x0)

    image = pixels.astype(np.float32) / np.float32(255.0)
    return RenderedPerson(image=image, garment_mask=torso_mask(person, H, W), person_spec=person, garment_spec=garment)


def render_flat_garment(garment: GarmentSpec, H: int = DEFAULT_H, W: int = DEFAULT_W, patch: int = PATCH) -> RenderedPerson:
    """Garment alone, centred on a blank (all-zero) panel: the product-image reference."""
    _check_dims(H, W, patch)
    gh = int(round(H * FLAT_GARMENT_FRACTION))
    gw = int(round(W * FLAT_GARMENT_FRACTION))
    y0 = (H - gh) // 2
    x0 = (W - gw) // 2

    pixels = np.zeros((H, W, 3), dtype=np.uint8)
    pixels[y0 : y0 + gh, x0 : x0 + gw] = _garment_pattern(garment, gh, gw)
    mask = np.zeros((H, W), dtype=np.float32)
    mask[y0 : y0 + gh, x0 : x0 + gw] = 1.0

    image = pixels.astype(np.float32) / np.float32(255.0)
    return RenderedPerson(image=image, garment_mask=mask, person_spec=None, garment_spec=garment)


def composite_swap(target: RenderedPerson, garment: GarmentSpec) -> RenderedPerson:
    """Exact try-on: re-render the target's person spec wearing `garment`."""
    H, W = target.size
    if target.person_spec is None:
        return render_flat_garment(garment, H, W)
    return render(target.person_spec, garment, H, W)

