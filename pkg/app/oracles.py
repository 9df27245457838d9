from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

from app.dit import DEFAULT_SAMPLING_STEPS, FitTransformer
from app.synthworld import GarmentSpec, RenderedPerson, composite_swap, render_flat_garment
from app.tryon import try_on


class TryOnOracle(Protocol):
    name: str

    def __call__(self, person: RenderedPerson, garment: GarmentSpec) -> RenderedPerson: ...


@dataclass(frozen=True)
class CompositorOracle:
    """Exact swap: re-render the person's spec with the new garment."""

    name: str = "compositor"

    def __call__(self, person: RenderedPerson, garment: GarmentSpec) -> RenderedPerson:
        return composite_swap(person, garment)


@dataclass
class CheckpointOracle:
    """
    Learned swap: the requested garment is rendered flat (a product image) and used as the reference panel.
    The garment mask is carried over from the person, whose geometry does not change.
    """

    model: FitTransformer
    name: str = "checkpoint"
    steps: int = DEFAULT_SAMPLING_STEPS
    seed: int = 0

    def __call__(self, person: RenderedPerson, garment: GarmentSpec) -> RenderedPerson:
        H, W = person.size
        flat = render_flat_garment(garment, H, W)
        fit = try_on(self.model, flat.image, person.image, steps=self.steps, seed=self.seed)
        return RenderedPerson(image=fit, garment_mask=person.garment_mask, person_spec=person.person_spec, garment_spec=garment)
