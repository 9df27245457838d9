from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from tqdm.auto import tqdm

from app.synthworld import DEFAULT_H, DEFAULT_W, GarmentSpec, PersonSpec, RenderedPerson, render, sample_specs
from common.errors import ArtifactIOError, ValidationError
from common.imageio import load_mask, load_rgb, save_gray, save_rgb, suffix_for
from common.jsonl import read_records, write_records
from common.seeding import derive_seed

MANIFEST_NAME = "manifest.jsonl"
IMAGES_DIR = "images"
MASKS_DIR = "masks"


@dataclass
class PersonRecord:
    id: str
    image_path: str  # relative to the manifest's directory
    mask_path: str
    person: PersonSpec
    garment: GarmentSpec

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "person",
            "id": self.id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "spec": {"person": self.person.to_dict(), "garment": self.garment.to_dict()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PersonRecord":
        spec = d["spec"]
        return cls(
            id=str(d["id"]),
            image_path=str(d["image_path"]),
            mask_path=str(d["mask_path"]),
            person=PersonSpec.from_dict(spec["person"]),
            garment=GarmentSpec.from_dict(spec["garment"]),
        )


@dataclass
class Manifest:
    root: Path
    header: dict[str, Any]
    records: list[PersonRecord] = field(default_factory=list)

    def load_person(self, rec: PersonRecord) -> RenderedPerson:
        return RenderedPerson(
            image=load_rgb(self.root / rec.image_path),
            garment_mask=load_mask(self.root / rec.mask_path),
            person_spec=rec.person,
            garment_spec=rec.garment,
        )


def generate_dataset(
    n_pairs: int,
    seed: int,
    out_dir: str | Path,
    *,
    H: int = DEFAULT_H,
    W: int = DEFAULT_W,
    image_format: str = "png",
    provenance: dict[str, Any] | None = None,
) -> Manifest:
    """
    Writes n_pairs (person image, garment mask, spec) records plus manifest.jsonl.
    Record i is rendered from sample_specs(derive_seed(seed, i)), so any slice of the seed space can be
    generated independently.
    """
    if n_pairs < 0:
        raise ValidationError(f"n_pairs must be >= 0, got {n_pairs}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(out, e) from e

    img_suffix = suffix_for(image_format)
    mask_suffix = suffix_for(image_format, gray=True)
    header = {
        "kind": "header",
        "n_pairs": n_pairs,
        "seed": seed,
        "H": H,
        "W": W,
        "image_format": image_format,
        "flags": provenance or {},
    }

    records: list[PersonRecord] = []
    for i in tqdm(range(n_pairs), desc="synth", disable=n_pairs == 0):
        person, garment = sample_specs(derive_seed(seed, i))
        rp = render(person, garment, H, W)
        rid = f"p{i:06d}"
        image_path = f"{IMAGES_DIR}/{rid}{img_suffix}"
        mask_path = f"{MASKS_DIR}/{rid}{mask_suffix}"
        save_rgb(out / image_path, rp.image, image_format)
        save_gray(out / mask_path, rp.garment_mask, image_format)
        records.append(PersonRecord(id=rid, image_path=image_path, mask_path=mask_path, person=person, garment=garment))

    write_records(out / MANIFEST_NAME, [header] + [r.to_dict() for r in records])
    return Manifest(root=out, header=header, records=records)


def read_manifest(path: str | Path) -> Manifest:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    rows = read_records(p)
    if not rows or rows[0].get("kind") != "header":
        raise ValidationError(f"{p}: first record must be the manifest header")

    records: list[PersonRecord] = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            records.append(PersonRecord.from_dict(row))
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{p}:{lineno}: bad person record ({e})") from e
    return Manifest(root=p.parent, header=rows[0], records=records)
