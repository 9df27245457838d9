"""
Pseudo-triplet construction.

For two persons m, n wearing their own garments (P_mm, P_nn), a try-on oracle produces P_mn (m in G_n) and
P_nm (n in G_m). Each pair then yields four (reference, target, ground truth) triplets in a fixed order:
    (P_nn, P_mm, P_mn), (P_mm, P_nn, P_nm), (P_nm, P_mn, P_mm), (P_mn, P_nm, P_nn)
The last two use only oracle outputs as inputs and real persons as ground truth; they form the paired test split.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from tqdm.auto import tqdm

from app.metrics import ssim
from app.oracles import TryOnOracle
from app.synthworld import GarmentSpec, PersonSpec, RenderedPerson, render_flat_garment
from common.errors import ArtifactIOError, TryOnError, ValidationError
from common.imageio import load_mask, load_rgb, save_gray, save_rgb, suffix_for
from common.jsonl import read_records, write_records
from common.seeding import rng
from worker.synth_gen import Manifest

TRIPLET_MANIFEST_NAME = "triplets.jsonl"

SLOTS = ("nn_mm_mn", "mm_nn_nm", "nm_mn_mm", "mn_nm_nn")
FLAT_SLOTS = ("Gn_mm_mn", "Gm_nn_nm")
PAIRED_EVAL_SLOTS = ("nm_mn_mm", "mn_nm_nn")

Predicate = Callable[["Triplet"], bool]


@dataclass(frozen=True, eq=False)
class Triplet:
    reference: RenderedPerson
    target: RenderedPerson
    ground_truth: RenderedPerson
    pair: tuple[str, str]
    slot: str

    @property
    def kind(self) -> str:
        return "g2p" if self.reference.is_flat else "p2p"

    def check_invariants(self) -> None:
        if self.ground_truth.person_spec != self.target.person_spec:
            raise ValidationError(f"triplet {self.pair}/{self.slot}: ground truth is not the target person")
        if self.ground_truth.garment_spec != self.reference.garment_spec:
            raise ValidationError(f"triplet {self.pair}/{self.slot}: ground truth does not wear the reference garment")


def _swap(oracle: TryOnOracle, person: RenderedPerson, garment: GarmentSpec, pair: tuple[str, str]) -> RenderedPerson:
    try:
        return oracle(person, garment)
    except Exception as e:
        raise TryOnError(f"oracle '{getattr(oracle, 'name', oracle)}' failed for pair ({pair[0]}, {pair[1]}): {e}") from e


def build_triplets(
    pair_m: RenderedPerson,
    pair_n: RenderedPerson,
    oracle: TryOnOracle,
    pair_ids: tuple[str, str] = ("m", "n"),
) -> list[Triplet]:
    p_mm, p_nn = pair_m, pair_n
    p_mn = _swap(oracle, p_mm, p_nn.garment_spec, pair_ids)
    p_nm = _swap(oracle, p_nn, p_mm.garment_spec, pair_ids)

    order = (
        (p_nn, p_mm, p_mn),
        (p_mm, p_nn, p_nm),
        (p_nm, p_mn, p_mm),
        (p_mn, p_nm, p_nn),
    )
    return [Triplet(reference=r, target=t, ground_truth=g, pair=pair_ids, slot=s) for (r, t, g), s in zip(order, SLOTS)]


def flat_triplets(triplets: list[Triplet]) -> list[Triplet]:
    """Garment-to-person companions of a pair's first two triplets: the reference becomes the flat garment."""
    out = []
    for trip, slot in zip(triplets[:2], FLAT_SLOTS):
        H, W = trip.target.size
        flat = render_flat_garment(trip.reference.garment_spec, H, W)
        out.append(Triplet(reference=flat, target=trip.target, ground_truth=trip.ground_truth, pair=trip.pair, slot=slot))
    return out


def paired_eval_triplets(triplets: list[Triplet]) -> list[Triplet]:
    return [t for t in triplets if t.slot in PAIRED_EVAL_SLOTS]


def accept_all(_: Triplet) -> bool:
    return True


def cycle_predicate(oracle: TryOnOracle, threshold: float = 0.9) -> Predicate:
    """Swap the target's own garment back onto the ground truth; keep the triplet if it returns to the target."""

    def predicate(trip: Triplet) -> bool:
        back = oracle(trip.ground_truth, trip.target.garment_spec)
        return ssim(back.image, trip.target.image) >= threshold

    return predicate


def filter_triplets(triplets: list[Triplet], predicate: Predicate = accept_all) -> tuple[list[Triplet], list[Triplet]]:
    kept: list[Triplet] = []
    rejected: list[Triplet] = []
    for trip in triplets:
        (kept if predicate(trip) else rejected).append(trip)
    return kept, rejected


# ---- manifest ------------------------------------------------------------------


@dataclass(frozen=True)
class PanelRef:
    image_path: str
    mask_path: str
    person: dict[str, Any] | None
    garment: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"image_path": self.image_path, "mask_path": self.mask_path, "person": self.person, "garment": self.garment}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PanelRef":
        return cls(image_path=str(d["image_path"]), mask_path=str(d["mask_path"]), person=d.get("person"), garment=dict(d["garment"]))


@dataclass(frozen=True)
class TripletRecord:
    id: str
    pair: tuple[str, str]
    slot: str
    kind: str
    reference: PanelRef
    target: PanelRef
    ground_truth: PanelRef

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "triplet",
            "id": self.id,
            "pair": list(self.pair),
            "slot": self.slot,
            "task": self.kind,
            "reference": self.reference.to_dict(),
            "target": self.target.to_dict(),
            "ground_truth": self.ground_truth.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TripletRecord":
        return cls(
            id=str(d["id"]),
            pair=(str(d["pair"][0]), str(d["pair"][1])),
            slot=str(d["slot"]),
            kind=str(d["task"]),
            reference=PanelRef.from_dict(d["reference"]),
            target=PanelRef.from_dict(d["target"]),
            ground_truth=PanelRef.from_dict(d["ground_truth"]),
        )

    def paths(self) -> list[str]:
        return [p for ref in (self.reference, self.target, self.ground_truth) for p in (ref.image_path, ref.mask_path)]


@dataclass
class TripletManifest:
    root: Path
    oracle: str
    seed: int
    filter_stats: dict[str, Any] = field(default_factory=dict)
    flags: dict[str, Any] = field(default_factory=dict)
    records: list[TripletRecord] = field(default_factory=list)

    def header(self) -> dict[str, Any]:
        return {
            "kind": "header",
            "oracle": self.oracle,
            "seed": self.seed,
            "count": len(self.records),
            "filter": self.filter_stats,
            "flags": self.flags,
        }

    def load_panel(self, ref: PanelRef) -> RenderedPerson:
        return RenderedPerson(
            image=load_rgb(self.root / ref.image_path),
            garment_mask=load_mask(self.root / ref.mask_path),
            person_spec=PersonSpec.from_dict(ref.person) if ref.person is not None else None,
            garment_spec=GarmentSpec.from_dict(ref.garment),
        )

    def load_triplet(self, rec: TripletRecord) -> Triplet:
        return Triplet(
            reference=self.load_panel(rec.reference),
            target=self.load_panel(rec.target),
            ground_truth=self.load_panel(rec.ground_truth),
            pair=rec.pair,
            slot=rec.slot,
        )


def write_manifest(path: str | Path, manifest: TripletManifest) -> Path:
    p = Path(path)
    if p.suffix != ".jsonl":
        p = p / TRIPLET_MANIFEST_NAME
    return write_records(p, [manifest.header()] + [r.to_dict() for r in manifest.records])


def read_manifest(path: str | Path, *, check_files: bool = True) -> TripletManifest:
    p = Path(path)
    if p.is_dir():
        p = p / TRIPLET_MANIFEST_NAME
    rows = read_records(p)
    if not rows or rows[0].get("kind") != "header":
        raise ValidationError(f"{p}:1: first record must be the triplet manifest header")
    head = rows[0]

    records: list[TripletRecord] = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            records.append(TripletRecord.from_dict(row))
        except (KeyError, TypeError, IndexError, ValueError) as e:
            raise ValidationError(f"{p}:{lineno}: bad triplet record ({e})") from e

    if int(head.get("count", len(records))) != len(records):
        raise ValidationError(f"{p}: header count {head.get('count')} does not match {len(records)} records")

    manifest = TripletManifest(
        root=p.parent,
        oracle=str(head.get("oracle", "")),
        seed=int(head.get("seed", 0)),
        filter_stats=dict(head.get("filter") or {}),
        flags=dict(head.get("flags") or {}),
        records=records,
    )
    if check_files:
        missing = sorted({rel for r in records for rel in r.paths() if not (manifest.root / rel).exists()})
        if missing:
            raise ValidationError(f"{p}: manifest references missing files: {', '.join(missing)}")
    return manifest


# ---- job -----------------------------------------------------------------------


def _person_key(trip_person: RenderedPerson, ids: dict[int, str]) -> str:
    return ids[id(trip_person)]


def prepare_triplets(
    persons: Manifest,
    oracle: TryOnOracle,
    out_dir: str | Path,
    *,
    seed: int = 0,
    predicate: Predicate = accept_all,
    filter_name: str = "none",
    flat_ratio: float = 0.0,
    paired_eval: bool = False,
    image_format: str = "png",
    flags: dict[str, Any] | None = None,
) -> TripletManifest:
    """
    Pairs the person records at random (seeded), builds four triplets per pair, optionally adds garment-to-person
    triplets for a fraction of pairs, filters, writes every distinct panel once, and writes the manifest.
    """
    if not 0.0 <= flat_ratio <= 1.0:
        raise ValidationError(f"flat_ratio must be in [0, 1], got {flat_ratio}")
    out = Path(out_dir)
    g = rng(seed)
    order = g.permutation(len(persons.records))
    pairs = [(persons.records[order[i]], persons.records[order[i + 1]]) for i in range(0, len(order) - 1, 2)]

    img_suffix = suffix_for(image_format)
    mask_suffix = suffix_for(image_format, gray=True)
    written: dict[str, PanelRef] = {}

    def panel(name: str, person: RenderedPerson) -> PanelRef:
        if name not in written:
            image_path = f"panels/{name}{img_suffix}"
            mask_path = f"panels/{name}_mask{mask_suffix}"
            save_rgb(out / image_path, person.image, image_format)
            save_gray(out / mask_path, person.garment_mask, image_format)
            written[name] = PanelRef(
                image_path=image_path,
                mask_path=mask_path,
                person=person.person_spec.to_dict() if person.person_spec is not None else None,
                garment=person.garment_spec.to_dict(),
            )
        return written[name]

    records: list[TripletRecord] = []
    n_built = 0
    n_rejected = 0
    for pair_idx, (rec_m, rec_n) in enumerate(tqdm(pairs, desc="dataprep", disable=not pairs)):
        ids = (rec_m.id, rec_n.id)
        p_mm = persons.load_person(rec_m)
        p_nn = persons.load_person(rec_n)
        trips = build_triplets(p_mm, p_nn, oracle, pair_ids=ids)

        # stable file names per panel identity
        m, n = ids
        names = {
            id(trips[0].reference): n,  # P_nn
            id(trips[0].target): m,  # P_mm
            id(trips[0].ground_truth): f"{m}_in_{n}",  # P_mn
            id(trips[1].ground_truth): f"{n}_in_{m}",  # P_nm
        }

        if flat_ratio > 0 and rng(seed, pair_idx).random() < flat_ratio:
            flats = flat_triplets(trips)
            names[id(flats[0].reference)] = f"flat_{n}"
            names[id(flats[1].reference)] = f"flat_{m}"
            trips = trips + flats
        if paired_eval:
            trips = paired_eval_triplets(trips)

        n_built += len(trips)
        kept, rejected = filter_triplets(trips, predicate)
        n_rejected += len(rejected)

        for trip in kept:
            records.append(
                TripletRecord(
                    id=f"{m}-{n}-{trip.slot}",
                    pair=ids,
                    slot=trip.slot,
                    kind=trip.kind,
                    reference=panel(_person_key(trip.reference, names), trip.reference),
                    target=panel(_person_key(trip.target, names), trip.target),
                    ground_truth=panel(_person_key(trip.ground_truth, names), trip.ground_truth),
                )
            )

    manifest = TripletManifest(
        root=out,
        oracle=getattr(oracle, "name", type(oracle).__name__),
        seed=seed,
        filter_stats={"name": filter_name, "built": n_built, "kept": len(records), "rejected": n_rejected},
        flags=flags or {},
        records=records,
    )
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(out, e) from e
    write_manifest(out / TRIPLET_MANIFEST_NAME, manifest)
    return manifest
