"""Fish taxonomy database, consumability verdicts and dataset manifests."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    ConfigError,
    DuplicateSpeciesError,
    GenusNotFoundError,
    MissingHeaderError,
    StratificationError,
    UnknownCategoryError,
    ValidationError,
)
from .tensor import Rng

CSV_HEADER = ["ID", "Order", "Family", "Genus", "Species", "Occurrence", "Foreign name", "Local Name", "Description", "Category"]
VERDICT_SCHEMA = "mmnet.verdict/1"
MANIFEST_SCHEMA = "mmnet.manifest/1"
SAMPLE_CSV = Path(__file__).with_name("data") / "fish_sample.csv"


class Category(str, Enum):
    COMMERCIAL = "Commercial"
    DANGER = "Danger"


class Verdict(str, Enum):
    CONSUMABLE = "Consumable"
    UNCONSUMABLE = "Unconsumable"


class Basis(str, Enum):
    SPECIES = "species-match"
    GENUS = "genus-fallback"


VERDICT_OF = {Category.COMMERCIAL: Verdict.CONSUMABLE, Category.DANGER: Verdict.UNCONSUMABLE}


@dataclass(frozen=True)
class FishRecord:
    id: int
    order: str
    family: str
    genus: str
    species: str
    occurrence: str = ""
    foreign_name: str = ""
    local_name: str = ""
    description: str = ""
    category: Category = Category.COMMERCIAL


@dataclass(frozen=True)
class ConsumabilityVerdict:
    label: Verdict
    basis: Basis
    matched_ids: tuple[int, ...]
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class GenusAmbiguity:
    """A genus whose species disagree on category; no verdict is issued."""

    genus: str
    by_category: dict

    def __str__(self) -> str:
        parts = "; ".join(f"{c.value}: {', '.join(s)}" for c, s in self.by_category.items())
        return f"genus {self.genus} is mixed ({parts})"


def _norm(name: str) -> str:
    return " ".join(name.split()).lower()


def parse_category(text: str) -> Category:
    for c in Category:
        if text.strip().lower() == c.value.lower():
            return c
    raise UnknownCategoryError(f"unknown category {text!r}; expected Commercial or Danger")


def ingest_csv(path) -> list[FishRecord]:
    """Read a taxonomy CSV; blank Order/Family/Genus cells inherit from the row above."""
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [h for h in CSV_HEADER if h not in header]
        if missing:
            raise MissingHeaderError(f"CSV is missing column(s): {', '.join(missing)}")
        records: list[FishRecord] = []
        seen: set[str] = set()
        carry = {"Order": "", "Family": "", "Genus": ""}
        for line_no, raw in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
            species = row["Species"]
            if not species:
                raise ValidationError(f"line {line_no}: empty species")
            for col in carry:
                if row[col]:
                    carry[col] = row[col]
                elif not carry[col]:
                    raise ValidationError(f"line {line_no}: blank {col} with nothing above to inherit")
            key = _norm(species)
            if key in seen:
                raise DuplicateSpeciesError(f"line {line_no}: duplicate species {species!r}")
            seen.add(key)
            records.append(
                FishRecord(
                    id=int(row["ID"]),
                    order=carry["Order"],
                    family=carry["Family"],
                    genus=carry["Genus"],
                    species=species,
                    occurrence=row["Occurrence"],
                    foreign_name=row["Foreign name"],
                    local_name=row["Local Name"],
                    description=row["Description"],
                    category=parse_category(row["Category"]),
                )
            )
    return records


class FishDB:
    """Read-only species and genus index over a list of records."""

    def __init__(self, records: Iterable[FishRecord]):
        self.records = list(records)
        if not self.records:
            raise ValidationError("fish database is empty")
        self._species = {_norm(r.species): r for r in self.records}
        self._genus: dict[str, list[FishRecord]] = defaultdict(list)
        for r in self.records:
            self._genus[_norm(r.genus)].append(r)

    @classmethod
    def from_csv(cls, path) -> "FishDB":
        return cls(ingest_csv(path))

    def __len__(self) -> int:
        return len(self.records)

    def species_record(self, species: str) -> Optional[FishRecord]:
        return self._species.get(_norm(species))

    def has_genus(self, genus: str) -> bool:
        return _norm(genus) in self._genus

    def genus_of(self, species: str) -> str:
        rec = self.species_record(species)
        return rec.genus if rec else species.split()[0]


def lookup_species(db: FishDB, species: str, confidence: float = 1.0) -> Optional[ConsumabilityVerdict]:
    """Verdict for an exact species match, or ``None`` when the species is unknown."""
    rec = db.species_record(species)
    if rec is None:
        return None
    return ConsumabilityVerdict(VERDICT_OF[rec.category], Basis.SPECIES, (rec.id,), confidence)


def lookup_genus(db: FishDB, genus: str, confidence: float = 1.0) -> Union[ConsumabilityVerdict, GenusAmbiguity]:
    members = db._genus.get(_norm(genus))
    if not members:
        raise GenusNotFoundError(f"genus {genus!r} is not in the database")
    cats = {r.category for r in members}
    if len(cats) > 1:
        split = {c: tuple(r.species for r in members if r.category is c) for c in Category if c in cats}
        return GenusAmbiguity(members[0].genus, split)
    (cat,) = cats
    return ConsumabilityVerdict(VERDICT_OF[cat], Basis.GENUS, tuple(r.id for r in members), confidence)


def resolve(db: FishDB, name: str, confidence: float = 1.0, granularity: str = "species") -> Union[ConsumabilityVerdict, GenusAmbiguity]:
    """Species lookup with genus fallback; ``granularity="genus"`` treats ``name`` as a genus."""
    if granularity == "species":
        v = lookup_species(db, name, confidence)
        if v is not None:
            return v
        return lookup_genus(db, name.split()[0], confidence)
    if granularity == "genus":
        return lookup_genus(db, name, confidence)
    raise ValueError(f"granularity must be 'species' or 'genus', got {granularity!r}")


def verdict_json(name: str, verdict: ConsumabilityVerdict) -> str:
    return json.dumps(
        {
            "schema": VERDICT_SCHEMA,
            "species": name,
            "confidence": round(float(verdict.confidence), 6),
            "verdict": verdict.label.value,
            "basis": verdict.basis.value,
        }
    )


class ConsumabilityPipeline:
    """Image -> class prediction -> consumability verdict.

    Every class name the model can emit is resolved against the database at
    construction, so a mismatch surfaces here and never at query time.
    """

    def __init__(self, spec, weights, class_names: Sequence[str], db: FishDB, granularity: str = "species"):
        from .model import check_bound

        if spec.num_classes is not None and spec.num_classes != len(class_names):
            raise ConfigError(f"model has {spec.num_classes} outputs but {len(class_names)} class names were given")
        check_bound(spec, weights)
        self.spec, self.weights, self.db = spec, weights, db
        self.class_names = list(class_names)
        self.granularity = granularity
        self._verdicts: dict[str, ConsumabilityVerdict] = {}
        problems = []
        for name in self.class_names:
            try:
                v = resolve(db, name, 1.0, granularity)
            except GenusNotFoundError:
                problems.append(f"{name}: not in database")
                continue
            if isinstance(v, GenusAmbiguity):
                problems.append(str(v))
            else:
                self._verdicts[name] = v
        if problems:
            raise ConfigError("model classes not resolvable in the database: " + "; ".join(problems))

    def classify(self, images: np.ndarray) -> list[tuple[str, ConsumabilityVerdict]]:
        from .model import forward

        probs = forward(self.spec, self.weights, images, "infer")
        out = []
        for row in probs:
            k = int(np.argmax(row))
            name = self.class_names[k]
            base = self._verdicts[name]
            out.append((name, ConsumabilityVerdict(base.label, base.basis, base.matched_ids, float(np.clip(row[k], 0.0, 1.0)))))
        return out


def classify_pipeline(image: np.ndarray, pipeline: ConsumabilityPipeline) -> tuple[str, ConsumabilityVerdict]:
    return pipeline.classify(image[None] if image.ndim == 3 else image)[0]


# -- manifests and splitting -------------------------------------------------


@dataclass
class DatasetManifest:
    paths: list[str]
    labels: list[str]
    split: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.paths) != len(self.labels):
            raise ValidationError("paths and labels differ in length")
        if len(set(self.paths)) != len(self.paths):
            raise ValidationError("duplicate path in manifest")

    def __len__(self) -> int:
        return len(self.paths)

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(self.labels).items()))

    def subset(self, which: str) -> "DatasetManifest":
        keep = [i for i, p in enumerate(self.paths) if self.split.get(p) == which]
        return DatasetManifest([self.paths[i] for i in keep], [self.labels[i] for i in keep])

    def remap_to_genus(self, db: FishDB) -> "DatasetManifest":
        return DatasetManifest(list(self.paths), [db.genus_of(l) for l in self.labels], dict(self.split))

    def to_json(self) -> str:
        items = [{"path": p, "label": l, "split": self.split.get(p)} for p, l in zip(self.paths, self.labels)]
        return json.dumps({"schema": MANIFEST_SCHEMA, "items": items}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        items = d["items"]
        m = cls([i["path"] for i in items], [i["label"] for i in items])
        m.split = {i["path"]: i["split"] for i in items if i.get("split")}
        return m

    @classmethod
    def from_image_tree(cls, root) -> "DatasetManifest":
        from .augment import scan_image_tree

        pairs = scan_image_tree(root)
        return cls([str(p) for p, _ in pairs], [c for _, c in pairs])


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, ratio: float) -> tuple[int, int]:
    if not 0 < ratio < 1:
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    train = round_half_up(n * ratio)
    return train, n - train


def stratified_quotas(class_counts: dict[str, int], ratio: float) -> dict[str, int]:
    """Per-class train counts summing to ``round(N * ratio)`` (largest remainder).

    Each class keeps at least one item on each side of the split.
    """
    total = sum(class_counts.values())
    target, _ = split_sizes(total, ratio)
    names = sorted(class_counts)
    exact = {c: class_counts[c] * ratio for c in names}
    quota = {c: min(max(int(math.floor(exact[c])), 1), class_counts[c] - 1) for c in names}
    diff = target - sum(quota.values())
    by_remainder = sorted(names, key=lambda c: (-(exact[c] - math.floor(exact[c])), c))
    while diff:
        moved = False
        order = by_remainder if diff > 0 else list(reversed(by_remainder))
        for c in order:
            if diff > 0 and quota[c] < class_counts[c] - 1:
                quota[c] += 1
                diff -= 1
                moved = True
            elif diff < 0 and quota[c] > 1:
                quota[c] -= 1
                diff += 1
                moved = True
            if not diff:
                break
        if not moved:
            break
    return quota


def dataset_split(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    if not 0 < ratio < 1:
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    counts = manifest.counts()
    singletons = [c for c, n in counts.items() if n < 2]
    if singletons:
        raise StratificationError(f"classes with fewer than 2 items cannot be stratified: {', '.join(singletons)}")
    quota = stratified_quotas(counts, ratio)
    by_class: dict[str, list[str]] = defaultdict(list)
    for p, l in zip(manifest.paths, manifest.labels):
        by_class[l].append(p)
    root = Rng(seed)
    split: dict[str, str] = {}
    for idx, c in enumerate(sorted(by_class)):
        items = sorted(by_class[c])
        order = root.child(idx).permutation(len(items))
        for rank, j in enumerate(order):
            split[items[j]] = "train" if rank < quota[c] else "test"
    return DatasetManifest(list(manifest.paths), list(manifest.labels), split)
