"""Corpus loading and deterministic IND/OOD split generation.

A corpus is partitioned into labeled in-domain (IND) train data, unlabeled
out-of-domain (OOD) train data, an IND dev set, and a joint test set. The
partition unit is the intent category for the ``sd``/``md`` setups and the
whole domain for ``cd``. OOD gold labels never live on the split object;
they are written to a sealed sidecar file that only the evaluation module
opens.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

from .errors import ConfigError, CorpusError, DataError, IterationError, SchemaError

Setup = Literal["sd", "cd", "md"]
Partition = Literal["ind_train", "ood_train", "mixed", "dev", "test"]

SETUPS = ("sd", "cd", "md")
PARTITIONS = ("ind_train", "ood_train", "mixed", "dev", "test")

DEV_FRACTION = 0.1
TEST_HOLDOUT_FRACTION = 0.2

MANIFEST_NAME = "split.json"
SIDECAR_NAME = "ood_gold.sealed.jsonl"


@dataclass(frozen=True)
class Utterance:
    """One corpus record; ``label`` is None for unlabeled train records."""

    id: str
    text: str
    label: str | None = None
    domain: str | None = None
    split: str | None = None  # "train" / "test" when the corpus publishes one


@dataclass(frozen=True)
class LabelSpace:
    """IND labels first, then OOD labels, each in declared (sorted) order."""

    ind_labels: tuple[str, ...]
    ood_labels: tuple[str, ...]
    domain_of: dict[str, str] | None = None

    def __post_init__(self) -> None:
        overlap = set(self.ind_labels) & set(self.ood_labels)
        if overlap:
            raise ConfigError(f"IND and OOD label sets overlap: {sorted(overlap)}")
        if not self.ind_labels or not self.ood_labels:
            raise ConfigError("both IND and OOD label sets must be non-empty")

    @property
    def joint_labels(self) -> tuple[str, ...]:
        return self.ind_labels + self.ood_labels

    @property
    def num_ind(self) -> int:
        return len(self.ind_labels)

    @property
    def num_ood(self) -> int:
        return len(self.ood_labels)

    @property
    def num_labels(self) -> int:
        return len(self.ind_labels) + len(self.ood_labels)

    def index_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise EvaluationLabelLookupError(label) from None

    def is_ind(self, label: str) -> bool:
        return label in set(self.ind_labels)

    @property
    def _index(self) -> dict[str, int]:
        # tiny, rebuilt on demand to keep the dataclass frozen/hashable
        return {name: i for i, name in enumerate(self.joint_labels)}


class EvaluationLabelLookupError(DataError):
    def __init__(self, label: str):
        super().__init__(f"label {label!r} is not in the joint label space")
        self.label = label


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    labels: tuple[str, ...]  # deduplicated, sorted inventory
    domain_of: dict[str, str] | None
    sha256: str

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def domains(self) -> tuple[str, ...]:
        if not self.domain_of:
            return ()
        return tuple(sorted(set(self.domain_of.values())))

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


@dataclass
class GidSplit:
    """One generated IND/OOD partition. ``ood_train`` labels are stripped."""

    label_space: LabelSpace
    ind_train: list[Utterance]
    ood_train: list[Utterance]
    dev: list[Utterance]
    test: list[Utterance]
    setup: Setup
    ood_ratio: float
    seed: int
    corpus_sha256: str = ""
    partition_names: tuple[str, ...] = field(default=PARTITIONS, repr=False)

    def partition(self, name: str) -> list[Utterance]:
        if name == "ind_train":
            return self.ind_train
        if name == "ood_train":
            return self.ood_train
        if name == "dev":
            return self.dev
        if name == "test":
            return self.test
        raise ConfigError(f"unknown partition {name!r}")


@dataclass(frozen=True)
class BatchItem:
    utterance: Utterance
    origin: Literal["IND", "OOD"]
    label_index: int | None  # joint index; None for unlabeled OOD train records


def _record_name(raw: dict, line_no: int) -> str:
    rid = raw.get("id")
    return f"id={rid!r}" if rid is not None else f"line {line_no}"


def _load_jsonl(path: Path) -> list[Utterance]:
    utterances: list[Utterance] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}: line {line_no} is not valid JSON: {exc}") from exc
            for key in ("text", "label"):
                if key not in raw or raw[key] in (None, ""):
                    raise SchemaError(
                        f"{path}: record {_record_name(raw, line_no)} is missing field {key!r}"
                    )
            utterances.append(
                Utterance(
                    id=str(raw.get("id", f"u{line_no - 1:06d}")),
                    text=str(raw["text"]),
                    label=str(raw["label"]),
                    domain=str(raw["domain"]) if raw.get("domain") else None,
                    split=str(raw["split"]) if raw.get("split") else None,
                )
            )
    return utterances


def _load_csv(path: Path) -> list[Utterance]:
    utterances: list[Utterance] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = {"text", "label"} - set(reader.fieldnames)
        if missing:
            raise SchemaError(f"{path}: header is missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=1):
            text = (row.get("text") or "").strip()
            label = (row.get("label") or "").strip()
            if not text or not label:
                raise SchemaError(f"{path}: row {row_no} is missing text or label")
            utterances.append(Utterance(id=f"u{row_no - 1:06d}", text=text, label=label))
    return utterances


def load_corpus(path: str | Path, format: str | None = None) -> Corpus:
    """Load a corpus file and return its records plus the label inventory.

    ``format`` is ``jsonl`` or ``csv``; inferred from the suffix when omitted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("jsonl", "csv"):
        raise ConfigError(f"unknown corpus format {format!r}")

    raw_bytes = path.read_bytes()
    utterances = _load_csv(path) if format == "csv" else _load_jsonl(path)
    if not utterances:
        raise CorpusError(f"corpus {path} contains no records")

    seen: set[str] = set()
    for u in utterances:
        if u.id in seen:
            raise SchemaError(f"{path}: duplicate record id {u.id!r}")
        seen.add(u.id)

    labels = tuple(sorted({u.label for u in utterances if u.label is not None}))
    domain_of: dict[str, str] | None = None
    if any(u.domain for u in utterances):
        domain_of = {}
        for u in utterances:
            if u.label is None or u.domain is None:
                continue
            prev = domain_of.get(u.label)
            if prev is not None and prev != u.domain:
                raise SchemaError(
                    f"{path}: label {u.label!r} appears in domains {prev!r} and {u.domain!r}"
                )
            domain_of[u.label] = u.domain
        missing = [lab for lab in labels if lab not in domain_of]
        if missing:
            raise SchemaError(f"{path}: labels without a domain: {missing[:5]}")

    return Corpus(
        utterances=tuple(utterances),
        labels=labels,
        domain_of=domain_of,
        sha256=hashlib.sha256(raw_bytes).hexdigest(),
    )


def _phase_rng(seed: int, phase: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{phase}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _stratified_take(
    records: list[Utterance], fraction: float, rng: random.Random
) -> tuple[list[Utterance], list[Utterance]]:
    """Split records into (taken, kept) with a per-label seeded fraction."""
    by_label: dict[str, list[Utterance]] = {}
    for u in records:
        by_label.setdefault(u.label or "", []).append(u)
    taken_ids: set[str] = set()
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda u: u.id)
        n_take = math.floor(fraction * len(group))
        if n_take > 0:
            taken_ids.update(u.id for u in rng.sample(group, n_take))
    taken = [u for u in records if u.id in taken_ids]
    kept = [u for u in records if u.id not in taken_ids]
    return taken, kept


def make_split(corpus: Corpus, setup: str, ood_ratio: float, seed: int) -> GidSplit:
    """Deterministically partition ``corpus`` into a GID split.

    For ``sd``/``md`` the OOD side receives ``floor(ood_ratio * |labels|)``
    categories; for ``cd`` it receives ``floor(ood_ratio * |domains|)`` whole
    domains. Train records of OOD categories are stripped of their labels.
    """
    if setup not in SETUPS:
        raise ConfigError(f"setup must be one of {SETUPS}, got {setup!r}")
    if not 0.0 < ood_ratio < 1.0:
        raise ConfigError(f"ood_ratio must lie in (0, 1), got {ood_ratio}")

    n_domains = len(corpus.domains)
    if setup == "sd" and n_domains > 1:
        raise ConfigError("sd setup requires a single-domain corpus")
    if setup in ("cd", "md") and n_domains < 2:
        raise ConfigError(f"{setup} setup requires a multi-domain corpus")

    rng_units = _phase_rng(seed, "units")
    if setup == "cd":
        units = list(corpus.domains)
        n_ood_units = math.floor(ood_ratio * len(units))
        if n_ood_units == 0 or n_ood_units == len(units):
            raise ConfigError(
                f"ood_ratio {ood_ratio} leaves {n_ood_units} of {len(units)} domains OOD"
            )
        ood_domains = set(rng_units.sample(sorted(units), n_ood_units))
        assert corpus.domain_of is not None
        ood_label_set = {lab for lab, dom in corpus.domain_of.items() if dom in ood_domains}
    else:
        units = list(corpus.labels)
        n_ood_units = math.floor(ood_ratio * len(units))
        if n_ood_units == 0 or n_ood_units == len(units):
            raise ConfigError(
                f"ood_ratio {ood_ratio} leaves {n_ood_units} of {len(units)} labels OOD"
            )
        ood_label_set = set(rng_units.sample(sorted(units), n_ood_units))

    label_space = LabelSpace(
        ind_labels=tuple(lab for lab in corpus.labels if lab not in ood_label_set),
        ood_labels=tuple(lab for lab in corpus.labels if lab in ood_label_set),
        domain_of=corpus.domain_of,
    )

    records = list(corpus.utterances)
    published_test = [u for u in records if u.split == "test"]
    if published_test:
        test = published_test
        train_pool = [u for u in records if u.split != "test"]
    else:
        rng_test = _phase_rng(seed, "test")
        test, train_pool = _stratified_take(records, TEST_HOLDOUT_FRACTION, rng_test)

    ind_pool = [u for u in train_pool if u.label in set(label_space.ind_labels)]
    ood_pool = [u for u in train_pool if u.label in ood_label_set]

    rng_dev = _phase_rng(seed, "dev")
    dev, ind_train = _stratified_take(ind_pool, DEV_FRACTION, rng_dev)

    ood_train = [
        Utterance(id=u.id, text=u.text, label=None, domain=u.domain) for u in ood_pool
    ]

    return GidSplit(
        label_space=label_space,
        ind_train=ind_train,
        ood_train=ood_train,
        dev=dev,
        test=test,
        setup=setup,  # type: ignore[arg-type]
        ood_ratio=ood_ratio,
        seed=seed,
        corpus_sha256=corpus.sha256,
    )


def _tag(split: GidSplit, u: Utterance, origin: str) -> BatchItem:
    index = split.label_space.index_of(u.label) if u.label is not None else None
    return BatchItem(utterance=u, origin=origin, label_index=index)  # type: ignore[arg-type]


def batch_iter(
    split: GidSplit,
    partition: str,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> Iterator[list[BatchItem]]:
    """Yield batches from one partition; the final partial batch is emitted.

    The ``mixed`` partition is the tagged union of IND and OOD train records,
    shuffled as one pool so batches carry both origins in proportion to the
    partition sizes.
    """
    if partition not in PARTITIONS:
        raise ConfigError(f"partition must be one of {PARTITIONS}, got {partition!r}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")

    if partition == "mixed":
        items = [_tag(split, u, "IND") for u in split.ind_train]
        items += [_tag(split, u, "OOD") for u in split.ood_train]
    elif partition == "ood_train":
        items = [_tag(split, u, "OOD") for u in split.ood_train]
    else:
        records = split.partition(partition)
        items = [
            _tag(split, u, "IND" if split.label_space.is_ind(u.label or "") else "OOD")
            for u in records
        ]

    if not items:
        raise IterationError(f"partition {partition!r} is empty")

    if shuffle_seed is not None:
        rng = random.Random(shuffle_seed)
        rng.shuffle(items)

    for start in range(0, len(items), batch_size):
        yield items[start : start + batch_size]


def _manifest_dict(split: GidSplit) -> dict:
    return {
        "format_version": 1,
        "setup": split.setup,
        "ood_ratio": split.ood_ratio,
        "seed": split.seed,
        "corpus_sha256": split.corpus_sha256,
        "label_space": {
            "ind": list(split.label_space.ind_labels),
            "ood": list(split.label_space.ood_labels),
            "domain_of": split.label_space.domain_of,
        },
        "partitions": {
            "ind_train": [u.id for u in split.ind_train],
            "ood_train": [u.id for u in split.ood_train],
            "dev": [u.id for u in split.dev],
            "test": [u.id for u in split.test],
        },
    }


def manifest_bytes(split: GidSplit) -> bytes:
    """Canonical manifest serialization; byte-identical for identical splits."""
    return (
        json.dumps(_manifest_dict(split), sort_keys=True, ensure_ascii=False, indent=1) + "\n"
    ).encode("utf-8")


def split_hash(split: GidSplit) -> str:
    return hashlib.sha256(manifest_bytes(split)).hexdigest()


def save_split(split: GidSplit, corpus: Corpus, out_dir: str | Path) -> Path:
    """Write the split manifest plus the sealed OOD gold-label sidecar.

    Gold labels for ``ood_train`` are re-derived from the corpus here; they
    are never stored on the split object the trainer sees.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_bytes(manifest_bytes(split))

    gold = corpus.by_id()
    with (out / SIDECAR_NAME).open("w", encoding="utf-8") as fh:
        for u in split.ood_train:
            label = gold[u.id].label
            fh.write(json.dumps({"id": u.id, "label": label}, sort_keys=True) + "\n")
    return manifest_path


def load_split(manifest_path: str | Path, corpus: Corpus) -> GidSplit:
    """Reconstruct a split from its manifest and the original corpus."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"split manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("corpus_sha256") and manifest["corpus_sha256"] != corpus.sha256:
        raise DataError(
            "corpus file does not match the one this split was generated from "
            f"(manifest {manifest['corpus_sha256'][:12]}, corpus {corpus.sha256[:12]})"
        )
    by_id = corpus.by_id()

    def resolve(ids: list[str], strip_label: bool) -> list[Utterance]:
        out = []
        for rid in ids:
            if rid not in by_id:
                raise DataError(f"record id {rid!r} from manifest missing in corpus")
            u = by_id[rid]
            if strip_label:
                u = Utterance(id=u.id, text=u.text, label=None, domain=u.domain)
            out.append(u)
        return out

    parts = manifest["partitions"]
    ls = manifest["label_space"]
    label_space = LabelSpace(
        ind_labels=tuple(ls["ind"]),
        ood_labels=tuple(ls["ood"]),
        domain_of=ls.get("domain_of"),
    )
    return GidSplit(
        label_space=label_space,
        ind_train=resolve(parts["ind_train"], strip_label=False),
        ood_train=resolve(parts["ood_train"], strip_label=True),
        dev=resolve(parts["dev"], strip_label=False),
        test=resolve(parts["test"], strip_label=False),
        setup=manifest["setup"],
        ood_ratio=manifest["ood_ratio"],
        seed=manifest["seed"],
        corpus_sha256=manifest.get("corpus_sha256", ""),
    )
