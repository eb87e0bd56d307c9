"""Manifests, an FSC-style loader, the synthetic corpus generator and splitting."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .features import (SAMPLE_RATE, CmvnStats, Waveform, cmvn_apply, cmvn_fit, featurize,
                       quantize_pcm16, read_feature_store, read_wav, write_feature_store, write_wav)
from .labels import LabelSpace, LabelVector

SPLITS = ("train", "eval", "test")
FIELD_NAMES = ("domain", "intent")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    source: str
    label: LabelVector
    speaker: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    label_space: LabelSpace
    split: str = "train"

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise DataError(f"duplicate utterance id {e.id!r}")
            seen.add(e.id)
            self.label_space.check(e.label)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def labels(self) -> dict[str, LabelVector]:
        return {e.id: e.label for e in self.entries}

    def speakers(self) -> set[str]:
        return {e.speaker if e.speaker is not None else e.id for e in self.entries}


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    label: LabelVector


# ---------------------------------------------------------------------------
# manifest files
# ---------------------------------------------------------------------------

def manifest_header(space: LabelSpace, with_speaker: bool = False) -> list[str]:
    cols = ["id", "source", "domain", "intent"] + [f"slot_{i + 1}" for i in range(space.num_slots)]
    return cols + (["speaker"] if with_speaker else [])


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    space = manifest.label_space
    with_speaker = any(e.speaker is not None for e in manifest.entries)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(manifest_header(space, with_speaker))
        for e in manifest.entries:
            dom, intent, slots = space.decode(e.label)
            row = [e.id, e.source, dom, intent, *slots]
            w.writerow(row + ([e.speaker or ""] if with_speaker else []))


def _infer_space(rows: list[dict], slot_cols: list[str], cols: Mapping) -> LabelSpace:
    def values(key):
        return tuple(sorted({_cell(r, key) for r in rows}))

    return LabelSpace(values(cols["domain"]), values(cols["intent"]),
                      tuple(values(c) for c in slot_cols))


def _cell(row: dict, key) -> str:
    if isinstance(key, (list, tuple)):
        return "_".join(row[k] for k in key)
    return row[key]


def load_manifest(path: str | Path, label_space: LabelSpace | None = None,
                  column_map: Mapping | None = None, split: str | None = None) -> Manifest:
    """Read a manifest CSV.

    The label space comes from ``label_space``, else from ``label_space.json``
    next to the CSV, else it is inferred from the values (sorted by name).
    ``column_map`` renames columns: ``{"id", "source", "speaker", "domain",
    "intent": column or list of columns joined with "_", "slots": [...]}``.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    cmap = dict(column_map or {})
    cols = {"id": cmap.get("id", "id"), "source": cmap.get("source", "source"),
            "domain": cmap.get("domain", "domain"), "intent": cmap.get("intent", "intent"),
            "speaker": cmap.get("speaker", "speaker" if "speaker" in header else None)}
    slot_cols = list(cmap.get("slots", [h for h in header if h.startswith("slot_")]))
    needed = [cols["id"], cols["source"]]
    for key in [cols["domain"], cols["intent"], *slot_cols]:
        needed += list(key) if isinstance(key, (list, tuple)) else [key]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    for lineno, row in enumerate(rows, start=2):
        if any(row.get(c) is None for c in needed) or None in row:
            raise DataError(f"{path}:{lineno}: malformed row (wrong number of fields)")
    if label_space is None:
        companion = path.parent / "label_space.json"
        label_space = LabelSpace.load(companion) if companion.exists() else _infer_space(rows, slot_cols, cols)
    if len(slot_cols) != label_space.num_slots:
        raise DataError(f"{path}: {len(slot_cols)} slot columns but label space has {label_space.num_slots}")
    entries, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        try:
            uid = row[cols["id"]]
            if uid in seen:
                raise DataError(f"duplicate id {uid!r}")
            seen.add(uid)
            lv = label_space.encode(_cell(row, cols["domain"]), _cell(row, cols["intent"]),
                                    [_cell(row, c) for c in slot_cols])
        except (DataError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        speaker = row.get(cols["speaker"]) if cols["speaker"] else None
        entries.append(ManifestEntry(uid, row[cols["source"]], lv, speaker or None))
    return Manifest(entries, label_space, split or path.stem)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_domains: int = 5
    n_intents: int = 4
    slot_sizes: tuple[int, ...] = (3, 2)
    train: int = 2400
    eval: int = 300
    test: int = 300
    duration_s: tuple[float, float] = (0.6, 1.2)
    noise: float = 0.02
    amplitude: float = 0.2
    seed: int = 0
    speakers: tuple[int, int, int] = (24, 4, 4)
    confusable: list[tuple[int, int, int]] = field(default_factory=list)
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.slot_sizes = tuple(int(s) for s in self.slot_sizes)
        self.duration_s = tuple(float(d) for d in self.duration_s)
        self.speakers = tuple(int(s) for s in self.speakers)
        self.confusable = [tuple(int(v) for v in c) for c in self.confusable]
        if min((self.n_domains, self.n_intents) + self.slot_sizes) < 1:
            raise ValueError("label cardinalities must be >= 1")
        if self.noise < 0:
            raise ValueError("noise stddev must be >= 0")
        if not 0 < self.duration_s[0] <= self.duration_s[1]:
            raise ValueError("duration range must be positive and ordered")
        for f, a, b in self.confusable:
            if not 0 <= f < 2 + len(self.slot_sizes):
                raise ValueError(f"confusable pair names unknown field {f}")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace.sized(self.n_domains, self.n_intents, self.slot_sizes)

    def counts(self) -> dict[str, int]:
        return {"train": self.train, "eval": self.eval, "test": self.test}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))


def signature_frequency(field_index: int, value: int, confusable: Sequence[tuple[int, int, int]] = ()) -> float:
    """Sinusoid frequency (Hz) encoding one label field value."""
    for f, a, b in confusable:
        if f == field_index and value == b:
            return signature_frequency(field_index, a) + 5.0
    return 300.0 + 97.0 * field_index + 53.0 * value


def synthesize(label: LabelVector, n_samples: int, spec: SyntheticSpec,
               rng: np.random.Generator) -> Waveform:
    t = np.arange(n_samples) / spec.sample_rate
    x = np.zeros(n_samples)
    for fi, v in enumerate(label.as_tuple()):
        x += spec.amplitude * np.sin(2 * np.pi * signature_frequency(fi, v, spec.confusable) * t)
    if spec.noise > 0:
        x += spec.noise * rng.standard_normal(n_samples)
    return Waveform(quantize_pcm16(np.clip(x, -1.0, 1.0)), spec.sample_rate)


def _sample_labels(count: int, space: LabelSpace, rng: np.random.Generator, require: bool) -> list[int]:
    C = space.class_count
    if count < C:
        if require:
            raise DataError(f"{count} utterances cannot cover {C} classes")
        return [int(c) for c in rng.integers(0, C, size=count)]
    classes = np.concatenate([np.arange(C), rng.integers(0, C, size=count - C)])
    return [int(c) for c in rng.permutation(classes)]


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    label_space: LabelSpace
    splits: dict[str, Manifest]
    waveforms: dict[str, Waveform]
    features: dict[str, np.ndarray]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Seeded corpus: one summed-sinusoid waveform per sampled label tuple.

    Every class appears in train (error if impossible) and in eval/test when
    their size permits. Speakers are tags, disjoint across splits.
    """
    space = spec.label_space
    splits, waves, feats = {}, {}, {}
    for si, split in enumerate(SPLITS):
        count = spec.counts()[split]
        rng = np.random.default_rng([spec.seed, si])
        classes = _sample_labels(count, space, rng, require=(split == "train"))
        n_spk = max(1, spec.speakers[si])
        entries = []
        for i, cls in enumerate(classes):
            urng = np.random.default_rng([spec.seed, si, i])
            lv = space.class_to_label(cls)
            dur = urng.uniform(*spec.duration_s)
            speaker = f"{split}{i % n_spk:02d}"
            uid = f"{split}-{speaker}-{i:05d}"
            w = synthesize(lv, int(round(dur * spec.sample_rate)), spec, urng)
            waves[uid] = w
            feats[uid] = featurize(w)
            entries.append(ManifestEntry(uid, uid, lv, speaker))
        splits[split] = Manifest(entries, space, split)
    return SyntheticCorpus(spec, space, splits, waves, feats)


def write_corpus(corpus: SyntheticCorpus, out_dir: str | Path, wav: bool = False) -> Path:
    """Write manifests, label space, raw feature store and train-split CMVN stats.

    With ``wav=True`` the audio is written too and manifests point at it.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.label_space.save(out / "label_space.json")
    if wav:
        (out / "wav").mkdir(exist_ok=True)
    for split, man in corpus.splits.items():
        if wav:
            entries = []
            for e in man.entries:
                write_wav(out / "wav" / f"{e.id}.wav", corpus.waveforms[e.id])
                entries.append(ManifestEntry(e.id, f"wav/{e.id}.wav", e.label, e.speaker))
            man = Manifest(entries, man.label_space, split)
        write_manifest(out / f"{split}.csv", man)
    write_feature_store(out / "features.sluf", corpus.features)
    train = read_feature_store(out / "features.sluf")
    cmvn_fit([train[i] for i in corpus.splits["train"].ids]).save(out / "cmvn.sluc")
    (out / "synthetic_spec.json").write_text(json.dumps(corpus.spec.to_dict(), indent=2))
    return out


def featurize_manifest(manifest: Manifest, root: str | Path) -> dict[str, np.ndarray]:
    """Raw stacked features for every entry whose source is a WAV path."""
    root = Path(root)
    return {e.id: featurize(read_wav(root / e.source)) for e in manifest.entries}


def build_utterances(manifest: Manifest, features: Mapping[str, np.ndarray],
                     cmvn: CmvnStats | None) -> list[Utterance]:
    """Look up (and normalize) the features of every manifest entry."""
    out = []
    for e in manifest.entries:
        key = e.id if e.id in features else e.source
        if key not in features:
            raise DataError(f"no features for utterance {e.id!r}")
        x = features[key]
        out.append(Utterance(e.id, cmvn_apply(x, cmvn) if cmvn is not None else np.asarray(x), e.label))
    return out


def corpus_utterances(corpus: SyntheticCorpus, cmvn: CmvnStats | None = None) -> dict[str, list[Utterance]]:
    """In-memory equivalent of loading a written corpus, CMVN fit on train."""
    if cmvn is None:
        cmvn = cmvn_fit([corpus.features[i] for i in corpus.splits["train"].ids])
    return {s: build_utterances(m, corpus.features, cmvn) for s, m in corpus.splits.items()}


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_dataset(manifest: Manifest, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
                  attempts: int = 100) -> tuple[Manifest, Manifest, Manifest]:
    """Speaker-disjoint train/eval/test split with every class present in train.

    Entries without a speaker tag count as their own speaker.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    by_speaker: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_speaker.setdefault(e.speaker if e.speaker is not None else e.id, []).append(e)
    speakers = sorted(by_speaker)
    space = manifest.label_space
    all_classes = {space.label_to_class(e.label) for e in manifest.entries}
    total = len(manifest.entries)
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        buckets: list[list[ManifestEntry]] = [[], [], []]
        for spk in rng.permutation(speakers):
            deficit = ratios * total - np.array([len(b) for b in buckets])
            deficit[ratios == 0] = -np.inf
            buckets[int(np.argmax(deficit))].extend(by_speaker[spk])
        train_classes = {space.label_to_class(e.label) for e in buckets[0]}
        if train_classes == all_classes:
            return tuple(Manifest(b, space, s) for b, s in zip(buckets, SPLITS))  # type: ignore[return-value]
    raise DataError("could not find a speaker-disjoint split with every class in train")
