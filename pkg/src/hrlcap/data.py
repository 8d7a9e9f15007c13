"""Datasets: feature files, JSON-lines manifests, vocabulary, chunk targets,
and the synthetic multi-activity captioning task.

Manifest lines look like::

    {"video_id": "v0001", "split": "train", "features": "features/v0001.bin",
     "references": ["opens the door drinks coffee"],
     "chunks": [[[0, 3], [3, 5]]]}

``chunks`` holds, per reference, [start, end) token ranges over the
tokenized caption; they must partition it in order. ``chunk_labels`` is
carried along untouched when present.
"""
from __future__ import annotations

import csv
import json
import logging
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import BOS, EOS, PAD, UNK
from .errors import InputError, LoadError
from .metrics import tokenize

log = logging.getLogger(__name__)

FEATURE_MAGIC = 0x46524C48   # b"HRLF" little-endian
FEATURE_VERSION = 1
_HEADER = struct.Struct("<IIII")

RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]


# ---------------------------------------------------------------- features


def write_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise InputError(f"features must be (n, d), got {feats.shape}")
    n, d = feats.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    """Read a binary feature file, or a CSV with one frame per line."""
    path = str(path)
    if path.endswith(".csv"):
        try:
            arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except (OSError, ValueError) as exc:
            raise LoadError(f"cannot read feature CSV {path}: {exc}") from None
        return arr
    try:
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            body = fh.read()
    except OSError as exc:
        raise LoadError(f"cannot read feature file {path}: {exc}") from None
    if len(head) != _HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, version, n, d = _HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise LoadError(f"{path}: bad magic {magic:#x}")
    if version != FEATURE_VERSION:
        raise LoadError(f"{path}: unsupported feature version {version}")
    if len(body) != 4 * n * d:
        raise LoadError(f"{path}: expected {n}x{d} float32 values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, d)


# ---------------------------------------------------------------- chunks


def check_partition(chunks: Sequence[Sequence[int]], length: int) -> None:
    pos = 0
    for c in chunks:
        s, e = int(c[0]), int(c[1])
        if s != pos or e <= s:
            raise InputError(f"chunks {list(map(list, chunks))} do not partition {length} tokens in order")
        pos = e
    if pos != length:
        raise InputError(f"chunks {list(map(list, chunks))} do not partition {length} tokens in order")


def segment_targets(tokens: Sequence, chunks: Sequence[Sequence[int]]) -> list[int]:
    """z*_t = 1 iff token t closes a chunk; one extra 1 for the appended EOS."""
    check_partition(chunks, len(tokens))
    z = [0] * len(tokens)
    for _, e in chunks:
        z[int(e) - 1] = 1
    return z + [1]


HEURISTIC_SPLIT_WORDS = frozenset({"then", "while", "after", "and", "before"})


def heuristic_chunks(tokens: Sequence[str]) -> list[tuple[int, int]]:
    """Split before a small set of connective words.

    A crude stand-in for parse-based chunking, only meant to keep
    unannotated fixtures usable.
    """
    if not tokens:
        return []
    cuts = [0] + [i for i in range(1, len(tokens)) if tokens[i] in HEURISTIC_SPLIT_WORDS] + [len(tokens)]
    return [(a, b) for a, b in zip(cuts, cuts[1:])]


# ---------------------------------------------------------------- manifest


@dataclass
class VideoRecord:
    video_id: str
    features: str
    references: list[str]
    chunks: list | None = None
    chunk_labels: list | None = None
    split: str = ""

    def tokenized(self) -> list[list[str]]:
        return [tokenize(r) for r in self.references]

    def chunks_for(self, i: int) -> list[tuple[int, int]]:
        toks = tokenize(self.references[i])
        if self.chunks is None:
            return heuristic_chunks(toks)
        return [tuple(c) for c in self.chunks[i]]

    def to_json(self) -> dict:
        d = {"video_id": self.video_id, "split": self.split, "features": self.features,
             "references": self.references}
        if self.chunks is not None:
            d["chunks"] = self.chunks
        if self.chunk_labels is not None:
            d["chunk_labels"] = self.chunk_labels
        return d


@dataclass
class DatasetManifest:
    split: str
    records: list[VideoRecord]
    root: Path = field(default_factory=Path)

    def feature_path(self, rec: VideoRecord) -> Path:
        p = Path(rec.features)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict[str, VideoRecord]:
        return {r.video_id: r for r in self.records}

    def references(self) -> dict[str, list[list[str]]]:
        return {r.video_id: r.tokenized() for r in self.records}


def _validate_record(rec: VideoRecord, where: str) -> None:
    if not rec.references:
        raise LoadError(f"{where}: no reference captions")
    if rec.chunks is not None:
        if len(rec.chunks) != len(rec.references):
            raise LoadError(f"{where}: {len(rec.chunks)} chunk lists for {len(rec.references)} references")
        for ref, ch in zip(rec.references, rec.chunks):
            try:
                check_partition(ch, len(tokenize(ref)))
            except (InputError, TypeError, IndexError) as exc:
                raise LoadError(f"{where}: {exc}") from None


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from None
    records, seen, splits = [], set(), set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
            rec = VideoRecord(str(obj["video_id"]), str(obj["features"]), list(obj["references"]),
                              obj.get("chunks"), obj.get("chunk_labels"), str(obj.get("split", "")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise LoadError(f"{where}: malformed record ({exc})") from None
        where = f"{where} ({rec.video_id})"
        if rec.video_id in seen:
            raise LoadError(f"{where}: duplicate video_id")
        seen.add(rec.video_id)
        _validate_record(rec, where)
        records.append(rec)
        splits.add(rec.split)
    manifest = DatasetManifest(splits.pop() if len(splits) == 1 else "mixed", records, path.parent)
    if check_files:
        for rec in records:
            if not manifest.feature_path(rec).is_file():
                raise LoadError(f"{path} ({rec.video_id}): feature file {rec.features} not found")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- vocabulary


@dataclass
class Vocabulary:
    itos: list[str]
    min_count: int = 1

    def __post_init__(self):
        if self.itos[:4] != RESERVED:
            raise InputError("vocabulary must start with the reserved tokens")
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise InputError("vocabulary has duplicate entries")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == EOS:
                break
            if i not in (PAD, BOS):
                out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"itos": self.itos, "min_count": self.min_count}))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LoadError(f"cannot read vocabulary {path}: {exc}") from None
        return cls(d["itos"], d.get("min_count", 1))


def build_vocab(captions: Sequence[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Frequency-descending, then lexicographic; rarer tokens map to <unk>."""
    counts = Counter(t for cap in captions for t in cap if t not in RESERVED)
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(RESERVED + kept, min_count)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    video_ids: list[str]
    features: np.ndarray        # (B, n_max, d)
    lengths: np.ndarray         # (B,)
    targets: np.ndarray         # (B, T) ids, EOS-terminated, PAD after
    boundaries: np.ndarray      # (B, T) z* labels, 0 after the end

    def __len__(self) -> int:
        return len(self.video_ids)


class CaptionDataset:
    """A manifest with features cached in memory and captions encoded."""

    def __init__(self, manifest: DatasetManifest, vocab: Vocabulary, max_frames: int = 50,
                 max_len: int = 30):
        self.manifest = manifest
        self.vocab = vocab
        self.max_frames = max_frames
        self.max_len = max_len
        self.records = manifest.records
        self.ids = [r.video_id for r in self.records]
        self._feats: dict[int, np.ndarray] = {}
        self._feat_dim: int | None = None
        self.refs = [r.tokenized() for r in self.records]
        self._warned = False

    def __len__(self) -> int:
        return len(self.records)

    def features(self, i: int) -> np.ndarray:
        f = self._feats.get(i)
        if f is None:
            rec = self.records[i]
            f = read_features(self.manifest.feature_path(rec))
            if f.shape[0] == 0:
                raise LoadError(f"{rec.video_id}: empty feature sequence")
            if self._feat_dim is None:
                self._feat_dim = f.shape[1]
            elif f.shape[1] != self._feat_dim:
                raise LoadError(f"{rec.video_id}: feature dim {f.shape[1]} != {self._feat_dim}")
            f = f[: self.max_frames]
            self._feats[i] = f
        return f

    def references(self) -> dict[str, list[list[str]]]:
        return dict(zip(self.ids, self.refs))

    def caption(self, i: int, ref: int = 0) -> tuple[list[int], list[int]]:
        """(ids + EOS, z* labels), truncated to max_len actions."""
        rec = self.records[i]
        toks = self.refs[i][ref]
        z = segment_targets(toks, rec.chunks_for(ref))
        ids = self.vocab.encode(toks) + [EOS]
        if len(ids) > self.max_len:
            if not self._warned:
                log.warning("caption of %s has %d tokens; truncating to max_len=%d",
                            rec.video_id, len(ids) - 1, self.max_len)
                self._warned = True
            ids = ids[: self.max_len - 1] + [EOS]
            z = z[: self.max_len - 1] + [1]
        return ids, z

    def batch(self, indices: Sequence[int], rng: np.random.Generator | None = None,
              with_captions: bool = True) -> Batch:
        feats = [self.features(i) for i in indices]
        n_max = max(len(f) for f in feats)
        d = feats[0].shape[1]
        F = np.zeros((len(indices), n_max, d))
        for b, f in enumerate(feats):
            F[b, : len(f)] = f
        lengths = np.array([len(f) for f in feats])
        if not with_captions:
            return Batch([self.ids[i] for i in indices], F, lengths, np.zeros((len(indices), 0), int),
                         np.zeros((len(indices), 0), int))
        caps = []
        for i in indices:
            n_ref = len(self.refs[i])
            ref = int(rng.integers(n_ref)) if (rng is not None and n_ref > 1) else 0
            caps.append(self.caption(i, ref))
        T = max(len(c[0]) for c in caps)
        tgt = np.full((len(indices), T), PAD, dtype=np.int64)
        z = np.zeros((len(indices), T), dtype=np.int64)
        for b, (ids, zz) in enumerate(caps):
            tgt[b, : len(ids)] = ids
            z[b, : len(zz)] = zz
        return Batch([self.ids[i] for i in indices], F, lengths, tgt, z)


# ---------------------------------------------------------------- synthetic task

VERBS = ["opens", "closes", "holds", "takes", "puts", "washes", "eats", "drinks", "watches",
         "throws", "cleans", "reads", "fixes", "carries", "pours", "folds", "grabs", "lifts",
         "drops", "tidies"]
OBJECTS = ["door", "cup", "book", "phone", "chair", "bed", "window", "towel", "shoe", "bag",
           "laptop", "sandwich", "broom", "pillow", "mirror", "box", "blanket", "bottle", "dish",
           "light"]
DETERMINERS = ["the", "a"]
PREPOSITIONS = ["on", "with", "at", "in"]


@dataclass
class SynthTaskSpec:
    n_activities: int = 8
    phrase_len: tuple[int, int] = (2, 4)
    segments: tuple[int, int] = (2, 5)
    frames_per_segment: tuple[int, int] = (3, 6)
    feat_dim: int = 16
    noise: float = 0.3
    sizes: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 200})
    seed: int = 0

    def validate(self) -> None:
        if not 1 <= self.n_activities <= len(VERBS):
            raise InputError(f"n_activities must be in 1..{len(VERBS)}")
        lo, hi = self.phrase_len
        if not 2 <= lo <= hi <= 4:
            raise InputError("phrase lengths must lie in 2..4")
        if self.segments[0] < 1 or self.segments[0] > self.segments[1]:
            raise InputError("bad segment-count range")
        if self.frames_per_segment[0] < 1 or self.frames_per_segment[0] > self.frames_per_segment[1]:
            raise InputError("bad frames-per-segment range")
        if self.noise < 0:
            raise InputError("noise must be >= 0")


@dataclass
class SynthVideo:
    video_id: str
    split: str
    features: np.ndarray
    activities: list[int]
    tokens: list[str]
    chunks: list[tuple[int, int]]


def activity_phrases(spec: SynthTaskSpec, rng: np.random.Generator) -> list[list[str]]:
    """One distinct phrase per activity: verb [prep] [det] object, 2..4 words."""
    verbs = rng.permutation(VERBS)[: spec.n_activities]
    objects = rng.permutation(OBJECTS)[: spec.n_activities]
    phrases = []
    for v, o in zip(verbs, objects):
        L = int(rng.integers(spec.phrase_len[0], spec.phrase_len[1] + 1))
        middle = {2: [], 3: [str(rng.choice(DETERMINERS))],
                  4: [str(rng.choice(PREPOSITIONS)), str(rng.choice(DETERMINERS))]}[L]
        phrases.append([str(v)] + middle + [str(o)])
    return phrases


def synth_videos(spec: SynthTaskSpec) -> tuple[list[SynthVideo], list[list[str]], np.ndarray]:
    """All videos of the task, plus the activity phrases and embeddings."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    phrases = activity_phrases(spec, rng)
    emb = rng.normal(0.0, 1.0, size=(spec.n_activities, spec.feat_dim))
    total = sum(spec.sizes.values())
    split_of = np.concatenate([[s] * n for s, n in spec.sizes.items()]) if total else np.array([])
    split_of = split_of[rng.permutation(total)]
    width = len(str(max(total - 1, 0)))
    videos = []
    for v in range(total):
        K = int(rng.integers(spec.segments[0], spec.segments[1] + 1))
        acts: list[int] = []
        for _ in range(K):
            choices = [a for a in range(spec.n_activities) if not acts or a != acts[-1]] \
                if spec.n_activities > 1 else [0]
            acts.append(int(rng.choice(choices)))
        frames, tokens, chunks = [], [], []
        for a in acts:
            n = int(rng.integers(spec.frames_per_segment[0], spec.frames_per_segment[1] + 1))
            frames.append(emb[a] + spec.noise * rng.normal(size=(n, spec.feat_dim)))
            chunks.append((len(tokens), len(tokens) + len(phrases[a])))
            tokens += phrases[a]
        videos.append(SynthVideo(f"v{v:0{width}d}", str(split_of[v]), np.concatenate(frames),
                                 acts, tokens, chunks))
    return videos, phrases, emb


def gen_synth(spec: SynthTaskSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write feature files, one manifest per split, ``vocab.json`` and ``task.json``."""
    out = Path(out_dir)
    videos, phrases, _ = synth_videos(spec)
    manifests: dict[str, DatasetManifest] = {s: DatasetManifest(s, [], out) for s in spec.sizes}
    for vid in videos:
        rel = f"features/{vid.video_id}.bin"
        write_features(out / rel, vid.features)
        manifests[vid.split].records.append(
            VideoRecord(vid.video_id, rel, [" ".join(vid.tokens)], [[list(c) for c in vid.chunks]],
                        None, vid.split))
    for s, m in manifests.items():
        save_manifest(m, out / f"{s}.jsonl")
    train = manifests.get("train")
    caps = [r.tokenized()[0] for r in (train.records if train else [])]
    build_vocab(caps or [p for p in phrases]).save(out / "vocab.json")
    spec_d = asdict(spec)
    spec_d["phrases"] = [" ".join(p) for p in phrases]
    (out / "task.json").write_text(json.dumps(spec_d, indent=2))
    return manifests


def write_csv(path, header: Sequence[str], rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
