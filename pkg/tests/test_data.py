import json

import numpy as np
import pytest

from hrlcap.agent import EOS, PAD, UNK
from hrlcap.data import (CaptionDataset, DatasetManifest, SynthTaskSpec, VideoRecord, Vocabulary,
                         build_vocab, check_partition, gen_synth, heuristic_chunks, load_manifest,
                         read_features, save_manifest, segment_targets, synth_videos, write_features)
from hrlcap.errors import InputError, LoadError


def test_segment_targets_examples():
    assert segment_targets("a b c d e".split(), [(0, 2), (2, 5)]) == [0, 1, 0, 0, 1, 1]
    assert segment_targets(["x"], [(0, 1)]) == [1, 1]
    with pytest.raises(InputError):
        segment_targets("a b c".split(), [(0, 1), (2, 3)])
    with pytest.raises(InputError):
        check_partition([(0, 2)], 3)


def test_heuristic_chunks():
    toks = "man opens door then walks away".split()
    assert heuristic_chunks(toks) == [(0, 3), (3, 6)]
    assert heuristic_chunks([]) == []


def test_vocabulary():
    v = build_vocab([["b", "a", "b"], ["c", "a", "b"]], min_count=2)
    assert v.itos[4:] == ["b", "a"]
    assert v.encode(["a", "zzz"]) == [5, UNK]
    assert v.decode([4, 5, EOS, 4]) == ["b", "a"]
    assert v.decode([PAD, 4]) == ["b"]
    with pytest.raises(InputError):
        Vocabulary(["a", "b"])


def test_vocabulary_round_trip(tmp_path):
    v = build_vocab([["x", "y"]])
    v.save(tmp_path / "v.json")
    assert Vocabulary.load(tmp_path / "v.json").itos == v.itos
    with pytest.raises(LoadError):
        Vocabulary.load(tmp_path / "none.json")


def test_feature_files(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4) / 7
    write_features(tmp_path / "f.bin", x)
    np.testing.assert_array_equal(read_features(tmp_path / "f.bin"), x.astype(np.float64))
    np.savetxt(tmp_path / "f.csv", x, delimiter=",")
    np.testing.assert_allclose(read_features(tmp_path / "f.csv"), x, rtol=1e-6)
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-4])
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    for name in ("trunc.bin", "magic.bin", "missing.bin"):
        with pytest.raises(LoadError):
            read_features(tmp_path / name)
    with pytest.raises(InputError):
        write_features(tmp_path / "bad.bin", np.zeros(3))


def make_manifest(tmp_path, records):
    lines = [json.dumps(r) for r in records]
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    return tmp_path / "m.jsonl"


def test_manifest_round_trip(tmp_path):
    write_features(tmp_path / "a.bin", np.ones((2, 3)))
    rec = VideoRecord("a", "a.bin", ["opens door then sits"], [[[0, 2], [2, 4]]], None, "train")
    save_manifest(DatasetManifest("train", [rec], tmp_path), tmp_path / "m.jsonl")
    m = load_manifest(tmp_path / "m.jsonl")
    assert m.split == "train" and m.records[0] == rec
    assert m.references() == {"a": [["opens", "door", "then", "sits"]]}


@pytest.mark.parametrize("record, msg", [
    ({"video_id": "a", "features": "a.bin", "references": []}, "no reference"),
    ({"video_id": "a", "features": "a.bin", "references": ["x y"], "chunks": [[[0, 1]]]}, "partition"),
    ({"video_id": "a", "features": "a.bin", "references": ["x y"], "chunks": []}, "chunk lists"),
    ({"video_id": "a", "references": ["x"]}, "malformed"),
    ({"video_id": "a", "features": "gone.bin", "references": ["x"]}, "not found"),
])
def test_manifest_rejections(tmp_path, record, msg):
    write_features(tmp_path / "a.bin", np.ones((2, 3)))
    with pytest.raises(LoadError, match=msg):
        load_manifest(make_manifest(tmp_path, [record]))


def test_manifest_duplicate_ids(tmp_path):
    write_features(tmp_path / "a.bin", np.ones((2, 3)))
    r = {"video_id": "a", "features": "a.bin", "references": ["x"]}
    with pytest.raises(LoadError, match="duplicate"):
        load_manifest(make_manifest(tmp_path, [r, r]))


def test_noise_free_synth_frames_equal_activity_embedding():
    spec = SynthTaskSpec(n_activities=4, noise=0.0, sizes={"train": 20}, seed=1)
    videos, phrases, emb = synth_videos(spec)
    for v in videos:
        for a, (s, e) in zip(v.activities, v.chunks):
            assert v.tokens[s:e] == phrases[a]
        # every frame is exactly one activity embedding, segments in order
        rows = [int(np.flatnonzero((emb == f).all(axis=1))[0]) for f in v.features]
        distinct = [r for i, r in enumerate(rows) if i == 0 or r != rows[i - 1]]
        assert distinct == v.activities
        assert len(v.tokens) == sum(len(phrases[a]) for a in v.activities)
        assert all(x != y for x, y in zip(v.activities, v.activities[1:]))


def test_synth_is_deterministic_and_splits_disjoint(tmp_path):
    spec = SynthTaskSpec(n_activities=5, feat_dim=4, sizes={"train": 30, "val": 10, "test": 10}, seed=2)
    a, b = gen_synth(spec, tmp_path / "a"), gen_synth(spec, tmp_path / "b")
    for s in ("train", "val", "test"):
        assert [r.to_json() for r in a[s].records] == [r.to_json() for r in b[s].records]
        assert (tmp_path / "a" / f"{s}.jsonl").read_bytes() == (tmp_path / "b" / f"{s}.jsonl").read_bytes()
    ids = [{r.video_id for r in a[s].records} for s in ("train", "val", "test")]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert sum(map(len, ids)) == 50
    vocab = Vocabulary.load(tmp_path / "a" / "vocab.json")
    task = json.loads((tmp_path / "a" / "task.json").read_text())
    assert len(vocab) == 4 + len({w for p in task["phrases"] for w in p.split()})


def test_synth_spec_validation():
    for bad in (dict(n_activities=0), dict(phrase_len=(1, 3)), dict(segments=(3, 2)), dict(noise=-1)):
        with pytest.raises(InputError):
            SynthTaskSpec(**bad).validate()


def test_dataset_batches(small_data):
    vocab, train, _, _ = small_data
    batch = train.batch([0, 1, 2])
    assert batch.features.shape[0] == 3 and batch.features.shape[2] == 6
    for b in range(3):
        ids, z = train.caption(b)
        n = len(ids)
        assert batch.targets[b, :n].tolist() == ids and ids[-1] == EOS
        assert (batch.targets[b, n:] == PAD).all()
        assert batch.boundaries[b, :n].tolist() == z and z[-1] == 1
        assert not batch.features[b, batch.lengths[b]:].any()
    assert train.references()[train.ids[0]] == train.refs[0]


def test_dataset_truncates_long_captions(small_data, caplog):
    vocab, train, _, _ = small_data
    short = CaptionDataset(train.manifest, vocab, max_len=3)
    ids, z = short.caption(0)
    assert len(ids) == 3 and ids[-1] == EOS and z[-1] == 1
