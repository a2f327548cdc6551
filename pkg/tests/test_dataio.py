import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from helpers import lstsq_oracle
from jcafusion.dataio import (
    AnnotationTrack, Dataset, MaskSpec, SequenceRecord, SyntheticSpec, gen_synthetic,
    load_features, load_labels, mask_modality, read_manifest, save_features, save_labels,
    split_counts, window_sequence, write_dataset,
)
from jcafusion.errors import AlignmentError, ConfigError, FormatError
from jcafusion.fusion import FusionModel, ModalFeatures, ModelDims
from jcafusion.optim import TrainConfig, train_loop


def _record(L=16, d_a=3, d_v=2, seed=0, sid="s0"):
    rng = np.random.default_rng(seed)
    return SequenceRecord(
        sid,
        [ModalFeatures(rng.normal(size=(L, d_a)), "audio")],
        [ModalFeatures(rng.normal(size=(L, d_v)), "visual")],
        AnnotationTrack.from_matrix(rng.uniform(-1, 1, size=(L, 2))),
    )


# --- generator --------------------------------------------------------------------

def test_generator_is_deterministic():
    spec = SyntheticSpec(n_sequences=5, L=8, d_a=4, d_v=3)
    a, _ = gen_synthetic(spec)
    b, _ = gen_synthetic(spec)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.audio[0].X, rb.audio[0].X)
        assert np.array_equal(ra.visual[0].X, rb.visual[0].X)
        assert np.array_equal(ra.labels.as_matrix(), rb.labels.as_matrix())
    c, _ = gen_synthetic(SyntheticSpec(n_sequences=5, L=8, d_a=4, d_v=3, seed=1))
    assert not np.array_equal(a[0].audio[0].X, c[0].audio[0].X)


def test_generator_shapes_and_splits():
    recs, truth = gen_synthetic(SyntheticSpec())
    assert len(recs) == 64
    assert [sum(r.split == s for r in recs) for s in ("train", "val", "test")] == [45, 10, 9]
    r = recs[0]
    assert r.audio[0].X.shape == (16, 16) and r.visual[0].X.shape == (16, 16)
    assert np.all(np.abs(r.labels.as_matrix()) <= 1)
    assert truth.latents[r.id].shape == (17, 8)


@pytest.mark.parametrize("n,expected", [(64, (45, 10, 9)), (20, (14, 3, 3)), (1, (1, 0, 0))])
def test_split_counts(n, expected):
    assert split_counts(n) == expected


def test_generator_rejects_bad_spec():
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(n_sequences=0))
    with pytest.raises(ConfigError):
        gen_synthetic(SyntheticSpec(complementary_split=1.5))


def test_multiple_backbones():
    recs, _ = gen_synthetic(SyntheticSpec(n_sequences=2, n_backbones=2))
    assert len(recs[0].audio) == 2 and len(recs[0].visual) == 2
    assert not np.array_equal(recs[0].audio[0].X, recs[0].audio[1].X)


# Frozen least-squares oracle values on the default generator (seed 42), validation split.
ORACLE = {
    "a": (0.7405315761558124, 0.7734842526541078),
    "v": (0.6805687361000209, 0.5785969157386285),
    "av": (0.9973246167542658, 0.9972175605379463),
}


@pytest.mark.parametrize("which", ["a", "v", "av"])
def test_oracle_frozen_values(which):
    scores, _ = lstsq_oracle(SyntheticSpec(), which)
    assert scores["valence"] == pytest.approx(ORACLE[which][0], abs=1e-6)
    assert scores["arousal"] == pytest.approx(ORACLE[which][1], abs=1e-6)


def test_joint_oracle_beats_unimodal_by_margin():
    _, a = lstsq_oracle(SyntheticSpec(), "a")
    _, v = lstsq_oracle(SyntheticSpec(), "v")
    _, av = lstsq_oracle(SyntheticSpec(), "av")
    assert av - max(a, v) >= 0.1


def test_oracle_noiseless_is_exact():
    _, av = lstsq_oracle(SyntheticSpec(noise_std=0.0), "av")
    assert av == pytest.approx(1.0, abs=1e-9)


def test_no_complementarity_makes_audio_uninformative():
    _, a = lstsq_oracle(SyntheticSpec(complementary_split=0.0), "a")
    _, v = lstsq_oracle(SyntheticSpec(complementary_split=0.0), "v")
    assert abs(a) < 0.05 and v > 0.98


def test_oracle_bounds_trained_model():
    spec = SyntheticSpec(n_sequences=32, L=8, d_a=8, d_v=8, noise_std=0.0, label_lag=0, seed=3)
    _, oracle = lstsq_oracle(spec, "av")
    recs, _ = gen_synthetic(spec)
    model = FusionModel.create("concat", ModelDims(8, 8, 8, k=4, h_head=32), seed=0)
    res = train_loop(model, Dataset.from_records(recs),
                     TrainConfig(learning_rate=3e-3, batch_size=8, max_epochs=60, dropout_p=0.0, weight_decay=0.0))
    assert res.best_val_ccc <= oracle + 0.02


# --- binary formats -----------------------------------------------------------------

@settings(max_examples=40)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_feature_round_trip_bit_exact(tmp_path_factory, X):
    path = tmp_path_factory.mktemp("f") / "x.avf"
    save_features(path, X.astype(np.float64))
    assert np.array_equal(load_features(path).X, X.astype(np.float64))


def test_label_round_trip_bit_exact(tmp_path):
    m = np.float32(np.random.default_rng(0).uniform(-1, 1, size=(12, 2))).astype(np.float64)
    save_labels(tmp_path / "y.avl", AnnotationTrack.from_matrix(m))
    assert np.array_equal(load_labels(tmp_path / "y.avl").as_matrix(), m)


def test_feature_layout(tmp_path):
    save_features(tmp_path / "x.avf", np.array([[1.0, 2.0]]))
    assert (tmp_path / "x.avf").read_bytes() == b"AVF1" + struct.pack("<II2f", 1, 2, 1.0, 2.0)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.avf"
    save_features(path, np.ones((2, 2)))
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic") as exc:
        load_features(path)
    assert exc.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "x.avf"
    save_features(path, np.ones((4, 6)))
    path.write_bytes(path.read_bytes()[:12 + 90])
    with pytest.raises(FormatError, match="truncated") as exc:
        load_features(path)
    assert exc.value.offset == 102


def test_trailing_bytes_and_non_finite(tmp_path):
    path = tmp_path / "x.avf"
    save_features(path, np.ones((1, 1)))
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_features(path)
    path.write_bytes(b"AVF1" + struct.pack("<II2f", 1, 2, 0.0, float("nan")))
    with pytest.raises(FormatError) as exc:
        load_features(path)
    assert exc.value.offset == 16


def test_labels_out_of_range_and_magic(tmp_path):
    path = tmp_path / "y.avl"
    path.write_bytes(b"AVL1" + struct.pack("<I2f", 1, 0.5, 1.5))
    with pytest.raises(FormatError, match=r"\[-1, 1\]"):
        load_labels(path)
    path.write_bytes(b"AVF1" + struct.pack("<I2f", 1, 0.5, 0.5))
    with pytest.raises(FormatError, match="magic"):
        load_labels(path)


def test_manifest_round_trip(tmp_path):
    recs, _ = gen_synthetic(SyntheticSpec(n_sequences=6, L=5, d_a=3, d_v=2, n_backbones=2))
    manifest = write_dataset(recs, tmp_path)
    with open(manifest, newline="") as fh:
        header = next(csv.reader(fh))
    assert header == ["id", "audio_path", "audio_path2", "visual_path", "visual_path2", "label_path", "split"]
    back = read_manifest(manifest)
    assert [r.id for r in back] == [r.id for r in recs]
    assert [r.split for r in back] == [r.split for r in recs]
    for a, b in zip(recs, back):
        assert np.array_equal(a.audio[1].X, b.audio[1].X)
        assert np.array_equal(a.labels.as_matrix(), b.labels.as_matrix())


def test_manifest_rejects_unknown_split(tmp_path):
    recs, _ = gen_synthetic(SyntheticSpec(n_sequences=1, L=4, d_a=2, d_v=2))
    manifest = write_dataset(recs, tmp_path)
    manifest.write_text(manifest.read_text().replace(",train", ",holdout"))
    with pytest.raises(ConfigError):
        read_manifest(manifest)


def test_record_length_mismatch():
    with pytest.raises(AlignmentError):
        SequenceRecord("x", [ModalFeatures(np.ones((4, 2)), "audio")], [ModalFeatures(np.ones((5, 2)), "visual")],
                       AnnotationTrack.from_matrix(np.zeros((4, 2))))


# --- windowing and masking ------------------------------------------------------------

@pytest.mark.parametrize("L,sub,n", [(128, 16, 8), (64, 8, 8), (20, 8, 2)])
def test_window_counts(L, sub, n):
    wins = window_sequence(_record(L=L), sub)
    assert len(wins) == n
    assert all(w.L == sub for w in wins)
    assert wins[1].id == "s0#w1"


def test_full_length_window_is_identity():
    r = _record(L=16)
    (w,) = window_sequence(r, 16)
    assert w.id == r.id
    assert np.array_equal(w.audio[0].X, r.audio[0].X)


def test_window_contents():
    r = _record(L=16)
    wins = window_sequence(r, 4, stride=2)
    assert len(wins) == 7
    assert np.array_equal(wins[3].visual[0].X, r.visual[0].X[6:10])
    with pytest.raises(ConfigError):
        window_sequence(r, 17)


def test_mask_fraction_zero_is_identity():
    r = _record()
    assert mask_modality(r, "audio", MaskSpec(0.0)) is r


def test_mask_full_zeroes_modality():
    r = _record()
    m = mask_modality(r, "audio", MaskSpec(1.0))
    assert np.all(m.audio[0].X == 0)
    assert np.array_equal(m.visual[0].X, r.visual[0].X)


def test_mask_full_is_idempotent():
    once = mask_modality(_record(), "audio", MaskSpec(1.0))
    twice = mask_modality(once, "audio", MaskSpec(1.0))
    assert np.array_equal(once.audio[0].X, twice.audio[0].X)


def test_mask_quarter_hits_exactly_four_clips():
    r = _record(L=16)
    m = mask_modality(r, "audio", MaskSpec(0.25, seed=3))
    zero_rows = np.all(m.audio[0].X == 0, axis=1)
    assert zero_rows.sum() == 4
    assert np.array_equal(m.audio[0].X[~zero_rows], r.audio[0].X[~zero_rows])
    again = mask_modality(r, "audio", MaskSpec(0.25, seed=3))
    assert np.array_equal(again.audio[0].X, m.audio[0].X)


def test_mask_noise_fill():
    r = _record(L=16)
    m = mask_modality(r, "audio", MaskSpec(0.5, fill="gaussian_noise", seed=1))
    changed = np.any(m.audio[0].X != r.audio[0].X, axis=1)
    assert changed.sum() == 8
    with pytest.raises(ConfigError):
        mask_modality(r, "audio", MaskSpec(0.5, fill="ones"))
