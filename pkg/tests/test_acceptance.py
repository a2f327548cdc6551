"""Acceptance checks, one group per criterion; the terminal summary prints PASS/FAIL per criterion."""
import json
import time

import numpy as np
import pytest

from helpers import lstsq_oracle, planted_track
from jcafusion import linalg_ad as ad
from jcafusion.cli import DEFAULTS, eval_report, evaluate_records, main, missing_audio_curve, train_model
from jcafusion.dataio import (
    AnnotationTrack, SyntheticSpec, gen_synthetic, load_features, load_labels, save_features, save_labels,
)
from jcafusion.errors import FormatError
from jcafusion.fusion import FusionModel, JcaParams, ModelDims, concat_baseline_forward, jca_forward
from jcafusion.objective import ccc, ccc_loss
from jcafusion.postprocess import PostprocChain, fit_chain, grid_search_postproc

SEEDS = (42, 43, 44)
VARIANTS = ("audio", "visual", "concat", "ca", "jca")
FRACTIONS = (0.0, 0.1, 0.25, 0.5, 1.0)


def criterion(cid, title):
    return pytest.mark.criterion(cid, title)


# --- 1 -----------------------------------------------------------------------------------

@criterion("1", "gradient oracle on the full JCA + head + CCC loss graph")
def test_gradient_oracle(record_property):
    dims = ModelDims(L=8, d_a=8, d_v=8, k=4, h_head=5)
    rng = np.random.default_rng(0)
    X_a, X_v = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    gt = rng.uniform(-1, 1, size=(8, 2))
    model = FusionModel.create("jca", dims, seed=1)

    def f():
        pred, _ = model.forward([X_a], [X_v], dropout_p=0.0, training=False)
        return ccc_loss(pred, gt)

    t0 = time.perf_counter()
    rep = ad.finite_diff_check(f, model.parameters())
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max rel err {rep.max_rel_error:.2e} over {rep.n_checked} entries, {elapsed:.2f}s")
    assert rep.n_checked == sum(p.value.size for p in model.parameters())
    assert rep.max_rel_error < 1e-4, f"worst entry {rep.worst_param}{rep.worst_index}"
    assert elapsed < 10.0


# --- 2 -----------------------------------------------------------------------------------

@criterion("2", "CCC identities")
def test_ccc_identities():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(2, 64))
        x = rng.normal(size=n) * rng.uniform(0.01, 5) + rng.normal()
        y = rng.normal(size=n) * rng.uniform(0.01, 5) + rng.normal()
        assert ccc(x, x).rho_c == pytest.approx(1.0, abs=1e-12)
        a, b = ccc(x, y).rho_c, ccc(y, x).rho_c
        assert a == pytest.approx(b, abs=1e-12)
        assert -1.0 <= a <= 1.0
    assert ccc([1, 2, 3], [3, 2, 1]).rho_c == pytest.approx(-1.0, abs=1e-12)
    deg = ccc([0.5, 0.5, 0.5], [0.5, 0.5, 0.5])
    assert deg.rho_c == 0.0 and deg.degenerate


# --- 3 -----------------------------------------------------------------------------------

@criterion("3", "JCA with zeroed attention equals concat bit-for-bit")
def test_residual_equivalence():
    dims = ModelDims(L=10, d_a=6, d_v=5, k=4, h_head=12)
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        X_a, X_v = rng.normal(size=(10, 6)), rng.normal(size=(10, 5))
        jca = JcaParams.init("jca", dims, seed=i)
        for name in ("W_ha", "W_hv", "W_a", "W_v", "W_ca", "W_cv"):
            jca[name].value = np.zeros_like(jca[name].value)
        cat = JcaParams.zeros("concat", dims)
        cat.load_arrays({n: jca[n].value for n in cat.names()})
        a, _ = jca_forward(X_a, X_v, jca)
        b = concat_baseline_forward(X_a, X_v, cat)
        assert np.array_equal(a.value, b.value)


# --- 4 and 5 share trained models ----------------------------------------------------------

@pytest.fixture(scope="module")
def complementary():
    spec = SyntheticSpec(n_sequences=64, L=16, d_a=16, d_v=16, complementary_split=0.5, noise_std=0.1, seed=42)
    records, _ = gen_synthetic(spec)
    return spec, records


@pytest.fixture(scope="module")
def trained(complementary):
    _, records = complementary
    runs, t0 = {}, time.perf_counter()
    for seed in SEEDS:
        cfg = json.loads(json.dumps(DEFAULTS))
        cfg["seed"] = seed
        cfg["train"]["seed"] = seed
        for v in VARIANTS:
            model, result = train_model(cfg, records, v)
            best = result.log[result.best_epoch - 1]
            runs[seed, v] = {"model": model, "mean": result.best_val_ccc,
                             "valence": best.val_ccc_valence, "arousal": best.val_ccc_arousal}
    return runs, time.perf_counter() - t0


def _fmt(runs, seed):
    return " ".join(f"{v}={runs[seed, v]['mean']:.3f}" for v in VARIANTS)


@pytest.mark.slow
@criterion("4a", "JCA beats audio-only, visual-only and concat on 3 seeds")
def test_jca_beats_unimodal_and_concat(trained, complementary, record_property):
    runs, elapsed = trained
    spec, _ = complementary
    _, a = lstsq_oracle(spec, "a")
    _, v = lstsq_oracle(spec, "v")
    _, av = lstsq_oracle(spec, "av")
    margins = [runs[s, "jca"]["mean"] - max(runs[s, "audio"]["mean"], runs[s, "visual"]["mean"]) for s in SEEDS]
    record_property("detail", f"oracle gap {av - max(a, v):.3f}, JCA margin over best unimodal "
                              + "/".join(f"{m:.3f}" for m in margins) + f", {elapsed:.0f}s")
    for s in SEEDS:
        record_property("detail", f"seed {s}: {_fmt(runs, s)}")
        jca = runs[s, "jca"]["mean"]
        for rival in ("audio", "visual", "concat"):
            assert jca > runs[s, rival]["mean"], f"seed {s}: jca {jca:.4f} <= {rival} {runs[s, rival]['mean']:.4f}"
    assert elapsed < 600


@pytest.mark.slow
@criterion("4b", "JCA not below vanilla cross-attention on 3 seeds")
def test_jca_not_below_vanilla_cross_attention(trained, record_property):
    runs, _ = trained
    for s in SEEDS:
        jca, ca = runs[s, "jca"]["mean"], runs[s, "ca"]["mean"]
        record_property("detail", f"seed {s}: jca {jca:.3f} ca {ca:.3f}")
    for s in SEEDS:
        jca, ca = runs[s, "jca"]["mean"], runs[s, "ca"]["mean"]
        assert jca >= ca, f"seed {s}: jca {jca:.4f} < ca {ca:.4f}"


@pytest.mark.slow
def test_ablation_jca_row_not_below_concat(trained):
    runs, _ = trained
    for s in SEEDS:
        for t in ("valence", "arousal"):
            assert runs[s, "jca"][t] >= runs[s, "concat"][t], f"seed {s} {t}"


@pytest.mark.slow
@criterion("5", "missing-audio robustness curve")
def test_missing_audio_curve(trained, complementary, record_property):
    runs, _ = trained
    _, records = complementary
    jca, visual = runs[42, "jca"]["model"], runs[42, "visual"]["model"]
    curve = [r["mean"] for r in missing_audio_curve(jca, records, FRACTIONS, "zeros", seed=0)]
    _, _, vis = evaluate_records(visual, [r for r in records if r.split == "test"])
    vis_mean = 0.5 * (vis["valence"] + vis["arousal"])
    record_property("detail", "curve " + " ".join(f"{c:.3f}" for c in curve) + f", visual-only {vis_mean:.3f}")
    for f0, f1, c0, c1 in zip(FRACTIONS, FRACTIONS[1:], curve, curve[1:]):
        assert c1 <= c0 + 0.02, f"CCC rises from {c0:.4f} at {f0} to {c1:.4f} at {f1}"
    assert curve[-1] >= vis_mean - 0.05, f"100% masked {curve[-1]:.4f} vs visual-only {vis_mean:.4f}"


# --- 6 -----------------------------------------------------------------------------------

@criterion("6", "post-processing plant-and-recover")
@pytest.mark.parametrize("r,shift,seed", [(1, 1, 10), (2, 4, 11), (3, 2, 12), (5, 7, 13)])
def test_plant_and_recover(r, shift, seed):
    pred, gt, _ = planted_track(r, shift, seed)
    windows, shifts = list(range(1, 4 * r + 8, 2)), list(range(0, 2 * shift + 4))
    chain = grid_search_postproc(pred, gt, windows, shifts)
    assert (chain.median_window, chain.shift) == (2 * r + 1, shift)
    p, g = chain.apply(pred, gt)
    assert ccc(p, g).rho_c >= fit_chain(pred, gt, 1, 0)[1]
    assert ccc(p, g).rho_c >= ccc(pred, gt).rho_c


@criterion("6", "post-processing plant-and-recover")
def test_postproc_never_lowers_fitting_split_ccc(tmp_path):
    records, _ = gen_synthetic(SyntheticSpec(n_sequences=20, L=12, d_a=6, d_v=6, seed=5))
    cfg = json.loads(json.dumps(DEFAULTS))
    cfg["model"].update(k=4, h_head=16)
    cfg["train"].update(max_epochs=10)
    model, _ = train_model(cfg, records, "jca")
    report = eval_report(model, records, postproc=True, out=tmp_path)
    for t in ("valence", "arousal"):
        assert report["validation"][t]["postproc"] >= report["validation"][t]["raw"]
    assert PostprocChain().apply(np.arange(5.0)).tolist() == [0, 1, 2, 3, 4]


# --- 7 -----------------------------------------------------------------------------------

@criterion("7", "byte-identical single-threaded training runs")
def test_training_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("JCA_LOG", "quiet")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "data": {"n_sequences": 16, "L": 8, "d_a": 6, "d_v": 5},
        "model": {"k": 4, "h_head": 16},
        "train": {"max_epochs": 8},
    }))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--config", str(cfg), "--manifest", str(tmp_path / "data" / "manifest.csv"),
                     "--seed", "42", "--threads", "1", "--out", str(out)]) == 0
        outs.append(out)
    for artifact in ("metrics.csv", "checkpoint.jck", "config.json"):
        assert (outs[0] / artifact).read_bytes() == (outs[1] / artifact).read_bytes(), artifact


# --- 8 -----------------------------------------------------------------------------------

@criterion("8", "AVF1/AVL1 round trips and corruption errors")
def test_format_round_trips(tmp_path):
    rng = np.random.default_rng(8)
    for i in range(20):
        X = rng.normal(size=(int(rng.integers(1, 30)), int(rng.integers(1, 30)))).astype(np.float32).astype(np.float64)
        save_features(tmp_path / f"{i}.avf", X)
        assert np.array_equal(load_features(tmp_path / f"{i}.avf").X, X)
        Y = rng.uniform(-1, 1, size=(X.shape[0], 2)).astype(np.float32).astype(np.float64)
        save_labels(tmp_path / f"{i}.avl", AnnotationTrack.from_matrix(Y))
        assert np.array_equal(load_labels(tmp_path / f"{i}.avl").as_matrix(), Y)


@criterion("8", "AVF1/AVL1 round trips and corruption errors")
@pytest.mark.parametrize("kind", ["features", "labels"])
def test_format_corruption(tmp_path, kind):
    path = tmp_path / "x.bin"
    if kind == "features":
        save_features(path, np.ones((4, 6)))
        load = load_features
    else:
        save_labels(path, AnnotationTrack.from_matrix(np.zeros((4, 2))))
        load = load_labels
    good = path.read_bytes()
    path.write_bytes(b"ZZZZ" + good[4:])
    with pytest.raises(FormatError, match="magic") as exc:
        load(path)
    assert exc.value.offset == 0
    path.write_bytes(good[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load(path)
    path.write_bytes(good[:6])
    with pytest.raises(FormatError, match="truncated"):
        load(path)
