import math

import numpy as np
import pytest

from oracles import oracle_hd95, random_mask
from segguided import kernels, metrics
from segguided.metrics import (
    apply_empty_policy,
    dsc,
    empty_policy,
    evaluate_case,
    evaluate_cohort,
    hd95,
    read_case_csv,
    sensitivity_specificity,
    summary_rows,
    write_case_csv,
    write_summary_csv,
)

BACKENDS = ["python"] + (["cython"] if kernels.compiled_backend is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    mod = kernels.python_backend if request.param == "python" else kernels.compiled_backend
    monkeypatch.setattr(kernels, "surface", mod.surface)
    monkeypatch.setattr(kernels, "squared_edt", mod.squared_edt)
    return request.param


# ------------------------------------------------------------ HD95


def test_hd95_random_masks_match_all_pairs(backend):
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(200):
        shape = tuple(int(s) for s in rng.integers(2, 13, size=3))
        a, b = random_mask(rng, shape), random_mask(rng, shape)
        spacing = (1.0, 1.0, 1.0) if rng.random() < 0.5 else tuple(rng.uniform(0.5, 2.0, 3))
        expected = oracle_hd95(a, b, np.array(spacing))
        got = hd95(a, b, spacing)
        if math.isinf(expected):
            assert math.isinf(got)
        else:
            assert abs(got - expected) < 1e-9
            checked += 1
    assert checked > 150


def test_hd95_single_voxels(backend):
    a = np.zeros((8, 8, 8), bool)
    b = np.zeros((8, 8, 8), bool)
    a[1, 1, 1] = True
    b[4, 5, 1] = True
    assert hd95(a, b) == pytest.approx(5.0, abs=1e-12)
    assert hd95(a, b, (2.0, 1.0, 1.0)) == pytest.approx(math.sqrt(52), abs=1e-12)


def test_hd95_two_voxels_three_apart(backend):
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros((6, 6, 6), bool)
    a[1, 2, 2] = True
    b[4, 2, 2] = True
    assert hd95(a, b) == 3.0


def test_hd95_empty_cases(backend):
    z = np.zeros((4, 4, 4), bool)
    o = z.copy()
    o[1, 1, 1] = True
    assert hd95(z, z) == 0.0
    assert math.isinf(hd95(o, z)) and math.isinf(hd95(z, o))


def test_hd95_symmetry_identity_and_translation(backend):
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = np.zeros((16, 16, 16), bool)
        b = np.zeros((16, 16, 16), bool)
        a[3:11, 3:11, 3:11] = random_mask(rng, (8, 8, 8))
        b[3:11, 3:11, 3:11] = random_mask(rng, (8, 8, 8))
        if not a.any() or not b.any():
            continue
        assert hd95(a, b) == pytest.approx(hd95(b, a), abs=1e-12)
        assert hd95(a, a) == 0.0
        shift = tuple(int(s) for s in rng.integers(-3, 4, 3))
        sa, sb = np.roll(a, shift, (0, 1, 2)), np.roll(b, shift, (0, 1, 2))
        assert hd95(sa, sb) == pytest.approx(hd95(a, b), abs=1e-9)
        assert hd95(a, b, (2.5, 2.5, 2.5)) == pytest.approx(2.5 * hd95(a, b), abs=1e-9)


def test_kernels_agree():
    if kernels.compiled_backend is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(0)
    py, cy = kernels.python_backend, kernels.compiled_backend
    for _ in range(30):
        shape = tuple(int(s) for s in rng.integers(1, 20, 3))
        m = (rng.random(shape) < rng.uniform(0.01, 0.5)).astype(np.uint8)
        np.testing.assert_array_equal(py.surface(m), cy.surface(m))
        sp = tuple(float(s) for s in rng.uniform(0.3, 3.0, 3))
        np.testing.assert_allclose(py.squared_edt(m, sp), cy.squared_edt(m, sp), rtol=1e-12, atol=1e-12)
    empty = np.zeros((3, 4, 5), np.uint8)
    assert np.isinf(cy.squared_edt(empty, (1.0, 1.0, 1.0))).all()
    assert np.isinf(py.squared_edt(empty, (1.0, 1.0, 1.0))).all()


# ------------------------------------------------------------ overlap metrics


def test_dsc_hand_values():
    p = np.zeros(10, bool)
    g = np.zeros(10, bool)
    p[:5] = True
    g[2:7] = True
    assert dsc(p, g) == pytest.approx(0.6, abs=1e-5)
    assert dsc(p, g, eps=0) == 0.6
    assert dsc(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    # |P|=6, |G|=4, |P & G|=3
    p6, g4 = np.zeros(12, bool), np.zeros(12, bool)
    p6[:6] = True
    g4[3:7] = True
    assert dsc(p6, g4) == (6 + 1e-5) / (10 + 1e-5)
    assert dsc(p6, g4, eps=0) == 0.6
    assert dsc(p, ~p) == pytest.approx(0.0, abs=1e-5)


def test_sensitivity_specificity_hand_values():
    gt = np.array([1, 1, 1, 1] + [0] * 12, bool)
    pred = np.array([1, 1, 1, 0] + [1, 1] + [0] * 10, bool)
    sens, spec = sensitivity_specificity(pred, gt)
    assert sens == 0.75 and spec == pytest.approx(10 / 12, abs=1e-15)
    assert sensitivity_specificity(np.zeros(3, bool), np.zeros(3, bool)) == (1.0, 1.0)
    assert sensitivity_specificity(np.ones(3, bool), np.ones(3, bool)) == (1.0, 1.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros(3, bool), np.zeros(4, bool))


# ------------------------------------------------------------ cohort handling


def test_empty_policy():
    assert empty_policy([2.0, math.inf, 5.0, math.inf, 9.0]) == [2.0, 9.0, 5.0, 9.0, 9.0]
    assert empty_policy([1.0, 2.0]) == [1.0, 2.0]
    with pytest.raises(ValueError):
        empty_policy([math.inf, math.inf])


def _labels(seed, shape=(12, 12, 12)):
    rng = np.random.default_rng(seed)
    lab = np.zeros(shape, np.uint8)
    lab[3:9, 3:9, 3:9] = 2
    lab[4:8, 4:8, 4:8] = 1
    lab[5:7, 5:7, 5:7] = 3
    noise = rng.random(shape) < 0.05
    lab[noise] = rng.integers(0, 4, noise.sum())
    return lab


def test_evaluate_case_perfect():
    lab = _labels(0)
    c = evaluate_case("a", lab, lab)
    for r in ("ET", "TC", "WT"):
        assert c.regions[r]["dice"] == 1.0
        assert c.regions[r]["hd95"] == 0.0
    assert c.mean_dice() == 1.0


def test_evaluate_case_uses_compound_regions():
    gt = _labels(1)
    pred = gt.copy()
    pred[pred == 3] = 1  # ET predicted as NCR: TC and WT unchanged
    c = evaluate_case("a", pred, gt)
    assert c.regions["TC"]["dice"] == 1.0 and c.regions["WT"]["dice"] == 1.0
    assert c.regions["ET"]["dice"] < 1e-3
    assert math.isinf(c.regions["ET"]["hd95"])


def test_cohort_imputation_and_summary(tmp_path):
    refs = {f"S{i}": _labels(i) for i in range(4)}
    preds = dict(refs)
    et_free = refs["S2"].copy()
    et_free[et_free == 3] = 1
    preds["S2"] = et_free
    preds["S1"] = np.roll(refs["S1"], 1, axis=0)
    cases, summary = evaluate_cohort(preds, refs)
    assert [c.subject_id for c in cases] == ["S0", "S1", "S2", "S3"]
    et = [c.regions["ET"]["hd95"] for c in cases]
    assert all(math.isfinite(v) for v in et)
    assert et[2] == max(et[0], et[1], et[3])
    assert cases[2].hd95_imputed == ("ET",) and summary.n_imputed["ET"] == 1
    dice = [c.regions["WT"]["dice"] for c in cases]
    assert summary.stats["WT"]["dice"]["std"] == pytest.approx(np.std(dice), abs=1e-15)
    assert summary.mean_dice_et_tc_wt == pytest.approx(
        np.mean([np.mean([c.regions[r]["dice"] for c in cases]) for r in ("ET", "TC", "WT")]))

    write_case_csv(cases, tmp_path / "cases.csv")
    back = read_case_csv(tmp_path / "cases.csv")
    assert [c.row() for c in back] == [c.row() for c in cases]
    write_summary_csv(summary, tmp_path / "summary.csv")
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "# schema_version: 1"
    assert [r["region"] for r in summary_rows(summary)] == [
        "ET", "TC", "WT", "NCR*", "ED*", "ET*", "Mean (ET+TC+WT)"]


def test_cohort_missing_prediction_named():
    refs = {"A": _labels(0), "B": _labels(1)}
    with pytest.raises(KeyError, match="B"):
        evaluate_cohort({"A": refs["A"]}, refs)


def test_apply_empty_policy_is_per_region():
    gt = _labels(3)
    no_et = gt.copy()
    no_et[no_et == 3] = 1
    cases = [evaluate_case("a", no_et, gt), evaluate_case("b", gt, gt)]
    out = apply_empty_policy(cases)
    # only ET was infinite; the cohort's ET maximum is 0.0
    assert out[0].regions["ET"]["hd95"] == 0.0
    assert out[0].regions["WT"]["hd95"] == cases[0].regions["WT"]["hd95"]
    assert math.isinf(cases[0].regions["ET"]["hd95"])


def test_csv_rejects_unknown_schema(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("# schema_version: 2\nsubject_id\n")
    with pytest.raises(ValueError):
        read_case_csv(p)
    p.write_text("subject_id\n")
    with pytest.raises(ValueError):
        read_case_csv(p)


def test_backend_flag():
    assert metrics.kernels.BACKEND in ("cython", "python")
