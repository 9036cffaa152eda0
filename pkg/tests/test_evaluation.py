import numpy as np
import pytest

from wctdefense import attacks as A
from wctdefense import defense as D
from wctdefense import evaluation as E
from wctdefense import gallery as G
from wctdefense import model as M
from wctdefense.errors import ConfigError


@pytest.fixture(scope="module")
def env(tiny_model, mnist_small):
    train, test = mnist_small
    gals = G.build_galleries(tiny_model, train.images, train.labels, [0, 1, 2, 3], samples_per_class=15, seed=2)
    x, y = test.images[:30], test.labels[:30]
    adv = A.run_attack(tiny_model, x, y, A.AttackConfig("FGSM", 0.3))
    return tiny_model, gals, (x, y), adv


def report(cells, rows=("a", "b"), cols=("x",)):
    return E.ExperimentReport("demo", "toy", "h", list(rows), list(cols), cells)


def test_report_validation():
    ok = E.Cell("a", "x", "none", "none", "accuracy", 0.5)
    report([ok])
    with pytest.raises(ConfigError, match="outside the declared grid"):
        report([E.Cell("z", "x", "none", "none", "accuracy", 0.5)])
    with pytest.raises(ConfigError, match="duplicate"):
        report([ok, ok])
    with pytest.raises(ConfigError, match=r"\[0, 1\]"):
        report([E.Cell("a", "x", "none", "none", "accuracy", 1.5)])
    # non-accuracy metrics may be negative (e.g. a clean gap)
    report([E.Cell("a", "x", "none", "none", "clean_gap", -0.1)])


def test_grid_csv_and_json(tmp_path):
    r = report([E.Cell("a", "x", "FGSM_0.3", "tap3", "accuracy", 0.25),
                E.Cell("b", "x", "FGSM_0.3", "tap3", "nn_accuracy_tap1", None)])
    assert r.grid == [[0.25], [None]]
    assert r.value("a", "x") == 0.25
    with pytest.raises(KeyError):
        r.value("a", "y")
    rows = E.read_csv(E.write_csv([r], tmp_path / "r.csv"))
    assert list(rows[0]) == list(E.CSV_COLUMNS)
    assert rows[0]["value"] == "0.25" and rows[1]["value"] == E.ABSENT
    back = E.read_json(E.write_json(r, tmp_path / "r.json"))
    assert back.to_dict() == r.to_dict()


def test_read_json_rejects_foreign(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ConfigError):
        E.read_json(tmp_path / "x.json")


def test_placement_names():
    assert E.placement_name((3,), [1, 2, 3]) == "tap3"
    assert E.placement_name((3, 1), [1, 2, 3]) == "tap1+tap3"
    assert E.placement_name((1, 2, 3), [1, 2, 3]) == "all"
    assert E.placement_name((1,), [1]) == "tap1"


def test_drift_table(env):
    model, gals, clean, adv = env
    r = E.drift_table(model, {k: gals[k] for k in (1, 2, 3)}, clean, adv, "mnist")
    assert r.rows == ["clean", "adversarial"] and r.columns == ["tap1", "tap2", "tap3"]
    for k in (1, 2, 3):
        f = G.layer_features(model, adv.images, k)
        assert r.value("adversarial", f"tap{k}") == G.nn_accuracy_from_features(gals[k], f, adv.labels)
    with pytest.raises(ConfigError):
        E.drift_table(model, {1: gals[1]}, clean, adv)
    with pytest.raises(ConfigError):
        E.drift_table(model, {1: gals[1], 2: gals[1], 3: gals[3]}, clean, adv)


def test_refinement_matrix_absent_cells_and_none_row(env):
    model, gals, clean, adv = env
    taps_g = {k: gals[k] for k in (1, 2, 3)}
    r = E.refinement_matrix(model, taps_g, gals[0], adv)
    assert r.rows == ["none", "tap1", "tap2", "tap3", "all"]
    assert r.columns == ["tap1", "tap2", "tap3", "model"]
    assert r.value("tap3", "tap1") is None and r.value("tap3", "tap2") is None
    assert r.value("tap2", "tap1") is None and r.value("tap2", "tap3") is not None
    assert all(v is not None for v in r.grid[0] + r.grid[-1])
    drift = E.drift_table(model, taps_g, clean, adv)
    for k in (1, 2, 3):
        assert r.value("none", f"tap{k}") == drift.value("adversarial", f"tap{k}")
    assert r.value("none", "model") == float(np.mean(adv.predictions == adv.labels))
    with pytest.raises(ConfigError):
        E.refinement_matrix(model, taps_g, gals[0], adv, placements=[(4,)])


def test_robustness_table(env):
    model, gals, clean, adv = env
    noise = A.run_attack(model, *clean, A.AttackConfig("SALT_PEPPER"))
    r = E.robustness_table(model, gals[0], clean, [adv, noise], [(3,), (1, 2, 3)])
    assert r.rows == ["clean", "FGSM_0.3", "SALT_PEPPER_0.1", "clean_gap"]
    assert r.columns == ["no_attack", "no_defense", "tap3", "all"]
    vanilla = M.accuracy(model, *clean)
    assert r.value("clean", "no_defense") == vanilla == r.metadata["vanilla_clean_accuracy"]
    assert r.value("FGSM_0.3", "no_defense") == M.accuracy(model, adv.images, adv.labels)
    for p in ("tap3", "all"):
        assert r.value("clean_gap", p) == pytest.approx(vanilla - r.value("clean", p))
        assert r.metadata["clean_gap"][p] == r.value("clean_gap", p)
    assert r.grid[-1][:2] == [None, None]


def test_reference_ablation(env):
    model, gals, _, adv = env
    r = E.reference_ablation(model, adv, {k: gals[k] for k in (1, 2, 3)}, gals[0], seed=3)
    assert r.rows == ["image_nn", "tap1_nn", "tap2_nn", "tap3_nn", "correct_class", "ground_truth"]
    assert r.metadata["oracle"] == {"image_nn": False, "tap1_nn": False, "tap2_nn": False, "tap3_nn": False,
                                    "correct_class": True, "ground_truth": True}
    refs, _ = D.nn_references(model, gals[0], adv.images)
    z, _ = D.defended_forward(model, adv.images, refs, (3,))
    assert r.value("image_nn", "accuracy") == float(np.mean(np.argmax(z, 1) == adv.labels))
    with pytest.raises(ConfigError):
        E.reference_ablation(model, adv, {}, gals[0], sources=["wizard"])


def test_epsilon_sweep(env):
    model, gals, clean, _ = env
    cfg = A.AttackConfig("FGSM")
    r = E.epsilon_sweep(model, gals[0], clean, cfg, [0.0, 0.3], D.DefenseConfig())
    assert r.rows == ["0", "0.3"] and r.columns == ["no_defense", "defended"]
    assert r.value("0", "no_defense") == M.accuracy(model, *clean)
    frozen = {0.3: A.run_attack(model, *clean, A.with_epsilon(cfg, 0.3))}
    again = E.epsilon_sweep(model, gals[0], clean, cfg, [0.0, 0.3], D.DefenseConfig(), adv_sets=frozen)
    assert again.grid == r.grid
    with pytest.raises(ConfigError):
        E.epsilon_sweep(model, gals[0], clean, cfg, [0.3, 0.1])
