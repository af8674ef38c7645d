import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import tiny_setup
from hgda.adapt import (
    AdaptationConfig,
    AdaptedModel,
    EvalReport,
    LeakageError,
    adapt,
    check_leakage,
    evaluate,
    prf,
    run_protocol,
    span_counts,
    write_table,
)
from hgda.corpus import Sentence
from hgda.sampler import Episode
from oracles import span_prf
from strategies import tag_sequences


@pytest.fixture(scope="module")
def setup():
    return tiny_setup()


# --- metrics ---------------------------------------------------------------------


def test_prf_edge_cases():
    assert prf(0, 0, 0) == (0.0, 0.0, 0.0)
    assert prf(0, 3, 0) == (0.0, 0.0, 0.0)
    assert prf(2, 4, 2) == (0.5, 1.0, pytest.approx(2 / 3))


def test_span_counts_exact_match_only():
    gold = [["B-A", "I-A", "O"]]
    assert span_counts(gold, [["B-A", "O", "O"]]) == (0, 1, 1)  # boundary mismatch
    assert span_counts(gold, [["B-B", "I-B", "O"]]) == (0, 1, 1)  # type mismatch
    assert span_counts(gold, gold) == (1, 1, 1)


@given(st.lists(st.tuples(tag_sequences(), st.integers(0, 2**31)), min_size=1, max_size=6))
def test_metrics_match_independent_scan(pairs):
    gold, pred = [], []
    for tags, s in pairs:
        gold.append(tags)
        rng = np.random.default_rng(s)
        # blank random tokens; an orphaned I- becomes B- so the prediction stays valid IOB2
        p = list(tags)
        for i in range(len(p)):
            if rng.random() < 0.3:
                p[i] = "O"
                if i + 1 < len(p) and p[i + 1].startswith("I-"):
                    p[i + 1] = "B-" + p[i + 1][2:]
        pred.append(p)
    tp, n_pred, n_gold = span_counts(gold, pred)
    want = span_prf(gold, pred)
    assert prf(tp, n_pred, n_gold) == pytest.approx(want[:3])


# --- adaptation ----------------------------------------------------------------------


def test_adapt_uses_fresh_crf_and_copies_theta(setup):
    trained = setup.init_params(0)
    before = trained.copy()
    ep = setup.target_train[:5]
    m = adapt(trained, setup.net, ep, setup.target_tags, AdaptationConfig(adapt_steps=3, base_lr=0.1), seed=0)
    assert trained.equal(before)
    assert m.params.omega is None
    assert m.params.phi["proj"].shape[1] == len(setup.target_tags)
    assert m.steps_run == 3
    assert not np.array_equal(m.params.theta["fwd_W"], trained.theta["fwd_W"])


def test_adapt_can_overfit_and_stops_early(setup):
    ep = [s for s in setup.target_train if s.has_entity][:3]
    cfg = AdaptationConfig(adapt_steps=400, base_lr=0.5, dropout=0.0, stop_nll=1e-2)
    m = adapt(setup.init_params(0), setup.net, ep, setup.target_tags, cfg, seed=0)
    assert m.final_nll < 1e-2 and m.steps_run < 400
    res = evaluate(m, setup.net, ep)
    assert res["n_gold"] >= 3 and res["f1"] == 1.0


def test_adapt_rejects_empty(setup):
    with pytest.raises(ValueError):
        adapt(setup.init_params(0), setup.net, [], setup.target_tags, AdaptationConfig(), seed=0)


def test_evaluate_counts(setup):
    test = setup.target_test[:10]
    params = setup.init_params(0)
    m = AdaptedModel(adapt(params, setup.net, test[:2], setup.target_tags,
                           AdaptationConfig(adapt_steps=1), 0).params, setup.target_tags)
    res = evaluate(m, setup.net, test)
    assert res["n_gold"] == sum(len([t for t in s.tags if t.startswith("B-")]) for s in test)
    assert 0 <= res["f1"] <= 1


# --- protocol ----------------------------------------------------------------------------


def test_leakage_guard():
    a = Sentence(("x",), ("O",))
    ep = Episode(1, 0, (0,), [a], [a])
    with pytest.raises(LeakageError):
        check_leakage(ep)
    twin = Sentence(("x",), ("O",))
    assert check_leakage(Episode(1, 0, (0,), [twin], [a])) == 1


def test_run_protocol_structure_and_workers(setup):
    cfg = AdaptationConfig(target_size=5, repeats=4, adapt_steps=2)
    a = run_protocol(setup.init_params(0), setup.net, setup.target_train, setup.target_test, cfg, 7,
                     setup.target_tags, target="Disease")
    b = run_protocol(setup.init_params(0), setup.net, setup.target_train, setup.target_test,
                     AdaptationConfig(target_size=5, repeats=4, adapt_steps=2, workers=3), 7,
                     setup.target_tags, target="Disease")
    assert [r["repeat"] for r in a.repeats] == [0, 1, 2, 3]
    assert all(len(r["indices"]) == 5 for r in a.repeats)
    assert a.repeats == b.repeats
    assert len(a.manifest["episodes"]) == 4
    assert set(a.mean) == {"precision", "recall", "f1"}


def test_report_csv_and_table(tmp_path):
    rows = [{"repeat": i, "precision": 0.5, "recall": 0.25, "f1": 1 / 3} for i in range(2)]
    reps = [EvalReport("Disease", "hgda", 5, 0, rows, config_hash="abc"),
            EvalReport("Drug", "hgda", 5, 0, [dict(r, f1=0.5) for r in rows]),
            EvalReport("Disease", "uniform", 10, 0, rows)]
    parsed = list(csv.DictReader(io.StringIO(reps[0].to_csv())))
    assert [r["repeat"] for r in parsed] == ["0", "1", "mean"]
    assert parsed[-1]["config_hash"] == "abc" and parsed[-1]["version"]
    jpath, cpath = reps[0].write(tmp_path, "r")
    assert jpath.exists() and cpath.exists()
    table = list(csv.reader(io.StringIO(write_table(tmp_path / "t.csv", reps).read_text())))
    assert table[0] == ["size", "method", "Disease", "Drug", "Overall"]
    assert table[1] == ["5", "hgda", "0.3333", "0.5000", "0.4167"]
    assert table[2] == ["10", "uniform", "0.3333", "", "0.3333"]


def test_config_validation():
    with pytest.raises(ValueError):
        AdaptationConfig(repeats=0)
    with pytest.raises(ValueError):
        AdaptationConfig(share_policy="everything")
    assert AdaptationConfig(target_size=32, base_lr=0.1).lr == 0.1
