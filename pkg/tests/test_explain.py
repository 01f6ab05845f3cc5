import numpy as np
import pytest

from dntclone.blackbox import DEFAULT_CHIP, BlackBox, ChipBlackBox
from dntclone.dnt import DntClone, DntConfig, FlaggedTrainingSet, SamplingStrategy, _new_slot, bootstrap
from dntclone.explain import Rule, collapse, extract_rules, parse, render, rule_line
from dntclone.neural import TrainConfig
from dntclone.regtree import RegressionTree, SplitCandidate, TreeNode


def cfg(**kw):
    base = dict(seed_count=600, tree_depth=1, train=TrainConfig(steps_per_call=1))
    base.update(kw)
    return DntConfig(**base)


@pytest.fixture(scope="module")
def chip_clone():
    return bootstrap(ChipBlackBox(), DntConfig(seed_count=3000, tree_depth=6, train=TrainConfig(steps_per_call=1)))


def test_single_slot_gives_empty_conjunction():
    clone = bootstrap(BlackBox(lambda X: np.zeros(len(X)), [(0, 1)] * 2), cfg(seed_count=50))
    rules = extract_rules(clone)
    assert len(rules) == 1
    assert rules[0].conjunction == ()
    assert rule_line(rules[0]).startswith("IF TRUE THEN slot 0")


def hand_built_clone():
    root = TreeNode(0, 2, 0.5, split=SplitCandidate(1, 2.49),
                    left=TreeNode(1, 1, 0.0, leaf_id=0), right=TreeNode(1, 1, 1.0, leaf_id=1))
    tree = RegressionTree(root, 1, 18)
    config = cfg()
    sampler = SamplingStrategy("targeted", DEFAULT_CHIP.sampling_ranges(), 0)
    paths = tree.paths()
    slots = [_new_slot(k, [k], paths[k], sampler.ranges, config, 18) for k in (0, 1)]
    return DntClone(tree, slots, sampler, config, FlaggedTrainingSet(18))


def test_depth_one_split_renders_pin_names():
    rules = extract_rules(hand_built_clone(), DEFAULT_CHIP)
    assert [r.conjunction[0][:2] for r in rules] == [("Enable Input", "<="), ("Enable Input", ">")]
    lines = render(rules).splitlines()
    assert lines[1].startswith("IF Enable Input <= 2.490 THEN slot 0")
    assert lines[2].startswith("IF Enable Input > 2.490 THEN slot 1")


def test_missing_pin_name_rejected():
    with pytest.raises(ValueError):
        extract_rules(hand_built_clone(), ["Vcc"])


def test_rules_are_faithful(chip_clone):
    rules = extract_rules(chip_clone, DEFAULT_CHIP)
    fl = chip_clone.flagged
    for r in rules:
        for x in fl.X[fl.flag == r.slot_id][:50]:
            assert r.holds(x, DEFAULT_CHIP.names)


def test_rules_partition_inputs(chip_clone):
    rules = extract_rules(chip_clone, DEFAULT_CHIP)
    X = chip_clone.sampler.uniform(300)
    for x in X:
        assert sum(r.holds(x, DEFAULT_CHIP.names) for r in rules) == 1


def test_chip_rules_find_the_enable_threshold(chip_clone):
    rules = extract_rules(chip_clone, DEFAULT_CHIP)
    near = [t for r in rules for pin, _, t in r.conjunction
            if pin in ("Enable Input", "Enable Output") and abs(t - 2.5) < 0.1]
    assert near


def test_collapse_keeps_tightest_bounds():
    conj = [("a", "<=", 5.0), ("b", ">", 1.0), ("a", "<=", 3.0), ("a", ">", 0.5), ("a", ">", 1.0)]
    assert collapse(conj) == [("a", ">", 1.0), ("a", "<=", 3.0), ("b", ">", 1.0)]


def test_json_keeps_verbatim_path():
    r = Rule(0, (("a", "<=", 5.0), ("a", "<=", 3.0)), 4, 0.5, 1.0)
    assert parse(render([r], "json"))[0].conjunction == r.conjunction
    assert "a <= 3.000" in render([r]) and "5.000" not in render([r])


def test_empty_document_has_header():
    assert render([]) == "# 0 rule(s)\n"
    assert parse(render([], "json")) == []


def test_json_roundtrip(chip_clone):
    doc = render(extract_rules(chip_clone, DEFAULT_CHIP), "json")
    assert render(parse(doc), "json") == doc


def test_render_orders_by_slot_and_rejects_unknown_format():
    a, b = Rule(1, (), 0, None, None), Rule(0, (), 0, None, None)
    assert [r.slot_id for r in parse(render([a, b], "json"))] == [0, 1]
    with pytest.raises(ValueError):
        render([a], "xml")
