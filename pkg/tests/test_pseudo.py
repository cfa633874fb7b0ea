"""Tests for prototype scoring, the entropy gate, and pseudo-label assignment."""

import math

import numpy as np
import pytest

from sscent import (
    DecisionKind,
    EntropyGate,
    GateDegenerateError,
    PrototypeBank,
    adaptive_weight,
    assign_pseudo_labels,
    class_probabilities,
    compute_e_min,
)
from sscent.vecmath import entropy

from conftest import unit_rows

# Hand-built probability table exercising every decision branch at
# tau=0.95, tau_ent=0.4, K=4.  Reference entropies and the interpolated
# weight for row 2 were computed at 50-digit precision.
FIXTURE_PROBS = np.array([
    [0.97, 0.01, 0.01, 0.01],
    [0.96, 0.02, 0.01, 0.01],
    [0.90, 0.06, 0.02, 0.02],
    [0.95, 0.05, 0.00, 0.00],
    [0.50, 0.30, 0.10, 0.10],
    [0.25, 0.25, 0.25, 0.25],
])
FIXTURE_ENTROPIES = [
    0.16770053683981004,
    0.20953297856776967,
    0.4201100273147717,
    0.19851524334587256,
    1.1682824501765625,
    1.3862943611198906,
]
FIXTURE_E_MIN = 0.20953297856776967
FIXTURE_ROW2_WEIGHT = 0.5116838316967641


def fixture_gate():
    return EntropyGate.for_classes(num_classes=4, tau=0.95, tau_ent=0.4,
                                   w_min=0.2)


# ---------------------------------------------------------------------------
# prototype bank


def test_bank_requires_unit_rows():
    rng = np.random.default_rng(0)
    protos = unit_rows(rng, 3, 5)
    PrototypeBank(prototypes=protos, class_ids=np.arange(3))
    with pytest.raises(ValueError):
        PrototypeBank(prototypes=protos * 2.0, class_ids=np.arange(3))


def test_bank_requires_class_id_permutation():
    rng = np.random.default_rng(1)
    protos = unit_rows(rng, 3, 4)
    with pytest.raises(ValueError):
        PrototypeBank(prototypes=protos, class_ids=np.array([0, 1, 1]))
    with pytest.raises(ValueError):
        PrototypeBank(prototypes=protos, class_ids=np.array([0, 1, 3]))


def test_bank_random_unit_and_deterministic():
    a = PrototypeBank.random(4, 6, np.random.default_rng(7))
    b = PrototypeBank.random(4, 6, np.random.default_rng(7))
    assert np.array_equal(a.prototypes, b.prototypes)
    norms = np.linalg.norm(a.prototypes, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-12
    assert np.array_equal(a.class_ids, np.arange(4))


def test_scores_by_class_reorders_shuffled_rows():
    p_a = np.array([1.0, 0.0])
    p_b = np.array([0.0, 1.0])
    # row 0 stores class 1, row 1 stores class 0
    bank = PrototypeBank(prototypes=np.stack([p_a, p_b]),
                         class_ids=np.array([1, 0]))
    z = np.array([[1.0, 0.0]])
    scores = bank.scores_by_class(z)
    # column k must belong to class k: class 0 lives in row 1 (p_b)
    assert scores[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert scores[0, 1] == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------------------
# gate construction


def test_for_classes_derived_quantities_exact():
    g = EntropyGate.for_classes(num_classes=5, tau=0.9, tau_ent=0.3)
    assert g.h_max == math.log(5)
    assert g.h_base == 0.3 * math.log(5)
    assert g.w_min == 0.2


def test_gate_rejects_inconsistent_h_max():
    with pytest.raises(ValueError):
        EntropyGate(tau=0.9, tau_ent=0.3, num_classes=5,
                    h_max=math.log(4), h_base=0.3 * math.log(4), w_min=0.2)


def test_gate_parameter_domains():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            EntropyGate.for_classes(num_classes=3, tau=bad, tau_ent=0.4)
        with pytest.raises(ValueError):
            EntropyGate.for_classes(num_classes=3, tau=0.9, tau_ent=bad)
    with pytest.raises(ValueError):
        EntropyGate.for_classes(num_classes=1, tau=0.9, tau_ent=0.4)


# ---------------------------------------------------------------------------
# class probabilities


def test_class_probabilities_two_orthogonal_prototypes():
    bank = PrototypeBank(prototypes=np.eye(2), class_ids=np.arange(2))
    probs = class_probabilities(np.array([1.0, 0.0]), bank, t_prime=1.0)
    expected = np.array([0.7310585786300049, 0.2689414213699951])
    assert np.max(np.abs(probs - expected)) < 1e-15


def test_class_probabilities_frozen_three_class():
    # z = (p0 + 0.5 p1)/sqrt(1.25) against the standard basis, T' = 0.1;
    # cosines are (2/sqrt5, 1/sqrt5, 0), probabilities frozen from a
    # 50-digit computation
    bank = PrototypeBank(prototypes=np.eye(3), class_ids=np.arange(3))
    z = (np.array([1.0, 0.0, 0.0]) + 0.5 * np.array([0.0, 1.0, 0.0]))
    z = z / np.sqrt(1.25)
    probs = class_probabilities(z, bank, t_prime=0.1)
    expected = np.array([0.9885785824697357,
                         0.01129242538602786,
                         0.0001289921442364551])
    assert np.max(np.abs(probs - expected) / expected) < 1e-12


def test_class_probabilities_identical_prototypes_uniform():
    p = np.array([0.6, 0.8])
    bank = PrototypeBank(prototypes=np.stack([p, p, p]),
                         class_ids=np.array([2, 0, 1]))
    probs = class_probabilities(np.array([0.0, 1.0]), bank, t_prime=0.1)
    assert np.max(np.abs(probs - 1.0 / 3.0)) < 1e-15


def test_class_probabilities_respects_class_id_order():
    bank = PrototypeBank(prototypes=np.eye(2)[::-1].copy(),
                         class_ids=np.array([1, 0]))
    probs = class_probabilities(np.array([1.0, 0.0]), bank, t_prime=1.0)
    # class 0's prototype is e0 (stored in row 1), so class 0 wins
    assert probs[0] > probs[1]


def test_class_probabilities_input_validation():
    bank = PrototypeBank(prototypes=np.eye(3), class_ids=np.arange(3))
    with pytest.raises(ValueError):
        class_probabilities(np.array([1.0, 0.0]), bank, t_prime=1.0)
    with pytest.raises(ValueError):
        class_probabilities(np.array([2.0, 0.0, 0.0]), bank, t_prime=1.0)
    with pytest.raises(ValueError):
        class_probabilities(np.array([1.0, 0.0, 0.0]), bank, t_prime=0.0)


# ---------------------------------------------------------------------------
# e_min and the adaptive weight


def test_compute_e_min_takes_max_over_confident():
    pairs = [(0.99, 0.1), (0.98, 0.3), (0.97, 0.2), (0.50, 9.9)]
    assert compute_e_min(pairs, tau=0.95) == 0.3


def test_compute_e_min_none_when_no_confident():
    assert compute_e_min([(0.5, 1.0), (0.6, 0.9)], tau=0.95) is None
    assert compute_e_min([], tau=0.95) is None


def test_compute_e_min_threshold_is_strict():
    assert compute_e_min([(0.95, 0.4)], tau=0.95) is None
    assert compute_e_min([(0.9500001, 0.4)], tau=0.95) == 0.4


def test_adaptive_weight_boundaries_exact():
    assert adaptive_weight(0.3, e_min=0.3, h_base=0.9, w_min=0.2) == 1.0
    assert adaptive_weight(0.9, e_min=0.3, h_base=0.9, w_min=0.2) == 0.2
    # clamping outside the interval
    assert adaptive_weight(0.1, e_min=0.3, h_base=0.9, w_min=0.2) == 1.0
    assert adaptive_weight(1.5, e_min=0.3, h_base=0.9, w_min=0.2) == 0.2


def test_adaptive_weight_midpoint():
    e_min, h_base = 0.3, 0.9
    w = adaptive_weight((e_min + h_base) / 2, e_min, h_base, w_min=0.2)
    assert abs(w - 0.6) < 1e-12


def test_adaptive_weight_degenerate_interval():
    with pytest.raises(GateDegenerateError):
        adaptive_weight(0.5, e_min=0.9, h_base=0.9, w_min=0.2)
    with pytest.raises(GateDegenerateError):
        adaptive_weight(0.5, e_min=1.0, h_base=0.9, w_min=0.2)


def test_adaptive_weight_monotone_sweep():
    e_min, h_base = 0.2, 1.1
    hs = np.linspace(0.0, 1.4, 1000)
    ws = [adaptive_weight(float(h), e_min, h_base, 0.2) for h in hs]
    assert all(a >= b for a, b in zip(ws, ws[1:]))
    assert all(0.2 <= w <= 1.0 for w in ws)


# ---------------------------------------------------------------------------
# full assignment


def test_fixture_entropies_match_reference():
    for row, expected in zip(FIXTURE_PROBS, FIXTURE_ENTROPIES):
        assert abs(entropy(row) - expected) < 1e-12


def test_assign_gate_on_full_decision_table():
    decisions = assign_pseudo_labels(FIXTURE_PROBS, fixture_gate(),
                                     lambda_reject=0.2,
                                     entropy_gate_enabled=True)
    kinds = [d.kind for d in decisions]
    assert kinds == [
        DecisionKind.CONFIDENT,
        DecisionKind.CONFIDENT,
        DecisionKind.ENTROPY_SELECTED,
        DecisionKind.ENTROPY_SELECTED,
        DecisionKind.REJECTED,
        DecisionKind.REJECTED,
    ]
    assert [d.assigned_label for d in decisions] == [0, 0, 0, 0, 8, 9]
    assert decisions[0].weight == 1.0
    assert decisions[1].weight == 1.0
    # row 2 sits strictly between e_min and h_base
    assert abs(decisions[2].weight - FIXTURE_ROW2_WEIGHT) < 1e-12
    # row 3 is non-confident (0.95 is not > 0.95) but its entropy is below
    # e_min, so it gets full weight
    assert decisions[3].weight == 1.0
    assert decisions[4].weight == 0.2
    assert decisions[5].weight == 0.2
    for d, h in zip(decisions, FIXTURE_ENTROPIES):
        assert abs(d.entropy - h) < 1e-12
    assert [d.sample_index for d in decisions] == list(range(6))
    assert decisions[0].max_prob == pytest.approx(0.97, abs=1e-15)


def test_assign_gate_off_rejects_all_non_confident():
    decisions = assign_pseudo_labels(FIXTURE_PROBS, fixture_gate(),
                                     lambda_reject=0.2,
                                     entropy_gate_enabled=False)
    kinds = [d.kind for d in decisions]
    assert kinds[:2] == [DecisionKind.CONFIDENT, DecisionKind.CONFIDENT]
    assert all(k == DecisionKind.REJECTED for k in kinds[2:])
    assert [d.assigned_label for d in decisions[2:]] == [6, 7, 8, 9]
    assert all(d.weight == 0.2 for d in decisions[2:])


def test_assign_no_confident_rejects_everything():
    probs = np.array([[0.5, 0.5], [0.6, 0.4]])
    gate = EntropyGate.for_classes(num_classes=2, tau=0.95, tau_ent=0.4)
    decisions = assign_pseudo_labels(probs, gate, lambda_reject=0.3,
                                     entropy_gate_enabled=True)
    assert all(d.kind == DecisionKind.REJECTED for d in decisions)
    assert [d.assigned_label for d in decisions] == [2, 3]
    assert all(d.weight == 0.3 for d in decisions)


def test_assign_degenerate_e_min_keeps_low_entropy_samples():
    # the confident row's entropy exceeds h_base, so the interpolation
    # interval is empty; rows at or below e_min still get weight 1
    probs = np.array([
        [0.50, 0.25, 0.25],   # confident at tau=0.45, h ~ 1.0397
        [0.45, 0.45, 0.10],   # h ~ 0.9489 <= e_min -> selected, weight 1
        [1 / 3, 1 / 3, 1 / 3],  # h = log 3 > e_min -> rejected
    ])
    gate = EntropyGate.for_classes(num_classes=3, tau=0.45, tau_ent=0.6)
    assert entropy(probs[0]) >= gate.h_base  # degenerate premise
    decisions = assign_pseudo_labels(probs, gate, lambda_reject=0.2,
                                     entropy_gate_enabled=True)
    assert decisions[0].kind == DecisionKind.CONFIDENT
    assert decisions[1].kind == DecisionKind.ENTROPY_SELECTED
    assert decisions[1].weight == 1.0
    assert decisions[1].assigned_label == 0  # first index of the tied max
    assert decisions[2].kind == DecisionKind.REJECTED
    assert decisions[2].assigned_label == 3 + 2


def test_assign_tie_break_takes_first_argmax():
    probs = np.array([[0.5, 0.5]])
    gate = EntropyGate.for_classes(num_classes=2, tau=0.4, tau_ent=0.9)
    decisions = assign_pseudo_labels(probs, gate, lambda_reject=0.2,
                                     entropy_gate_enabled=True)
    assert decisions[0].kind == DecisionKind.CONFIDENT
    assert decisions[0].assigned_label == 0


def test_assign_validates_inputs():
    gate = fixture_gate()
    with pytest.raises(ValueError):
        assign_pseudo_labels(np.array([[0.5, 0.5, 0.0, 0.0]]), gate,
                             lambda_reject=1.5, entropy_gate_enabled=True)
    with pytest.raises(ValueError):
        assign_pseudo_labels(np.array([[0.9, 0.2, 0.0, 0.0]]), gate,
                             lambda_reject=0.2, entropy_gate_enabled=True)
    with pytest.raises(ValueError):
        assign_pseudo_labels(np.array([[0.5, 0.5]]), gate,
                             lambda_reject=0.2, entropy_gate_enabled=True)


def test_gate_on_selection_is_superset_of_gate_off():
    rng = np.random.default_rng(21)
    for _ in range(100):
        c = int(rng.integers(2, 7))
        n = int(rng.integers(1, 20))
        probs = rng.dirichlet(np.full(c, 0.5), size=n)
        gate = EntropyGate.for_classes(num_classes=c,
                                       tau=float(rng.uniform(0.3, 0.99)),
                                       tau_ent=float(rng.uniform(0.1, 1.0)))
        on = assign_pseudo_labels(probs, gate, 0.2, entropy_gate_enabled=True)
        off = assign_pseudo_labels(probs, gate, 0.2, entropy_gate_enabled=False)
        sel_on = {d.sample_index for d in on if d.kind != DecisionKind.REJECTED}
        sel_off = {d.sample_index for d in off if d.kind != DecisionKind.REJECTED}
        assert sel_off <= sel_on
        # class labels agree wherever both select
        lab_on = {d.sample_index: d.assigned_label for d in on}
        for i in sel_off:
            assert lab_on[i] == off[i].assigned_label


def test_emitted_weights_stay_in_contract_range():
    rng = np.random.default_rng(22)
    for _ in range(100):
        c = int(rng.integers(2, 6))
        probs = rng.dirichlet(np.ones(c), size=int(rng.integers(1, 16)))
        gate = EntropyGate.for_classes(num_classes=c, tau=0.9,
                                       tau_ent=float(rng.uniform(0.2, 0.9)),
                                       w_min=0.25)
        decisions = assign_pseudo_labels(probs, gate, 0.15,
                                         entropy_gate_enabled=True)
        for d in decisions:
            if d.kind == DecisionKind.REJECTED:
                assert d.weight == 0.15
            else:
                assert 0.25 <= d.weight <= 1.0


def test_selected_weights_monotone_in_entropy_within_batch():
    rng = np.random.default_rng(23)
    checked = 0
    for trial in range(200):
        probs = rng.dirichlet(np.full(3, 0.6), size=12)
        gate = EntropyGate.for_classes(num_classes=3, tau=0.85, tau_ent=0.8)
        decisions = assign_pseudo_labels(probs, gate, 0.2,
                                         entropy_gate_enabled=True)
        picked = [d for d in decisions
                  if d.kind == DecisionKind.ENTROPY_SELECTED]
        picked.sort(key=lambda d: d.entropy)
        for a, b in zip(picked, picked[1:]):
            assert a.weight >= b.weight - 1e-12
            checked += 1
    assert checked > 50  # the sweep actually exercised the branch


def test_assignment_is_deterministic():
    a = assign_pseudo_labels(FIXTURE_PROBS, fixture_gate(), 0.2, True)
    b = assign_pseudo_labels(FIXTURE_PROBS, fixture_gate(), 0.2, True)
    assert a == b


def test_sharper_temperature_concentrates_probability():
    rng = np.random.default_rng(24)
    bank = PrototypeBank.random(4, 6, rng)
    for _ in range(50):
        z = unit_rows(rng, 1, 6)[0]
        sharp = class_probabilities(z, bank, t_prime=0.05)
        soft = class_probabilities(z, bank, t_prime=0.5)
        assert sharp.max() >= soft.max() - 1e-12
