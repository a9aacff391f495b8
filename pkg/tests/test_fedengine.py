import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import flipped_federation, make_client
from fairfl.fairness import FairnessPenaltyConfig, fair_loss_and_grad
from fairfl.fedengine import (
    DivergenceError,
    FairFLConfig,
    aggregate,
    evaluate,
    fedavg_round,
    gd_steps,
    initial_state,
    moreau_argmin,
    pfedfair_round,
    train,
)
from fairfl.data import SynthSpec, mirrored_counts, partition_fixed, synth_gaussian
from fairfl.metrics import summarize
from fairfl.model import LossReport, ModelParams, bce_loss_and_grad, init_params
from fairfl.numerics import Rng


def cfg(**kw):
    base = dict(rounds=3, outer_lr=0.3, inner_steps=4, inner_lr=0.05, lam=0.4, gamma=1.0,
                fairness=FairnessPenaltyConfig(0.5, 0.5), seed=0)
    base.update(kw)
    return FairFLConfig(**base)


def quadratic(A, c):
    def obj(p: ModelParams) -> LossReport:
        d = p.w - c
        return LossReport(0.5 * float(d @ A @ d), A @ d)
    return obj


def test_config_validation():
    with pytest.raises(ValueError, match="algorithm"):
        cfg(algorithm="fedprox")
    with pytest.raises(ValueError):
        cfg(gamma=0.0)
    with pytest.raises(ValueError):
        cfg(inner_objective="both")
    with pytest.raises(ValueError):
        cfg(participation=0.0)
    c = cfg().with_(eta=0.9, lam=0.1)
    assert c.fairness.eta == 0.9 and c.fairness.bandwidth_h == 0.5 and c.lam == 0.1


def test_aggregate_is_equal_weight_mean():
    out = aggregate({2: np.array([3.0]), 0: np.array([1.0]), 1: np.array([2.0])})
    np.testing.assert_array_equal(out, [2.0])
    with pytest.raises(ValueError):
        aggregate({})


def test_moreau_argmin_reaches_prox_point_on_quadratic():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    A = Q @ np.diag([0.5, 1.0, 2.0, 3.0]) @ Q.T
    c = rng.normal(size=4)
    w = ModelParams("linear", 3, (), rng.normal(size=4))
    gamma = 1.0
    conf = cfg(gamma=gamma, inner_steps=200, inner_lr=0.2)
    v = moreau_argmin(w, quadratic(A, c), conf).w
    exact = np.linalg.solve(A + gamma * np.eye(4), A @ c + gamma * w.w)
    assert np.max(np.abs(v - exact)) < 1e-6
    envelope = gamma * (w.w - v)
    np.testing.assert_allclose(envelope, A @ (v - c), atol=1e-8)


def test_moreau_inner_objective_switch(client):
    w = init_params("linear", client.dim, (), Rng(0, 1))
    fair = moreau_argmin(w, client, cfg(inner_objective="fair"))
    clean = moreau_argmin(w, client, cfg(inner_objective="clean"))
    assert not np.array_equal(fair.w, clean.w)
    same = moreau_argmin(w, client, cfg(inner_objective="fair", fairness=FairnessPenaltyConfig(0.0, 0.5)))
    np.testing.assert_array_equal(same.w, clean.w)


def test_pfedfair_round_matches_update_rule(federation):
    train_set, _ = federation
    c = cfg()
    state = initial_state(train_set, c)
    new, log = pfedfair_round(state, train_set, c)
    w = state.global_w
    expected = []
    for client in train_set:
        g = bce_loss_and_grad(w, client).gradient
        personal = moreau_argmin(w, client, c)
        expected.append(w.w - c.outer_lr * (g + c.lam * c.gamma * (w.w - personal.w)))
        np.testing.assert_array_equal(new.personalized[client.client_id].w, personal.w)
    np.testing.assert_allclose(new.global_w.w, np.mean(expected, axis=0), rtol=0, atol=1e-15)
    assert log.round == 0 and len(log.client_loss) == 5


def test_pfedfair_lambda_zero_equals_fedavg_single_clean_step(federation):
    train_set, _ = federation
    pf = cfg(algorithm="pfedfair", lam=0.0, rounds=10)
    fa = cfg(algorithm="fedavg", rounds=10, inner_steps=1, inner_lr=pf.outer_lr,
             fairness=FairnessPenaltyConfig(0.0, 0.5))
    s1, s2 = initial_state(train_set, pf), initial_state(train_set, fa)
    for _ in range(10):
        s1, _ = pfedfair_round(s1, train_set, pf)
        s2, _ = fedavg_round(s2, train_set, fa)
        assert s1.global_w.w.tobytes() == s2.global_w.w.tobytes()


def test_single_client_lambda_zero_personal_model_tracks_local_fair_training():
    # with one client and lambda=0 the global model follows clean GD, and the
    # personalized model is K fair-GD steps from it up to an O(gamma) prox pull
    client = make_client(n=80, d=3, client_id=0)
    c = cfg(algorithm="pfedfair", lam=0.0, gamma=1e-9, rounds=4)
    state, _ = train([client], c)
    w = initial_state([client], c).global_w
    for _ in range(c.rounds - 1):
        w = gd_steps(w, lambda p: bce_loss_and_grad(p, client), 1, c.outer_lr)
    local = gd_steps(w, lambda p: fair_loss_and_grad(p, client, c.fairness), c.inner_steps, c.inner_lr)
    np.testing.assert_allclose(state.personalized[0].w, local.w, atol=1e-8)


def test_client_order_does_not_change_result(federation):
    train_set, _ = federation
    a, _ = train(train_set, cfg())
    b, _ = train(list(reversed(train_set)), cfg())
    assert a.global_w.w.tobytes() == b.global_w.w.tobytes()


@pytest.mark.parametrize("algorithm", ["pfedfair", "pfedme", "fedavg", "local"])
def test_parallel_workers_match_serial(federation, algorithm):
    train_set, _ = federation
    a, _ = train(train_set, cfg(algorithm=algorithm, workers=1))
    b, _ = train(train_set, cfg(algorithm=algorithm, workers=4))
    assert a.global_w.w.tobytes() == b.global_w.w.tobytes()
    for p, q in zip(a.personalized, b.personalized):
        assert p.w.tobytes() == q.w.tobytes()


def test_local_is_independent_of_other_clients(federation):
    train_set, _ = federation
    alone, _ = train(train_set[:1], cfg(algorithm="local"))
    together, _ = train(train_set, cfg(algorithm="local"))
    np.testing.assert_array_equal(alone.personalized[0].w, together.personalized[0].w)


def test_local_runs_k_steps_per_round(client):
    c = cfg(algorithm="local", rounds=3, inner_steps=4)
    state, _ = train([client], c)
    w = initial_state([client], c).global_w
    w = gd_steps(w, lambda p: fair_loss_and_grad(p, client, c.fairness), 12, c.inner_lr)
    np.testing.assert_array_equal(state.personalized[0].w, w.w)


def test_pfedme_ignores_lambda(federation):
    train_set, _ = federation
    a, _ = train(train_set, cfg(algorithm="pfedme", lam=0.0))
    b, _ = train(train_set, cfg(algorithm="pfedme", lam=5.0))
    np.testing.assert_array_equal(a.global_w.w, b.global_w.w)


def test_fedavg_evaluates_global_model(federation):
    train_set, test_set = federation
    c = cfg(algorithm="fedavg")
    state, _ = train(train_set, c)
    recs = evaluate(state, test_set, c)
    assert len(recs) == 5
    for p in state.personalized:
        np.testing.assert_array_equal(p.w, state.global_w.w)


def test_divergence_guard(federation):
    train_set, _ = federation
    with pytest.raises(DivergenceError, match="exceeds|non-finite"):
        train(train_set, cfg(algorithm="fedavg", inner_lr=1e7, rounds=5))


def test_missing_group_rejected():
    from fairfl.data import ClientDataset, DataError
    bad = ClientDataset(np.zeros((3, 2)), [1, 1, 1], [0, 1, 0], client_id=0)
    with pytest.raises(DataError):
        train([bad], cfg())


def test_partial_participation(federation):
    train_set, _ = federation
    c = cfg(participation=0.4, rounds=4)
    s1, logs = train(train_set, c)
    assert all(len(l.client_loss) == 2 for l in logs)
    s2, _ = train(train_set, c)
    np.testing.assert_array_equal(s1.global_w.w, s2.global_w.w)


def test_round_logs_written_as_jsonl(tmp_path, federation):
    train_set, _ = federation
    path = tmp_path / "log.jsonl"
    _, logs = train(train_set, cfg(rounds=2), log_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[1])
    assert rec["round"] == 1 and len(rec["client_penalty"]) == 5


def test_mlp_training_runs(federation):
    train_set, test_set = federation
    c = cfg(arch="mlp", hidden=(4,), rounds=2)
    state, _ = train(train_set, c)
    assert len(evaluate(state, test_set, c)) == 5


def test_zero_rounds_returns_initial_state(federation):
    train_set, _ = federation
    c = cfg(rounds=0)
    state, logs = train(train_set, c)
    assert logs == []
    np.testing.assert_array_equal(state.global_w.w, initial_state(train_set, c).global_w.w)


def test_same_seed_gives_identical_logs(federation):
    train_set, _ = federation
    _, a = train(train_set, cfg(rounds=4))
    _, b = train(train_set, cfg(rounds=4))
    assert [x.to_json() for x in a] == [x.to_json() for x in b]


def _flipped(seed, counts):
    spec = SynthSpec.from_separations(5, 2.0, 3.0, p_s1=0.5, p_y1_given_s=(0.7, 0.3), n=20000)
    train_set = partition_fixed(synth_gaussian(spec, Rng(seed, 10)), counts, Rng(seed, 11))
    test_pool = synth_gaussian(spec, Rng(seed, 12))
    return train_set, partition_fixed(test_pool, mirrored_counts(train_set, 4.0), Rng(seed, 13))


def _worst_ddp(algorithm, eta, seed, counts):
    train_set, test_set = _flipped(seed, counts)
    c = FairFLConfig(algorithm=algorithm, rounds=50, fairness=FairnessPenaltyConfig(eta, 0.1), seed=seed)
    state, _ = train(train_set, c)
    return summarize(evaluate(state, test_set, c)).worst_ddp


def test_personalized_ddp_nonincreasing_in_eta():
    counts = [(400, 100)] + [(100, 400)] * 4
    medians = [np.median([_worst_ddp("pfedfair", eta, s, counts) for s in range(5)]) for eta in (0, 0.3, 0.6, 0.9)]
    assert sum(b > a for a, b in zip(medians, medians[1:])) <= 1


@pytest.mark.xfail(strict=True, reason="measured: FedAvg+penalty reaches lower worst-client hard DDP "
                   "than the personalized models at the default schedule; see the decisions ledger")
def test_two_client_worst_ddp_below_fedavg():
    counts = [(400, 100), (100, 400)]
    wins = sum(_worst_ddp("pfedfair", 0.9, s, counts) < _worst_ddp("fedavg", 0.9, s, counts) for s in range(5))
    assert wins >= 3
