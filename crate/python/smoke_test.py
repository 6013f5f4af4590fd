"""Smoke test for the remoe_lab extension module."""

import math

import remoe_lab as rl


def main():
    t = rl.RoutingTrace.synth(n_routed_experts=16, top_k=4, steps_per_segment=32, n_segments=2, emit_probs=True, seed=3)
    assert len(t) == 64 and t.segment_lengths == [32, 32]
    assert rl.RoutingTrace.from_jsonl(t.to_jsonl()).to_jsonl() == t.to_jsonl()

    m = rl.metrics_report(t)
    assert 0.0 <= m["eor"] <= 1.0 and m["entropy_norm"] is not None

    plain = rl.simulate(t, capacity=4)
    rerouted = rl.simulate(t, capacity=4, beta=4.0)
    assert rerouted["uhr"] >= plain["uhr"]
    assert rl.simulate(t, capacity=4, beta=0.0)["all"] == plain["all"]

    # LRU with C=2 on {0,1},{1,2},{0,1}: four unique misses, uHR 2/6
    tiny = rl.RoutingTrace.from_jsonl(
        '{"type":"header","n_moe_layers":1,"n_routed_experts":4,"top_k":2,"batch_size":1,"has_probs":false}\n'
        '{"s":0,"t":0,"l":0,"b":0,"topk":[0,1]}\n'
        '{"s":0,"t":1,"l":0,"b":0,"topk":[1,2]}\n'
        '{"s":0,"t":2,"l":0,"b":0,"topk":[0,1]}\n'
    )
    r = rl.simulate(tiny, 2)
    assert r["all"]["unique_misses"] == 4 and abs(r["uhr"] - 2 / 6) < 1e-12

    assert rl.check_step_bound(t, 4)["step_violations"] == 0
    assert all(s["violations"] > 0 for s in rl.run_counterexamples()["scenarios"])

    assert rl.topk([0.25, 0.25, 0.25, 0.25], 2) == [0, 1]
    assert abs(sum(rl.gate_forward([1.0, -2.0], [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])) - 1.0) < 1e-12
    assert rl.reuse_mass([0.25] * 4, [0, 1], 2) == 0.25

    theta = [[0.3, -0.7, 1.1, 0.2], [-0.4, 0.9, 0.05, -1.3]]
    hs = [[1.0, 0.5], [0.8, -0.3], [-0.6, 1.2], [0.2, 0.9]]
    b = rl.total_objective(theta, theta, hs)
    assert b["trust_kl"] == 0.0
    g = rl.grad_total(theta, theta, hs, weights={"lambda_reuse": 0.0, "lambda_smooth": 0.0, "lambda_lag": 0.0, "lambda_ws": 0.0})
    assert all(x == 0.0 for row in g for x in row)

    gc = rl.gradcheck(instances=3, seed=1)
    assert gc["worst"] < 1e-5

    mc = rl.mc_reuse_expectation([0.25] * 4, [0, 1], 2, n_samples=50_000, seed=2)
    assert mc["expected"] == 1.0 and abs(mc["z"]) < 4

    tpot = rl.estimate_tpot([0.0, 0.0], 1e6, 10.0, 2.5, 1)
    assert tpot["tpot_ms"] == [2.5, 2.5]

    exp = rl.run_experiment({"data": {"n_sequences": 2, "seq_len": 24}, "train": {"steps": 30}})
    assert len(exp["log"]) == 30 and len(exp["theta"]) == 8
    assert math.isfinite(exp["last"]["total"])

    try:
        rl.simulate(t, capacity=0)
    except ValueError:
        pass
    else:
        raise AssertionError("capacity 0 accepted")

    print("remoe_lab", rl.__version__, "smoke test ok:", repr(t))


if __name__ == "__main__":
    main()
