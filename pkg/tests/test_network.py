import math

import numpy as np
import pytest

from sevolve.cell import CellParams
from sevolve.evolve import EvolveConfig
from sevolve.graph import CliquePartition, build_graph
from sevolve.network import (
    ModelParams,
    NetworkConfig,
    Sample,
    StructurePlan,
    backward,
    compute_loss,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from oracles import random_connected_graph


def tiny_cfg(d=3, c=3, layers=2, max_trials=5, **kw):
    return NetworkConfig(input_dim=d, num_classes=c, num_layers=layers,
                         evolve=EvolveConfig(max_trials=max_trials), **kw)


def make_sample(rng, n=6, d=3, c=3):
    g = build_graph(n, random_connected_graph(rng, n))
    feats = rng.normal(size=(n, d))
    labels = rng.integers(0, c, size=n)
    return Sample(g, feats, labels)


def random_model(rng, cfg):
    params = init_params(cfg, rng)
    # widen past the tiny init so the dynamics are non-trivial
    for _, t in params.cell.tensors():
        t *= 5.0
    for w, b in params.heads:
        w += rng.normal(0.0, 0.3, w.shape)
        b += rng.normal(0.0, 0.1, b.shape)
    return params


class TestSample:
    def test_edge_targets_from_labels(self):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3)])
        s = Sample(g, np.zeros((4, 2)), [0, 0, 1, 1])
        assert list(s.edge_targets) == [1.0, 0.0, 1.0]

    def test_validates_coverage(self):
        g = build_graph(3, [(0, 1)])
        with pytest.raises(ValueError, match="features"):
            Sample(g, np.zeros((2, 2)), [0, 1, 0])
        with pytest.raises(ValueError, match="labels"):
            Sample(g, np.zeros((3, 2)), [0, 1])


class TestForward:
    def test_structural_postconditions(self):
        rng = np.random.default_rng(0)
        cfg = tiny_cfg(layers=3)
        for seed in range(5):
            sample = make_sample(rng, n=8)
            params = random_model(np.random.default_rng(seed), cfg)
            res = forward(sample, params, cfg, np.random.default_rng(seed), mode="test")
            sizes = [g.num_nodes for g in res.trace.levels]
            assert len(sizes) == 3
            assert all(a >= b for a, b in zip(sizes, sizes[1:]))
            assert res.combined_logits.shape == (8, 3)
            assert len(res.trace.partitions) == 2
            assert len(res.level_edge_probs) == 3
            for g, p in zip(res.trace.levels, res.level_edge_probs):
                assert p.shape == (g.num_edges,)
                if p.size:
                    assert (p > 0).all() and (p < 1).all()

    def test_zero_params_gives_uniform_prediction(self):
        rng = np.random.default_rng(1)
        cfg = tiny_cfg(d=4, c=4, layers=2)
        sample = make_sample(rng, n=5, d=4, c=4)
        params = ModelParams(CellParams(4, 4),
                             [(np.zeros((4, 4)), np.zeros(4)) for _ in range(2)])
        res = forward(sample, params, cfg, np.random.default_rng(0), mode="test")
        assert np.array_equal(res.combined_logits, np.zeros((5, 4)))
        total, task, edge = compute_loss(res, sample, cfg)
        assert task == pytest.approx(math.log(4), abs=1e-12)

    def test_bit_identical_with_same_seed(self):
        rng = np.random.default_rng(2)
        cfg = tiny_cfg()
        sample = make_sample(rng)
        params = random_model(rng, cfg)
        for mode in ("train", "test"):
            r1 = forward(sample, params, cfg, np.random.default_rng(33), mode=mode)
            r2 = forward(sample, params, cfg, np.random.default_rng(33), mode=mode)
            assert np.array_equal(r1.combined_logits, r2.combined_logits)
            for a, b in zip(r1.level_edge_probs, r2.level_edge_probs):
                assert np.array_equal(a, b)
            for pa, pb in zip(r1.trace.partitions, r2.trace.partitions):
                assert np.array_equal(pa.assignment, pb.assignment)
            for oa, ob in zip(r1.plan().visit_orders, r2.plan().visit_orders):
                assert np.array_equal(oa, ob)

    def test_test_mode_ignores_labels(self):
        rng = np.random.default_rng(3)
        cfg = tiny_cfg()
        sample = make_sample(rng, n=7)
        params = random_model(rng, cfg)
        permuted = Sample(sample.graph, sample.features,
                          (sample.labels + 1) % cfg.num_classes)
        r1 = forward(sample, params, cfg, np.random.default_rng(5), mode="test")
        r2 = forward(permuted, params, cfg, np.random.default_rng(5), mode="test")
        assert np.array_equal(r1.combined_logits, r2.combined_logits)
        for a, b in zip(r1.level_edge_probs, r2.level_edge_probs):
            assert np.array_equal(a, b)
        for pa, pb in zip(r1.trace.partitions, r2.trace.partitions):
            assert np.array_equal(pa.assignment, pb.assignment)

    def test_replay_reproduces_run(self):
        rng = np.random.default_rng(4)
        cfg = tiny_cfg(layers=3)
        sample = make_sample(rng, n=8)
        params = random_model(rng, cfg)
        res = forward(sample, params, cfg, np.random.default_rng(6), mode="train")
        replay = forward(sample, params, cfg, None, mode="train", plan=res.plan())
        assert np.array_equal(res.combined_logits, replay.combined_logits)
        for a, b in zip(res.level_edge_probs, replay.level_edge_probs):
            assert np.array_equal(a, b)

    def test_validates_dimensions(self):
        rng = np.random.default_rng(5)
        cfg = tiny_cfg(d=3)
        sample = make_sample(rng, d=4)
        params = random_model(rng, cfg)
        with pytest.raises(ValueError, match="dim"):
            forward(sample, params, cfg, np.random.default_rng(0))

    def test_weight_sharing_single_cell_block(self):
        cfg = tiny_cfg(layers=5)
        params = init_params(cfg, np.random.default_rng(0))
        names = [name for name, _ in params.tensors()]
        assert len(names) == 17 + 2 * 5
        assert len([n for n in names if not n.startswith("head")]) == 17

    def test_shared_cell_affects_every_layer(self):
        rng = np.random.default_rng(6)
        cfg = tiny_cfg(layers=3, max_trials=2)
        sample = make_sample(rng, n=7)
        params = random_model(rng, cfg)
        base = forward(sample, params, cfg, np.random.default_rng(1), mode="test")
        bumped = params.copy()
        bumped.cell.w_e += 0.5
        res = forward(sample, bumped, cfg, np.random.default_rng(1), mode="test")
        for a, b in zip(base.level_edge_probs, res.level_edge_probs):
            if a.size:
                assert not np.array_equal(a, b)


class TestLoss:
    def test_uniform_logits_log4(self):
        rng = np.random.default_rng(7)
        cfg = tiny_cfg(d=4, c=4, layers=1)
        sample = make_sample(rng, n=6, d=4, c=4)
        params = ModelParams(CellParams(4, 4), [(np.zeros((4, 4)), np.zeros(4))])
        res = forward(sample, params, cfg, np.random.default_rng(0), mode="train")
        _, task, _ = compute_loss(res, sample, cfg)
        assert task == pytest.approx(1.3862943611198906, abs=1e-12)

    def test_zero_edge_loss_when_probs_equal_targets(self):
        rng = np.random.default_rng(8)
        cfg = tiny_cfg(layers=2)
        sample = make_sample(rng, n=6)
        params = random_model(rng, cfg)
        res = forward(sample, params, cfg, np.random.default_rng(0), mode="train")
        from sevolve.network import _level_edge_targets
        targets = _level_edge_targets(res.trace, sample.labels, cfg.num_classes)
        res.trace.edge_probs = [t.copy() for t in targets]
        _, _, edge = compute_loss(res, sample, cfg)
        assert edge == 0.0

    def test_single_edge_squared_error(self):
        # one layer, one edge, equal labels: p = 0.5 vs target 1 -> 0.25
        g = build_graph(2, [(0, 1)])
        sample = Sample(g, np.zeros((2, 2)), [1, 1])
        cfg = tiny_cfg(d=2, c=2, layers=1)
        params = ModelParams(CellParams(2, 2), [(np.zeros((2, 2)), np.zeros(2))])
        res = forward(sample, params, cfg, np.random.default_rng(0), mode="train")
        total, task, edge = compute_loss(res, sample, cfg)
        assert edge == pytest.approx(0.25, abs=1e-15)
        assert total == pytest.approx(task + edge, abs=1e-15)

    def test_label_out_of_range(self):
        rng = np.random.default_rng(9)
        cfg = tiny_cfg(c=3)
        g = build_graph(3, [(0, 1), (1, 2)])
        sample = Sample(g, rng.normal(size=(3, 3)), [0, 1, 5])
        params = random_model(rng, cfg)
        with pytest.raises(ValueError, match="label"):
            forward(sample, params, cfg, np.random.default_rng(0), mode="train")

    def test_edge_weight_scales_total(self):
        rng = np.random.default_rng(10)
        sample = make_sample(rng, n=6)
        params_rng = np.random.default_rng(11)
        run_rng = lambda: np.random.default_rng(12)
        cfg1 = tiny_cfg(edge_loss_weight=1.0)
        cfg2 = tiny_cfg(edge_loss_weight=2.0)
        params = random_model(params_rng, cfg1)
        r1 = forward(sample, params, cfg1, run_rng(), mode="test")
        r2 = forward(sample, params, cfg2, run_rng(), mode="test")
        t1, task1, e1 = compute_loss(r1, sample, cfg1)
        t2, task2, e2 = compute_loss(r2, sample, cfg2)
        assert task1 == task2 and e1 == e2
        assert t2 - task2 == pytest.approx(2 * (t1 - task1), rel=1e-12)


def _grads_by_name(g):
    return dict(g.tensors())


class TestBackward:
    def test_edge_weight_doubling_doubles_edge_gradients(self):
        rng = np.random.default_rng(13)
        sample = make_sample(rng, n=6)
        params = random_model(np.random.default_rng(14), tiny_cfg())
        plans = {}
        grads = {}
        for lam in (0.0, 1.0, 2.0):
            cfg = tiny_cfg(edge_loss_weight=lam)
            res = forward(sample, params, cfg, np.random.default_rng(15), mode="train")
            grads[lam] = _grads_by_name(backward(res, sample, cfg))
            plans[lam] = res.plan()
        for a, b in zip(plans[0.0].partitions, plans[1.0].partitions):
            assert np.array_equal(a.assignment, b.assignment)
        for name in grads[0.0]:
            task_part = grads[0.0][name]
            edge_part1 = grads[1.0][name] - task_part
            edge_part2 = grads[2.0][name] - task_part
            np.testing.assert_allclose(edge_part2, 2.0 * edge_part1,
                                       rtol=1e-9, atol=1e-12)

    def test_full_network_finite_differences(self):
        # 6 nodes, 2 layers, D = H = 3, frozen structure replay
        rng = np.random.default_rng(16)
        cfg = tiny_cfg(d=3, c=3, layers=2)
        sample = make_sample(rng, n=6, d=3, c=3)
        params = random_model(np.random.default_rng(17), cfg)
        res = forward(sample, params, cfg, np.random.default_rng(18), mode="train")
        plan = res.plan()
        analytic = _grads_by_name(backward(res, sample, cfg))

        def loss_now():
            replay = forward(sample, params, cfg, None, mode="train", plan=plan)
            return compute_loss(replay, sample, cfg)[0]

        step = 1e-5
        worst = 0.0
        for name, t in params.tensors():
            a = analytic[name].reshape(-1)
            flat = t.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_now()
                flat[i] = orig - step
                down = loss_now()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                rel = abs(a[i] - numeric) / max(abs(a[i]), abs(numeric), 1e-8)
                worst = max(worst, rel)
                assert rel < 1e-5, f"{name}[{i}]: analytic {a[i]}, numeric {numeric}"
        assert worst < 1e-5

    def test_relabeling_equivariance(self):
        # permuting node ids (with inputs and the recorded structure mapped
        # through the permutation) permutes the outputs
        rng = np.random.default_rng(19)
        cfg = tiny_cfg(d=3, c=3, layers=3)
        n = 7
        sample = make_sample(rng, n=n, d=3, c=3)
        params = random_model(np.random.default_rng(20), cfg)
        res = forward(sample, params, cfg, np.random.default_rng(21), mode="train")
        plan = res.plan()

        pi = np.random.default_rng(22).permutation(n)  # old id -> new id
        g2 = build_graph(n, [(int(pi[a]), int(pi[b])) for a, b in sample.graph.edges])
        feats2 = np.zeros_like(sample.features)
        feats2[pi] = sample.features
        labels2 = np.zeros_like(sample.labels)
        labels2[pi] = sample.labels
        sample2 = Sample(g2, feats2, labels2)

        pi_t = pi
        orders2 = []
        parts2 = []
        for t, order in enumerate(plan.visit_orders):
            orders2.append(np.array([int(pi_t[i]) for i in order]))
            if t < len(plan.partitions):
                part = plan.partitions[t]
                # relabel cliques by ascending minimum permuted member id
                min_new = np.full(part.num_cliques, np.iinfo(np.int64).max)
                for old_node, c in enumerate(part.assignment):
                    min_new[c] = min(min_new[c], pi_t[old_node])
                relabel = np.argsort(np.argsort(min_new, kind="stable"), kind="stable")
                assign2 = np.zeros(part.num_nodes, dtype=np.intp)
                for old_node, c in enumerate(part.assignment):
                    assign2[pi_t[old_node]] = relabel[c]
                parts2.append(CliquePartition(assign2, part.num_cliques))
                pi_t = relabel
        res2 = forward(sample2, params, cfg, None, mode="train",
                       plan=StructurePlan(orders2, parts2))

        want = np.zeros_like(res.combined_logits)
        want[pi] = res.combined_logits
        np.testing.assert_allclose(res2.combined_logits, want, rtol=1e-10, atol=1e-12)


class TestPredict:
    def test_argmax_unique(self):
        assert list(np.argmax(np.array([[0.1, 3.0, -1.0], [2.0, 0.0, 1.0]]), axis=1)) == [1, 0]

    def test_tie_breaks_to_smaller_class(self):
        logits = np.array([[0.0, 5.0, 0.0, 5.0]])
        assert int(np.argmax(logits, axis=1)[0]) == 1

    def test_zero_params_predicts_class_zero(self):
        rng = np.random.default_rng(23)
        cfg = tiny_cfg(d=3, c=3, layers=2)
        sample = make_sample(rng, n=5)
        params = ModelParams(CellParams(3, 3),
                             [(np.zeros((3, 3)), np.zeros(3)) for _ in range(2)])
        pred = predict(sample, params, cfg, np.random.default_rng(0))
        assert np.array_equal(pred, np.zeros(5, dtype=np.intp))


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(24)
        cfg = tiny_cfg(d=3, c=4, layers=3)
        params = init_params(cfg, rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        loaded, meta = load_checkpoint(path)
        assert meta == {"input_dim": 3, "hidden_dim": 3, "num_classes": 4,
                        "num_layers": 3}
        for (n1, t1), (n2, t2) in zip(params.tensors(), loaded.tensors()):
            assert n1 == n2
            assert np.array_equal(t1, t2)

    def test_save_is_deterministic(self, tmp_path):
        cfg = tiny_cfg()
        params = init_params(cfg, np.random.default_rng(1))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, params, cfg)
        save_checkpoint(p2, params, cfg)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("NOT-A-CKPT v9 D=1 H=1 C=2 layers=1\n")
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(path)

    def test_rejects_dim_mismatch(self, tmp_path):
        cfg = tiny_cfg()
        params = init_params(cfg, np.random.default_rng(2))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        text = path.read_text().replace("tensor w_u 3 3", "tensor w_u 3 2", 1)
        path.write_text(text)
        with pytest.raises(ValueError, match="dims"):
            load_checkpoint(path)

    def test_rejects_wrong_tensor_name(self, tmp_path):
        cfg = tiny_cfg()
        params = init_params(cfg, np.random.default_rng(3))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        text = path.read_text().replace("tensor w_u ", "tensor w_moon ", 1)
        path.write_text(text)
        with pytest.raises(ValueError, match="expected tensor w_u"):
            load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path):
        cfg = tiny_cfg()
        params = init_params(cfg, np.random.default_rng(4))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:10]) + "\n")
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)
