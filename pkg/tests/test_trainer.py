from dataclasses import replace

import numpy as np
import pytest

from picl.clustering import DbscanParams, cluster_target
from picl.data import AugmentConfig, WorldSpec, assemble_batch, generate_world
from picl.encoder import AAMHead, LRSchedule, SgdOptimizer, save_model
from picl.losses import BatchOutputs, combined_loss
from picl.trainer import (ABLATION_CELLS, EpochReport, TrainConfig, adapt, adapt_step,
                          cluster_purity, evaluate, grid_cells, init_memory, margin_at, pretrain,
                          sweep)

SPEC = WorldSpec(n_source_speakers=5, n_target_speakers=4, utts_per_speaker=8, dim=8,
                 n_eval_speakers=4, eval_utts_per_speaker=4, speaker_dim=3)
CFG = TrainConfig(hidden=16, embedding_dim=8, pretrain_epochs=3, adapt_epochs=2,
                  batch_source=8, batch_target=8, cluster=DbscanParams(eps=0.05, min_pts=3))


@pytest.fixture(scope="module")
def world():
    return generate_world(SPEC, 0)


@pytest.fixture(scope="module")
def pretrained(world):
    return pretrain(world, CFG)


def snapshot(model, head):
    return [p.copy() for p in model.parameters()] + [head.weight.copy()]


class TestPretrain:
    def test_zero_epochs_returns_initial_model(self, world):
        ref, ref_head, _ = pretrain(world, replace(CFG, pretrain_epochs=0))
        m, h, reps = pretrain(world, replace(CFG, pretrain_epochs=0))
        assert reps == []
        for a, b in zip(snapshot(ref, ref_head), snapshot(m, h)):
            assert a.tobytes() == b.tobytes()

    def test_same_seed_gives_identical_checkpoints(self, world, tmp_path, pretrained):
        m, h, _ = pretrain(world, CFG)
        save_model(tmp_path / "a", *pretrained[:2], seed=0)
        save_model(tmp_path / "b", m, h, seed=0)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_reports_and_margin_ramp(self, pretrained):
        reps = pretrained[2]
        assert [r.margin for r in reps] == [0.0, 0.1, 0.2]
        assert all(np.isfinite(r.total) for r in reps)
        assert pretrained[1].margin == 0.2
        assert margin_at(0, 1, 0.2) == 0.2


class TestAdapt:
    def test_zero_epochs_is_noop(self, world, pretrained):
        model, head = pretrained[0].copy(), AAMHead(pretrained[1].weight.copy())
        before = snapshot(model, head)
        m, h, mem, reps = adapt(model, head, world, replace(CFG, adapt_epochs=0))
        assert reps == [] and mem is None
        for a, b in zip(before, snapshot(m, h)):
            assert a.tobytes() == b.tobytes()

    def test_deterministic_and_finite(self, world, pretrained):
        runs = []
        for _ in range(2):
            head = AAMHead(pretrained[1].weight.copy())
            runs.append(adapt(pretrained[0].copy(), head, world, CFG))
        (m1, h1, mem1, r1), (m2, h2, mem2, r2) = runs
        for a, b in zip(snapshot(m1, h1), snapshot(m2, h2)):
            assert a.tobytes() == b.tobytes()
        assert mem1.target.tobytes() == mem2.target.tobytes()
        assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
        for r in r1:
            assert np.isfinite(r.total)
            assert 1 <= r.n_clusters <= len(world.target_adapt)
            assert 0.0 < r.purity <= 1.0
            assert r.margin == 0.2

    def test_collapse_warns(self, world, pretrained, caplog):
        cfg = replace(CFG, adapt_epochs=1, cluster=DbscanParams(eps=2.0, min_pts=1))
        adapt(pretrained[0].copy(), AAMHead(pretrained[1].weight.copy()), world, cfg)
        assert "single cluster" in caplog.text


class TestStepOrder:
    def setup_state(self, world, pretrained):
        model, head = pretrained[0].copy(), AAMHead(pretrained[1].weight.copy(), margin=0.2)
        memory = init_memory(model, world, CFG)
        pseudo, clusters = cluster_target(memory, CFG.cluster)
        batch = assemble_batch(world.source_train, world.target_adapt, [0, 9, 17], [2, 5],
                               AugmentConfig(), np.random.default_rng(3))
        opt = SgdOptimizer(LRSchedule(0.05, 0.05, 10), 0.9)
        return model, head, memory, clusters, pseudo.labels, batch, opt

    def test_loss_uses_pre_step_state_and_memory_uses_batch_embeddings(self, world, pretrained):
        model, head, memory, clusters, pseudo, batch, opt = self.setup_state(world, pretrained)
        f_s = model.embed(batch.source_x)
        f_t = model.embed(batch.target_x)
        f_v = model.embed(batch.target_views)
        expected = combined_loss(BatchOutputs(f_s, batch.source_y, f_t, pseudo[[2, 5]], f_v),
                                 head, memory, clusters, CFG.loss)
        ref_mem = memory.copy()
        ref_mem.update_from_batch(f_s, batch.source_y, f_t, batch.target_idx)
        before = snapshot(model, head)

        res = adapt_step(model, head, memory, clusters, pseudo, batch, opt, 0, CFG)
        assert res.total == pytest.approx(expected.total, rel=1e-12)
        np.testing.assert_allclose(memory.source, ref_mem.source, atol=1e-12)
        np.testing.assert_allclose(memory.target, ref_mem.target, atol=1e-12)
        assert any(a.tobytes() != b.tobytes() for a, b in zip(before, snapshot(model, head)))
        # pre-step embeddings equal the freshly initialized slots, so the target half is fixed
        fresh = init_memory(pretrained[0], world, CFG)
        np.testing.assert_allclose(memory.target, fresh.target, atol=1e-12)
        post = model.embed(batch.target_x)
        assert not np.allclose(post, memory.target[[2, 5]], atol=1e-9)

    def test_rerun_from_snapshot_is_identical(self, world, pretrained):
        states = []
        for _ in range(2):
            model, head, memory, clusters, pseudo, batch, opt = self.setup_state(world, pretrained)
            adapt_step(model, head, memory, clusters, pseudo, batch, opt, 0, CFG)
            states.append(snapshot(model, head) + [memory.source, memory.target])
        for a, b in zip(*states):
            assert a.tobytes() == b.tobytes()


class TestSweep:
    def test_single_cell_matches_adapt(self, world, pretrained):
        model, head = pretrained[:2]
        rows = sweep(world, CFG, model, head, cells=[(0.5, 5.0)])
        solo, _, _, reps = adapt(model.copy(), AAMHead(head.weight.copy()), world, CFG)
        ev = evaluate(solo, world)["target"]
        assert len(rows) == 1
        assert rows[0]["eer"] == ev["eer"] and rows[0]["min_dcf"] == ev["min_dcf"]
        assert rows[0]["final_clusters"] == reps[-1].n_clusters

    def test_grid_shapes(self):
        cells = grid_cells([0.2, 0.5, 0.8], [0])
        assert cells == [(0.2, 0.0), (0.5, 0.0), (0.8, 0.0)]
        assert cells == ABLATION_CELLS[:3]
        assert len(ABLATION_CELLS) == 6

    def test_row_count_matches_grid(self, world, pretrained):
        cfg = replace(CFG, adapt_epochs=1)
        rows = sweep(world, cfg, *pretrained[:2], cells=grid_cells([0.2, 0.8], [0, 5]))
        assert [(r["m"], r["lambda"]) for r in rows] == [(0.2, 0.0), (0.2, 5.0),
                                                         (0.8, 0.0), (0.8, 5.0)]


def test_purity_and_report_serialization():
    assert cluster_purity(np.array([0, 0, 1, 1]), np.array([3, 3, 3, 4])) == 0.75
    rep = EpochReport("adapt", 0, 1.0, 2.0, 3.0, 4.0, wall_time=1.5)
    assert "wall_time" not in rep.to_json()
    assert rep.to_record(timing=True)["wall_time"] == 1.5
