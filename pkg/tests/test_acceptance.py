"""Acceptance gate: one test per shipping criterion, stated tolerances.

Each test emits exactly one `[ACCEPTANCE] <name>: PASS|FAIL` line on the
real stdout so the gate is auditable straight from the pytest log.
"""
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

import vizarel.protocol as proto
import vizarel.storage as storage
from vizarel import (DType, EpisodeStore, ProjectionParams, SessionSchema,
                     StepBatch, StreamDecoder, calibrate_affinities,
                     calibrate_conditionals, kl_and_grad, project)

from conftest import (ProtoClient, ServerHarness, build_stream,
                      pause_and_park, rand_batch)


@contextmanager
def criterion(name: str):
    ok = False
    try:
        yield
        ok = True
    finally:
        status = "PASS" if ok else "FAIL"
        print(f"[ACCEPTANCE] {name}: {status}", file=sys.__stdout__,
              flush=True)


def scalar_session(obs_dim, obs_type) -> SessionSchema:
    return SessionSchema(steps=0, obs_dim=obs_dim, obs_type=obs_type,
                         action_dim=[1], action_type=DType.F32,
                         reward_dim=1, reward_type=DType.F32)


class TestAcceptance:
    def test_storage_round_trip(self, tmp_path):
        """20 random episodes through the wire protocol, bit-identical back."""
        shapes = [([3], DType.F32), ([8], DType.F32), ([84, 84], DType.U8)]
        rng = np.random.default_rng(2024)
        with criterion("storage-round-trip"):
            t0 = time.monotonic()
            harnesses = {}
            logged = {k: [] for k in range(len(shapes))}
            try:
                for _ in range(20):
                    k = int(rng.integers(0, len(shapes)))
                    obs_dim, obs_type = shapes[k]
                    if k not in harnesses:
                        harnesses[k] = ServerHarness(tmp_path / f"shape-{k}")
                        harnesses[k].c = harnesses[k].client()
                        msg = harnesses[k].c.init(
                            scalar_session(obs_dim, obs_type))
                        assert msg.msg_type == proto.MSG_ACK
                    h = harnesses[k]
                    n = int(rng.integers(1, 201))
                    dones = np.zeros(n, dtype=bool)
                    dones[-1] = True
                    batch = rand_batch(rng, scalar_session(obs_dim, obs_type),
                                       n, dones=dones)
                    assert h.c.log_state(
                        batch, scalar_session(obs_dim, obs_type)
                    ).msg_type == proto.MSG_ACK
                    logged[k].append(batch)
                for k, h in harnesses.items():
                    assert h.c.flush().msg_type == proto.MSG_ACK
                    summaries = h.server.store.list_episodes()
                    assert len(summaries) == len(logged[k])
                    for summary, batch in zip(summaries, logged[k]):
                        ep = h.server.store.read_episode(summary.id)
                        n = batch.n_samples
                        assert ep.n_steps == n
                        got_obs = np.stack([e.s for e in ep.experiences])
                        got_act = np.stack([e.a for e in ep.experiences])
                        got_rew = np.stack([e.r for e in ep.experiences])
                        assert got_obs.tobytes() == batch.obses.tobytes()
                        assert got_act.tobytes() == batch.actions.tobytes()
                        assert got_rew.tobytes() == batch.rewards.tobytes()
                        for t in range(n - 1):
                            assert (ep.experiences[t].s_next.tobytes()
                                    == batch.obses[t + 1].tobytes())
                        assert ep.experiences[-1].s_next is None
                        assert ep.experiences[-1].done
            finally:
                for h in harnesses.values():
                    h.c.close()
                    h.stop()
            elapsed = time.monotonic() - t0
            assert elapsed < 30.0, f"took {elapsed:.1f}s, budget 30s"

    def test_protocol_fragmentation(self):
        """>=100 random streams parse identically at every byte split."""
        rng = np.random.default_rng(99)
        schema = scalar_session([4], DType.F32)
        with criterion("protocol-fragmentation"):
            for _ in range(100):
                msgs = []
                for _ in range(int(rng.integers(1, 5))):
                    kind = int(rng.integers(0, 4))
                    if kind == 0:
                        msgs.append(proto.WireMessage(
                            proto.MSG_INIT, proto.encode_schema(schema)))
                    elif kind == 1:
                        batch = rand_batch(rng, schema,
                                           int(rng.integers(1, 6)))
                        msgs.append(proto.WireMessage(
                            proto.MSG_LOG_STATE,
                            proto.encode_step_batch(batch, schema)))
                    elif kind == 2:
                        msgs.append(proto.WireMessage(proto.MSG_FLUSH, b""))
                    else:
                        msgs.append(proto.WireMessage(
                            proto.MSG_ACK,
                            proto.encode_ack(int(rng.integers(0, 100)))
                            [proto.HEADER_SIZE:]))
                stream = b"".join(proto.encode_message(m) for m in msgs)
                want = [(m.msg_type, bytes(m.payload)) for m in msgs]
                for cut in range(len(stream) + 1):
                    dec = StreamDecoder()
                    got = list(dec.feed(stream[:cut]))
                    got.extend(dec.feed(stream[cut:]))
                    assert [(m.msg_type, bytes(m.payload))
                            for m in got] == want

    def test_non_blocking_ingestion(self, tmp_path):
        """100 x 1000-step batches ACK while commits are stalled; zero IO."""
        schema = scalar_session([64], DType.F32)
        rng = np.random.default_rng(7)
        with criterion("non-blocking-ingestion"):
            h = ServerHarness(tmp_path / "s")
            try:
                c = h.client()
                assert c.init(schema).msg_type == proto.MSG_ACK
                pause_and_park(h.server.store)
                io_before = dict(h.server.store.stats)
                for _ in range(100):
                    batch = rand_batch(rng, schema, 1000,
                                       dones=np.zeros(1000, dtype=bool))
                    ack = c.log_state(batch, schema)
                    assert ack.msg_type == proto.MSG_ACK
                assert h.server.store.stats == io_before, \
                    "request path must perform zero disk writes"
                assert h.server.session.steps_received == 100_000
                h.server.store.resume_commits()
                c.close()
            finally:
                h.stop()

    def test_tsne_gradient_check(self):
        """Analytic gradient vs central differences, 5 seeds, rel <= 1e-4."""
        with criterion("tsne-gradient-check"):
            for seed in range(5):
                rng = np.random.default_rng(seed)
                X = rng.standard_normal((50, 8))
                P = calibrate_affinities(X, perplexity=15.0)
                Y = rng.standard_normal((50, 2))
                _, grad = kl_and_grad(P, Y)
                h = 1e-6
                fd = np.zeros_like(Y)
                for i in range(50):
                    for d in range(2):
                        Yp = Y.copy()
                        Yp[i, d] += h
                        Ym = Y.copy()
                        Ym[i, d] -= h
                        fd[i, d] = (kl_and_grad(P, Yp)[0]
                                    - kl_and_grad(P, Ym)[0]) / (2 * h)
                num = np.linalg.norm(fd - grad)
                den = max(np.linalg.norm(fd), np.linalg.norm(grad))
                assert num / den <= 1e-4, f"seed {seed}: rel err {num / den:.2e}"

    def test_tsne_affinities(self):
        """Symmetry, unit mass to 1e-10, row perplexity to 1e-5 relative."""
        with criterion("tsne-affinities"):
            rng = np.random.default_rng(123)
            X = rng.standard_normal((100, 8))
            perplexity = 30.0
            P = calibrate_affinities(X, perplexity=perplexity)
            assert np.array_equal(P, P.T)
            assert abs(P.sum() - 1.0) <= 1e-10
            P_cond, _ = calibrate_conditionals(X, perplexity=perplexity)
            for i in range(100):
                row = P_cond[i]
                nz = row[row > 0]
                perp = 2.0 ** float(-np.sum(nz * np.log2(nz)))
                assert abs(perp - perplexity) <= 1e-5 * perplexity

    def test_tsne_cluster_recovery(self):
        """3 Gaussian clusters, 10-sigma apart: 1-NN agreement >= 0.9."""
        with criterion("tsne-cluster-recovery"):
            t0 = time.monotonic()
            rng = np.random.default_rng(5)
            centers = np.zeros((3, 8))
            centers[1, 0] = 10.0
            centers[2, 1] = 10.0
            X = np.concatenate([rng.standard_normal((50, 8)) + c
                                for c in centers])
            labels = np.repeat([0, 1, 2], 50)
            refs = [(0, i) for i in range(150)]
            params = ProjectionParams(perplexity=30.0, seed=11)
            res = project(X, refs, params)
            res2 = project(X, refs, params)
            assert res.Y.tobytes() == res2.Y.tobytes(), \
                "embedding must be deterministic per seed"
            agree = 0
            for i in range(150):
                d = np.sum((res.Y - res.Y[i]) ** 2, axis=1)
                d[i] = np.inf
                agree += int(labels[int(np.argmin(d))] == labels[i])
            assert agree / 150 >= 0.9, f"1-NN agreement {agree / 150:.3f}"
            elapsed = time.monotonic() - t0
            assert elapsed < 60.0, f"took {elapsed:.1f}s, budget 60s"

    def test_metrics_oracle(self, tmp_path):
        """/api/metrics == plain-Python F64 fold, exactly, on 50 stores."""
        rng = np.random.default_rng(31337)
        with criterion("metrics-oracle"):
            for store_idx in range(50):
                schema = scalar_session(
                    [int(rng.integers(1, 6))],
                    DType.F32 if rng.random() < 0.8 else DType.F64)
                root = tmp_path / f"store-{store_idx}"
                store = EpisodeStore.create(root, schema)
                for _ in range(int(rng.integers(0, 6))):
                    n = int(rng.integers(1, 40))
                    complete = bool(rng.random() < 0.7)
                    _, exps = build_stream(rng, schema, n, done_prob=0.0,
                                           end_done=complete)
                    store.enqueue_append(exps)
                    store.flush()
                store.close()

                h = ServerHarness(root)
                try:
                    status, got = h.get("/api/metrics")
                    assert status == 200
                finally:
                    h.stop()

                reader = EpisodeStore.open_read(root)
                summaries = reader.list_episodes()
                complete_eps = []
                step_count = 0
                for s in summaries:
                    ep = reader.read_episode(s.id)
                    step_count += ep.n_steps
                    if s.complete:
                        ret = 0.0
                        for e in ep.experiences:
                            r = 0.0
                            for v in np.asarray(e.r, dtype=np.float64):
                                r += float(v)
                            ret += r
                        complete_eps.append((ret, s.wall_end - s.wall_start,
                                             ep.n_steps))
                assert got["episode_count"] == len(summaries)
                assert got["complete_count"] == len(complete_eps)
                assert got["step_count"] == step_count
                if complete_eps:
                    ret_sum = 0.0
                    dur_sum = 0.0
                    len_sum = 0
                    for ret, dur, n in complete_eps:
                        ret_sum += ret
                        dur_sum += dur
                        len_sum += n
                    k = len(complete_eps)
                    assert got["average_return"] == ret_sum / k
                    assert got["average_duration_s"] == dur_sum / k
                    assert got["average_length"] == len_sum / k
                else:
                    assert got["average_return"] is None
                    assert got["average_duration_s"] is None
                    assert got["average_length"] is None

    def test_crash_consistency(self, tmp_path):
        """A kill at every commit-path injection point leaves a valid prefix."""
        points = ["record_written", "chunk_synced", "manifest_temp_written",
                  "manifest_temp_synced", "manifest_renamed"]
        with criterion("crash-consistency"):
            for idx, point in enumerate(points):
                rng = np.random.default_rng(1000 + idx)
                schema = scalar_session([5], DType.F32)
                root = tmp_path / f"crash-{point}"
                store = EpisodeStore.create(root, schema)
                _, first = build_stream(rng, schema, 15, done_prob=0.0)
                store.enqueue_append(first)
                store.flush()
                committed = [(s.id, s.n_steps)
                             for s in store.list_episodes()]

                def hook(p, _target=point):
                    if p == _target:
                        raise storage._InjectedCrash()

                store.commit_hooks.append(hook)
                _, second = build_stream(rng, schema, 15, done_prob=0.0)
                store.enqueue_append(second)
                store._commit_thread.join(timeout=10)
                assert not store._commit_thread.is_alive()

                reopened = EpisodeStore.open_read(root)
                summaries = reopened.list_episodes()
                ids = [s.id for s in summaries]
                assert ids == list(range(len(ids)))
                assert len(ids) >= len(committed)
                for s in summaries:
                    reopened.read_episode(s.id)
                for ep_id, n_steps in committed:
                    got = reopened.read_episode(ep_id)
                    assert got.n_steps == n_steps
