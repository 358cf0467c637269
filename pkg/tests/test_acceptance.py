"""Acceptance checklist.

Eight criteria, one per test, in order. Each emits a single
``criterion N: PASS/FAIL`` line directly to the terminal (bypassing
pytest capture) so the checklist is visible in any run log.
"""

import contextlib
import json
import os
import time

import numpy as np
import pytest

from _util import dir_digest, brute_force_makespan, mk_cfg, ref_value
from ucp import (
    ReplicateMismatchError,
    conversions_invoked,
    convert,
    init_state,
    load,
    make_model,
    partition,
    resume,
    states_equal,
)
from ucp.convert import plan_work
from ucp.models import ModelSpec, ParamKind, ParamSpec, TrainerConfig, train_steps
from ucp.oracle import consolidate_oracle, consolidate_world
from ucp.parallel import zero_flatten_meta
from ucp.tensor import DType, Tensor, gen_tensor, read_tensor, write_tensor
from ucp.verify import default_grids, resume_pairs, stock_models, verify_roundtrip

DATA = os.path.join(os.path.dirname(__file__), "data")


@contextlib.contextmanager
def criterion(capsys, n: int, desc: str):
    # capture is disabled around the verdict so the checklist always
    # reaches the terminal, pass or fail
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"criterion {n}: FAIL - {desc}", flush=True)
        raise
    with capsys.disabled():
        print(f"criterion {n}: PASS - {desc}", flush=True)


def test_criterion_1_roundtrip_grid(tmp_path, capsys):
    # every stock model through every supported layout and back, bit-exact
    with criterion(capsys, 1, "identity round trip across full layout grid"):
        grid = default_grids(quick=False)[0]
        cells = list(grid.cells())
        assert len(cells) == 39 * 3
        t0 = time.perf_counter()
        rep = verify_roundtrip(grid, scratch=str(tmp_path / "grid"))
        wall = time.perf_counter() - t0
        bad = [c for c in rep.results if not c.ok]
        assert not bad, bad[:3]
        assert len(rep.results) == 117
        assert wall < 300.0, f"grid took {wall:.0f}s"


def test_criterion_2_resume_equivalence(tmp_path, capsys):
    # train 100, save, reload under a different layout, train 100 more;
    # must match 200 straight steps bit for bit
    with criterion(capsys, 2, "resume under new layout matches uninterrupted run"):
        tc = TrainerConfig()
        pairs = resume_pairs()
        assert len(pairs) >= 6
        headline = (mk_cfg(dp=2, tp=1, pp=4, zero="z1"), mk_cfg(dp=2, tp=2, pp=2))
        assert pairs[0] == headline
        for fam, scale in stock_models():
            spec = make_model(fam, scale)
            s100 = train_steps(init_state(spec, 7), tc, 0, 100)
            straight = train_steps(s100, tc, 100, 100)
            for i, (src_cfg, tgt_cfg) in enumerate(pairs):
                if src_cfg.pp > spec.n_layers or tgt_cfg.pp > spec.n_layers:
                    continue
                d = tmp_path / f"{fam}_{i}"
                src, atomic = str(d / "src"), str(d / "atomic")
                partition(s100, src_cfg, src)
                convert(src, atomic)
                world = load(atomic, tgt_cfg)
                resumed = train_steps(consolidate_world(world), tc, 100, 100)
                assert states_equal(resumed, straight), (fam, i)


def test_criterion_3_flat_shard_arithmetic(tmp_path, capsys):
    # 1024 elements over 3 ranks: 342 each with 2 pad slots on the last
    with criterion(capsys, 3, "flat sharding splits and pads exactly as specified"):
        assert zero_flatten_meta(1024, 3) == (
            1026,
            2,
            [(0, 342), (342, 684), (684, 1026)],
        )
        assert zero_flatten_meta(1024, 2) == (1024, 0, [(0, 512), (512, 1024)])

        spec = make_model("DenseGPT", {"n_layers": 0, "hidden": 1024})
        state = init_state(spec, 7)
        for dp, lens, pads in [(3, [342] * 3, [0, 0, 2]), (2, [512] * 2, [0, 0])]:
            root = str(tmp_path / f"dp{dp}")
            partition(state, mk_cfg(dp=dp, zero="z3"), root)
            for g in range(dp):
                man = json.load(open(os.path.join(root, f"rank_{g}", "shards.json")))
                e = next(
                    x
                    for x in man["entries"]
                    if x["param"] == "pos.alibi" and x["kind"] == "weight"
                )
                t = read_tensor(os.path.join(root, f"rank_{g}", e["file"]))
                assert t.shape == (lens[g],)
                assert e["pad_elems"] == pads[g]
                if pads[g]:
                    tail = t.data[lens[g] - pads[g] :]
                    assert not tail.view(np.uint32).any()
            assert states_equal(consolidate_oracle(root), state)


def test_criterion_4_reconfiguration_scenarios(tmp_path, capsys):
    # dp resize, plain-dp to flat-sharded dp, mp reshape, expert-grid
    # reshape; then prove silent replica corruption cannot slip through
    with criterion(capsys, 4, "reconfiguration scenarios plus replica corruption detection"):
        scenarios = [
            ("DenseGPT", mk_cfg(dp=4), mk_cfg(dp=2)),
            ("DenseGPT", mk_cfg(dp=2), mk_cfg(dp=2, zero="z1")),
            ("DenseGPT", mk_cfg(tp=2), mk_cfg(pp=2)),
            ("MoE", mk_cfg(tp=2, pp=2), mk_cfg(dp=2, tp=4)),
        ]
        stock = dict(stock_models())
        for i, (fam, src_cfg, tgt_cfg) in enumerate(scenarios):
            spec = make_model(fam, stock[fam])
            state = train_steps(init_state(spec, 7), TrainerConfig(), 0, 3)
            d = tmp_path / f"sc{i}"
            src, atomic = str(d / "src"), str(d / "atomic")
            partition(state, src_cfg, src)
            convert(src, atomic)
            assert states_equal(consolidate_world(load(atomic, tgt_cfg)), state), i

        root = str(tmp_path / "corrupt")
        spec = make_model("DenseGPT", stock["DenseGPT"])
        partition(init_state(spec, 7), mk_cfg(dp=2), root)
        man = json.load(open(os.path.join(root, "rank_1", "shards.json")))
        e = next(x for x in man["entries"] if x["pattern"] == "replicate")
        path = os.path.join(root, "rank_1", e["file"])
        blob = bytearray(open(path, "rb").read())
        blob[40] ^= 0x01
        open(path, "wb").write(bytes(blob))
        with pytest.raises(ReplicateMismatchError) as ei:
            convert(root, str(tmp_path / "corrupt_out"))
        assert e["param"] in str(ei.value)


def test_criterion_5_read_amplification(tmp_path, capsys):
    # a dp group of 4 must read each needed file once, not once per rank
    with criterion(capsys, 5, "grouped reads avoid dp-fold read amplification"):
        spec = make_model("GQA", dict(stock_models())["GQA"])
        state = init_state(spec, 7)
        src, atomic = str(tmp_path / "src"), str(tmp_path / "atomic")
        partition(state, mk_cfg(dp=2, zero="z1"), src)
        convert(src, atomic)
        n_files = 3 * len(spec.params)

        tgt = mk_cfg(dp=4)
        st = load(atomic, tgt).stats
        assert st.group_files_needed == {"0,0": n_files}
        assert st.files_read == n_files

        st = load(atomic, tgt, bypass=False).stats
        assert st.files_read == 4 * n_files


def test_criterion_6_parallel_convert(tmp_path, capsys):
    # worker count must never change the bytes, only the wall clock
    with criterion(capsys, 6, "parallel conversion is byte-stable and well-balanced"):
        spec = make_model("GQA", dict(stock_models())["GQA"])
        state = train_steps(init_state(spec, 7), TrainerConfig(), 0, 2)
        src = str(tmp_path / "src")
        partition(state, mk_cfg(dp=2, tp=2, pp=2, zero="z1"), src)
        digests = set()
        for w, inner in [(1, 1), (2, 2), (8, 1), (8, 3)]:
            out = str(tmp_path / f"out_w{w}i{inner}")
            convert(src, out, n_workers=w, inner=inner)
            digests.add(dir_digest(out))
        assert len(digests) == 1

        rng = np.random.default_rng(0)
        for _ in range(200):
            costs = list(rng.integers(1, 80, size=rng.integers(1, 13)))
            k = int(rng.integers(1, 5))
            params = tuple(
                ParamSpec(f"p{i:02d}", (int(c),), 0, ParamKind.LAYERNORM_WEIGHT)
                for i, c in enumerate(costs)
            )
            plan = plan_work(ModelSpec("synthetic", 0, (), params), k)
            opt = brute_force_makespan([int(c) for c in costs], k)
            assert 3 * max(plan.loads) <= 4 * opt

        if os.cpu_count() and os.cpu_count() >= 4:
            big = make_model("DenseGPT", {"n_layers": 8, "hidden": 2048})
            assert big.total_numel * 3 >= 10**8
            bsrc = str(tmp_path / "big_src")
            partition(init_state(big, 1), mk_cfg(dp=2, tp=2, pp=2, zero="z1"), bsrc)
            t0 = time.perf_counter()
            convert(bsrc, str(tmp_path / "big_seq"), n_workers=1)
            seq = time.perf_counter() - t0
            t0 = time.perf_counter()
            convert(bsrc, str(tmp_path / "big_par"), n_workers=4)
            par = time.perf_counter() - t0
            assert seq / par > 2.0, f"speedup {seq / par:.2f}"
        else:
            with capsys.disabled():
                print(
                    f"criterion 6 note: speedup leg skipped ({os.cpu_count()} cpu)",
                    flush=True,
                )


def test_criterion_7_file_format_stability(tmp_path, capsys):
    # frozen on-disk fixtures catch any container or generator drift
    with criterion(capsys, 7, "tensor container and manifest match golden fixtures"):
        t = gen_tensor(7, "pos.alibi", "weight", (16,))
        assert all(
            float(t.data[i]) == ref_value(7, "pos.alibi", "weight", i)
            for i in range(16)
        )
        path = str(tmp_path / "vec16.ucpt")
        write_tensor(path, t)
        golden = open(os.path.join(DATA, "golden_vec16.ucpt"), "rb").read()
        assert open(path, "rb").read() == golden

        spec = make_model("DenseGPT", {"n_layers": 0, "hidden": 16})
        root = str(tmp_path / "ckpt")
        partition(init_state(spec, 7), mk_cfg(), root)
        got = open(os.path.join(root, "rank_0", "shards.json"), "rb").read()
        want = open(os.path.join(DATA, "golden_shards.json"), "rb").read()
        assert got == want

        rng = np.random.default_rng(1)
        storages = [(DType.F32, np.uint32), (DType.F16, np.uint16), (DType.BF16, np.uint16)]
        for i in range(1000):
            dt, view = storages[i % 3]
            shape = tuple(int(x) for x in rng.integers(1, 7, size=rng.integers(0, 4)))
            bits = rng.integers(0, np.iinfo(view).max, size=shape, dtype=view)
            t = Tensor(dt, shape, bits.view(dt.storage).reshape(shape))
            p = str(tmp_path / "rt.ucpt")
            write_tensor(p, t)
            back = read_tensor(p)
            assert back.dtype == dt and back.shape == shape
            assert np.array_equal(back.data.view(view), bits)


def test_criterion_8_lazy_resume(tmp_path, capsys):
    # resuming under the original layout must not touch the converter
    with criterion(capsys, 8, "matching-layout resume skips conversion entirely"):
        spec = make_model("DenseGPT", {"n_layers": 2, "hidden": 32})
        state = train_steps(init_state(spec, 7), TrainerConfig(), 0, 2)
        cfg = mk_cfg(dp=2, pp=2, zero="z1")
        src = str(tmp_path / "src")
        partition(state, cfg, src)
        scratch = str(tmp_path / "scratch")
        before = conversions_invoked()
        world = resume(src, cfg, scratch)
        assert conversions_invoked() - before == 0
        assert world.stats.conversions_invoked == 0
        created = []
        for base, _, files in os.walk(scratch):
            created += [os.path.join(base, f) for f in files]
        assert created == []
        assert states_equal(consolidate_world(world), state)
