"""Conversion engine: union by pattern, work planning, the parallel pipeline."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _util import GQA_SCALE, brute_force_makespan, dir_digest, mk_cfg
from ucp import (
    ManifestError,
    MissingFragmentError,
    OverlappingRangeError,
    PaddingError,
    ParamKind,
    ParamSpec,
    ReplicateMismatchError,
    conversions_invoked,
    convert,
    init_state,
    load_atomic,
    make_model,
    partition,
    plan_work,
    union,
)
from ucp.convert import FragmentMsg, source_fingerprint, strip_pad
from ucp.models import ModelSpec, TrainerConfig, train_steps
from ucp.parallel import RecordMeta
from ucp.tensor import read_tensor, write_tensor


def _meta(
    p,
    kind="weight",
    pattern="replicate",
    placement=(0, 0, 0),
    shape=None,
    segments=None,
    flat_range=None,
    pad_elems=0,
):
    return RecordMeta(
        param=p.name,
        kind=kind,
        pattern=pattern,
        placement=placement,
        shape=shape if shape is not None else p.shape,
        segments=segments,
        flat_range=flat_range,
        pad_elems=pad_elems,
    )


def _arr(*vals):
    return np.array(vals, dtype=np.float32)


class TestUnion:
    def test_partial_pair_averages(self):
        p = ParamSpec("pos", (1,), 0, ParamKind.ASYNC_PARTIAL)
        cfg = mk_cfg(tp=2)
        msgs = [
            FragmentMsg(_meta(p, pattern="partial", placement=(0, 0, 0)), _arr(2.0)),
            FragmentMsg(_meta(p, pattern="partial", placement=(0, 1, 0)), _arr(4.0)),
        ]
        assert union(p, cfg, msgs).tolist() == [3.0]

    def test_shard_v_concatenates_in_tp_order(self):
        p = ParamSpec("w", (4, 2), 0, ParamKind.MATMUL2D, 0)
        cfg = mk_cfg(tp=2)
        top = np.arange(4, dtype=np.float32).reshape(2, 2)
        bot = np.arange(4, 8, dtype=np.float32).reshape(2, 2)
        msgs = [
            FragmentMsg(
                _meta(p, pattern="shard_v", placement=(0, 1, 0), shape=(2, 2)), bot
            ),
            FragmentMsg(
                _meta(p, pattern="shard_v", placement=(0, 0, 0), shape=(2, 2)), top
            ),
        ]
        out = union(p, cfg, msgs)
        assert np.array_equal(out, np.arange(8, dtype=np.float32).reshape(4, 2))

    def test_shard_h_concatenates_columns(self):
        p = ParamSpec("w", (2, 4), 0, ParamKind.MATMUL2D, 1)
        cfg = mk_cfg(tp=2)
        full = np.arange(8, dtype=np.float32).reshape(2, 4)
        msgs = [
            FragmentMsg(
                _meta(p, pattern="shard_h", placement=(0, t, 0), shape=(2, 2)),
                np.ascontiguousarray(full[:, t * 2 : (t + 1) * 2]),
            )
            for t in range(2)
        ]
        assert np.array_equal(union(p, cfg, msgs), full)

    def test_shard_nc_reassembles_segments(self):
        segs = ((0, 4), (4, 2))
        p = ParamSpec("qkv", (6, 2), 0, ParamKind.FUSED_QKV, 0, segs)
        cfg = mk_cfg(tp=2)
        full = np.arange(12, dtype=np.float32).reshape(6, 2)
        msgs = []
        for t in range(2):
            parts = [full[0 + t * 2 : 2 + t * 2], full[4 + t : 5 + t]]
            msgs.append(
                FragmentMsg(
                    _meta(
                        p,
                        pattern="shard_nc",
                        placement=(0, t, 0),
                        shape=(3, 2),
                        segments=segs,
                    ),
                    np.ascontiguousarray(np.concatenate(parts, axis=0)),
                )
            )
        assert np.array_equal(union(p, cfg, msgs), full)

    def test_replicate_requires_bit_equality(self):
        p = ParamSpec("ln", (2,), 0, ParamKind.LAYERNORM_WEIGHT)
        cfg = mk_cfg(dp=2, tp=1)
        a = FragmentMsg(_meta(p, placement=(0, 0, 0)), _arr(1.0, 2.0))
        b_bad = FragmentMsg(_meta(p, placement=(0, 0, 1)), _arr(1.0, 2.0000002))
        with pytest.raises(ReplicateMismatchError) as ei:
            union(p, cfg, [a, b_bad])
        assert "ln" in str(ei.value)

    def test_replicate_take_first_when_not_strict(self):
        p = ParamSpec("ln", (2,), 0, ParamKind.LAYERNORM_WEIGHT)
        cfg = mk_cfg(dp=2, tp=1)
        a = FragmentMsg(_meta(p, placement=(0, 0, 0)), _arr(1.0, 2.0))
        b_bad = FragmentMsg(_meta(p, placement=(0, 0, 1)), _arr(9.0, 9.0))
        out = union(p, cfg, [a, b_bad], strict=False)
        assert out.tolist() == [1.0, 2.0]

    def test_flat_ranges_stitch_and_strip(self):
        p = ParamSpec("ln", (3,), 0, ParamKind.LAYERNORM_WEIGHT)
        cfg = mk_cfg(dp=2, zero="z3")
        lohalf = FragmentMsg(
            _meta(p, pattern="shard_v", shape=(2,), flat_range=(0, 2)), _arr(1.0, 2.0)
        )
        hihalf = FragmentMsg(
            _meta(
                p,
                pattern="shard_v",
                placement=(0, 0, 1),
                shape=(2,),
                flat_range=(2, 4),
                pad_elems=1,
            ),
            _arr(3.0, 0.0),
        )
        assert union(p, cfg, [hihalf, lohalf]).tolist() == [1.0, 2.0, 3.0]

    def test_flat_overlap_rejected(self):
        p = ParamSpec("ln", (4,), 0, ParamKind.LAYERNORM_WEIGHT)
        cfg = mk_cfg(dp=2, zero="z3")
        msgs = [
            FragmentMsg(
                _meta(p, pattern="shard_v", shape=(2,), flat_range=(0, 2)), _arr(1, 2)
            ),
            FragmentMsg(
                _meta(
                    p, pattern="shard_v", placement=(0, 0, 1), shape=(2,), flat_range=(1, 3)
                ),
                _arr(2, 3),
            ),
        ]
        with pytest.raises(OverlappingRangeError):
            union(p, cfg, msgs)

    def test_flat_gap_rejected(self):
        p = ParamSpec("ln", (6,), 0, ParamKind.LAYERNORM_WEIGHT)
        cfg = mk_cfg(dp=3, zero="z3")
        msgs = [
            FragmentMsg(
                _meta(p, pattern="shard_v", shape=(2,), flat_range=(0, 2)), _arr(1, 2)
            ),
            FragmentMsg(
                _meta(
                    p, pattern="shard_v", placement=(0, 0, 2), shape=(2,), flat_range=(4, 6)
                ),
                _arr(5, 6),
            ),
        ]
        with pytest.raises(MissingFragmentError):
            union(p, cfg, msgs)

    def test_missing_tp_rank_rejected(self):
        p = ParamSpec("w", (4, 2), 0, ParamKind.MATMUL2D, 0)
        cfg = mk_cfg(tp=2)
        only = FragmentMsg(
            _meta(p, pattern="shard_v", placement=(0, 0, 0), shape=(2, 2)),
            np.zeros((2, 2), dtype=np.float32),
        )
        with pytest.raises(MissingFragmentError):
            union(p, cfg, [only])

    def test_empty_rejected(self):
        p = ParamSpec("w", (2,), 0, ParamKind.LAYERNORM_WEIGHT)
        with pytest.raises(MissingFragmentError):
            union(p, mk_cfg(), [])


class TestStripPad:
    def test_happy_path(self):
        out = strip_pad(_arr(1, 2, 3, 0), 1, (3,))
        assert out.tolist() == [1.0, 2.0, 3.0]

    def test_nonzero_tail_rejected(self):
        with pytest.raises(PaddingError):
            strip_pad(_arr(1, 2, 3, 4), 1, (3,))

    def test_negative_zero_tail_rejected(self):
        # -0.0 compares equal to 0.0 numerically but is not a zero pad byte
        with pytest.raises(PaddingError):
            strip_pad(_arr(1, 2, 3, -0.0), 1, (3,))

    def test_arithmetic_mismatch_rejected(self):
        with pytest.raises(PaddingError):
            strip_pad(_arr(1, 2, 3), 1, (3,))


class TestPlanWork:
    def _spec_with_costs(self, costs):
        params = tuple(
            ParamSpec(f"p{i:02d}", (c,), 0, ParamKind.LAYERNORM_WEIGHT)
            for i, c in enumerate(costs)
        )
        return ModelSpec("synthetic", 0, (), params)

    def test_textbook_instance(self):
        plan = plan_work(self._spec_with_costs([100, 60, 40, 30, 20, 10]), 2)
        assert sorted(plan.loads) == [130, 130]
        by_load = {frozenset(g) for g in plan.groups}
        assert {frozenset({"p00", "p03"}), frozenset({"p01", "p02", "p04", "p05"})} == by_load

    def test_every_param_exactly_once(self):
        spec = make_model("GQA", GQA_SCALE)
        for k in (1, 2, 3, 8, 50):
            plan = plan_work(spec, k)
            names = [n for g in plan.groups for n in g]
            assert sorted(names) == sorted(p.name for p in spec.params)
            assert len(plan.groups) == k
            for gi, g in enumerate(plan.groups):
                assert plan.loads[gi] == sum(spec.param(n).numel for n in g)

    def test_deterministic_with_ties(self):
        spec = self._spec_with_costs([8, 8, 8, 8])
        a, b = plan_work(spec, 2), plan_work(spec, 2)
        assert a == b
        assert a.groups == (("p00", "p02"), ("p01", "p03"))

    @given(
        costs=st.lists(st.integers(1, 60), min_size=1, max_size=9),
        k=st.integers(1, 3),
    )
    @settings(max_examples=40, deadline=None)
    def test_within_4_thirds_of_optimum(self, costs, k):
        plan = plan_work(self._spec_with_costs(costs), k)
        opt = brute_force_makespan(costs, k)
        assert max(plan.loads) * 3 <= 4 * opt + 2  # LPT bound, integer slack


def _trained_ckpt(tmp_path, cfg, steps=2, name="src"):
    spec = make_model("GQA", GQA_SCALE)
    state = train_steps(init_state(spec, 7), TrainerConfig(), 0, steps)
    root = str(tmp_path / name)
    partition(state, cfg, root)
    return root, state


class TestConvertPipeline:
    def test_byte_identical_across_scheduling(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2, tp=2, pp=2, zero="z1"))
        digests = set()
        for i, (w, inner) in enumerate([(1, 1), (2, 2), (8, 1), (3, 4)]):
            out = str(tmp_path / f"atomic{i}")
            convert(src, out, n_workers=w, inner=inner)
            digests.add(dir_digest(out))
        assert len(digests) == 1

    def test_counter_increments(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        before = conversions_invoked()
        convert(src, str(tmp_path / "atomic"))
        assert conversions_invoked() == before + 1

    def test_meta_json_contents(self, tmp_path):
        src, state = _trained_ckpt(tmp_path, mk_cfg(dp=2, zero="z1"))
        out = str(tmp_path / "atomic")
        convert(src, out)
        meta = json.load(open(os.path.join(out, "ucp_meta.json")))
        assert meta["format_version"] == 1
        assert meta["step"] == 2
        assert meta["metadata"]["iteration"] == 2
        assert meta["source_config_sha256"] == source_fingerprint(src)
        with open(os.path.join(src, "config.json"), "rb") as f:
            import hashlib

            assert meta["source_config_sha256"] == hashlib.sha256(f.read()).hexdigest()

    def test_atomic_layout(self, tmp_path):
        src, state = _trained_ckpt(tmp_path, mk_cfg(dp=2, tp=2))
        out = str(tmp_path / "atomic")
        convert(src, out)
        atomic = load_atomic(out)
        assert atomic.step == 2
        for p in state.spec.params:
            d = os.path.join(out, p.name)
            assert sorted(os.listdir(d)) == ["adam_m.ucpt", "adam_v.ucpt", "weight.ucpt"]
            t = read_tensor(os.path.join(d, "weight.ucpt"))
            assert t.shape == p.shape

    def test_corrupted_replicate_detected_and_named(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2, zero="z1"))
        victim = os.path.join(src, "rank_1", "layers.1.ln_w.weight.ucpt")
        t = read_tensor(victim)
        bad = t.data.copy()
        bad.reshape(-1)[0] = np.float32(123.0)
        write_tensor(victim, type(t)(t.dtype, t.shape, bad))
        out = str(tmp_path / "atomic")
        with pytest.raises(ReplicateMismatchError) as ei:
            convert(src, out)
        assert "layers.1.ln_w" in str(ei.value)
        # torn output must not look like a finished atomic checkpoint
        assert not os.path.exists(os.path.join(out, "ucp_meta.json"))

    def test_corruption_ignored_when_not_strict(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2, zero="z1"))
        victim = os.path.join(src, "rank_1", "layers.1.ln_w.weight.ucpt")
        t = read_tensor(victim)
        bad = t.data.copy()
        bad.reshape(-1)[0] = np.float32(123.0)
        write_tensor(victim, type(t)(t.dtype, t.shape, bad))
        out = str(tmp_path / "atomic")
        convert(src, out, strict_replicate=False)  # dp rank 0 wins
        got = read_tensor(os.path.join(out, "layers.1.ln_w", "weight.ucpt"))
        assert float(got.data.reshape(-1)[0]) != 123.0

    def test_stray_file_rejected(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        stray = os.path.join(src, "rank_0", "zzz.ucpt")
        write_tensor(stray, read_tensor(os.path.join(src, "rank_0", "pos.alibi.weight.ucpt")))
        with pytest.raises(ManifestError):
            convert(src, str(tmp_path / "atomic"))

    def test_missing_shard_file_rejected(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        os.remove(os.path.join(src, "rank_1", "pos.alibi.weight.ucpt"))
        with pytest.raises(ManifestError):
            convert(src, str(tmp_path / "atomic"))

    def test_missing_manifest_rejected(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        os.remove(os.path.join(src, "rank_1", "shards.json"))
        with pytest.raises(ManifestError):
            convert(src, str(tmp_path / "atomic"))

    def test_load_atomic_rejects_param_set_mismatch(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        out = str(tmp_path / "atomic")
        convert(src, out)
        import shutil

        shutil.rmtree(os.path.join(out, "pos.alibi"))
        from ucp import CheckpointLayoutError

        with pytest.raises(CheckpointLayoutError):
            load_atomic(out)

    def test_output_refused_into_nonempty_dir(self, tmp_path):
        src, _ = _trained_ckpt(tmp_path, mk_cfg(dp=2))
        out = str(tmp_path / "atomic")
        os.makedirs(out)
        open(os.path.join(out, "junk"), "w").write("x")
        from ucp import CheckpointLayoutError

        with pytest.raises(CheckpointLayoutError):
            convert(src, out)
