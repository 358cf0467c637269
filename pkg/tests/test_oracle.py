"""Independent consolidation oracle: agreement with the engine and with
round-trips through every layout family."""

import json
import os

import numpy as np
import pytest

from _util import STOCK, interleaved, mk_cfg
from ucp import (
    ReplicateMismatchError,
    convert,
    init_state,
    load,
    make_model,
    partition,
    states_equal,
)
from ucp.models import TrainerConfig, train_steps
from ucp.oracle import PaddingError, consolidate_oracle, consolidate_world
from ucp.tensor import read_tensor

CFGS = [
    mk_cfg(),
    mk_cfg(dp=4),
    mk_cfg(tp=2),
    mk_cfg(pp=2),
    mk_cfg(dp=2, tp=2, pp=2, zero="z1"),
    mk_cfg(dp=3, zero="z3"),
    mk_cfg(dp=2, tp=2, pp=2, zero="z1", sched=interleaved(2)),
    mk_cfg(dp=2, tp=4, sp=2, zero="z1"),
]


@pytest.mark.parametrize("family,scale", STOCK)
@pytest.mark.parametrize("cfg", CFGS, ids=str)
def test_partition_then_oracle_is_identity(family, scale, cfg, tmp_path):
    spec = make_model(family, scale)
    if cfg.pp > spec.n_layers:
        pytest.skip("pp exceeds layer count")
    state = train_steps(init_state(spec, 11), TrainerConfig(), 0, 2)
    root = str(tmp_path / "ckpt")
    partition(state, cfg, root)
    assert states_equal(consolidate_oracle(root), state)


def test_oracle_agrees_with_engine(tmp_path):
    # consolidation via the oracle and via convert + single-rank load must
    # land on identical bits
    spec = make_model("MoE", dict(STOCK[1][1]))
    state = train_steps(init_state(spec, 5), TrainerConfig(), 0, 3)
    src = str(tmp_path / "src")
    partition(state, mk_cfg(dp=2, tp=2, pp=2, zero="z1"), src)
    via_oracle = consolidate_oracle(src)
    atomic = str(tmp_path / "atomic")
    convert(src, atomic)
    via_engine = consolidate_world(load(atomic, mk_cfg()))
    assert states_equal(via_oracle, via_engine)
    assert states_equal(via_oracle, state)


def test_oracle_on_world_equals_oracle_on_dir(tmp_path):
    from ucp import resume

    spec = make_model("DenseGPT", dict(STOCK[0][1]))
    state = init_state(spec, 9)
    root = str(tmp_path / "ckpt")
    cfg = mk_cfg(dp=2, tp=2)
    partition(state, cfg, root)
    world = resume(root, cfg, str(tmp_path / "scratch"))
    assert states_equal(consolidate_world(world), consolidate_oracle(root))


def test_single_rank_files_hold_full_tensors(tmp_path):
    # dp=tp=pp=1: each shard file is the whole parameter, so consolidation
    # must reduce to plain reads
    spec = make_model("DenseGPT", dict(STOCK[0][1]))
    state = init_state(spec, 2)
    root = str(tmp_path / "ckpt")
    partition(state, mk_cfg(), root)
    manifest = json.load(open(os.path.join(root, "rank_0", "shards.json")))
    by_key = {(e["param"], e["kind"]): e["file"] for e in manifest["entries"]}
    for p in spec.params:
        t = read_tensor(os.path.join(root, "rank_0", by_key[(p.name, "weight")]))
        assert t.shape == p.shape
        assert np.array_equal(
            t.data.view(np.uint32), state.params[p.name].weight.data.view(np.uint32)
        )


def test_oracle_rejects_corrupted_replica(tmp_path):
    spec = make_model("DenseGPT", dict(STOCK[0][1]))
    root = str(tmp_path / "ckpt")
    partition(init_state(spec, 2), mk_cfg(dp=2), root)
    manifest = json.load(open(os.path.join(root, "rank_1", "shards.json")))
    entry = next(e for e in manifest["entries"] if e["kind"] == "weight")
    path = os.path.join(root, "rank_1", entry["file"])
    blob = bytearray(open(path, "rb").read())
    blob[-1] ^= 0xFF
    open(path, "wb").write(bytes(blob))
    with pytest.raises(ReplicateMismatchError) as ei:
        consolidate_oracle(root)
    assert entry["param"] in str(ei.value)


def test_oracle_rejects_nonzero_padding(tmp_path):
    # dp=3 against the 32-element bias row leaves one pad slot on rank 2
    spec = make_model("DenseGPT", {"n_layers": 0, "hidden": 32})
    root = str(tmp_path / "ckpt")
    partition(init_state(spec, 2), mk_cfg(dp=3, zero="z3"), root)
    for g in range(2, 3):
        manifest = json.load(open(os.path.join(root, f"rank_{g}", "shards.json")))
        for e in manifest["entries"]:
            if e.get("pad_elems", 0) > 0:
                path = os.path.join(root, f"rank_{g}", e["file"])
                blob = bytearray(open(path, "rb").read())
                blob[-4:] = np.float32(1.0).tobytes()
                open(path, "wb").write(bytes(blob))
                with pytest.raises(PaddingError):
                    consolidate_oracle(root)
                return
    pytest.fail("expected a padded flat shard in the fixture")
