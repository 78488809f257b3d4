import re

import numpy as np
import pytest

from branchnet.accounting import suffix_macs, trunk_macs
from branchnet.engine import forward_pass
from branchnet.graph import ArchConfig, build_trunk
from branchnet.multihead import (HeadSpec, MultiHeadModel, combined_flops,
                                 format_prediction_lines, load_bundle,
                                 predict_all, run_head_standalone, save_bundle)
from branchnet.train import TrainConfig, init_params, make_branch

DESK_HEADS = (("nuisance", "conv19", 7, "softmax"),
              ("stage", "conv22", 14, "softmax"),
              ("tags", "fc", 9, "sigmoid-multilabel"),
              ("binary", "fc", 2, "softmax"))


@pytest.fixture(scope="module")
def model():
    graph = build_trunk(ArchConfig.desk(num_identities=12))
    store = init_params(graph, TrainConfig.desk(seed=31))
    rng = np.random.default_rng(8)
    x = rng.standard_normal((8, 1, 56, 56)).astype(np.float32)
    _, updates = forward_pass(graph, store, x, mode="train")
    store.running.update(updates)
    m = MultiHeadModel(graph, store)
    for i, (task, layer, k, loss) in enumerate(DESK_HEADS):
        br = make_branch(graph, store, layer, k, loss=loss, seed=100 + i)
        # give retrained batchnorms usable inference statistics
        _, upd = forward_pass(br.graph, br.store, x, mode="train",
                              train_from=br.branch_index)
        br.store.running.update(upd)
        m.add_head(HeadSpec(task, layer, k, loss), br.graph, br.store)
    return m


def inputs(seed, n):
    return np.random.default_rng(seed).standard_normal((n, 1, 56, 56)) \
        .astype(np.float32)


def test_zero_head_model_predicts_identity_only(model):
    bare = MultiHeadModel(model.trunk_graph, model.trunk_store)
    pred = predict_all(bare, inputs(0, 3))
    assert pred.tasks == {}
    assert pred.identity_probs.shape == (3, 12)
    np.testing.assert_allclose(pred.identity_probs.sum(axis=1), 1.0, atol=1e-6)
    total, per_head = combined_flops(bare)
    assert per_head == {} and total == trunk_macs(bare.trunk_graph)


def test_trunk_runs_once_per_call(model):
    stats = {}
    for i in range(5):
        predict_all(model, inputs(i, 2), stats=stats)
    assert stats["trunk_forwards"] == 5


def test_cached_heads_match_standalone_bitwise(model):
    x = inputs(17, 6)
    pred = predict_all(model, x)
    by_task = {h.spec.task: h for h in model.heads}
    for task, head in by_task.items():
        np.testing.assert_array_equal(pred.tasks[task].scores,
                                      run_head_standalone(head, x))
    assert set(pred.tasks) == {t for t, *_ in DESK_HEADS}


def test_task_outputs_are_scored_and_labeled(model):
    pred = predict_all(model, inputs(3, 4))
    out = pred.tasks["nuisance"]
    assert out.scores.shape == (4, 7)
    np.testing.assert_array_equal(out.labels, out.scores.argmax(axis=1))
    np.testing.assert_allclose(out.scores.sum(axis=1), 1.0, atol=1e-6)
    tags = pred.tasks["tags"].scores
    assert tags.shape == (4, 9)
    assert np.all((tags >= 0) & (tags <= 1))


def test_batch_composition_independence(model):
    xa = inputs(23, 3)
    solo = predict_all(model, xa[1:2])
    batch = predict_all(model, xa)
    for task in solo.tasks:
        a = solo.tasks[task].scores[0]
        b = batch.tasks[task].scores[1]
        rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
        assert float(rel.max()) < 1e-5, task


def test_combined_cost_decomposition(model):
    total, per_head = combined_flops(model)
    g = model.trunk_graph
    want = {"nuisance": suffix_macs(g, "conv19", 7),
            "stage": suffix_macs(g, "conv22", 14),
            "tags": suffix_macs(g, "fc", 9),
            "binary": suffix_macs(g, "fc", 2)}
    assert per_head == want
    assert total == trunk_macs(g) + sum(want.values())
    emb = g.node("fc").attrs["in"]
    assert want["tags"] == emb * 9 and want["binary"] == emb * 2


def test_adding_heads_never_decreases_cost(model):
    partial = MultiHeadModel(model.trunk_graph, model.trunk_store)
    last = combined_flops(partial)[0]
    for head in model.heads:
        partial.heads.append(head)
        now = combined_flops(partial)[0]
        assert now > last
        last = now


def test_bundle_round_trip(tmp_path, model):
    out = tmp_path / "bundle"
    save_bundle(out, model)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["binary.ckpt", "heads.txt", "nuisance.ckpt", "stage.ckpt",
                     "tags.ckpt", "trunk.ckpt"]
    lines = (out / "heads.txt").read_text().splitlines()
    assert lines[0] == "binary fc 2 softmax"
    assert lines[2] == "stage conv22 14 softmax"

    loaded = load_bundle(out)
    x = inputs(29, 4)
    a = predict_all(model, x)
    b = predict_all(loaded, x)
    np.testing.assert_array_equal(a.identity_logits, b.identity_logits)
    for task in a.tasks:
        np.testing.assert_array_equal(a.tasks[task].scores, b.tasks[task].scores)

    # saving the reloaded model reproduces the exact bytes
    out2 = tmp_path / "bundle2"
    save_bundle(out2, loaded)
    for name in names:
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_load_bundle_requires_heads_file(tmp_path, model):
    out = tmp_path / "partial"
    save_bundle(out, model)
    (out / "heads.txt").unlink()
    with pytest.raises(ValueError, match="heads.txt"):
        load_bundle(out)


def test_prediction_line_format(model):
    x = inputs(31, 2)
    pred = predict_all(model, x)
    lines = format_prediction_lines(["a", "b"], pred, model.heads)
    assert len(lines) == 2
    pattern = (r"^a identity=\d+:0\.\d{6} binary=\d+:0\.\d{6}"
               r" nuisance=\d+:0\.\d{6} stage=\d+:0\.\d{6} tags=\d+:0\.\d{6}"
               r" tags_scores=\[0\.\d{6}(,0\.\d{6}){8}\]$")
    assert re.match(pattern, lines[0]), lines[0]


def test_add_head_validation(model):
    bare = MultiHeadModel(model.trunk_graph, model.trunk_store)
    head = model.heads[0]
    with pytest.raises(ValueError, match="which the trunk lacks"):
        bare.add_head(HeadSpec("t", "conv99", 7, "softmax"),
                      head.graph, head.store)
    other = build_trunk(ArchConfig.desk(num_identities=12, in_channels=3))
    with pytest.raises(ValueError, match="input shape"):
        bare.add_head(HeadSpec("t", "conv19", 7, "softmax"),
                      other, head.store)
    # a prefix that differs below the branch point is rejected
    divergent = build_trunk(ArchConfig(scale_factor=0.25, num_identities=12,
                                       in_channels=1, stem_channels=36))
    assert divergent.input_shape == model.trunk_graph.input_shape
    with pytest.raises(ValueError, match="prefix diverges"):
        bare.add_head(HeadSpec("t", "conv19", 7, "softmax"),
                      divergent, head.store)


def test_predict_all_rejects_wrong_input_shape(model):
    with pytest.raises(ValueError, match="does not match trunk input"):
        predict_all(model, np.zeros((2, 3, 56, 56), dtype=np.float32))
