"""Encoder, losses, masking, training, and checkpoint tests."""

import math

import numpy as np
import pytest

from attnguide import autodiff as ad
from attnguide._tiny import tiny_model_and_batch
from attnguide.corpus import CorpusParams, gen_corpus
from attnguide.javacode import parse
from attnguide.model import (
    DimMismatch,
    GuidedModel,
    Hyper,
    ModelConfig,
    NonFiniteLoss,
    ag_loss,
    apply_mlm_mask,
    forward,
    gradient_check,
    load_model,
    make_batch,
    positional_encoding,
    prepare_instances,
    sag_loss,
    save_model,
    total_loss,
    train,
    write_train_log_csv,
)
from attnguide.patterns import PatternMatrix, PatternSpec, assign_heads, build_pattern
from attnguide.subtok import build_vocab, encode


def small_setup(num_units=24, seed=0, lam=0.5, max_len=24):
    units = gen_corpus(CorpusParams(num_units, seed))
    vocab = build_vocab(units, 200)
    config = ModelConfig(
        num_layers=2, heads=2, d_model=16, ffn_dim=24,
        vocab_size=len(vocab), max_len=max_len, seed=seed,
    )
    assignment = assign_heads(
        config.num_layers, config.heads, lam,
        [PatternSpec.syntax("Identifier"), PatternSpec.syntax("Separator")],
    )
    seqs = [encode(u, vocab, max_len) for u in units]
    instances = prepare_instances(units, seqs, assignment)
    model = GuidedModel(config, assignment, alpha0=1.0)
    return model, instances, vocab


def test_positional_encoding_position_zero():
    vec = positional_encoding(0, 8)
    assert np.array_equal(vec[0::2], np.zeros(4))
    assert np.array_equal(vec[1::2], np.ones(4))


def test_positional_encoding_position_one_d2():
    vec = positional_encoding(1, 2)
    assert vec[0] == pytest.approx(math.sin(1.0), abs=1e-5)
    assert vec[1] == pytest.approx(math.cos(1.0), abs=1e-5)
    assert vec == pytest.approx([0.84147, 0.54030], abs=1e-5)


def test_positional_encoding_bounded():
    for pos in (0, 1, 7, 63):
        assert (np.abs(positional_encoding(pos, 64)) <= 1.0).all()


def test_mlm_mask_determinism():
    unit = parse("m", "sum = num1 + num2 ;")
    vocab = build_vocab([unit], 64)
    seq = encode(unit, vocab, 16)
    a = apply_mlm_mask(seq, 0.15, np.random.default_rng(9), len(vocab))
    b = apply_mlm_mask(seq, 0.15, np.random.default_rng(9), len(vocab))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_mlm_mask_forced_floor():
    unit = parse("f", "x = 1 ;")
    vocab = build_vocab([unit], 64)
    seq = encode(unit, vocab, 8)
    masked, selected = apply_mlm_mask(seq, 1e-12, np.random.default_rng(0), len(vocab))
    assert len(selected) == 1
    assert seq.alignment[selected[0]] is not None


def test_mlm_mask_only_touches_selected():
    unit = parse("t", "sum = num1 + num2 ;")
    vocab = build_vocab([unit], 64)
    seq = encode(unit, vocab, 16)
    masked, selected = apply_mlm_mask(seq, 0.5, np.random.default_rng(3), len(vocab))
    untouched = np.setdiff1d(np.arange(len(seq.ids)), selected)
    assert np.array_equal(masked[untouched], seq.ids[untouched])


def test_forward_uniform_attention_when_scores_equal():
    model, instances, _ = small_setup()
    for name, p in model.parameters().items():
        if name.endswith((".wq", ".wk")):
            p.data[:] = 0.0
    inst = instances[0]
    ids = inst.seq.ids[None, :]
    valid = (np.arange(model.config.max_len) < inst.seq.real_len)[None, :]
    trace = forward(model, ids, valid)
    real = inst.seq.real_len
    row = trace.attention[0].data[0, 0, 0]
    assert row[:real] == pytest.approx(np.full(real, 1.0 / real))
    assert not row[real:].any()


def test_forward_rows_sum_to_one_random_params():
    model, instances, _ = small_setup(num_units=8)
    ids = np.stack([i.seq.ids for i in instances[:4]])
    valid = np.stack(
        [np.arange(model.config.max_len) < i.seq.real_len for i in instances[:4]]
    )
    trace = forward(model, ids, valid)
    for layer_att in trace.attention:
        sums = layer_att.data.sum(axis=-1)
        assert sums == pytest.approx(np.ones_like(sums), abs=1e-6)
        for b in range(4):
            assert not layer_att.data[b, :, :, ~valid[b]].any()


def test_uniform_logits_cross_entropy_closed_form():
    logits = ad.Tensor(np.zeros((1, 4, 16)))
    targets = np.array([[3, 1, 0, 2]])
    sel = np.array([[False, True, False, False]])
    loss = ad.cross_entropy_masked(logits, targets, sel)
    assert loss.item() == pytest.approx(math.log(16.0), abs=1e-12)


def test_perfect_prediction_zero_loss():
    # target logit 60 above every alternative: probability 1 to double precision
    logits = np.zeros((1, 3, 8))
    targets = np.array([[2, 5, 1]])
    for pos, tgt in enumerate(targets[0]):
        logits[0, pos, tgt] = 60.0
    sel = np.ones((1, 3), dtype=bool)
    loss = ad.cross_entropy_masked(ad.Tensor(logits), targets, sel)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)
    assert loss.item() >= 0.0


def _pattern(values, included, real_len, unit_id="x"):
    return PatternMatrix(
        np.asarray(values, dtype=np.float64),
        np.asarray(included, dtype=bool),
        PatternSpec.syntax("Identifier"),
        unit_id,
        real_len,
    )


def test_ag_loss_zero_when_equal():
    values = np.array([[0.5, 0.5], [1.0, 0.0]])
    pm = _pattern(values, [True, True], 2)
    assert ag_loss(values.copy(), pm) <= 1e-12


def test_ag_loss_counter_case_exact_two():
    pm = _pattern([[0.0, 1.0], [1.0, 0.0]], [True, True], 2)
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert ag_loss(h, pm) == pytest.approx(2.0, abs=1e-12)


def test_ag_loss_all_rows_excluded():
    pm = _pattern(np.zeros((3, 3)), [False] * 3, 3)
    assert ag_loss(np.random.default_rng(0).random((3, 3)), pm) == 0.0


def test_ag_loss_dim_mismatch():
    pm = _pattern(np.zeros((3, 3)), [False] * 3, 3)
    with pytest.raises(DimMismatch):
        ag_loss(np.zeros((4, 4)), pm)


def test_sag_loss_sums_guided_heads():
    model, instances, _ = small_setup(lam=1.0)
    inst = instances[0]
    ids = inst.seq.ids[None, :]
    valid = (np.arange(model.config.max_len) < inst.seq.real_len)[None, :]
    trace = forward(model, ids, valid)
    attn = trace.attention_array(0)
    total = sag_loss(attn, model.assignment, inst.patterns)
    oracle = 0.0
    for layer in range(model.assignment.num_layers):
        for head, spec in model.assignment.guided_heads:
            oracle += ag_loss(attn[layer, head], inst.patterns[spec])
    assert total == pytest.approx(oracle, abs=1e-12)
    assert total >= 0.0


def test_sag_loss_no_guided_heads_is_zero():
    model, instances, _ = small_setup()
    inst = instances[0]
    assignment = model.assignment
    from attnguide.patterns import HeadAssignment

    unguided = HeadAssignment(
        assignment.num_layers, assignment.heads_per_layer,
        (None,) * assignment.heads_per_layer,
    )
    attn = np.zeros(
        (assignment.num_layers, assignment.heads_per_layer, 4, 4)
    )
    assert sag_loss(attn, unguided, inst.patterns) == 0.0


def test_total_loss_t1_equals_task_bitwise():
    model, instances, _ = small_setup()
    batch = make_batch(instances[:4], model, np.random.default_rng(0))
    loss, parts = total_loss(model, batch, 1.0)
    assert parts.alpha == 0.0
    assert loss.item() == parts.task  # bit-identical, not approximately


def test_total_loss_alpha_interpolation():
    model, instances, _ = small_setup()
    batch = make_batch(instances[:4], model, np.random.default_rng(0))
    _, parts = total_loss(model, batch, 0.5)
    assert parts.alpha == 0.5
    loss, _ = total_loss(model, batch, 0.25)
    assert loss.item() == pytest.approx(parts.task + 0.75 * parts.sag, rel=1e-9)


def test_alpha0_zero_matches_unguided_baseline():
    model_a, instances, _ = small_setup(seed=5)
    model_b, _, _ = small_setup(seed=5)
    model_a.alpha0 = 0.0
    model_b.alpha0 = 0.0
    hyper = Hyper(lr=0.05, epochs=1, batch_size=8, alpha0=0.0)
    log_a = train(model_a, instances, hyper)
    log_b = train(model_b, instances, hyper)
    assert [(e.task_loss, e.sag_loss) for e in log_a] == [
        (e.task_loss, e.sag_loss) for e in log_b
    ]
    for pa, pb in zip(model_a.parameters().values(), model_b.parameters().values()):
        assert np.array_equal(pa.data, pb.data)


def test_train_zero_lr_keeps_parameters():
    model, instances, _ = small_setup()
    before = {k: p.data.copy() for k, p in model.parameters().items()}
    train(model, instances[:8], Hyper(lr=0.0, epochs=1, batch_size=8, alpha0=1.0))
    for name, p in model.parameters().items():
        assert np.array_equal(before[name], p.data), name


def test_train_loss_decreases_on_fixed_batch():
    # five seeds, fifty plain-gradient steps each, every run must descend
    for seed in range(5):
        model, instances, _ = small_setup(seed=seed)
        batch = make_batch(instances[:8], model, np.random.default_rng(seed))
        first = last = None
        for _ in range(50):
            loss, _ = total_loss(model, batch, 0.0)
            model.zero_grad()
            loss.backward()
            for p in model.parameters().values():
                if p.grad is not None:
                    p.data -= 1e-2 * p.grad
            if first is None:
                first = loss.item()
            last = loss.item()
        assert last < first


def test_train_determinism_bit_identical():
    model_a, instances, _ = small_setup(seed=2)
    model_b, _, _ = small_setup(seed=2)
    hyper = Hyper(lr=0.1, epochs=2, batch_size=8, alpha0=1.0)
    train(model_a, instances, hyper)
    train(model_b, instances, hyper)
    for (na, pa), (nb, pb) in zip(
        model_a.parameters().items(), model_b.parameters().items()
    ):
        assert na == nb
        assert np.array_equal(pa.data, pb.data), na


def test_alpha_schedule_logged_exactly():
    model, instances, _ = small_setup()
    hyper = Hyper(lr=0.01, epochs=2, batch_size=8, alpha0=1.0)
    log = train(model, instances, hyper)
    total = len(log)
    for entry in log:
        t = entry.step / (total - 1)
        assert entry.alpha == hyper.alpha0 * (1.0 - t)
    assert log[-1].alpha == 0.0


def test_non_finite_loss_raises():
    model, instances, _ = small_setup()
    model.parameters()["embed"].data[:] = 1e300
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLoss) as err:
        train(model, instances[:8], Hyper(lr=0.1, epochs=1, batch_size=8))
    assert err.value.step == 0


def test_gradient_check_tiny_model():
    model, batch = tiny_model_and_batch()
    assert gradient_check(model, batch, num_samples=120) < 1e-3


def test_gradient_check_task_only():
    model, batch = tiny_model_and_batch(alpha0=0.0)
    assert gradient_check(model, batch, num_samples=80, t=0.0) < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    model, instances, _ = small_setup()
    train(model, instances[:8], Hyper(lr=0.05, epochs=1, batch_size=8))
    path = tmp_path / "model.sglm"
    save_model(model, path)
    with open(path, "rb") as fh:
        assert fh.read(4) == b"SGLM"
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.assignment == model.assignment
    assert loaded.alpha0 == model.alpha0
    assert loaded.step == model.step
    for name, p in model.parameters().items():
        assert np.array_equal(p.data, loaded.parameters()[name].data), name


def test_train_log_csv(tmp_path):
    model, instances, _ = small_setup()
    log = train(model, instances[:8], Hyper(lr=0.05, epochs=1, batch_size=8))
    path = tmp_path / "log.csv"
    write_train_log_csv(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,task_loss,sag_loss,alpha"
    assert len(lines) == 1 + len(log)
