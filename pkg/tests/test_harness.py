import csv
import io
import math
import sys
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_config, oracle_teacher, spike_checkpoint, tiny_config, tiny_teacher

from ctcd.errors import ConfigError
from ctcd.harness.config import build_config, dump_config, load_config, parse_lines
from ctcd.harness.optim import Adam, AdamConfig
from ctcd.harness.train import (
    decode_dataset,
    epoch_batches,
    evaluate,
    load_data,
    train,
    train_baseline,
    train_baseline_kd,
    train_two_stage,
)
from ctcd.models import encode_checkpoint
from ctcd.numcore import DenseArray, Rng
from ctcd.synthdata import Dataset, make_dataset


def csv_rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def same_params(a, b):
    return all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


# -- config ---------------------------------------------------------------------------


def test_config_grammar():
    text = """
    # a comment
    task.sigma = 0.25   # trailing comment
    student.family = rnn
    student.layer_widths = 5, 4
    student.bidirectional = true
    distill.skd_teacher = none
    train.seed = 9
    """
    cfg = build_config(parse_lines(text), env={})
    assert cfg.task.sigma == 0.25
    assert cfg.student.layer_widths == (5, 4) and cfg.student.bidirectional
    assert cfg.plan.skd_teacher is None
    assert cfg.seed == 9


@pytest.mark.parametrize(
    "text",
    ["task.sigma 0.3", "sigma = 0.3", "task.sigma = 1\ntask.sigma = 2", "task.colour = red", "gpu.count = 1",
     "train.seed = abc", "student.bidirectional = yes"],
)
def test_config_errors(text):
    with pytest.raises(ConfigError):
        build_config(parse_lines(text), env={})


def test_seed_env_override():
    assert build_config(parse_lines("train.seed = 3"), env={"CTCD_SEED": "17"}).seed == 17
    with pytest.raises(ConfigError):
        build_config({}, env={"CTCD_SEED": "x"})


def test_dump_round_trip():
    cfg = tiny_config(student__family="rnn", student__layer_widths="3,2", student__kernel_widths="", optim__stage1_lr=0.01)
    again = build_config(parse_lines(dump_config(cfg)), env={})
    assert dump_config(again) == dump_config(cfg)
    assert again.student == cfg.student


def test_load_config_resolves_relative_paths(tmp_path):
    (tmp_path / "run.cfg").write_text("distill.skd_teacher = t.ckpt\ntrain.output_dir = out\n")
    cfg = load_config(tmp_path / "run.cfg", env={})
    assert cfg.plan.skd_teacher == str(tmp_path / "t.ckpt")
    assert cfg.output_dir == str(tmp_path / "out")


def test_student_must_match_task():
    with pytest.raises(ConfigError):
        replace(tiny_config(), student=tiny_teacher(make_config(task__alphabet_size=5)).spec)


# -- optimizer -------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    p = DenseArray(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam([p], AdamConfig(lr=0.1, poly_decay=False), total_steps=10)
    p.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_matches_reference_over_steps():
    rng = Rng(3)
    p = DenseArray(rng.normal_array(4), requires_grad=True)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    cfg = AdamConfig(lr=0.01, poly_decay=False)
    opt = Adam([p], cfg, 5)
    for t in range(1, 6):
        g = rng.normal_array(4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, atol=1e-14)


def test_polynomial_decay_schedule():
    opt = Adam([], AdamConfig(lr=1e-3, power=2.0, end_lr=0.0), total_steps=4)
    rates = []
    for _ in range(5):
        rates.append(opt.learning_rate())
        opt.t += 1
    np.testing.assert_allclose(rates, [1e-3 * (1 - k / 4) ** 2 for k in range(5)], atol=1e-18)


# -- batching ---------------------------------------------------------------------------


def test_batches_cover_each_utterance_once_with_equal_lengths():
    cfg = tiny_config(data__train_count=40)
    train_ds, _ = load_data(cfg)
    batches = epoch_batches(train_ds.utterances, 4, Rng(5))
    ids = [u.id for b in batches for u in b]
    assert sorted(ids) == sorted(u.id for u in train_ds.utterances)
    assert all(len({u.num_frames for u in b}) == 1 and 1 <= len(b) <= 4 for b in batches)
    again = epoch_batches(train_ds.utterances, 4, Rng(5))
    assert [[u.id for u in b] for b in again] == [[u.id for u in b] for b in batches]


# -- training -------------------------------------------------------------------------


def test_baseline_deterministic_and_seed_sensitive():
    a, b = train_baseline(tiny_config()), train_baseline(tiny_config())
    assert encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint)
    assert a.stage2_csv == b.stage2_csv
    c = train_baseline(tiny_config(train__seed=2))
    assert encode_checkpoint(c.checkpoint) != encode_checkpoint(a.checkpoint)


def test_one_csv_record_per_step():
    cfg = tiny_config()
    res = train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=tiny_teacher(cfg), rkd_teacher=tiny_teacher(cfg))))
    rows1, rows2 = csv_rows(res.stage1_csv), csv_rows(res.stage2_csv)
    assert [int(r["step"]) for r in rows1] == list(range(1, len(rows1) + 1))
    assert [int(r["step"]) for r in rows2] == list(range(1, len(rows2) + 1))
    assert len(rows1) + len(rows2) == res.report.steps
    assert len(res.report.stage1["loss_rkd"]) == cfg.stage1_epochs
    assert all(len(v) == cfg.stage2_epochs for v in res.report.stage2.values())


def test_stage2_total_is_ctc_plus_lambda_skd():
    cfg = tiny_config(distill__lambda_skd=0.37)
    t = tiny_teacher(cfg)
    res = train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=t, rkd_teacher=t)))
    for r in csv_rows(res.stage2_csv):
        lhs = float(r["loss_total"])
        rhs = float(r["loss_ctc"]) + 0.37 * float(r["loss_skd"])
        assert abs(lhs - rhs) <= 1e-12


def test_teacher_untouched_by_training():
    cfg = tiny_config()
    skd_t, rkd_t = tiny_teacher(cfg, 1), tiny_teacher(cfg, 2, family="rnn")
    before = encode_checkpoint(skd_t), encode_checkpoint(rkd_t)
    plan = replace(cfg.plan, skd_teacher=skd_t, rkd_teacher=rkd_t)
    for method in ("tutornet", "framekd", "guided", "seqkd"):
        train(replace(cfg, plan=plan), method)
    assert (encode_checkpoint(skd_t), encode_checkpoint(rkd_t)) == before


def test_lambda_zero_equals_baseline():
    cfg = tiny_config(distill__lambda_skd=0.0)
    base = train_baseline(cfg)
    kd = train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=tiny_teacher(cfg))), "skd-only")
    assert same_params(base.checkpoint, kd.checkpoint)
    assert [r["loss_ctc"] for r in csv_rows(base.stage2_csv)] == [r["loss_ctc"] for r in csv_rows(kd.stage2_csv)]


def test_guided_weight_zero_equals_baseline():
    cfg = tiny_config(distill__guided_weight=0.0)
    base = train_baseline(cfg)
    kd = train_baseline_kd(replace(cfg, plan=replace(cfg.plan, skd_teacher=tiny_teacher(cfg))), "guided")
    assert same_params(base.checkpoint, kd.checkpoint)


def test_seqkd_top1_of_perfect_teacher_equals_ground_truth():
    cfg = tiny_config(task__sigma=0.0, distill__nbest_n=1, distill__beam_width=4)
    teacher = oracle_teacher(cfg.task)
    train_ds, _ = load_data(cfg)
    hyps = decode_dataset(teacher.to_encoder(), train_ds)
    assert all(hyps[u.id] == u.labels for u in train_ds.utterances)
    base = train_baseline(cfg)
    kd = train_baseline_kd(replace(cfg, plan=replace(cfg.plan, skd_teacher=teacher)), "seqkd")
    assert same_params(base.checkpoint, kd.checkpoint)


def test_seqkd_nbest_runs_and_differs():
    cfg = tiny_config(distill__nbest_n=3, distill__beam_width=4)
    kd = train_baseline_kd(replace(cfg, plan=replace(cfg.plan, skd_teacher=tiny_teacher(cfg))), "seqkd")
    assert not same_params(kd.checkpoint, train_baseline(cfg).checkpoint)


def test_framekd_spike_disagreement_logs_large_kd_but_bounded_skd():
    cfg = tiny_config(
        task__min_symbols=1, task__max_symbols=1, task__d_min=4, task__d_max=4, task__silence_prob=0.0,
        train__stage2_epochs=1, train__batch_size=1,
    )
    frames = 4
    k = cfg.task.num_classes
    teacher = spike_checkpoint(tiny_teacher(cfg).spec, label=0, height=15.0)
    student = spike_checkpoint(cfg.student, label=k - 1, height=15.0)
    plan = replace(cfg.plan, skd_teacher=teacher)
    run = replace(cfg, plan=plan, init_checkpoint=student)
    kd = csv_rows(train_baseline_kd(run, "framekd").stage2_csv)[0]
    skd = csv_rows(train_two_stage(run, "skd-only").stage2_csv)[0]
    assert float(kd["loss_skd"]) / frames > 20
    assert float(skd["loss_skd"]) / frames < 2


def test_missing_teacher_is_config_error(tmp_path):
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        train_two_stage(cfg)
    with pytest.raises(ConfigError):
        train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=str(tmp_path / "none.ckpt"))))
    with pytest.raises(ConfigError):
        t = tiny_teacher(cfg)
        train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=t, rkd_teacher=None)), "tutornet")
    with pytest.raises(ConfigError):
        train_baseline_kd(cfg, "guided")
    with pytest.raises(ConfigError):
        train(cfg, "distill-harder")


def test_zero_stage1_epochs_tutornet_equals_skd_only():
    cfg = tiny_config(train__stage1_epochs=0)
    t = tiny_teacher(cfg)
    plan = replace(cfg.plan, skd_teacher=t, rkd_teacher=t)
    a = train_two_stage(replace(cfg, plan=plan), "tutornet")
    b = train_two_stage(replace(cfg, plan=plan), "skd-only")
    assert same_params(a.checkpoint, b.checkpoint)
    assert a.stage1_csv is None


def test_stage1_changes_start_of_stage2():
    cfg = tiny_config()
    t = tiny_teacher(cfg)
    plan = replace(cfg.plan, skd_teacher=t, rkd_teacher=t)
    a = train_two_stage(replace(cfg, plan=plan), "tutornet")
    b = train_two_stage(replace(cfg, plan=plan), "skd-only")
    assert csv_rows(a.stage2_csv)[0] != csv_rows(b.stage2_csv)[0]
    assert a.report.rkd_initial is not None and a.report.rkd_final is not None
    assert "rkd_teacher" in a.checkpoint.metadata or a.checkpoint.metadata.get("method") == "tutornet"


def test_outputs_written(tmp_path):
    cfg = replace(tiny_config(), output_dir=str(tmp_path / "run"))
    t = tiny_teacher(cfg)
    train_two_stage(replace(cfg, plan=replace(cfg.plan, skd_teacher=t, rkd_teacher=t)))
    names = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert names == ["config.txt", "losses.csv", "model.ckpt", "report.json", "stage1_losses.csv"]
    assert (tmp_path / "run" / "losses.csv").read_text().splitlines()[0] == "step,loss_ctc,loss_skd,loss_total"


# -- evaluation --------------------------------------------------------------------------


def test_evaluate_perfect_teacher_zero_error():
    cfg = tiny_config(task__sigma=0.0)
    _, held = load_data(cfg)
    rep = evaluate(oracle_teacher(cfg.task), held)
    assert rep.ter == 0.0 and rep.wer == 0.0


def test_evaluate_report_bytes_identical():
    cfg = tiny_config()
    ckpt = tiny_teacher(cfg)
    _, held = load_data(cfg)
    assert evaluate(ckpt, held).to_json() == evaluate(ckpt, held).to_json()


def test_evaluate_errors():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        evaluate(tiny_teacher(cfg), Dataset(cfg.task.alphabet_size, cfg.task.feature_dim))
    other = make_dataset(replace(cfg.task, feature_dim=5, templates=None), 3)
    with pytest.raises(ConfigError):
        evaluate(tiny_teacher(cfg), Dataset(cfg.task.alphabet_size, 5, other))


def test_training_set_ter_not_worse_than_heldout_on_average():
    gaps = []
    for seed in range(1, 6):
        cfg = tiny_config(train__seed=seed, train__stage2_epochs=8, data__train_count=30, data__eval_count=30)
        res = train_baseline(cfg)
        train_ds, held = load_data(cfg)
        gaps.append(evaluate(res.checkpoint, held).ter - evaluate(res.checkpoint, train_ds).ter)
    assert np.mean(gaps) >= 0


def test_infeasible_utterances_are_skipped(monkeypatch):
    cfg = tiny_config()
    train_ds, held = load_data(cfg)
    first = train_ds.utterances[0]
    train_ds.utterances.append(replace(first, id="bad", labels=(0,) * (first.num_frames + 1)))
    monkeypatch.setattr(sys.modules["ctcd.harness.train"], "load_data", lambda c: (train_ds, held))
    res = train_baseline(cfg)
    assert res.report.skipped == 1
    assert math.isfinite(res.report.stage2["loss_ctc"][-1])
