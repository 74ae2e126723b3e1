"""
Two-stage distillation on the default toy task
==============================================

Trains a TDNN teacher, then a small TDNN student three ways for one seed.
Takes about two minutes on one core.
"""

# %%
# The default task: 5 letters plus a word separator, 8-dim noisy template features.
from dataclasses import replace

from ctcd.harness.config import build_config
from ctcd.harness.matrix import train_teachers
from ctcd.harness.train import evaluate, load_data, train

cfg = build_config({}, env={})
train_set, held = load_data(cfg)
print(len(train_set.utterances), "train /", len(held.utterances), "held-out utterances")
print("first utterance labels", train_set.utterances[0].labels, "frames", train_set.utterances[0].num_frames)

# %%
# A larger TDNN teacher trained with CTC alone.
teacher = train_teachers(cfg, families=("tdnn",))["tdnn"]
print("teacher", evaluate(teacher, held))

# %%
# Student trained with CTC only, with CTC + softmax-level KD, and with a representation
# stage before the softmax-level stage.
plan = replace(cfg.plan, skd_teacher=teacher, rkd_teacher=teacher)
run = replace(cfg, plan=plan, seed=1)
results = {m: train(run, m) for m in ("baseline", "skd-only", "tutornet")}
for method, res in results.items():
    ev = res.report.eval
    print(f"{method:9s} TER {ev.ter:.3f}  WER {ev.wer:.3f}  {res.report.wall_clock_s:.1f}s")

# %%
# Stage 1 fits the adapted student representation to the teacher's last hidden layer.
rep = results["tutornet"].report
print("RKD per utterance before/after stage 1:", round(rep.rkd_initial, 1), round(rep.rkd_final, 1))
print("stage-1 epoch means", [round(x, 1) for x in rep.stage1["loss_rkd"]])
