"""
A tiny end-to-end lifelong run
==============================

Two miniature datasets, one epoch each: train the sequence, then evaluate
with the stored-gallery protocol and print the compatibility matrix.
"""

import os
import tempfile

import numpy as np

from lifereid.evaluation import compatibility_matrix, evaluate_per_dataset
from lifereid.losses import LossWeights
from lifereid.synth import GenConfig, gen_benchmark
from lifereid.trainer import AblationFlags, TrainConfig, train_sequence

bench = gen_benchmark(GenConfig(n_tasks=2, n_train_ids=8, n_eval_ids=5,
                                imgs_per_id=6, seed=0))
cfg = TrainConfig(epochs_per_task=2, p_ids=4, k_instances=2, replay_batch=4,
                  seed=0)

with tempfile.TemporaryDirectory() as run_dir:
    result = train_sequence(bench.tasks, cfg, LossWeights(), AblationFlags(),
                            run_dir)
    for t, trace in enumerate(result.loss_history, start=1):
        print(f"task {t}: {len(trace)} steps, "
              f"loss {trace[0]:.3f} -> {trace[-1]:.3f}")

    # Queries come from the final model; galleries stay as stored at each
    # task (the backward-compatible protocol).
    table = evaluate_per_dataset(result.params, bench.tasks,
                                 result.features_dir, "multiply")
    print("\nper-dataset table:")
    print(table.to_csv(), end="")

    # Entry [i, j]: model i+1's queries against dataset j+1's stored gallery.
    # The lower triangle is the backward-compatibility story.
    matrix = compatibility_matrix(
        [os.path.join(run_dir, "checkpoints", f"task_{t}.ckpt")
         for t in range(1, 3)],
        bench.tasks, result.features_dir, "multiply")
    print("\ncompatibility matrix (rows: models, cols: stored galleries):")
    print(np.round(matrix, 4))
