"""
The backfill-free gallery protocol
==================================

The point of the whole exercise: once a task's gallery features are stored,
they are never recomputed.  This script shows the store enforcing that, and
compares the protocol's numbers against a deliberately backfilled control.
"""

import tempfile

from lifereid.errors import ProtocolError
from lifereid.evaluation import backfilled_control, evaluate_per_dataset
from lifereid.featstore import file_hash, store_append, store_load
from lifereid.losses import LossWeights
from lifereid.synth import GenConfig, gen_benchmark
from lifereid.trainer import AblationFlags, TrainConfig, train_sequence

bench = gen_benchmark(GenConfig(n_tasks=2, n_train_ids=8, n_eval_ids=5,
                                imgs_per_id=6, seed=1))
cfg = TrainConfig(epochs_per_task=2, p_ids=4, k_instances=2, replay_batch=4,
                  seed=1)

with tempfile.TemporaryDirectory() as run_dir:
    result = train_sequence(bench.tasks, cfg, LossWeights(), AblationFlags(),
                            run_dir)

    # Each gallery file records which model wrote it, and its content hash
    # is stable from the moment of storage.
    for t in (1, 2):
        fs = store_load(result.features_dir, (t, "gallery"))
        print(f"gallery {t}: extractor model {fs.extractor_version}, "
              f"hash {file_hash(result.features_dir, (t, 'gallery')):016x}")

    # Appending under an already-used dataset tag is refused -- there is no
    # way to overwrite a stored gallery through the store API.
    try:
        store_append(result.features_dir, store_load(result.features_dir,
                                                     (1, "gallery")))
    except ProtocolError as exc:
        print("\nduplicate append refused:", exc)

    # Protocol evaluation (stored galleries) vs the backfilled control
    # (galleries re-embedded by the final model).  The control is the costly
    # regime this library avoids; at production scale it is also the stronger
    # one, which is what makes closing the gap without backfilling matter.
    protocol = evaluate_per_dataset(result.params, bench.tasks,
                                    result.features_dir, "multiply")
    control = backfilled_control(result.params, bench.tasks, "multiply")
    print("\n                 stored    backfilled")
    for name, a, b in zip(protocol.names, protocol.map_values,
                          control.map_values):
        print(f"{name} mAP     {a:8.4f}  {b:8.4f}")
    print(f"average mAP  {protocol.average_map:8.4f}  {control.average_map:8.4f}")
