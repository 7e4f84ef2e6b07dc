"""Train a small encoder-decoder with RK2 blocks to copy its input.

Training stops once teacher-forced token accuracy on the validation split
reaches 99%, which takes a few hundred steps and well under a minute.

Run: python3 demos/copy_task.py
"""

from odeformer.studies import StudyConfig, run_copy

config = StudyConfig(copy_min_steps=0)
res = run_copy(config, "RK2", depth=2, seed=1)
print(f"params {res['n_params']}, 99% reached at step {res['steps_to_target']}")
print(f"loss step 1 {res['loss_step1']:.3f} -> final {res['final_loss']:.3f}")
print(f"teacher-forced token accuracy {res['final_acc']:.3f} (untrained {res['untrained_acc']:.3f})")
print(f"greedy token accuracy {res['greedy_token_acc']:.3f}, exact {res['greedy_exact']:.3f}")
