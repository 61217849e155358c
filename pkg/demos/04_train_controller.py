"""Training the admission controller on distractor-heavy tasks.

Tasks mix genuinely reusable steps with lures: plausible-looking keys
whose junk contents slow and corrupt any team that trusts them.  The
policy gradient (group-relative advantages, usage bonus, sparsity
penalty) teaches the controller to admit real results and reject bait.

Scaled down from the evaluation protocol so it finishes in ~15 seconds.
"""

import numpy as np

from hivemem import AdmissionPolicy, HashingEmbedder, TrainConfig, train
from hivemem.sim import generate_task, prob_yes_by_label, run_variant, variant_policy


def make_task(seed):
    return generate_task(
        seed=seed, depth=2, width=1, overlap_count=6, distractor_count=6,
        step_cap=14, p_fail=0.08, pollution_fail_boost=0.25,
        pollution_recovery_steps=2, pollution_corrupt_rate=0.65,
    )


provider = HashingEmbedder(dimension=64)
train_tasks = [make_task(1000 + i) for i in range(15)]
held_out = [make_task(5000 + i) for i in range(20)]

policy = AdmissionPolicy(embed_dim=64, controller_dim=32, seed=0)
config = TrainConfig(
    group_size=5, epochs=4, replay_factor=10, sample_temperature=1.2,
    beta=0.25, lambda_sparse=0.05, lr=1.5e-3, seed=42, k=3,
)
report = train(policy, train_tasks, provider, config)
print("epoch  reward  admission  total_loss")
for row in report.epochs:
    print(f"{row['epoch']:5d}  {row['mean_reward']:6.3f}  {row['admission_rate']:9.3f}"
          f"  {row['mean_total_loss']:10.3f}")

print("\nheld-out comparison (greedy decoding):")
for name in ("no-memory", "add-all"):
    metrics, _ = run_variant(held_out, variant_policy(name), 3, [17], provider)
    print(f"  {name:10s} score={metrics.mean_score:.3f} runtime={metrics.mean_runtime:6.1f}")
metrics, traces = run_variant(held_out, policy, 3, [17], provider, keep_traces=True)
print(f"  {'learned':10s} score={metrics.mean_score:.3f} runtime={metrics.mean_runtime:6.1f} "
      f"(admits {metrics.memories_saved_pct:.0f}% of steps)")

print("\nwhat the controller learned, by ground-truth step class:")
for label, probs in sorted(prob_yes_by_label(traces).items()):
    print(f"  {label:9s} mean admit probability {np.mean(probs):.3f}  (n={len(probs)})")
