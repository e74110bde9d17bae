"""
Attacking a classifier
======================

Train a small dense classifier on synthetic feature maps, then measure how
its accuracy falls under FGSM and PGD as the L-infinity budget grows. Ends
with one adversarially trained model for comparison.

Run with ``python3 demos/02_attacks.py`` (a few seconds).
"""

from robusteeg.attacks import AttackConfig, ThreatModel, perturbation_norm, pgd
from robusteeg.datasets import synth_generate
from robusteeg.evaluation import evaluate_robust
from robusteeg.model import DenseClassifier
from robusteeg.rng import stream
from robusteeg.training import TrainConfig, fit

SHAPE = (5, 8, 4)
data = synth_generate(5, 150, SHAPE, class_sep=2.0, robust_fraction=0.2, seed=0)
train, test = data.by_subjects([0, 1, 2, 3]), data.by_subjects([4])  # held-out subject


def trained(defense, eps=0.0):
    model = DenseClassifier(SHAPE, hidden=(64,), seed=1)
    config = TrainConfig(batch_size=32, epochs=15, lr=3e-3, seed=1, defense=defense,
                         threat=ThreatModel("linf", eps), attack=AttackConfig("fgsm"), monitor_samples=0)
    fit(model, train, None, config)
    return model.eval()


###############################################################################
# Robust accuracy against the budget
# ----------------------------------

plain = trained("none")
print(f"{'eps':>6}{'FGSM':>8}{'PGD-10':>8}{'PGD-20':>8}")
for eps in (0.0, 0.1, 0.2, 0.4):
    threat = ThreatModel("linf", eps)
    row = [evaluate_robust(plain, test, threat, AttackConfig("fgsm")).r_accuracy]
    for steps in (10, 20):
        row.append(evaluate_robust(plain, test, threat, AttackConfig("pgd", steps=steps, step_size=eps / 4)).r_accuracy)
    print(f"{eps:>6.2f}" + "".join(f"{v:>8.3f}" for v in row))

###############################################################################
# Every PGD iterate stays inside the ball
# ---------------------------------------

threat = ThreatModel("linf", 0.2)
iterates = []
pgd(plain, test.X[:16], test.labels[:16], threat, AttackConfig("pgd", steps=10, step_size=0.05),
    rng=stream(0, "attack"), on_iterate=iterates.append)
worst = max(perturbation_norm(x, test.X[:16], "linf").max() for x in iterates)
print(f"\nlargest L-inf distance over {len(iterates)} iterates: {worst:.6f} (budget 0.2)")

###############################################################################
# Adversarial training buys robustness
# ------------------------------------

robust = trained("at", eps=0.2)
for name, model in (("standard", plain), ("adversarial", robust)):
    rep = evaluate_robust(model, test, threat, AttackConfig("pgd", steps=10, step_size=0.05))
    print(f"{name:<12} accuracy {rep.accuracy:.3f}  PGD-10 r-accuracy {rep.r_accuracy:.3f}")
