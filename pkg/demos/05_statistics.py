"""AUC, the EER operating point, a paired DeLong test, and CER above 100%."""

import numpy as np

from speechdep.metrics import auc, cer, classification_report, delong_test, eer_point, render_report

labels = [1, 1, 0, 0]
scores = [0.9, 0.3, 0.7, 0.1]
print("AUC", auc(scores, labels))
pt = eer_point(scores, labels)
print(f"EER point: threshold {pt.threshold:.3f}, sensitivity {pt.sensitivity:.2f}, specificity {pt.specificity:.2f}")

rng = np.random.default_rng(0)
y = (rng.uniform(size=80) < 0.3).astype(int)
a = y + rng.normal(size=80)
b = 0.5 * y + rng.normal(size=80)
r = delong_test(a, b, y)
print(f"DeLong: AUC {r.auc_a:.3f} vs {r.auc_b:.3f}, z = {r.z:.2f}, p = {r.p:.4f}")
print("comparing a model with itself gives p =", delong_test(a, a, y).p)

print('cer("a", "abcd") =', cer("a", "abcd"), "(insertions push CER past 1)")

reps = [classification_report("model-a/test", a, y), classification_report("model-b/test", b, y)]
print(render_report(reps, "table").decode())
