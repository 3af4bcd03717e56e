"""Walk through one federated randomized SVD run.

Three users hold private signal matrices. We run the protocol, compare it with
the same computation on pooled data, read the transcript, show why an uploaded
sketch does not pin down the data and finally audit the run.

Run with ``python3 demos/federated_svd_walkthrough.py``.
"""

import numpy as np

from fedprog import Federation, FrsvdConfig, UserState, audit_transcript
from fedprog.fedcore import DOWNLOAD, is_uniquely_recoverable, second_preimage
from fedprog.frsvd import centralized_mfpca_svd, centralized_rsvd, federated_rsvd
from fedprog.linalg import principal_angles

rng = np.random.default_rng(0)
length = 120
tau = np.linspace(0.01, 1.0, length)

# Each row is one asset's degradation path: a shared shape scaled by a
# per-asset rate, plus measurement noise.
sizes = [5, 12, 8]
users = []
for uid, n in enumerate(sizes):
    rate = rng.normal(1.0, 0.25, size=(n, 1))
    signals = rate * np.exp(2 * tau) + 0.05 * rng.normal(size=(n, length))
    users.append(UserState(uid, signals, ttfs=rng.uniform(1, 2, size=n)))
pooled = np.vstack([u.signals for u in users])

cfg = FrsvdConfig(k=3, r=5, q=2)
out, transcript = federated_rsvd(users, cfg, seed_w=1, seed_p=2)

print("1) Federated result")
print(f"   singular values {np.round(out.sigma, 3)}")
same = centralized_rsvd(pooled, cfg, 1, 2)
print(f"   max |v_fed - v_pooled| = {np.abs(out.v - same.v).max():.1e}")
exact = centralized_mfpca_svd(pooled)[0][:, :1]
print(f"   leading direction vs exact centered SVD: {principal_angles(out.v[:, :1], exact)[0]:.1e} rad")

print("\n2) Transcript")
for t in transcript.transfers[:6]:
    print(f"   round {t.round} {t.direction:8s} {t.src:>14s} -> {t.dst:<14s} {t.label:7s} {t.shape}")
meter = transcript.cost_meter()
print(f"   ... {len(transcript)} transfers, {meter.total} floats in {meter.rounds} rounds")

print("\n3) A sketch does not determine the data")
w = next(t.payload for t in transcript if t.direction == DOWNLOAD and t.label == "W")
s0 = users[0].signals
other = second_preimage(s0, w)
print(f"   W is {w.shape}; uniquely recoverable: {is_uniquely_recoverable(w)}")
print(f"   another S' with S'W = SW differs by {np.abs(other - s0).max():.2f} "
      f"while |S'W - SW| = {np.abs(other @ w - s0 @ w).max():.1e}")

print("\n4) Audit")
print(f"   clean run passes: {audit_transcript(transcript).passed}")
Federation(users, transcript).run_round(None, lambda st, _: st.signals, lambda ups: None,
                                        up_label="S_i")
report = audit_transcript(transcript)
print(f"   after a raw upload: passed={report.passed}")
print(f"   first violation: {report.violations[0]}")
