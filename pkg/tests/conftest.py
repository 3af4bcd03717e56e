import numpy as np


def spectrum_matrix(n, m, sigma, seed):
    """``n x m`` matrix with prescribed singular values and random singular vectors."""
    rng = np.random.default_rng(seed)
    k = len(sigma)
    u, _ = np.linalg.qr(rng.normal(size=(n, k)))
    v, _ = np.linalg.qr(rng.normal(size=(m, k)))
    return (u * np.asarray(sigma, dtype=float)) @ v.T


def split_rows(s, sizes):
    from fedprog.fedcore import UserState

    offsets = np.cumsum([0] + list(sizes))
    assert offsets[-1] == s.shape[0]
    return [UserState(i, s[offsets[i]:offsets[i + 1]], np.ones(sizes[i]))
            for i in range(len(sizes))]


# (criterion, description, passed or None if skipped, detail) rows from test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, what, ok, detail in ACCEPTANCE:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {cid:>4}  {what}: {detail}")
