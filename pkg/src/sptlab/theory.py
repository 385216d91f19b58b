"""Input-independent attention scores s_ij(alpha) = alpha * Delta_ij and the slope of two losses at alpha = 0.

Mean-pooled supervision cannot see a column-centred pattern at uniform
attention, while token reconstruction has slope
``-(1/L^2) <row-centred Delta, C>_F`` (or ``-(1/(L-1)^2) sum_{i!=j} Delta_ij C_ij``
with self-interactions excluded). This module builds such patterns, evaluates
the closed forms, and checks both slopes against Monte Carlo central
differences that share random numbers across +h and -h.

The supervised loss used for checking is ``0.5 * (u . h(alpha) - Y)^2`` with a
fixed random probe ``u`` and labels ``Y = v . X_0 + 0.1 * xi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import SeededRng, masked_softmax, softmax_rows

CENTER_TOL = 1e-10
PROJECTION_TOL = 1e-12
MAX_PROJECTION_ITERS = 10_000
VARIANTS = ("plain", "diag-masked")


@dataclass
class ScorePattern:
    delta: np.ndarray
    variant: str = "plain"
    label: str = ""
    certificate: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.delta = np.asarray(self.delta, dtype=np.float64)
        L = self.delta.shape[0]
        if self.delta.shape != (L, L) or L < 2:
            raise ValueError("pattern must be a square matrix with L >= 2")
        self.certificate = certify(self.delta, self.variant)

    @property
    def L(self) -> int:
        return self.delta.shape[0]

    @property
    def valid(self) -> bool:
        return self.certificate["valid"]


def _offdiag(delta):
    d = delta.copy()
    np.fill_diagonal(d, 0.0)
    return d


def certify(delta: np.ndarray, variant: str) -> dict:
    if variant == "plain":
        col = float(np.abs(delta.sum(axis=0)).max())
        return {"max_col_sum": col, "valid": col < CENTER_TOL}
    off = _offdiag(delta)
    row = float(np.abs(off.sum(axis=1)).max())
    col = float(np.abs(off.sum(axis=0)).max())
    zero_diag = bool(np.all(np.diag(delta) == 0.0))
    return {"max_offdiag_row_sum": row, "max_offdiag_col_sum": col, "zero_diagonal": zero_diag,
            "valid": zero_diag and row < CENTER_TOL and col < CENTER_TOL}


def _center_offdiag(delta: np.ndarray) -> np.ndarray:
    """Alternate off-diagonal row and column centering until both residuals vanish."""
    L = delta.shape[0]
    off = ~np.eye(L, dtype=bool)
    d = _offdiag(delta)
    for _ in range(MAX_PROJECTION_ITERS):
        d = d - off * (d.sum(axis=1, keepdims=True) / (L - 1))
        d = d - off * (d.sum(axis=0, keepdims=True) / (L - 1))
        if max(np.abs(d.sum(axis=1)).max(), np.abs(d.sum(axis=0)).max()) < PROJECTION_TOL:
            return d
    raise RuntimeError("off-diagonal centering did not converge")


def project(delta: np.ndarray, variant: str) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if variant == "plain":
        return delta - delta.mean(axis=0, keepdims=True)
    if variant == "diag-masked":
        return _center_offdiag(delta)
    raise ValueError(f"unknown variant {variant!r}")


def make_pattern(kind: str, L: int, variant: str = "plain", *, w: int = 2, amp: float = 1.0,
                 seed: int = 0) -> ScorePattern:
    """``locality``: ``amp`` inside the band |i-j| <= w; ``random``: U(-1, 1) entries. Then projected."""
    if L < 2:
        raise ValueError("L must be at least 2")
    if kind == "locality":
        idx = np.arange(L)
        raw = amp * (np.abs(idx[:, None] - idx[None, :]) <= w)
        label = f"locality(w={w}, amp={amp})"
    elif kind == "random":
        raw = SeededRng(seed, "theory", "pattern", L).uniform(L * L, -1.0, 1.0).reshape(L, L)
        label = f"random(seed={seed})"
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    return ScorePattern(project(raw, variant), variant, label)


@dataclass(frozen=True)
class TokenModel:
    """Centred Gaussian tokens: i.i.d. across positions, or a stationary AR(1) chain."""

    kind: str = "iid"
    dim: int = 4
    length: int = 8
    sigma2: float = 1.0
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("iid", "ar1"):
            raise ValueError(f"unknown token model {self.kind!r}")
        if not self.sigma2 > 0:
            raise ValueError("degenerate token model: sigma2 must be positive")
        if self.kind == "ar1" and not -1.0 < self.rho < 1.0:
            raise ValueError("AR(1) needs |rho| < 1")

    def autocorrelation(self) -> np.ndarray:
        """C_ij = E[X_i . X_j]."""
        idx = np.arange(self.length)
        if self.kind == "iid":
            return self.sigma2 * self.dim * np.eye(self.length)
        return self.sigma2 * self.dim * self.rho ** np.abs(idx[:, None] - idx[None, :])

    def sample(self, n: int, rng: SeededRng) -> np.ndarray:
        z = rng.normal(n * self.length * self.dim).reshape(n, self.length, self.dim)
        s = np.sqrt(self.sigma2)
        if self.kind == "iid":
            return s * z
        x = np.empty_like(z)
        x[:, 0] = s * z[:, 0]
        inno = s * np.sqrt(1.0 - self.rho**2)
        for i in range(1, self.length):
            x[:, i] = self.rho * x[:, i - 1] + inno * z[:, i]
        return x

    def describe(self) -> dict:
        d = {"kind": self.kind, "dim": self.dim, "sigma2": self.sigma2}
        if self.kind == "ar1":
            d["rho"] = self.rho
        return d


def row_center(delta: np.ndarray) -> np.ndarray:
    return delta - delta.mean(axis=1, keepdims=True)


def spt_grad_closed_form(p: ScorePattern, C: np.ndarray) -> float:
    if not p.valid:
        raise ValueError(f"pattern fails its centering certificate: {p.certificate}")
    C = np.asarray(C, dtype=np.float64)
    if C.shape != p.delta.shape:
        raise ValueError(f"C has shape {C.shape}, pattern is {p.delta.shape}")
    L = p.L
    if p.variant == "plain":
        return -float(np.sum(row_center(p.delta) * C)) / L**2
    return -float(np.sum(_offdiag(p.delta) * C)) / (L - 1) ** 2


def attention_weights(delta: np.ndarray, alpha: float, variant: str = "plain") -> np.ndarray:
    s = alpha * delta
    if variant == "plain":
        return softmax_rows(s)
    return masked_softmax(s, ~np.eye(delta.shape[0], dtype=bool))


def lemma_invariance_check(delta, b, alpha: float) -> float:
    """max |softmax(b + alpha Delta) - softmax(b + alpha rowcentre(Delta))|."""
    delta = np.asarray(delta, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if delta.shape != b.shape:
        raise ValueError(f"shape mismatch: {delta.shape} vs {b.shape}")
    a1 = softmax_rows(b + alpha * delta)
    a2 = softmax_rows(b + alpha * row_center(delta))
    return float(np.abs(a1 - a2).max())


def _per_sample_losses(A, X, Y, u):
    o = np.einsum("ij,njd->nid", A, X)
    h = o.mean(axis=1)
    sup = 0.5 * (h @ u - Y) ** 2
    spt = 0.5 * np.sum((X - o) ** 2, axis=(1, 2)) / X.shape[1]
    return sup, spt


def verify_proposition(p: ScorePattern, tm: TokenModel, n_mc: int = 100_000, h: float = 1e-4,
                       seed: int = 0, batch: int = 25_000) -> dict:
    """Monte Carlo central differences of both losses at alpha = 0 versus the closed form."""
    if n_mc < 1000:
        raise ValueError("n_mc must be at least 1000")
    if tm.length != p.L:
        raise ValueError(f"token model length {tm.length} does not match pattern size {p.L}")
    closed = spt_grad_closed_form(p, tm.autocorrelation())
    probe = SeededRng(seed, "theory", "probe")
    u = probe.normal(tm.dim)
    v = probe.normal(tm.dim)
    A_plus = attention_weights(p.delta, h, p.variant)
    A_minus = attention_weights(p.delta, -h, p.variant)

    d_sup, d_spt = [], []
    for k, start in enumerate(range(0, n_mc, batch)):
        m = min(batch, n_mc - start)
        rng = SeededRng(seed, "theory", "mc", k)
        X = tm.sample(m, rng)
        Y = X[:, 0] @ v + 0.1 * rng.normal(m)
        sp, tp = _per_sample_losses(A_plus, X, Y, u)
        sm, tmn = _per_sample_losses(A_minus, X, Y, u)
        d_sup.append((sp - sm) / (2 * h))
        d_spt.append((tp - tmn) / (2 * h))
    d_sup = np.concatenate(d_sup)
    d_spt = np.concatenate(d_spt)
    fd_sup, fd_spt = float(d_sup.mean()), float(d_spt.mean())
    se_sup = float(d_sup.std(ddof=1) / np.sqrt(n_mc))
    se_spt = float(d_spt.std(ddof=1) / np.sqrt(n_mc))

    # slope of the attention weights themselves at alpha = 0
    L = p.L
    a_fd = (A_plus - A_minus) / (2 * h)
    if p.variant == "plain":
        a_expected = row_center(p.delta) / L
    else:
        a_expected = _offdiag(p.delta) / (L - 1)

    gap = abs(closed - fd_spt)
    pass_sup = abs(fd_sup) < max(1e-3, 3 * se_sup)
    pass_spt = gap <= 3 * se_spt + 1e-4
    return {
        "pattern": p.label,
        "variant": p.variant,
        "L": L,
        "token_model": tm.describe(),
        "supervised_loss": "0.5*(u.h - Y)^2, Y = v.X_0 + 0.1*xi",
        "n_mc": n_mc,
        "h": h,
        "seed": seed,
        "closed_form": closed,
        "fd_sup": fd_sup,
        "fd_spt": fd_spt,
        "mc_stderr": se_spt,
        "mc_stderr_sup": se_sup,
        "gap_spt": gap,
        "attn_slope_err": float(np.abs(a_fd - a_expected).max()),
        "pass_sup": bool(pass_sup),
        "pass_spt": bool(pass_spt),
        "pass": bool(pass_sup and pass_spt),
    }


def preset_cases(name: str = "prop1-defaults"):
    """(pattern, token model) pairs for a named preset."""
    if name != "prop1-defaults":
        raise ValueError(f"unknown theory preset {name!r}")
    L = 16
    cases = []
    for variant in VARIANTS:
        for pat in (make_pattern("locality", L, variant, w=2, amp=1.0), make_pattern("random", L, variant, seed=0)):
            for tm in (TokenModel("iid", 4, L), TokenModel("ar1", 4, L, rho=0.8)):
                cases.append((pat, tm))
    return cases
