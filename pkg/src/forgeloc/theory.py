"""Exact information-theory checks on small discrete distributions.

Everything here works on dense probability tables small enough to enumerate
completely (alphabet sizes <= 4, at most 3 feature variables), so every
expectation is an exact sum and assertions can use tight tolerances. Natural
logarithms throughout; 0*log(0) is treated as 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

SUM_TOL = 1e-12
GAP_TOL = 1e-9


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * np.log(p[mask])
    return out


def _xlogy(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x*log(y) with the 0*log(anything) := 0 convention."""
    out = np.zeros_like(x)
    mask = x > 0
    out[mask] = x[mask] * np.log(y[mask])
    return out


def _entropy(p: np.ndarray) -> float:
    return float(-_xlogx(p).sum())


class DiscreteJoint:
    """Dense joint pmf over a label M and n feature variables.

    Axis 0 indexes M, axes 1..n index the features f_1..f_n. Entries must
    be non-negative and sum to 1 within SUM_TOL.
    """

    def __init__(self, pmf):
        pmf = np.asarray(pmf, dtype=np.float64)
        if pmf.ndim < 2:
            raise ValueError("joint needs a label axis and at least one feature axis")
        if np.any(pmf < 0):
            raise ValueError("joint pmf has negative entries")
        if abs(pmf.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"joint pmf sums to {pmf.sum()!r}, expected 1")
        self.pmf = pmf

    @property
    def n_features(self) -> int:
        return self.pmf.ndim - 1

    @classmethod
    def random(cls, rng: np.random.Generator, m_size: int = 2,
               feature_sizes: tuple[int, ...] = (2, 2),
               concentration: float = 1.0) -> "DiscreteJoint":
        """Symmetric-Dirichlet draw over the full table."""
        shape = (m_size, *feature_sizes)
        flat = rng.dirichlet(np.full(int(np.prod(shape)), concentration))
        return cls(flat.reshape(shape))

    def marginal(self, axes: tuple[int, ...]) -> np.ndarray:
        """Marginal over the given axes, returned in the given axis order."""
        keep = tuple(axes)
        drop = tuple(ax for ax in range(self.pmf.ndim) if ax not in keep)
        m = self.pmf.sum(axis=drop) if drop else self.pmf
        ordered = sorted(keep)
        perm = [ordered.index(k) for k in keep]
        return m.transpose(perm)


def _check_disjoint(*groups: tuple[int, ...]) -> None:
    seen: set[int] = set()
    for g in groups:
        for ax in g:
            if ax in seen:
                raise ValueError(f"variable sets overlap on axis {ax}")
            seen.add(ax)


def mutual_information(joint: DiscreteJoint, vars_a: tuple[int, ...],
                       vars_b: tuple[int, ...]) -> float:
    """I(A;B) = sum p(a,b) log[p(a,b) / (p(a)p(b))], exact."""
    vars_a, vars_b = tuple(vars_a), tuple(vars_b)
    _check_disjoint(vars_a, vars_b)
    pab = joint.marginal(vars_a + vars_b)
    na = len(vars_a)
    pa = pab.sum(axis=tuple(range(na, pab.ndim)))
    pb = pab.sum(axis=tuple(range(na)))
    outer = pa.reshape(pa.shape + (1,) * pb.ndim) * pb
    val = float((_xlogy(pab, pab) - _xlogy(pab, outer)).sum())
    return val


def conditional_mutual_information(joint: DiscreteJoint, vars_a: tuple[int, ...],
                                   vars_b: tuple[int, ...],
                                   vars_c: tuple[int, ...]) -> float:
    """I(A;B|C) = sum p(a,b,c) log[p(c)p(a,b,c) / (p(a,c)p(b,c))], exact.

    With an empty conditioning set this reduces to plain I(A;B).
    """
    vars_a, vars_b, vars_c = tuple(vars_a), tuple(vars_b), tuple(vars_c)
    _check_disjoint(vars_a, vars_b, vars_c)
    if not vars_c:
        return mutual_information(joint, vars_a, vars_b)
    pabc = joint.marginal(vars_a + vars_b + vars_c)
    na, nb, nc = len(vars_a), len(vars_b), len(vars_c)
    a_axes = tuple(range(na))
    b_axes = tuple(range(na, na + nb))
    pc = pabc.sum(axis=a_axes + b_axes)
    pac = pabc.sum(axis=b_axes)
    pbc = pabc.sum(axis=a_axes)
    # broadcast p(c), p(a,c), p(b,c) back to (a, b, c) shape
    pc_b = pc.reshape((1,) * (na + nb) + pc.shape)
    pac_b = pac.reshape(pac.shape[:na] + (1,) * nb + pac.shape[na:])
    pbc_b = pbc.reshape((1,) * na + pbc.shape)
    num = pc_b * pabc
    den = pac_b * pbc_b
    mask = pabc > 0
    val = float((pabc[mask] * (np.log(num[mask]) - np.log(den[mask]))).sum())
    return val


def check_chain_rule(joint: DiscreteJoint) -> dict:
    """Verify I(M; f_1..f_n) == sum_i I(f_i; M | f_1..f_{i-1}) exactly.

    Also evaluates, without asserting, whether the chain sum is bounded by
    the leave-one-out sum sum_i I(f_i; M | rest); conditioning can shrink
    mutual information, so this direction is an empirical probe only.
    """
    n = joint.n_features
    if n < 2:
        raise ValueError("chain rule check needs at least two features")
    feats = tuple(range(1, n + 1))
    lhs = mutual_information(joint, (0,), feats)
    chain_terms = []
    for i, f in enumerate(feats):
        prefix = feats[:i]
        chain_terms.append(conditional_mutual_information(joint, (f,), (0,), prefix))
    chain_sum = float(sum(chain_terms))
    loo_terms = []
    for f in feats:
        rest = tuple(g for g in feats if g != f)
        loo_terms.append(conditional_mutual_information(joint, (f,), (0,), rest))
    loo_sum = float(sum(loo_terms))
    gap = abs(lhs - chain_sum)
    return {
        "joint_mi": lhs,
        "chain_sum": chain_sum,
        "chain_terms": chain_terms,
        "identity_gap": gap,
        "identity_holds": bool(gap <= GAP_TOL),
        "loo_sum": loo_sum,
        "loo_terms": loo_terms,
        "inequality_satisfied": bool(chain_sum <= loo_sum + GAP_TOL),
    }


def check_loo_identity(joint: DiscreteJoint) -> dict:
    """Verify I(f_i; M | rest) == E_F[ KL(p(M|F) || p(M|F without f_i)) ].

    Both sides use the exact posteriors of the joint; the identity is what
    turns the KL between predicted distributions into a lower bound once
    learned predictors replace the exact posteriors.
    """
    n = joint.n_features
    if n < 2:
        raise ValueError("leave-one-out check needs at least two features")
    pmf = joint.pmf
    feats = tuple(range(1, n + 1))
    per_i = []
    for f in feats:
        rest = tuple(g for g in feats if g != f)
        cmi = conditional_mutual_information(joint, (f,), (0,), rest)
        # E over full F of KL(p(M|F) || p(M|F\f_i)), from exact posteriors
        p_f = pmf.sum(axis=0, keepdims=True)
        p_m_given_f = np.divide(pmf, p_f, out=np.zeros_like(pmf), where=p_f > 0)
        p_m_rest = pmf.sum(axis=f, keepdims=True)
        p_rest = p_m_rest.sum(axis=0, keepdims=True)
        q = np.divide(p_m_rest, p_rest, out=np.zeros_like(p_m_rest), where=p_rest > 0)
        q = np.broadcast_to(q, pmf.shape)
        mask = pmf > 0
        kl = float((pmf[mask] * (np.log(p_m_given_f[mask]) - np.log(q[mask]))).sum())
        per_i.append({"feature": f, "cmi": cmi, "expected_kl": kl,
                      "gap": abs(cmi - kl)})
    max_gap = max(e["gap"] for e in per_i)
    return {"per_feature": per_i, "max_gap": max_gap,
            "holds": bool(max_gap <= GAP_TOL)}


def _rows_stochastic(t: np.ndarray, name: str) -> None:
    if np.any(t < 0):
        raise ValueError(f"{name} has negative entries")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > SUM_TOL):
        raise ValueError(f"{name} rows do not sum to 1")


@dataclass
class CEBInstance:
    """A fully enumerable conditional-bottleneck instance.

    joint_fm:   p(f, m), shape (nF, nM)
    encoder:    p(z|f),  shape (nF, nZ), rows sum to 1
    q_m_given_z: variational q(m|z), shape (nZ, nM)
    q_z_given_m: variational q(z|m), shape (nM, nZ)
    beta: trade-off weight, >= 0
    """

    joint_fm: np.ndarray
    encoder: np.ndarray
    q_m_given_z: np.ndarray
    q_z_given_m: np.ndarray
    beta: float

    def __post_init__(self):
        self.joint_fm = np.asarray(self.joint_fm, dtype=np.float64)
        self.encoder = np.asarray(self.encoder, dtype=np.float64)
        self.q_m_given_z = np.asarray(self.q_m_given_z, dtype=np.float64)
        self.q_z_given_m = np.asarray(self.q_z_given_m, dtype=np.float64)
        if np.any(self.joint_fm < 0) or abs(self.joint_fm.sum() - 1.0) > SUM_TOL:
            raise ValueError("joint_fm is not a probability table")
        _rows_stochastic(self.encoder, "encoder p(z|f)")
        _rows_stochastic(self.q_m_given_z, "q(m|z)")
        _rows_stochastic(self.q_z_given_m, "q(z|m)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")

    @classmethod
    def random(cls, rng: np.random.Generator, n_f: int = 3, n_m: int = 2,
               n_z: int = 3, beta: float | None = None) -> "CEBInstance":
        joint = rng.dirichlet(np.ones(n_f * n_m)).reshape(n_f, n_m)
        enc = rng.dirichlet(np.ones(n_z), size=n_f)
        qmz = rng.dirichlet(np.ones(n_m), size=n_z)
        qzm = rng.dirichlet(np.ones(n_z), size=n_m)
        if beta is None:
            beta = float(rng.uniform(0.0, 2.0))
        return cls(joint, enc, qmz, qzm, beta)

    def full_joint(self) -> np.ndarray:
        """p(f, m, z) = p(f, m) p(z|f); Z depends on F only."""
        return self.joint_fm[:, :, None] * self.encoder[:, None, :]

    def true_posteriors(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact p(m|z) and p(z|m) of the enumerated joint."""
        pfmz = self.full_joint()
        pmz = pfmz.sum(axis=0)                      # (nM, nZ)
        pz = pmz.sum(axis=0)
        pm = pmz.sum(axis=1)
        n_m, n_z = pmz.shape
        p_m_given_z = np.full((n_z, n_m), 1.0 / n_m)
        nz_mask = pz > 0
        p_m_given_z[nz_mask] = (pmz[:, nz_mask] / pz[nz_mask]).T
        p_z_given_m = np.full((n_m, n_z), 1.0 / n_z)
        nm_mask = pm > 0
        p_z_given_m[nm_mask] = pmz[nm_mask] / pm[nm_mask, None]
        return p_m_given_z, p_z_given_m

    def with_true_conditionals(self) -> "CEBInstance":
        qmz, qzm = self.true_posteriors()
        return CEBInstance(self.joint_fm, self.encoder, qmz, qzm, self.beta)


def check_ceb_bound(inst: CEBInstance, samples: int = 0,
                    rng: np.random.Generator | None = None) -> dict:
    """Enumerate both sides of the variational conditional-bottleneck bound.

    left        = I(Z;M) - beta * I(F;Z|M)
    right_tight = E[log q(m|z)] + H(M) - beta * E[log p(z|f) - log q(z|m)]
    right_loose = right_tight - H(M)

    left - right_tight equals E_z KL(p(m|z)||q(m|z)) + beta * E_m
    KL(p(z|m)||q(z|m)), so left >= right_tight with equality exactly when
    the variational tables are the true posteriors; dropping the H(M) >= 0
    term gives the looser right_loose. With `samples` > 0 the bound is
    re-checked against that many random variational tables on the same
    joint and encoder.
    """
    pfmz = inst.full_joint()
    pmz = pfmz.sum(axis=0)          # (nM, nZ)
    pfm = inst.joint_fm             # (nF, nM)
    pm = pmz.sum(axis=1)
    h_m = _entropy(pm)

    # I(Z;M) from p(m,z)
    pz = pmz.sum(axis=0)
    outer = pm[:, None] * pz[None, :]
    i_zm = float((_xlogy(pmz, pmz) - _xlogy(pmz, outer)).sum())

    # I(F;Z|M) = sum p(f,m,z) log[ p(m) p(f,m,z) / (p(f,m) p(m,z)) ]
    mask = pfmz > 0
    num = pm[None, :, None] * pfmz
    den = pfm[:, :, None] * pmz[None, :, :]
    i_fz_given_m = float((pfmz[mask] * (np.log(num[mask]) - np.log(den[mask]))).sum())

    left = i_zm - inst.beta * i_fz_given_m

    def right_sides(qmz: np.ndarray, qzm: np.ndarray) -> tuple[float, float]:
        term_q = float(_xlogy(pfmz, np.broadcast_to(qmz.T[None], pfmz.shape)).sum())
        term_enc = float(_xlogy(pfmz, np.broadcast_to(
            inst.encoder[:, None, :], pfmz.shape)).sum())
        term_qzm = float(_xlogy(pfmz, np.broadcast_to(qzm[None], pfmz.shape)).sum())
        loose = term_q - inst.beta * (term_enc - term_qzm)
        return loose + h_m, loose

    right_tight, right_loose = right_sides(inst.q_m_given_z, inst.q_z_given_m)

    min_sampled_gap = None
    if samples > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        n_m, n_z = pmz.shape
        gaps = []
        for _ in range(samples):
            qmz = rng.dirichlet(np.ones(n_m), size=n_z)
            qzm = rng.dirichlet(np.ones(n_z), size=n_m)
            tight, _ = right_sides(qmz, qzm)
            gaps.append(left - tight)
        min_sampled_gap = float(min(gaps))

    return {
        "left": left,
        "right_tight": right_tight,
        "right_loose": right_loose,
        "h_m": h_m,
        "i_zm": i_zm,
        "i_fz_given_m": i_fz_given_m,
        "gap_tight": left - right_tight,
        "gap_loose": left - right_loose,
        "holds": bool(left >= right_tight - GAP_TOL),
        "min_sampled_gap": min_sampled_gap,
    }


def _random_joint(rng: np.random.Generator) -> DiscreteJoint:
    n = int(rng.integers(2, 4))                     # 2 or 3 features
    m_size = int(rng.integers(2, 5))
    sizes = tuple(int(rng.integers(2, 5)) for _ in range(n))
    return DiscreteJoint.random(rng, m_size, sizes)


def run_theory_checks(n_joints: int = 1000, n_ceb: int = 1000,
                      seed: int = 0) -> dict:
    """Sweep the three checkers over random instances; used by the CLI."""
    rng = np.random.default_rng(seed)
    t0 = time.time()

    max_chain_gap = 0.0
    max_loo_gap = 0.0
    ineq_hits = 0
    counterexample = None
    for _ in range(n_joints):
        j = _random_joint(rng)
        rep = check_chain_rule(j)
        max_chain_gap = max(max_chain_gap, rep["identity_gap"])
        if rep["inequality_satisfied"]:
            ineq_hits += 1
        elif counterexample is None:
            counterexample = {
                "pmf": j.pmf.tolist(),
                "chain_sum": rep["chain_sum"],
                "loo_sum": rep["loo_sum"],
            }
        loo = check_loo_identity(j)
        max_loo_gap = max(max_loo_gap, loo["max_gap"])

    min_gap_tight = np.inf
    min_gap_loose = np.inf
    max_equality_gap = 0.0
    for _ in range(n_ceb):
        inst = CEBInstance.random(rng)
        rep = check_ceb_bound(inst)
        min_gap_tight = min(min_gap_tight, rep["gap_tight"])
        min_gap_loose = min(min_gap_loose, rep["gap_loose"])
        eq = check_ceb_bound(inst.with_true_conditionals())
        max_equality_gap = max(max_equality_gap, abs(eq["gap_tight"]))

    return {
        "seed": seed,
        "chain_rule": {
            "joints": n_joints,
            "max_identity_gap": max_chain_gap,
            "pass": bool(max_chain_gap <= GAP_TOL),
            "inequality_satisfaction_rate": ineq_hits / n_joints,
            "inequality_counterexample": counterexample,
        },
        "loo_identity": {
            "joints": n_joints,
            "max_gap": max_loo_gap,
            "pass": bool(max_loo_gap <= GAP_TOL),
        },
        "ceb_bound": {
            "instances": n_ceb,
            "min_gap_tight": float(min_gap_tight),
            "min_gap_loose": float(min_gap_loose),
            "max_equality_gap": max_equality_gap,
            "pass": bool(min_gap_tight >= -GAP_TOL
                         and max_equality_gap <= GAP_TOL),
        },
        "elapsed_seconds": time.time() - t0,
    }
