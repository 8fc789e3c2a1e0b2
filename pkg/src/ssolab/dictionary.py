"""Observable dictionaries: monomials of measured states plus sin/cos atoms of delta.

Terms are products of integer powers of the measured raw states and of the
two trig atoms sin(delta), cos(delta), each trig atom counting as order 1.
The lifted vector always starts with the constant (when enabled), then the
raw states themselves, so recovering the state from a lifted vector is a
fixed row selection.
"""

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .plant import IDX, STATE_NAMES

SIN_ATOM = "sin(delta)"
COS_ATOM = "cos(delta)"


@dataclass(frozen=True)
class ObservableDictionary:
    state_subset: tuple      # raw state names, Eq-27 order
    max_order: int
    include_constant: bool
    mode: str                # "curated" | "full"
    exponents: np.ndarray    # (m, n_atoms) int, atoms = subset + [sin, cos]
    has_trig: bool

    @property
    def n_states(self):
        return len(self.state_subset)

    @property
    def n_atoms(self):
        return self.n_states + (2 if self.has_trig else 0)

    @property
    def m(self):
        return self.exponents.shape[0]

    @property
    def raw_rows(self):
        """Row index of each raw state's order-1 term, in subset order."""
        start = 1 if self.include_constant else 0
        return list(range(start, start + self.n_states))

    @property
    def delta_pos(self):
        return self.state_subset.index("delta") if "delta" in self.state_subset else None

    def atom_names(self):
        names = list(self.state_subset)
        if self.has_trig:
            names += [SIN_ATOM, COS_ATOM]
        return names

    def term_label(self, i):
        e = self.exponents[i]
        if not e.any():
            return "1"
        parts = []
        for a, name in enumerate(self.atom_names()):
            if e[a] == 1:
                parts.append(name)
            elif e[a] > 1:
                parts.append(f"{name}^{e[a]}")
        return "*".join(parts)

    def term_labels(self):
        return [self.term_label(i) for i in range(self.m)]

    def spec(self):
        return {"states": list(self.state_subset), "max_order": self.max_order,
                "include_constant": self.include_constant, "mode": self.mode}


def build_dictionary(state_subset, max_order, include_constant=True, mode="curated"):
    """Construct the dictionary over the given raw-state subset.

    Ordering is deterministic: constant, raw states in state-vector order,
    sin/cos atoms, then products of order 2..max_order in graded
    lexicographic order.

    "curated" keeps the term count desk-scale and the basis linearly
    independent: products of order >= 3 must involve a trig atom, and
    cos(delta) powers are capped at 1 -- cos^2 = 1 - sin^2 makes higher cos
    powers exact linear combinations of other terms, which poisons the
    least-squares fit with spurious modes.  "full" keeps every monomial.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    if len(state_subset) == 0:
        raise ValueError("state subset is empty")
    unknown = [s for s in state_subset if s not in IDX]
    if unknown:
        raise ValueError(f"unknown state names: {unknown}")
    if len(set(state_subset)) != len(state_subset):
        raise ValueError("duplicate states in subset")
    if mode not in ("curated", "full"):
        raise ValueError(f"mode must be 'curated' or 'full', got {mode!r}")
    subset = tuple(sorted(state_subset, key=lambda s: IDX[s]))
    has_trig = "delta" in subset
    n_atoms = len(subset) + (2 if has_trig else 0)
    trig_atoms = {len(subset), len(subset) + 1} if has_trig else set()
    cos_atom = n_atoms - 1 if has_trig else -1

    rows = []
    if include_constant:
        rows.append(np.zeros(n_atoms, dtype=int))
    for a in range(n_atoms):   # raw states then trig atoms, order matches atoms
        e = np.zeros(n_atoms, dtype=int)
        e[a] = 1
        rows.append(e)
    for order in range(2, max_order + 1):
        for combo in combinations_with_replacement(range(n_atoms), order):
            if mode == "curated":
                if order >= 3 and not any(a in trig_atoms for a in combo):
                    continue
                if sum(1 for a in combo if a == cos_atom) >= 2:
                    continue
            e = np.zeros(n_atoms, dtype=int)
            for a in combo:
                e[a] += 1
            rows.append(e)
    E = np.array(rows, dtype=int)
    return ObservableDictionary(subset, max_order, include_constant, mode, E, has_trig)


def _atom_values(dic, x):
    """Atom value array (n_atoms, ...) from subset-state values (n_states, ...)."""
    x = np.asarray(x, dtype=float)
    if x.shape[0] != dic.n_states:
        raise ValueError(f"expected {dic.n_states} states, got {x.shape[0]}")
    if not dic.has_trig:
        return x
    d = x[dic.delta_pos]
    return np.concatenate([x, np.sin(d)[None], np.cos(d)[None]]) if x.ndim > 1 \
        else np.append(x, [np.sin(d), np.cos(d)])


def _power_matrix(dic, atoms):
    """T[a, e] = atoms[a]**e for e = 0..max_order+1 (single evaluation point)."""
    T = np.empty((dic.n_atoms, dic.max_order + 2))
    T[:, 0] = 1.0
    for e in range(1, dic.max_order + 2):
        T[:, e] = T[:, e - 1] * atoms
    return T


def lift_point(dic, x):
    """Lift a single state vector; vectorized over terms."""
    atoms = _atom_values(dic, x)
    T = _power_matrix(dic, atoms)
    F = T[np.arange(dic.n_atoms)[None, :], dic.exponents]   # (m, n_atoms)
    return F.prod(axis=1)


def grad_point(dic, x):
    """Analytic Jacobian (m, n) at a single state vector; vectorized over terms."""
    atoms = _atom_values(dic, x)
    T = _power_matrix(dic, atoms)
    E = dic.exponents
    n = dic.n_states
    na = dic.n_atoms
    F = T[np.arange(na)[None, :], E]                        # (m, n_atoms)

    # exclusive products over the raw-atom factors
    Fr = F[:, :n]
    L = np.ones_like(Fr)
    R = np.ones_like(Fr)
    np.cumprod(Fr[:, :-1], axis=1, out=L[:, 1:])
    np.cumprod(Fr[:, :0:-1], axis=1, out=R[:, -2::-1])
    prodex = L * R                                          # (m, n): prod of raw factors except j

    trig_prod = F[:, n:].prod(axis=1) if dic.has_trig else 1.0
    Epow = np.maximum(E[:, :n] - 1, 0)
    Tm1 = T[np.arange(n)[None, :], Epow]
    J = E[:, :n] * Tm1 * prodex
    if dic.has_trig:
        J = J * trig_prod[:, None]
        es = E[:, n]
        ec = E[:, n + 1]
        raw_all = Fr.prod(axis=1)
        sin_t = T[n]
        cos_t = T[n + 1]
        extra = (es * sin_t[np.maximum(es - 1, 0)] * cos_t[ec + 1]
                 - ec * cos_t[np.maximum(ec - 1, 0)] * sin_t[es + 1])
        J[:, dic.delta_pos] += raw_all * extra
    return J


def lift(dic, x):
    """Evaluate every dictionary term at x; x is (n,) or (n, N)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return lift_point(dic, x)
    atoms = _atom_values(dic, x)
    # per-atom power tables, memory-light for large batches
    tab = []
    for a in range(dic.n_atoms):
        col = [np.ones(atoms.shape[1:]), atoms[a]]
        for _ in range(2, dic.max_order + 1):
            col.append(col[-1] * atoms[a])
        tab.append(col)
    z = np.empty((dic.m,) + atoms.shape[1:])
    E = dic.exponents
    for i in range(dic.m):
        acc = None
        for a in np.nonzero(E[i])[0]:
            f = tab[a][E[i, a]]
            acc = f.copy() if acc is None else acc * f
        z[i] = 1.0 if acc is None else acc
    return z


def lift_gradient(dic, x):
    """Analytic Jacobian of the lift: (m, n) for one point, (m, n, N) batched."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return grad_point(dic, x)
    out = np.empty((dic.m, dic.n_states, x.shape[1]))
    for k in range(x.shape[1]):
        out[:, :, k] = grad_point(dic, x[:, k])
    return out


def default_dictionary():
    """The shipped third-order dictionary over the full state vector."""
    return build_dictionary(STATE_NAMES, 3, include_constant=True, mode="curated")


def reduced_dictionary():
    """Partial-measurement dictionary: PLL angle/frequency proxy and grid currents."""
    return build_dictionary(("x_w", "delta", "i_gd", "i_gq"), 3,
                            include_constant=True, mode="curated")
