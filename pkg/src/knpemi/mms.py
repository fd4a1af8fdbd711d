"""Analytic verification problem and the convergence-study driver.

A closed-form solution of the coupled electrodiffusion system on the unit
square with one interior cell, all physical parameters set to one, drives
the numerical verification: the exact fields below are substituted into
the governing equations and interface conditions, and whatever they do
not satisfy becomes a volume source (f_*), an interface flux correction
(g_*), or a membrane-row correction (g_phi_m). A solver that converges to
these fields at the expected rates exercises every coupling term.

Conventions fixed here and relied on by the solver and its tests:

  * the exact transmembrane current is the physical one, I_M = F sum_k
    z^k J_i^k . n_i evaluated from the intracellular exact fluxes; the
    intracellular per-species corrections then sum to zero by
    construction (charge-consistent on the inner side), while the
    extracellular side carries the nonzero total correction;
  * the passive channel current I_ch = phi_M is assigned entirely to
    sodium (the flux-split conditions need a per-species decomposition
    and the coupled system is insensitive to the choice at the time
    steps used here);
  * the exterior boundary conditions are the physical ones, which the
    exact fields satisfy identically: the concentration data is constant
    (sin(2 pi x) sin(2 pi y) vanishes on the boundary of the unit square)
    and the exact charge flux through the boundary is zero (cos cos has
    zero normal derivative there), so only Dirichlet concentration values
    are imposed; the potential is grounded by constraining the mean of
    phi_e to its exact (nonzero) value.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import build_box_mesh, tag_subdomains
from .membrane import Constants, Species

TWO_PI = 2.0 * np.pi

# (a_i, b_i, a_e, b_e) in c_r^k = a_r^k + b_r^k sin(2 pi x) sin(2 pi y) e^-t
COEFFS = {
    "Na": (0.7, 0.3, 1.0, 0.6),
    "K": (0.3, 0.3, 1.0, 0.2),
    "Cl": (1.0, 0.6, 2.0, 0.8),
}

SPECIES = (
    Species("Na", 1, 1.0, 0.7, 1.0),
    Species("K", 1, 1.0, 0.3, 1.0),
    Species("Cl", -1, 1.0, 1.0, 2.0),
)

# unit parameters; psi = R T / F = 1 with the temperature also one
CONSTANTS = Constants(R=1.0, T=1.0, F=1.0, C_M=1.0)

# sum_k (z^k)^2 a_r^k and sum_k (z^k)^2 b_r^k: the exact conductivities
# are sigma_r = A_r + B_r sin sin e^-t (all valences are +-1 here)
A_I = sum(c[0] for c in COEFFS.values())
B_I = sum(c[1] for c in COEFFS.values())
A_E = sum(c[2] for c in COEFFS.values())
B_E = sum(c[3] for c in COEFFS.values())

# the passive channel current I_ch = phi_M, carried by sodium
CHANNEL_WEIGHTS = {"Na": 1.0, "K": 0.0, "Cl": 0.0}

# integral of the exact extracellular potential over its region; the
# grounding constraint must pin the discrete mean to this value, not to
# zero, for the errors to be free of a constant offset
PHI_E_INTEGRAL = -1.0 / np.pi ** 2

DOMAIN = [(0.0, 1.0), (0.0, 1.0)]
CELL_BOX = [(0.25, 0.75), (0.25, 0.75)]

DT0 = (1.0 / 64.0) * 1e-5  # level-0 time step; quartered per level
NUM_STEPS0 = 2             # level-0 step count; x4 per level
BASE_N = 8                 # level-0 mesh resolution


def _trig(x):
    sx = np.sin(TWO_PI * x[:, 0])
    cx = np.cos(TWO_PI * x[:, 0])
    sy = np.sin(TWO_PI * x[:, 1])
    cy = np.cos(TWO_PI * x[:, 1])
    return sx * sy, cx * cy, sx * cy, cx * sy  # s, c, p, q


def _ab(name, side):
    a_i, b_i, a_e, b_e = COEFFS[name]
    return (a_i, b_i) if side == "i" else (a_e, b_e)


def _sigma_ab(side):
    return (A_I, B_I) if side == "i" else (A_E, B_E)


def _phi_factor(side, T):
    # phi_i carries the extra (1 + e^-t) factor, phi_e none
    return (1.0 + T) if side == "i" else 1.0


class ManufacturedSolution:
    """Exact fields, volume sources and interface corrections.

    Every accessor takes a time and returns a callable of physical points
    (and, for interface quantities, facet normals) so the results plug
    directly into the assembly routines.
    """

    species = SPECIES
    constants = CONSTANTS
    channel_weights = CHANNEL_WEIGHTS

    # -- exact fields ------------------------------------------------

    def conc(self, name, side, t):
        a, b = _ab(name, side)
        T = np.exp(-t)

        def fn(x):
            s, _, _, _ = _trig(x)
            return a + b * s * T
        return fn

    def conc_grad(self, name, side, t):
        _, b = _ab(name, side)
        T = np.exp(-t)

        def fn(x):
            _, _, p, q = _trig(x)
            return b * T * TWO_PI * np.stack([q, p], axis=1)
        return fn

    def phi(self, side, t):
        T = np.exp(-t)
        fac = _phi_factor(side, T)

        def fn(x):
            _, c, _, _ = _trig(x)
            return fac * c
        return fn

    def phi_grad(self, side, t):
        T = np.exp(-t)
        fac = _phi_factor(side, T)

        def fn(x):
            _, _, p, q = _trig(x)
            return -fac * TWO_PI * np.stack([p, q], axis=1)
        return fn

    def phi_m(self, t):
        T = np.exp(-t)

        def fn(x):
            _, c, _, _ = _trig(x)
            return c * T
        return fn

    # -- volume sources ----------------------------------------------

    def f_conc(self, name, side, t):
        """Residual of d/dt c + div J in the bulk for the exact fields."""
        a, b = _ab(name, side)
        z = next(s.z for s in SPECIES if s.name == name)
        T = np.exp(-t)
        fac = _phi_factor(side, T)
        pi8 = 8.0 * np.pi ** 2

        def fn(x):
            s, c, p, q = _trig(x)
            diffusive = b * s * T * (pi8 - 1.0)
            drift = pi8 * z * fac * (b * T * p * q + (a + b * s * T) * c)
            return diffusive + drift
        return fn

    def f_phi(self, side, t):
        """Residual of div(F sum_k z^k J^k) in the bulk."""
        A, B = _sigma_ab(side)
        T = np.exp(-t)
        fac = _phi_factor(side, T)
        pi8 = 8.0 * np.pi ** 2

        def fn(x):
            s, c, p, q = _trig(x)
            return pi8 * fac * (B * T * p * q + (A + B * s * T) * c)
        return fn

    # -- interface data ----------------------------------------------

    def i_m(self, t):
        """Exact transmembrane current F sum_k z^k J_i^k . n_i.

        The diffusive flux parts cancel under the valence-weighted sum
        (the exact fields are electroneutral), leaving the ohmic term
        -sigma_i grad(phi_i) . n_i.
        """
        T = np.exp(-t)
        fac = 1.0 + T

        def fn(x, n):
            s, _, p, q = _trig(x)
            flux = TWO_PI * np.stack([p, q], axis=1)
            return (A_I + B_I * s * T) * fac * np.sum(flux * n, axis=1)
        return fn

    def i_ch(self, t):
        """Total exact channel current: the passive model I_ch = phi_M."""
        pm = self.phi_m(t)
        return lambda x, n: pm(x)

    def g_phi_m(self, t):
        """Correction to the membrane-potential row.

        The exact fields satisfy C_M d/dt phi_M = -I_ch exactly (phi_M
        and I_ch are both cos cos e^-t with C_M = 1), so the residual of
        C_M d/dt phi_M - I_M + I_ch is just -I_M.
        """
        im = self.i_m(t)
        return lambda x, n: -im(x, n)

    def _flux_normal(self, name, side, t):
        # J^k_r . n_r for the exact fields; n passed in is always n_i,
        # the extracellular side flips the sign
        a, b = _ab(name, side)
        z = next(s.z for s in SPECIES if s.name == name)
        T = np.exp(-t)
        fac = _phi_factor(side, T)
        sign = 1.0 if side == "i" else -1.0

        def fn(x, n):
            s, _, p, q = _trig(x)
            diff = -b * T * TWO_PI * (q * n[:, 0] + p * n[:, 1])
            drift = z * (a + b * s * T) * fac * TWO_PI * (
                p * n[:, 0] + q * n[:, 1])
            return sign * (diff + drift)
        return fn

    def _alpha(self, name, t):
        # shared capacitive transference: mean of the two face mixes,
        # matching the conservative split the solver imposes
        a_i, b_i = _ab(name, "i")
        a_e, b_e = _ab(name, "e")
        A_i, B_i = _sigma_ab("i")
        A_e, B_e = _sigma_ab("e")
        T = np.exp(-t)

        def fn(x):
            s, _, _, _ = _trig(x)
            frac_i = (a_i + b_i * s * T) / (A_i + B_i * s * T)
            frac_e = (a_e + b_e * s * T) / (A_e + B_e * s * T)
            return 0.5 * (frac_i + frac_e)
        return fn

    def g_conc(self, name, side, t):
        """Per-species interface flux correction.

        The imposed condition is J^k_r . n_r = +-split/(F z^k) + g^k_r
        with the capacitive split of (I_M - I_ch); g makes the exact
        fields satisfy it. On the intracellular side the corrections are
        charge-free: F sum_k z^k g_i^k = 0 by the choice of exact I_M.
        """
        z = next(s.z for s in SPECIES if s.name == name)
        w = CHANNEL_WEIGHTS[name]
        flux = self._flux_normal(name, side, t)
        alpha = self._alpha(name, t)
        im = self.i_m(t)
        ich = self.i_ch(t)
        sign = 1.0 if side == "i" else -1.0

        def fn(x, n):
            split = w * ich(x, n) + alpha(x) * (im(x, n) - ich(x, n))
            return flux(x, n) - sign * split / z
        return fn

    def g_charge(self, side, t):
        """Valence-weighted sum of the per-species corrections.

        Zero on the intracellular side; on the extracellular side it is
        the mismatch between the exact current and the imposed one.
        Computed by summation so the solver's discrete identity holds
        exactly.
        """
        parts = [(s.z, self.g_conc(s.name, side, t)) for s in SPECIES]

        def fn(x, n):
            return sum(z * g(x, n) for z, g in parts)
        return fn

    # -- initial data -------------------------------------------------

    def initial_concentrations(self):
        return {s.name: (self.conc(s.name, "i", 0.0),
                         self.conc(s.name, "e", 0.0)) for s in SPECIES}

    def initial_phi_m(self):
        return self.phi_m(0.0)


def verification_mesh(n):
    """Unit square with the interior cell, n x n squares split in two."""
    mesh = build_box_mesh(DOMAIN, [n, n])
    return tag_subdomains(mesh, {1: CELL_BOX})


@dataclass(frozen=True)
class ConvergenceLevel:
    n: int
    h: float
    dt: float
    num_steps: int
    errors: dict  # label -> error value


@dataclass(frozen=True)
class ConvergenceReport:
    levels: tuple

    ERROR_LABELS = tuple(
        [f"{k}_{r}_{norm}" for k in ("Na", "K", "Cl") for r in ("i", "e")
         for norm in ("L2", "H1")]
        + ["phi_i_L2", "phi_i_H1", "phi_e_L2", "phi_e_H1", "I_M_L2"])

    def rates(self):
        """log2(e_coarse / e_fine) between consecutive levels per label."""
        out = []
        for prev, cur in zip(self.levels, self.levels[1:]):
            out.append({lbl: float(np.log2(prev.errors[lbl] / cur.errors[lbl]))
                        for lbl in prev.errors})
        return out

    def rows(self):
        """(level, label, error, rate-or-None) tuples in table order."""
        rates = [None] + self.rates()
        out = []
        for lev, rate in zip(self.levels, rates):
            for lbl in self.ERROR_LABELS:
                out.append((lev.n, lbl, lev.errors[lbl],
                            None if rate is None else rate[lbl]))
        return out


def convergence_study(levels=4, progress=None):
    """Run the verification problem over a refinement series.

    Level l uses an (8 * 2^l)-square mesh, time step DT0 / 4^l and
    2 * 4^l steps, so all levels end at the same final time and the
    first-order time error refines in lockstep with the second-order
    space error.
    """
    from .solver import solve_manufactured

    out = []
    for level in range(levels):
        n = BASE_N * 2 ** level
        dt = DT0 / 4.0 ** level
        steps = NUM_STEPS0 * 4 ** level
        errors = solve_manufactured(n, dt, steps)
        out.append(ConvergenceLevel(n=n, h=1.0 / n, dt=dt,
                                    num_steps=steps, errors=errors))
        if progress is not None:
            progress(out[-1])
    return ConvergenceReport(levels=tuple(out))
