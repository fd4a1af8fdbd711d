"""Membrane electrophysiology: reversal potentials, channel currents, gating.

Everything is SI: potentials in V, concentrations in mol/m^3, conductances
in S/m^2, current densities in A/m^2, rates in 1/s. Functions are
vectorized over membrane points.

The total membrane current density I_M = F sum_k z^k J^k . n splits into
channel and capacitive parts; the capacitive part is distributed over
species by the mobility-weighted fractions alpha computed here, and the
per-species normal flux is reconstructed by :func:`flux_split`.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Constants:
    """Physical constants; psi = RT/F is the thermal voltage."""

    R: float = 8.314  # J/(mol K)
    T: float = 300.0  # K
    F: float = 9.648e4  # C/mol
    C_M: float = 0.01  # F/m^2

    @property
    def psi(self):
        return self.R * self.T / self.F


@dataclass(frozen=True)
class Species:
    """Ion species with valence, diffusivity and initial concentrations."""

    name: str
    z: int
    D: float  # m^2/s, same value in both regions
    init_i: float  # mol/m^3
    init_e: float  # mol/m^3


@dataclass(frozen=True)
class PassiveMembrane:
    """Linear channel currents g_k (phi_M - E_k), inserted implicitly."""

    g: dict  # species name -> conductance S/m^2
    fixed_E: dict | None = None  # overrides Nernst (manufactured runs)


@dataclass(frozen=True)
class HodgkinHuxley:
    """Gated Na/K channels plus linear chloride leak, via operator splitting."""

    g_bar: dict  # species name -> max conductance S/m^2
    substeps: int = 25  # membrane ODE substeps per PDE step


@dataclass(frozen=True)
class Stimulus:
    """Synaptic conductance g_syn H(x) (1 - exp(-(t - t0)/alpha)) on Na.

    The conductance rises from zero at each onset and saturates at g_syn
    after a few time constants, so a driven membrane settles into a
    depolarized semi-steady state rather than relaxing back to rest.
    ``window`` restricts H(x) to an x-interval (None = whole membrane);
    ``labels`` restricts to given cell labels (None = all membranes). The
    most recent onset <= t is active; each onset restarts the rise from
    zero, which momentarily releases the membrane.
    """

    g_syn: float  # S/m^2
    alpha: float  # s
    onsets: tuple  # s
    window: tuple | None = None  # (lo, hi) on the x axis, metres
    labels: tuple | None = None


def nernst(z, c_e, c_i, psi):
    """Reversal potential (psi/z) ln(c_e / c_i); concentrations must be positive."""
    c_e = np.asarray(c_e, dtype=float)
    c_i = np.asarray(c_i, dtype=float)
    if np.any(c_e <= 0) or np.any(c_i <= 0):
        raise ValueError("Nernst potential needs positive concentrations")
    return (psi / z) * np.log(c_e / c_i)


def passive_current(phi_m, E, g):
    """Per-species ohmic current densities g_k (phi_M - E_k)."""
    phi_m = np.asarray(phi_m, dtype=float)
    return {k: g[k] * (phi_m - E[k]) for k in g}


def _vtrap(x):
    # x / (exp(x) - 1) with the removable singularity at 0 filled in
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-7
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 - x / 2.0, safe / np.expm1(safe))


def gating_rates(phi_m):
    """Hodgkin-Huxley alpha/beta rates in 1/s.

    The classical 1952 expressions shifted to absolute potential with rest
    near -65 mV; at phi_M = -67.74 mV the steady states reproduce the
    m, h, n initial values of the physiological parameter set within 1%.
    """
    u = np.asarray(phi_m, dtype=float) * 1e3 + 65.0  # depolarization in mV
    a_m = 1.0 * _vtrap((25.0 - u) / 10.0)
    b_m = 4.0 * np.exp(-u / 18.0)
    a_h = 0.07 * np.exp(-u / 20.0)
    b_h = 1.0 / (np.exp((30.0 - u) / 10.0) + 1.0)
    a_n = 0.1 * _vtrap((10.0 - u) / 10.0)
    b_n = 0.125 * np.exp(-u / 80.0)
    return tuple(1e3 * r for r in (a_m, b_m, a_h, b_h, a_n, b_n))


def gating_steady_state(phi_m):
    """Fixed point (m_inf, h_inf, n_inf) of the gating ODEs at phi_M."""
    a_m, b_m, a_h, b_h, a_n, b_n = gating_rates(phi_m)
    return a_m / (a_m + b_m), a_h / (a_h + b_h), a_n / (a_n + b_n)


def gating_step(m, h, n, phi_m, dt):
    """One forward-Euler step of dp/dt = alpha (1 - p) - beta p, clipped to [0, 1]."""
    a_m, b_m, a_h, b_h, a_n, b_n = gating_rates(phi_m)
    m = np.clip(m + dt * (a_m * (1.0 - m) - b_m * m), 0.0, 1.0)
    h = np.clip(h + dt * (a_h * (1.0 - h) - b_h * h), 0.0, 1.0)
    n = np.clip(n + dt * (a_n * (1.0 - n) - b_n * n), 0.0, 1.0)
    return m, h, n


def hh_conductances(m, h, n, g_bar):
    """Instantaneous conductances: gbar_Na m^3 h, gbar_K n^4, gbar_Cl."""
    return {
        "Na": g_bar.get("Na", 0.0) * m ** 3 * h,
        "K": g_bar.get("K", 0.0) * n ** 4,
        "Cl": g_bar.get("Cl", 0.0) * np.ones_like(np.asarray(m, dtype=float)),
    }


def hh_currents(phi_m, m, h, n, E, g_bar):
    """Per-species channel current densities of the gated membrane."""
    g = hh_conductances(m, h, n, g_bar)
    return {k: g[k] * (phi_m - E[k]) for k in g}


def capacitive_fractions(species, conc):
    """Mobility fractions alpha_k = D_k z_k^2 c_k / sum_l D_l z_l^2 c_l.

    ``conc`` maps species name to (clamped, non-negative) concentrations on
    the membrane; fractions sum to one wherever the denominator is
    positive.
    """
    weights = {s.name: s.D * s.z ** 2 * np.maximum(conc[s.name], 0.0)
               for s in species}
    den = sum(weights.values())
    den = np.where(den > 0, den, 1.0)
    return {name: w / den for name, w in weights.items()}


def bulk_conductivity(species, conc, constants):
    """Electrolyte conductivity sigma = (F/psi) sum_k D_k z_k^2 c_k (S/m)."""
    total = sum(s.D * s.z ** 2 * np.asarray(conc[s.name], dtype=float)
                for s in species)
    return constants.F / constants.psi * total


def flux_split(I_M, I_ch_total, I_ch_k, alpha_k, z, F):
    """Normal flux of one species from the membrane current decomposition.

    J^k . n = (I_ch^k + alpha_k (I_M - I_ch_total)) / (F z_k), with n_i on
    the intracellular side and n_e (opposite sign convention) on the
    extracellular side. Both sides must be fed the same alpha_k, or the
    capacitive part creates and destroys ions: the solver uses the mean of
    the two face mixes.
    """
    return (I_ch_k + alpha_k * (I_M - I_ch_total)) / (F * z)


def synaptic_conductance(t, x, stim):
    """Active synaptic conductance at time t and membrane x-coordinates.

    Returns an array over membrane points (0 outside the window or before
    the first onset). The driving force (phi_M - E_Na) is applied by the
    caller so that implicit and explicit membrane branches share this.
    """
    x = np.asarray(x, dtype=float)
    xc = x[:, 0] if x.ndim == 2 else x
    g = np.zeros_like(xc)
    if stim is None:
        return g
    past = [t0 for t0 in stim.onsets if t >= t0 - 1e-15]
    if not past:
        return g
    t0 = max(past)
    mask = np.ones_like(xc, dtype=bool)
    if stim.window is not None:
        lo, hi = stim.window
        mask = (xc >= lo) & (xc <= hi)
    g[mask] = stim.g_syn * (1.0 - np.exp(-(t - t0) / stim.alpha))
    return g


def balancing_leak(species, g_bar, phi_m0, gates0, constants):
    """Chloride conductance making phi_m0 stationary for the gated membrane.

    Returns g_Cl with I_Na + I_K + g_Cl (phi_m0 - E_Cl) = 0 at the initial
    concentrations and gating state. Used by scenario definitions that
    need a quiescent rest: with these concentrations E_Cl sits above the
    resting potential, so too strong a chloride leak carries a net inward
    current at rest and the membrane fires without any stimulus.
    """
    by_name = {s.name: s for s in species}
    E = {name: nernst(s.z, s.init_e, s.init_i, constants.psi)
         for name, s in by_name.items()}
    m, h, n = gates0
    I = hh_currents(phi_m0, m, h, n, E, {**g_bar, "Cl": 0.0})
    drive = phi_m0 - E["Cl"]
    if drive == 0:
        raise ValueError("chloride driving force vanishes; leak undefined")
    return -(I["Na"] + I["K"]) / drive
