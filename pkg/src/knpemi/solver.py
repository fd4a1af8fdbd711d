"""Time-stepping solvers for the coupled electrodiffusion system.

Two solvers share the same mortar structure on a tagged mesh: the full
electrodiffusion solver evolving concentrations, potentials and the
transmembrane current, and a reduced solver with fixed bulk
conductivities (potentials and membrane current only) used for
framework comparisons.

Per time step the full solver performs

  1. an explicit membrane stage: for gated membranes, forward-Euler
     substeps of the gating ODEs and the membrane potential with the
     spatial current switched off; for passive membranes nothing (their
     channel current enters the linear system implicitly);
  2. one backward-Euler step of the coupled block system, linearized by
     freezing the drift weights, the capacitive fractions and the
     reversal potentials at the previous concentrations.

Block layout: one concentration block per species and side, the two
potentials, the transmembrane current on the interface, and a scalar
multiplier pinning the integral of the extracellular potential (to zero
for physical runs, to the exact value for verification runs).
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ConfigurationError, InstabilityError
from .fespace import (BlockSystem, assemble_facet_load, assemble_load,
                      assemble_matrix, build_interface_space, build_space,
                      build_trace_map, error_norm, evaluate, facet_dofs)
from .geometry import exterior_boundary, extract_interface
from .membrane import (HodgkinHuxley, PassiveMembrane, capacitive_fractions,
                       gating_step, gating_steady_state, hh_currents, nernst,
                       synaptic_conductance)

CONC_FLOOR = 1e-12
PHI_M_LIMIT = 0.5  # V; far outside any physical or verification regime


@dataclass
class Problem:
    """Everything one simulation needs, in SI units (or unit-free)."""

    mesh: object
    species: tuple
    constants: object
    membrane: object
    dt: float
    stimulus: object = None
    boundary: str = "closed"      # closed | clamped | exact
    initial_phi_m: object = None  # scalar or callable of interface points
    initial_conc: dict = None     # name -> (value_or_fn_i, value_or_fn_e)
    gating_init: tuple = None     # (m, h, n) scalars; default steady state
    mms: object = None            # exact-solution bundle for boundary=exact
    phi_e_integral: float = 0.0   # grounding value for the mean constraint


def _nodal(value, space):
    if callable(value):
        return np.asarray(value(space.dof_coords), dtype=float)
    return np.full(space.num_dofs, float(value))


class KnpEmiSolver:
    """Coupled concentration/potential solver on a tagged mesh."""

    def __init__(self, problem):
        p = problem
        if p.boundary not in ("closed", "clamped", "exact"):
            raise ConfigurationError(f"unknown boundary mode '{p.boundary}'")
        if p.boundary == "exact" and p.mms is None:
            raise ConfigurationError("boundary mode 'exact' needs exact fields")
        self.p = p
        self.species = list(p.species)
        self.const = p.constants
        mesh = p.mesh

        self.V_i = build_space(mesh, 1, tags=[t for t in np.unique(
            mesh.cell_tags) if t > 0])
        self.V_e = build_space(mesh, 1, tags=0)
        self.gamma = extract_interface(mesh)
        self.V_g = build_interface_space(self.gamma, 1)
        self.T_i = build_trace_map(self.V_g, self.V_i)
        self.T_e = build_trace_map(self.V_g, self.V_e)

        # interface dofs inherit the cell label of their facet; cells are
        # separated by extracellular space so the label per dof is unique
        self.dof_labels = np.zeros(self.V_g.num_dofs, dtype=int)
        for f, lbl in enumerate(self.gamma.labels):
            self.dof_labels[self.V_g.cell_dofs[f]] = lbl

        self.M_i = assemble_matrix(self.V_i, "mass")
        self.M_e = assemble_matrix(self.V_e, "mass")
        self.S_i = assemble_matrix(self.V_i, "stiffness")
        self.S_e = assemble_matrix(self.V_e, "stiffness")
        self.M_g = assemble_matrix(self.V_g, "mass")
        self.m_i_vec = np.asarray(self.M_i.sum(axis=1)).ravel()
        self.m_e_vec = np.asarray(self.M_e.sum(axis=1)).ravel()

        dt = p.dt
        self.A_cc = {}
        self.A_phic = {}
        for s in self.species:
            self.A_cc[("i", s.name)] = self.M_i / dt + s.D * self.S_i
            self.A_cc[("e", s.name)] = self.M_e / dt + s.D * self.S_e
            self.A_phic[("i", s.name)] = (self.const.F * s.z * s.D) * self.S_i
            self.A_phic[("e", s.name)] = (self.const.F * s.z * s.D) * self.S_e

        if p.boundary in ("clamped", "exact"):
            self.bdofs = facet_dofs(self.V_e, exterior_boundary(mesh))
        else:
            self.bdofs = np.array([], dtype=int)

        self.blocks = {}
        for s in self.species:
            self.blocks[f"c_i_{s.name}"] = self.V_i.num_dofs
            self.blocks[f"c_e_{s.name}"] = self.V_e.num_dofs
        self.blocks["phi_i"] = self.V_i.num_dofs
        self.blocks["phi_e"] = self.V_e.num_dofs
        self.blocks["I_M"] = self.V_g.num_dofs
        self.blocks["lam"] = 1

        # state
        self.t = 0.0
        self.step_count = 0
        self.clamp_events = 0
        self._lu_cache = {}
        self.c = {}
        init = p.initial_conc or {}
        for s in self.species:
            fi, fe = init.get(s.name, (s.init_i, s.init_e))
            self.c[("i", s.name)] = _nodal(fi, self.V_i)
            self.c[("e", s.name)] = _nodal(fe, self.V_e)
        phi0 = p.initial_phi_m
        if phi0 is None:
            raise ConfigurationError("initial membrane potential is required")
        self.phi_m = _nodal(phi0, self.V_g)
        if isinstance(p.membrane, HodgkinHuxley):
            if p.gating_init is not None:
                m0, h0, n0 = p.gating_init
                self.gates = tuple(np.full(self.V_g.num_dofs, float(v))
                                   for v in (m0, h0, n0))
            else:
                self.gates = tuple(np.broadcast_to(g, (self.V_g.num_dofs,))
                                   .copy() for g in
                                   gating_steady_state(self.phi_m))
        else:
            self.gates = None
        self.phi_i = np.zeros(self.V_i.num_dofs)
        self.phi_e = np.zeros(self.V_e.num_dofs)
        self.I_M = np.zeros(self.V_g.num_dofs)
        self.lam = 0.0

    # -- membrane stage ------------------------------------------------

    def _stim_factor(self, t):
        """Synaptic conductance on interface dofs at time t (S/m^2)."""
        stim = self.p.stimulus
        g = synaptic_conductance(t, self.V_g.dof_coords, stim)
        if stim is not None and stim.labels is not None:
            g = g * np.isin(self.dof_labels, stim.labels)
        return g

    def _traces(self):
        out = {}
        for s in self.species:
            tr_i = self.T_i @ self.c[("i", s.name)]
            tr_e = self.T_e @ self.c[("e", s.name)]
            neg = np.count_nonzero(tr_i < 0) + np.count_nonzero(tr_e < 0)
            if neg:
                self.clamp_events += neg
            out[("i", s.name)] = np.maximum(tr_i, CONC_FLOOR)
            out[("e", s.name)] = np.maximum(tr_e, CONC_FLOOR)
        return out

    def _reversal(self, traces):
        memb = self.p.membrane
        if getattr(memb, "fixed_E", None) is not None:
            return {s.name: np.full(self.V_g.num_dofs, memb.fixed_E[s.name])
                    for s in self.species}
        psi = self.const.psi
        return {s.name: nernst(s.z, traces[("e", s.name)],
                               traces[("i", s.name)], psi)
                for s in self.species}

    def _membrane_stage(self, traces):
        """Channel data for the linear step: per-species nodal arrays.

        Returns (gamma, e, d): implicit conductance (S/m^2), implicit
        driving offset gamma_k E_k, and explicit current density. Passive
        membranes fill gamma/e, gated membranes fill d after the ODE
        substeps have advanced phi_M and the gating state.
        """
        memb = self.p.membrane
        E = self._reversal(traces)
        t_new = self.t + self.p.dt
        names = [s.name for s in self.species]
        zero = {k: np.zeros(self.V_g.num_dofs) for k in names}
        if isinstance(memb, PassiveMembrane):
            g_syn = self._stim_factor(t_new)
            gamma = {k: np.full(self.V_g.num_dofs, memb.g.get(k, 0.0))
                     for k in names}
            gamma["Na"] = gamma.get("Na", 0.0) + g_syn
            e = {k: gamma[k] * E[k] for k in names}
            return gamma, e, zero
        if isinstance(memb, HodgkinHuxley):
            phi = self.phi_m.copy()
            m, h, n = self.gates
            dt_sub = self.p.dt / memb.substeps
            for j in range(memb.substeps):
                t_sub = self.t + j * dt_sub
                I = hh_currents(phi, m, h, n, E, memb.g_bar)
                I_syn = self._stim_factor(t_sub) * (phi - E["Na"])
                total = sum(I.values()) + I_syn
                m, h, n = gating_step(m, h, n, phi, dt_sub)
                phi = phi - dt_sub * total / self.const.C_M
            self.gates = (m, h, n)
            self.phi_m = phi  # ODE-stage potential; PDE stage updates it
            d = hh_currents(phi, m, h, n, E, memb.g_bar)
            d["Na"] = d["Na"] + self._stim_factor(t_new) * (phi - E["Na"])
            return zero, {k: np.zeros(self.V_g.num_dofs) for k in names}, d
        raise ConfigurationError(
            f"unsupported membrane model {type(memb).__name__}")

    # -- linear stage ----------------------------------------------------

    def _interface_mass(self, w):
        return assemble_matrix(self.V_g, "mass", coeff=w)

    def step(self):
        p = self.p
        dt = p.dt
        F = self.const.F
        psi = self.const.psi
        C_M = self.const.C_M
        t_new = self.t + dt

        traces = self._traces()
        alpha_i = capacitive_fractions(
            self.species, {s.name: traces[("i", s.name)]
                           for s in self.species})
        alpha_e = capacitive_fractions(
            self.species, {s.name: traces[("e", s.name)]
                           for s in self.species})
        # One transference set carries the capacitive current on both
        # faces. The faces' own mixes differ, but the model does not track
        # the double-layer content, so splitting the carry per face would
        # leak ions in and out of the bulk totals; the shared set keeps
        # every species' total exactly constant under sealed boundaries.
        alpha = {s.name: 0.5 * (alpha_i[s.name] + alpha_e[s.name])
                 for s in self.species}
        gamma, e_off, d_exp = self._membrane_stage(traces)
        gamma_tot = sum(gamma.values())
        e_tot = sum(e_off.values())
        d_tot = sum(d_exp.values())
        if not (np.isfinite(self.phi_m).all() and np.isfinite(d_tot).all()) \
                or np.max(np.abs(self.phi_m)) > PHI_M_LIMIT:
            raise InstabilityError(
                f"membrane stage diverged at t = {t_new:.6g} s; the time "
                "step is too large for this problem")

        bs = BlockSystem(self.blocks)
        T_i, T_e, M_g = self.T_i, self.T_e, self.M_g
        M_gamma_tot = self._interface_mass(gamma_tot)

        for s in self.species:
            k = s.name
            ci, ce = f"c_i_{k}", f"c_e_{k}"
            fz = F * s.z
            bs.add(ci, ci, self.A_cc[("i", k)])
            bs.add(ce, ce, self.A_cc[("e", k)])
            drift = s.D * s.z / psi
            w_i = np.maximum(self.c[("i", k)], 0.0)
            w_e = np.maximum(self.c[("e", k)], 0.0)
            bs.add(ci, "phi_i",
                   assemble_matrix(self.V_i, "stiffness", coeff=w_i,
                                   scale=drift))
            bs.add(ce, "phi_e",
                   assemble_matrix(self.V_e, "stiffness", coeff=w_e,
                                   scale=drift))
            M_a = self._interface_mass(alpha[k])
            bs.add(ci, "I_M", T_i.T @ M_a, scale=1.0 / fz)
            bs.add(ce, "I_M", T_e.T @ M_a, scale=-1.0 / fz)
            # implicit channel part (gamma_k - alpha gamma_tot) phi_M
            comb = self._interface_mass(gamma[k] - alpha[k] * gamma_tot)
            bs.add(ci, "phi_i", T_i.T @ comb @ T_i, scale=1.0 / fz)
            bs.add(ci, "phi_e", T_i.T @ comb @ T_e, scale=-1.0 / fz)
            bs.add(ce, "phi_i", T_e.T @ comb @ T_i, scale=-1.0 / fz)
            bs.add(ce, "phi_e", T_e.T @ comb @ T_e, scale=1.0 / fz)
            # potential rows: valence-weighted fluxes
            bs.add("phi_i", ci, self.A_phic[("i", k)])
            bs.add("phi_e", ce, self.A_phic[("e", k)])
            sig = F * s.z ** 2 * s.D / psi
            bs.add("phi_i", "phi_i",
                   assemble_matrix(self.V_i, "stiffness", coeff=w_i,
                                   scale=sig))
            bs.add("phi_e", "phi_e",
                   assemble_matrix(self.V_e, "stiffness", coeff=w_e,
                                   scale=sig))

            # right-hand sides
            rhs_i = self.M_i @ self.c[("i", k)] / dt
            rhs_e = self.M_e @ self.c[("e", k)] / dt
            data = (e_off[k] - d_exp[k]) - alpha[k] * (e_tot - d_tot)
            rhs_i += (T_i.T @ (M_g @ data)) / fz
            rhs_e -= (T_e.T @ (M_g @ data)) / fz
            if p.mms is not None:
                rhs_i += assemble_load(self.V_i, p.mms.f_conc(k, "i", t_new))
                rhs_e += assemble_load(self.V_e, p.mms.f_conc(k, "e", t_new))
                rhs_i -= T_i.T @ assemble_facet_load(
                    self.V_g, p.mms.g_conc(k, "i", t_new))
                rhs_e -= T_e.T @ assemble_facet_load(
                    self.V_g, p.mms.g_conc(k, "e", t_new))
            bs.add_rhs(ci, rhs_i)
            bs.add_rhs(ce, rhs_e)

        bs.add("phi_i", "I_M", T_i.T @ M_g)
        bs.add("phi_e", "I_M", T_e.T @ M_g, scale=-1.0)
        bs.add("I_M", "phi_i", M_g @ T_i, scale=1.0 / dt)
        bs.add("I_M", "phi_e", M_g @ T_e, scale=-1.0 / dt)
        bs.add("I_M", "phi_i", M_gamma_tot @ T_i, scale=1.0 / C_M)
        bs.add("I_M", "phi_e", M_gamma_tot @ T_e, scale=-1.0 / C_M)
        bs.add("I_M", "I_M", M_g, scale=-1.0 / C_M)

        rhs_m = M_g @ self.phi_m / dt + (M_g @ e_tot) / C_M
        if p.mms is not None:
            rhs_m += assemble_facet_load(
                self.V_g, p.mms.g_phi_m(t_new)) / C_M
            bs.add_rhs("phi_i", assemble_load(
                self.V_i, p.mms.f_phi("i", t_new)))
            bs.add_rhs("phi_e", assemble_load(
                self.V_e, p.mms.f_phi("e", t_new)))
            bs.add_rhs("phi_i", -(T_i.T @ assemble_facet_load(
                self.V_g, p.mms.g_charge("i", t_new))))
            bs.add_rhs("phi_e", -(T_e.T @ assemble_facet_load(
                self.V_g, p.mms.g_charge("e", t_new))))
        bs.add_rhs("I_M", rhs_m)

        col = sp_column(self.m_e_vec)
        bs.add("phi_e", "lam", col)
        bs.add("lam", "phi_e", col.T)
        if p.phi_e_integral != 0.0:
            bs.add_rhs("lam", np.array([p.phi_e_integral]))

        if p.boundary == "clamped":
            init = p.initial_conc or {}
            for s in self.species:
                _, fe = init.get(s.name, (s.init_i, s.init_e))
                vals = _nodal(fe, self.V_e)[self.bdofs]
                bs.set_dirichlet(f"c_e_{s.name}", self.bdofs, vals)
        elif p.boundary == "exact":
            coords = self.V_e.dof_coords[self.bdofs]
            for s in self.species:
                bs.set_dirichlet(f"c_e_{s.name}", self.bdofs,
                                 p.mms.conc(s.name, "e", t_new)(coords))

        x = bs.solve(reuse=self._lu_cache)

        for s in self.species:
            self.c[("i", s.name)] = x[f"c_i_{s.name}"]
            self.c[("e", s.name)] = x[f"c_e_{s.name}"]
        self.phi_i = x["phi_i"]
        self.phi_e = x["phi_e"]
        self.I_M = x["I_M"]
        self.lam = float(x["lam"][0])
        # the constraint row holds only to direct-solver accuracy; realign
        # the global-constant null mode exactly (same shift on both sides
        # keeps the trace jump untouched)
        shift = (p.phi_e_integral - self.m_e_vec @ self.phi_e) \
            / self.m_e_vec.sum()
        self.phi_e += shift
        self.phi_i += shift
        self.phi_m = self.T_i @ self.phi_i - self.T_e @ self.phi_e
        self.t = t_new
        self.step_count += 1

        if not np.isfinite(self.phi_m).all() or not all(
                np.isfinite(v).all() for v in self.c.values()):
            raise InstabilityError(
                f"non-finite solution at t = {self.t:.6g} s")
        peak = float(np.max(np.abs(self.phi_m)))
        if peak > PHI_M_LIMIT:
            raise InstabilityError(
                f"membrane potential reached {peak:.3g} V at t = "
                f"{self.t:.6g} s; the time step is too large for this "
                "problem")

    def run(self, num_steps, observer=None):
        for _ in range(num_steps):
            self.step()
            if observer is not None:
                observer(self)

    # -- diagnostics ---------------------------------------------------

    def totals(self):
        """Ion content per species summed over both regions (mol)."""
        return {s.name: float(self.m_i_vec @ self.c[("i", s.name)]
                              + self.m_e_vec @ self.c[("e", s.name)])
                for s in self.species}

    def grounding(self):
        """Integral of the extracellular potential over its region."""
        return float(self.m_e_vec @ self.phi_e)

    def extracellular_volume(self):
        return float(self.m_e_vec.sum())

    def probe_extracellular(self, points):
        return evaluate(self.V_e, self.phi_e, points)

    def interface_dof_near(self, point):
        d = np.linalg.norm(self.V_g.dof_coords - np.asarray(point), axis=1)
        return int(np.argmin(d))

    def reversal(self, name):
        """Nernst potential of one species from the current traces (V)."""
        sp = next(s for s in self.species if s.name == name)
        tr = self._traces()
        return nernst(sp.z, tr[("e", name)], tr[("i", name)], self.const.psi)

    def probe(self, field, points):
        """Interpolate a named field at exact coordinates.

        Volume fields (``phi_i``, ``phi_e``, ``<ion>_i``, ``<ion>_e``)
        are located cell by cell; membrane fields (``phi_m``, ``I_M``,
        ``E_<ion>``, gate variables) take the nearest interface dof.
        """
        return _probe_field(self, field, points)


def _probe_field(solver, field, points):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if field == "phi_i":
        return evaluate(solver.V_i, solver.phi_i, points)
    if field == "phi_e":
        return evaluate(solver.V_e, solver.phi_e, points)
    conc = getattr(solver, "c", None)
    if "_" in field:
        name, _, side = field.rpartition("_")
        if side in ("i", "e") and any(
                s.name == name for s in solver.p.species):
            if conc is None:
                raise ConfigurationError(
                    f"field {field!r} is not carried by this solver")
            space = solver.V_i if side == "i" else solver.V_e
            return evaluate(space, conc[(side, name)], points)
    dofs = [solver.interface_dof_near(pt) for pt in points]
    if field == "phi_m":
        return solver.phi_m[dofs]
    if field == "I_M":
        return solver.I_M[dofs]
    if field.startswith("E_"):
        return solver.reversal(field[2:])[dofs]
    gates = getattr(solver, "gates", None)
    if field in ("m", "h", "n"):
        if gates is None:
            raise ConfigurationError(
                f"gate {field!r} requires an active membrane model")
        return gates[("m", "h", "n").index(field)][dofs]
    raise ConfigurationError(f"unknown probe field {field!r}")


def sp_column(vec):
    return sparse.csr_matrix(np.asarray(vec, dtype=float).reshape(-1, 1))


class EmiSolver:
    """Reduced comparison solver with fixed bulk conductivities.

    Shares the interface structure of the full solver but evolves only
    the potentials and membrane current; reversal potentials are frozen
    at their initial values since concentrations do not evolve.
    """

    def __init__(self, problem, sigma_i, sigma_e):
        p = problem
        self.p = p
        self.const = p.constants
        mesh = p.mesh
        self.V_i = build_space(mesh, 1, tags=[t for t in np.unique(
            mesh.cell_tags) if t > 0])
        self.V_e = build_space(mesh, 1, tags=0)
        self.gamma = extract_interface(mesh)
        self.V_g = build_interface_space(self.gamma, 1)
        self.T_i = build_trace_map(self.V_g, self.V_i)
        self.T_e = build_trace_map(self.V_g, self.V_e)
        self.dof_labels = np.zeros(self.V_g.num_dofs, dtype=int)
        for f, lbl in enumerate(self.gamma.labels):
            self.dof_labels[self.V_g.cell_dofs[f]] = lbl
        self.sigma_i = float(sigma_i)
        self.sigma_e = float(sigma_e)
        self.S_i = assemble_matrix(self.V_i, "stiffness", scale=sigma_i)
        self.S_e = assemble_matrix(self.V_e, "stiffness", scale=sigma_e)
        self.M_g = assemble_matrix(self.V_g, "mass")
        self.M_e = assemble_matrix(self.V_e, "mass")
        self.m_e_vec = np.asarray(self.M_e.sum(axis=1)).ravel()

        # reversal potentials frozen at the initial concentrations
        memb = p.membrane
        if getattr(memb, "fixed_E", None) is not None:
            self.E = {s.name: np.full(self.V_g.num_dofs, memb.fixed_E[s.name])
                      for s in p.species}
        else:
            psi = self.const.psi
            self.E = {s.name: np.full(
                self.V_g.num_dofs, nernst(s.z, s.init_e, s.init_i, psi))
                for s in p.species}

        self.t = 0.0
        self._lu_cache = {}
        self.phi_m = _nodal(p.initial_phi_m, self.V_g)
        if isinstance(p.membrane, HodgkinHuxley):
            if p.gating_init is not None:
                self.gates = tuple(np.full(self.V_g.num_dofs, float(v))
                                   for v in p.gating_init)
            else:
                self.gates = tuple(np.broadcast_to(g, (self.V_g.num_dofs,))
                                   .copy() for g in
                                   gating_steady_state(self.phi_m))
        else:
            self.gates = None
        self.phi_i = np.zeros(self.V_i.num_dofs)
        self.phi_e = np.zeros(self.V_e.num_dofs)
        self.I_M = np.zeros(self.V_g.num_dofs)

        self.blocks = {"phi_i": self.V_i.num_dofs,
                       "phi_e": self.V_e.num_dofs,
                       "I_M": self.V_g.num_dofs, "lam": 1}

    def _stim_factor(self, t):
        stim = self.p.stimulus
        g = synaptic_conductance(t, self.V_g.dof_coords, stim)
        if stim is not None and stim.labels is not None:
            g = g * np.isin(self.dof_labels, stim.labels)
        return g

    def _membrane_stage(self):
        memb = self.p.membrane
        t_new = self.t + self.p.dt
        if isinstance(memb, PassiveMembrane):
            names = list(self.E)
            g_syn = self._stim_factor(t_new)
            gamma = {k: np.full(self.V_g.num_dofs, memb.g.get(k, 0.0))
                     for k in names}
            gamma["Na"] = gamma.get("Na", 0.0) + g_syn
            e = {k: gamma[k] * self.E[k] for k in names}
            return sum(gamma.values()), sum(e.values())
        phi = self.phi_m.copy()
        m, h, n = self.gates
        dt_sub = self.p.dt / memb.substeps
        for j in range(memb.substeps):
            t_sub = self.t + j * dt_sub
            I = hh_currents(phi, m, h, n, self.E, memb.g_bar)
            I_syn = self._stim_factor(t_sub) * (phi - self.E["Na"])
            m, h, n = gating_step(m, h, n, phi, dt_sub)
            phi = phi - dt_sub * (sum(I.values()) + I_syn) / self.const.C_M
        self.gates = (m, h, n)
        self.phi_m = phi
        return np.zeros(self.V_g.num_dofs), np.zeros(self.V_g.num_dofs)

    def step(self):
        dt = self.p.dt
        C_M = self.const.C_M
        gamma_tot, e_tot = self._membrane_stage()
        if not (np.isfinite(self.phi_m).all()
                and np.isfinite(e_tot).all()) \
                or np.max(np.abs(self.phi_m)) > PHI_M_LIMIT:
            raise InstabilityError(
                f"membrane stage diverged at t = {self.t + dt:.6g} s; the "
                "time step is too large for this problem")
        bs = BlockSystem(self.blocks)
        T_i, T_e, M_g = self.T_i, self.T_e, self.M_g
        bs.add("phi_i", "phi_i", self.S_i)
        bs.add("phi_e", "phi_e", self.S_e)
        bs.add("phi_i", "I_M", T_i.T @ M_g)
        bs.add("phi_e", "I_M", T_e.T @ M_g, scale=-1.0)
        bs.add("I_M", "phi_i", M_g @ T_i, scale=1.0 / dt)
        bs.add("I_M", "phi_e", M_g @ T_e, scale=-1.0 / dt)
        if np.any(gamma_tot):
            M_gam = assemble_matrix(self.V_g, "mass", coeff=gamma_tot)
            bs.add("I_M", "phi_i", M_gam @ T_i, scale=1.0 / C_M)
            bs.add("I_M", "phi_e", M_gam @ T_e, scale=-1.0 / C_M)
        bs.add("I_M", "I_M", M_g, scale=-1.0 / C_M)
        bs.add_rhs("I_M", M_g @ self.phi_m / dt + (M_g @ e_tot) / C_M)
        col = sp_column(self.m_e_vec)
        bs.add("phi_e", "lam", col)
        bs.add("lam", "phi_e", col.T)
        x = bs.solve(reuse=self._lu_cache)
        self.phi_i = x["phi_i"]
        self.phi_e = x["phi_e"]
        self.I_M = x["I_M"]
        shift = (self.m_e_vec @ self.phi_e) / self.m_e_vec.sum()
        self.phi_e -= shift
        self.phi_i -= shift
        self.phi_m = T_i @ self.phi_i - T_e @ self.phi_e
        self.t += dt
        if not np.isfinite(self.phi_m).all():
            raise InstabilityError(f"non-finite solution at t = {self.t:.6g}")
        peak = float(np.max(np.abs(self.phi_m)))
        if peak > PHI_M_LIMIT:
            raise InstabilityError(
                f"membrane potential reached {peak:.3g} V at t = "
                f"{self.t:.6g} s; the time step is too large for this "
                "problem")

    def run(self, num_steps, observer=None):
        for _ in range(num_steps):
            self.step()
            if observer is not None:
                observer(self)

    def probe_extracellular(self, points):
        return evaluate(self.V_e, self.phi_e, points)

    def interface_dof_near(self, point):
        d = np.linalg.norm(self.V_g.dof_coords - np.asarray(point), axis=1)
        return int(np.argmin(d))

    def reversal(self, name):
        """Reversal potential; frozen at the initial concentrations."""
        return self.E[name]

    def probe(self, field, points):
        """Same contract as the full solver, minus concentration fields."""
        return _probe_field(self, field, points)

    def grounding(self):
        return float(self.m_e_vec @ self.phi_e)

    def extracellular_volume(self):
        return float(self.m_e_vec.sum())


def manufactured_problem(n, dt):
    """Verification setup: unit coefficients, exact-trace boundary data."""
    from .mms import PHI_E_INTEGRAL, ManufacturedSolution, verification_mesh

    mms = ManufacturedSolution()
    mesh = verification_mesh(n)
    membrane = PassiveMembrane(
        g=dict(mms.channel_weights),
        fixed_E={s.name: 0.0 for s in mms.species})
    return Problem(mesh=mesh, species=mms.species,
                   constants=mms.constants, membrane=membrane, dt=dt,
                   boundary="exact",
                   initial_phi_m=mms.initial_phi_m(),
                   initial_conc=mms.initial_concentrations(), mms=mms,
                   phi_e_integral=PHI_E_INTEGRAL)


def solve_manufactured(n, dt, num_steps):
    """Run the verification problem and return all error norms."""
    problem = manufactured_problem(n, dt)
    mms = problem.mms
    solver = KnpEmiSolver(problem)
    solver.run(num_steps)
    t = solver.t

    errors = {}
    for s in mms.species:
        for side, space in (("i", solver.V_i), ("e", solver.V_e)):
            u = solver.c[(side, s.name)]
            errors[f"{s.name}_{side}_L2"] = error_norm(
                space, u, exact=mms.conc(s.name, side, t))
            errors[f"{s.name}_{side}_H1"] = error_norm(
                space, u, exact=mms.conc(s.name, side, t),
                exact_grad=mms.conc_grad(s.name, side, t), kind="H1")
    for side, space, u in (("i", solver.V_i, solver.phi_i),
                           ("e", solver.V_e, solver.phi_e)):
        errors[f"phi_{side}_L2"] = error_norm(
            space, u, exact=mms.phi(side, t))
        errors[f"phi_{side}_H1"] = error_norm(
            space, u, exact=mms.phi(side, t),
            exact_grad=mms.phi_grad(side, t), kind="H1")
    errors["I_M_L2"] = error_norm(solver.V_g, solver.I_M, exact=mms.i_m(t))
    return errors
