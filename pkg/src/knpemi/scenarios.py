"""Scenario configuration: schema, validation, builtins, unit conversion.

Configurations carry quantities in the units the modelling literature
uses (µm, ms, mM, mV, mS/cm²) with the unit spelled out in every key;
``build_problem`` converts to SI at the boundary to the solver. The
builtin catalogue covers a single passive axon (A), the manufactured
verification setup (B), one- and two-axon comparison domains (C1-C3),
a 3D axon bundle with active membranes (D), and a shortened desk-scale
bundle (D-reduced) for qualitative runs.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .membrane import (
    Constants,
    HodgkinHuxley,
    PassiveMembrane,
    Species,
    Stimulus,
    balancing_leak,
)
from .geometry import build_box_mesh, tag_subdomains
from .solver import Problem, manufactured_problem

UM = 1e-6             # µm -> m
MS = 1e-3             # ms -> s
MV = 1e-3             # mV -> V
MS_PER_CM2 = 10.0     # mS/cm² -> S/m²
UM2_PER_MS = 1e-9     # µm²/ms -> m²/s
US_PER_UM = 1.0       # µS/µm -> S/m; mM -> mol/m³ is likewise exact

AXIS_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class SpeciesRow:
    name: str
    z: int
    D_um2_per_ms: float
    init_i_mM: float
    init_e_mM: float


@dataclass(frozen=True)
class CellRegion:
    label: int
    box_um: tuple  # per-axis (lo, hi)


@dataclass(frozen=True)
class MembraneConfig:
    model: str  # "passive" | "hodgkin-huxley"
    g_leak_mS_per_cm2: dict | None = None
    g_bar_mS_per_cm2: dict | None = None
    gating_init: tuple | None = None


@dataclass(frozen=True)
class StimulusConfig:
    g_syn_mS_per_cm2: float
    alpha_ms: float
    onsets_ms: tuple
    window_x_um: tuple | None = None  # axial interval; None = everywhere
    labels: tuple | None = None       # cell labels; None = every membrane


@dataclass(frozen=True)
class ProbeConfig:
    id: str
    point_um: tuple
    fields: tuple


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    dimension: int
    domain_um: tuple       # per-axis (lo, hi)
    resolution: tuple      # grid cells per axis
    cells: tuple           # CellRegion entries
    species: tuple         # SpeciesRow entries
    membrane: MembraneConfig
    boundary: str          # "closed" | "clamped" | "exact"
    dt_ms: float
    end_ms: float
    phi_m0_mV: float
    stimulus: StimulusConfig | None = None
    probes: tuple = ()
    snapshot_every_ms: float = 0.0
    emi_sigma_uS_per_um: object = None  # None | "from-initial" | (si, se)
    verification: bool = False
    note: str = ""

    def num_steps(self):
        n = int(round(self.end_ms / self.dt_ms))
        if abs(n * self.dt_ms - self.end_ms) > 1e-9 * max(self.end_ms, 1.0):
            raise ConfigurationError(
                f"end_ms = {self.end_ms} is not a multiple of "
                f"dt_ms = {self.dt_ms}")
        return n


# -- squid-axon defaults shared by the physical scenarios -----------------

SQUID_SPECIES = (
    SpeciesRow("Na", 1, 1.33, 12.0, 100.0),
    SpeciesRow("K", 1, 1.96, 125.0, 4.0),
    SpeciesRow("Cl", -1, 2.03, 137.0, 104.0),
)
PASSIVE_LEAK = {"Na": 0.2, "K": 0.8, "Cl": 0.0}
HH_GATED = {"Na": 120.0, "K": 36.0}
GATING_INIT = (0.0379, 0.688, 0.276)
PHI_M0_MV = -67.74
DT_MS = 0.1


def _rest_balancing_chloride():
    # With these concentrations E_Cl lies above rest, so the classical
    # 0.3 mS/cm² leak drives a net inward current at -67.74 mV and every
    # axon fires unprompted within ~2 ms. The bundle scenarios need the
    # unstimulated axons quiescent, so the leak is chosen to zero the
    # total current at the initial state. balancing_leak is linear in
    # the conductances: mS/cm² in, mS/cm² out (diffusivities unused).
    rows = tuple(Species(s.name, s.z, 0.0, s.init_i_mM, s.init_e_mM)
                 for s in SQUID_SPECIES)
    return balancing_leak(rows, HH_GATED, PHI_M0_MV * MV, GATING_INIT,
                          Constants())


_PASSIVE = MembraneConfig("passive", g_leak_mS_per_cm2=dict(PASSIVE_LEAK))
_ACTIVE = MembraneConfig(
    "hodgkin-huxley",
    g_bar_mS_per_cm2={**HH_GATED, "Cl": _rest_balancing_chloride()},
    gating_init=GATING_INIT)

PROBE_FIELD_KINDS = ("phi_i", "phi_e", "phi_m", "I_M", "m", "h", "n")


def _axial_probes(prefix, x_lo, x_hi, y, fields=("phi_e",), step=1.0):
    n = int(round((x_hi - x_lo) / step)) + 1
    return tuple(ProbeConfig(f"{prefix}_{i:02d}", (x_lo + i * step, y), fields)
                 for i in range(n))


def _bundle_cells(x_um):
    """3x3 axon array: 0.2 µm square sections, 0.1 µm gaps, 0.3 margins."""
    spans = ((0.3, 0.5), (0.6, 0.8), (0.9, 1.1))
    cells = []
    label = 0
    for sy in spans:
        for sz in spans:
            label += 1
            cells.append(CellRegion(label, (x_um, sy, sz)))
    return tuple(cells)


def _bundle_probes(x_mid):
    spans = ((0.3, 0.5), (0.6, 0.8), (0.9, 1.1))
    probes = []
    label = 0
    for sy in spans:
        for sz in spans:
            label += 1
            # the center probe sits on a mesh vertex of the membrane, so
            # the concentration traces there are the exact inputs of the
            # emitted reversal potentials (figure scripts re-derive them)
            fields = (("phi_m", "E_Na", "E_K", "Na_i", "Na_e", "K_i", "K_e")
                      if label == 5 else ("phi_m",))
            probes.append(ProbeConfig(
                f"axon{label}",
                (x_mid, 0.5 * (sy[0] + sy[1]), sz[1]), fields))
    probes += [
        ProbeConfig("near_center", (x_mid, 0.7, 0.85), ("K_e", "Na_e")),
        ProbeConfig("center_inside", (x_mid, 0.7, 0.7), ("Na_i", "K_i")),
        ProbeConfig("gap", (x_mid, 0.7, 0.55), ("phi_e",)),
    ]
    return tuple(probes)


def _scenario_a():
    return ScenarioConfig(
        name="A", dimension=2,
        domain_um=((0.0, 60.0), (0.0, 60.0)), resolution=(60, 60),
        cells=(CellRegion(1, ((6.0, 56.0), (28.0, 34.0))),),
        species=SQUID_SPECIES, membrane=_PASSIVE, boundary="clamped",
        dt_ms=DT_MS, end_ms=10.0, phi_m0_mV=PHI_M0_MV,
        stimulus=StimulusConfig(125.0, 1.0, (0.0,), window_x_um=(5.0, 10.0)),
        probes=(
            ProbeConfig("stim", (8.0, 34.0), ("phi_m",)),
            ProbeConfig("mid", (31.0, 34.0), ("phi_m",)),
            ProbeConfig("above", (31.0, 36.0), ("phi_e", "Na_e", "K_e")),
        ),
        note="single passive axon, fixed exterior concentrations")


def _scenario_b():
    return ScenarioConfig(
        name="B", dimension=2,
        domain_um=((0.0, 1.0), (0.0, 1.0)), resolution=(32, 32),
        cells=(CellRegion(1, ((0.25, 0.75), (0.25, 0.75))),),
        species=(SpeciesRow("Na", 1, 1.0, 0.7, 1.0),
                 SpeciesRow("K", 1, 1.0, 0.3, 1.0),
                 SpeciesRow("Cl", -1, 1.0, 1.0, 2.0)),
        membrane=MembraneConfig("passive",
                                g_leak_mS_per_cm2={"Na": 1.0, "K": 1.0,
                                                   "Cl": 1.0}),
        boundary="exact", dt_ms=1.5625e-07 / 16.0, end_ms=32 * 1.5625e-07 / 16.0,
        phi_m0_mV=0.0, verification=True,
        note="verification setup: dimensionless units; geometry, initial "
             "and boundary data come from the embedded exact solution, "
             "and the time keys are plain dimensionless time")


def _scenario_c(name, cells, window):
    probes = _axial_probes("axial", 35.0, 85.0, 65.0 if name == "C1" else 60.0)
    if name == "C1":
        memb_probes = (ProbeConfig("memb", (37.5, 63.0), ("phi_m",)),)
    else:
        y_top1 = cells[0].box_um[1][1]
        y_bot2 = cells[1].box_um[1][0]
        xm = 0.5 * (window[0] + window[1])
        memb_probes = (ProbeConfig("memb1", (xm, y_top1), ("phi_m",)),
                       ProbeConfig("memb2", (xm, y_bot2), ("phi_m",)))
    return ScenarioConfig(
        name=name, dimension=2,
        domain_um=((0.0, 120.0), (0.0, 120.0)), resolution=(120, 120),
        cells=cells, species=SQUID_SPECIES, membrane=_PASSIVE,
        boundary="closed", dt_ms=DT_MS, end_ms=10.0, phi_m0_mV=PHI_M0_MV,
        stimulus=StimulusConfig(12.5, 1.0, (0.0,), window_x_um=window),
        probes=probes + memb_probes,
        emi_sigma_uS_per_um="from-initial",
        note="ion-tight exterior; paired with the fixed-conductivity "
             "solver for framework comparison")


def _scenario_d():
    return ScenarioConfig(
        name="D", dimension=3,
        domain_um=((0.0, 400.0), (0.0, 1.4), (0.0, 1.4)),
        resolution=(640, 14, 14),
        cells=_bundle_cells((5.0, 395.0)),
        species=SQUID_SPECIES, membrane=_ACTIVE, boundary="clamped",
        dt_ms=DT_MS, end_ms=60.0, phi_m0_mV=PHI_M0_MV,
        stimulus=StimulusConfig(4.0, 2.0, (0.0, 20.0, 40.0), labels=(5,)),
        probes=_bundle_probes(200.0),
        note="full-length axon bundle; the cross-section forces a 0.1 µm "
             "transverse grid, well beyond desk scale")


def _scenario_d_reduced():
    return ScenarioConfig(
        name="D-reduced", dimension=3,
        domain_um=((0.0, 20.0), (0.0, 1.4), (0.0, 1.4)),
        resolution=(10, 14, 14),
        cells=_bundle_cells((2.0, 18.0)),
        species=SQUID_SPECIES, membrane=_ACTIVE, boundary="closed",
        dt_ms=DT_MS, end_ms=25.0, phi_m0_mV=PHI_M0_MV,
        stimulus=StimulusConfig(4.0, 2.0, (0.0, 15.0), window_x_um=(2.0, 6.0),
                                labels=(5,)),
        probes=_bundle_probes(10.0),
        note="non-quantitative desk-scale reduction of the axon bundle: "
             "shorter axons, coarser axial grid, two stimulus onsets. The "
             "exterior is sealed: at 1/20 the axon length the released "
             "potassium no longer dwarfs what a concentration clamp 0.3 µm "
             "from the outer axons drains away, so an open exterior would "
             "wash out the very accumulation the bundle is meant to show")


_BUILTINS = {
    "A": _scenario_a,
    "B": _scenario_b,
    "C1": lambda: _scenario_c(
        "C1", (CellRegion(1, ((35.0, 85.0), (57.0, 63.0))),), (35.0, 40.0)),
    "C2": lambda: _scenario_c(
        "C2", (CellRegion(1, ((35.0, 85.0), (52.0, 58.0))),
               CellRegion(2, ((35.0, 85.0), (62.0, 68.0)))), (60.0, 65.0)),
    "C3": lambda: _scenario_c(
        "C3", (CellRegion(1, ((35.0, 85.0), (49.0, 55.0))),
               CellRegion(2, ((35.0, 85.0), (65.0, 71.0)))), (55.0, 60.0)),
    "D": _scenario_d,
    "D-REDUCED": _scenario_d_reduced,
}


def builtin_names():
    return ("A", "B", "C1", "C2", "C3", "D", "D-reduced")


def builtin_scenario(name):
    key = str(name).replace("_", "-").upper()
    if key not in _BUILTINS:
        raise ConfigurationError(
            f"unknown scenario {name!r}; builtins: "
            + ", ".join(builtin_names()))
    cfg = _BUILTINS[key]()
    validate(cfg)
    return cfg


# -- validation ----------------------------------------------------------

def _check(cond, msg):
    if not cond:
        raise ConfigurationError(msg)


def _probe_field_ok(fld, species_names):
    if fld in PROBE_FIELD_KINDS:
        return True
    if fld.startswith("E_"):
        return fld[2:] in species_names
    name, _, side = fld.rpartition("_")
    return side in ("i", "e") and name in species_names


def validate(cfg):
    """Full consistency check; raises ConfigurationError naming the field."""
    dim = cfg.dimension
    _check(dim in (2, 3), f"dimension must be 2 or 3, got {dim}")
    _check(len(cfg.domain_um) == dim and len(cfg.resolution) == dim,
           "domain_um and resolution must match the dimension")
    for ax, (lo, hi) in zip(AXIS_NAMES, cfg.domain_um):
        _check(lo < hi, f"domain_um: empty interval on the {ax} axis")
    for ax, r in zip(AXIS_NAMES, cfg.resolution):
        _check(int(r) == r and r >= 1,
               f"resolution: need a positive cell count on the {ax} axis")

    h = [(hi - lo) / r for (lo, hi), r in zip(cfg.domain_um, cfg.resolution)]
    labels = [c.label for c in cfg.cells]
    _check(len(set(labels)) == len(labels), "cell labels must be unique")
    for c in cfg.cells:
        _check(c.label >= 1, f"cell label {c.label} must be positive")
        _check(len(c.box_um) == dim,
               f"cell {c.label}: box does not match the dimension")
        for ax, (lo, hi), (dlo, dhi), hx in zip(
                AXIS_NAMES, c.box_um, cfg.domain_um, h):
            _check(lo < hi, f"cell {c.label}: empty interval on the {ax} axis")
            _check(dlo < lo and hi < dhi,
                   f"cell {c.label} must stay strictly inside the domain "
                   f"on the {ax} axis")
            for v in (lo, hi):
                k = (v - dlo) / hx
                _check(abs(k - round(k)) < 1e-9 * max(1.0, abs(k)),
                       f"cell {c.label} is not aligned to the grid on the "
                       f"{ax} axis (coordinate {v})")
    for i, a in enumerate(cfg.cells):
        for b in cfg.cells[i + 1:]:
            overlap = all(alo < bhi and blo < ahi
                          for (alo, ahi), (blo, bhi)
                          in zip(a.box_um, b.box_um))
            _check(not overlap, f"cells {a.label} and {b.label} overlap")

    _check(len(cfg.species) > 0, "species table is empty")
    names = [s.name for s in cfg.species]
    _check(len(set(names)) == len(names), "species names must be unique")
    for s in cfg.species:
        _check(s.D_um2_per_ms > 0, f"species {s.name}: D must be positive")
        _check(s.init_i_mM > 0 and s.init_e_mM > 0,
               f"species {s.name}: initial concentrations must be positive")
        _check(s.z != 0, f"species {s.name}: zero valence is not transported")
    for side in ("i", "e"):
        net = sum(s.z * getattr(s, f"init_{side}_mM") for s in cfg.species)
        scale = sum(abs(s.z) * getattr(s, f"init_{side}_mM")
                    for s in cfg.species)
        _check(abs(net) <= 1e-12 * scale,
               f"initial concentrations are not electroneutral on the "
               f"{'intra' if side == 'i' else 'extra'}cellular side "
               f"(net charge {net} mM)")

    memb = cfg.membrane
    _check(memb.model in ("passive", "hodgkin-huxley"),
           f"unknown membrane model {memb.model!r}")
    if memb.model == "passive":
        _check(memb.g_leak_mS_per_cm2 is not None,
               "passive membrane needs g_leak_mS_per_cm2")
        table = memb.g_leak_mS_per_cm2
    else:
        _check(memb.g_bar_mS_per_cm2 is not None,
               "hodgkin-huxley membrane needs g_bar_mS_per_cm2")
        table = memb.g_bar_mS_per_cm2
        _check(memb.gating_init is not None and len(memb.gating_init) == 3,
               "hodgkin-huxley membrane needs gating_init = [m, h, n]")
        _check(all(0.0 <= g <= 1.0 for g in memb.gating_init),
               "gating_init values must lie in [0, 1]")
        _check({"Na", "K"} <= set(table),
               "hodgkin-huxley conductances must cover Na and K")
    for k, v in table.items():
        _check(k in names, f"membrane conductance names unknown species {k!r}")
        _check(v >= 0, f"membrane conductance for {k} must be nonnegative")

    if cfg.verification:
        _check(cfg.boundary == "exact",
               "the verification scenario uses the exact-trace boundary")
    else:
        _check(cfg.boundary in ("closed", "clamped"),
               f"boundary must be 'closed' (no ion flux) or 'clamped' "
               f"(fixed exterior concentrations), got {cfg.boundary!r}")
    _check(cfg.dt_ms > 0, "dt_ms must be positive")
    _check(cfg.end_ms >= 0, "end_ms must be nonnegative")
    cfg.num_steps()
    _check(cfg.snapshot_every_ms >= 0, "snapshot_every_ms must be nonnegative")

    stim = cfg.stimulus
    if stim is not None:
        _check(stim.g_syn_mS_per_cm2 >= 0, "stimulus: g_syn must be >= 0")
        _check(stim.alpha_ms > 0, "stimulus: alpha_ms must be positive")
        _check(len(stim.onsets_ms) > 0, "stimulus: no onsets given")
        _check(all(t >= 0 for t in stim.onsets_ms),
               "stimulus: onsets must be nonnegative")
        _check(list(stim.onsets_ms) == sorted(stim.onsets_ms),
               "stimulus: onsets must be sorted")
        if stim.labels is not None:
            _check(set(stim.labels) <= set(labels),
                   f"stimulus: labels {sorted(set(stim.labels) - set(labels))}"
                   f" name no cell")
        if stim.window_x_um is not None:
            lo, hi = stim.window_x_um
            _check(lo < hi, "stimulus: empty window")
            targets = [c for c in cfg.cells
                       if stim.labels is None or c.label in stim.labels]
            hit = any(c.box_um[0][0] <= hi and lo <= c.box_um[0][1]
                      for c in targets)
            _check(hit, "stimulus: the window touches no target membrane")

    ids = [p.id for p in cfg.probes]
    _check(len(set(ids)) == len(ids), "probe ids must be unique")
    for p in cfg.probes:
        _check(p.id != "", "probe ids must be nonempty")
        _check(len(p.point_um) == dim,
               f"probe {p.id!r}: point does not match the dimension")
        inside = all(lo <= v <= hi
                     for v, (lo, hi) in zip(p.point_um, cfg.domain_um))
        _check(inside, f"probe {p.id!r} lies outside the domain")
        _check(len(p.fields) > 0, f"probe {p.id!r} has no fields")
        for fld in p.fields:
            _check(_probe_field_ok(fld, set(names)),
                   f"probe {p.id!r}: unknown field {fld!r}")

    sig = cfg.emi_sigma_uS_per_um
    if sig is not None and sig != "from-initial":
        ok = (isinstance(sig, (tuple, list)) and len(sig) == 2
              and all(float(v) > 0 for v in sig))
        _check(ok, "emi_sigma_uS_per_um must be 'from-initial' or two "
                   "positive conductivities [intra, extra]")
    return cfg


# -- conversion to the SI problem ----------------------------------------

def si_species(cfg):
    return tuple(Species(s.name, s.z, s.D_um2_per_ms * UM2_PER_MS,
                         s.init_i_mM, s.init_e_mM) for s in cfg.species)


def _si_stimulus(stim):
    if stim is None:
        return None
    window = None
    if stim.window_x_um is not None:
        window = (stim.window_x_um[0] * UM, stim.window_x_um[1] * UM)
    return Stimulus(g_syn=stim.g_syn_mS_per_cm2 * MS_PER_CM2,
                    alpha=stim.alpha_ms * MS,
                    onsets=tuple(t * MS for t in stim.onsets_ms),
                    window=window,
                    labels=None if stim.labels is None
                    else tuple(stim.labels))


def build_mesh(cfg):
    extents = tuple((lo * UM, hi * UM) for lo, hi in cfg.domain_um)
    mesh = build_box_mesh(extents, tuple(int(r) for r in cfg.resolution))
    boxes = {c.label: tuple((lo * UM, hi * UM) for lo, hi in c.box_um)
             for c in cfg.cells}
    return tag_subdomains(mesh, boxes)


def build_problem(cfg):
    """SI Problem from a validated configuration."""
    validate(cfg)
    if cfg.verification:
        n = int(cfg.resolution[0])
        # dimensionless setup: time keys are used verbatim
        return manufactured_problem(n, cfg.dt_ms)
    memb_cfg = cfg.membrane
    if memb_cfg.model == "passive":
        membrane = PassiveMembrane(
            g={k: v * MS_PER_CM2
               for k, v in memb_cfg.g_leak_mS_per_cm2.items()})
        gating = None
    else:
        membrane = HodgkinHuxley(
            g_bar={k: v * MS_PER_CM2
                   for k, v in memb_cfg.g_bar_mS_per_cm2.items()})
        gating = tuple(float(v) for v in memb_cfg.gating_init)
    return Problem(
        mesh=build_mesh(cfg), species=si_species(cfg), constants=Constants(),
        membrane=membrane, dt=cfg.dt_ms * MS, stimulus=_si_stimulus(cfg.stimulus),
        boundary=cfg.boundary, initial_phi_m=cfg.phi_m0_mV * MV,
        gating_init=gating)


def emi_conductivities(cfg):
    """Fixed conductivities for the comparison solver, in S/m.

    "from-initial" (the default when the scenario pins nothing) evaluates
    the electroneutral bulk-conductivity formula with the configured
    initial concentrations, separately per side.
    """
    from .membrane import bulk_conductivity

    sig = cfg.emi_sigma_uS_per_um
    if sig is None or sig == "from-initial":
        species = si_species(cfg)
        consts = Constants()
        sigma_i = bulk_conductivity(
            species, {s.name: s.init_i for s in species}, consts)
        sigma_e = bulk_conductivity(
            species, {s.name: s.init_e for s in species}, consts)
        return float(sigma_i), float(sigma_e)
    return float(sig[0]) * US_PER_UM, float(sig[1]) * US_PER_UM


def with_overrides(cfg, dt_ms=None, end_ms=None, snapshot_every_ms=None,
                   emi_sigma=None):
    """Common command-line overrides, re-validated."""
    kw = {}
    if dt_ms is not None:
        kw["dt_ms"] = float(dt_ms)
    if end_ms is not None:
        kw["end_ms"] = float(end_ms)
    if snapshot_every_ms is not None:
        kw["snapshot_every_ms"] = float(snapshot_every_ms)
    if emi_sigma is not None:
        kw["emi_sigma_uS_per_um"] = emi_sigma
    if not kw:
        return cfg
    out = replace(cfg, **kw)
    validate(out)
    return out
