"""TOML scenario files: load to ScenarioConfig, dump back deterministically.

Every dimensioned key carries its unit in the name (dt_ms, box_um,
g_syn_mS_per_cm2, ...). ``loads(dumps(cfg))`` returns an equal config;
run manifests rely on that to echo the exact configuration they ran.
The emitter is deliberately minimal: it covers the scenario schema only,
writing keys in schema order with round-trippable number formatting.
"""

import tomli

from .errors import ConfigurationError
from .scenarios import (
    CellRegion,
    MembraneConfig,
    ProbeConfig,
    ScenarioConfig,
    SpeciesRow,
    StimulusConfig,
    validate,
)


def load_file(path):
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
    return from_dict(doc)


def loads(text):
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from exc
    return from_dict(doc)


def _pairs(value, ctx):
    try:
        return tuple((float(lo), float(hi)) for lo, hi in value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"{ctx} must be a list of [lo, hi] pairs") from None


_REQUIRED = object()


def _take(doc, key, ctx, default=_REQUIRED):
    if key in doc:
        return doc.pop(key)
    if default is _REQUIRED:
        raise ConfigurationError(f"missing key {key!r} in {ctx}")
    return default


def _no_extras(doc, ctx):
    if doc:
        raise ConfigurationError(
            f"unknown keys in {ctx}: {', '.join(sorted(doc))}")


def from_dict(doc):
    doc = dict(doc)
    name = str(_take(doc, "name", "config"))
    dimension = int(_take(doc, "dimension", "config"))

    domain = dict(_take(doc, "domain", "config"))
    domain_um = _pairs(_take(domain, "box_um", "[domain]"), "domain.box_um")
    resolution = tuple(int(r) for r in _take(domain, "resolution", "[domain]"))
    _no_extras(domain, "[domain]")

    cells = []
    for raw in _take(doc, "cell", "config", default=[]):
        raw = dict(raw)
        cells.append(CellRegion(
            label=int(_take(raw, "label", "[[cell]]")),
            box_um=_pairs(_take(raw, "box_um", "[[cell]]"), "cell.box_um")))
        _no_extras(raw, "[[cell]]")

    species = []
    for raw in _take(doc, "species", "config", default=[]):
        raw = dict(raw)
        species.append(SpeciesRow(
            name=str(_take(raw, "name", "[[species]]")),
            z=int(_take(raw, "z", "[[species]]")),
            D_um2_per_ms=float(_take(raw, "D_um2_per_ms", "[[species]]")),
            init_i_mM=float(_take(raw, "init_i_mM", "[[species]]")),
            init_e_mM=float(_take(raw, "init_e_mM", "[[species]]"))))
        _no_extras(raw, "[[species]]")

    memb = dict(_take(doc, "membrane", "config"))
    model = str(_take(memb, "model", "[membrane]"))
    g_leak = memb.pop("g_leak_mS_per_cm2", None)
    g_bar = memb.pop("g_bar_mS_per_cm2", None)
    gating = memb.pop("gating_init", None)
    _no_extras(memb, "[membrane]")
    membrane = MembraneConfig(
        model=model,
        g_leak_mS_per_cm2=None if g_leak is None
        else {str(k): float(v) for k, v in g_leak.items()},
        g_bar_mS_per_cm2=None if g_bar is None
        else {str(k): float(v) for k, v in g_bar.items()},
        gating_init=None if gating is None
        else tuple(float(v) for v in gating))

    stim = None
    if "stimulus" in doc:
        raw = dict(doc.pop("stimulus"))
        window = raw.pop("window_x_um", None)
        labels = raw.pop("labels", None)
        stim = StimulusConfig(
            g_syn_mS_per_cm2=float(_take(raw, "g_syn_mS_per_cm2",
                                         "[stimulus]")),
            alpha_ms=float(_take(raw, "alpha_ms", "[stimulus]")),
            onsets_ms=tuple(float(t) for t in _take(raw, "onsets_ms",
                                                    "[stimulus]")),
            window_x_um=None if window is None
            else (float(window[0]), float(window[1])),
            labels=None if labels is None
            else tuple(int(v) for v in labels))
        _no_extras(raw, "[stimulus]")

    probes = []
    for raw in _take(doc, "probe", "config", default=[]):
        raw = dict(raw)
        probes.append(ProbeConfig(
            id=str(_take(raw, "id", "[[probe]]")),
            point_um=tuple(float(v) for v in _take(raw, "point_um",
                                                   "[[probe]]")),
            fields=tuple(str(f) for f in _take(raw, "fields", "[[probe]]"))))
        _no_extras(raw, "[[probe]]")

    sigma = doc.pop("emi_sigma_uS_per_um", None)
    if isinstance(sigma, (list, tuple)):
        sigma = (float(sigma[0]), float(sigma[1])) if len(sigma) == 2 \
            else tuple(float(v) for v in sigma)

    cfg = ScenarioConfig(
        name=name, dimension=dimension, domain_um=domain_um,
        resolution=resolution, cells=tuple(cells), species=tuple(species),
        membrane=membrane,
        boundary=str(_take(doc, "boundary", "config")),
        dt_ms=float(_take(doc, "dt_ms", "config")),
        end_ms=float(_take(doc, "end_ms", "config")),
        phi_m0_mV=float(_take(doc, "phi_m0_mV", "config")),
        stimulus=stim, probes=tuple(probes),
        snapshot_every_ms=float(doc.pop("snapshot_every_ms", 0.0)),
        emi_sigma_uS_per_um=sigma,
        verification=bool(doc.pop("verification", False)),
        note=str(doc.pop("note", "")))
    _no_extras(doc, "config")
    return validate(cfg)


# -- emitter ---------------------------------------------------------------

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v or v in (float("inf"), float("-inf")):
            raise ConfigurationError("non-finite number in config")
        text = repr(v)
        # TOML floats need a fractional part or an exponent
        return text if ("." in text or "e" in text or "E" in text) \
            else text + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise ConfigurationError(f"cannot write {type(v).__name__} to TOML")


def _kv(lines, key, value):
    lines.append(f"{key} = {_fmt(value)}")


def dumps(cfg):
    """ScenarioConfig -> TOML text; loads(dumps(cfg)) == cfg."""
    validate(cfg)
    lines = []
    _kv(lines, "name", cfg.name)
    _kv(lines, "dimension", cfg.dimension)
    _kv(lines, "boundary", cfg.boundary)
    _kv(lines, "dt_ms", float(cfg.dt_ms))
    _kv(lines, "end_ms", float(cfg.end_ms))
    _kv(lines, "phi_m0_mV", float(cfg.phi_m0_mV))
    if cfg.snapshot_every_ms:
        _kv(lines, "snapshot_every_ms", float(cfg.snapshot_every_ms))
    if cfg.emi_sigma_uS_per_um is not None:
        sig = cfg.emi_sigma_uS_per_um
        _kv(lines, "emi_sigma_uS_per_um",
            sig if isinstance(sig, str) else [float(v) for v in sig])
    if cfg.verification:
        _kv(lines, "verification", True)
    if cfg.note:
        _kv(lines, "note", cfg.note)

    lines += ["", "[domain]"]
    _kv(lines, "box_um", [[float(lo), float(hi)] for lo, hi in cfg.domain_um])
    _kv(lines, "resolution", [int(r) for r in cfg.resolution])

    for c in cfg.cells:
        lines += ["", "[[cell]]"]
        _kv(lines, "label", int(c.label))
        _kv(lines, "box_um", [[float(lo), float(hi)] for lo, hi in c.box_um])

    for s in cfg.species:
        lines += ["", "[[species]]"]
        _kv(lines, "name", s.name)
        _kv(lines, "z", int(s.z))
        _kv(lines, "D_um2_per_ms", float(s.D_um2_per_ms))
        _kv(lines, "init_i_mM", float(s.init_i_mM))
        _kv(lines, "init_e_mM", float(s.init_e_mM))

    lines += ["", "[membrane]"]
    _kv(lines, "model", cfg.membrane.model)
    if cfg.membrane.gating_init is not None:
        _kv(lines, "gating_init", [float(v) for v in cfg.membrane.gating_init])
    for key in ("g_leak_mS_per_cm2", "g_bar_mS_per_cm2"):
        table = getattr(cfg.membrane, key)
        if table is not None:
            lines += ["", f"[membrane.{key}]"]
            for k, v in table.items():
                _kv(lines, k, float(v))

    if cfg.stimulus is not None:
        st = cfg.stimulus
        lines += ["", "[stimulus]"]
        _kv(lines, "g_syn_mS_per_cm2", float(st.g_syn_mS_per_cm2))
        _kv(lines, "alpha_ms", float(st.alpha_ms))
        _kv(lines, "onsets_ms", [float(t) for t in st.onsets_ms])
        if st.window_x_um is not None:
            _kv(lines, "window_x_um", [float(v) for v in st.window_x_um])
        if st.labels is not None:
            _kv(lines, "labels", [int(v) for v in st.labels])

    for p in cfg.probes:
        lines += ["", "[[probe]]"]
        _kv(lines, "id", p.id)
        _kv(lines, "point_um", [float(v) for v in p.point_um])
        _kv(lines, "fields", list(p.fields))

    return "\n".join(lines) + "\n"


def dump_file(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
