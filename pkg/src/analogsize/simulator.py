"""Closed-form behavioral Op-Amp models evaluated across PVT corners.

Square-law devices with channel-length modulation stand in for a SPICE
simulator. Every model is a pure function of (parameters, corner) and is
vectorised over a batch of parameter vectors and over corners, so a batch
call is bit-identical to the equivalent sequence of single calls.

Units: widths enter in nm and are converted to um, capacitances are in pF,
currents in A, frequencies in Hz, phase margin in degrees, gain in dB.

Per-benchmark constants live in ``CONSTANTS``: mu in A/V^2 per square, L
in um, lam in 1/V, j0 in A per um of bias-device width, cj/cx/cff in pF per
um, vh in V. They were tuned with ``demos/calibrate_models.py`` so that a
log-uniform probe of the design grid meets a large share of randomly drawn
goals at all sixteen corners at once:

==============  ==================
benchmark       goals met by probe
==============  ==================
single_stage    ~80%
two_stage       ~94%
folded_cascode  ~74%
nmcf            ~48%
==============  ==================
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .circuits import Benchmark, CircuitGraph, PvtCorner, check_params
from .errors import ConfigError, EvaluationError

T_REF = 300.0
VTH0_N = 0.40
VTH0_P = 0.42
PROCESS_MOBILITY = {"fast": 1.10, "typical": 1.00, "slow": 0.90}
PROCESS_VTH = {"fast": -0.10, "typical": 0.0, "slow": +0.10}
MOBILITY_EXPONENT = -1.5
VTH_TEMPCO = -1e-3  # V/K

QUANTITIES = ("gain", "bandwidth", "phase_margin", "current", "power", "gbw")
_Q_INDEX = {q: i for i, q in enumerate(QUANTITIES)}


@dataclass(frozen=True)
class CornerModifiers:
    mobility_scale_n: float
    mobility_scale_p: float
    vth_shift_n: float
    vth_shift_p: float
    vdd: float
    temperature: float  # K

    def __post_init__(self):
        if self.mobility_scale_n <= 0 or self.mobility_scale_p <= 0:
            raise ValueError("mobility scale must be positive")


def corner_modifiers(corner: PvtCorner) -> CornerModifiers:
    t = corner.temperature + 273.15
    tfac = (t / T_REF) ** MOBILITY_EXPONENT
    drift = VTH_TEMPCO * (t - T_REF)
    return CornerModifiers(
        mobility_scale_n=PROCESS_MOBILITY[corner.process_n] * tfac,
        mobility_scale_p=PROCESS_MOBILITY[corner.process_p] * tfac,
        vth_shift_n=PROCESS_VTH[corner.process_n] * VTH0_N + drift,
        vth_shift_p=PROCESS_VTH[corner.process_p] * VTH0_P + drift,
        vdd=corner.vdd,
        temperature=t,
    )


@dataclass(frozen=True)
class SpecVector:
    """Specifications at one corner. ``values`` follows ``QUANTITIES``."""

    values: np.ndarray

    def __getattr__(self, name):
        if name in _Q_INDEX:
            return float(self.values[_Q_INDEX[name]])
        raise AttributeError(name)

    def as_dict(self) -> dict[str, float]:
        return {q: float(v) for q, v in zip(QUANTITIES, self.values)}


@dataclass(frozen=True)
class SpecMatrix:
    """Specifications for every corner: ``values[q, j]`` for quantity q, corner j."""

    values: np.ndarray
    corners: tuple[PvtCorner, ...] = ()

    @property
    def n_corners(self) -> int:
        return self.values.shape[1]

    def row(self, name: str) -> np.ndarray:
        return self.values[_Q_INDEX[name]]

    def select(self, names) -> np.ndarray:
        """Rows for the given quantities, shape (len(names), n_corners)."""
        return self.values[[_Q_INDEX[n] for n in names]]

    def column(self, j: int) -> SpecVector:
        return SpecVector(self.values[:, j].copy())


# --------------------------------------------------------------------------
# device helpers

def _gm(mu, w_over_l, current):
    return np.sqrt(2.0 * mu * w_over_l * current)


def _vov(mu, w_over_l, current):
    return np.sqrt(2.0 * current / (mu * w_over_l))


def _headroom(v, vh):
    """Smooth gain derating as the available voltage swing shrinks."""
    return 1.0 - np.exp(-np.maximum(v, 1e-3) / vh)


def _drain_cap(cj, w_um, fingers):
    # multi-finger layouts share drain diffusions
    return cj * w_um * (1.0 + 1.0 / fingers) / 2.0


def _pm(gbw, *poles):
    pm = 90.0
    for p in poles:
        pm = pm - np.degrees(np.arctan(gbw / p))
    return pm


def _outputs(gain, gbw, pm, current, vdd):
    # A stage that attenuates is reported as 0 dB and an unstable loop as
    # 0 degrees, so every reported spec stays non-negative.
    gain = np.maximum(gain, 1.0)
    return dict(gain=gain, gbw=gbw, bandwidth=gbw / gain, phase_margin=np.maximum(pm, 0.0),
                current=current, power=vdd * current)


CONSTANTS: dict[str, dict[str, float]] = {
    "two_stage": dict(mu_n=9.87e-4, mu_p=2.27e-4, L=0.2, lam=2.87, j0=1.3e-4, i_ref=1.74e-4,
                      cj=9.76e-4, vh=0.0674),
    "single_stage": dict(mu_n=3.0e-4, mu_p=1.2e-4, L=0.1, lam=2.0, j0=5.0e-6, i_ref=5.0e-6,
                         cj=2.0e-3, cx=4.0e-3, vh=0.12),
    "folded_cascode": dict(mu_n=6.0e-4, mu_p=4.0e-4, L=0.1, lam=4.0, j0n=8.0e-5, j0p=2.0e-5,
                           i_ref=1.0e-5, cj=1.0e-2, cx=5.0e-3, cff=0.05, r_top=2.0e3, vh=0.12),
    "nmcf": dict(mu_n=3.0e-4, mu_p=1.2e-4, L=0.1, lam=1.0, j0n=1.0e-4, j0p=3.0e-5,
                 cj=5.0e-3, vh=0.12, gm_scale=30.0),
}


# Each model maps per-device arrays (widths in um, finger counts, caps in pF)
# and per-corner modifier arrays to spec arrays. Arrays broadcast as
# (batch, 1) against (1, corners).

def _two_stage(d, m, k):
    """Miller-compensated two-stage amplifier.

    First stage: NMOS pair mn1 into PMOS mirror mp1, tail mn2. Second stage:
    PMOS common source mp2 with NMOS sink mn3. mn4 is the bias diode whose
    overdrive eats first-stage headroom.

        I1 = j0 W_mn2 mu_n,  I2 = j0 W_mn3 mu_n
        gain = gm1 (ro2 || ro4) * gm2 (ro6 || ro7) * h1 * h2
        GBW = gm1 / (2 pi Cc),  BW = GBW / gain
        PM = 90 - atan(GBW / p2),  p2 = gm2 / (2 pi (CL + Cdrain))
    """
    L, lam = k["L"], k["lam"]
    mun, mup = k["mu_n"] * m["mu_n"], k["mu_p"] * m["mu_p"]
    i1 = k["j0"] * d["mn2.w"] * m["mu_n"]
    i2 = k["j0"] * d["mn3.w"] * m["mu_n"]
    gm1 = _gm(mun, d["mn1.w"] / L, i1 / 2)
    gm2 = _gm(mup, d["mp2.w"] / L, i2)
    a1 = gm1 / (lam * i1)
    a2 = gm2 / (2 * lam * i2)
    vthn = VTH0_N + m["dvth_n"]
    vthp = VTH0_P + m["dvth_p"]
    h1 = _headroom(m["vdd"] - vthp - vthn - _vov(mup, d["mp1.w"] / L, i1 / 2)
                   - _vov(mun, d["mn4.w"] / L, k["i_ref"] * m["mu_n"]) + 0.6, k["vh"])
    h2 = _headroom(m["vdd"] - vthp - _vov(mup, d["mp2.w"] / L, i2), k["vh"])
    gain = a1 * a2 * h1 * h2
    cc = d["c.c"] * 1e-12
    gbw = gm1 / (2 * math.pi * cc)
    cout = (k["cl"] + _drain_cap(k["cj"], d["mp2.w"], d["mp2.nf"])
            + _drain_cap(k["cj"], d["mn3.w"], d["mn3.nf"])) * 1e-12
    p2 = gm2 / (2 * math.pi * cout)
    current = i1 + i2
    return _outputs(gain, gbw, _pm(gbw, p2), current, m["vdd"])


def _single_stage(d, m, k):
    """Telescopic cascode: NMOS pair mn1 with cascode mn2 and tail mn3; PMOS
    load mp1 with cascode mp2; mp3/mp4 are the load-side bias diodes.

        I = j0 W_mn3 mu_n,  Rout = (gm_mn2 ro^2) || (gm_mp2 ro^2)
        gain = gm1 Rout h,  BW = 1 / (2 pi Rout h Cout)
        PM = 90 - atan(GBW / p_casc),  p_casc = gm_mn2 / (2 pi Cx)
    """
    L, lam = k["L"], k["lam"]
    mun, mup = k["mu_n"] * m["mu_n"], k["mu_p"] * m["mu_p"]
    i = k["j0"] * d["mn3.w"] * m["mu_n"]
    ib = i / 2
    gm1 = _gm(mun, d["mn1.w"] / L, ib)
    gmcn = _gm(mun, d["mn2.w"] / L, ib)
    gmcp = _gm(mup, d["mp2.w"] / L, ib)
    ro = 1.0 / (lam * ib)
    rn = gmcn * ro * ro
    rp = gmcp * ro * ro
    rout = rn * rp / (rn + rp)
    vthn = VTH0_N + m["dvth_n"]
    vthp = VTH0_P + m["dvth_p"]
    iref = k["i_ref"] * m["mu_p"]
    swing = (m["vdd"] + 0.9 - vthn - vthp
             - _vov(mup, d["mp1.w"] / L, ib) - _vov(mup, d["mp2.w"] / L, ib)
             - _vov(mun, d["mn2.w"] / L, ib)
             - 0.5 * _vov(mup, d["mp3.w"] / L, iref) - 0.5 * _vov(mup, d["mp4.w"] / L, iref))
    h = _headroom(swing, k["vh"])
    gain = gm1 * rout * h
    cout = (k["cl"] + _drain_cap(k["cj"], d["mn2.w"], d["mn2.nf"])
            + _drain_cap(k["cj"], d["mp2.w"], d["mp2.nf"])) * 1e-12
    gbw = gm1 / (2 * math.pi * cout)
    cx = k["cx"] * (d["mn1.w"] / d["mn1.nf"] ** 0.5 + d["mn2.w"]) * 1e-12
    p_casc = gmcn / (2 * math.pi * cx)
    return _outputs(gain, gbw, _pm(gbw, p_casc), i, m["vdd"])


def _folded_cascode(d, m, k):
    """Folded cascode: PMOS pair mp1 with tail mp2 folds into NMOS sinks mn1
    and cascode mn2; mn3 is the bias diode; c loads the output.

        It = j0p W_mp2 mu_p,  Io = j0n W_mn1 mu_n (per output branch)
        gain = gm1 Rout h,  Rout = (gm_mn2 ro_n ro_f) || (r_top / Io)
        PM = 90 - atan(GBW / p_fold) + atan(GBW / z),  p_fold = gm_mn2 / (2 pi Cfold)
        z = gm1 / (2 pi Cff),  Cff = cff W_mp1, so GBW / z = Cff / Cout
    """
    L, lam = k["L"], k["lam"]
    mun, mup = k["mu_n"] * m["mu_n"], k["mu_p"] * m["mu_p"]
    it = k["j0p"] * d["mp2.w"] * m["mu_p"]
    io = k["j0n"] * d["mn1.w"] * m["mu_n"]
    gm1 = _gm(mup, d["mp1.w"] / L, it / 2)
    gmc = _gm(mun, d["mn2.w"] / L, io)
    rf = 1.0 / (lam * (io + it / 2))
    rn = gmc * (1.0 / (lam * io)) * rf
    rtop = k["r_top"] / (lam * io)
    rout = rn * rtop / (rn + rtop)
    vthn = VTH0_N + m["dvth_n"]
    swing = (m["vdd"] + 0.4 - vthn - _vov(mun, d["mn1.w"] / L, io + it / 2)
             - _vov(mun, d["mn2.w"] / L, io) - 0.5 * _vov(mun, d["mn3.w"] / L, k["i_ref"] * m["mu_n"]))
    h = _headroom(swing, k["vh"])
    gain = gm1 * rout * h
    cout = (k["cl"] + d["c.c"] + _drain_cap(k["cj"], d["mn2.w"], d["mn2.nf"])) * 1e-12
    gbw = gm1 / (2 * math.pi * cout)
    cfold = k["cx"] * (d["mn1.w"] + d["mn2.w"] + 0.2 * d["mp1.w"] / d["mp1.nf"] ** 0.5) * 1e-12
    p_fold = gmc / (2 * math.pi * cfold)
    # feedforward through the pair's gate-drain overlap: LHP zero at gm1 / Cff
    lead = np.degrees(np.arctan(k["cff"] * d["mp1.w"] / (cout * 1e12)))
    current = it + 2 * io
    return _outputs(gain, gbw, _pm(gbw, p_fold) + lead, current, m["vdd"])


def _nmcf(d, m, k):
    """Three-stage nested-Miller amplifier with feedforward stage.

    Stage 1: PMOS pair mp1, tail mp2, NMOS load mn1. Stage 2: mn2 with PMOS
    source mp3. Stage 3: PMOS mp4 with NMOS sink mn3, feedforward mn4
    adding to the output transconductance. c1/c2 are the outer/inner Miller
    capacitors.

        gain = A1 A2 A3 h,  GBW = gm1 / (2 pi c1),  BW = GBW / gain
        PM = 90 - atan(GBW / p2) - atan(GBW / p3)
        p2 = gm2 / (2 pi c2),  p3 = (gm3 + gmf) / (2 pi CL)
    """
    L, lam, s = k["L"], k["lam"], k["gm_scale"]
    mun, mup = k["mu_n"] * m["mu_n"], k["mu_p"] * m["mu_p"]
    i1 = k["j0p"] * d["mp2.w"] * m["mu_p"]
    i2 = k["j0p"] * d["mp3.w"] * m["mu_p"]
    i3 = k["j0n"] * d["mn3.w"] * m["mu_n"]
    gm1 = _gm(mup, d["mp1.w"] / L, i1 / 2)
    gm2 = _gm(mun, d["mn2.w"] / L, i2)
    gm3 = _gm(mup, d["mp4.w"] / L, i3)
    gmf = _gm(mun, d["mn4.w"] / L, i3 / 4)
    a1 = gm1 / (lam * i1)
    a2 = gm2 / (2 * lam * i2)
    a3 = (gm3 + gmf) / (2 * lam * i3)
    vthn = VTH0_N + m["dvth_n"]
    vthp = VTH0_P + m["dvth_p"]
    h = (_headroom(m["vdd"] + 0.2 - vthn - _vov(mun, d["mn1.w"] / L, i1 / 2) - _vov(mup, d["mp3.w"] / L, i2), k["vh"])
         * _headroom(m["vdd"] + 0.2 - vthp - _vov(mup, d["mp4.w"] / L, i3), k["vh"]))
    gain = a1 * a2 * a3 * h
    gbw = s * gm1 / (2 * math.pi * d["c1.c"] * 1e-12)
    p2 = s * gm2 / (2 * math.pi * d["c2.c"] * 1e-12)
    cout = (k["cl"] + _drain_cap(k["cj"], d["mp4.w"], d["mp4.nf"])) * 1e-12
    p3 = s * (gm3 + gmf) / (2 * math.pi * cout)
    current = i1 + i2 + i3
    return _outputs(gain, gbw, _pm(gbw, p2, p3), current, m["vdd"])


MODELS = {
    "two_stage": _two_stage,
    "single_stage": _single_stage,
    "folded_cascode": _folded_cascode,
    "nmcf": _nmcf,
}


# --------------------------------------------------------------------------
# public evaluation API

def _model_key(circuit) -> str:
    if isinstance(circuit, Benchmark):
        return circuit.model
    if isinstance(circuit, CircuitGraph):
        return circuit.name
    return str(circuit)


def _graph_of(circuit) -> CircuitGraph:
    return circuit.graph if isinstance(circuit, Benchmark) else circuit


def _modifier_arrays(corners) -> dict[str, np.ndarray]:
    mods = [corner_modifiers(c) for c in corners]
    return {
        "mu_n": np.array([[x.mobility_scale_n for x in mods]]),
        "mu_p": np.array([[x.mobility_scale_p for x in mods]]),
        "dvth_n": np.array([[x.vth_shift_n for x in mods]]),
        "dvth_p": np.array([[x.vth_shift_p for x in mods]]),
        "vdd": np.array([[x.vdd for x in mods]]),
    }


def _device_arrays(graph: CircuitGraph, x: np.ndarray) -> dict[str, np.ndarray]:
    d = {}
    for i, name in enumerate(graph.param_names):
        col = x[:, i:i + 1]
        d[name] = col * 1e-3 if name.endswith(".w") else col
    return d


def evaluate_batch(circuit, X, corners) -> np.ndarray:
    """Evaluate a (B, M) batch of parameter vectors at every corner.

    Returns an array of shape (B, len(QUANTITIES), n_corners). Inputs are
    not grid-checked; use :func:`evaluate_all_corners` for validated calls.
    """
    graph = _graph_of(circuit)
    key = _model_key(circuit)
    if key not in MODELS:
        raise ConfigError(f"no behavioral model named {key!r}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    k = dict(CONSTANTS[key])
    k["cl"] = _load_cap(graph)
    with np.errstate(all="ignore"):
        out = MODELS[key](_device_arrays(graph, X), _modifier_arrays(corners), k)
    res = np.stack([np.broadcast_to(out[q], (X.shape[0], len(corners))) for q in QUANTITIES], axis=1)
    res[:, 0] = 20.0 * np.log10(res[:, 0])
    if not np.all(np.isfinite(res)):
        _raise_nonfinite(graph, X, res, corners)
    return res


def _load_cap(graph: CircuitGraph) -> float:
    for dnode in graph.nodes:
        if dnode.fixed_value is not None:
            return float(dnode.fixed_value)
    raise ConfigError(f"{graph.name}: behavioral models need a fixed load capacitor")


def _raise_nonfinite(graph, X, res, corners):
    b, q, j = np.argwhere(~np.isfinite(res))[0]
    node = None
    names = graph.param_names
    for i, v in enumerate(X[b]):
        if not np.isfinite(v) or v <= 0:
            node = names[i].split(".")[0]
            break
    raise EvaluationError(
        f"non-finite {QUANTITIES[q]} at corner {corners[j].label}"
        + (f" (node {node})" if node else ""),
        node=node, corner=int(j),
    )


def evaluate(circuit, params, corner: PvtCorner) -> SpecVector:
    """Specifications of one parameter vector at one corner."""
    x = check_params(_graph_of(circuit), params)
    return SpecVector(evaluate_batch(circuit, x[None, :], (corner,))[0, :, 0])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ANALOGSIZE_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_all_corners(circuit, params, corners) -> SpecMatrix:
    """Specifications at every corner; column j belongs to ``corners[j]``.

    With ``ANALOGSIZE_THREADS`` > 1 the corners are split into chunks that
    are evaluated on a thread pool and re-assembled in corner order.
    """
    x = check_params(_graph_of(circuit), params)
    corners = tuple(corners)
    n = _threads()
    if n == 1 or len(corners) < 2:
        vals = evaluate_batch(circuit, x[None, :], corners)[0]
    else:
        chunks = [corners[i::n] for i in range(n) if corners[i::n]]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(lambda c: evaluate_batch(circuit, x[None, :], c)[0], chunks))
        vals = np.empty((len(QUANTITIES), len(corners)))
        for i, part in enumerate(parts):
            vals[:, i::n] = part
    return SpecMatrix(vals, corners)


# --------------------------------------------------------------------------
# synthetic layout parasitics

@dataclass(frozen=True)
class ParasiticModel:
    """Deterministic post-layout degradation.

    Maximize-direction specs shrink by ``1 - beta * load`` and current/power
    grow by ``1 + beta_power * load``, where ``load`` is the mean normalized
    transistor width scaled by ``load_scale`` and clipped to [0, 1].
    """

    beta: dict = field(default_factory=lambda: {"gain": 0.02, "bandwidth": 0.10, "phase_margin": 0.05})
    beta_power: float = 0.10
    load_scale: float = 1.0

    def __post_init__(self):
        for name, b in list(self.beta.items()) + [("power", self.beta_power)]:
            if not 0.0 <= b <= 0.15:
                raise ConfigError(f"parasitic beta for {name} must lie in [0, 0.15], got {b}")

    def load(self, graph: CircuitGraph, params) -> float:
        x = np.asarray(params, dtype=float)
        idx = [i for i, n in enumerate(graph.param_names) if n.endswith(".w")]
        if not idx:
            return 0.0
        lo, hi = graph.lower()[idx], graph.upper()[idx]
        frac = float(np.mean((x[idx] - lo) / (hi - lo)))
        return min(max(self.load_scale * frac, 0.0), 1.0)

    def factors(self, graph: CircuitGraph, params) -> dict[str, float]:
        """Multiplicative factor applied to each quantity."""
        ld = self.load(graph, params)
        f = {q: 1.0 for q in QUANTITIES}
        for q, b in self.beta.items():
            f[q] = 1.0 - b * ld
        f["gbw"] = f["bandwidth"]
        f["power"] = f["current"] = 1.0 + self.beta_power * ld
        return f


def apply_parasitics(model: ParasiticModel, graph, params, spec):
    """Degrade a SpecVector or SpecMatrix by the synthetic parasitic transform."""
    graph = _graph_of(graph)
    f = model.factors(graph, params)
    scale = np.array([f[q] for q in QUANTITIES])
    if isinstance(spec, SpecMatrix):
        return SpecMatrix(spec.values * scale[:, None], spec.corners)
    return SpecVector(spec.values * scale)
