"""Experiment orchestration: SER, spectra, capacity and interference runs.

Every random quantity is drawn from a child of the master seed keyed by
``(stream, index)``, so results do not depend on the order or the number of
workers used to compute them.
"""

import csv
import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .allocator import (
    ConstraintSet,
    RateProblem,
    SolverOptions,
    solve,
    sweep_qn,
    tune_qn,
    uniform_alloc_mf,
    uniform_alloc_zf,
    uniform_interference_level,
)
from .channel import (
    apply_channel,
    channel_from_taps,
    draw_usable_channel,
    exponential_pdp,
    fde_equalize,
    make_rng,
    trial_seed,
)
from .config import GfdmConfig, dbm_to_watts, qam_decide, random_qam, watts_to_dbm
from .core import (
    add_cp,
    build_modulation_matrix,
    build_prototype_filter,
    build_receiver_matrix,
    demodulate,
    modulate,
    remove_cp,
)
from .errors import ConfigError, InvariantViolation
from .metrics import NoiseProfile, mf_kernel, ser_from_sinr, sinr_mf, snr_zf
from .spectrum import (
    AciGeometry,
    PuGainProfile,
    aci_coefficients,
    analytic_psd,
    draw_pu_gains,
    estimate_psd,
    synthesize_stream,
)

SCENARIOS = ("ser", "psd", "sweep-qn", "capacity", "interference")

# seed streams
_CHANNEL, _PU, _DATA, _ALPHA = 1, 2, 3, 4

DEEP_FADE_WARN_FRACTION = 0.10
INTERFERENCE_TOL_DB = 0.2


def parse_grid(text):
    """Parse ``start:step:stop`` (inclusive) or a comma-separated list."""
    text = str(text).strip()
    if not text:
        raise ConfigError("empty grid")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range grid must be start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step == 0 or (stop - start) / step < 0:
            raise ConfigError(f"range grid {text!r} is empty or unbounded")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(float(np.round(start + i * step, 12)) for i in range(n))
    return tuple(float(v) for v in text.split(","))


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_qn(text):
    low = str(text).strip().lower()
    if low == "auto":
        return None
    value = float(low)
    if not value > 0:
        raise ConfigError("qn must be positive or 'auto'")
    return value


def _parse_list(text):
    return tuple(p.strip().upper() for p in str(text).split(",") if p.strip())


# config key -> (attribute, parser)
_KEYS = {
    "subcarriers": ("subcarriers", int),
    "subsymbols": ("subsymbols", int),
    "rolloff": ("rolloff", float),
    "cp_len": ("cp_len", int),
    "qam_bits": ("qam_bits", int),
    "ts_us": ("ts_us", float),
    "filter": ("filter", str),
    "n0": ("n0", float),
    "channel": ("channel", str),
    "channel_taps": ("channel_taps", int),
    "pdp_normalize": ("pdp_normalize", _parse_bool),
    "alpha_max_dbm": ("alpha_max_dbm", float),
    "q_grid_dbm": ("q_grid_dbm", parse_grid),
    "q_dbm": ("q_dbm", float),
    "qn": ("qn", _parse_qn),
    "qn_grid": ("qn_grid", parse_grid),
    "realizations": ("realizations", int),
    "averaging": ("averaging", str),
    "receivers": ("receivers", _parse_list),
    "compare_ofdm": ("compare_ofdm", _parse_bool),
    "esn0_grid_db": ("esn0_grid_db", parse_grid),
    "channel_draws": ("channel_draws", int),
    "symbols_per_point": ("symbols_per_point", int),
    "psd_subsymbols": ("psd_subsymbols", lambda t: tuple(int(v) for v in parse_grid(t))),
    "psd_frames": ("psd_frames", int),
    "psd_nfft": ("psd_nfft", int),
    "oversample": ("oversample", int),
    "max_iterations": ("max_iterations", int),
    "eps": ("eps", float),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; key names follow the configuration file.

    ``averaging`` is ``"average"`` (``realizations`` independent channel and
    PU-gain draws) or ``"fixed"`` (a single draw).  ``qn = None`` selects the
    MF self-interference threshold automatically per problem.
    ``pdp_normalize`` scales the power-delay profile to unit sum (off by default).
    """

    scenario: str = "capacity"
    subcarriers: int = 64
    subsymbols: int = 5
    rolloff: float = 0.15
    cp_len: int = 10
    qam_bits: int = 4
    ts_us: float = 33.3
    filter: str = "raised-cosine"
    n0: float = 1.0
    channel: str = "rayleigh"
    channel_taps: int = 10
    pdp_normalize: bool = False
    alpha_max_dbm: float = 55.0
    q_grid_dbm: tuple = parse_grid("-20:5:35")
    q_dbm: float = 5.0
    qn: float = None
    qn_grid: tuple = parse_grid("0.01:0.01:0.5")
    realizations: int = 50
    averaging: str = "average"
    receivers: tuple = ("MF", "ZF")
    compare_ofdm: bool = True
    esn0_grid_db: tuple = parse_grid("0:3:39")
    channel_draws: int = 20
    symbols_per_point: int = 204_800
    psd_subsymbols: tuple = (1, 5, 15)
    psd_frames: int = 1000
    psd_nfft: int = 8192
    oversample: int = 8
    max_iterations: int = 50_000
    eps: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        for name in ("realizations", "channel_draws", "symbols_per_point", "psd_frames",
                     "psd_nfft", "oversample", "channel_taps", "max_iterations"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("q_grid_dbm", "qn_grid", "esn0_grid_db", "psd_subsymbols", "receivers"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(f"{name} must not be empty")
        if self.averaging not in ("average", "fixed"):
            raise ConfigError("averaging must be 'average' or 'fixed'")
        if self.channel not in ("rayleigh", "flat"):
            raise ConfigError("channel must be 'rayleigh' or 'flat'")
        if set(self.receivers) - {"MF", "ZF"}:
            raise ConfigError("receivers must be drawn from MF, ZF")
        if not self.n0 > 0:
            raise ConfigError("n0 must be positive")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.channel == "rayleigh" and self.channel_taps - 1 > self.cp_len:
            raise ConfigError("cp_len must cover the channel memory")
        if any(v <= 0 for v in self.qn_grid):
            raise ConfigError("qn_grid values must be positive")
        self.waveform()  # validates the waveform fields

    @classmethod
    def from_text(cls, text, scenario=None, seed=None):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key == "scenario":
                values["scenario"] = value
                continue
            if key == "seed":
                values["seed"] = int(value)
                continue
            if key not in _KEYS:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            attr, parser = _KEYS[key]
            try:
                values[attr] = parser(value)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if scenario is not None:
            values["scenario"] = scenario
        if seed is not None:
            values["seed"] = int(seed)
        return cls(**values)

    @classmethod
    def from_file(cls, path, scenario=None, seed=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), scenario, seed)

    def with_(self, **changes):
        return replace(self, **changes)

    def waveform(self, subsymbols=None) -> GfdmConfig:
        M = self.subsymbols if subsymbols is None else subsymbols
        return GfdmConfig(K=self.subcarriers, M=M, n_cp=self.cp_len, mu=self.qam_bits,
                          rolloff=self.rolloff, t_s=self.ts_us * 1e-6, filter_kind=self.filter)

    def ofdm(self) -> GfdmConfig:
        return GfdmConfig.ofdm(K=self.subcarriers, n_cp=self.cp_len, mu=self.qam_bits,
                               t_s=self.ts_us * 1e-6)

    @property
    def n_realizations(self):
        return 1 if self.averaging == "fixed" else self.realizations

    def canonical_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            elif v is None:
                v = "auto"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()

    def solver_options(self):
        return SolverOptions(max_iterations=self.max_iterations, eps=self.eps, record_trace=False)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass
class ResultTable:
    """Long-format table: one row per (series, sweep value, metric)."""

    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, *row):
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} fields, table has {len(self.columns)}")
        self.rows.append(tuple(row))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def select(self, **match):
        idx = {k: self.columns.index(k) for k in match}
        return [r for r in self.rows if all(r[i] == match[k] for k, i in idx.items())]

    def metrics(self):
        if "metric" not in self.columns:
            return []
        return sorted(set(self.column("metric")))

    def split(self):
        """One table per metric, dropping the metric column."""
        if "metric" not in self.columns:
            return {"result": self}
        i = self.columns.index("metric")
        cols = self.columns[:i] + self.columns[i + 1:]
        out = {}
        for name in self.metrics():
            t = ResultTable(cols, metadata=self.metadata)
            for r in self.rows:
                if r[i] == name:
                    t.rows.append(r[:i] + r[i + 1:])
            out[name] = t
        return out

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])


def _pmap(fn, items, threads):
    """Ordered map; results merge by index regardless of completion order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _metadata(cfg: ExperimentConfig, **extra):
    meta = {"config_sha256": cfg.digest(), "master_seed": cfg.seed, "version": __version__,
            "scenario": cfg.scenario}
    meta.update(extra)
    return meta


def _draw_link_channel(cfg: ExperimentConfig, n_fft, *index):
    """Channel for one realization; returns ``(channel, rejected_draws)``."""
    if cfg.channel == "flat":
        return channel_from_taps([1.0], n_fft), 0
    pdp = exponential_pdp(cfg.channel_taps, cfg.pdp_normalize)
    return draw_usable_channel(cfg.channel_taps, pdp, trial_seed(cfg.seed, _CHANNEL, *index), n_fft)


# --------------------------------------------------------------------------- SER


def _ser_series(cfg: ExperimentConfig):
    series = [(f"GFDM-{rx}", cfg.waveform(), rx) for rx in cfg.receivers]
    if cfg.compare_ofdm:
        series.append(("OFDM", cfg.ofdm(), "ZF"))
    return series


def simulate_ser_point(wave: GfdmConfig, receivers, channels, esn0_db, n_frames, seed):
    """Monte-Carlo and analytic SER at one ``E_s/N0`` with uniform unit power.

    The CP-extended frame is scaled by ``sqrt(R_T)`` so that the energy spent
    on the prefix comes out of the symbol energy; the detector knows this gain.  Returns a dict per receiver
    with per-channel error counts and analytic SER values.
    """
    K, N = wave.K, wave.N
    alphas = np.ones(K)
    es = wave.p_s * alphas.sum() / K
    n0 = es / 10.0 ** (esn0_db / 10.0)
    A = build_modulation_matrix(wave, build_prototype_filter(wave))
    Bs = {rx: build_receiver_matrix(A, rx) for rx in receivers}
    kernel = mf_kernel(wave) if "MF" in receivers else None
    out = {rx: {"errors": [], "symbols": [], "analytic": []} for rx in receivers}
    for c, ch in enumerate(channels):
        rng = make_rng(trial_seed(seed, c))
        s = random_qam(rng, wave.mu, (N, n_frames))
        x = np.sqrt(wave.rate_factor) * modulate(s, alphas, A)
        y = apply_channel(add_cp(x, wave.n_cp), ch, n0, wave.n_cp, rng)
        u = fde_equalize(remove_cp(y, wave.n_cp, N), ch)
        for rx in receivers:
            s_hat = demodulate(u, Bs[rx], alphas) / np.sqrt(wave.rate_factor)
            errs = np.count_nonzero(qam_decide(s_hat, wave.mu) != s, axis=0)
            noise = NoiseProfile.from_receiver(Bs[rx], K, wave.M, rx).base_terms(ch, n0)
            if rx == "MF":
                lm = sinr_mf(kernel, alphas, noise, wave.rate_factor, wave.mu)
            else:
                lm = snr_zf(alphas, noise, wave.rate_factor, wave.mu)
            out[rx]["errors"].append(errs)
            out[rx]["symbols"].append(N)
            out[rx]["analytic"].append(ser_from_sinr(lm.sinr, wave.mu))
    return out


def _stratified(errors, frame_len):
    """Mean of per-channel error rates and its standard error.

    Symbols of one frame share noise samples, so the variance of each
    channel's error rate is estimated from its per-frame error rates.
    """
    rates = [np.asarray(e, float) / n for e, n in zip(errors, frame_len)]
    est = float(np.mean([r.mean() for r in rates]))
    var = sum(r.var(ddof=1) / r.size for r in rates if r.size > 1)
    return est, float(np.sqrt(var) / len(rates))


def run_ser(cfg: ExperimentConfig, threads=1) -> ResultTable:
    table = ResultTable(("series", "esn0_db", "metric", "value", "std_err", "n"))
    draws = 1 if cfg.channel == "flat" else cfg.channel_draws
    rejected = 0
    jobs = []
    for si, (name, wave, rx) in enumerate(_ser_series(cfg)):
        chans = []
        for c in range(draws):
            ch, rej = _draw_link_channel(cfg, wave.N, si, c)
            chans.append(ch)
            rejected += rej
        n_frames = -(-cfg.symbols_per_point // (draws * wave.N))
        for pi, esn0 in enumerate(cfg.esn0_grid_db):
            jobs.append((name, wave, rx, chans, esn0, n_frames, trial_seed(cfg.seed, _DATA, si, pi)))

    def work(job):
        name, wave, rx, chans, esn0, n_frames, seed = job
        return simulate_ser_point(wave, (rx,), chans, esn0, n_frames, seed)[rx]

    for job, res in zip(jobs, _pmap(work, jobs, threads)):
        name, esn0 = job[0], job[4]
        est, se = _stratified(res["errors"], res["symbols"])
        n = int(sum(e.size * f for e, f in zip(res["errors"], res["symbols"])))
        table.add(name, esn0, "ser_simulated", est, se, n)
        table.add(name, esn0, "ser_analytic", float(np.mean(res["analytic"])), 0.0, len(res["analytic"]))
    total = len(_ser_series(cfg)) * draws
    meta_warn = []
    if rejected > DEEP_FADE_WARN_FRACTION * (total + rejected):
        msg = f"deep-fade rejection rate {rejected / (total + rejected):.1%} exceeds 10%"
        warnings.warn(msg)
        meta_warn.append(msg)
    table.metadata = _metadata(cfg, deep_fade_rejections=rejected, warnings=meta_warn)
    return table


# --------------------------------------------------------------------------- PSD


def psd_alphas(cfg: ExperimentConfig):
    """Random per-subcarrier powers shared by every waveform variant (mean 1)."""
    a = make_rng(trial_seed(cfg.seed, _ALPHA)).uniform(0.1, 1.0, cfg.subcarriers)
    return a / a.mean()


def psd_bands(wave: GfdmConfig):
    """Centres of unit-spacing bands covering the SU band and both adjacent channels."""
    K = wave.K
    j = np.arange(-3 * K // 2, 3 * K // 2)
    return (j + 0.5) / wave.t_s


def run_psd(cfg: ExperimentConfig, threads=1) -> ResultTable:
    """Welch estimate against the analytic PSD, averaged over ``1/t_s`` bands.

    Values are in dB relative to the analytic in-band peak of each variant.
    """
    alphas = psd_alphas(cfg)
    variants = []
    for M in cfg.psd_subsymbols:
        wave = cfg.ofdm() if M == 1 else cfg.waveform(M)
        variants.append(("OFDM" if M == 1 else f"GFDM-M{M}", wave))

    def work(item):
        vi, (name, wave) = item
        samples, fs = synthesize_stream(wave, alphas, cfg.psd_frames,
                                        trial_seed(cfg.seed, _DATA, vi), cfg.oversample)
        est = estimate_psd(samples, fs, nfft=cfg.psd_nfft)
        ana = analytic_psd(wave, alphas, est.freqs, cfg.oversample)
        centres = psd_bands(wave)
        width = 1.0 / wave.t_s
        ref = analytic_psd(wave, alphas, oversample=cfg.oversample).values.max()
        e = est.band_average(centres, width) / ref
        a = ana.band_average(centres, width) / ref
        adj = analytic_psd(wave, alphas, [wave.K / wave.t_s], cfg.oversample).values[0] / ref
        return name, centres, a, e, adj, samples.size

    table = ResultTable(("series", "freq_hz", "metric", "value", "std_err", "n"))
    for name, centres, a, e, adj, n in _pmap(work, list(enumerate(variants)), threads):
        for f, av, ev in zip(centres, a, e):
            table.add(name, f, "psd_analytic_db", float(10 * np.log10(av)), 0.0, 0)
            table.add(name, f, "psd_estimated_db", float(10 * np.log10(ev)), 0.0, n)
        table.add(name, variants[0][1].K / variants[0][1].t_s, "adjacent_center_db",
                  float(10 * np.log10(adj)), 0.0, 0)
    table.metadata = _metadata(cfg)
    return table


# --------------------------------------------------------------------------- capacity


@dataclass
class LinkSetup:
    """Per-realization problem data shared by every constraint level."""

    index: int
    problems: dict          # series -> RateProblem template (constraints replaced per Q)
    rejected: int


class _Models:
    """Channel-independent pieces, built once per experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.gfdm = cfg.waveform()
        self.ofdm_wave = cfg.ofdm()
        self.geometry = AciGeometry.build(self.gfdm, cfg.oversample)
        self.receivers = {rx: NoiseProfile.for_config(self.gfdm, rx) for rx in cfg.receivers}
        self.kernel = mf_kernel(self.gfdm) if "MF" in cfg.receivers else None
        if cfg.compare_ofdm:
            self.ofdm_geometry = AciGeometry.build(self.ofdm_wave, cfg.oversample)
            self.ofdm_noise = NoiseProfile.for_config(self.ofdm_wave, "ZF")

    def setup(self, r) -> LinkSetup:
        cfg = self.cfg
        g = self.gfdm
        ch, rejected = _draw_link_channel(cfg, g.N, r)
        if cfg.channel == "flat":
            gains = PuGainProfile.flat(g.K)
        else:
            pdp = exponential_pdp(cfg.channel_taps, cfg.pdp_normalize)
            gains = draw_pu_gains(pdp, trial_seed(cfg.seed, _PU, r), g.K)
        cons = ConstraintSet(float(dbm_to_watts(cfg.alpha_max_dbm)))
        problems = {}
        coeffs = aci_coefficients(g, gains, self.geometry)
        for rx, prof in self.receivers.items():
            problems[f"GFDM-{rx}"] = RateProblem(rx, prof.base_terms(ch, cfg.n0), coeffs, cons, g.p_s,
                                                 g.rate_factor, self.kernel if rx == "MF" else None)
        if cfg.compare_ofdm:
            o = self.ofdm_wave
            # the same multipath seen over one OFDM symbol
            och = channel_from_taps(ch.taps, o.N, ch.pdp)
            problems["OFDM"] = RateProblem("ZF", self.ofdm_noise.base_terms(och, cfg.n0),
                                           aci_coefficients(o, gains, self.ofdm_geometry), cons,
                                           o.p_s, o.rate_factor)
        return LinkSetup(r, problems, rejected)


@dataclass(frozen=True)
class CapacityRecord:
    """Outcome of one series at one constraint level for one realization."""

    realization: int
    series: str
    q_dbm: float
    allocation: str         # "nonuniform" or "uniform"
    rate: float
    sum_alpha: float
    p_r: float
    p_l: float
    gamma_right: float
    gamma_left: float
    qn: float
    converged: bool


def _uniform(problem: RateProblem):
    cons = problem.constraints
    if problem.receiver == "MF":
        q_u = uniform_interference_level(problem)
        return uniform_alloc_mf(problem.kernel, problem.coeffs,
                                ConstraintSet(cons.alpha_max, cons.q_r, cons.q_l, q_u if q_u > 0 else math.inf))
    return uniform_alloc_zf(problem.coeffs, cons)


def solve_link(problem: RateProblem, cfg: ExperimentConfig):
    """Non-uniform allocation of one problem; MF picks ``q_n`` unless it is fixed.

    Returns ``(result, qn)``.
    """
    opts = cfg.solver_options()
    if problem.receiver == "ZF":
        return solve(problem, opts), math.nan
    if cfg.qn is not None:
        cons = problem.constraints
        fixed = problem.with_constraints(ConstraintSet(cons.alpha_max, cons.q_r, cons.q_l, cfg.qn))
        return solve(fixed, opts), cfg.qn
    sweep = tune_qn(problem, opts)
    return sweep.best, sweep.best_qn


def capacity_records(cfg: ExperimentConfig, threads=1):
    """Solve uniform and non-uniform allocations for every realization and Q level."""
    models = _Models(cfg)
    a_max = float(dbm_to_watts(cfg.alpha_max_dbm))

    def work(r):
        link = models.setup(r)
        recs = []
        for q in cfg.q_grid_dbm:
            q_w = float(dbm_to_watts(q))
            for name, template in link.problems.items():
                problem = template.with_constraints(ConstraintSet(a_max, q_w, q_w))
                res, qn = solve_link(problem, cfg)
                recs.append(CapacityRecord(r, name, q, "nonuniform", res.rate, res.sum_alpha,
                                           res.p_r, res.p_l, float(res.multipliers[-2]),
                                           float(res.multipliers[-1]), qn, res.converged))
                u = _uniform(problem)
                s, pr, pl, _ = problem.realized(u)
                recs.append(CapacityRecord(r, name, q, "uniform", float(problem.true_rate(u)), s,
                                           pr, pl, math.nan, math.nan, math.nan, True))
        return recs, link.rejected

    out = _pmap(work, range(cfg.n_realizations), threads)
    records = [rec for recs, _ in out for rec in recs]
    rejected = sum(rej for _, rej in out)
    return records, rejected


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def _capacity_meta(cfg, records, rejected):
    unconverged = sum(1 for r in records if not r.converged)
    return _metadata(cfg, realizations=cfg.n_realizations, deep_fade_rejections=rejected,
                     unconverged_solves=unconverged)


def run_capacity(cfg: ExperimentConfig, threads=1, records=None) -> ResultTable:
    """Mean rate, allocated power and realized ACI per series and Q level."""
    if records is None:
        records, rejected = capacity_records(cfg, threads)
    else:
        rejected = 0
    table = ResultTable(("series", "q_dbm", "metric", "value", "std_err", "n"))
    keys = sorted({(r.series, r.allocation) for r in records})
    for series, alloc in keys:
        for q in cfg.q_grid_dbm:
            sel = [r for r in records if r.series == series and r.allocation == alloc and r.q_dbm == q]
            label = f"{series}/{alloc}"
            m, se = _mean_se([r.rate for r in sel])
            table.add(label, q, "rate", m, se, len(sel))
            m, se = _mean_se([r.sum_alpha for r in sel])
            table.add(label, q, "power_dbm", float(watts_to_dbm(m)), 0.0, len(sel))
            m, se = _mean_se([r.p_r for r in sel])
            table.add(label, q, "interference_right_dbm", float(watts_to_dbm(m)), 0.0, len(sel))
            m, se = _mean_se([r.p_l for r in sel])
            table.add(label, q, "interference_left_dbm", float(watts_to_dbm(m)), 0.0, len(sel))
            if alloc == "nonuniform" and series == "GFDM-MF":
                qn = [r.qn for r in sel]
                table.add(label, q, "qn", float(np.mean(qn)), 0.0, len(sel))
            if alloc == "nonuniform":
                table.add(label, q, "converged_fraction",
                          float(np.mean([r.converged for r in sel])), 0.0, len(sel))
    table.metadata = _capacity_meta(cfg, records, rejected)
    return table


def check_interference(records, tol_db=INTERFERENCE_TOL_DB):
    """Raise when any non-uniform solve exceeds its ACI limit by more than ``tol_db``."""
    bad = []
    for r in records:
        if r.allocation != "nonuniform":
            continue
        limit = float(dbm_to_watts(r.q_dbm + tol_db))
        if r.p_r > limit or r.p_l > limit:
            bad.append(r)
    if bad:
        r = bad[0]
        raise InvariantViolation(
            f"{len(bad)} solves exceed the interference limit; first: {r.series} at Q={r.q_dbm} dBm "
            f"realization {r.realization}: P_r={float(watts_to_dbm(r.p_r)):.3f} dBm"
        )


def run_interference(cfg: ExperimentConfig, threads=1, records=None) -> ResultTable:
    """Realized ACI power against the limit; fails hard on a violation."""
    if records is None:
        records, rejected = capacity_records(cfg, threads)
    else:
        rejected = 0
    check_interference(records)
    table = ResultTable(("series", "q_dbm", "metric", "value", "std_err", "n"))
    series = sorted({r.series for r in records})
    for name in series:
        for q in cfg.q_grid_dbm:
            sel = [r for r in records if r.series == name and r.allocation == "nonuniform" and r.q_dbm == q]
            pr = np.array([r.p_r for r in sel])
            pl = np.array([r.p_l for r in sel])
            table.add(name, q, "p_r_dbm", float(watts_to_dbm(pr.mean())), 0.0, len(sel))
            table.add(name, q, "p_l_dbm", float(watts_to_dbm(pl.mean())), 0.0, len(sel))
            table.add(name, q, "right_binding_fraction",
                      float(np.mean([r.gamma_right > 0 for r in sel])), 0.0, len(sel))
    table.metadata = _capacity_meta(cfg, records, rejected)
    return table


# --------------------------------------------------------------------------- Q_n sweep


def sweep_records(cfg: ExperimentConfig, threads=1):
    """Per-realization MF rate over ``cfg.qn_grid`` at ``Q_r = Q_l = cfg.q_dbm``.

    Returns an array of shape ``(realizations, len(qn_grid))`` (NaN marks a
    failed solve) and the deep-fade rejection count.
    """
    base = cfg.with_(receivers=("MF",), compare_ofdm=False)
    models = _Models(base)
    q_w = float(dbm_to_watts(cfg.q_dbm))
    cons = ConstraintSet(float(dbm_to_watts(cfg.alpha_max_dbm)), q_w, q_w, 1.0)

    def work(r):
        link = models.setup(r)
        problem = link.problems["GFDM-MF"].with_constraints(cons)
        return sweep_qn(problem, cfg.qn_grid, cfg.solver_options()).rates, link.rejected

    out = _pmap(work, range(cfg.n_realizations), threads)
    return np.array([rates for rates, _ in out]), sum(rej for _, rej in out)


def run_sweep_qn(cfg: ExperimentConfig, threads=1) -> ResultTable:
    rates, rejected = sweep_records(cfg, threads)
    table = ResultTable(("series", "qn", "metric", "value", "std_err", "n"))
    for j, qn in enumerate(cfg.qn_grid):
        col = rates[:, j]
        col = col[np.isfinite(col)]
        m, se = _mean_se(col) if col.size else (math.nan, math.nan)
        table.add("GFDM-MF", qn, "rate", m, se, int(col.size))
    best = np.nanargmax(rates, axis=1)
    for r, b in enumerate(best):
        table.add(f"realization-{r}", cfg.qn_grid[b], "best_qn", float(rates[r, b]), 0.0, 1)
    table.metadata = _metadata(cfg, realizations=cfg.n_realizations, deep_fade_rejections=rejected)
    return table


RUNNERS = {
    "ser": run_ser,
    "psd": run_psd,
    "sweep-qn": run_sweep_qn,
    "capacity": run_capacity,
    "interference": run_interference,
}


def run(cfg: ExperimentConfig, threads=1) -> ResultTable:
    return RUNNERS[cfg.scenario](cfg, threads=threads)
