"""End-to-end acceptance checks, one test per criterion.

Each test records a ``CRITERION n: PASS|FAIL`` line that is echoed live and
again in the terminal summary.  Expensive capacity results are computed once
and shared.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from gfdmcr.allocator import ConstraintSet, RateProblem, oracle_grid_search, solve, tune_qn
from gfdmcr.channel import draw_usable_channel, exponential_pdp
from gfdmcr.cli import write_outputs
from gfdmcr.config import GfdmConfig, dbm_to_watts, random_qam, watts_to_dbm
from gfdmcr.core import build_modulation_matrix, build_prototype_filter, build_receiver_matrix, demodulate, modulate
from gfdmcr.harness import ExperimentConfig, capacity_records, run, run_psd, run_ser, sweep_records
from gfdmcr.metrics import InterferenceKernel, NoiseProfile, mf_interference_variance, mf_kernel
from gfdmcr.spectrum import AciGeometry, aci_coefficients, draw_pu_gains

pytestmark = pytest.mark.slow

REPORT = {}


@pytest.fixture
def report(request, capsys):
    """Record and echo the verdict line for the criterion named by the test."""
    number = int(request.node.name.split("_")[1])

    def emit(passed, detail):
        line = f"CRITERION {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        REPORT[number] = line
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def _square_qam_ser(snr, order=16):
    q = norm.sf(np.sqrt(3.0 * snr / (order - 1)))
    p = 2 * (1 - 1 / np.sqrt(order)) * q
    return 1 - (1 - p) ** 2


@pytest.fixture(scope="module")
def capacity():
    cfg = ExperimentConfig(scenario="capacity")
    start = time.perf_counter()
    records, _ = capacity_records(cfg)
    return cfg, records, time.perf_counter() - start


def _mean_rate(records, series, q, allocation="nonuniform"):
    return float(np.mean([r.rate for r in records
                          if r.series == series and r.q_dbm == q and r.allocation == allocation]))


def test_01_ser_theory_matches_simulation(report):
    cfg = ExperimentConfig(scenario="ser")
    start = time.perf_counter()
    table = run_ser(cfg)
    elapsed = time.perf_counter() - start
    worst = {}
    failures = []
    for series in ("GFDM-MF", "GFDM-ZF"):
        sim = {r[1]: r for r in table.select(series=series, metric="ser_simulated")}
        for row in table.select(series=series, metric="ser_analytic"):
            esn0, ana = row[1], row[3]
            if not 1e-3 <= ana <= 1e-1:
                continue
            z = (sim[esn0][3] - ana) / sim[esn0][4]
            worst[series] = max(worst.get(series, 0.0), abs(z))
            if abs(z) > 3:
                failures.append(f"{series}@{esn0:g}dB z={z:+.1f}")
    ok = not failures and elapsed <= 600
    detail = (f"max |z| MF={worst['GFDM-MF']:.1f} ZF={worst['GFDM-ZF']:.1f}, {elapsed:.0f}s"
              + (f"; outside 3 sigma: {', '.join(failures)}" if failures else ""))
    assert report(ok, detail), detail


def test_02_ofdm_flat_channel_textbook_ser(report):
    cfg = ExperimentConfig(scenario="ser", channel="flat", receivers=("ZF",), esn0_grid_db=tuple(range(0, 22, 2)))
    table = run_ser(cfg)
    rate_factor = cfg.ofdm().rate_factor
    zs = []
    for row in table.select(series="OFDM", metric="ser_simulated"):
        esn0, value, se = row[1], row[3], row[4]
        # the prefix energy is taken from the symbols, so the effective SNR is R_T Es/N0
        ref = _square_qam_ser(rate_factor * 10 ** (esn0 / 10))
        if ref < 1e-4:
            continue
        zs.append((esn0, (value - ref) / se))
    worst = max(abs(z) for _, z in zs)
    ok = worst <= 3
    detail = f"{len(zs)} points, max |z|={worst:.2f}"
    assert report(ok, detail), detail


def test_03_psd_estimate_and_leakage_ordering(report):
    cfg = ExperimentConfig(scenario="psd")
    start = time.perf_counter()
    table = run_psd(cfg)
    elapsed = time.perf_counter() - start
    half_band = cfg.subcarriers / 2 / (cfg.ts_us * 1e-6)
    worst_in, worst_out = 0.0, 0.0
    for series in ("OFDM", "GFDM-M5", "GFDM-M15"):
        ana = table.select(series=series, metric="psd_analytic_db")
        est = table.select(series=series, metric="psd_estimated_db")
        for a, e in zip(ana, est):
            diff = abs(a[3] - e[3])
            if abs(a[1]) < half_band:
                worst_in = max(worst_in, diff)
            elif a[3] >= -50:
                worst_out = max(worst_out, diff)
    adj = {r[0]: r[3] for r in table.select(metric="adjacent_center_db")}
    gap1 = adj["OFDM"] - adj["GFDM-M5"]
    gap2 = adj["GFDM-M5"] - adj["GFDM-M15"]
    ok = worst_in <= 1 and worst_out <= 3 and gap1 >= 3 and gap2 >= 3 and elapsed <= 300
    detail = (f"in-band {worst_in:.2f} dB, out-of-band {worst_out:.2f} dB, adjacent centre "
              f"OFDM {adj['OFDM']:.1f} / M5 {adj['GFDM-M5']:.1f} / M15 {adj['GFDM-M15']:.1f} dB, {elapsed:.0f}s")
    assert report(ok, detail), detail


def test_04_self_interference_variance(report):
    cfg = GfdmConfig(K=8, M=3)
    rng = np.random.default_rng(4)
    A = build_modulation_matrix(cfg, build_prototype_filter(cfg))
    B = build_receiver_matrix(A, "MF")
    alphas = rng.uniform(0.2, 2.0, cfg.K)
    frames = 10_000
    s = random_qam(rng, cfg.mu, (cfg.N, frames))
    err = np.abs(demodulate(modulate(s, alphas, A), B, alphas) - s) ** 2
    measured = err.mean(axis=1).reshape(cfg.M, cfg.K)
    kern = mf_kernel(cfg)
    expected = np.array([[mf_interference_variance(kern, alphas, k, m) for k in range(cfg.K)]
                         for m in range(cfg.M)])
    per_subcarrier = np.abs(measured.mean(axis=0) / expected.mean(axis=0) - 1)
    overall = abs(measured.mean() / expected.mean() - 1)
    ok = per_subcarrier.max() <= 0.03
    detail = (f"worst subcarrier {100 * per_subcarrier.max():.2f}%, all symbols {100 * overall:.2f}%, "
              f"worst single symbol {100 * np.abs(measured / expected - 1).max():.2f}%")
    assert report(ok, detail), detail


def test_05_optimizer_matches_grid_oracle(report):
    cfg = GfdmConfig(K=4, M=3)
    pdp = exponential_pdp(10)
    geometry = AciGeometry.build(cfg)
    kernel = mf_kernel(cfg)
    a_max = float(dbm_to_watts(30))
    start = time.perf_counter()
    gaps, below = [], []
    for d in range(5):
        ch, _ = draw_usable_channel(10, pdp, 100 + d, cfg.N)
        coeffs = aci_coefficients(cfg, draw_pu_gains(pdp, 200 + d, cfg.K), geometry)
        flat = (a_max / cfg.K * coeffs.t_right.sum(), a_max / cfg.K * coeffs.t_left.sum())
        for regime, frac in (("tight", 0.5), ("slack", 1e4), ("very tight", 0.05)):
            cons = ConstraintSet(a_max, frac * flat[0], frac * flat[1])
            zf = RateProblem("ZF", NoiseProfile.for_config(cfg, "ZF").base_terms(ch, 1.0), coeffs, cons,
                             cfg.p_s, cfg.rate_factor)
            mf = RateProblem("MF", NoiseProfile.for_config(cfg, "MF").base_terms(ch, 1.0), coeffs, cons,
                             cfg.p_s, cfg.rate_factor, kernel)
            got = {"ZF": solve(zf).rate, "MF": tune_qn(mf).best.rate}
            ref = {"ZF": oracle_grid_search(zf).rate, "MF": oracle_grid_search(mf).rate}
            for rx in ("ZF", "MF"):
                rel = got[rx] / ref[rx] - 1
                if regime == "very tight":
                    # the grid step is coarser than the optimum here; only a one-sided check applies
                    if rel < -0.02:
                        below.append((d, regime, rx, rel))
                else:
                    gaps.append(abs(rel))
                    if rel < -0.02:
                        below.append((d, regime, rx, rel))
    elapsed = time.perf_counter() - start
    ok = max(gaps) <= 0.02 and not below and elapsed <= 300
    detail = f"max |gap| {100 * max(gaps):.2f}% over {len(gaps)} solves, solver below grid: {below or 'never'}, {elapsed:.0f}s"
    assert report(ok, detail), detail


def _waterfill_general(c, total):
    """Maximize ``sum_{m,k} log(1 + a_k / c[m, k])`` with ``sum a <= total`` by nested bisection."""
    def alloc(lam):
        a = np.zeros(c.shape[1])
        for k in range(c.shape[1]):
            if np.sum(1 / c[:, k]) <= lam:
                continue
            lo, hi = 0.0, c.shape[0] / lam
            for _ in range(100):
                mid = 0.5 * (lo + hi)
                if np.sum(1 / (mid + c[:, k])) > lam:
                    lo = mid
                else:
                    hi = mid
            a[k] = lo
        return a

    lo, hi = 1e-12, np.max(np.sum(1 / c, axis=0))
    for _ in range(200):
        lam = math.sqrt(lo * hi)
        if alloc(lam).sum() > total:
            lo = lam
        else:
            hi = lam
    return alloc(hi)


def test_06_water_filling_limit(report):
    cfg = GfdmConfig()
    ch, _ = draw_usable_channel(10, exponential_pdp(10), 6, cfg.N)
    geometry = AciGeometry.build(cfg)
    coeffs = aci_coefficients(cfg, draw_pu_gains(exponential_pdp(10), 7, cfg.K), geometry)
    # with Q_n unbounded the self-interference rows vanish; model that with a kernel
    # carrying only the desired term and a vanishing surrogate bound
    no_si = InterferenceKernel(np.broadcast_to(cfg.p_s * np.eye(cfg.K), (cfg.M, cfg.K, cfg.K)).copy(), cfg.p_s)
    worst = {}
    for budget_dbm in (20.0, 40.0, 55.0):
        total = float(dbm_to_watts(budget_dbm))
        for rx in ("ZF", "MF"):
            noise = NoiseProfile.for_config(cfg, rx).base_terms(ch, 1.0)
            if rx == "ZF":
                p = RateProblem("ZF", noise, coeffs, ConstraintSet(total), cfg.p_s, cfg.rate_factor)
            else:
                p = RateProblem("MF", noise, coeffs, ConstraintSet(total, q_n=1e-300), cfg.p_s,
                                cfg.rate_factor, no_si)
            got = solve(p).rate
            ref = float(p.true_rate(_waterfill_general(noise / (cfg.rate_factor * cfg.p_s), total)))
            worst[rx] = max(worst.get(rx, 0.0), abs(got / ref - 1))
    ok = max(worst.values()) <= 0.01
    detail = f"max rate gap ZF {100 * worst['ZF']:.4f}% MF {100 * worst['MF']:.4f}%"
    assert report(ok, detail), detail


def test_07_interference_limits_enforced(report, capacity):
    cfg, records, _ = capacity
    over, loose = [], []
    for series in ("GFDM-MF", "GFDM-ZF", "OFDM"):
        for q in cfg.q_grid_dbm:
            sel = [r for r in records if r.series == series and r.q_dbm == q and r.allocation == "nonuniform"]
            over += [r for r in sel if float(watts_to_dbm(r.p_r)) > q + 0.2]
            binding = [r.p_r for r in sel if r.gamma_right > 0]
            if binding and float(watts_to_dbm(np.mean(binding))) < q - 0.5:
                loose.append((series, q))
    ok = not over and not loose
    detail = f"{len(over)} solves above Q_r + 0.2 dB, binding averages below Q_r - 0.5 dB at {loose or 'no'} points"
    assert report(ok, detail), detail


def test_08_qn_interior_optimum(report):
    cfg = ExperimentConfig(scenario="sweep-qn")
    rates, _ = sweep_records(cfg)
    interior = 0
    for row in rates:
        j = int(np.nanargmax(row))
        if 0 < j < len(row) - 1 and row[j] > row[0] and row[j] > row[-1]:
            interior += 1
    ok = interior >= 45
    detail = f"interior maximum in {interior} of {len(rates)} realizations"
    assert report(ok, detail), detail


def test_09_gfdm_over_ofdm(report, capacity):
    _, records, _ = capacity
    factors = {}
    for rx in ("GFDM-MF", "GFDM-ZF"):
        factors[rx] = tuple(_mean_rate(records, rx, q) / _mean_rate(records, "OFDM", q) for q in (10.0, 0.0))
    ok = all(f10 >= 1.5 and f0 > f10 for f10, f0 in factors.values())
    detail = ", ".join(f"{rx} x{f10:.2f} at 10 dBm, x{f0:.2f} at 0 dBm" for rx, (f10, f0) in factors.items())
    assert report(ok, detail), detail


def test_10_receiver_crossover(report, capacity):
    cfg, records, _ = capacity
    wrong = []
    for q in cfg.q_grid_dbm:
        mf, zf = _mean_rate(records, "GFDM-MF", q), _mean_rate(records, "GFDM-ZF", q)
        if q <= -10 and not mf > zf:
            wrong.append(f"{q:g} dBm MF {mf:.4f} <= ZF {zf:.4f}")
        if q >= 15 and not zf > mf:
            wrong.append(f"{q:g} dBm ZF {zf:.4f} <= MF {mf:.4f}")
    ok = not wrong
    detail = "ordering holds at every point" if ok else "; ".join(wrong)
    assert report(ok, detail), detail


def test_11_nonuniform_beats_uniform(report, capacity):
    _, records, elapsed = capacity
    uniform = {(r.realization, r.series, r.q_dbm): r.rate for r in records if r.allocation == "uniform"}
    worst = min(r.rate - uniform[(r.realization, r.series, r.q_dbm)]
                for r in records if r.allocation == "nonuniform" and r.series.startswith("GFDM"))
    ok = worst >= -1e-6
    detail = f"smallest margin {worst:.2e} over {len(uniform)} points (capacity run {elapsed:.0f}s)"
    assert report(ok, detail), detail


def test_12_deterministic_outputs(report, tmp_path):
    tiny = dict(subcarriers=8, subsymbols=3, cp_len=4, channel_taps=3, realizations=2, channel_draws=2,
                symbols_per_point=1200, psd_frames=200, psd_nfft=1024, psd_subsymbols=(1, 3),
                q_grid_dbm=(-10.0, 10.0), qn_grid=(0.01, 0.1, 0.5), esn0_grid_db=(6.0, 18.0), seed=12)
    mismatched = []
    for scenario in ("ser", "psd", "sweep-qn", "capacity", "interference"):
        cfg = ExperimentConfig(scenario=scenario, **tiny)
        outputs = []
        for i, threads in enumerate((1, 1, 2)):
            out = tmp_path / f"{scenario}-{i}"
            names = write_outputs(run(cfg, threads=threads), cfg, out)
            outputs.append({n: (out / n).read_bytes() for n in names + ["manifest.txt"]})
        if not outputs[0] == outputs[1] == outputs[2]:
            mismatched.append(scenario)
    ok = not mismatched
    detail = "all five scenarios byte-identical across reruns and thread counts" if ok else f"differs: {mismatched}"
    assert report(ok, detail), detail
