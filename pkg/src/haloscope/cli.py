"""Command-line pipeline: ``haloscope {generate,denoise,score,limit,band,export}``.

Settings come from an optional JSON config (``--config``); every
kebab-case flag overrides the config key of the same name in its
command's section.  Exit codes: 0 ok, 2 usage, 3 data/format, 4 numerical.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import platform
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import (
    DataError,
    ExternalDenoiserError,
    HaloscopeError,
    NumericalError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
#: Largest run generated without ``--big-data``.
BIG_DATA_SAMPLES = 10**10
#: Size of the full published dataset, for scale in the refusal message.
FULL_RELEASE_GIGASAMPLES = 833.82

DEFAULT_CONFIG = {
    "seed": 0,
    "sample_rate": 10_000_000,
    "workers": None,
    "output_dir": ".",
    "generate": {
        "train_files": 1,
        "validation_files": 1,
        "science_files": 1,
        "train_seconds": 38,
        "validation_seconds": 38,
        "science_seconds": 300,
        "mode": "standard",
        "dwell": 1.0,
        "schedule": None,
        "noise": {"white_sigma": 5.0, "pink_amplitude": 0.0, "lines": []},
        "planted": None,
    },
    "denoise": {"kind": "none", "window": None, "order": 11, "command": None,
                "timeout": 600.0, "segment_seconds": 1.0},
    "score": {"mode": "both", "base": None, "segment_seconds": 1.0,
              "noise_grid": False, "amplitudes": [0.0, 1.0, 2.0, 3.0, 4.0],
              "sigmas": [1.0, 2.0, 3.0, 4.0, 5.0], "grid_target": "squid"},
    "limit": {"f_lo": 1e5, "f_hi": 2e6, "n_masses": 10_000, "segment_seconds": 10.0,
              "channel": 0, "calibration": None, "flux_unit": 1.0,
              "halo": {"v0": 220.0, "v_obs": 232.0, "v_esc": 544.0},
              "constants": {"geometric_coupling": 0.0217, "volume_cm3": 890.0,
                            "b_max_tesla": 1.0, "rho_dm_gev_cm3": 0.4},
              "chunk_size": 20_000, "band": False},
    "band": {"n_trials": 100, "n_averaged": None, "psd": None},
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config, provenance, progress


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path) as fh:
            user = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(user, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def _apply_overrides(config: dict, args, section: str, keys) -> dict:
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            continue
        if key in ("seed", "sample_rate", "workers", "output_dir"):
            config[key] = value
        else:
            config[section][key] = value
    return config


# settings that never change output bytes stay out of hashes and provenance
_PLACEMENT_KEYS = ("output_dir", "workers")


def _outcome_config(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in _PLACEMENT_KEYS}


def config_hash(config: dict) -> str:
    text = json.dumps(_outcome_config(config), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def _versions() -> dict:
    import scipy
    import sklearn

    return {
        "haloscope": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "python": platform.python_version(),
    }


def write_provenance(output, command, config, seeds=None, inputs=()):
    """Write ``<output>.prov.json`` next to an output file (no timestamps)."""
    record = {
        "output": Path(output).name,
        "command": command,
        "config_sha256": config_hash(config),
        "config": _outcome_config(config),
        "seeds": seeds or {},
        "inputs": [
            {"path": str(p), "bytes": os.path.getsize(p)} for p in inputs if os.path.exists(p)
        ],
        "versions": _versions(),
    }
    with open(str(output) + ".prov.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


class Progress:
    """Throttled progress line on stderr with throughput in samples/s."""

    def __init__(self, stage, total, quiet=False, interval=1.0):
        self.stage, self.total, self.quiet, self.interval = stage, total, quiet, interval
        self.done = 0
        self.t0 = self._last = time.perf_counter()

    def update(self, n):
        self.done += n
        now = time.perf_counter()
        if not self.quiet and (now - self._last >= self.interval or self.done >= self.total):
            self._last = now
            rate = self.done / max(now - self.t0, 1e-9)
            pct = 100.0 * self.done / self.total if self.total else 100.0
            print(f"[{self.stage}] {pct:5.1f}%  {self.done:.3e} samples  {rate:.3e} samples/s",
                  file=sys.stderr)

    @property
    def rate(self):
        return self.done / max(time.perf_counter() - self.t0, 1e-9)


def _info(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# generate


def _file_seed(seed, split, index) -> int:
    ss = np.random.SeedSequence([int(seed), split, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


_SPLIT_IDS = {"train": 1, "validation": 2, "science": 3}


def _schedule_for(gen_cfg, seconds):
    from .simgen import InjectionSchedule, default_schedule

    if gen_cfg.get("schedule"):
        base = InjectionSchedule.from_dict(gen_cfg["schedule"])
    else:
        base = default_schedule(gen_cfg.get("mode", "standard"), dwell=float(gen_cfg.get("dwell", 1.0)))
    # repeat the sweep until it covers the file
    reps = max(1, math.ceil(seconds / base.total_duration - 1e-12))
    return InjectionSchedule(base.entries * reps)


def _noise_for(gen_cfg, seed):
    from .simgen import NoiseModel

    d = dict(gen_cfg.get("noise") or {})
    d["seed"] = seed
    return NoiseModel.from_dict(d)


def _planned_files(config):
    g = config["generate"]
    plan = []
    for split, kind in (("train", "pair"), ("validation", "pair"), ("science", "science")):
        for i in range(int(g[f"{split}_files"])):
            plan.append((split, i, kind, float(g[f"{split}_seconds"])))
    return plan


def _gen_pair_batch(args):
    from .simgen import pair_block

    schedule, noise, rate, blocks = args
    return [pair_block(schedule, noise, rate, b, s, n) for b, s, n in blocks]


def _gen_science_batch(args):
    from .simgen import science_block

    noise, rate, planted, blocks = args
    comps = planted.components(noise.seed) if planted is not None else None
    return [science_block(noise, rate, b, s, n, planted, comps) for b, s, n in blocks]


def _write_generated(path, kind, schedule, noise, planted, seconds, rate, workers, progress):
    from .io import ContainerWriter
    from .parallel import ordered_map, resolve_workers
    from .simgen import _block_ranges, _check_pair_inputs, _check_science_inputs, _total_samples

    total = _total_samples(seconds, rate)
    if kind == "pair":
        _check_pair_inputs(schedule, noise, seconds, rate)
    else:
        _check_science_inputs(noise, rate, planted)
    blocks = list(_block_ranges(total, int(rate)))
    n_workers = resolve_workers(workers)
    lengths = [total, total] if kind == "pair" else [total]
    saturated = 0
    with ContainerWriter(path, int(rate), lengths) as writer:
        for i in range(0, len(blocks), n_workers):
            batch = blocks[i : i + n_workers]
            if kind == "pair":
                jobs = [(schedule, noise, rate, [blk]) for blk in batch]
                results = ordered_map(_gen_pair_batch, jobs, n_workers)
            else:
                jobs = [(noise, rate, planted, [blk]) for blk in batch]
                results = ordered_map(_gen_science_batch, jobs, n_workers)
            for res in results:
                for blk in res:
                    writer.write(0, blk.squid)
                    if kind == "pair":
                        writer.write(1, blk.injected)
                    saturated += blk.saturated
                    progress.update(blk.squid.size * len(lengths))
    return saturated


def cmd_generate(args, config):
    from .simgen import PlantedSignal

    config = _apply_overrides(
        config, args, "generate",
        ["seed", "sample_rate", "output_dir", "workers", "train_files", "validation_files",
         "science_files", "train_seconds", "validation_seconds", "science_seconds", "mode", "dwell"],
    )
    if args.white_sigma is not None:
        config["generate"]["noise"]["white_sigma"] = args.white_sigma
    g = config["generate"]
    rate = config["sample_rate"]
    out = Path(config["output_dir"])
    plan = _planned_files(config)
    total = sum(int(round(s * rate)) * (2 if k == "pair" else 1) for _, _, k, s in plan)
    if total > BIG_DATA_SAMPLES and not args.big_data:
        gs = total / 1e9
        raise UsageError(
            f"requested {gs:.2f} Gigasamples (~{total / 1e9:.1f} GB on disk) exceeds the "
            f"{BIG_DATA_SAMPLES / 1e9:.0f} Gigasample desk limit; the full published run was "
            f"{FULL_RELEASE_GIGASAMPLES} Gigasamples. Pass --big-data to proceed."
        )
    out.mkdir(parents=True, exist_ok=True)
    targets = [out / f"{split}_{i:03d}.tsd" for split, i, _, _ in plan]
    existing = [str(t) for t in targets if t.exists()] + (
        [str(out / "manifest.json")] if (out / "manifest.json").exists() else []
    )
    if existing and not args.force:
        raise DataError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    planted = PlantedSignal.from_dict(g["planted"]) if g.get("planted") else None
    progress = Progress("generate", total, args.quiet)
    files = []
    for (split, i, kind, seconds), path in zip(plan, targets):
        seed = _file_seed(config["seed"], _SPLIT_IDS[split], i)
        noise = _noise_for(g, seed)
        schedule = _schedule_for(g, seconds) if kind == "pair" else None
        sat = _write_generated(path, kind, schedule, noise, planted if kind == "science" else None,
                               seconds, rate, config["workers"], progress)
        entry = {
            "path": path.name,
            "split": split,
            "kind": kind,
            "channels": ["squid", "injected"] if kind == "pair" else ["squid"],
            "seconds": seconds,
            "sample_rate": rate,
            "seed": seed,
            "saturated_samples": sat,
        }
        if kind == "pair":
            entry["schedule"] = schedule.to_dict() if len(schedule) <= 1000 else {"n_entries": len(schedule)}
        files.append(entry)
        write_provenance(path, "generate", config, {"base_seed": config["seed"], "file_seed": seed})
    manifest = {
        "files": files,
        "seed": config["seed"],
        "sample_rate": rate,
        "noise": {k: v for k, v in _noise_for(g, 0).to_dict().items() if k != "seed"},
        "planted": g.get("planted"),
        "config_sha256": config_hash(config),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    _info(args, f"wrote {len(files)} files and manifest.json to {out} "
                f"({progress.rate:.3e} samples/s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# denoise


def _denoise_spec(config):
    from .denoise import DenoiserSpec

    d = config["denoise"]
    return DenoiserSpec(d["kind"], d.get("window"), d.get("order", 11), d.get("command"),
                        d.get("timeout", 600.0))


def cmd_denoise(args, config):
    from .denoise import make_denoiser
    from .io import ContainerWriter, SampleFormat, read_header, read_range

    config = _apply_overrides(config, args, "denoise",
                              ["kind", "window", "order", "command", "timeout", "segment_seconds", "workers"])
    spec = _denoise_spec(config)
    src, dst = Path(args.input), Path(args.output)
    if dst.exists() and not args.force:
        raise DataError(f"refusing to overwrite {dst} (use --force)")
    header = read_header(src)
    if spec.kind == "none":
        shutil.copyfile(src, dst)
        write_provenance(dst, "denoise", config, inputs=[src])
        return EXIT_OK
    denoiser = make_denoiser(spec)
    seg = int(round(config["denoise"]["segment_seconds"] * header.sample_rate))
    n0 = header.channel_lengths[0]
    progress = Progress("denoise", n0, args.quiet)
    with ContainerWriter(dst, header.sample_rate, header.channel_lengths, SampleFormat.REAL32) as w:
        for k, start in enumerate(range(0, n0, seg)):
            count = min(seg, n0 - start)
            x = read_range(src, 0, start, count, header)
            try:
                if count >= (spec.window or 2) or spec.kind == "external":
                    y = denoiser.transform(x).samples
                else:
                    y = x.millivolts()  # tail shorter than the filter window
            except (HaloscopeError, ValueError) as exc:
                exc.args = (f"{src} segment {k}: {exc}",)
                raise
            w.write(0, y)
            progress.update(count)
        for ch in range(1, header.n_channels):
            n = header.channel_lengths[ch]
            for start in range(0, n, seg):
                w.write(ch, read_range(src, ch, start, min(seg, n - start), header).millivolts())
    write_provenance(dst, "denoise", config, inputs=[src])
    return EXIT_OK


# --------------------------------------------------------------------------
# score


def _injected_source(path, explicit):
    from .io import read_header

    if explicit:
        h = read_header(explicit)
        return explicit, (1 if h.n_channels == 2 else 0)
    h = read_header(path)
    if h.n_channels != 2:
        raise UsageError(f"{path} has one channel; pass the injected file as the second argument")
    return path, 1


def cmd_score(args, config):
    from .score import (
        COARSE_STRIDE,
        compute_records_from_files,
        lambda_from_records,
        noise_robustness_grid,
        score_records,
        _checked_base,
    )

    config = _apply_overrides(config, args, "score", ["mode", "base", "output_dir", "workers", "segment_seconds"])
    sc = config["score"]
    workers = config["workers"]
    inj_path, inj_ch = _injected_source(args.denoised, args.injected)
    base = sc.get("base")
    calibration_source = None
    cached = None  # fine records of the raw pair, reused when it is also the scored file
    if base is None:
        raw = args.raw or (inj_path if inj_ch == 1 else None)
        if raw is None:
            raise UsageError("no base given and no raw pair to calibrate on (use --raw or --base)")
        recs = compute_records_from_files(raw, raw, 0, 1, "fine", sc["segment_seconds"], workers=workers)
        lam, _ = lambda_from_records(recs)
        base = _checked_base(lam)
        calibration_source = str(raw)
        if Path(raw).resolve() == Path(args.denoised).resolve() and inj_ch == 1:
            cached = recs
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    modes = ["fine", "coarse"] if sc["mode"] == "both" else [sc["mode"]]
    reports = {}
    for mode in modes:
        if cached is not None:
            recs = cached if mode == "fine" else [r for r in cached if r.segment_index % COARSE_STRIDE == 0]
        else:
            recs = compute_records_from_files(args.denoised, inj_path, 0, inj_ch, mode,
                                              sc["segment_seconds"], workers=workers)
        rep = score_records(recs, base, mode)
        d = rep.to_dict()
        d["calibrated_on"] = calibration_source
        d["inputs"] = {"denoised": str(args.denoised), "injected": str(inj_path)}
        target = out / f"score_{mode}.json"
        with open(target, "w") as fh:
            json.dump(d, fh, indent=2)
            fh.write("\n")
        write_provenance(target, "score", config, inputs=[args.denoised, inj_path])
        reports[mode] = rep
        print(f"{mode} score: {rep.score:.4f}  (Lambda = {rep.lambda_:.6g}, base = {base:.6g}, "
              f"segments = {rep.n_segments})")
    if sc.get("noise_grid") or args.noise_grid:
        from .io import read_container, read_header

        h = read_header(args.denoised)
        squid = read_container(args.denoised)[0]
        injected = read_container(inj_path)[inj_ch]
        grid = noise_robustness_grid(squid, injected, sc["amplitudes"], sc["sigmas"], base,
                                     target=sc.get("grid_target", "squid"), seed=config["seed"],
                                     segment_seconds=sc["segment_seconds"], workers=workers)
        target = out / "score_grid.json"
        with open(target, "w") as fh:
            json.dump(grid.to_dict(), fh, indent=2)
            fh.write("\n")
        write_provenance(target, "score", config, {"perturbation_seed": config["seed"]},
                         inputs=[args.denoised, inj_path])
        print(f"noise grid written to {target} ({h.channel_lengths[0]} samples)")
    return EXIT_OK


# --------------------------------------------------------------------------
# limit and band


def _limit_objects(config):
    from .halo import HaloParams
    from .limits import Calibration
    from .model import PhysicalConstants
    from .simgen import gain_from_dict

    lc = config["limit"]
    halo = HaloParams(**lc["halo"])
    constants = PhysicalConstants(**lc["constants"])
    if lc.get("calibration"):
        calibration = Calibration.from_csv(lc["calibration"])
    else:
        noise = config["generate"].get("noise") or {}
        calibration = Calibration.from_gain(gain_from_dict(noise.get("gain")))
    return halo, constants, calibration


def _masses(config):
    from .limits import geometric_mass_grid

    lc = config["limit"]
    return geometric_mass_grid(float(lc["f_lo"]), float(lc["f_hi"]), int(lc["n_masses"]))


def save_psd(psd, path):
    np.savez(path, values=psd.values, df=psd.df, f0=psd.f0, n_averaged=psd.n_averaged)


def load_psd(path):
    from .model import PowerSpectrum

    with np.load(path) as z:
        return PowerSpectrum(z["values"], float(z["df"]), float(z["f0"]), int(z["n_averaged"]))


def _run_band(config, background, n_avg, masses, out, args):
    from .limits import brazil_band

    halo, constants, calibration = _limit_objects(config)
    band = brazil_band(background, n_avg, masses, int(config["band"]["n_trials"]),
                       seed=config["seed"], halo=halo, calibration=calibration,
                       constants=constants, flux_unit=config["limit"]["flux_unit"],
                       sample_rate=config["sample_rate"],
                       segment_seconds=config["limit"]["segment_seconds"],
                       workers=config["workers"])
    band.to_csv(out / "band.csv")
    with open(out / "band.json", "w") as fh:
        json.dump(band.to_dict(), fh)
    for f in ("band.csv", "band.json"):
        write_provenance(out / f, "band", config, {"band_seed": config["seed"]})
    _info(args, f"band over {len(masses)} masses from {band.n_trials} trials written to {out}")
    return band


def cmd_limit(args, config):
    from .dsp import averaged_psd_from_file
    from .io import read_header
    from . import halo as _halo
    from .limits import MIN_AVERAGES, WINDOW_FRACTION, LimitCurve, iter_scan

    config = _apply_overrides(config, args, "limit",
                              ["f_lo", "f_hi", "n_masses", "segment_seconds", "calibration",
                               "chunk_size", "channel", "output_dir", "workers"])
    lc = config["limit"]
    header = read_header(args.science)
    seg_s = float(lc["segment_seconds"])
    n_seg = header.channel_lengths[lc["channel"]] // int(round(seg_s * header.sample_rate))
    if n_seg < MIN_AVERAGES:
        need = MIN_AVERAGES * seg_s
        have = header.channel_lengths[lc["channel"]] / header.sample_rate
        raise DataError(
            f"{args.science}: {have:g} s of data gives {n_seg} segments of {seg_s:g} s; "
            f"the limit needs n_averaged >= {MIN_AVERAGES}, i.e. at least {need:g} s"
        )
    masses = _masses(config)
    halo, constants, calibration = _limit_objects(config)
    progress = Progress("psd", header.channel_lengths[lc["channel"]], args.quiet)
    # pad the band so every window (template support plus sidebands) fits
    margin = 64 / seg_s + float(masses.max()) * 2 * WINDOW_FRACTION
    f_top = _halo.max_frequency(float(masses.max()), halo) + margin
    f_bottom = max(float(masses.min()) * (1 - 2 * WINDOW_FRACTION) - 64 / seg_s, 0.0)
    psd = averaged_psd_from_file(args.science, lc["channel"], seg_s, config["workers"],
                                 f_lo=f_bottom, f_hi=f_top)
    progress.update(header.channel_lengths[lc["channel"]])
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_psd(psd, out / "psd.npz")
    write_provenance(out / "psd.npz", "limit", config, inputs=[args.science])
    chunks = []
    n_fail = 0
    keep = len(masses) <= 1_000_000
    with open(out / "limit.csv", "w", newline="") as fh:
        fh.write(",".join(LimitCurve.COLUMNS) + "\n")
        for chunk in iter_scan(psd, masses, int(lc["chunk_size"]), halo=halo, calibration=calibration,
                               constants=constants, flux_unit=lc["flux_unit"]):
            chunk.to_csv(fh, header=False)
            n_fail += len(chunk.errors)
            if keep:
                chunks.append(chunk)
    summary = {"n_masses": int(len(masses)), "n_failed": n_fail, "n_averaged": psd.n_averaged,
               "df": psd.df, "calibration": calibration.describe()}
    if keep:
        curve = LimitCurve.concatenate(chunks)
        summary.update(curve.to_dict())
    with open(out / "limit.json", "w") as fh:
        json.dump(summary, fh)
    for f in ("limit.csv", "limit.json"):
        write_provenance(out / f, "limit", config, inputs=[args.science])
    _info(args, f"limits for {len(masses)} masses written to {out} ({n_fail} failed points)")
    if lc.get("band") or args.band:
        noise = _noise_for(config["generate"], 0)
        _run_band(config, noise, psd.n_averaged, masses, out, args)
    return EXIT_OK


def cmd_band(args, config):
    config = _apply_overrides(config, args, "band", ["n_trials", "n_averaged", "psd", "output_dir", "workers"])
    for key in ("f_lo", "f_hi", "n_masses"):
        if getattr(args, key, None) is not None:
            config["limit"][key] = getattr(args, key)
    bc = config["band"]
    if bc.get("n_averaged") is None:
        raise UsageError("band needs --n-averaged (segments per pseudo-dataset)")
    masses = _masses(config)
    background = load_psd(bc["psd"]) if bc.get("psd") else _noise_for(config["generate"], 0)
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _run_band(config, background, int(bc["n_averaged"]), masses, out, args)
    return EXIT_OK


# --------------------------------------------------------------------------
# export


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_export(args, config):
    kind, src, dst = args.kind, Path(args.input), Path(args.output)
    if kind == "psd":
        if src.suffix == ".npz":
            psd = load_psd(src)
        else:
            from .dsp import averaged_psd_from_file

            psd = averaged_psd_from_file(src, args.channel, args.segment_seconds, config["workers"])
        from .dsp import psd_to_csv

        psd_to_csv(psd, dst)
        return EXIT_OK
    with open(src) as fh:
        data = json.load(fh)
    if kind == "score-grid":
        if "scores" not in data:
            raise DataError(f"{src} is not a noise-grid report")
        header = ["amplitude"] + [f"sigma={s:g}" for s in data["sigmas"]]
        rows = [[a] + list(r) for a, r in zip(data["amplitudes"], data["scores"])]
        _write_rows(dst, header, rows)
    elif kind == "score":
        if "records" not in data:
            raise DataError(f"{src} is not a score report")
        cols = ["segment_index", "nu0", "snr_squid", "snr_injected", "snr_injected_norm"]
        _write_rows(dst, cols, [[r[c] for c in cols] for r in data["records"]])
    elif kind == "limit":
        if "g95" not in data:
            raise DataError(f"{src} has no per-mass limits (large scans keep them in limit.csv)")
        _write_rows(dst, ["mass_ev", "g95"], zip(data["mass_ev"], data["g95"]))
    elif kind == "band":
        if "g_quantiles" not in data:
            raise DataError(f"{src} is not a band report")
        header = ["mass_ev"] + [f"g95_p{p:g}" for p in data["percentiles"]]
        _write_rows(dst, header, [[m] + list(q) for m, q in zip(data["mass_ev"], data["g_quantiles"])])
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown export kind {kind}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    common.add_argument("--output-dir", help="directory for outputs")
    common.add_argument("--seed", type=int)
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    p = argparse.ArgumentParser(prog="haloscope", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"haloscope {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write synthetic datasets")
    g.add_argument("--sample-rate", type=int)
    for split in ("train", "validation", "science"):
        g.add_argument(f"--{split}-seconds", type=float)
        g.add_argument(f"--{split}-files", type=int)
    g.add_argument("--mode", choices=["standard", "weak"])
    g.add_argument("--dwell", type=float)
    g.add_argument("--white-sigma", type=float)
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.add_argument("--big-data", action="store_true", help="allow runs above 1e10 samples")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("denoise", parents=[common], help="apply a denoiser per segment")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--kind", choices=["none", "moving_average", "savitzky_golay", "external"])
    d.add_argument("--window", type=int)
    d.add_argument("--order", type=int)
    d.add_argument("--command", help="external denoiser: called as COMMAND IN.tsd OUT.tsd")
    d.add_argument("--timeout", type=float)
    d.add_argument("--segment-seconds", type=float)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_denoise)

    s = sub.add_parser("score", parents=[common], help="denoising score")
    s.add_argument("denoised", help="container whose channel 0 is scored")
    s.add_argument("injected", nargs="?", help="container holding the injected channel")
    s.add_argument("--raw", help="raw pair used to calibrate the base")
    s.add_argument("--base", type=float)
    s.add_argument("--mode", choices=["fine", "coarse", "both"])
    s.add_argument("--segment-seconds", type=float)
    s.add_argument("--noise-grid", action="store_true", help="also run the noise-robustness grid")
    s.set_defaults(func=cmd_score)

    lim = sub.add_parser("limit", parents=[common], help="upper limits from a science run")
    lim.add_argument("science")
    lim.add_argument("--f-lo", type=float)
    lim.add_argument("--f-hi", type=float)
    lim.add_argument("--n-masses", type=int)
    lim.add_argument("--segment-seconds", type=float)
    lim.add_argument("--channel", type=int)
    lim.add_argument("--calibration", help="CSV with frequency_hz,power_gain")
    lim.add_argument("--chunk-size", type=int)
    lim.add_argument("--band", action="store_true", help="also compute the expected-limit band")
    lim.set_defaults(func=cmd_limit)

    b = sub.add_parser("band", parents=[common], help="expected-limit band")
    b.add_argument("--n-trials", type=int)
    b.add_argument("--n-averaged", type=int)
    b.add_argument("--psd", help="background PSD (.npz from limit) instead of the noise model")
    b.add_argument("--f-lo", type=float)
    b.add_argument("--f-hi", type=float)
    b.add_argument("--n-masses", type=int)
    b.set_defaults(func=cmd_band)

    e = sub.add_parser("export", parents=[common], help="convert reports to plain CSV")
    e.add_argument("kind", choices=["score", "score-grid", "limit", "band", "psd"])
    e.add_argument("input")
    e.add_argument("output")
    e.add_argument("--channel", type=int, default=0)
    e.add_argument("--segment-seconds", type=float, default=10.0)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        for key in ("workers", "seed", "output_dir"):
            if getattr(args, key, None) is not None:
                config[key] = getattr(args, key)
        return args.func(args, config)
    except UsageError as exc:
        print(f"haloscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"haloscope: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ExternalDenoiserError, HaloscopeError) as exc:
        print(f"haloscope: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"haloscope: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, TypeError, KeyError) as exc:
        print(f"haloscope: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
