"""End-to-end pipeline orchestration and the comparison report.

The pipeline loads two datasets (roles: reference and error-bearing),
extracts episodes, fits or loads the measurement-error model, and runs the
enabled analyses: discharge headways, Markov transition scoring, and
SIMEX-corrected DTW comparisons with permutation tests. Every emitted file
is byte-reproducible for a fixed configuration and seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import load_lane_map, load_trajectories, resample_set
from .dtw import DTWConfig, dtw_distance, pooled_weights
from .episodes import (
    CFConfig,
    LCConfig,
    StopThresholds,
    extract_cf_pairs,
    extract_discharge_headways,
    extract_lane_changes,
    extract_stop_segments,
    save_cf_episodes,
    save_lc_episodes,
    save_stop_segments,
)
from .errors import (
    DerivedErrorSet,
    ErrorModel2D,
    SpeedErrorModel,
    derive_error_set,
    error_model_to_dict,
    fit_bivariate_error,
    load_error_model,
    load_error_samples,
    mardia_tests,
    save_error_model,
    zero_error_set,
)
from .markov import (
    build_transition_matrix,
    geometric_mean_score,
    save_transition_matrix,
    step_probabilities,
)
from .simex import (
    BootstrapErrorGenerator,
    GaussianErrorGenerator,
    SimexConfig,
    cf_tagged,
    lc_tagged,
    simex_audit_dict,
    simex_distance,
)
from .stats import group_stats, ks_two_sample, permutation_test_mean_diff, welch_t

REPORT_SCHEMA = "comparison-report/1"

_ALL_ANALYSES = ("headway", "markov", "cf_dtw", "lc_dtw")
_HIST_EDGES = np.linspace(0.0, 1.0, 21)


class PipelineError(Exception):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _parallel_map(fn, items, threads: int):
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(c) if isinstance(c, float) else c for c in row])


def _histogram(values) -> dict:
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=_HIST_EDGES)
    return {"bin_edges": _HIST_EDGES.tolist(), "counts": counts.tolist()}


# ---------------------------------------------------------------------------
# Stage: load

def _load_dataset(cfg: dict, dt: float, role: str):
    try:
        path = Path(cfg["path"])
        fmt = cfg.get("format", "jsonl")
        tset = load_trajectories(path, fmt)
        map_path = cfg.get("map")
        if map_path:
            tset = type(tset)(
                trajectories=tset.trajectories,
                lane_map=load_lane_map(map_path),
                source_tag=tset.source_tag,
            )
        resampled = resample_set(tset, dt)
        digests = {"data": _sha256(path)}
        if map_path:
            digests["map"] = _sha256(Path(map_path))
        return resampled, digests
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"load:{role}", str(exc))


# ---------------------------------------------------------------------------
# Stage: error model

def _resolve_error_model(cfg: dict):
    """Returns (model, derived, summary dict)."""
    try:
        summary = {}
        if "file" in cfg:
            model, derived = load_error_model(cfg["file"])
            if derived is None:
                derived = _derive_with_optional_speed(model, cfg)
            summary["source"] = "file"
        elif "samples" in cfg:
            samples, durations = load_error_samples(cfg["samples"])
            model = fit_bivariate_error(samples)
            mardia = mardia_tests(samples)
            summary["source"] = "samples"
            summary["mardia"] = {
                "p_skewness": mardia.p_skewness,
                "p_kurtosis": mardia.p_kurtosis,
            }
            if durations is not None:
                derived = derive_error_set(model, durations=durations)
            else:
                derived = _derive_with_optional_speed(model, cfg)
        elif "values" in cfg:
            vals = cfg["values"]
            model = ErrorModel2D(
                mu_x=float(vals["mu"][0]), mu_y=float(vals["mu"][1]),
                sigma_x=float(vals["sigma"][0]), sigma_y=float(vals["sigma"][1]),
                rho=float(vals["rho"]), n_samples=int(vals.get("n", 0)),
            )
            derived = _derive_with_optional_speed(model, cfg)
            summary["source"] = "values"
        else:
            raise ValueError("error_model needs one of: file, samples, values")
        summary.update(error_model_to_dict(model, derived))
        return model, derived, summary
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("error-model", str(exc))


def _derive_with_optional_speed(model: ErrorModel2D, cfg: dict) -> DerivedErrorSet:
    speed_cfg = cfg.get("speed") or (cfg.get("values") or {}).get("speed")
    if speed_cfg:
        speed = SpeedErrorModel(
            mu_x=float(speed_cfg["mu"][0]), mu_y=float(speed_cfg["mu"][1]),
            sigma_x=float(speed_cfg["sigma"][0]), sigma_y=float(speed_cfg["sigma"][1]),
            rho=float(speed_cfg["rho"]),
        )
        return derive_error_set(model, speed)
    durations = cfg.get("durations")
    if durations:
        return derive_error_set(model, durations=durations)
    raise ValueError("error_model needs a speed block or durations to derive speed error")


def _build_error_generator(config: dict, derived):
    kind = (config.get("simex") or {}).get("error_generator", "parametric_gaussian")
    if kind == "parametric_gaussian":
        return GaussianErrorGenerator(derived)
    if kind == "empirical_bootstrap":
        samples_path = (config.get("error_model") or {}).get("samples")
        if not samples_path:
            raise PipelineError(
                "config", "empirical_bootstrap needs error_model.samples")
        samples, durations = load_error_samples(samples_path)
        if durations is None:
            raise PipelineError(
                "config", "empirical_bootstrap needs a duration_s sample column")
        return BootstrapErrorGenerator(samples, durations)
    raise PipelineError("config", f"unknown error_generator {kind!r}")


# ---------------------------------------------------------------------------
# Stage: headway

def _headway_stage(ref_set, err_set, out_dir: Path) -> dict:
    section = {"status": "ok"}
    sides = {}
    for name, tset in (("reference", ref_set), ("error_bearing", err_set)):
        if tset.lane_map is None:
            return {"status": "skipped", "reason": f"no lane map for {name}"}
        records = extract_discharge_headways(tset)
        sides[name] = records
        write_csv(
            out_dir / f"headways_{name}.csv",
            ("lane_id", "queue_position", "headway_s", "pair_type",
             "leader_id", "follower_id", "pass_t"),
            ((r.lane_id, r.queue_position, r.headway, r.pair_type,
              r.leader_id, r.follower_id, r.pass_t) for r in records),
        )
        section.setdefault("counts", {})[name] = len(records)
    ks_by_type = {}
    for pair_type in ("HV_HV", "AV_HV", "HV_AV", "AV_AV"):
        a = [r.headway for r in sides["reference"] if r.pair_type == pair_type]
        b = [r.headway for r in sides["error_bearing"] if r.pair_type == pair_type]
        if not a or not b:
            continue
        res = ks_two_sample(a, b)
        ks_by_type[pair_type] = {"D": res.d, "p": res.p, "exact": res.exact,
                                 "n_reference": len(a), "n_error_bearing": len(b)}
    section["ks_by_pair_type"] = ks_by_type
    welch_by_position = {}
    positions = sorted(
        {r.queue_position for r in sides["reference"]}
        & {r.queue_position for r in sides["error_bearing"]}
    )
    for pos in positions:
        a = [r.headway for r in sides["reference"] if r.queue_position == pos]
        b = [r.headway for r in sides["error_bearing"] if r.queue_position == pos]
        if len(a) < 2 or len(b) < 2:
            continue
        res = welch_t(group_stats(a), group_stats(b))
        welch_by_position[str(pos)] = {
            "t": res.t, "df": res.df, "p": res.p_two_sided,
            "reference": {"mean": float(np.mean(a)), "sd": float(np.std(a, ddof=1)),
                          "n": len(a)},
            "error_bearing": {"mean": float(np.mean(b)), "sd": float(np.std(b, ddof=1)),
                              "n": len(b)},
        }
    section["welch_by_position"] = welch_by_position
    return section


# ---------------------------------------------------------------------------
# Stage: markov

def _markov_stage(ref_segments, err_segments, derived, out_dir: Path) -> dict:
    matrix = build_transition_matrix(ref_segments)
    save_transition_matrix(matrix, out_dir / "transition_matrix.json")
    section = {
        "status": "ok",
        "n_transitions": matrix.n_transitions,
        "uniform_fallback": matrix.is_uniform,
    }
    zero = zero_error_set()
    for name, segments, err in (
        ("reference", ref_segments, zero),
        ("error_bearing", err_segments, derived),
    ):
        if not segments:
            section[name] = {"status": "empty"}
            continue
        scores = [geometric_mean_score(s, matrix, err) for s in segments]
        steps = [step_probabilities(s, matrix, err) for s in segments]
        all_steps = np.concatenate(steps) if steps else np.array([])
        write_csv(
            out_dir / f"markov_scores_{name}.csv",
            ("segment_id", "geom_mean", "n_steps"),
            ((s.segment_id(), score, s.n_frames - 1)
             for s, score in zip(segments, scores)),
        )
        write_csv(
            out_dir / f"markov_steps_{name}.csv",
            ("segment_id", "step", "p_t"),
            ((s.segment_id(), k, float(p))
             for s, probs in zip(segments, steps)
             for k, p in enumerate(probs)),
        )
        section[name] = {
            "status": "ok",
            "n_segments": len(segments),
            "mean_step_probability": float(all_steps.mean()),
            "mean_geometric_score": float(np.mean(scores)),
            "step_histogram": _histogram(all_steps),
            "geom_mean_histogram": _histogram(scores),
        }
    return section


# ---------------------------------------------------------------------------
# Stage: DTW + SIMEX + permutation

def _subsample_pairs(pairs, cap, rng):
    if cap is None or len(pairs) <= cap:
        return pairs
    idx = np.sort(rng.choice(len(pairs), size=cap, replace=False))
    return [pairs[i] for i in idx]


def _dtw_simex_stage(name, ref_items, err_items, to_tagged, band, sim_cfg,
                     gen, perm_b, seed, threads, out_dir: Path) -> dict:
    if not ref_items or not err_items:
        return {"status": "empty",
                "n_reference": len(ref_items), "n_error_bearing": len(err_items)}
    ref_tagged = [to_tagged(item, False) for item in ref_items]
    err_tagged = [to_tagged(item, True) for item in err_items]
    try:
        weights = pooled_weights(
            [t.values for t in ref_tagged] + [t.values for t in err_tagged]
        )
    except ValueError as exc:
        return {"status": "skipped", "reason": str(exc)}
    dtw_cfg = DTWConfig(weights=weights, band_halfwidth=band)

    cross = [
        (("cross", i, j), err_tagged[i], ref_tagged[j])
        for i in range(len(err_tagged))
        for j in range(len(ref_tagged))
        # an episode never enters a distance with itself (identical-dataset runs)
        if not (err_tagged[i].label == ref_tagged[j].label
                and np.array_equal(err_tagged[i].values, ref_tagged[j].values))
    ]
    within = [
        (("within", i, j), ref_tagged[i], ref_tagged[j])
        for i in range(len(ref_tagged))
        for j in range(i + 1, len(ref_tagged))
    ]
    rng = np.random.default_rng((seed, 9173))
    cross = _subsample_pairs(cross, sim_cfg.get("max_cross"), rng)
    within = _subsample_pairs(within, sim_cfg.get("max_within"), rng)
    if not cross:
        return {"status": "empty", "reason": "no cross pairs",
                "n_reference": len(ref_items), "n_error_bearing": len(err_items)}

    sx = SimexConfig(
        lambda_grid=tuple(sim_cfg.get("lambda_grid", (0.0, 1.0, 2.0))),
        b_replicates=int(sim_cfg.get("b_replicates", 100)),
        master_seed=seed,
        inflate_both=bool(sim_cfg.get("inflate_both", False)),
        error_generator=str(sim_cfg.get("error_generator", "parametric_gaussian")),
    )

    def run_pair(job):
        (kind, i, j), a, b = job
        offset = 0 if kind == "cross" else 1_000_000
        result = simex_distance(a, b, dtw_cfg, sx, gen, pair_key=(i + offset, j))
        raw = dtw_distance(a.values, b.values, dtw_cfg)
        return (kind, i, j, a.label, b.label, raw.distance,
                raw.distance / raw.path_length, raw.path_length, result)

    rows = _parallel_map(run_pair, cross + within, threads)
    write_csv(
        out_dir / f"{name}_pairs.csv",
        ("pair_kind", "id_a", "id_b", "dtw", "dtw_star", "k", "d0"),
        ((kind, label_a, label_b, dist, star, k, res.d0)
         for kind, _, _, label_a, label_b, dist, star, k, res in rows),
    )
    with open(out_dir / f"{name}_simex_audit.jsonl", "w", encoding="utf-8") as fh:
        for kind, i, j, label_a, label_b, _, _, _, res in rows:
            doc = {"pair_kind": kind, "id_a": label_a, "id_b": label_b}
            doc.update(simex_audit_dict(res, sx))
            fh.write(json.dumps(doc, sort_keys=True) + "\n")

    d_cross = [r[8].d0 for r in rows if r[0] == "cross"]
    d_within = [r[8].d0 for r in rows if r[0] == "within"]
    section = {
        "status": "ok",
        "weights": weights.tolist(),
        "band_halfwidth": band,
        "n_cross": len(d_cross),
        "n_within": len(d_within),
        "mean_cross": float(np.mean(d_cross)),
        "mean_within": float(np.mean(d_within)) if d_within else None,
        "simex": {"lambda_grid": list(sx.lambda_grid), "b_replicates": sx.b_replicates,
                  "inflate_both": sx.inflate_both,
                  "error_generator": sx.error_generator},
    }
    if d_cross and d_within:
        perm = permutation_test_mean_diff(d_cross, d_within, perm_b, seed=(seed, 4211))
        section["permutation"] = {"T_obs": perm.t_obs, "p": perm.p, "B": perm.b}
    return section


# ---------------------------------------------------------------------------
# Pipeline

def run_pipeline(config: dict, out_dir, seed: Optional[int] = None,
                 threads: int = 1) -> dict:
    """Execute the configured comparison and write the report plus sidecars.

    Returns the report dictionary; artifacts land under out_dir. Raises
    PipelineError with the failing stage on any error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dt = float(config.get("dt", 0.1))
    seed = int(config.get("seed", 0)) if seed is None else int(seed)
    analyses = tuple(config.get("analyses", _ALL_ANALYSES))
    unknown = set(analyses) - set(_ALL_ANALYSES)
    if unknown:
        raise PipelineError("config", f"unknown analyses: {sorted(unknown)}")
    datasets = config.get("datasets") or {}
    if "reference" not in datasets or "error_bearing" not in datasets:
        raise PipelineError("config", "datasets must define reference and error_bearing")

    ref_set, ref_digests = _load_dataset(datasets["reference"], dt, "reference")
    err_set, err_digests = _load_dataset(datasets["error_bearing"], dt, "error_bearing")

    model, derived, error_summary = _resolve_error_model(config.get("error_model") or {})
    save_error_model(model, out_dir / "error_model.json", derived)
    gen = _build_error_generator(config, derived)

    cf_cfg = CFConfig(**(config.get("cf") or {}))
    stop_cfg = StopThresholds(**(config.get("stop") or {}))
    lc_block = dict(config.get("lc") or {})
    lc_band = lc_block.pop("band_halfwidth", 2)
    lc_cfg = LCConfig(**lc_block)
    sim_block = dict(config.get("simex") or {})
    sim_block.setdefault("max_cross", (config.get("pairs") or {}).get("max_cross"))
    sim_block.setdefault("max_within", (config.get("pairs") or {}).get("max_within"))
    perm_b = int((config.get("tests") or {}).get("permutation_b", 2000))

    report = {
        "schema": REPORT_SCHEMA,
        "config": config,
        "provenance": {
            "package_version": __version__,
            "seed": seed,
            "dt": dt,
            "inputs": {"reference": ref_digests, "error_bearing": err_digests},
        },
        "extraction": {},
        "error_model": error_summary,
    }

    try:
        sides = {}
        for name, tset in (("reference", ref_set), ("error_bearing", err_set)):
            episodes = extract_cf_pairs(tset, cf_cfg)
            segments = extract_stop_segments(episodes, stop_cfg)
            save_cf_episodes(episodes, out_dir / f"cf_episodes_{name}.jsonl",
                             config=config.get("cf") or {})
            save_stop_segments(segments, out_dir / f"stop_segments_{name}.jsonl",
                               config=config.get("stop") or {})
            lc_episodes, lc_events, lc_rejects = [], [], {}
            if tset.lane_map is not None:
                lc_episodes, lc_events, lc_rejects = extract_lane_changes(tset, cfg=lc_cfg)
                save_lc_episodes(lc_episodes, out_dir / f"lc_episodes_{name}.jsonl",
                                 config=lc_block)
            sides[name] = (episodes, segments, lc_episodes)
            report["extraction"][name] = {
                "n_trajectories": len(tset),
                "n_cf_episodes": len(episodes),
                "n_stop_segments": len(segments),
                "n_lc_events": len(lc_events),
                "n_lc_episodes": len(lc_episodes),
                "lc_rejections": lc_rejects,
            }
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("extraction", str(exc))

    ref_episodes, ref_segments, ref_lc = sides["reference"]
    err_episodes, err_segments, err_lc = sides["error_bearing"]

    if "headway" in analyses:
        try:
            report["headway"] = _headway_stage(ref_set, err_set, out_dir)
        except Exception as exc:
            raise PipelineError("headway", str(exc))
    if "markov" in analyses:
        try:
            report["markov"] = _markov_stage(ref_segments, err_segments, derived, out_dir)
        except Exception as exc:
            raise PipelineError("markov", str(exc))
    if "cf_dtw" in analyses:
        try:
            report["cf_dtw"] = _dtw_simex_stage(
                "cf",
                [s for s in ref_segments],
                [s for s in err_segments],
                lambda s, bearing: cf_tagged(s, bearing, s.segment_id()),
                None, sim_block, gen, perm_b, seed, threads, out_dir,
            )
        except Exception as exc:
            raise PipelineError("cf-dtw", str(exc))
    if "lc_dtw" in analyses:
        try:
            report["lc_dtw"] = _dtw_simex_stage(
                "lc",
                ref_lc,
                err_lc,
                lambda e, bearing: lc_tagged(e, bearing, e.episode_id()),
                lc_band, sim_block, gen, perm_b, seed, threads, out_dir,
            )
        except Exception as exc:
            raise PipelineError("lc-dtw", str(exc))

    report_path = out_dir / "report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
