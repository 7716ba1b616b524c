"""Command-line interface: standalone stage commands plus the full pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import load_lane_map, load_trajectories, resample_set, save_trajectories
from .dtw import DTWConfig, dtw_distance, pooled_weights
from .episodes import (
    CFConfig,
    LCConfig,
    StopThresholds,
    extract_cf_pairs,
    extract_discharge_headways,
    extract_lane_changes,
    extract_stop_segments,
    load_cf_episodes,
    load_lc_episodes,
    load_stop_segments,
    save_cf_episodes,
    save_lc_episodes,
    save_stop_segments,
)
from .errors import (
    derive_error_set,
    fit_bivariate_error,
    load_error_model,
    load_error_samples,
    mardia_tests,
    save_error_model,
)
from .markov import (
    build_transition_matrix,
    geometric_mean_score,
    load_transition_matrix,
    save_transition_matrix,
    step_probabilities,
)
from .report import PipelineError, run_pipeline, write_csv
from .simex import GaussianErrorGenerator, SimexConfig, cf_tagged, lc_tagged, simex_distance
from .stats import permutation_test_mean_diff
from .synth import generate_scene, load_scene_script


def _load_config(path: Path) -> dict:
    text = Path(path).read_bytes()
    if str(path).endswith(".toml"):
        try:
            import tomllib  # Python >= 3.11
        except ImportError:
            import tomli as tomllib
        return tomllib.loads(text.decode("utf-8"))
    return json.loads(text.decode("utf-8"))


def _load_set(args):
    tset = load_trajectories(args.data, args.format)
    if getattr(args, "map", None):
        lane_map = load_lane_map(args.map)
        tset = type(tset)(trajectories=tset.trajectories, lane_map=lane_map,
                          source_tag=tset.source_tag)
    return resample_set(tset, args.dt)


def _episode_loader(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            doc = json.loads(line)
            if doc.get("kind") == "meta":
                continue
            schema = doc.get("schema", "")
            break
        else:
            raise ValueError(f"{path}: empty episode archive")
    if schema.startswith("lc-episode"):
        return load_lc_episodes(path), "lc"
    if schema.startswith("stop-segment"):
        return load_stop_segments(path), "cf"
    return load_cf_episodes(path), "cf"


def _cmd_synth(args) -> int:
    script = load_scene_script(args.script)
    result = generate_scene(script)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_trajectories(result.truth, out / "truth.jsonl", "jsonl")
    save_trajectories(result.observed, out / "observed.jsonl", "jsonl")
    if result.truth.lane_map is not None:
        from .core import save_lane_map

        save_lane_map(result.truth.lane_map, out / "map.json")
    print(f"wrote scene to {out}")
    return 0


def _cmd_extract_cf(args) -> int:
    tset = _load_set(args)
    cfg = CFConfig(**(_load_config(args.config).get("cf", {}) if args.config else {}))
    episodes = extract_cf_pairs(tset, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cf_episodes(episodes, out / "cf_episodes.jsonl", config=cfg.__dict__)
    print(f"{len(episodes)} car-following episodes -> {out / 'cf_episodes.jsonl'}")
    return 0


def _cmd_extract_stop(args) -> int:
    tset = _load_set(args)
    block = _load_config(args.config) if args.config else {}
    cf_cfg = CFConfig(**block.get("cf", {}))
    stop_cfg = StopThresholds(**block.get("stop", {}))
    episodes = extract_cf_pairs(tset, cf_cfg)
    segments = extract_stop_segments(episodes, stop_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_stop_segments(segments, out / "stop_segments.jsonl", config=stop_cfg.__dict__)
    print(f"{len(segments)} stop segments -> {out / 'stop_segments.jsonl'}")
    return 0


def _cmd_extract_lc(args) -> int:
    tset = _load_set(args)
    block = _load_config(args.config) if args.config else {}
    lc_block = dict(block.get("lc", {}))
    lc_block.pop("band_halfwidth", None)
    cfg = LCConfig(**lc_block)
    episodes, events, rejects = extract_lane_changes(tset, cfg=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_lc_episodes(episodes, out / "lc_episodes.jsonl", config=cfg.__dict__)
    print(f"{len(events)} events, {len(episodes)} episodes "
          f"(rejections: {rejects}) -> {out / 'lc_episodes.jsonl'}")
    return 0


def _cmd_headway(args) -> int:
    tset = _load_set(args)
    records = extract_discharge_headways(tset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(
        out / "headways.csv",
        ("lane_id", "queue_position", "headway_s", "pair_type",
         "leader_id", "follower_id", "pass_t"),
        ((r.lane_id, r.queue_position, r.headway, r.pair_type,
          r.leader_id, r.follower_id, r.pass_t) for r in records),
    )
    print(f"{len(records)} headway records -> {out / 'headways.csv'}")
    return 0


def _cmd_fit_error(args) -> int:
    samples, durations = load_error_samples(args.samples)
    model = fit_bivariate_error(samples)
    mardia = mardia_tests(samples)
    derived = derive_error_set(model, durations=durations) if durations is not None else None
    save_error_model(model, args.out, derived)
    print(f"fit n={model.n_samples}: mu=({model.mu_x:.4f}, {model.mu_y:.4f}) "
          f"sigma=({model.sigma_x:.4f}, {model.sigma_y:.4f}) rho={model.rho:.4f}")
    print(f"mardia p_skewness={mardia.p_skewness:.4f} p_kurtosis={mardia.p_kurtosis:.4f}")
    return 0


def _cmd_markov_build(args) -> int:
    segments = load_stop_segments(args.segments)
    matrix = build_transition_matrix(segments)
    save_transition_matrix(matrix, args.out)
    print(f"{matrix.n_transitions} transitions -> {args.out}")
    return 0


def _cmd_markov_score(args) -> int:
    segments = load_stop_segments(args.segments)
    matrix = load_transition_matrix(args.matrix)
    _, derived = load_error_model(args.error_model)
    if derived is None:
        raise ValueError("error model file lacks the derived block")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(
        out,
        ("segment_id", "geom_mean", "n_steps"),
        ((s.segment_id(), geometric_mean_score(s, matrix, derived), s.n_frames - 1)
         for s in segments),
    )
    if args.per_step:
        write_csv(
            Path(args.per_step),
            ("segment_id", "step", "p_t"),
            ((s.segment_id(), k, float(p))
             for s in segments
             for k, p in enumerate(step_probabilities(s, matrix, derived))),
        )
    print(f"scored {len(segments)} segments -> {out}")
    return 0


def _pairs_of(args):
    eps_a, kind_a = _episode_loader(Path(args.episodes_a))
    eps_b, kind_b = _episode_loader(Path(args.episodes_b))
    if kind_a != kind_b:
        raise ValueError("episode archives have mismatched channel layouts")
    tag = lc_tagged if kind_a == "lc" else cf_tagged
    ids_a = [getattr(e, "episode_id", getattr(e, "segment_id", None))() for e in eps_a]
    ids_b = [getattr(e, "episode_id", getattr(e, "segment_id", None))() for e in eps_b]
    return eps_a, eps_b, ids_a, ids_b, tag


def _cmd_dtw_pairs(args) -> int:
    eps_a, eps_b, ids_a, ids_b, tag = _pairs_of(args)
    series = [np.asarray(e.series) for e in eps_a + eps_b]
    weights = pooled_weights(series)
    cfg = DTWConfig(weights=weights, band_halfwidth=args.band)
    rows = []
    for i, ea in enumerate(eps_a):
        for j, eb in enumerate(eps_b):
            res = dtw_distance(ea.series, eb.series, cfg)
            rows.append((ids_a[i], ids_b[j], res.distance,
                         res.distance / res.path_length, res.path_length))
    write_csv(Path(args.out), ("id_a", "id_b", "dtw", "dtw_star", "k"), rows)
    print(f"{len(rows)} pair distances -> {args.out}")
    return 0


def _cmd_simex_pairs(args) -> int:
    eps_a, eps_b, ids_a, ids_b, tag = _pairs_of(args)
    _, derived = load_error_model(args.error_model)
    if derived is None:
        raise ValueError("error model file lacks the derived block")
    gen = GaussianErrorGenerator(derived)
    tagged_a = [tag(e, True, i) for e, i in zip(eps_a, ids_a)]   # error-bearing side
    tagged_b = [tag(e, False, i) for e, i in zip(eps_b, ids_b)]  # reference side
    weights = pooled_weights([t.values for t in tagged_a + tagged_b])
    cfg = DTWConfig(weights=weights, band_halfwidth=args.band)
    sx = SimexConfig(
        lambda_grid=tuple(float(x) for x in args.lambda_grid.split(",")),
        b_replicates=args.b,
        master_seed=args.seed,
    )
    rows = []
    for i, ta in enumerate(tagged_a):
        for j, tb in enumerate(tagged_b):
            res = simex_distance(ta, tb, cfg, sx, gen, pair_key=(i, j))
            rows.append((ta.label, tb.label, res.raw_dtw_star, res.d0))
    write_csv(Path(args.out), ("id_a", "id_b", "dtw_star", "d0"), rows)
    print(f"{len(rows)} SIMEX-corrected pairs -> {args.out}")
    return 0


def _read_column(path: Path) -> list:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        col = len(header) - 1 if "d0" not in header else header.index("d0")
        for line in fh:
            cells = line.strip().split(",")
            if cells and cells[0]:
                values.append(float(cells[col]))
    return values


def _cmd_permtest(args) -> int:
    cross = _read_column(Path(args.cross))
    within = _read_column(Path(args.within))
    result = permutation_test_mean_diff(cross, within, args.b, args.seed)
    doc = {"T_obs": result.t_obs, "p": result.p, "B": result.b,
           "n_cross": len(cross), "n_within": len(within)}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(doc, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    config = _load_config(Path(args.config))
    report = run_pipeline(config, args.out, seed=args.seed, threads=args.threads)
    print(f"report -> {Path(args.out) / 'report.json'}")
    for section in ("headway", "markov", "cf_dtw", "lc_dtw"):
        if section in report:
            status = report[section].get("status")
            print(f"  {section}: {status}")
    return 0


def _add_data_args(p, with_map=True):
    p.add_argument("--data", required=True, help="trajectory file")
    p.add_argument("--format", default="jsonl", choices=("jsonl", "csv"))
    p.add_argument("--dt", type=float, default=0.1)
    if with_map:
        p.add_argument("--map", default=None, help="lane map JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajcompare",
        description="Compare microscopic driving behavior between trajectory datasets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a scripted synthetic scene")
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("extract-cf", help="extract car-following episodes")
    _add_data_args(p)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_cf)

    p = sub.add_parser("extract-stop", help="extract decelerating-to-stop segments")
    _add_data_args(p)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_stop)

    p = sub.add_parser("extract-lc", help="extract lane-change episodes")
    _add_data_args(p)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract_lc)

    p = sub.add_parser("headway", help="extract discharge headways")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_headway)

    p = sub.add_parser("fit-error", help="fit the bivariate error model")
    p.add_argument("--samples", required=True, help="CSV with eps_x, eps_y[, duration_s]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_error)

    p = sub.add_parser("markov-build", help="build the transition matrix")
    p.add_argument("--segments", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_markov_build)

    p = sub.add_parser("markov-score", help="score segments against a matrix")
    p.add_argument("--segments", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--error-model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--per-step", default=None)
    p.set_defaults(func=_cmd_markov_score)

    p = sub.add_parser("dtw-pairs", help="pairwise DTW distances between archives")
    p.add_argument("--episodes-a", required=True)
    p.add_argument("--episodes-b", required=True)
    p.add_argument("--band", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_dtw_pairs)

    p = sub.add_parser("simex-pairs", help="SIMEX-corrected pairwise distances")
    p.add_argument("--episodes-a", required=True, help="error-bearing archive")
    p.add_argument("--episodes-b", required=True, help="reference archive")
    p.add_argument("--error-model", required=True)
    p.add_argument("--band", type=int, default=None)
    p.add_argument("--lambda-grid", default="0,1,2")
    p.add_argument("--b", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simex_pairs)

    p = sub.add_parser("permtest", help="permutation test on two distance files")
    p.add_argument("--cross", required=True)
    p.add_argument("--within", required=True)
    p.add_argument("--b", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_permtest)

    p = sub.add_parser("run", help="run the full comparison pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(json.dumps({"stage": exc.stage, "error": exc.message}), file=sys.stderr)
        return 1
    except Exception as exc:  # surface a structured error for tooling
        print(json.dumps({"stage": args.command, "error": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
