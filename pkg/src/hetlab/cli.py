"""Command-line entry point: ``hetlab <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 data, 4 numeric.  Every command writes a
``manifest.json`` holding the argv needed to re-run it; ``hetlab replay``
re-executes a manifest and reports whether the CSV outputs match byte for byte.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("HETLAB_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from pathlib import Path  # noqa: E402

from hetlab.errors import HetlabError, NumericError, StructuralError  # noqa: E402
from hetlab.hetdist import (  # noqa: E402
    ENV_KINDS,
    HetKind,
    QuantifyConfig,
    distance_matrix,
    logged_policy_distance_matrix,
    meta_distance_matrix,
)
from hetlab.pomg import SamplePool, read_trajectories, write_trajectories  # noqa: E402
from hetlab.spread import CASE_STUDY_VARIANTS, SCENARIOS, SpreadEnv, collect_pool, make_config  # noqa: E402
from hetlab.trainer import TrainConfig, checksums, hetdps_train  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CASESTUDY_EPISODES = 200

log = logging.getLogger("hetlab")


def _config_json(text: str | None) -> dict:
    """``--config`` takes a JSON file path or an inline JSON object."""
    if not text:
        return {}
    p = Path(text)
    raw = p.read_text() if p.exists() else text
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise StructuralError(f"--config is neither a JSON file nor JSON: {exc}") from None
    if not isinstance(d, dict):
        raise StructuralError("--config must hold a JSON object")
    return d


def _write_manifest(out: Path, argv: list[str], extra: dict, t0: float) -> None:
    manifest = {
        "argv": argv,
        **extra,
        "checksums": checksums(out),
        "wall_clock_s": round(time.time() - t0, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))


def _replay_argv(args, drop=("--out", "--config")) -> list[str]:
    """Argv that reproduces this run, minus the output directory; config inlined."""
    argv = [args.command]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "out", "func", "config", "verbose") or v is None:
            continue
        flag = "--" + k.replace("_", "-")
        if k in ("trajectories", "manifest"):
            argv.append(str(Path(v).resolve()))
        else:
            argv += [flag, str(v)]
    if getattr(args, "config", None):
        argv += ["--config", json.dumps(_config_json(args.config), sort_keys=True)]
    return argv


def _quantify_cfg(overrides: dict) -> QuantifyConfig:
    return QuantifyConfig.from_json({**QuantifyConfig().to_json(), **overrides}) if overrides else QuantifyConfig()


def cmd_casestudy(args) -> int:
    t0 = time.time()
    cfg = make_config(args.variant, seed=args.seed)
    qcfg = _quantify_cfg(_config_json(args.config).get("quantify", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env = SpreadEnv(cfg)
    pool = collect_pool(cfg, args.episodes, seed=args.seed)
    sums = {}
    for kind in (*ENV_KINDS, HetKind.META):
        dm, _ = distance_matrix(kind, pool, env, qcfg, seed=args.seed)
        dm.save(out)
        within, cross = dm.block_means(cfg.groups)
        sums[kind.value] = {"within": within, "cross": cross}
        print(f"{kind.value:10s} within={within:.4f} cross={cross:.4f}")
    _write_manifest(out, _replay_argv(args), {"command": "casestudy", "scenario": cfg.to_json(),
                                              "quantify": qcfg.to_json(), "block_means": sums}, t0)
    return EXIT_OK


def cmd_quantify(args) -> int:
    t0 = time.time()
    cfg = make_config(args.scenario, seed=args.seed)
    qcfg = _quantify_cfg(_config_json(args.config).get("quantify", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = collect_pool(cfg, args.episodes, seed=args.seed)
    dm, _ = distance_matrix(args.kind, pool, SpreadEnv(cfg), qcfg, seed=args.seed)
    dm.save(out)
    _write_manifest(out, _replay_argv(args), {"command": "quantify", "scenario": cfg.to_json(),
                                              "quantify": qcfg.to_json()}, t0)
    return EXIT_OK


def cmd_collect(args) -> int:
    cfg = make_config(args.scenario, seed=args.seed)
    pool = collect_pool(cfg, args.episodes, seed=args.seed)
    write_trajectories(args.out, pool.records(), {"scenario": cfg.scenario, "seed": args.seed})
    return EXIT_OK


def cmd_traject_quantify(args) -> int:
    t0 = time.time()
    header, records = read_trajectories(args.trajectories)
    qcfg = _quantify_cfg(_config_json(args.config).get("quantify", {}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenario = str(header.get("scenario", ""))
    pool = SamplePool(max(len(records), 1), header["n_agents"]).extend(records)
    dm, _ = meta_distance_matrix(pool, header["n_agents"], qcfg, seed=args.seed, scenario=scenario, records=records)
    dm.save(out)
    written = ["meta"]
    if all(r.action_probs is not None for r in records):
        pdm, _ = logged_policy_distance_matrix(records, qcfg, seed=args.seed)
        pdm.save(out)
        written.append("policy")
    _write_manifest(out, _replay_argv(args), {"command": "traject-quantify", "kinds": written,
                                              "quantify": qcfg.to_json()}, t0)
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.time()
    scenario = make_config(args.scenario, seed=args.seed)
    overrides = _config_json(args.config)
    base = TrainConfig().to_json()
    base.update(overrides)
    base["seed"] = args.seed
    if args.quant_period is not None:
        base["quant_period"] = args.quant_period
    if args.merge_mode is not None:
        base["merge_mode"] = args.merge_mode
    if args.init is not None:
        base["init"] = args.init
    cfg = TrainConfig.from_json(base)
    out = Path(args.out)
    res = hetdps_train(cfg, scenario, args.algo, out_dir=out)
    print(f"final evaluation reward {res.final_reward:.4f}")
    extra = {k: v for k, v in res.manifest.items() if k not in ("checksums", "wall_clock_s")}
    _write_manifest(out, _replay_argv(args), extra, t0)
    return EXIT_OK


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    if "argv" not in manifest:
        raise StructuralError("manifest has no argv to replay")
    out = Path(args.out)
    code = main([*manifest["argv"], "--out", str(out)])
    if code != EXIT_OK:
        return code
    fresh = json.loads((out / "manifest.json").read_text())["checksums"]
    want = {k: v for k, v in manifest["checksums"].items() if k.endswith(".csv")}
    got = {k: v for k, v in fresh.items() if k.endswith(".csv")}
    if want != got:
        diff = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        print(f"replay mismatch in {diff}", file=sys.stderr)
        return EXIT_DATA
    print(f"replay reproduced {len(got)} CSV file(s) byte for byte")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetlab", description="Agent heterogeneity quantification and HetDPS training.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--config", help="JSON file or inline JSON with overrides")

    sp = sub.add_parser("casestudy", help="five distance matrices for one case-study variant")
    sp.add_argument("--variant", required=True, choices=CASE_STUDY_VARIANTS)
    sp.add_argument("--episodes", type=int, default=CASESTUDY_EPISODES)
    common(sp)
    sp.set_defaults(func=cmd_casestudy)

    sp = sub.add_parser("quantify", help="one distance matrix for a scenario")
    sp.add_argument("--kind", required=True, choices=[k.value for k in (*ENV_KINDS, HetKind.META)])
    sp.add_argument("--scenario", required=True, choices=SCENARIOS)
    sp.add_argument("--episodes", type=int, default=CASESTUDY_EPISODES)
    common(sp)
    sp.set_defaults(func=cmd_quantify)

    sp = sub.add_parser("collect", help="write a trajectory log from scripted/random play")
    sp.add_argument("--scenario", required=True, choices=SCENARIOS)
    sp.add_argument("--episodes", type=int, default=CASESTUDY_EPISODES)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="JSONL file")
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("traject-quantify", help="Meta-Het (and logged Policy-Het) from a JSONL log")
    sp.add_argument("trajectories")
    common(sp)
    sp.set_defaults(func=cmd_traject_quantify)

    sp = sub.add_parser("train", help="train one sharing paradigm")
    sp.add_argument("--scenario", required=True, choices=SCENARIOS)
    sp.add_argument("--algo", required=True, choices=["fps", "nps", "fpsid", "hetdps"])
    sp.add_argument("--quant-period", type=int)
    sp.add_argument("--merge-mode", choices=["majority", "random", "average", "weighted"])
    sp.add_argument("--init", choices=["fps", "nps"])
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("replay", help="re-run a manifest and compare CSV checksums")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"hetlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HetlabError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"hetlab: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
