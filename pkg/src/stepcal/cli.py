"""Command-line entry point.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
Behavior depends only on the JSON config, the flags and the seed.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .calibrator import NeuralStepCalibrator, train_calibrator
from .denoiser import AnalyticGMDenoiser, TinyDenoiser, save_checkpoint, train_denoiser
from .diffusion import generate
from .imagecore import load_image, rng_stream, save_image
from .restore import RestoreConfig, trace_row, write_traces
from .schedule import build_schedule
from .synth import (CorpusSpec, DegradeSpec, degrade_corpus, gen_clean_corpus, gen_zstack, linear_depth_profile,
                    load_corpus, save_corpus, two_class_corpus)

DEFAULT_CONFIG = {
    "seed": 0,
    "schedule": {"kind": "cosine", "T": 1000, "params": {"s": 0.008}},
    "corpus": {"kind": "two_class", "count": 1024, "shape": [1, 32, 32], "seed": 0},
    "degrade": {"kind": "mixed", "t": None, "t_range": [1, 200], "t_dist": "uniform", "p": 0.03,
                "mask_kind": "halfplane", "two_region_fraction": 0.5, "seed": 0},
    "denoiser": {"T_prime": 200, "epochs": 20, "lr": 0.002, "loss": "L1", "batch_size": 16,
                 "optimizer": "adam", "width": 64, "time_dim": 16},
    "calibrator": {"T_cal": 300, "augment": True, "epochs": 60, "lr": 0.001, "batch_size": 16,
                   "optimizer": "adam", "width": 64, "head": 100, "features": "dct_log"},
    "restore": {"d": 10, "T_prime": 200, "nfe_budget": 400, "noise_at_final_step": True,
                "clamp_recalibration": True},
    "bench": {"count": 60, "seeds": [0, 1, 2], "roster": list(bench.ROSTER)},
    "zstack": {"volumes": 20, "n_slices": 20, "t_max": 120, "depth_start": 22.0, "depth_step": 2.0},
    "tpred_hist": {"count": 400, "p": 0.03, "bin_width": 10},
    "checkpoints": {k: None for k in bench.CHECKPOINT_KEYS},
}

# Keys whose values are free-form mappings rather than fixed blocks.
_OPEN_BLOCKS = {("schedule", "params")}


class UsageError(Exception):
    pass


def _merge(base: dict, override: dict, path=()) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base and path not in _OPEN_BLOCKS:
            raise bench.ConfigError(f"unknown config key {'.'.join(path + (k,))}")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and path + (k,) not in _OPEN_BLOCKS:
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise bench.ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as e:
        raise bench.ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(user, dict):
        raise bench.ConfigError("config root must be a JSON object")
    return _merge(DEFAULT_CONFIG, user)


def _schedule(cfg):
    s = cfg["schedule"]
    return build_schedule(s["kind"], int(s["T"]), **s.get("params", {}))


def _restore_cfg(cfg) -> RestoreConfig:
    return RestoreConfig(**cfg["restore"])


def _degrade_spec(cfg, **over) -> DegradeSpec:
    d = {**cfg["degrade"], **over}
    d["t_range"] = tuple(d["t_range"])
    return DegradeSpec(**d)


def _clean_corpus(cfg, data_dir=None):
    if data_dir:
        imgs, labels, _ = load_corpus(data_dir)
        return imgs, labels
    c = cfg["corpus"]
    shape = tuple(c["shape"])
    if c["kind"] == "two_class":
        return two_class_corpus(int(c["count"]), int(c["seed"]), shape)
    return gen_clean_corpus(CorpusSpec(c["kind"], shape, int(c["count"]), seed=int(c["seed"])))


def _checkpoints(cfg, args) -> dict:
    ck = dict(cfg["checkpoints"])
    for key in bench.CHECKPOINT_KEYS:
        val = getattr(args, key, None)
        if val:
            ck[key] = val
    return ck


# -- subcommands ------------------------------------------------------------------------


def cmd_gen_data(cfg, args):
    imgs, labels = _clean_corpus(cfg)
    out = Path(args.out)
    save_corpus(out / "clean", imgs, labels, np.zeros(len(imgs), dtype=np.int64))
    msg = f"wrote {len(imgs)} clean images to {out / 'clean'}"
    if args.degrade:
        lq, t_true, _ = degrade_corpus(imgs, _degrade_spec(cfg), _schedule(cfg))
        save_corpus(out / "degraded", lq, labels, t_true)
        msg += f" and degraded copies to {out / 'degraded'}"
    print(msg)


def cmd_train_denoiser(cfg, args):
    d, s = cfg["denoiser"], _schedule(cfg)
    imgs, _ = _clean_corpus(cfg, args.data)
    model = TinyDenoiser(imgs.shape[1], int(d["width"]), int(d["time_dim"]), rng=rng_stream(cfg["seed"], 1))
    rep = train_denoiser(model, imgs, s, int(d["T_prime"]), int(d["epochs"]), float(d["lr"]), d["loss"],
                         rng_stream(cfg["seed"], 2), int(d["batch_size"]), d["optimizer"])
    save_checkpoint(args.out, model, s, {"T_prime": d["T_prime"], "final_loss": f"{rep.final_loss:.6f}"})
    print(f"denoiser saved to {args.out}; final {d['loss']} loss {rep.final_loss:.4f}")


def cmd_train_calibrator(cfg, args):
    c, s = cfg["calibrator"], _schedule(cfg)
    augment = bool(c["augment"]) and not args.no_augment
    imgs, _ = _clean_corpus(cfg, args.data)
    model = NeuralStepCalibrator(imgs.shape[1], int(c["width"]), int(c["head"]),
                                 T_prime=int(cfg["restore"]["T_prime"]), t_scale=float(c["T_cal"]),
                                 features=c["features"], rng=rng_stream(cfg["seed"], 3))
    rep = train_calibrator(model, imgs, s, int(c["T_cal"]), augment, int(c["epochs"]), float(c["lr"]),
                           rng_stream(cfg["seed"], 4), int(c["batch_size"]), c["optimizer"])
    save_checkpoint(args.out, model, s, {"augment": int(augment), "T_cal": c["T_cal"]})
    print(f"calibrator saved to {args.out}; final squared step error {rep.final_loss:.1f}")


def cmd_restore(cfg, args):
    method = args.method
    needed = bench.method_requirements(method)
    ck = _checkpoints(cfg, args)
    bench.check_checkpoints(ck, needed)
    x = load_image(args.inp)
    models = bench.load_models(ck, needed)
    seed = cfg["seed"] if args.seed is None else args.seed
    out, trace = bench.run_method(method, x, models, _restore_cfg(cfg), rng_stream(seed), steps=args.steps)
    save_image(args.out, out)
    if args.trace:
        write_traces(args.trace, [trace_row(Path(args.inp).stem, trace)])
    print(f"{trace.method}: NFE {trace.nfe}, calibrations {trace.predictions or '-'}"
          + (", budget hit" if trace.budget_hit else ""))


def cmd_sample(cfg, args):
    seed = cfg["seed"] if args.seed is None else args.seed
    if args.analytic:
        s = _schedule(cfg)
        den = AnalyticGMDenoiser([tuple(c) for c in json.loads(args.analytic)], s)
    else:
        ck = _checkpoints(cfg, args)
        bench.check_checkpoints(ck, {"denoiser"})
        models = bench.load_models(ck, {"denoiser"})
        den, s = models.denoiser, models.schedule
    shape = tuple(int(v) for v in args.shape.split(","))
    imgs = np.stack([generate(den, s, shape, rng_stream(seed, i)) for i in range(args.count)])
    out = Path(args.out)
    save_corpus(out, imgs)
    print(f"wrote {len(imgs)} samples to {out}")


def cmd_bench(cfg, args):
    b = cfg["bench"]
    seeds = tuple(args.seeds) if args.seeds else tuple(b["seeds"])
    ecfg = bench.ExperimentConfig(count=int(args.count or b["count"]), shape=tuple(cfg["corpus"]["shape"]),
                                  degrade=_degrade_spec(cfg), roster=tuple(args.roster or b["roster"]),
                                  checkpoints=_checkpoints(cfg, args), seeds=seeds, out_dir=args.out,
                                  restore=_restore_cfg(cfg), jobs=args.jobs,
                                  schedule=_schedule(cfg))
    bench.check_checkpoints(ecfg.checkpoints, ecfg.required_models())
    report = bench.run_benchmark(ecfg)
    sys.stdout.write(bench.format_table(report.degraded + report.rows))


def cmd_zstack(cfg, args):
    z = cfg["zstack"]
    method = args.method
    needed = bench.method_requirements(method)
    ck = _checkpoints(cfg, args)
    bench.check_checkpoints(ck, needed)
    models = bench.load_models(ck, needed)
    s = models.schedule or _schedule(cfg)
    seed = cfg["seed"] if args.seed is None else args.seed
    profile = linear_depth_profile(int(z["n_slices"]), int(z["t_max"]))
    n_vol = int(args.volumes or z["volumes"])
    clean, _ = two_class_corpus(n_vol, bench.EVAL_SEED_OFFSET + seed, tuple(cfg["corpus"]["shape"]))
    stacks = [np.broadcast_to(c, (len(profile),) + c.shape) for c in clean]
    vols = [gen_zstack(c, s, profile, seed=seed * 100_003 + v, depth_start=float(z["depth_start"]),
                       depth_step=float(z["depth_step"])) for v, c in enumerate(clean)]
    rcfg = _restore_cfg(cfg)
    restorer = lambda x, rng: bench.run_method(method, x, models, rcfg, rng)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    curve = bench.zstack_eval(vols, stacks, restorer, profile, seed, args.out)
    print(f"depth curve written to {args.out}; PSNR slope degraded {curve.slope('degraded'):.3f} dB/um, "
          f"restored {curve.slope('restored'):.3f} dB/um")


def cmd_tpred_hist(cfg, args):
    h = cfg["tpred_hist"]
    ck = _checkpoints(cfg, args)
    bench.check_checkpoints(ck, {"calibrator"})
    models = bench.load_models(ck, {"calibrator"})
    from .denoiser import checkpoint_schedule, read_manifest

    s = checkpoint_schedule(read_manifest(ck["calibrator"]))
    seed = cfg["seed"] if args.seed is None else args.seed
    T_prime = int(cfg["restore"]["T_prime"])
    lq, _ = bench.geometric_corpus(int(args.count or h["count"]), s, seed, float(h["p"]), T_prime,
                                   tuple(cfg["corpus"]["shape"]))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    edges, counts, _ = bench.tpred_histogram(models.calibrator, lq, T_prime, int(h["bin_width"]), args.out)
    for lo, c in zip(edges[:-1], counts):
        print(f"[{lo:3d}, {lo + int(h['bin_width']):3d})  {c}")


# -- parser -------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_ckpt(p, keys):
    for key in keys:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="DIR", help=f"{key} checkpoint directory")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stepcal", description="Step-calibrated diffusion restoration toolkit.")
    p.add_argument("--config", help="JSON config; unspecified keys keep their defaults")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for batch restoration")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic clean corpus (and optionally degraded copies)")
    g.add_argument("--out", required=True)
    g.add_argument("--degrade", action="store_true")

    for name, helptext in (("train-denoiser", "train the noise predictor"),
                           ("train-calibrator", "train the step calibrator")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", help="corpus directory written by gen-data (default: generate from config)")
        t.add_argument("--out", required=True, help="checkpoint directory")
        if name == "train-calibrator":
            t.add_argument("--no-augment", action="store_true", help="disable two-region augmentation")

    r = sub.add_parser("restore", help="restore one PFT or PNG image")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--method", default="rscd",
                   help="rscd, no_recal, fixed, fixed10, fixed50, ccdf, ccdf20, median, median5, nonparam, "
                        "rscd_unaug or rscd_linear")
    r.add_argument("--steps", type=int, help="step count for fixed/ccdf, kernel size for median")
    r.add_argument("--seed", type=int)
    r.add_argument("--trace", help="optional trace CSV path")
    _add_ckpt(r, bench.CHECKPOINT_KEYS)

    s = sub.add_parser("sample", help="unconditional generation from pure noise")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--shape", default="1,32,32")
    s.add_argument("--seed", type=int)
    s.add_argument("--analytic", help='use the exact mixture denoiser, e.g. "[[1, 0.5, 0.01]]"')
    _add_ckpt(s, ("denoiser",))

    b = sub.add_parser("bench", help="run the method roster on the benchmark corpus")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", type=int, nargs="+")
    b.add_argument("--count", type=int)
    b.add_argument("--roster", nargs="+")
    _add_ckpt(b, bench.CHECKPOINT_KEYS)

    z = sub.add_parser("zstack", help="simulate depth-degraded stacks and write per-depth curves")
    z.add_argument("--out", required=True, help="CSV path")
    z.add_argument("--method", default="rscd")
    z.add_argument("--volumes", type=int)
    z.add_argument("--seed", type=int)
    _add_ckpt(z, bench.CHECKPOINT_KEYS)

    h = sub.add_parser("tpred-hist", help="histogram of calibrated steps on a geometric-step corpus")
    h.add_argument("--out", required=True, help="CSV path")
    h.add_argument("--count", type=int)
    h.add_argument("--seed", type=int)
    _add_ckpt(h, ("calibrator",))
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-denoiser": cmd_train_denoiser,
    "train-calibrator": cmd_train_calibrator,
    "restore": cmd_restore,
    "sample": cmd_sample,
    "bench": cmd_bench,
    "zstack": cmd_zstack,
    "tpred-hist": cmd_tpred_hist,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        if not args.command:
            raise UsageError("a subcommand is required; see --help")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        COMMANDS[args.command](cfg, args)
        return 0
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001  anything else is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
