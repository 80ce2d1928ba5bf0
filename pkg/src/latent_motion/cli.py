"""Command-line entry point.

Every subcommand resolves its parameters from built-in defaults, then an
optional JSON ``--config`` file, then explicit flags, and writes the result
to ``resolved_config.json`` in its output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- defaults -------------------------------------------------------------

SCENE = dict(n=256, seed=0, n_blobs=[1, 3], margin=4.5, speed=[0.3, 0.6], jitter=0.0, radius=[2.0, 3.5],
             mix=[-1.0, 1.0], T=9, C=8, H=16, W=16)
SCHEDULE = dict(schedule="linear-beta", S_train=1000, parameterization="epsilon")
DEFAULTS = {
    "gen-data": SCENE,
    "train-field": dict(seed=0, data=None, steps=4000, batch=16, lr=1e-3, lr_final=None, tau=2, alpha=0.5,
                        p_aug=0.5, p_drop=0.2, width=64, blocks=4, **SCHEDULE),
    "train-denoiser": dict(seed=0, data=None, steps=2000, batch=8, lr=1e-3, tau=2, lambda_drift=0.4,
                           eps_stab=1e-8, clip_norm=None, p_uncond=0.1, width=64, n_spatial=3, n_temporal=2, **SCHEDULE),
    "sample": dict(seed=0, n_seeds=1, denoiser=None, field=None, data=None, clip_index=0, steps=50,
                   cfg_scale=1.5, lambda_guide=25.0, rho=0.8, tau=2, guidance="noise", compare=False,
                   dump_trajectory=False, T=9, H=16, W=16),
    "heatmap": dict(clip=None, field=None, kinds=["drift", "field"], tau=2, eps_hm=1e-8),
    "check": dict(scan=[], only=[]),
}
REQUIRED = {"train-field": ["data"], "train-denoiser": ["data"], "sample": ["denoiser", "data"], "heatmap": ["clip"]}


def _pair(kind):
    return dict(nargs=2, type=kind, metavar=("LO", "HI"))


def build_parser() -> Parser:
    p = Parser(prog="latent-motion", description="Latent motion prior toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def command(name, help_text):
        sp = sub.add_parser(name, help=help_text, argument_default=None)
        sp.add_argument("--config", help="JSON file of parameters; flags override it")
        sp.add_argument("--out", help="output directory")
        return sp

    sp = command("gen-data", "render a synthetic blob dataset")
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-blobs", **_pair(int))
    sp.add_argument("--margin", type=float)
    sp.add_argument("--speed", **_pair(float))
    sp.add_argument("--jitter", type=float)
    sp.add_argument("--radius", **_pair(float))
    sp.add_argument("--mix", **_pair(float))
    for dim in ("T", "C", "H", "W"):
        sp.add_argument(f"--{dim}", type=int, dest=dim)

    def schedule_flags(sp):
        sp.add_argument("--schedule", choices=["linear-beta", "cosine"])
        sp.add_argument("--S-train", type=int, dest="S_train")
        sp.add_argument("--parameterization", choices=["epsilon", "v"])

    def train_flags(sp):
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--tau", type=int)
        sp.add_argument("--width", type=int)
        schedule_flags(sp)

    sp = command("train-field", "train the motion-field predictor")
    train_flags(sp)
    sp.add_argument("--lr-final", type=float)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--p-aug", type=float)
    sp.add_argument("--p-drop", type=float)
    sp.add_argument("--blocks", type=int)

    sp = command("train-denoiser", "train the diffusion backbone")
    train_flags(sp)
    sp.add_argument("--lambda-drift", type=float)
    sp.add_argument("--eps-stab", type=float)
    sp.add_argument("--clip-norm", type=float, help="clip the global gradient norm per step")
    sp.add_argument("--p-uncond", type=float)
    sp.add_argument("--n-spatial", type=int)
    sp.add_argument("--n-temporal", type=int)

    sp = command("sample", "draw clips with optional motion guidance")
    sp.add_argument("--denoiser", help="denoiser checkpoint directory")
    sp.add_argument("--field", help="field predictor checkpoint directory")
    sp.add_argument("--data", help="dataset supplying the conditioning vector")
    sp.add_argument("--clip-index", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-seeds", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--cfg-scale", type=float)
    sp.add_argument("--lambda-guide", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--tau", type=int)
    sp.add_argument("--guidance", choices=["noise", "latent-edit", "off"])
    sp.add_argument("--compare", action="store_const", const=True, help="also run unguided twins and tabulate")
    sp.add_argument("--dump-trajectory", action="store_const", const=True)
    for dim in ("T", "H", "W"):
        sp.add_argument(f"--{dim}", type=int, dest=dim)

    sp = command("heatmap", "render drift and field heatmaps for one clip")
    sp.add_argument("--clip", help="clip .lmt file (a sibling .meta enables localization)")
    sp.add_argument("--field", help="field predictor checkpoint directory")
    sp.add_argument("--kinds", nargs="+", choices=["drift", "field"])
    sp.add_argument("--tau", type=int)
    sp.add_argument("--eps-hm", type=float)

    sp = command("check", "run the invariant suite")
    sp.add_argument("--scan", nargs="+", help="directories whose .lmt files must round-trip")
    sp.add_argument("--only", nargs="+", help="run only the named checks")
    return p


def resolve(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    cfg["out"] = None
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        # a section named after the command overrides top-level keys
        section = loaded.pop(cmd, {})
        loaded = {k: v for k, v in loaded.items() if k not in DEFAULTS}
        for src in (loaded, section):
            unknown = sorted(set(src) - set(cfg))
            if unknown:
                raise UsageError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
            cfg.update(src)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    if cmd != "check" and not cfg["out"]:
        raise UsageError(f"{cmd}: --out is required")
    for key in REQUIRED.get(cmd, []):
        if not cfg.get(key):
            raise UsageError(f"{cmd}: --{key.replace('_', '-')} is required")
    return cfg


def write_resolved(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    # the output path is implied by where the file lives; leaving it out keeps reruns byte-identical
    record = {"command": command, "version": __version__, "config": {k: v for k, v in cfg.items() if k != "out"}}
    (out / "resolved_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------

def scene_ranges(cfg):
    from .scenegen import SceneRanges

    return SceneRanges(n_blobs=tuple(cfg["n_blobs"]), position_margin=cfg["margin"], speed=tuple(cfg["speed"]),
                       velocity_jitter=cfg["jitter"], radius=tuple(cfg["radius"]), mix=tuple(cfg["mix"]),
                       T=cfg["T"], C=cfg["C"], H=cfg["H"], W=cfg["W"])


def cmd_gen_data(cfg, out: Path) -> int:
    from .scenegen import SceneError, make_dataset, save_dataset
    from .tensorio import RngStream

    try:
        ranges = scene_ranges(cfg)
        ranges.validate()
        if cfg["n"] < 1:
            raise SceneError("n must be >= 1")
    except (SceneError, TypeError) as exc:
        raise UsageError(f"gen-data: {exc}") from None
    clips = make_dataset(cfg["n"], ranges, RngStream(cfg["seed"]))
    for k, clip in enumerate(clips):
        clip.scene.validate()
    names = save_dataset(clips, out)
    print(f"wrote {len(names)} clips to {out}")
    return EXIT_OK


def _schedule(cfg):
    from .schedule import ScheduleError, build_schedule

    try:
        return build_schedule(cfg["schedule"], cfg["S_train"], cfg["parameterization"])
    except ScheduleError as exc:
        raise UsageError(str(exc)) from None


def _check_hyper(obj):
    for f in fields(obj):
        v = getattr(obj, f.name)
        if f.name.startswith("p_") and v is not None and not 0.0 <= v <= 1.0:
            raise UsageError(f"{f.name} must lie in [0, 1]")
    if obj.steps < 0 or obj.batch < 1 or obj.tau < 1:
        raise UsageError("steps must be >= 0, batch and tau >= 1")


def _write_metrics(path: Path, header: str, rows) -> None:
    lines = [header] + ["\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def cmd_train_field(cfg, out: Path) -> int:
    from .fieldnet import FieldHyper, hyper_dict, save_fieldnet, train_fieldnet
    from .scenegen import load_dataset
    from .tensorio import RngStream

    sched = _schedule(cfg)
    hyper = FieldHyper(tau=cfg["tau"], alpha=cfg["alpha"], p_aug=cfg["p_aug"], p_drop=cfg["p_drop"], lr=cfg["lr"],
                       steps=cfg["steps"], batch=cfg["batch"], lr_final=cfg["lr_final"])
    _check_hyper(hyper)
    data = load_dataset(cfg["data"])
    metrics = []
    net = train_fieldnet(data, sched, hyper, RngStream(cfg["seed"]), arch=dict(N=cfg["blocks"], width=cfg["width"]),
                         metrics=metrics)
    save_fieldnet(net, out, {"hyper": hyper_dict(hyper), "schedule": sched.to_config()})
    _write_metrics(out / "metrics.tsv", "step\tloss", metrics)
    print(f"trained field predictor for {hyper.steps} steps -> {out}")
    return EXIT_OK


def cmd_train_denoiser(cfg, out: Path) -> int:
    from .denoiser import DenoiserHyper, save_denoiser, train_denoiser
    from .scenegen import load_dataset
    from .tensorio import RngStream

    sched = _schedule(cfg)
    hyper = DenoiserHyper(lambda_drift=cfg["lambda_drift"], tau=cfg["tau"], eps_stab=cfg["eps_stab"],
                          p_uncond=cfg["p_uncond"], lr=cfg["lr"], steps=cfg["steps"], batch=cfg["batch"],
                          clip_norm=cfg["clip_norm"])
    _check_hyper(hyper)
    data = load_dataset(cfg["data"])
    metrics = []
    arch = dict(width=cfg["width"], n_spatial=cfg["n_spatial"], n_temporal=cfg["n_temporal"])
    net = train_denoiser(data, sched, hyper, RngStream(cfg["seed"]), arch=arch, metrics=metrics)
    save_denoiser(net, out, {"hyper": asdict(hyper), "schedule": sched.to_config()})
    _write_metrics(out / "metrics.tsv", "step\tl_denoise\tl_drift\tw\tl_train", metrics)
    print(f"trained denoiser for {hyper.steps} steps -> {out}")
    return EXIT_OK


def cmd_sample(cfg, out: Path) -> int:
    from .denoiser import load_denoiser
    from .fieldnet import load_fieldnet
    from .sampler import SamplerConfig, SamplerError, dump_trajectory, sample
    from .scenegen import load_dataset
    from .schedule import schedule_from_config
    from .tensorio import RngStream, write_tensor

    scfg = SamplerConfig(steps=cfg["steps"], cfg_scale=cfg["cfg_scale"], lambda_guide=cfg["lambda_guide"],
                         rho=cfg["rho"], tau=cfg["tau"], mode=cfg["guidance"], T=cfg["T"], H=cfg["H"], W=cfg["W"])
    try:
        scfg.validate()
    except SamplerError as exc:
        raise UsageError(f"sample: {exc}") from None
    if cfg["n_seeds"] < 1:
        raise UsageError("sample: --n-seeds must be >= 1")
    den, meta = load_denoiser(cfg["denoiser"])
    sched = schedule_from_config(meta["schedule"])
    net = load_fieldnet(cfg["field"])[0] if cfg["field"] else None
    if net is None and (scfg.mode != "off" or cfg["compare"]) and scfg.lambda_guide != 0:
        raise UsageError("sample: guidance needs --field")
    data = load_dataset(cfg["data"])
    if not 0 <= cfg["clip_index"] < len(data):
        raise UsageError(f"sample: --clip-index out of range 0..{len(data) - 1}")
    c = data[cfg["clip_index"]].c
    off = SamplerConfig(**{**asdict(scfg), "mode": "off"})
    rows = []
    for k in range(cfg["n_seeds"]):
        seed = cfg["seed"] + k
        traj = sample(den, net, scfg, c, RngStream(seed), sched)
        if not traj.all_finite():
            print(f"seed {seed}: non-finite values in trajectory", file=sys.stderr)
            return EXIT_FAIL
        write_tensor(traj.z_out, out / f"sample_{seed}.lmt")
        if cfg["dump_trajectory"]:
            dump_trajectory(traj, out / f"trajectory_{seed}")
        row = [seed, traj.final_l_guide(), traj.l_guide_out]
        if cfg["compare"]:
            base = sample(den, net, off, c, RngStream(seed), sched)
            write_tensor(base.z_out, out / f"sample_{seed}_unguided.lmt")
            diff = float(np.linalg.norm(traj.z_out - base.z_out))
            row += [base.final_l_guide(), base.l_guide_out, diff]
        rows.append(row)
    header = "seed\tl_guide_last_step\tl_guide_out"
    if cfg["compare"]:
        header += "\tunguided_l_guide_last_step\tunguided_l_guide_out\tz_out_distance"
    _write_metrics(out / "l_guide.tsv", header, rows)
    print((out / "l_guide.tsv").read_text(), end="")
    return EXIT_OK


def cmd_heatmap(cfg, out: Path) -> int:
    from .fieldnet import load_fieldnet
    from .heatmap import drift_heatmap, emit_image, field_heatmap, localization, motion_region
    from .scenegen import load_clip

    kinds = list(dict.fromkeys(cfg["kinds"]))
    if not kinds or set(kinds) - {"drift", "field"}:
        raise UsageError("heatmap: --kinds must name drift and/or field")
    if "field" in kinds and not cfg["field"]:
        raise UsageError("heatmap: the field heatmap needs --field")
    clip = load_clip(cfg["clip"])
    lines = []
    for kind in kinds:
        if kind == "drift":
            res = drift_heatmap(clip.z, cfg["tau"], cfg["eps_hm"])
        else:
            net = load_fieldnet(cfg["field"])[0]
            c = clip.c if clip.c is not None else np.zeros(net.D_c)
            res = field_heatmap(clip.z, net, c, cfg["tau"])
        emit_image(res.R, out / f"{kind}.pgm")
        lines.append(f"{kind}.kind = {kind}")
        lines.append(f"{kind}.t_star = {res.t_star}")
        lines.append(f"{kind}.b_norm = {res.b_norm!r}")
        lines.append(f"{kind}.max = {float(res.R.max())!r}")
        if clip.scene is not None:
            inside, outside = localization(res.R, motion_region(clip.scene, res.t_star, cfg["tau"]))
            lines.append(f"{kind}.mean_inside = {inside!r}")
            lines.append(f"{kind}.mean_outside = {outside!r}")
    (out / "heatmap.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_check(cfg, out: Path | None) -> int:
    from .checks import CHECKS, run_checks

    names = {n for n, _ in CHECKS}
    bad = [n for n in cfg["only"] if n not in names]
    if bad:
        raise UsageError(f"check: unknown checks {bad}; available: {sorted(names)}")
    for root in cfg["scan"]:
        if not Path(root).is_dir():
            raise UsageError(f"check: {root} is not a directory")
    results = run_checks(cfg["scan"], cfg["only"] or None)
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}: {detail}" for name, ok, detail in results]
    print("\n".join(lines))
    if out is not None:
        (out / "check_report.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-field": cmd_train_field,
    "train-denoiser": cmd_train_denoiser,
    "sample": cmd_sample,
    "heatmap": cmd_heatmap,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        out = Path(cfg["out"]) if cfg.get("out") else None
        if out is not None:
            if out.exists() and not out.is_dir():
                raise UsageError(f"--out {out} exists and is not a directory")
            write_resolved(cfg, out, args.command)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
