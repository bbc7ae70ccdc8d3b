"""Command-line front end.

Every subcommand reads an optional ``key=value`` config file (``--config``);
flags override file values and the effective configuration is echoed into
the run manifest together with the seed and checkpoint hash.

Exit status: 0 on success, 2 for usage or configuration errors, 1 for
runtime failures (including failed output checks).
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import torch

from . import __version__
from .adapter import Adapter, extract_condition
from .denoiser import AttentionCache, Denoiser, DenoiserConfig, HookSet, checkpoint_hash
from .errors import ConfigError, MasaError
from .eval import rank_table, read_rows
from .fusion import (INIT_MODES, EditConfig, MaskRegion, edit_without_adapter, embctrl_edit,
                     generate_plain, invert, load_condition, masafusion_edit, save_edit_result)
from .inversion import InversionResult, NtiConfig, save_inversion
from .numeric import RngStream, Tensor, load_tdump, save_tdump
from .schedule import ddim_invert_step
from .text import TextEncoder
from .trainer import TrainConfig, base_schedule, make_toy_dataset, train, write_loss_trace

log = logging.getLogger("masafusion")

CKPT_ENV = "MASAFUSION_CKPT_DIR"


class UsageError(Exception):
    pass


# -- config handling ----------------------------------------------------------

def parse_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def effective_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            if key not in defaults:
                raise UsageError(f"unknown config key {key!r}")
            try:
                cfg[key] = _coerce(value, defaults[key]) if defaults[key] is not None else value
            except ValueError:
                raise UsageError(f"bad value for {key!r}: {value!r}") from None
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


TRAIN_DEFAULTS = {
    "steps": TrainConfig.steps, "batch_size": TrainConfig.batch_size, "lr": TrainConfig.lr,
    "seed": TrainConfig.seed, "cond_drop": TrainConfig.cond_drop,
    "adapter_prob": TrainConfig.adapter_prob, "clip": TrainConfig.clip,
    "optimizer": TrainConfig.optimizer, "decay": TrainConfig.decay,
    "dataset_size": 64, "dataset_seed": 0,
}

SAMPLING_DEFAULTS = {"T": 50, "w": 7.5, "kind": "di", "nti_steps": 10, "nti_lr": 2e-4}

EDIT_DEFAULTS = {
    **SAMPLING_DEFAULTS,
    "pipeline": "masafusion", "init_mode": "gaussian", "adapter_strength": 1.0, "seed": 0,
    "turns": 1, "layers": "",
}


# -- shared helpers -----------------------------------------------------------

def _checkpoint(args) -> Path:
    path = args.checkpoint or os.environ.get(CKPT_ENV)
    if not path:
        raise UsageError(f"no checkpoint given (use --checkpoint or set {CKPT_ENV})")
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise MasaError(f"checkpoint not found: {path}")
    return path


def _load_model(args):
    path = _checkpoint(args)
    model = Denoiser.load(path)
    return model, checkpoint_hash(path)


def _load_image(path: str, model: Denoiser) -> Tensor:
    if not Path(path).exists():
        raise MasaError(f"image file not found: {path}")
    x = load_tdump(path)
    cfg = model.config
    if tuple(x.shape) != (cfg.channels, cfg.height, cfg.width):
        raise MasaError(f"image {path} has shape {tuple(x.shape)}, model expects "
                        f"{(cfg.channels, cfg.height, cfg.width)}")
    return x


def write_pgm(grid: Tensor, path: str | Path, lo: float | None = None, hi: float | None = None) -> None:
    """Plain-text graymap with 255 levels; range defaults to the data range."""
    g = grid.detach()
    lo = float(g.min()) if lo is None else lo
    hi = float(g.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    levels = ((g - lo) * scale).round().clamp(0, 255).to(torch.int64)
    H, W = levels.shape
    rows = [" ".join(str(v) for v in row) for row in levels.tolist()]
    Path(path).write_text(f"P2\n{W} {H}\n255\n" + "\n".join(rows) + "\n")


def write_image(x: Tensor, directory: Path, stem: str) -> None:
    save_tdump(x, directory / f"{stem}.tdump")
    for c in range(x.shape[0]):
        write_pgm(x[c], directory / f"{stem}_c{c}.pgm", -2.0, 2.0)


def _manifest(directory: Path, command: str, cfg: dict, ckpt_hash: str | None, **extra) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    body = {"command": command, "version": __version__, "config": cfg, "seed": cfg.get("seed"),
            "checkpoint_hash": ckpt_hash, **extra}
    (directory / "run.json").write_text(json.dumps(body, indent=2, default=str))


def _check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not bool(torch.isfinite(t).all()):
            raise MasaError("output contains non-finite values")


# -- subcommands ------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = effective_config(args, TRAIN_DEFAULTS)
    out = Path(args.out)
    tc = TrainConfig(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                     seed=cfg["seed"], cond_drop=cfg["cond_drop"],
                     adapter_prob=cfg["adapter_prob"], clip=cfg["clip"],
                     optimizer=cfg["optimizer"], decay=cfg["decay"])
    dc = DenoiserConfig()
    encoder = TextEncoder()
    adapter = Adapter(dc.grid, dc.widths)
    data = make_toy_dataset(cfg["dataset_seed"], cfg["dataset_size"], encoder, dc.height, dc.width)
    log.info("training %d steps on %d samples", tc.steps, len(data))
    result = train(Denoiser(dc), data, tc, encoder, adapter,
                   log_every=max(1, tc.steps // 10) if args.verbose else 0)
    digest = result.model.save(out, extra={"train": cfg})
    write_loss_trace(result.losses, out / "loss.txt")
    _manifest(out, "train", cfg, digest, final_loss=result.losses[-1])
    print(f"checkpoint {out} {digest}")
    return 0


def cmd_invert(args) -> int:
    cfg = effective_config(args, SAMPLING_DEFAULTS)
    model, digest = _load_model(args)
    encoder = TextEncoder()
    x0 = _load_image(args.image, model)
    s = base_schedule(model.config.train_steps).respace(cfg["T"])
    inv = invert(model, x0, encoder.encode(args.prompt), encoder.empty(), cfg["kind"], s,
                 NtiConfig(cfg["nti_steps"], cfg["nti_lr"], cfg["w"]), cfg["w"])
    out = Path(args.out)
    save_inversion(inv, out, extra={"prompt": args.prompt, "checkpoint_hash": digest})
    write_image(inv.x_T, out, "x_T")
    _check_finite(inv.x_T)
    _manifest(out, "invert", cfg, digest, prompt=args.prompt, image=args.image, nfe=inv.nfe)
    print(f"{cfg['kind']} inversion nfe={inv.nfe} -> {out}")
    return 0


def _per_turn(values, turns: int, name: str, required: bool = True):
    values = values or []
    if not values:
        if required:
            raise UsageError(f"--{name} is required")
        return [None] * turns
    if len(values) == 1:
        return values * turns
    if len(values) != turns:
        raise UsageError(f"--{name} given {len(values)} times for {turns} turns")
    return values


def _parse_interval(text: str) -> tuple:
    if text in ("none", "empty"):
        return ()
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"interval must look like a:b, got {text!r}") from None
    return (a, b)


def cmd_edit(args) -> int:
    cfg = effective_config(args, EDIT_DEFAULTS)
    pipeline = cfg["pipeline"]
    if pipeline not in ("masafusion", "no-adapter", "embctrl"):
        raise UsageError(f"unknown pipeline {pipeline!r}")
    turns = cfg["turns"]
    if turns < 1:
        raise UsageError("--turns must be >= 1")
    modes = list(INIT_MODES) if cfg["init_mode"] == "all" else [cfg["init_mode"]]
    for m in modes:
        if m not in INIT_MODES:
            raise UsageError(f"unknown init mode {m!r}")
    if pipeline == "masafusion" and not args.condition:
        raise UsageError("masafusion needs --condition (one file per turn)")
    targets = _per_turn(args.target_prompt, turns, "target-prompt")
    masks = _per_turn(args.mask, turns, "mask", required=pipeline != "embctrl")
    conditions = _per_turn(args.condition, turns, "condition", required=False)
    intervals = [_parse_interval(v) for v in args.interval] if args.interval else [None]
    layers = tuple(v for v in cfg["layers"].split(",") if v) or None

    model, digest = _load_model(args)
    encoder = TextEncoder()
    adapter = Adapter(model.config.grid, model.config.widths)
    s = base_schedule(model.config.train_steps).respace(cfg["T"])
    nti = NtiConfig(cfg["nti_steps"], cfg["nti_lr"], cfg["w"])
    out = Path(args.out)
    image_path, source_prompt = args.image, args.source_prompt
    x0 = _load_image(image_path, model)
    H, W = model.config.grid
    for turn in range(1, turns + 1):
        turn_dir = out / f"turn_{turn}" if turns > 1 else out
        target_prompt = targets[turn - 1]
        mask = MaskRegion.load(masks[turn - 1]) if masks[turn - 1] else MaskRegion.empty(H, W)
        cond_s, cond_t = encoder.encode(source_prompt), encoder.encode(target_prompt)
        inv = invert(model, x0, cond_s, encoder.empty(), cfg["kind"], s, nti, cfg["w"])
        runs = []
        if pipeline == "masafusion":
            condition = load_condition(conditions[turn - 1])
            for mode in modes:
                ec = EditConfig(init_mode=mode, layers=layers, w=cfg["w"],
                                adapter_strength=cfg["adapter_strength"], seed=cfg["seed"])
                res = masafusion_edit(model, adapter, None, cond_s, cond_t, mask, condition,
                                      cfg["kind"], ec, inversion=inv)
                runs.append((f"init_{mode}" if len(modes) > 1 else "", res))
        elif pipeline == "no-adapter":
            for iv in intervals:
                ec = EditConfig(fusion_interval=iv, layers=layers, w=cfg["w"], seed=cfg["seed"])
                res = edit_without_adapter(model, inv, cond_s, cond_t, mask, ec)
                tag = "" if len(intervals) == 1 else "interval_" + ("none" if iv == () else
                                                                    "all" if iv is None else f"{iv[0]}_{iv[1]}")
                runs.append((tag, res))
        else:
            ec = EditConfig(w=cfg["w"], seed=cfg["seed"])
            res = embctrl_edit(model, encoder, inv, source_prompt, target_prompt, None, ec, mask)
            runs.append(("", res))
        summary = []
        for tag, res in runs:
            d = turn_dir / tag if tag else turn_dir
            _check_finite(res.target)
            save_edit_result(res, d, caches=args.save_caches)
            write_image(res.target, d, "target")
            if res.intermediate is not None:
                write_image(res.intermediate, d, "intermediate")
            _manifest(d, "edit", cfg, digest, turn=turn, source_image=str(image_path),
                      source_prompt=source_prompt, target_prompt=target_prompt,
                      mask=masks[turn - 1], condition=conditions[turn - 1],
                      inversion_nfe=inv.nfe, edit_nfe=res.nfe, stats=res.stats)
            summary.append({"run": tag or "main", "l2_to_reference": res.stats["l2"],
                            "nfe": res.nfe})
        if len(runs) > 1:
            sweep = {"runs": summary}
            inter = [(tag, r.intermediate) for tag, r in runs if r.intermediate is not None]
            if len(inter) > 1:
                sweep["intermediate_l2"] = {
                    f"{a}|{b}": float(((xa - xb) ** 2).mean())
                    for (a, xa), (b, xb) in itertools.combinations(inter, 2)}
            (turn_dir / "sweep.json").write_text(json.dumps(sweep, indent=2))
        # the next turn edits this turn's (first) result
        x0 = runs[0][1].target
        image_path = str((turn_dir / runs[0][0] if runs[0][0] else turn_dir) / "target.tdump")
        source_prompt = target_prompt
        print(f"turn {turn}: {len(runs)} run(s) -> {turn_dir}")
    return 0


def cmd_attnviz(args) -> int:
    cfg = effective_config(args, {"T": 50, "seed": 0})
    model, digest = _load_model(args)
    encoder = TextEncoder()
    x0 = _load_image(args.image, model)
    s = base_schedule(model.config.train_steps).respace(cfg["T"])
    if not 1 <= args.t <= s.T:
        raise UsageError(f"--t must lie in [1, {s.T}]")
    if args.layer not in model.config.layers:
        raise UsageError(f"unknown layer {args.layer!r}; choose from {', '.join(model.config.layers)}")
    seq = encoder.tokenize(args.prompt)
    cond = encoder.encode(seq).matrix
    # noise the image to step t along the deterministic inversion path
    inv = invert_path(model, x0, cond, s, args.t)
    with torch.no_grad():
        _, cache = model.predict_noise(s.timesteps[args.t], inv, cond, cond, 1.0,
                                       hooks=HookSet(capture=("cross",)))
    probs = cache.get(s.timesteps[args.t], args.layer, "cross").p[0]  # (pixels, L)
    level = int(args.layer[3:])
    h, w = model.config.height >> level, model.config.width >> level
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_tdump(probs, out / "cross_attention.tdump")
    rowsum = probs.sum(dim=1)
    if float((rowsum - 1).abs().max()) > 1e-6:
        raise MasaError("cross-attention rows do not sum to one")
    words = [encoder.vocab.words[i] for i in seq.ids]
    for j, word in enumerate(words):
        write_pgm(probs[:, j].reshape(h, w), out / f"token_{j:02d}.pgm", 0.0, 1.0)
    mass = probs.mean(dim=0).tolist()
    _manifest(out, "attnviz", cfg, digest, prompt=args.prompt, t=args.t, layer=args.layer,
              tokens=words, mean_mass=mass, max_rowsum_error=float((rowsum - 1).abs().max()))
    for j, (word, m) in enumerate(zip(words, mass)):
        print(f"{j:2d} {word:<16} {m:.4f}")
    return 0


def invert_path(model: Denoiser, x0: Tensor, cond: Tensor, s, t: int) -> Tensor:
    x = x0
    with torch.no_grad():
        for k in range(1, t):
            eps, _ = model.predict_noise(s.timesteps[k], x, cond, cond, 1.0)
            x = ddim_invert_step(x, eps, k, s)
    return x


def cmd_eval(args) -> int:
    rows = read_rows(args.rows)
    table = rank_table(rows)
    print(table.to_text(), end="")
    if args.out:
        Path(args.out).write_text(table.to_csv())
    return 0


def cmd_sample(args) -> int:
    """Unedited generation, mostly for producing source images."""
    cfg = effective_config(args, {"T": 50, "w": 7.5, "seed": 0})
    model, digest = _load_model(args)
    encoder = TextEncoder()
    s = base_schedule(model.config.train_steps).respace(cfg["T"])
    c = model.config
    x_T = RngStream(cfg["seed"]).normal(c.channels, c.height, c.width)
    stub = InversionResult("ddim", s, encoder.encode(args.prompt).matrix, encoder.empty().matrix,
                           cfg["w"], [x_T] * (s.T + 1), AttentionCache(), 0)
    x = generate_plain(model, stub, stub.cond, cfg["w"])[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_image(x, out, "sample")
    cond = extract_condition(x)
    MaskRegion(cond.grid > 0.5).save(out / "edges.txt")
    _manifest(out, "sample", cfg, digest, prompt=args.prompt)
    print(f"sample -> {out / 'sample.tdump'}")
    return 0


# -- argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="masafusion", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True):
        sp.add_argument("--config", help="key=value configuration file")
        if checkpoint:
            sp.add_argument("--checkpoint", help=f"checkpoint directory (default ${CKPT_ENV})")

    sp = sub.add_parser("train", help="train the toy denoiser")
    common(sp, checkpoint=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--dataset-size", dest="dataset_size", type=int)
    sp.add_argument("--optimizer", choices=("adam", "sgd"))
    sp.set_defaults(func=cmd_train)

    def sampling(sp):
        sp.add_argument("--T", dest="T", type=int, help="DDIM steps")
        sp.add_argument("--w", type=float, help="guidance scale")
        sp.add_argument("--kind", choices=("nti", "di"))
        sp.add_argument("--nti-steps", dest="nti_steps", type=int)
        sp.add_argument("--nti-lr", dest="nti_lr", type=float)

    sp = sub.add_parser("invert", help="invert a source image")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--out", required=True)
    sampling(sp)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("edit", help="run an editing pipeline")
    common(sp)
    sp.add_argument("--pipeline", choices=("masafusion", "no-adapter", "embctrl"))
    sp.add_argument("--image", required=True)
    sp.add_argument("--source-prompt", dest="source_prompt", required=True)
    sp.add_argument("--target-prompt", dest="target_prompt", action="append")
    sp.add_argument("--mask", action="append")
    sp.add_argument("--condition", action="append")
    sp.add_argument("--init-mode", dest="init_mode", choices=INIT_MODES + ("all",))
    sp.add_argument("--interval", action="append", help="a:b fusion steps (repeat to sweep)")
    sp.add_argument("--turns", type=int)
    sp.add_argument("--adapter-strength", dest="adapter_strength", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--layers", help="comma-separated attention sites")
    sp.add_argument("--save-caches", dest="save_caches", action="store_true")
    sp.add_argument("--out", required=True)
    sampling(sp)
    sp.set_defaults(func=cmd_edit)

    sp = sub.add_parser("attnviz", help="per-token cross-attention heatmaps")
    common(sp)
    sp.add_argument("--image", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--t", type=int, required=True)
    sp.add_argument("--layer", required=True)
    sp.add_argument("--T", dest="T", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_attnviz)

    sp = sub.add_parser("eval", help="rank methods from a metric CSV")
    sp.add_argument("--rows", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="generate an unedited image")
    common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--T", dest="T", type=int)
    sp.add_argument("--w", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sample)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (MasaError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
