"""``dap3d`` command line: synth, compose, train, finetune, parse, eval,
gradcheck and inspect.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then ``--set key=value`` and the dedicated flags.
Every command that writes to an output directory leaves the resolved
settings there as ``effective_config.txt``, which can be fed back through
``--config``.

Exit codes: 0 success, 1 internal failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, gradcheck, layers, model, parsing, png
from .appearance import DEFAULT_ALPHA, DEFAULT_ITERATIONS, load_clip
from .tensor import save_tensor


class UsageError(Exception):
    """Bad input or configuration (exit code 2)."""


# key -> (type, default)
KEYS = {
    "profile": (str, "toy"),
    "seed": (int, 0),
    # paths
    "data": (str, ""), "out": (str, ""), "checkpoint": (str, ""), "videos": (str, ""),
    "video": (str, ""), "proposals": (str, ""), "detections": (str, ""), "ground_truth": (str, ""),
    "clip": (str, ""), "overlay": (str, ""),
    # synth
    "kind": (str, "aligned"), "num_categories": (int, 10), "clips_per_category": (int, 40),
    "num_videos": (int, 20), "split_train": (int, 9), "split_test": (int, 1),
    # model
    "input_mode": (str, "am"), "loc_mode": (str, "normalized"),
    "lambda1": (float, 0.5), "lambda2": (float, 0.5), "beta": (float, 0.5),
    # optimizer; None picks the pretrain or fine-tune schedule
    "learning_rate": (float, None), "momentum": (float, None), "batch_size": (int, None),
    "lr_decay_factor": (float, None), "lr_step_iterations": (int, None), "max_iterations": (int, None),
    "checkpoint_every": (int, 0), "augment": (bool, True),
    "background_clips_per_video": (int, 6),
    # flow
    "hs_alpha": (float, DEFAULT_ALPHA), "hs_iterations": (int, DEFAULT_ITERATIONS),
    # parsing
    "nms_threshold": (float, parsing.DEFAULT_NMS), "per_category_nms": (bool, True),
    "proposal_stride": (float, 0.5),
    # evaluation
    "precision_fraction": (float, 1 / 8), "recall_fraction": (float, 1 / 8),
    "hit_threshold": (float, evaluation.DEFAULT_HIT_THRESHOLD),
    # inspect / gradcheck
    "layer": (str, "conv2"), "instances": (int, 20),
}


def _convert(key: str, raw: str):
    kind, _ = KEYS[key]
    raw = raw.strip()
    if raw in ("", "none", "None") and KEYS[key][1] is None:
        return None
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def read_config(path) -> dict:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"{path}:{no}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def config_text(cfg: dict) -> str:
    def fmt(v):
        return "none" if v is None else ("true" if v is True else "false" if v is False else str(v))
    return "".join(f"{k} = {fmt(cfg[k])}\n" for k in KEYS)


def resolve(args) -> dict:
    cfg = {k: d for k, (_, d) in KEYS.items()}
    if args.config:
        cfg.update(read_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in KEYS:
            raise UsageError(f"unknown key {key!r}")
        cfg[key] = _convert(key, value)
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = _convert(key, v) if KEYS[key][0] is bool else v
    if cfg["profile"] not in model.PROFILES:
        raise UsageError(f"profile must be one of {', '.join(model.PROFILES)}")
    return cfg


def _echo(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.txt").write_text(config_text(cfg))


def _need(cfg: dict, *keys):
    for k in keys:
        if not cfg[k]:
            raise UsageError(f"missing required setting {k!r} (flag --{k.replace('_', '-')})")


def _optimizer(cfg: dict, base: layers.OptimizerConfig) -> layers.OptimizerConfig:
    fields = ("learning_rate", "momentum", "batch_size", "lr_decay_factor", "lr_step_iterations", "max_iterations")
    kw = {f: cfg[f] for f in fields if cfg[f] is not None}
    try:
        return layers.OptimizerConfig(**{**base.__dict__, **kw})
    except ValueError as e:
        raise UsageError(str(e)) from None


def _flow_kw(cfg: dict) -> dict:
    return {"alpha": cfg["hs_alpha"], "iterations": cfg["hs_iterations"]}


def _model_config(cfg: dict, num_categories: int) -> model.ModelConfig:
    return model.PROFILES[cfg["profile"]](num_categories, lambda1=cfg["lambda1"], lambda2=cfg["lambda2"],
                                          beta=cfg["beta"], loc_mode=cfg["loc_mode"],
                                          input_mode=cfg["input_mode"])


# -- commands -------------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    _need(cfg, "out")
    out = Path(cfg["out"])
    if cfg["kind"] == "aligned":
        if cfg["num_categories"] < 1 or cfg["clips_per_category"] < 1:
            raise UsageError("num_categories and clips_per_category must be >= 1")
        m = data.generate_dataset(out, cfg["num_categories"], cfg["clips_per_category"], seed=cfg["seed"])
        train, test = data.build_manifest(out, (cfg["split_train"], cfg["split_test"]), cfg["seed"])
        print(f"clips: {len(m)}  categories: {cfg['num_categories']}  train: {len(train)}  test: {len(test)}")
    elif cfg["kind"] == "videos":
        if cfg["num_videos"] < 1:
            raise UsageError("num_videos must be >= 1")
        ids = data.generate_videos(out, cfg["num_videos"], seed=cfg["seed"])
        n = sum(len(parsing.read_detections(out / f"{v}.gt")) for v in ids)
        print(f"videos: {len(ids)}  actions: {n}  categories: {len(data.PARSING_PROGRAMS)}")
    else:
        raise UsageError("kind must be 'aligned' or 'videos'")
    _echo(cfg, out)
    return 0


def cmd_compose(cfg: dict) -> int:
    _need(cfg, "clip", "out")
    frames = _load_clip(cfg["clip"])
    vol = data.clip_volume(frames, cfg["input_mode"], **(_flow_kw(cfg) if cfg["input_mode"] == "am" else {}))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(out, vol)
    print(f"wrote {out} shape {vol.shape}")
    return 0


def _load_clip(path):
    try:
        return load_clip(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot load clip {path}: {e}") from None


def _train_loop(cfg, net, dataset, opt, out: Path, finetune_classes: int | None = None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    log = open(out / "loss.csv", "w")
    log.write(",".join(model.LOG_COLUMNS) + "\n")

    def on_step(row):
        log.write(model.format_log_row(row) + "\n")

    def on_ckpt(state):
        model.save_checkpoint(out / f"checkpoint_{state.iteration:06d}.apck", state.model, state.iteration,
                              cfg["seed"], opt)
        model.save_checkpoint(out / "final.apck", state.model, state.iteration, cfg["seed"], opt)

    try:
        if finetune_classes is not None:
            state = model.finetune(net, finetune_classes, dataset, opt, seed=cfg["seed"], on_step=on_step,
                                   checkpoint_every=cfg["checkpoint_every"] or None, on_checkpoint=on_ckpt)
        else:
            state = model.train(net, dataset, opt, seed=cfg["seed"], on_step=on_step,
                                checkpoint_every=cfg["checkpoint_every"] or None, on_checkpoint=on_ckpt)
    finally:
        log.close()
    last = state.history[-1] if state.history else None
    print(f"iterations: {state.iteration}" + (f"  final loss: {last['total']:.6f}" if last else ""))
    return 0


def cmd_train(cfg: dict) -> int:
    _need(cfg, "data", "out")
    root = Path(cfg["data"])
    if not (root / "train.tsv").exists():
        raise UsageError(f"{root}: no train.tsv manifest (run 'dap3d synth' first)")
    manifest = data.read_manifest(root / "train.tsv")
    num_cat = max(a.category_id for _, a in manifest.entries) + 1
    mcfg = _model_config(cfg, num_cat)
    opt = _optimizer(cfg, layers.PRETRAIN)
    out = Path(cfg["out"])
    _echo(cfg, out)
    print(f"profile {cfg['profile']}: lr {opt.learning_rate}, momentum {opt.momentum}, batch {opt.batch_size}, "
          f"iterations {opt.max_iterations}")
    flow = _flow_kw(cfg) if cfg["input_mode"] == "am" else {}
    dataset = data.build_arrays(manifest, mcfg.input_shape, cfg["input_mode"], cfg["augment"], cfg["seed"], **flow)
    net = model.build(mcfg, cfg["seed"])
    return _train_loop(cfg, net, dataset, opt, out)


def _video_ids(directory: Path, need_gt: bool) -> list[str]:
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    ids = sorted(p.stem for p in directory.glob("*.aptn"))
    if need_gt:
        ids = [v for v in ids if (directory / f"{v}.gt").exists()]
    return ids


def _load_checkpoint(path):
    try:
        return model.load_checkpoint(path)
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot load checkpoint {path}: {e}") from None


def cmd_finetune(cfg: dict) -> int:
    _need(cfg, "checkpoint", "videos", "out")
    ck = _load_checkpoint(cfg["checkpoint"])
    vdir = Path(cfg["videos"])
    ids = _video_ids(vdir, need_gt=True)
    if not ids:
        raise UsageError(f"{vdir}: no videos with ground truth")
    num_cat = len(data.PARSING_PROGRAMS)
    opt = _optimizer(cfg, layers.FINETUNE)
    out = Path(cfg["out"])
    _echo(cfg, out)
    print(f"fine-tune: lr {opt.learning_rate}, decay {opt.lr_decay_factor} every {opt.lr_step_iterations}, "
          f"iterations {opt.max_iterations}, classes {num_cat}+background")
    dataset = data.build_parsing_arrays(vdir, ids, ck.model.config.input_shape,
                                        backgrounds_per_video=cfg["background_clips_per_video"],
                                        augment_clips=cfg["augment"], seed=cfg["seed"], num_categories=num_cat,
                                        **_flow_kw(cfg))
    return _train_loop(cfg, ck.model, dataset, opt, out, finetune_classes=num_cat)


def write_overlay(frames: np.ndarray, dets, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = [(255, 64, 64), (64, 255, 64), (64, 128, 255), (255, 255, 64), (255, 64, 255), (64, 255, 255)]
    for t in range(frames.shape[0]):
        img = np.round(np.clip(frames[t], 0, 1) * 255).astype(np.uint8)
        if img.ndim == 2 or img.shape[-1] == 1:
            img = np.repeat(img.reshape(*img.shape[:2], 1), 3, axis=2)
        img = np.ascontiguousarray(img)
        for d in dets:
            (cx, cy, ct), (w, h, l) = d.center, d.extent
            if ct - l / 2 <= t < ct + l / 2:
                png.draw_box(img, int(round(cx - w / 2)), int(round(cy - h / 2)),
                             int(round(cx + w / 2)) - 1, int(round(cy + h / 2)) - 1,
                             palette[d.category_id % len(palette)])
        png.write_png(out_dir / f"frame_{t:05d}.png", img)


def cmd_parse(cfg: dict) -> int:
    _need(cfg, "checkpoint", "video", "out")
    ck = _load_checkpoint(cfg["checkpoint"])
    src = Path(cfg["video"])
    if src.is_dir():
        videos = [(v, src / f"{v}.aptn") for v in _video_ids(src, need_gt=False)]
    elif src.exists():
        videos = [(src.stem, src)]
    else:
        raise UsageError(f"{src} does not exist")
    proposals_by_video = None
    if cfg["proposals"]:
        try:
            props, clipped = parsing.load_proposals(cfg["proposals"])
        except (OSError, parsing.ParseError) as e:
            raise UsageError(str(e)) from None
        proposals_by_video = {}
        for p in props:
            proposals_by_video.setdefault(p.video_id, []).append(p)
    pcfg = parsing.ParseConfig(cfg["nms_threshold"], cfg["per_category_nms"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    all_dets, total_props = [], 0
    for vid, path in videos:
        frames = _load_clip(path)
        dims = frames.shape[:3]
        if proposals_by_video is not None:
            props = [parsing.Proposal(vid, parsing.clip_to_video(p.volume, dims) or p.volume)
                     for p in proposals_by_video.get(vid, [])]
        else:
            s = cfg["proposal_stride"]
            props = parsing.sliding_window_proposals(dims, parsing.default_scales(dims), (s, s, s), vid)
        total_props += len(props)
        dets = parsing.parse_video(ck.model, frames, props, pcfg, vid, **_flow_kw(cfg))
        all_dets += dets
        if cfg["overlay"]:
            write_overlay(frames, dets, Path(cfg["overlay"]) / vid)
    parsing.write_detections(out, all_dets)
    _echo(cfg, out.parent)
    print(f"videos: {len(videos)}  proposals: {total_props}  detections: {len(all_dets)}")
    return 0


def _read_gt(path: Path):
    if not path.exists():
        raise UsageError(f"ground truth {path} not found")
    files = sorted(path.glob("*.gt")) if path.is_dir() else [path]
    out = []
    try:
        for f in files:
            out += parsing.read_detections(f)
    except parsing.ParseError as e:
        raise UsageError(str(e)) from None
    return out


def cmd_eval(cfg: dict) -> int:
    _need(cfg, "detections", "ground_truth", "out")
    gts = _read_gt(Path(cfg["ground_truth"]))
    if not Path(cfg["detections"]).exists():
        raise UsageError(f"detections {cfg['detections']} not found")
    try:
        dets = parsing.read_detections(cfg["detections"])
    except parsing.ParseError as e:
        raise UsageError(str(e)) from None
    if not gts:
        raise UsageError("ground truth is empty")
    try:
        rule = evaluation.MatchRule(cfg["precision_fraction"], cfg["recall_fraction"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    rep = evaluation.evaluate(dets, gts, rule, cfg["hit_threshold"])
    out = Path(cfg["out"])
    _echo(cfg, out)
    table = evaluation.report_table(rep)
    (out / "report.txt").write_text(table)
    (out / "categories.csv").write_text(evaluation.category_csv(rep))
    (out / "attributes.csv").write_text(evaluation.attribute_csv(rep))
    (out / "pr.csv").write_text(evaluation.pr_csv(rep))
    sys.stdout.write(table)
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = gradcheck.run_all(cfg["instances"], cfg["seed"])
    print(f"{'check':<12} {'max rel err':>12} {'tol':>8}  result")
    for r in results:
        print(f"{r.name:<12} {r.max_rel_error:12.3e} {r.tolerance:8.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed))
        return 1
    return 0


def feature_grids(net: model.DAP3DNet, volume: np.ndarray, layer: str):
    """One tiled uint8 grid per temporal slice of a layer's activations."""
    x = data.fit_input(volume, net.config.input_shape, net.config.input_mode)[None]
    act = net.forward(x, stop_at=layer)
    if act.ndim != 5:
        raise UsageError(f"layer {layer!r} has no spatial maps; choose one of "
                         f"{', '.join(n for n in net.feature_layers if not n.startswith('fc'))}")
    a = act[0]
    lo, hi = float(a.min()), float(a.max())
    return [png.tile(png.to_uint8(a[:, t], lo, hi)) for t in range(a.shape[1])], a.shape


def cmd_inspect(cfg: dict) -> int:
    _need(cfg, "checkpoint", "clip", "out")
    ck = _load_checkpoint(cfg["checkpoint"])
    net = ck.model
    if cfg["layer"] not in net.feature_layers:
        raise UsageError(f"unknown layer {cfg['layer']!r}; valid names: {', '.join(net.feature_layers)}")
    frames = _load_clip(cfg["clip"])
    mode = net.config.input_mode
    vol = data.clip_volume(frames, mode, **(_flow_kw(cfg) if mode == "am" else {}))
    grids, shape = feature_grids(net, vol, cfg["layer"])
    out = Path(cfg["out"])
    _echo(cfg, out)
    for t, g in enumerate(grids):
        png.write_png(out / f"{cfg['layer']}_t{t:03d}.png", g)
    print(f"{cfg['layer']}: {shape[0]} channels x {shape[1]} slices of {shape[2]}x{shape[3]}; "
          f"wrote {len(grids)} grids to {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "compose": cmd_compose, "train": cmd_train, "finetune": cmd_finetune,
            "parse": cmd_parse, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}

# flags per command (settings key names, dashes in the flag)
_FLAGS = {
    "synth": ["out", "kind", "num_categories", "clips_per_category", "num_videos"],
    "compose": ["clip", "out", "input_mode"],
    "train": ["data", "out", "max_iterations", "checkpoint_every", "input_mode"],
    "finetune": ["checkpoint", "videos", "out", "max_iterations", "checkpoint_every"],
    "parse": ["checkpoint", "video", "proposals", "out", "overlay", "nms_threshold"],
    "eval": ["detections", "ground_truth", "out", "hit_threshold"],
    "gradcheck": ["instances"],
    "inspect": ["checkpoint", "clip", "layer", "out"],
}


_HELP = {
    "synth": "render an aligned clip dataset (--kind aligned) or composite videos (--kind videos)",
    "compose": "write the network volume of one clip",
    "train": "train from scratch on an aligned dataset",
    "finetune": "retrain a checkpoint on composite videos with a background class",
    "parse": "detect actions in videos with sliding-window proposals",
    "eval": "score detections against ground truth (AP, MAP, attribute AUC)",
    "gradcheck": "compare every backward pass with finite differences",
    "inspect": "write per-slice feature map grids of one layer as PNG",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dap3d", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, keys in _FLAGS.items():
        sp = sub.add_parser(name, help=_HELP[name])
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--profile", choices=sorted(model.PROFILES))
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any setting")
        for key in keys:
            kind = KEYS[key][0]
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=str if kind is bool else kind)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (model.ConfigError, data.DataError, parsing.ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report, then signal internal failure
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
