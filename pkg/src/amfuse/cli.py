"""Command-line entry point.

Subcommands: convert, corrupt, synth, train, eval, params, gradcheck,
selftest. Exit codes: 0 success, 1 usage/configuration error, 2 data/format
error. Diagnostics go to stderr; with --json the result object goes to stdout
as a single JSON document. AMFUSE_THREADS caps internal numeric parallelism.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import fileio, report, scenes
from . import tensor as T
from .blocks import (FusionPair, MHSABlock, MLPDecoder, PatchEmbed, PPXBlock,
                     SelfQueryHub)
from .errors import DataError, FormatError, UsageError
from .frames import (CameraIntrinsics, EventStream, ModalityFrame, PointCloud,
                     corrupt_event_lowres, corrupt_exposure,
                     corrupt_lidar_jitter, corrupt_motion_blur, depth_to_frame,
                     depth_to_hha, events_to_frame, lidar_to_frame)
from .model import CMNeXtModel, ModelConfig, count_params
from .tensor import Tensor, grad_check_multi
from .train import TrainConfig, adamw_init, adamw_step, poly_lr
from . import train as train_mod

GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _apply_thread_cap() -> None:
    cap = os.environ.get("AMFUSE_THREADS")
    if cap is None:
        return
    try:
        n = int(cap)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"AMFUSE_THREADS must be a positive integer, got {cap!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    elif text:
        print(text)


def _read_model_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    try:
        with open(path) as fh:
            return ModelConfig.from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read model config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad model config JSON in {path}: {exc}") from exc


# -- convert -----------------------------------------------------------------


def _cmd_convert(args) -> int:
    kind = args.kind
    cam = None
    if kind == "depth":
        depth = fileio.read_pgm16(args.input) * args.d_max
        frame = depth_to_frame(np.maximum(depth, 1e-6), args.d_max)
    elif kind == "hha":
        depth = fileio.read_pgm16(args.input) * args.d_max
        h, w = depth.shape
        cam = CameraIntrinsics(args.fov, w, h)
        frame = depth_to_hha(np.maximum(depth, 1e-6), cam)
    elif kind == "event":
        ev = fileio.read_evt(args.input)
        t1 = int(ev[:, 2].max()) + 1 if ev.size else 1
        frame = events_to_frame(EventStream(ev, 0, t1), args.size, args.size)
    elif kind == "lidar":
        pts, cls = fileio.read_xyz(args.input)
        cam = CameraIntrinsics(args.fov, args.size, args.size)
        frame, _ = lidar_to_frame(PointCloud(pts, cls), cam)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown convert kind {kind!r}")
    fileio.write_ppm(args.output, frame.data)
    _, h, w = frame.data.shape
    _emit(args, {"kind": kind, "input": args.input, "output": args.output,
                 "height": h, "width": w},
          f"wrote {args.output} ({w}x{h})")
    return 0


# -- corrupt -----------------------------------------------------------------


def _cmd_corrupt(args) -> int:
    kind = args.kind
    if kind in ("mb", "oe", "ue"):
        frame = ModalityFrame("rgb", fileio.read_ppm(args.input))
        if kind == "mb":
            out = corrupt_motion_blur(frame, args.length, args.angle)
        else:
            gain = args.gain if args.gain is not None else (4.0 if kind == "oe" else 0.25)
            out = corrupt_exposure(frame, gain)
        fileio.write_ppm(args.output, out.data)
    elif kind == "lj":
        pts, cls = fileio.read_xyz(args.input)
        out = corrupt_lidar_jitter(PointCloud(pts, cls), seed=args.seed)
        fileio.write_xyz(args.output, out.points, out.class_ids)
    elif kind == "el":
        ev = fileio.read_evt(args.input)
        t1 = int(ev[:, 2].max()) + 1 if ev.size else 1
        out = corrupt_event_lowres(EventStream(ev, 0, t1), args.factor)
        fileio.write_evt(args.output, out.events)
    else:  # pragma: no cover
        raise UsageError(f"unknown corruption kind {kind!r}")
    _emit(args, {"kind": kind, "input": args.input, "output": args.output},
          f"wrote {args.output}")
    return 0


# -- synth / train / eval ----------------------------------------------------


def _cmd_synth(args) -> int:
    spec = scenes.SceneSpec(seed=args.seed, size=args.size, num_classes=args.classes)
    manifest = scenes.make_split(spec, args.out, args.n_train, args.n_val)
    _emit(args, {"root": args.out, "seed": args.seed, "size": args.size,
                 "n_train": len(manifest["splits"]["train"]),
                 "n_val": len(manifest["splits"]["val"]),
                 "corruptions": manifest["corruptions"]},
          f"wrote {args.n_train}+{args.n_val} samples under {args.out}")
    return 0


def _read_train_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        with open(path) as fh:
            return TrainConfig.from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read train config {path}: {exc}") from exc


def _cmd_train(args) -> int:
    mcfg = _read_model_config(args.model)
    tcfg = _read_train_config(args.config)
    model = CMNeXtModel(mcfg)
    log = train_mod.train(model, args.data, tcfg, args.out)
    with open(os.path.join(args.out, "model_config.json"), "w") as fh:
        fh.write(mcfg.to_json())
    final = log[-1]
    _emit(args, {"out": args.out, "epochs": len(log), "final": final},
          f"trained {len(log)} epochs; final loss {final['loss']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    mcfg = _read_model_config(args.model)
    model = CMNeXtModel.load(args.weights, mcfg)
    result = train_mod.evaluate(model, args.data, split=args.split, out_dir=args.out)
    groups = result["groups"]
    header = list(groups) + ["mean"]
    rows = [[groups[g] for g in groups] + [result["mean"]]]
    if args.json:
        print(json.dumps(result, sort_keys=True))
    else:
        print(report.format_table(header, rows))
    return 0


# -- params / gradcheck / selftest -------------------------------------------


def _cmd_params(args) -> int:
    cfg = _read_model_config(args.config)
    counted = cfg if cfg.num_secondary > 0 else cfg.with_modalities(cfg.modalities + ("aux",))
    counts = count_params(counted)
    payload = {"stage_channels": list(cfg.stage_channels),
               "modalities": list(cfg.modalities),
               "total": counts["total"],
               "per_modality_increment": counts["per_modality_increment"]}
    _emit(args, payload,
          f"total params: {counts['total']}\n"
          f"per-modality increment: {counts['per_modality_increment']}")
    return 0


def _gradcheck_cases(seed: int):
    rng = np.random.default_rng(seed)

    def case(name, module, forward):
        x = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
        tensors = [x] + module.parameters()
        err = grad_check_multi(lambda: T.tsum(forward(x)), tensors,
                               max_coords_per_tensor=6,
                               rng=np.random.default_rng(seed + 1))
        return name, err

    hub = SelfQueryHub(4, 2, rng)
    other = Tensor(rng.normal(size=(4, 8, 8)))
    yield case("sq_hub", hub, lambda x: hub.forward([x, other]))
    yield case("ppx", ppx := PPXBlock(4, (3, 7, 11), 2, 2, rng), ppx.forward)
    yield case("mhsa", mh := MHSABlock(4, 2, 2, 2, rng), mh.forward)
    yield case("fusion", fp := FusionPair(4, rng),
               lambda x: fp.forward(x, T.mul(x, Tensor(np.full(x.shape, 0.5))))[2])
    yield case("patch_embed", pe := PatchEmbed(4, 6, 3, 2, rng), pe.forward)
    dec = MLPDecoder((4, 4, 4, 4), 6, 3, rng)
    x0 = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    feats = [x0] + [Tensor(rng.normal(size=(4, 8 // s, 8 // s))) for s in (2, 4, 8)]
    err = grad_check_multi(lambda: T.tsum(dec.forward(feats)),
                           [x0] + dec.parameters(), max_coords_per_tensor=6,
                           rng=np.random.default_rng(seed + 2))
    yield "decoder", err


def _cmd_gradcheck(args) -> int:
    results = {}
    for name, err in _gradcheck_cases(args.seed):
        if args.block not in ("all", name):
            continue
        results[name] = err
        print(f"{name}: max rel err {err:.3e}", file=sys.stderr)
    if not results:
        raise UsageError(f"unknown block {args.block!r}")
    ok = all(e < GRADCHECK_TOL for e in results.values())
    _emit(args, {"blocks": results, "tolerance": GRADCHECK_TOL, "ok": ok},
          "\n".join(f"{n}\t{e:.3e}" for n, e in results.items()))
    return 0 if ok else 1


def _selftest_suites(seed: int):
    rng = np.random.default_rng(seed)

    def conv_suite():
        x = rng.normal(size=(3, 6, 6))
        w = rng.normal(size=(2, 3, 3, 3))
        b = rng.normal(size=2)
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1).data
        ref = np.zeros_like(got)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        for o in range(2):
            for i in range(6):
                for j in range(6):
                    ref[o, i, j] = b[o] + np.sum(xp[:, i:i + 3, j:j + 3] * w[o])
        return float(np.abs(got - ref).max()) < 1e-12

    def hub_suite():
        hub = SelfQueryHub(3, 2, rng)
        frames = [Tensor(rng.normal(size=(3, 4, 4))) for _ in range(2)]
        cands, scores = hub.candidates(frames)
        got = hub.forward(frames).data
        ref = np.empty_like(got)
        for i in range(4):
            for j in range(4):
                win = int(np.argmax([s.data[0, i, j] for s in scores]))
                ref[:, i, j] = cands[win].data[:, i, j]
        return np.array_equal(got, ref)

    def miou_suite():
        for _ in range(20):
            truth = rng.integers(0, 4, size=(16, 16))
            pred = rng.integers(0, 4, size=(16, 16))
            cm = train_mod.ConfusionMatrix(4)
            cm.update(pred, truth)
            ious = []
            for c in range(4):
                union = np.sum((pred == c) | (truth == c))
                if union:
                    ious.append(np.sum((pred == c) & (truth == c)) / union)
            if abs(train_mod.miou(cm)["mean"] - np.mean(ious)) > 1e-12:
                return False
        return True

    def optim_suite():
        p = Tensor(np.ones(1), requires_grad=True)
        st = adamw_init([p])
        adamw_step([p], [np.ones(1)], st, 1, 0.1, weight_decay=0.0)
        cfg = TrainConfig(epochs=30)
        return (abs(p.data[0] - 0.9) < 1e-8
                and abs(poly_lr(0, 0.0, cfg) - 6e-6) < 1e-18
                and abs(poly_lr(10, 0.0, cfg) - 6e-5) < 1e-18)

    def camera_suite():
        cam = CameraIntrinsics(91.0, 1042, 1042)
        want = 1042 / (2.0 * math.tan(91.0 * math.pi / 360.0))
        return abs(cam.f_x - want) < 1e-9 and cam.u_0 == 521.0

    return [("conv_oracle", conv_suite), ("sq_hub_oracle", hub_suite),
            ("miou_oracle", miou_suite), ("optimizer", optim_suite),
            ("camera", camera_suite)]


def _cmd_selftest(args) -> int:
    results = {}
    for name, fn in _selftest_suites(args.seed):
        ok = bool(fn())
        results[name] = ok
        print(f"{name}: {'ok' if ok else 'FAIL'}", file=sys.stderr)
    all_ok = all(results.values())
    _emit(args, {"suites": results, "ok": all_ok},
          "\n".join(f"{n}\t{'ok' if v else 'FAIL'}" for n, v in results.items()))
    return 0 if all_ok else 1


# -- wiring ------------------------------------------------------------------


def _build_parser() -> _Parser:
    p = _Parser(prog="amfuse", description="Arbitrary-modal segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--json", action="store_true", help="JSON result on stdout")
        return sp

    sp = add("convert", _cmd_convert, help="convert a raw sensor file to an RGB-like frame")
    sp.add_argument("--kind", required=True, choices=["depth", "event", "lidar", "hha"])
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--fov", type=float, default=91.0)
    sp.add_argument("--d-max", type=float, default=100.0)
    sp.add_argument("--size", type=int, default=64, help="output frame side for event/lidar")

    sp = add("corrupt", _cmd_corrupt, help="apply a sensor failure mode to a raw file")
    sp.add_argument("--kind", required=True, choices=["mb", "oe", "ue", "lj", "el"])
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--length", type=int, default=5, help="motion-blur length")
    sp.add_argument("--angle", type=float, default=0.4, help="motion-blur angle (rad)")
    sp.add_argument("--gain", type=float, default=None, help="exposure gain")
    sp.add_argument("--factor", type=float, default=0.25, help="event resolution factor")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("synth", _cmd_synth, help="generate a synthetic multimodal dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--n-train", type=int, default=8)
    sp.add_argument("--n-val", type=int, default=2)

    sp = add("train", _cmd_train, help="train a model on a generated dataset")
    sp.add_argument("--config", default=None, help="train config JSON")
    sp.add_argument("--model", default=None, help="model config JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", _cmd_eval, help="per-corruption mIoU report")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--model", default=None, help="model config JSON")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--group-by", default="corruption", choices=["corruption"])
    sp.add_argument("--out", default=None)

    sp = add("params", _cmd_params, help="parameter accounting")
    sp.add_argument("--config", default=None, help="model config JSON")

    sp = add("gradcheck", _cmd_gradcheck, help="finite-difference gradient checks")
    sp.add_argument("--all", dest="block", action="store_const", const="all")
    sp.add_argument("--block", dest="block")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(block="all")

    sp = add("selftest", _cmd_selftest, help="run built-in oracle suites")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = _build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:  # pragma: no cover - thin wrapper
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
