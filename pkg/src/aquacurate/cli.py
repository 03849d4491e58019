"""``aquacurate`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 degenerate
math (singular alignment, L1 kink).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .aquanet import AquaNet, NetConfig
from .dnesa import ScoreWeights, combined_score, curate, evaluate_depth_map, evaluate_normal_map
from .errors import AquaCurateError, FormatError, ParameterError
from .eval_metrics import ALIGN_MODES, evaluate_depth_dirs, evaluate_normal_dirs
from .io import read_depth, read_mask, read_normal_png, read_rgb, write_normal_png, write_pfm, write_png16
from .losses import RHO_CHOICES, fd_check, total_loss
from .reports import render, write_report

logger = logging.getLogger("aquacurate")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MATH = 0, 1, 2, 3

# argument names kept out of the embedded run config: they do not affect results
_NOT_RECORDED = {"workers", "log_level", "handler"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_key_values(path) -> dict:
    """``key = value`` lines, ``#`` comments; keys keep their case."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as exc:
        raise FormatError(f"cannot read key-value file {path}: {exc}") from exc
    return dict(parser["root"])


def load_weights(path) -> ScoreWeights:
    if path is None:
        return ScoreWeights()
    try:
        overrides = {k: float(v) for k, v in read_key_values(path).items()}
    except ValueError as exc:
        raise FormatError(f"{path}: weights must be numbers ({exc})") from exc
    try:
        return ScoreWeights.from_overrides(overrides)
    except ParameterError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def run_config(args: argparse.Namespace) -> dict:
    """Every result-affecting argument, for embedding in reports."""
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_RECORDED:
            continue
        out[key] = value
    return out


def argv_from_run_config(cfg: dict) -> list:
    """Rebuild a command line from an embedded run config."""
    argv = [cfg["command"]]
    for key, value in cfg.items():
        if key == "command" or value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            for v in value:
                argv += [flag, str(v)]
        else:
            argv += [flag, str(value)]
    return argv


def _emit(text: str, output):
    if output:
        try:
            Path(output).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot write {output}: {exc}") from exc
    else:
        sys.stdout.write(text)


def cmd_curate(args) -> int:
    report = curate(args.rgb_dir, args.model_dir, args.out_dir, load_weights(args.weights_file),
                    workers=args.workers, run_config=run_config(args), report_path=args.report)
    n_sel = sum(not im.skipped for im in report.images)
    logger.info("selected pairs for %d of %d images", n_sel, len(report.images))
    return EXIT_OK


def cmd_score(args) -> int:
    rgb = read_rgb(args.rgb)
    dq = evaluate_depth_map(read_depth(args.depth), rgb)
    nq = evaluate_normal_map(read_normal_png(args.normal), rgb)
    ds, ns, cs = combined_score(dq, nq, load_weights(args.weights_file))
    report = {
        "version": __version__,
        "run_config": run_config(args),
        "depth_quality": asdict(dq),
        "normal_quality": asdict(nq),
        "depth_score": ds,
        "normal_score": ns,
        "combined_score": cs,
    }
    _emit(render(report, "json"), args.output)
    return EXIT_OK


def _eval_report(args, table) -> dict:
    return {"version": __version__, "run_config": run_config(args), **table}


def cmd_eval_depth(args) -> int:
    table = evaluate_depth_dirs(args.pred_dir, args.gt_dir, args.mask_dir, args.align, args.per_pixel,
                                args.workers)
    if not table["rows"]:
        logger.warning("no prediction/ground-truth pairs matched")
    _emit(render(_eval_report(args, table), args.format), args.output)
    return EXIT_OK


def cmd_eval_normals(args) -> int:
    table = evaluate_normal_dirs(args.pred_dir, args.gt_dir, args.mask_dir, args.per_pixel, args.workers)
    if not table["rows"]:
        logger.warning("no prediction/ground-truth pairs matched")
    _emit(render(_eval_report(args, table), args.format), args.output)
    return EXIT_OK


def cmd_loss(args) -> int:
    pred = read_depth(args.pred).astype(np.float64)
    gt = read_depth(args.gt).astype(np.float64)
    mask = read_mask(args.mask) if args.mask else np.isfinite(gt)
    rep = total_loss(pred, gt, mask, args.rho, args.k, args.alpha)
    out = rep.to_dict()
    if args.grad_check:
        out["fd_max_rel_error"] = fd_check(pred, gt, mask, args.rho, args.k, args.alpha)
    _emit(render({"version": __version__, "run_config": run_config(args), **out}, "json"), args.output)
    return EXIT_OK


def _pad16(x):
    h, w = x.shape[:2]
    ph, pw = (-h) % 16, (-w) % 16
    return np.pad(x, ((0, ph), (0, pw), (0, 0)), mode="edge")


def cmd_net_forward(args) -> int:
    try:
        cfg = NetConfig.from_file(args.config) if args.config else NetConfig()
    except ParameterError as exc:
        raise FormatError(f"{args.config}: {exc}") from exc
    x = read_rgb(args.input).astype(np.float64)
    h, w = x.shape[:2]
    net = AquaNet(cfg, args.seed)
    F, outputs = net.forward(_pad16(x), workers=args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scales = {}
    for i, o in outputs.items():
        hi, wi = -(-h // 2 ** i), -(-w // 2 ** i)
        disp = o["disparity"][:hi, :wi]
        normals = o["normals"][:hi, :wi]
        write_png16(out_dir / f"disparity_s{i}.png", disp)
        write_pfm(out_dir / f"disparity_s{i}.pfm", disp)
        write_normal_png(out_dir / f"normals_s{i}.png", normals)
        scales[str(i)] = {
            "shape": [hi, wi],
            "disparity_min": float(disp.min()),
            "disparity_max": float(disp.max()),
            "max_unit_deviation": float(np.abs(np.linalg.norm(normals, axis=2) - 1.0).max()),
        }
    report = {
        "version": __version__,
        "run_config": run_config(args),
        "config": cfg.to_dict(),
        "parameter_count": net.weights.parameter_count,
        "input_shape": [h, w],
        "padded_shape": list(_pad16(x).shape[:2]),
        "features": [list(s) for s in F.shapes()],
        "scales": scales,
    }
    write_report(report, out_dir / "net_report.json", "json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aquacurate", description="Curate and evaluate depth/normal pseudo-labels.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("curate", help="score teacher outputs and copy the best pair per image")
    c.add_argument("--rgb-dir", required=True)
    c.add_argument("--model-dir", action="append", required=True, help="repeatable; order breaks ties")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--weights-file")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--report", help="report path (default OUT_DIR/dnesa_report.json)")
    c.set_defaults(handler=cmd_curate)

    s = sub.add_parser("score", help="score one depth/normal candidate")
    s.add_argument("--rgb", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--normal", required=True)
    s.add_argument("--weights-file")
    s.add_argument("--output")
    s.set_defaults(handler=cmd_score)

    for name, handler in (("eval-depth", cmd_eval_depth), ("eval-normals", cmd_eval_normals)):
        e = sub.add_parser(name, help=f"benchmark metrics ({name.split('-')[1]})")
        e.add_argument("--pred-dir", required=True)
        e.add_argument("--gt-dir", required=True)
        e.add_argument("--mask-dir")
        if name == "eval-depth":
            e.add_argument("--align", choices=ALIGN_MODES, default="lstsq")
        e.add_argument("--format", choices=["json", "csv"], default="json")
        e.add_argument("--per-pixel", action="store_true", help="pool pixels instead of averaging images")
        e.add_argument("--workers", type=int, default=1)
        e.add_argument("--output")
        e.set_defaults(handler=handler)

    lo = sub.add_parser("loss", help="scale/shift-invariant loss of one prediction")
    lo.add_argument("--pred", required=True)
    lo.add_argument("--gt", required=True)
    lo.add_argument("--mask")
    lo.add_argument("--rho", choices=RHO_CHOICES, default="l1")
    lo.add_argument("--k", type=int, default=4)
    lo.add_argument("--alpha", type=float, default=0.5)
    lo.add_argument("--grad-check", action="store_true")
    lo.add_argument("--output")
    lo.set_defaults(handler=cmd_loss)

    n = sub.add_parser("net-forward", help="seeded forward pass of the encoder/decoder")
    n.add_argument("--input", required=True)
    n.add_argument("--config")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out-dir", required=True)
    n.add_argument("--workers", type=int, default=1)
    n.set_defaults(handler=cmd_net_forward)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("aquacurate: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args)
    except AquaCurateError as exc:
        print(f"aquacurate: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"aquacurate: I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
