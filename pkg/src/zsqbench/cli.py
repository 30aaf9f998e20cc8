"""Command-line entry point: ``zsqbench <command> [options]``.

Every command takes ``--config`` (a JSON document, see :mod:`zsqbench.config`)
and ``--seed``; explicit flags override the config.  Outputs are written
deterministically; each output directory also receives ``config.json``
echoing the effective configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import distill, eval as E, model as M, quant as Q, spectral, synthesis as S
from .config import PRESETS, PipelineConfig, preset
from .errors import ParameterError, ZSQError

log = logging.getLogger("zsqbench")

ABLATIONS = ("none", "i1", "i2", "i3", "i1i2", "i1i3", "i2i3", "all")


# -- helpers -----------------------------------------------------------------------

def _parse_int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _parse_bits(text: str) -> tuple[int, int]:
    vals = _parse_int_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"--bits takes W,A, got {text!r}")
    return vals[0], vals[1]


def ablation_flags(name: str) -> dict:
    """``--ablate`` names the ideas that stay enabled: i1 filter, i2 CAM, i3 gating."""
    if name not in ABLATIONS:
        raise ParameterError(f"unknown ablation {name!r}")
    if name in ("all", "none"):
        on = {"i1", "i2", "i3"} if name == "all" else set()
    else:
        on = {name[i:i + 2] for i in range(0, len(name), 2)}
    return {"use_filter": "i1" in on, "use_cam": "i2" in on, "use_gating": "i3" in on}


def load_config(args) -> PipelineConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise D.DatasetIOError(f"config file not found: {path}")
        cfg = PipelineConfig.from_text(path.read_text(encoding="utf-8"))
    else:
        cfg = preset(getattr(args, "preset", None) or "desk")
    ft = cfg.finetune
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    for flag, key in (("tau", "tau"), ("d0", "d0"), ("lambda_ce", "lambda_ce"), ("lambda_cam", "lambda_cam"),
                      ("epochs", "epochs"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            ft = replace(ft, **{key: v})
    if getattr(args, "ablate", None):
        ft = replace(ft, **ablation_flags(args.ablate))
    cfg = replace(cfg, finetune=ft)
    if getattr(args, "bits", None) is not None:
        if any(not 2 <= b <= 8 for b in args.bits):
            raise ParameterError(f"bits must lie in [2, 8], got {args.bits}")
        cfg = replace(cfg, bits=tuple(args.bits))
    syn = cfg.synthesis
    for flag, key in (("n", "n"), ("iters", "iters"), ("batch", "batch")):
        v = getattr(args, flag, None)
        if v is not None:
            syn = replace(syn, **{key: v})
    cfg = replace(cfg, synthesis=syn)
    cfg.validate()
    for w in cfg.range_warnings():
        log.warning("%s", w)
    return cfg


def _seed(cfg: PipelineConfig) -> int:
    return int(cfg.seeds[0])


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _echo(outdir: Path, cfg: PipelineConfig, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg.echo(), **(extra or {})}
    _write_text(outdir / "config.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_real(path, fmt: str, cfg: PipelineConfig):
    if fmt == "desk-digits":
        return D.desk_digits(_seed(cfg))
    if fmt == "cifar10":
        return D.load_cifar10(path, cfg.dataset.train_limit, cfg.dataset.test_limit)
    raise ParameterError(f"real data format must be cifar10 or desk-digits, got {fmt!r}")


def _heldout(args, cfg: PipelineConfig, model: M.ModelGraph):
    if not getattr(args, "data", None):
        return None
    _, test = _load_real(args.data, args.format, cfg)
    return D.normalize(test.images, model.norm_mean, model.norm_std), test.labels


def _load_synthetic(prefix, model: M.ModelGraph) -> S.SyntheticDataset:
    recs, diff, meta = D.read_synthetic(prefix)
    if tuple(meta["shape"]) != model.input_shape:
        raise ParameterError(f"synthetic images {meta['shape']} do not match model input {model.input_shape}")
    images = D.normalize(recs.images, model.norm_mean, model.norm_std)
    return S.SyntheticDataset(images, recs.labels, diff)


# -- commands ------------------------------------------------------------------------

def cmd_make_desk_data(args) -> int:
    cfg = load_config(args)
    train, test = D.desk_digits(_seed(cfg))
    D.write_cifar_layout(args.out, train, test)
    print(f"wrote {len(train)} training and {len(test)} held-out records to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    train, test = _load_real(args.data, args.format, cfg)
    out = _outdir(args.out)
    mean, std = D.channel_stats(train.images)
    model = M.build_model(M.desk_spec(10, train.images.shape[1]), train.images.shape[1:], seed=_seed(cfg))
    model.norm_mean, model.norm_std = mean, std
    xtr, xte = D.normalize(train.images, mean, std), D.normalize(test.images, mean, std)
    pc = cfg.pretrain
    res = M.pretrain(model, xtr, train.labels, pc.epochs, pc.lr, _seed(cfg), pc.batch, pc.weight_decay,
                     heldout=(xte, test.labels))
    M.save_checkpoint(model, out / "fp32", {"heldout_top1": res.heldout_top1, "config": cfg.echo(),
                                            "train_size": len(train), "heldout_size": len(test)})
    lines = ["epoch,train_loss,heldout_top1"]
    lines += [f"{r['epoch']},{r['train_loss']:.8g},{r['heldout_top1']:.6f}" for r in res.history]
    _write_text(out / "metrics.csv", "\n".join(lines) + "\n")
    _echo(out, cfg, "pretrain", {"heldout_top1": res.heldout_top1})
    print(f"held-out top-1 {res.heldout_top1:.4f}; checkpoint {out / 'fp32'}")
    return 0


def cmd_synthesize(args) -> int:
    cfg = load_config(args)
    model = M.load_checkpoint(args.checkpoint)
    out = _outdir(args.out)
    sizes = args.size_sweep or [cfg.synthesis.n]
    for n in sizes:
        # sweep sizes need not be multiples of the configured batch
        batch = cfg.synthesis.batch if n % cfg.synthesis.batch == 0 else math.gcd(n, cfg.synthesis.batch)
        sc = replace(cfg.synthesis, n=n, batch=batch, seed=_seed(cfg))
        ds = S.optimize_samples(model, sc)
        recs = D.LabeledImages(D.to_uint8(ds.images, model.norm_mean, model.norm_std), ds.labels)
        prefix = out / (f"synthetic_n{n}" if args.size_sweep else "synthetic")
        objective = [(h["initial"], h["final"]) for h in ds.history]
        D.write_synthetic(prefix, recs, ds.difficulties,
                          {"config": cfg.echo(), "synthesis": sc.__dict__, "objective": objective,
                           "checkpoint": str(args.checkpoint)})
        print(f"wrote {n} synthetic records to {prefix}.bin")
    _echo(out, cfg, "synthesize", {"sizes": sizes})
    return 0


def _finetune_once(cfg: PipelineConfig, teacher: M.ModelGraph, ds: S.SyntheticDataset, heldout, seed: int):
    wb, ab = cfg.bits
    rtn = Q.quantize_model(teacher, wb, ab, cfg.ends_8bit)
    Q.calibrate_activation_ranges(rtn, (ds.images[s:s + 256] for s in range(0, len(ds), 256)))
    q = Q.quantize_model(teacher, wb, ab, cfg.ends_8bit)
    res = distill.finetune(teacher, q, ds, replace(cfg.finetune, seed=seed), heldout=heldout)
    return rtn, res


def cmd_quantize_finetune(args) -> int:
    cfg = load_config(args)
    teacher = M.load_checkpoint(args.checkpoint)
    ds = _load_synthetic(args.synthetic, teacher)
    heldout = _heldout(args, cfg, teacher)
    out = _outdir(args.out)
    rtn, res = _finetune_once(cfg, teacher, ds, heldout, _seed(cfg))
    Q.save_quantized(res.model, out / "quantized", {"config": cfg.echo()})
    _write_text(out / "finetune.csv", res.csv_text())
    if heldout is not None:
        rep = E.EvalReport(E.top1_accuracy(res.model, *heldout), E.error_rate_by_difficulty(res.model, *heldout),
                           E.cam_discrepancy(teacher, res.model, *heldout), config=cfg.echo())
        rep_rtn = E.top1_accuracy(rtn, *heldout)
        _write_text(out / "report.csv", rep.csv_text() + f"rtn_top1,{rep_rtn:.6f}\n")
        _write_text(out / "report.txt", rep.text() + f"RTN-only top-1 accuracy: {rep_rtn:.4f}\n")
        print(rep.text(), end="")
        print(f"RTN-only top-1 accuracy: {rep_rtn:.4f}")
    _echo(out, cfg, "quantize-finetune")
    return 0


def cmd_ablation(args) -> int:
    cfg = load_config(args)
    teacher = M.load_checkpoint(args.checkpoint)
    ds = _load_synthetic(args.synthetic, teacher)
    heldout = _heldout(args, cfg, teacher)
    out = _outdir(args.out)
    rows = ["ablate,i1_filter,i2_cam,i3_gating,final_kl,final_total,top1"]
    for name in ABLATIONS:
        c = replace(cfg, finetune=replace(cfg.finetune, **ablation_flags(name)))
        _, res = _finetune_once(c, teacher, ds, heldout, _seed(cfg))
        last = res.log[-1]
        if not all(np.isfinite([last["kl"], last["total"]])):
            raise ZSQError(f"ablation {name} produced a non-finite loss")
        f = ablation_flags(name)
        rows.append(f"{name},{int(f['use_filter'])},{int(f['use_cam'])},{int(f['use_gating'])},"
                    f"{last['kl']:.8g},{last['total']:.8g},{last['heldout_top1']:.6f}")
        _write_text(out / f"finetune_{name}.csv", res.csv_text())
        print(rows[-1])
    _write_text(out / "ablation.csv", "\n".join(rows) + "\n")
    _echo(out, cfg, "ablation")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    teacher = M.load_checkpoint(args.checkpoint)
    heldout = _heldout(args, cfg, teacher)
    if heldout is None:
        raise ParameterError("eval needs --data")
    out = _outdir(args.out)
    models = [("fp32", teacher)] + [(Path(p).name, Q.load_quantized(p)[0]) for p in args.quantized or []]
    lines = ["model,top1" + (",cam_kl" if args.cam_discrepancy else "")]
    for name, mdl in models:
        rep = E.EvalReport(E.top1_accuracy(mdl, *heldout), E.error_rate_by_difficulty(mdl, *heldout),
                           E.cam_discrepancy(teacher, mdl, *heldout) if args.cam_discrepancy else None,
                           config=cfg.echo())
        _write_text(out / f"report_{name}.csv", rep.csv_text())
        _write_text(out / f"report_{name}.txt", rep.text())
        lines.append(f"{name},{rep.top1:.6f}" + (f",{rep.cam_kl:.8g}" if args.cam_discrepancy else ""))
        if args.emit_plot_data:
            _write_text(out / f"difficulty_{name}.csv", E.difficulty_plot_rows(rep.bins))
        print(f"{name}: top-1 {rep.top1:.4f}" + (f", CAM KL {rep.cam_kl:.6f}" if args.cam_discrepancy else ""))
    _write_text(out / "summary.csv", "\n".join(lines) + "\n")
    _echo(out, cfg, "eval")
    return 0


def cmd_spectrum(args) -> int:
    cfg = load_config(args)
    out = _outdir(args.out)
    kinds = args.dataset or ["real", "synthetic"]
    model = M.load_checkpoint(args.checkpoint)
    summary = ["dataset,top_quartile_mean_amplitude"]
    for kind in kinds:
        if kind == "real":
            train, _ = _load_real(args.data, args.format, cfg)
            x = D.normalize(train.images[:args.limit], model.norm_mean, model.norm_std)
        elif kind in ("synthetic", "filtered"):
            ds = _load_synthetic(args.synthetic, model)
            x = ds.images[:args.limit]
            if kind == "filtered":
                x = ds.subset(args.limit).with_filter(cfg.finetune.d0, S.value_range(model)).filtered
        else:
            raise ParameterError(f"unknown spectrum dataset {kind!r}")
        prof = spectral.amplitude_distribution(x, args.bins)
        _write_text(out / f"spectrum_{kind}.csv", E.profile_csv(prof))
        summary.append(f"{kind},{prof.high_band_mean():.8g}")
        print(f"{kind}: top-quartile mean amplitude {prof.high_band_mean():.6g}")
    _write_text(out / "spectrum_summary.csv", "\n".join(summary) + "\n")
    _echo(out, cfg, "spectrum")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args)
    teacher = M.load_checkpoint(args.checkpoint)
    ds = _load_synthetic(args.synthetic, teacher)
    out = _outdir(args.out)
    res = E.runtime_bench(teacher, ds, args.sweep_n, replace(cfg.finetune, seed=_seed(cfg)), cfg.bits,
                          repeats=args.repeats)
    _write_text(out / "bench.csv", res.csv_text())
    text = (f"slope {res.slope:.6g} s/sample, intercept {res.intercept:.6g} s\n"
            f"doubling ratios {', '.join(f'{r:.3f}' for r in res.doubling_ratios)}\n"
            f"mean CAM overhead {res.mean_cam_overhead:.4f}\n")
    _write_text(out / "bench.txt", text)
    print(res.csv_text() + text, end="")
    _echo(out, cfg, "bench")
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline configuration")
    common.add_argument("--preset", choices=PRESETS, help="named configuration when --config is absent")
    common.add_argument("--seed", type=int, help="overrides the config's seed list with one seed")
    common.add_argument("--emit-plot-data", action="store_true", help="write series for external plotting")
    common.add_argument("-v", "--verbose", action="store_true")

    real = argparse.ArgumentParser(add_help=False)
    real.add_argument("--data", help="real dataset directory (CIFAR-10 binary layout)")
    real.add_argument("--format", default="cifar10", choices=("cifar10", "desk-digits"))

    tune = argparse.ArgumentParser(add_help=False)
    tune.add_argument("--bits", type=_parse_bits, help="weight,activation bits, e.g. 4,4")
    tune.add_argument("--tau", type=float)
    tune.add_argument("--d0", type=float)
    tune.add_argument("--lambda-ce", dest="lambda_ce", type=float)
    tune.add_argument("--lambda-cam", dest="lambda_cam", type=float)
    tune.add_argument("--epochs", type=int)
    tune.add_argument("--lr", type=float)

    p = argparse.ArgumentParser(prog="zsqbench", description="Zero-shot quantization workbench")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-desk-data", parents=[common], help="write the offline desk dataset in CIFAR-10 layout")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_desk_data)

    s = sub.add_parser("pretrain", parents=[common, real], help="train the full-precision source model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("synthesize", parents=[common], help="generate a synthetic dataset from a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint prefix (without .manifest.json)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--iters", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--size-sweep", type=_parse_int_list, help="comma-separated dataset sizes")
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("quantize-finetune", parents=[common, real, tune], help="RTN init, calibrate, fine-tune")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--synthetic", required=True, help="synthetic dataset prefix")
    s.add_argument("--out", required=True)
    s.add_argument("--ablate", choices=ABLATIONS, help="ideas kept enabled (i1 filter, i2 CAM, i3 gating)")
    s.set_defaults(func=cmd_quantize_finetune)

    s = sub.add_parser("ablation", parents=[common, real, tune], help="run all eight --ablate settings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--synthetic", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablation)

    s = sub.add_parser("eval", parents=[common, real], help="accuracy, difficulty bins, CAM discrepancy")
    s.add_argument("--checkpoint", required=True, help="full-precision checkpoint prefix")
    s.add_argument("--quantized", action="append", help="quantized checkpoint prefix (repeatable)")
    s.add_argument("--cam-discrepancy", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("spectrum", parents=[common, real], help="radial amplitude profiles")
    s.add_argument("--dataset", action="append", choices=("real", "synthetic", "filtered"))
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--synthetic")
    s.add_argument("--bins", type=int, default=16)
    s.add_argument("--limit", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("bench", parents=[common, tune], help="per-epoch fine-tuning time versus N")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--synthetic", required=True)
    s.add_argument("--sweep-n", type=_parse_int_list, default=[128, 256, 512])
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ZSQError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
