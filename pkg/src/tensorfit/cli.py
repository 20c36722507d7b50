"""Command-line entry point.

Subcommands cover the full pipeline: ``phantom`` (synthetic ground truth),
``synth`` (forward DWI synthesis with optional Rician noise), ``fit``
(classical or learned tensor estimation), ``train`` (the two training
stages), ``evaluate`` (error reports), ``sweep`` (noise sweeps), and
``rerun`` (re-execute a recorded run).

Every command writes a JSON run manifest next to its outputs with the fully
resolved configuration, seeds, paths, toolkit version, and wall-clock
duration; ``rerun <manifest>`` reproduces the run. With ``--threads 1`` all
outputs are bit-identical across re-runs. Relative output paths resolve
against ``$TENSORFIT_OUTDIR`` when that variable is set.

Errors exit nonzero with a single machine-parsable line on stderr:
``error\t<command>\t<exception-type>\t<message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

OUTDIR_ENV = "TENSORFIT_OUTDIR"

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_threads(threads: int | None) -> None:
    """Pin the BLAS thread pools. Must run before numpy is imported, which is
    why this module defers all package imports into the command handlers."""
    if threads is None:
        return
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def _resolve_out(path: str) -> str:
    base = os.environ.get(OUTDIR_ENV)
    if base and not os.path.isabs(path):
        path = os.path.join(base, path)
    return os.path.abspath(path)


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"dims must be nx,ny,nz, got {text!r}")
    return tuple(parts)


def _parse_floats(text: str) -> list[float]:
    return [float(p) for p in text.split(",")]


def _load_scheme(args):
    from . import core

    if args.scheme == "skare6":
        return core.skare6(b=args.b)
    if args.scheme == "uniform30":
        return core.uniform_sphere_scheme(30, b=args.b)
    if args.scheme == "fsl":
        if not (args.bvec and args.bval):
            raise ValueError("--scheme fsl requires --bvec and --bval")
        return core.load_fsl_scheme(args.bvec, args.bval, b0_index=args.b0_index)
    raise ValueError(f"unknown scheme {args.scheme!r}")


def _add_scheme_args(sub):
    sub.add_argument("--scheme", default="skare6",
                     choices=("skare6", "uniform30", "fsl"),
                     help="gradient scheme preset or FSL bvec/bval pair")
    sub.add_argument("--b", type=float, default=1000.0,
                     help="shell b-value for presets, s/mm^2")
    sub.add_argument("--bvec", help="FSL bvec file (3 rows)")
    sub.add_argument("--bval", help="FSL bval file (1 row)")
    sub.add_argument("--b0-index", type=int, default=None,
                     help="which b=0 column to keep when the files have several")


def _write_manifest(directory: str, command: str, args: argparse.Namespace,
                    outputs: list[str], started: float) -> str:
    from . import __version__

    record = {k: v for k, v in vars(args).items() if k != "func"}
    seeds = {k: v for k, v in record.items() if "seed" in k}
    manifest = {
        "command": command,
        "args": record,
        "seeds": seeds,
        "outputs": [os.path.abspath(p) for p in outputs],
        "version": __version__,
        "threads": args.threads,
        "duration_s": time.time() - started,
    }
    path = os.path.join(directory, f"{command}_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    os.replace(tmp, path)
    return path


# --- commands ----------------------------------------------------------------

def cmd_phantom(args) -> list[str]:
    from .phantom import PhantomSpec, generate_phantom
    from .volume import save_volume

    out_dir = _resolve_out(args.out)
    os.makedirs(out_dir, exist_ok=True)
    spec = PhantomSpec(dims=_parse_dims(args.dims), seed=args.seed,
                       region_model=args.region_model,
                       length_scale=args.length_scale)
    tensors, labels, s0 = generate_phantom(spec)
    paths = []
    for vol, name in ((tensors, "tensors"), (labels, "labels"), (s0, "s0")):
        path = os.path.join(out_dir, f"{name}.raw")
        save_volume(vol, path)
        paths.append(path)
    return paths


def cmd_synth(args) -> list[str]:
    import math

    from .phantom import NoiseSpec, add_rician_noise, synthesize_dwi
    from .volume import load_volume, save_volume

    scheme = _load_scheme(args)
    tensors = load_volume(args.tensors)
    s0 = load_volume(args.s0)
    dwi = synthesize_dwi(tensors, s0, scheme)
    if args.snr is not None:
        ref_amp = float(s0.data.mean())
        noise = NoiseSpec(snr_db=args.snr if args.snr > 0 else math.inf,
                          reference_amplitude=ref_amp, seed=args.noise_seed)
        dwi = add_rician_noise(dwi, noise)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_volume(dwi, out)
    return [out]


def _load_mask(path, dims):
    import numpy as np

    from .volume import load_volume

    if path is None:
        return None
    mask = load_volume(path)
    if mask.dims != dims:
        raise ValueError(f"mask dims {mask.dims} do not match volume {dims}")
    return mask.scalar() > 0


def cmd_fit(args) -> list[str]:
    from .fitters import fit_volume
    from .transformer import load_model, normalize_dwi, predict_volume
    from .volume import Volume4D, load_volume, save_volume

    scheme = _load_scheme(args)
    dwi = load_volume(args.dwi)
    if dwi.channels != len(scheme):
        raise ValueError(f"dwi has {dwi.channels} channels but the scheme has "
                         f"{len(scheme)} entries")
    mask = _load_mask(args.mask, dwi.dims)
    if args.method in ("ols", "cwlls", "cnls"):
        tensors = fit_volume(dwi.data, scheme, method=args.method, mask=mask)
        est = Volume4D(tensors, voxel_size=dwi.voxel_size,
                       description=f"{args.method} tensor estimate")
    else:
        if not args.checkpoint:
            raise ValueError(f"method {args.method!r} requires --checkpoint")
        model = load_model(args.checkpoint)
        if args.method != model.kind:
            raise ValueError(f"checkpoint holds a {model.kind} model, "
                             f"--method asked for {args.method}")
        signals, fg = normalize_dwi(dwi, scheme)
        if mask is not None:
            fg = fg & mask
        est = predict_volume(model, signals, mask=fg, stride=args.stride)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    save_volume(est, out)
    return [out]


def _build_dataset(args, scheme):
    from .training import build_patch_dataset
    from .transformer import normalize_dwi
    from .volume import load_volume

    dwi_paths = args.dwi.split(",")
    ref_paths = args.ref.split(",")
    if len(dwi_paths) != len(ref_paths):
        raise ValueError("--dwi and --ref need the same number of volumes")
    pairs = []
    for dp, rp in zip(dwi_paths, ref_paths):
        dwi = load_volume(dp)
        ref = load_volume(rp)
        signals, _ = normalize_dwi(dwi, scheme)
        pairs.append((signals, ref))
    return build_patch_dataset(pairs, L=args.patch)


def cmd_train(args) -> list[str]:
    from .training import TrainConfig, train_model_s, train_model_st
    from .transformer import ModelConfig, load_model, save_model_s, save_two_stage

    scheme = _load_scheme(args)
    dataset = _build_dataset(args, scheme)
    config = TrainConfig(batch_size=args.batch_size, initial_lr=args.lr,
                         lr_decay_factor=args.lr_decay,
                         early_stop_patience=args.early_stop,
                         max_epochs=args.epochs, seed=args.seed,
                         val_fraction=args.val_fraction)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    if args.stage == "s":
        model_config = ModelConfig(L=args.patch, d=args.d, d_h=args.d_h,
                                   n_h=args.n_h, n_tr=args.n_tr,
                                   attention_mode=args.attention_mode,
                                   stabilizers=not args.no_stabilizers)
        model, log = train_model_s(dataset, config, model_config)
        save_model_s(out, model, seed=args.seed)
    else:
        if not args.frozen:
            raise ValueError("--stage st requires --frozen <stage-one checkpoint>")
        model_s = load_model(args.frozen)
        stage, log = train_model_st(dataset, model_s, config)
        save_two_stage(out, stage, seed=args.seed)
    log_path = os.path.splitext(out)[0] + "_log.jsonl"
    log.checkpoint_path = out
    log.write(log_path)
    return [out, log_path]


def cmd_evaluate(args) -> list[str]:
    import numpy as np

    from .core import fractional_anisotropy, mean_diffusivity
    from .metrics import (bland_altman_data, compare_volumes, _eig_stats,
                          write_bland_altman_csv, write_metrics_csv,
                          write_metrics_json)
    from .volume import Volume4D, load_volume

    pred = load_volume(args.pred)
    ref = load_volume(args.ref)
    labels = load_volume(args.labels) if args.labels else None
    mask = _load_mask(args.mask, pred.dims)
    report = compare_volumes(pred, ref, mask=mask, labels=labels,
                             method=args.method_name)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    json_path, csv_path = out + ".json", out + ".csv"
    write_metrics_json([report], json_path)
    write_metrics_csv([report], csv_path)
    paths = [json_path, csv_path]
    if args.bland_altman:
        for name in ("fa", "md"):
            def scalar_map(vol):
                flat = vol.data.reshape(-1, 6)
                vals = np.empty(flat.shape[0])
                for i in range(flat.shape[0]):
                    fa, md, _ = _eig_stats(flat[i])
                    vals[i] = fa if name == "fa" else md
                return Volume4D(vals.reshape(vol.dims + (1,)))

            ba = bland_altman_data(scalar_map(pred), scalar_map(ref), mask=mask)
            ba_path = f"{out}_ba_{name}.csv"
            write_bland_altman_csv(ba, ba_path)
            paths.append(ba_path)
    return paths


def cmd_sweep(args) -> list[str]:
    from .fitters import FIT_METHODS
    from .metrics import (classical_method, learned_method, noise_sweep,
                          write_sweep_csv, write_sweep_json)
    from .transformer import load_model
    from .volume import load_volume

    scheme = _load_scheme(args)
    tensors = load_volume(args.tensors)
    s0 = load_volume(args.s0)
    labels = load_volume(args.labels) if args.labels else None
    methods = {}
    for name in args.methods.split(","):
        if name in FIT_METHODS:
            methods[name] = classical_method(name)
        elif name in ("model-s", "model-st"):
            if not args.checkpoint:
                raise ValueError(f"method {name!r} requires --checkpoint")
            model = load_model(args.checkpoint)
            if model.kind != name:
                raise ValueError(f"checkpoint holds a {model.kind} model, "
                                 f"methods ask for {name}")
            methods[name] = learned_method(model, stride=args.stride)
        else:
            raise ValueError(f"unknown method {name!r}")
    result = noise_sweep(tensors, s0, scheme, _parse_floats(args.snr),
                         methods, seed=args.seed, labels=labels)
    out = _resolve_out(args.out)
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    json_path, csv_path = out + ".json", out + ".csv"
    write_sweep_json(result, json_path)
    write_sweep_csv(result, csv_path)
    return [json_path, csv_path]


def cmd_rerun(args) -> list[str]:
    with open(args.manifest) as f:
        manifest = json.load(f)
    command = manifest["command"]
    if command not in _COMMANDS:
        raise ValueError(f"manifest names unknown command {command!r}")
    recorded = dict(manifest["args"])
    recorded["threads"] = args.threads
    replay = argparse.Namespace(**recorded)
    outputs = _COMMANDS[command](replay)
    _write_manifest(_manifest_dir(outputs), command, replay, outputs,
                    started=time.time())
    return outputs


_COMMANDS = {
    "phantom": cmd_phantom,
    "synth": cmd_synth,
    "fit": cmd_fit,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def _manifest_dir(outputs: list[str]) -> str:
    first = outputs[0]
    return first if os.path.isdir(first) else (os.path.dirname(first) or ".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tensorfit",
        description="diffusion tensor estimation toolkit")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap; 1 guarantees bit-reproducible runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth phantom")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dims", required=True, help="nx,ny,nz")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--region-model", default="layered",
                   choices=("layered", "curved-tract"))
    p.add_argument("--length-scale", type=float, default=8.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("synth", help="synthesize DWI signals from a phantom")
    p.add_argument("--tensors", required=True)
    p.add_argument("--s0", required=True)
    p.add_argument("--out", required=True, help="output .raw path")
    p.add_argument("--snr", type=float, default=None,
                   help="add Rician noise at this SNR (dB); <= 0 means none")
    p.add_argument("--noise-seed", type=int, default=0)
    _add_scheme_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="estimate a tensor volume from DWI")
    p.add_argument("--dwi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", required=True,
                   choices=("ols", "cwlls", "cnls", "model-s", "model-st"))
    p.add_argument("--checkpoint", help="trained model (learned methods)")
    p.add_argument("--mask", help="single-channel mask volume (> 0 = foreground)")
    p.add_argument("--stride", type=int, default=None,
                   help="inference patch stride (learned methods)")
    _add_scheme_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train stage-one or stage-two models")
    p.add_argument("--stage", required=True, choices=("s", "st"))
    p.add_argument("--dwi", required=True, help="comma-separated DWI volumes")
    p.add_argument("--ref", required=True,
                   help="comma-separated reference tensor volumes")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--frozen", help="stage-one checkpoint (stage st)")
    p.add_argument("--patch", type=int, default=5)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--d-h", type=int, default=64)
    p.add_argument("--n-h", type=int, default=2)
    p.add_argument("--n-tr", type=int, default=2)
    p.add_argument("--attention-mode", default="softmax",
                   choices=("softmax", "unnormalized"))
    p.add_argument("--no-stabilizers", action="store_true")
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lr-decay", type=float, default=0.9)
    p.add_argument("--early-stop", type=int, default=2)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    _add_scheme_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compare a tensor volume to a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--labels")
    p.add_argument("--mask")
    p.add_argument("--method-name", default="pred")
    p.add_argument("--bland-altman", action="store_true",
                   help="also emit FA and MD Bland-Altman CSVs")
    p.add_argument("--out", required=True, help="report stem (.json/.csv added)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="noise sweep over SNR levels")
    p.add_argument("--tensors", required=True)
    p.add_argument("--s0", required=True)
    p.add_argument("--labels")
    p.add_argument("--snr", required=True, help="comma-separated dB levels")
    p.add_argument("--methods", default="cwlls",
                   help="comma-separated: ols,cwlls,cnls,model-s,model-st")
    p.add_argument("--checkpoint")
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output stem (.json/.csv added)")
    _add_scheme_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("rerun", help="re-execute a recorded run manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_threads(args.threads)
    started = time.time()
    try:
        outputs = args.func(args)
        if args.command != "rerun":
            _write_manifest(_manifest_dir(outputs), args.command, args,
                            outputs, started)
    except Exception as exc:  # single-line machine-parsable failure
        msg = str(exc).replace("\n", " ")
        print(f"error\t{args.command}\t{type(exc).__name__}\t{msg}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
