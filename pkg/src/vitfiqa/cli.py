"""Command-line surface: synth, train, embed, score, edc, gradcheck, selftest.

Configuration is a flat key=value text file; command-line flags override
file values. Exit codes: 0 success, 1 usage, 2 I/O, 3 format, 4 numerical
failure.
"""

import argparse
import os
import sys

import numpy as np

from . import data as datamod
from . import edc as edcmod
from . import heads
from . import tensor as T
from . import train as trainmod
from . import vit

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3
EXIT_NUMERICAL = 4


def _parse_bool(s):
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_range(s):
    lo, hi = (float(x) for x in str(s).split(","))
    if hi < lo:
        raise ValueError(f"range not ordered: {s!r}")
    return (lo, hi)


# key -> (default, parser). The parsed map is echoed verbatim into checkpoints.
CONFIG_SPEC = {
    "H": (16, int), "W": (16, int), "C": (3, int), "P": (8, int),
    "D": (16, int), "heads": (2, int), "layers": (2, int), "ffn_width": (64, int),
    "pos0_trainable": (True, _parse_bool),
    "variant": ("T", str),
    "s": (64.0, float), "m": (0.35, float), "lambda": (10.0, float),
    "beta": (1.0, float), "eps": (1e-4, float),
    "base_lr": (1e-3, float), "total_steps": (300, int),
    "power": (1.0, float), "warmup_steps": (15, int),
    "beta1": (0.9, float), "beta2": (0.999, float),
    "eps_opt": (1e-8, float), "weight_decay": (0.05, float),
    "clip_norm": (0.0, float),
    "batch_size": (32, int), "seed": (0, int),
    "augment": (True, _parse_bool),
    "affine_prob": (0.1, float), "crop_prob": (0.1, float),
    "cutout_prob": (0.1, float), "brightness_prob": (0.1, float),
    "saturation_prob": (0.1, float), "contrast_prob": (0.1, float),
    "grayscale_prob": (0.1, float), "blur_prob": (0.1, float),
    "lowres_prob": (0.1, float),
    "affine_scale": ((0.9, 1.1), _parse_range),
    "affine_rotation": ((-10.0, 10.0), _parse_range),
    "affine_translate": ((-0.05, 0.05), _parse_range),
    "crop_area": ((0.7, 1.0), _parse_range),
    "cutout_size": ((0.1, 0.3), _parse_range),
    "brightness_range": ((0.7, 1.3), _parse_range),
    "saturation_range": ((0.5, 1.5), _parse_range),
    "contrast_range": ((0.7, 1.3), _parse_range),
    "blur_sigma": ((0.3, 1.5), _parse_range),
    "lowres_factor": ((0.25, 0.75), _parse_range),
}


def serialize_config(cfg):
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, tuple):
            value = f"{value[0]},{value[1]}"
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def parse_config(text):
    """Parse key=value lines; unknown keys are rejected."""
    cfg = {k: v for k, (v, _) in CONFIG_SPEC.items()}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SPEC:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        cfg[key] = CONFIG_SPEC[key][1](value)
    return cfg


def load_config(path=None, overrides=None):
    if path is not None:
        if not os.path.exists(path):
            raise IOError(f"config file not found: {path}")
        with open(path) as f:
            cfg = parse_config(f.read())
    else:
        cfg = parse_config("")
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = CONFIG_SPEC[key][1](value) if isinstance(value, str) else value
    return cfg


def vit_config_from(cfg):
    return vit.ViTConfig(H=cfg["H"], W=cfg["W"], C=cfg["C"], P=cfg["P"], D=cfg["D"],
                         h=cfg["heads"], L=cfg["layers"], ffn_width=cfg["ffn_width"],
                         pos0_trainable=cfg["pos0_trainable"])


def loss_config_from(cfg):
    return heads.LossConfig(s=cfg["s"], m=cfg["m"], lam=cfg["lambda"],
                            beta=cfg["beta"], eps=cfg["eps"])


def augment_spec_from(cfg):
    if not cfg["augment"]:
        return None
    return datamod.AugmentSpec(
        affine_prob=cfg["affine_prob"], affine_scale=cfg["affine_scale"],
        affine_rotation=cfg["affine_rotation"], affine_translate=cfg["affine_translate"],
        crop_prob=cfg["crop_prob"], crop_area=cfg["crop_area"],
        cutout_prob=cfg["cutout_prob"], cutout_size=cfg["cutout_size"],
        brightness_prob=cfg["brightness_prob"], brightness_range=cfg["brightness_range"],
        saturation_prob=cfg["saturation_prob"], saturation_range=cfg["saturation_range"],
        contrast_prob=cfg["contrast_prob"], contrast_range=cfg["contrast_range"],
        grayscale_prob=cfg["grayscale_prob"], blur_prob=cfg["blur_prob"],
        blur_sigma=cfg["blur_sigma"], lowres_prob=cfg["lowres_prob"],
        lowres_factor=cfg["lowres_factor"])


def thread_cap():
    """Worker-parallelism cap from VITFIQA_THREADS (default: available cores)."""
    raw = os.environ.get("VITFIQA_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    cap = int(raw)
    if cap < 1:
        raise ValueError("VITFIQA_THREADS must be a positive integer")
    return cap


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    if args.identities < 2:
        print("error: need >= 2 identities", file=sys.stderr)
        return EXIT_USAGE
    manifest = datamod.synth_generate(args.out, args.identities, args.per_identity,
                                      args.size, args.seed)
    print(f"wrote {len(manifest.entries)} images for {args.identities} identities")
    print(os.path.join(args.out, "manifest.csv"))
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["total_steps"] = args.steps
    if args.variant is not None:
        cfg["variant"] = args.variant
    manifest = datamod.read_manifest(args.data, split="train")
    config = vit_config_from(cfg)
    schedule = trainmod.Schedule(base_lr=cfg["base_lr"], total_steps=cfg["total_steps"],
                                 power=cfg["power"], warmup_steps=cfg["warmup_steps"])
    optim_hp = dict(beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps_opt"],
                    weight_decay=cfg["weight_decay"])
    config_map = dict(line.split("=", 1) for line in serialize_config(cfg).splitlines())
    result = trainmod.train(
        manifest, config, cfg["variant"], loss_config_from(cfg), schedule,
        optim_hp=optim_hp, batch_size=cfg["batch_size"], seed=cfg["seed"],
        augment_spec=augment_spec_from(cfg), checkpoint_path=args.out,
        config_map=config_map,
        clip_norm=cfg["clip_norm"] or None)
    metrics_path = args.metrics or (args.out + ".metrics.csv")
    trainmod.write_metrics(metrics_path, result.metrics)
    print(f"trained {cfg['total_steps']} steps; final loss {result.metrics[-1][1]:.6f}")
    print(args.out)
    return EXIT_OK


def _load_model(ckpt_path):
    params, config_map, _, _ = trainmod.checkpoint_load(ckpt_path)
    cfg = parse_config("\n".join(f"{k}={v}" for k, v in config_map.items()))
    return params, vit_config_from(cfg), cfg["variant"]


def _entry_id(entry):
    return os.path.splitext(os.path.basename(entry.path))[0]


def _iter_inference(ckpt, manifest_path):
    params, config, variant = _load_model(ckpt)
    manifest = datamod.read_manifest(manifest_path, split="eval")
    for entry in manifest.entries:
        batch = datamod.load_batch([entry], None, seed=0, split="eval")
        emb, qhat = heads.predict(batch[0][0], params, config, variant)
        yield _entry_id(entry), emb, qhat


def cmd_score(args):
    with open(args.out, "w", newline="") as f:
        f.write("id,quality\n")
        for vid, _, qhat in _iter_inference(args.ckpt, args.data):
            f.write(f"{vid},{qhat!r}\n")
    print(args.out)
    return EXIT_OK


def cmd_embed(args):
    rows = list(_iter_inference(args.ckpt, args.data))
    width = len(rows[0][1]) if rows else 0
    with open(args.out, "w", newline="") as f:
        f.write("id," + ",".join(f"e{i}" for i in range(width)) + "\n")
        for vid, emb, _ in rows:
            f.write(vid + "," + ",".join(repr(float(x)) for x in emb) + "\n")
    print(args.out)
    return EXIT_OK


def render_edc_svg(curve, tau_result, path, width=800, height=600):
    """Static single-polyline EDC figure with linear axes and tick labels."""
    ml, mr, mt, mb = 70, 20, 20, 50
    pw, ph = width - ml - mr, height - mt - mb
    x_max = float(curve.grid[-1]) or 1.0
    y_max = max(float(curve.fnmr.max()), 1e-6) * 1.05
    pts = " ".join(
        f"{ml + pw * float(d) / x_max:.2f},{mt + ph * (1 - float(f) / y_max):.2f}"
        for d, f in zip(curve.grid, curve.fnmr))
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(11):
        fx = ml + pw * i / 10
        fy = mt + ph * i / 10
        xv = x_max * i / 10
        yv = y_max * (1 - i / 10)
        lines.append(f'<line x1="{fx:.2f}" y1="{mt + ph}" x2="{fx:.2f}" y2="{mt + ph + 5}" stroke="black"/>')
        lines.append(f'<text x="{fx:.2f}" y="{mt + ph + 20}" font-size="11" text-anchor="middle">{xv:.2f}</text>')
        lines.append(f'<line x1="{ml - 5}" y1="{fy:.2f}" x2="{ml}" y2="{fy:.2f}" stroke="black"/>')
        lines.append(f'<text x="{ml - 8}" y="{fy + 4:.2f}" font-size="11" text-anchor="end">{yv:.4f}</text>')
    lines.append(f'<polyline points="{pts}" fill="none" stroke="red" stroke-width="1.5"/>')
    lines.append(f'<text x="{ml + 10}" y="{mt + 15}" font-size="12">tau={tau_result.tau!r} '
                 f'achieved_fmr={tau_result.achieved_fmr!r}</text>')
    lines.append(f'<text x="{width // 2}" y="{height - 10}" font-size="12" '
                 f'text-anchor="middle">discard fraction</text>')
    lines.append('</svg>')
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def cmd_edc(args):
    cset = edcmod.build_comparison_set(args.embeddings, args.scores, args.pairs)
    tau_result = edcmod.fmr_threshold([s for s, _ in cset.impostor], args.fmr)
    grid = edcmod.default_grid(d_max=args.dmax)
    curve = edcmod.edc_compute(cset, tau_result.tau, grid)
    auc_value = edcmod.auc(curve, args.dmax)
    pauc_value = edcmod.pauc(curve)
    edcmod.write_curve_csv(args.out, curve)
    summary = os.path.splitext(args.out)[0] + ".summary.csv"
    edcmod.write_summary_csv(summary, tau_result, auc_value, pauc_value)
    if args.svg:
        render_edc_svg(curve, tau_result, args.svg)
    print(f"tau={tau_result.tau!r} achieved_fmr={tau_result.achieved_fmr!r} "
          f"auc={auc_value!r} pauc30={pauc_value!r}")
    return EXIT_OK


def run_gradcheck(variant, num_classes=5, batch=3, max_coords=8, seed=0,
                  break_gradient=False):
    """Finite-difference check of the full toy model at 64-bit."""
    config = vit.toy_config()
    params = heads.init_model_params(config, variant, num_classes, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    batch_data = [(rng.uniform(-1, 1, size=(config.H, config.W, config.C)),
                   int(rng.integers(num_classes))) for _ in range(batch)]
    loss_cfg = heads.LossConfig()
    targets = heads.total_loss(batch_data, params, config, variant, loss_cfg).targets

    def loss_fn():
        return heads.total_loss(batch_data, params, config, variant, loss_cfg,
                                fixed_targets=targets).loss.item()

    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        out = heads.total_loss(batch_data, params, config, variant, loss_cfg,
                               fixed_targets=targets)
        T.backward(out.loss, tape)
    if break_gradient:
        params["quality_token" if variant == "T" else "fr.b"].grad += 1.0
    return T.finite_diff_check(loss_fn, list(params.values()),
                               max_coords_per_tensor=max_coords,
                               rng=np.random.default_rng(seed))


def cmd_gradcheck(args):
    worst = 0.0
    for variant in ("T", "C"):
        err = run_gradcheck(variant, break_gradient=args.break_gradient)
        print(f"variant {variant}: max relative error {err:.3e}")
        worst = max(worst, err)
    if worst >= 1e-4:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradcheck passed")
    return EXIT_OK


def cmd_selftest(args):
    """Quick fixture battery over all modules."""
    failures = []

    def check(name, ok):
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
        if not ok:
            failures.append(name)

    a = T.constant([[1.0, 2.0]])
    b = T.constant([[3.0], [4.0]])
    check("matmul 1x2 * 2x1", float(T.matmul(a, b).data[0, 0]) == 11.0)
    sm = T.softmax_lastdim(T.constant([0.0, np.log(3.0)]))
    check("softmax [0, ln3]", np.allclose(sm.data, [0.25, 0.75]))
    check("gelu(0) == 0", T.gelu(T.constant([0.0])).data[0] == 0.0)
    check("l2_normalize [3,4]", np.allclose(
        T.l2_normalize_rows(T.constant([[3.0, 4.0]])).data, [[0.6, 0.8]]))
    check("normalize endpoints",
          datamod.normalize(np.uint8(0)) == -1.0 and datamod.normalize(np.uint8(255)) == 1.0)
    px = datamod.parse_ppm(b"P6\n1 1\n255\n\xff\x00\x00")
    check("ppm 1x1 red", px.shape == (1, 1, 3) and list(px[0, 0]) == [255, 0, 0])
    check("smooth_l1 branches",
          heads.smooth_l1(0.5, 0.0, 1.0) == 0.125 and heads.smooth_l1(2.0, 0.0, 1.0) == 1.5)
    tr = edcmod.fmr_threshold([0.1, 0.2, 0.3, 0.4], 0.25)
    check("fmr_threshold", tr.tau == 0.4 and tr.achieved_fmr == 0.25)
    check("crfiq target", abs(heads.crfiq_target([1.0, 0.0], 0,
          [[1.0, 0.0], [0.0, 1.0]], 1e-4) - 1.0 / 1.0001) < 1e-12)
    sched = trainmod.Schedule(base_lr=1.0, total_steps=100, power=1.0, warmup_steps=10)
    check("lr schedule", trainmod.lr_at(5, sched) == 0.5 and trainmod.lr_at(100, sched) == 0.0)
    err = run_gradcheck("T", batch=2, max_coords=2)
    check("toy gradcheck", err < 1e-4)
    if failures:
        print(f"{len(failures)} selftest failure(s)", file=sys.stderr)
        return EXIT_NUMERICAL
    print("selftest passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vitfiqa",
                                     description="ViT face image quality assessment, desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, required=True)
    p.add_argument("--per-identity", type=int, required=True)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--variant", choices=("T", "C"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="predict quality scores for a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("embed", help="compute face embeddings for a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("edc", help="error-versus-discard evaluation")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--fmr", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.add_argument("--dmax", type=float, default=0.98)
    p.set_defaults(func=cmd_edc)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config")
    p.add_argument("--break-gradient", action="store_true",
                   help="negative control: corrupt one gradient before checking")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run built-in fixture checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (OSError, IOError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (trainmod.FormatError, datamod.ParseError) as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (ValueError, KeyError, T.ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
