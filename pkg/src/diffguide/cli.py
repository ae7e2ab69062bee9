"""Batch experiment runner.

Subcommands cover the full pipeline: dataset generation, classifier training
for both personas, sensitivity curves, guided sampling with metrics, guidance
scale sweeps, and a consolidated report. Every artifact is reproducible
bit-for-bit from (config, master seed): sub-seeds fan out through labeled
substreams, outputs embed the config hash, and floats are written with 17
significant digits. Plots are self-contained SVG with no timestamps.
"""

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import guidance as gd
from . import metrics as mtr
from . import nn
from . import sensitivity as sens
from .denoiser import AnalyticDenoiser
from .rng import substream_seed
from .schedule import linear_schedule
from .synthdata import (
    GmmSpec,
    make_spec,
    sample_dataset,
    save_dataset_csv,
    three_class_benchmark,
    two_class_benchmark,
)


class ConfigError(ValueError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ALL_DIVERGED = 2


def default_config() -> dict:
    """Built-in experiment: 2-D two-class benchmark, 400-step linear schedule."""
    return {
        "seed": 2024,
        "schedule": {
            "T": 400,
            "beta_start": 1e-4,
            "beta_end": 0.02,
            "posterior_variance_mode": "beta_t",
        },
        "data": {"preset": "two_class", "n_train": 4000, "n_val": 2000},
        "train": {
            "hidden": [64, 64],
            "activation": "tanh",
            "epochs": 40,
            "batch_size": 128,
            "lr": 0.01,
        },
        "guidance": {
            "classifier": "non_robust",
            "target_class": 1,
            "scale": 2.0,
            "path": "x0pred",
            "jacobian_mode": "full",
            "objective": "log_softmax",
            "stabilizer": {"kind": "ema", "beta": 0.99},
        },
        "sample": {"n": 2000},
        "sensitivity": {"n": 500},
        "sweep": {"scales": [0.0, 0.25, 0.5, 1.0, 2.0, 5.0, 20.0, 50.0], "n_per_scale": 2000},
    }


_SCHEMA = {
    "seed": int,
    "schedule": {"T": int, "beta_start": float, "beta_end": float, "posterior_variance_mode": str},
    "data": {"preset": str, "classes": list, "n_train": int, "n_val": int},
    "train": {"hidden": list, "activation": str, "epochs": int, "batch_size": int, "lr": float},
    "guidance": {
        "classifier": str,
        "target_class": int,
        "scale": float,
        "path": str,
        "jacobian_mode": str,
        "objective": str,
        "stabilizer": {"kind": str, "beta": float, "beta1": float, "beta2": float, "eps": float},
    },
    "sample": {"n": int},
    "sensitivity": {"n": int},
    "sweep": {"scales": list, "n_per_scale": int},
}


def _check_keys(node, schema, where: str) -> None:
    if not isinstance(node, dict):
        raise ConfigError(f"{where}: expected an object")
    for key, val in node.items():
        if key not in schema:
            raise ConfigError(f"{where}: unknown field {key!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            _check_keys(val, sub, f"{where}.{key}")
        elif sub is float:
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                raise ConfigError(f"{where}.{key}: expected a number")
        elif not isinstance(val, sub) or isinstance(val, bool):
            raise ConfigError(f"{where}.{key}: expected {sub.__name__}")


def validate_config(raw: dict) -> dict:
    """Fail-closed validation: unknown fields are rejected, defaults fill
    omitted ones."""
    _check_keys(raw, _SCHEMA, "config")
    cfg = default_config()
    for section, val in raw.items():
        if isinstance(val, dict):
            if section == "data" and ("classes" in val or "preset" in val):
                # inline mixtures replace the preset outright
                cfg["data"] = {**{"n_train": cfg["data"]["n_train"], "n_val": cfg["data"]["n_val"]}, **val}
            else:
                cfg[section] = {**cfg.get(section, {}), **copy.deepcopy(val)}
        else:
            cfg[section] = val
    if "stabilizer" in raw.get("guidance", {}):
        cfg["guidance"]["stabilizer"] = copy.deepcopy(raw["guidance"]["stabilizer"])
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def load_config(path: str | None, seed_override: int | None = None) -> tuple[dict, str]:
    if path is None:
        raw = {}
    else:
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = validate_config(raw)
    if seed_override is not None:
        cfg["seed"] = int(seed_override)
    if cfg["seed"] < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return cfg, config_hash(cfg)


# -- config -> objects --------------------------------------------------------


def build_spec(cfg: dict) -> GmmSpec:
    data = cfg["data"]
    if "classes" in data:
        classes = [
            (
                c["prior"],
                [(k["weight"], k["mean"], np.asarray(k["cov"])) for k in c["components"]],
            )
            for c in data["classes"]
        ]
        return make_spec(classes)
    preset = data.get("preset", "two_class")
    if preset == "two_class":
        return two_class_benchmark()
    if preset == "three_class":
        return three_class_benchmark()
    raise ConfigError(f"unknown data preset {preset!r}")


def build_schedule(cfg: dict):
    s = cfg["schedule"]
    return linear_schedule(s["T"], s["beta_start"], s["beta_end"], s["posterior_variance_mode"])


def build_stabilizer(node: dict) -> gd.StabilizerConfig:
    kind = node.get("kind", "identity")
    if kind == "ema":
        return gd.ema(node.get("beta", 0.99))
    if kind == "adam":
        return gd.adam(node.get("beta1", 0.9), node.get("beta2", 0.999), node.get("eps", 1e-8))
    if kind == "identity":
        return gd.identity()
    raise ConfigError(f"unknown stabilizer kind {kind!r}")


def _seed(cfg: dict, label: str, index: int = 0) -> int:
    return int(substream_seed(cfg["seed"], label, index).generate_state(1)[0])


def _datasets(cfg: dict, spec: GmmSpec):
    train_ds = sample_dataset(spec, cfg["data"]["n_train"], _seed(cfg, "dataset-train"))
    val_ds = sample_dataset(spec, cfg["data"]["n_val"], _seed(cfg, "dataset-val"))
    return train_ds, val_ds


def _checkpoint_path(out: Path, persona: str) -> Path:
    return out / f"classifier_{persona}.json"


def train_persona(cfg: dict, persona: str, spec: GmmSpec, schedule) -> nn.TrainResult:
    tr = cfg["train"]
    sizes = [spec.dim] + list(tr["hidden"]) + [spec.n_classes]
    model = nn.init_mlp(sizes, tr["activation"], seed=_seed(cfg, f"init-{persona}"))
    train_ds, _ = _datasets(cfg, spec)
    return nn.train(
        model,
        train_ds.points,
        train_ds.labels,
        noise_mode="clean" if persona == "non_robust" else "forward_noised",
        schedule=schedule,
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        seed=_seed(cfg, f"train-{persona}"),
    )


def _load_classifier(cfg: dict, out: Path, spec: GmmSpec) -> clf.ClassifierHandle:
    name = cfg["guidance"]["classifier"]
    if name == "bayes_oracle":
        return clf.bayes_oracle(spec)
    if name not in ("non_robust", "robust"):
        raise ConfigError(f"unknown guidance classifier {name!r}")
    path = _checkpoint_path(out, name)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; run the train command first")
    model = nn.load_checkpoint(path)
    return clf.ClassifierHandle(name, model=model)


def build_guidance_config(cfg: dict, handle: clf.ClassifierHandle) -> gd.GuidanceConfig:
    g = cfg["guidance"]
    return gd.GuidanceConfig(
        classifier=handle,
        target_class=g["target_class"],
        scale=float(g["scale"]),
        path=g["path"],
        jacobian_mode=g["jacobian_mode"],
        stabilizer=build_stabilizer(g["stabilizer"]),
        objective=g["objective"],
    )


# -- SVG plotting (no external dependency; deliberately timestamp-free) -------


def _svg_line_plot(series: list[tuple[str, np.ndarray, np.ndarray]], title: str, path) -> None:
    width, height, pad = 640, 400, 50
    xs_all = np.concatenate([s[1] for s in series])
    ys_all = np.concatenate([s[2] for s in series])
    finite = np.isfinite(ys_all)
    ys_all = ys_all[finite] if finite.any() else np.array([0.0, 1.0])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    colors = ["#1f77b4", "#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"]

    def sx(x):
        return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 20}" font-size="11">{x_lo:.6g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 20}" text-anchor="end" font-size="11">{x_hi:.6g}</text>',
        f'<text x="{pad - 5}" y="{height - pad}" text-anchor="end" font-size="11">{y_lo:.6g}</text>',
        f'<text x="{pad - 5}" y="{pad}" text-anchor="end" font-size="11">{y_hi:.6g}</text>',
    ]
    for i, (label, xs, ys) in enumerate(series):
        color = colors[i % len(colors)]
        ok = np.isfinite(np.asarray(ys, dtype=float))
        pts = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(np.asarray(xs)[ok], np.asarray(ys)[ok]))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 14 * i + 10}" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# -- subcommands ---------------------------------------------------------------


def cmd_gen_data(cfg: dict, chash: str, out: Path) -> int:
    spec = build_spec(cfg)
    train_ds, val_ds = _datasets(cfg, spec)
    save_dataset_csv(train_ds, out / "train.csv")
    save_dataset_csv(val_ds, out / "val.csv")
    (out / "data_meta.json").write_text(
        json.dumps(
            {"config_hash": chash, "n_train": len(train_ds), "n_val": len(val_ds), "dim": spec.dim},
            sort_keys=True,
        )
    )
    print(f"wrote {out / 'train.csv'} and {out / 'val.csv'}")
    return EXIT_OK


def cmd_train(cfg: dict, chash: str, out: Path, persona: str) -> int:
    spec = build_spec(cfg)
    schedule = build_schedule(cfg)
    result = train_persona(cfg, persona, spec, schedule)
    path = _checkpoint_path(out, persona)
    nn.save_checkpoint(result.model, path)
    with open(out / f"loss_{persona}.csv", "w", newline="") as f:
        f.write(f"# config_hash: {chash}\n")
        f.write("epoch,loss\n")
        for i, loss in enumerate(result.losses):
            f.write(f"{i},{format(loss, '.17g')}\n")
    print(f"wrote {path} (final loss {result.losses[-1] if len(result.losses) else float('nan'):.6f})")
    return EXIT_OK


def cmd_sensitivity(cfg: dict, chash: str, out: Path, metric: str, path_kind: str, stabilizer: str | None) -> int:
    spec = build_spec(cfg)
    schedule = build_schedule(cfg)
    dn = AnalyticDenoiser(spec, schedule)
    handle = _load_classifier(cfg, out, spec)
    _, val_ds = _datasets(cfg, spec)
    n = min(cfg["sensitivity"]["n"], len(val_ds))
    stab_cfg = build_stabilizer(json.loads(stabilizer)) if stabilizer else None
    curve_obj = sens.curve(
        handle,
        dn,
        val_ds.points[:n],
        val_ds.labels[:n],
        metric,
        path=path_kind,
        stabilizer=stab_cfg,
        seed=_seed(cfg, "sensitivity-eps"),
    )
    stab_tag = (
        "_" + stab_cfg.label.translate(str.maketrans({"(": "-", ")": "", ",": "-"}))
        if stab_cfg
        else ""
    )
    stem = f"sensitivity_{metric}_{path_kind}{stab_tag}"
    sens.save_curve_csv(curve_obj, out / f"{stem}.csv", chash)
    _svg_line_plot(
        [(f"{metric} ({path_kind})", curve_obj.t, curve_obj.mean)],
        f"{metric} over t [{chash}]",
        out / f"{stem}.svg",
    )
    print(f"wrote {out / (stem + '.csv')}")
    if curve_obj.degenerate:
        print("warning: curve is degenerate (all pairs undefined)")
    return EXIT_OK


def cmd_sample(cfg: dict, chash: str, out: Path) -> int:
    spec = build_spec(cfg)
    schedule = build_schedule(cfg)
    dn = AnalyticDenoiser(spec, schedule)
    handle = _load_classifier(cfg, out, spec)
    gcfg = build_guidance_config(cfg, handle)
    n = cfg["sample"]["n"]
    batch = gd.sample_batch(dn, schedule, gcfg, n, _seed(cfg, "sample-chains"))
    with open(out / "samples.csv", "w", newline="") as f:
        f.write(",".join([f"x{i}" for i in range(spec.dim)] + ["diverged", "seed", "config_hash"]) + "\n")
        for row, div in zip(batch.samples, batch.diverged):
            coords = ",".join(format(v, ".17g") for v in row)
            f.write(f"{coords},{int(div)},{cfg['seed']},{chash}\n")
    kept = batch.kept()
    if len(kept) == 0:
        print("error: every chain diverged; no metrics to report", file=sys.stderr)
        return EXIT_ALL_DIVERGED
    report = mtr.evaluate(
        kept,
        spec,
        gcfg.target_class,
        handle,
        seed=_seed(cfg, "sample-eval"),
        n_diverged=batch.n_diverged,
        config_hash=chash,
    )
    (out / "metrics.json").write_text(report.to_json())
    print(f"wrote {out / 'samples.csv'} and {out / 'metrics.json'}")
    print(report.to_json())
    return EXIT_OK


def cmd_sweep(cfg: dict, chash: str, out: Path) -> int:
    spec = build_spec(cfg)
    schedule = build_schedule(cfg)
    dn = AnalyticDenoiser(spec, schedule)
    handle = _load_classifier(cfg, out, spec)
    gcfg = build_guidance_config(cfg, handle)
    rows = mtr.sweep(
        dn,
        schedule,
        gcfg,
        cfg["sweep"]["scales"],
        cfg["sweep"]["n_per_scale"],
        _seed(cfg, "sweep-chains"),
        config_hash=chash,
    )
    stab_tag = gcfg.stabilizer.label.translate(str.maketrans({"(": "-", ")": "", ",": "-"}))
    label = f"{cfg['guidance']['classifier']}_{gcfg.path}_{stab_tag}"
    csv_path = out / f"sweep_{label}.csv"
    mtr.save_sweep_csv(rows, csv_path, chash)
    scales = np.array([s for s, _ in rows])
    for field, fname in [
        ("target_accuracy_oracle", "accuracy"),
        ("fd", "fd"),
        ("cfd", "cfd"),
    ]:
        vals = np.array([getattr(r, field) for _, r in rows])
        _svg_line_plot(
            [(field, scales, vals)], f"{field} vs scale [{chash}]", out / f"sweep_{label}_{fname}.svg"
        )
    print(f"wrote {csv_path}")
    if all(r.n_samples == 0 for _, r in rows):
        print("error: every chain diverged at every scale", file=sys.stderr)
        return EXIT_ALL_DIVERGED
    return EXIT_OK


def cmd_report(out: Path, fmt: str) -> int:
    """Consolidate sweep CSVs under the output directory and flag the best
    setup: minimum cfd among rows with oracle accuracy >= 0.95."""
    rows = []
    for path in sorted(out.glob("sweep_*.csv")):
        with open(path) as f:
            lines = [ln for ln in f.read().splitlines() if not ln.startswith("#")]
        header = lines[0].split(",")
        for ln in lines[1:]:
            vals = dict(zip(header, ln.split(",")))
            rows.append(
                {
                    "setup": path.stem.removeprefix("sweep_"),
                    "s": float(vals["s"]),
                    "acc_oracle": float(vals["acc_oracle"]),
                    "acc_guiding": float(vals["acc_guiding"]),
                    "fd": float(vals["fd"]),
                    "cfd": float(vals["cfd"]),
                    "n": int(vals["n"]),
                    "n_diverged": int(vals["n_diverged"]),
                }
            )
    if not rows:
        print("error: no sweep outputs found", file=sys.stderr)
        return EXIT_CONFIG
    eligible = [r for r in rows if np.isfinite(r["cfd"]) and r["acc_oracle"] >= 0.95]
    best = min(eligible, key=lambda r: r["cfd"]) if eligible else None
    summary = {"n_rows": len(rows), "best": best, "rows": rows}
    if fmt == "json":
        (out / "report.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
        print(f"wrote {out / 'report.json'}")
    else:
        with open(out / "report.csv", "w", newline="") as f:
            f.write("setup,s,acc_oracle,acc_guiding,fd,cfd,n,n_diverged,best\n")
            for r in rows:
                is_best = best is not None and r is best
                f.write(
                    f"{r['setup']},{format(r['s'], '.17g')},{format(r['acc_oracle'], '.17g')},"
                    f"{format(r['acc_guiding'], '.17g')},{format(r['fd'], '.17g')},"
                    f"{format(r['cfd'], '.17g')},{r['n']},{r['n_diverged']},{int(is_best)}\n"
                )
        print(f"wrote {out / 'report.csv'}")
    if best:
        print(f"best setup: {best['setup']} at s={best['s']} (cfd={best['cfd']:.4f}, acc={best['acc_oracle']:.4f})")
    else:
        print("no setup reached oracle accuracy >= 0.95")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="diffguide", description=__doc__)
    parser.add_argument("--config", default=None, help="experiment config JSON (defaults built in)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker cap; the current implementation is single-threaded and "
        "bitwise reproducible at any value",
    )
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="report output format")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="write train/val datasets as CSV")
    p_train = sub.add_parser("train", help="train one classifier persona")
    p_train.add_argument("--persona", choices=["non_robust", "robust"], required=True)
    p_sens = sub.add_parser("sensitivity", help="sensitivity curve CSV + SVG")
    p_sens.add_argument("--metric", choices=["logit", "gradient", "stabilized_gradient"], default="gradient")
    p_sens.add_argument("--path", choices=["raw", "x0pred"], default="raw")
    p_sens.add_argument("--stabilizer", default=None, help='JSON, e.g. {"kind":"ema","beta":0.99}')
    sub.add_parser("sample", help="guided sample batch + metrics")
    sub.add_parser("sweep", help="guidance scale sweep + plots")
    sub.add_parser("report", help="consolidate sweeps, flag the best setup")

    args = parser.parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "report":
            return cmd_report(out, args.format)
        cfg, chash = load_config(args.config, args.seed)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, chash, out)
        if args.command == "train":
            return cmd_train(cfg, chash, out, args.persona)
        if args.command == "sensitivity":
            return cmd_sensitivity(cfg, chash, out, args.metric, args.path, args.stabilizer)
        if args.command == "sample":
            return cmd_sample(cfg, chash, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, chash, out)
    except (ConfigError, ValueError) as e:
        # every ValueError raised below main is an input-validation failure
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
