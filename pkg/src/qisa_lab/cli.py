"""Command-line entry point: train, eval, generate, params, cache, bench.

Heavy imports happen inside the handlers so that QISA_LAB_THREADS can
cap the BLAS thread pools before numpy is loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("QISA_LAB_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, cap)


_apply_thread_cap()

DEFAULT_TRAIN = {"epochs": 1, "batch": 256, "lr": 3e-3, "betas": [0.9, 0.999],
                 "eps": 1e-8, "grad_clip": 1.0, "eval_every": 50, "seed": 0}
FULL_TRAIN = {"epochs": 2, "batch": 1024, "lr": 3e-3, "betas": [0.9, 0.999],
              "eps": 1e-8, "grad_clip": 1.0, "eval_every": 200, "seed": 0}

_PRESET_SHAPES = {
    "emb4-h1": {"m": 4, "H": 1},
    "emb16-h1": {"m": 16, "H": 1},
    "emb16-h4": {"m": 16, "H": 4},
}


def preset_config(name: str) -> dict:
    """Desk-scale preset: <shape>-<variant>, e.g. emb16-h1-qisa."""
    from .errors import ConfigError

    for shape, model_part in _PRESET_SHAPES.items():
        if name.startswith(shape + "-"):
            variant = name[len(shape) + 1:]
            model = {"variant": variant, "n_layers": 6, "l": 16, "p": 1, "seed": 0,
                     "dropout": 0.0, "v2_kernel": "dot", **model_part}
            return {"model": model, "train": dict(DEFAULT_TRAIN), "data": {"corpus": "bundled"}}
    raise ConfigError(
        f"unknown preset {name!r}; presets look like emb4-h1-qisa, emb16-h1-csa, emb16-h4-qsann_v2")


def load_config(args) -> dict:
    from .errors import ConfigError

    if getattr(args, "preset", None):
        cfg = preset_config(args.preset)
    elif getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    else:
        raise ConfigError("pass --config FILE or --preset NAME")
    cfg.setdefault("train", dict(DEFAULT_TRAIN))
    cfg.setdefault("data", {"corpus": "bundled"})
    if getattr(args, "full", False):
        cfg["train"].update(FULL_TRAIN)
        if not getattr(args, "corpus", None) and cfg["data"].get("corpus") == "bundled":
            raise ConfigError(
                "the full reproduction needs a real corpus; pass --corpus FILE "
                "(see `qisa-lab fetch-corpus-info`)")
    if getattr(args, "corpus", None):
        cfg["data"]["corpus"] = args.corpus
    if getattr(args, "seed", None) is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if "model" not in cfg:
        raise ConfigError("config is missing the 'model' section")
    return cfg


def _resolve_corpus(data_cfg: dict) -> Path:
    from .data import BUNDLED_CORPUS

    corpus = data_cfg.get("corpus", "bundled")
    return BUNDLED_CORPUS if corpus == "bundled" else Path(corpus)


def _load_split(cfg: dict):
    from .data import build_vocab, load_corpus, split_dataset

    text = load_corpus(_resolve_corpus(cfg["data"]))
    fraction = cfg["data"].get("corpus_fraction", 1.0)
    if fraction < 1.0:
        text = text[: int(len(text) * fraction)]
    vocab = build_vocab(text)
    split = split_dataset(vocab.encode(text), cfg["data"].get("split_fraction", 0.2))
    return text, vocab, split


def _build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    from . import __version__

    return f"qisa-lab-{__version__}"


def write_manifest(path: Path, config: dict, seed: int, outputs: dict, timings: dict) -> None:
    manifest = {"config": config, "git_or_build_id": _build_id(), "seed": seed,
                "outputs": {k: str(v) for k, v in outputs.items()}, "timings": timings}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def write_rows_csv(rows, path: Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "split", "metric", "value"])
        for row in rows:
            writer.writerow(row)


def write_loss_svg(rows, path: Path, width=720, height=400) -> None:
    """Self-contained SVG line chart of the loss curves by split."""
    series: dict[str, list[tuple[int, float]]] = {}
    for step, split, metric, value in rows:
        if metric == "ce":
            series.setdefault(split, []).append((int(step), float(value)))
    if not series:
        return
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys)
    if y1 - y0 < 1e-9:
        y1 = y0 + 1.0
    pad = 45

    def sx(x):
        return pad + (x - x0) / max(x1 - x0, 1) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    colors = {"train": "#1f77b4", "test": "#d62728"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for split, pts in series.items():
        path_d = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path_d}" fill="none" '
                     f'stroke="{colors.get(split, "#2ca02c")}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad - 80}" y="{pad + 16 * len(parts) % 60}" '
                     f'fill="{colors.get(split, "#2ca02c")}" font-size="12">{split}</text>')
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        parts.append(f'<text x="4" y="{sy(yv):.0f}" font-size="11">{yv:.2f}</text>')
        xv = x0 + frac * (x1 - x0)
        parts.append(f'<text x="{sx(xv):.0f}" y="{height - 8}" font-size="11">{int(xv)}</text>')
    parts.append('<text x="8" y="16" font-size="12">cross-entropy vs step</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .model import LanguageModel, ModelConfig
    from .training import TrainConfig, evaluate_ce, train

    cfg = load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    text, vocab, split = _load_split(cfg)
    timings["data_s"] = time.perf_counter() - t0

    model_cfg = dict(cfg["model"])
    model_cfg["vocab_size"] = vocab.size
    model = LanguageModel(ModelConfig.from_dict(model_cfg))
    train_cfg = TrainConfig.from_dict(cfg["train"])
    print(f"training variant={model.config.variant} m={model.config.m} H={model.config.H} "
          f"layers={model.config.n_layers} params={model.total_param_count()}")

    t0 = time.perf_counter()
    model, rows = train(model, split, train_cfg, checkpoint_path=out_dir / "checkpoint",
                        vocab=vocab, checkpoint_extra={"data": cfg["data"]})
    timings["train_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ce, std = evaluate_ce(model, split.test_ids)
    timings["eval_s"] = time.perf_counter() - t0
    rows.append((rows[-1][0] if rows else 0, "test", "ce_final", ce))

    outputs = {"checkpoint_json": out_dir / "checkpoint.json",
               "checkpoint_bin": out_dir / "checkpoint.bin",
               "loss_csv": out_dir / "loss.csv",
               "loss_svg": out_dir / "loss.svg",
               "manifest": out_dir / "manifest.json"}
    write_rows_csv(rows, outputs["loss_csv"])
    write_loss_svg(rows, outputs["loss_svg"])
    cfg_snapshot = {**cfg, "model": {**cfg["model"], "vocab_size": vocab.size}}
    write_manifest(outputs["manifest"], cfg_snapshot, train_cfg.seed, outputs, timings)
    print(f"final test ce {ce:.4f} +- {std:.4f}; outputs in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .model import LanguageModel
    from .training import evaluate_cer_wer
    from .data import Vocab
    from .errors import ConfigError
    from .qsim import load_cache

    model, vocab_chars = LanguageModel.load(args.checkpoint)
    if vocab_chars is None:
        raise ConfigError("checkpoint has no vocabulary; evaluation needs one")
    vocab = Vocab(tuple(vocab_chars))

    with open(str(args.checkpoint) + ".json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    data_cfg = manifest.get("extra", {}).get("data", {"corpus": args.corpus or "bundled"})
    if args.corpus:
        data_cfg["corpus"] = args.corpus
    from .data import load_corpus, split_dataset

    text = load_corpus(_resolve_corpus(data_cfg))
    fraction = data_cfg.get("corpus_fraction", 1.0)
    if fraction < 1.0:
        text = text[: int(len(text) * fraction)]
    split = split_dataset(vocab.encode(text), data_cfg.get("split_fraction", 0.2))

    cache = None
    if args.cache:
        cache = load_cache(args.cache)

    t0 = time.perf_counter()
    ce = evaluate_ce_with_cache(model, split.test_ids, cache)
    cer_stats, wer_stats = evaluate_cer_wer(model, split.test_ids, vocab,
                                            n_windows=args.windows, gen_chars=args.gen_chars)
    wall = time.perf_counter() - t0

    from .training import MetricsReport

    report = MetricsReport(ce=ce, cer=cer_stats, wer=wer_stats, steps=0, wall_time=wall)
    print(f"CE  {ce[0]:.4f} +- {ce[1]:.4f}")
    print(f"CER {cer_stats[0]:.4f} +- {cer_stats[1]:.4f}")
    print(f"WER {wer_stats[0]:.4f} +- {wer_stats[1]:.4f}")
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    print(f"wrote {out}")
    return 0


def evaluate_ce_with_cache(model, test_ids, cache):
    from .training import evaluate_ce

    if cache is None:
        return evaluate_ce(model, test_ids)
    # the cached path runs through the same evaluation windows
    import numpy as np

    from .tensor import Tensor, cross_entropy, no_grad

    l = model.config.l
    span = l + 1
    starts = [i * span for i in range(len(test_ids) // span)]
    losses = []
    with no_grad():
        for lo in range(0, len(starts), 64):
            chunk = starts[lo : lo + 64]
            inputs = np.stack([test_ids[s : s + l] for s in chunk])
            targets = np.stack([test_ids[s + 1 : s + l + 1] for s in chunk])
            logits = model.forward(inputs, cache=cache)
            for i in range(len(chunk)):
                losses.append(cross_entropy(Tensor(logits.data[i]), targets[i]).item())
    losses = np.asarray(losses)
    return float(losses.mean()), float(losses.std())


def cmd_generate(args) -> int:
    from .data import Vocab
    from .errors import ConfigError
    from .model import LanguageModel
    from .training import generate

    model, vocab_chars = LanguageModel.load(args.checkpoint)
    if vocab_chars is None:
        raise ConfigError("checkpoint has no vocabulary; generation needs one")
    vocab = Vocab(tuple(vocab_chars))
    prompt = vocab.encode(args.prompt)[-model.config.l :]
    ids = generate(model, prompt, args.n_chars, mode=args.mode,
                   temperature=args.temperature, seed=args.seed or 0)
    print(args.prompt + vocab.decode(ids))
    return 0


def cmd_params(args) -> int:
    from .attention import VARIANTS, AttentionSpec, count_params, output_projection_params

    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            model_cfg = json.load(fh)["model"]
        m, H, p, l = model_cfg["m"], model_cfg["H"], model_cfg.get("p", 1), model_cfg.get("l", 16)
    else:
        m, H, p, l = args.m, args.heads, args.p, args.l
    print(f"per-head and total attention parameter counts at m={m}, H={H}, p={p}, l={l}")
    print(f"{'variant':<10} {'per head':>10} {'+output':>10} {'total':>10}")
    import warnings

    for variant in VARIANTS:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            spec = AttentionSpec(variant, m=m, H=H, l=l, p=p)
        per_head = count_params(spec)
        wo = output_projection_params(spec)
        print(f"{variant:<10} {per_head:>10} {wo:>10} {per_head * H + wo:>10}")
    return 0


def cmd_cache(args) -> int:
    from .model import LanguageModel
    from .qsim import save_cache

    model, _ = LanguageModel.load(args.checkpoint)
    cache = model.build_observable_cache()
    out = Path(args.out) if args.out else Path(str(args.checkpoint) + ".cache")
    save_cache(cache, out)
    n_mats = sum(e.value.shape[0] * e.value.shape[1] +
                 (e.query.shape[0] * e.query.shape[1] if e.query is not None else 0) +
                 (e.key.shape[0] * e.key.shape[1] if e.key is not None else 0)
                 for e in cache.evolved.values())
    print(f"cached {n_mats} evolved observables ({cache.kind}) to {out}")
    return 0


def cmd_bench(args) -> int:
    import csv

    import numpy as np

    from .model import LanguageModel, ModelConfig
    from .tensor import no_grad
    from .training import Adam, _batch_ce, clip_gradients

    variants = [v.strip() for v in args.variants.split(",")]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    rng = np.random.default_rng(0)
    vocab_size = 59
    for variant in variants:
        model = LanguageModel(ModelConfig(vocab_size=vocab_size, m=args.m, H=args.heads,
                                          n_layers=args.layers, l=16, variant=variant,
                                          p=args.p, seed=0))
        ids = rng.integers(0, vocab_size, size=(args.batch, 16))
        targets = rng.integers(0, vocab_size, size=(args.batch, 16))

        def train_step():
            model.zero_grad()
            loss = _batch_ce(model, ids, targets, training=True)
            loss.backward()
            clip_gradients(model.parameters(), 1.0)
            opt.step()

        opt = Adam(model.named_parameters())
        rows += _timed(variant, "train", train_step, args.warmup, args.steps)

        def infer_step():
            with no_grad():
                model.forward(ids)

        rows += _timed(variant, "infer", infer_step, args.warmup, args.steps)

        if variant != "csa":
            cache = model.build_observable_cache()

            def cached_step():
                with no_grad():
                    model.forward(ids, cache=cache)

            rows += _timed(variant, "infer_cached", cached_step, args.warmup, args.steps)

    csv_path = out_dir / "bench.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "phase", "stat", "value"])
        writer.writerows(rows)
    flags = {k: v for k, v in vars(args).items() if k not in ("fn", "command")}
    write_manifest(out_dir / "manifest.json", {"bench": flags}, 0, {"bench_csv": csv_path}, {})
    for variant, phase, stat, value in rows:
        if stat == "median_s":
            print(f"{variant:<10} {phase:<14} {value * 1e3:8.2f} ms/step")
    print(f"wrote {csv_path}")
    return 0


def _timed(variant, phase, fn, warmup, steps):
    import numpy as np

    for _ in range(warmup):
        fn()
    times = []
    for _ in range(steps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return [(variant, phase, "median_s", float(np.median(times))),
            (variant, phase, "mean_s", float(np.mean(times)))]


def cmd_fetch_corpus_info(args) -> int:
    from .data import BUNDLED_CORPUS, CORPUS_URL

    print("This tool never downloads data itself.")
    print(f"Public-domain corpus URL: {CORPUS_URL}")
    print("Download it with e.g.:")
    print(f"  curl -o shakespeare.txt {CORPUS_URL}")
    print(f"A small bundled sample ships at: {BUNDLED_CORPUS}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qisa-lab",
                                     description="character-level language modeling with swappable "
                                                 "classical / quantum-inspired / simulated-quantum attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + loss curves")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", help="named preset, e.g. emb16-h1-qisa")
    p.add_argument("--corpus", help="corpus path (overrides config)")
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--seed", type=int)
    p.add_argument("--full", action="store_true",
                   help="reproduction settings: 2 epochs, batch 1024 (needs --corpus)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="report CE/CER/WER for a checkpoint")
    p.add_argument("--checkpoint", required=True, help="path prefix written by train")
    p.add_argument("--corpus")
    p.add_argument("--cache", help="evolved-observable cache file for fast inference")
    p.add_argument("--windows", type=int, default=100)
    p.add_argument("--gen-chars", type=int, default=64)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="continue a prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n-chars", type=int, default=200)
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("params", help="parameter-count table for all variants")
    p.add_argument("--config")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--l", type=int, default=16)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("cache", help="build the evolved-observable cache from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_cache)

    p = sub.add_parser("bench", help="timing comparison across variants")
    p.add_argument("--variants", default="csa,qisa")
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--out-dir", default="runs/bench")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("fetch-corpus-info", help="print where to get a public-domain corpus")
    p.set_defaults(fn=cmd_fetch_corpus_info)
    return parser


def main(argv=None) -> int:
    from .errors import QisaLabError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except QisaLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
