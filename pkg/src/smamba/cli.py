"""``smamba`` command-line entry point.

Exit codes: 0 success, 2 usage/config/data error, 3 non-finite loss,
4 verification failure.

File layouts
------------
gen-data
    ``<out>/<id>.ppm`` (P6 image), ``<out>/<id>.pgm`` (P5 mask, 0/255) and
    ``<out>/manifest.tsv`` with columns ``id split seed``.
train
    ``<out>`` checkpoint (see :mod:`smamba.checkpoint`) and a loss curve TSV
    (``--loss-tsv``, default ``<out>.loss.tsv``) with columns
    ``stage epoch step loss``.
eval
    ``<report>``: a header row ``dataset mDice mIoU Fbw Salpha Ephimax MAE``
    followed by the dataset row (values x100, one decimal), a blank line,
    a ``# per-image`` comment and one raw (unscaled) row per image.
heatmap
    ``<out-dir>/prior_md.pgm`` (channel mean of the prior map),
    ``<out-dir>/encoder_embedding.pgm`` (per-token L2 norm of the encoder
    embeddings) and ``<out-dir>/decoder_prelogit.pgm`` (per-pixel L2 norm of
    the decoder's upscaled features), each resized to the input size and
    min-max scaled to 0..255. A constant map is written as all zeros.

Every file is written to a temporary name and renamed into place.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, model_from_checkpoint, save_checkpoint
from .config import ABLATIONS, ConfigError, RunConfig, apply_ablation, load_run_config
from .data import DatasetError, gen_synthetic, load_dir, save_dataset
from .decoder import decode_features, encode_mask_prompt
from .functional import bilinear_matrix
from .metrics import EmptyDatasetError, evaluate_dataset
from .model import encoder_forward, normalize_image
from .pnm import PnmError, atomic_write_bytes, load_pgm, load_ppm, save_pgm, to_uint8
from .ssm import scan_chunked, scan_sequential
from .tensor import no_grad, precision
from .train import NonFiniteLossError, Trainer, build_model, predict
from .verify import GRADCHECK_TOL, MODULES, run_gradcheck

log = logging.getLogger("smamba")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
HEATMAP_FILES = ("prior_md.pgm", "encoder_embedding.pgm", "decoder_prelogit.pgm")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


class VerificationError(Exception):
    """A numerical self-check failed; maps to exit code 4."""


# --- gen-data ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = load_run_config(args.spec).data
    pairs = gen_synthetic(spec, args.seed)
    save_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------------------

_STAGES = {"1": (1,), "2": (2,), "both": (1, 2)}


def _write_loss_tsv(path: Path, trainer: Trainer) -> None:
    atomic_write_bytes(path, trainer.loss_tsv().encode("utf-8"))


def cmd_train(args) -> int:
    data = load_dir(args.data)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        run = ckpt.config
        with precision(run.train.precision):
            model = model_from_checkpoint(ckpt)
        trainer = Trainer(model, data, run.train)
        trainer.load_state_dict(ckpt.trainer, ckpt.adam)
    else:
        run = load_run_config(args.config)
        model_cfg = apply_ablation(run.model, args.ablation) if args.ablation else run.model
        train_cfg = run.train if args.seed is None else dataclasses.replace(run.train, seed=args.seed)
        run = RunConfig(model_cfg, train_cfg, run.data)
        model = build_model(model_cfg, train_cfg)
        if args.init:
            init = load_checkpoint(args.init)
            if init.config.model != model_cfg:
                raise UsageError(f"--init checkpoint {args.init} was trained with a different model config")
            model.load_state_dict(init.params)
        trainer = Trainer(model, data, train_cfg, stages=_STAGES[args.stage])

    def report(t: Trainer) -> None:
        last = t.history[-1]
        log.info("stage %d epoch %d done, last loss %.5f", last.stage, last.epoch, last.loss)

    out = Path(args.out)
    loss_path = Path(args.loss_tsv) if args.loss_tsv else out.with_name(out.name + ".loss.tsv")
    start = time.perf_counter()
    try:
        trainer.run(max_steps=args.max_steps, on_epoch=report)
    finally:
        _write_loss_tsv(loss_path, trainer)
    state = trainer.state_dict()
    ckpt = Checkpoint(run, model.state_dict(), trainer.adam, state, (trainer.stage_idx, trainer.epoch, trainer.step))
    save_checkpoint(out, ckpt)
    status = "finished" if trainer.done else "paused"
    print(f"{status} after {len(trainer.history)} steps in {time.perf_counter() - start:.1f}s; checkpoint {out}")
    return EXIT_OK


# --- eval / infer / heatmap -------------------------------------------------------------


def _load_model(path):
    ckpt = load_checkpoint(path)
    with precision(ckpt.config.train.precision):
        return model_from_checkpoint(ckpt)


def _check_patch(image: np.ndarray, patch: int, name) -> None:
    h, w = image.shape[:2]
    if h % patch or w % patch:
        raise UsageError(f"{name}: size {w}x{h} is not divisible by patch {patch}")


def cmd_eval(args) -> int:
    gts = load_dir(args.data)
    if args.pred_dir:
        pred_dir = Path(args.pred_dir)
        missing = [g.id for g in gts if not (pred_dir / f"{g.id}.pgm").exists()]
        if missing:
            raise DatasetError(f"{pred_dir}: no prediction for ids: {', '.join(missing)}")
        preds = [load_pgm(pred_dir / f"{g.id}.pgm").astype(np.float64) / 255.0 for g in gts]
        for g, p in zip(gts, preds):
            if p.shape != g.mask.shape:
                raise DatasetError(f"{g.id}: prediction {p.shape} does not match mask {g.mask.shape}")
    else:
        model = _load_model(args.ckpt)
        preds = []
        for g in gts:
            _check_patch(g.image, model.cfg.patch, g.id)
            preds.append(predict(model, g.image[None], args.which)[0])
    report = evaluate_dataset([(g.id, p, g.mask) for g, p in zip(gts, preds)], Path(args.data).name, args.threshold)
    atomic_write_bytes(Path(args.report), report.to_tsv().encode("utf-8"))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    image = load_ppm(args.image)
    _check_patch(image, model.cfg.patch, args.image)
    save_pgm(args.out, to_uint8(predict(model, image[None], "decoder")[0]))
    if args.also_pseudo:
        save_pgm(args.also_pseudo, to_uint8(predict(model, image[None], "pseudo")[0]))
    print(f"wrote {args.out}")
    return EXIT_OK


def minmax_to_uint8(x: np.ndarray) -> np.ndarray:
    """Scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(x.min()), float(x.max())
    if not hi > lo:
        return np.zeros(x.shape, np.uint8)
    return to_uint8((x - lo) / (hi - lo))


def _resize_map(x: np.ndarray, h: int, w: int) -> np.ndarray:
    if x.shape == (h, w):
        return x
    return bilinear_matrix(x.shape[0], h) @ x @ bilinear_matrix(x.shape[1], w).T


def feature_maps(model, image: np.ndarray) -> dict[str, np.ndarray]:
    """The three heatmap sources for one ``(H, W, 3)`` image, each ``(H, W)``."""
    h, w = image.shape[:2]
    with no_grad():
        x = normalize_image(image[None].astype(model.head.weight.dtype))
        enc = encoder_forward(x, model)
        prior = np.zeros((h, w)) if enc.prior_map is None else enc.prior_map.data[0].mean(axis=-1)
        prompt = encode_mask_prompt(enc.pseudo_mask_logits, model.decoder.prompt, (h, w))
        up, _ = decode_features(enc.embeddings, prompt, model.decoder)
    emb = np.linalg.norm(enc.embeddings.data[0].astype(np.float64), axis=-1)
    pre = np.linalg.norm(up.data[0].astype(np.float64), axis=-1)
    maps = (prior.astype(np.float64), emb, pre)
    return {name: _resize_map(m, h, w) for name, m in zip(HEATMAP_FILES, maps)}


def cmd_heatmap(args) -> int:
    model = _load_model(args.ckpt)
    image = load_ppm(args.image)
    _check_patch(image, model.cfg.patch, args.image)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in feature_maps(model, image).items():
        save_pgm(out / name, minmax_to_uint8(m))
        print(out / name)
    return EXIT_OK


# --- verification -----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    modules = MODULES if args.module == "all" else (args.module,)
    results = run_gradcheck(modules, seed=args.seed)
    print("module\tmax_rel_error\tseconds\tstatus")
    for r in results:
        print(f"{r.module}\t{r.max_rel_error:.3e}\t{r.seconds:.2f}\t{'ok' if r.ok else 'FAIL'}")
    failed = [r.module for r in results if not r.ok]
    if failed:
        raise VerificationError(f"gradient check above {GRADCHECK_TOL:g} in: {', '.join(failed)}")
    return EXIT_OK


def _scan_inputs(rng: np.random.Generator, batch: int, L: int, E: int, N: int):
    u = rng.normal(size=(batch, L, E))
    delta = rng.uniform(0.001, 0.1, size=(batch, L, E))
    A = -np.exp(rng.normal(size=(E, N)))
    B = rng.normal(size=(batch, L, N))
    C = rng.normal(size=(batch, L, N))
    D = rng.normal(size=E)
    return u, delta, A, B, C, D


def _tokens_per_sec(fn, tokens: int, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return tokens / max(best, 1e-12)


def cmd_scan_bench(args) -> int:
    if args.L < 1 or args.E < 1 or args.N < 1:
        raise UsageError("L, E and N must be positive")
    chunks = [args.chunk] if args.chunk else sorted({c for c in (1, 2, 3, 7, args.L) if c <= args.L})
    if any(c < 1 for c in chunks):
        raise UsageError("chunk must be >= 1")
    inputs = _scan_inputs(np.random.default_rng(args.seed), args.batch, args.L, args.E, args.N)
    ref, _ = scan_sequential(*inputs)
    for c in chunks:
        out, _ = scan_chunked(*inputs, chunk=c)
        if c == args.L:
            if not np.array_equal(out, ref):
                raise VerificationError(f"chunk={c} (one chunk) differs bitwise from the sequential scan")
        else:
            err = float(np.max(np.abs(out - ref)))
            if err > 1e-10:
                raise VerificationError(f"chunk={c} differs from the sequential scan by {err:.3e}")
    tokens = args.batch * args.L
    print("mode\tchunk\tL\tE\tN\ttokens_per_sec")
    rate = _tokens_per_sec(lambda: scan_sequential(*inputs), tokens, args.repeat)
    print(f"sequential\t-\t{args.L}\t{args.E}\t{args.N}\t{rate:.0f}")
    for c in chunks:
        rate = _tokens_per_sec(lambda: scan_chunked(*inputs, chunk=c), tokens, args.repeat)
        print(f"chunked\t{c}\t{args.L}\t{args.E}\t{args.N}\t{rate:.0f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import ABLATION_ROWS, median, two_stage_run

    seeds = [int(s) for s in args.seeds.split(",")]
    rows = ["ablation\tseed\tmdice_stage1\tmdice_stage2\tmdice_unseen\tseconds"]
    for name in args.rows.split(",") if args.rows else ABLATION_ROWS:
        results = [two_stage_run(name, seed) for seed in seeds]
        for r in results:
            rows.append(f"{name}\t{r.seed}\t{r.mdice_stage1:.6f}\t{r.mdice_stage2:.6f}\t{r.mdice_unseen:.6f}\t{r.seconds:.1f}")
        print(f"{name}: median mDice {median([r.mdice_stage2 for r in results]):.4f}")
    atomic_write_bytes(Path(args.out), ("\n".join(rows) + "\n").encode("utf-8"))
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smamba", description="Prior-guided adapter segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", required=True, help="run config; its [data] section is used")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_u64, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", help="run config file (required unless --resume)")
    p.add_argument("--data", required=True, help="directory of <id>.ppm/<id>.pgm pairs")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--stage", choices=sorted(_STAGES), default="both")
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--seed", type=_u64, help="overrides [train] seed")
    p.add_argument("--init", help="start from the weights of this checkpoint")
    p.add_argument("--resume", help="continue an interrupted run from its checkpoint")
    p.add_argument("--max-steps", type=int, help="stop after this many steps (resumable)")
    p.add_argument("--loss-tsv", help="loss curve path (default <out>.loss.tsv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions with the six metrics")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred-dir", help="directory of <id>.pgm probability maps instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--which", choices=("decoder", "pseudo"), default="decoder")
    p.add_argument("--threshold", default="sweep", help="'sweep' (256 thresholds) or 'fixed:<t>'")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one mask")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--also-pseudo", help="also write the encoder's pseudo mask here")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("heatmap", help="export feature-magnitude maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks on the tiny config")
    p.add_argument("--module", choices=("all",) + MODULES, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scan-bench", help="sequential vs chunked selective scan throughput")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--E", type=int, required=True)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--chunk", type=int)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_scan_bench)

    p = sub.add_parser("ablate", help="desk-scale ablation table over several seeds")
    p.add_argument("--out", required=True, help="TSV of per-run results")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--rows", help="comma-separated ablation names (default: all rows)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) and usage errors (2)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and not (args.config or args.resume):
        print("smamba train: error: --config or --resume is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"smamba: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"smamba: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (UsageError, ConfigError, DatasetError, EmptyDatasetError, PnmError, CheckpointError, OSError) as exc:
        print(f"smamba: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
