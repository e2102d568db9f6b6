"""Command-line surface: train, generate, edit, bench, demo, export.

One command is one process. Config is a flat JSON object with dotted keys
("model.hidden": 256) merged with key=value overrides from the command line;
the fully resolved dict is copied into the output directory before any work
starts. Exit codes: 0 success, 1 assertion or runtime failure, 2 bad usage
or config.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import model as md
from . import numcore as nc
from .attention import causal_mask, cross_full_mask
from .checkpoint import (load_checkpoint, restore_rng, rng_state,
                         save_checkpoint)
from .decoding import (DecodeConfig, TokenGrid, cache_scalar_count, expand,
                       generate, inpaint)
from .training import (OptimState, ToyDatasetSpec, TrainConfig, make_dataset,
                       masked_baseline_grad_demo, train_loop, train_step)


class ConfigError(Exception):
    """Bad config file, unknown key, or inconsistent settings (exit code 2)."""


# ---------------------------------------------------------------- config

_MISSING = object()


def parse_override(token: str) -> tuple[str, object]:
    """"key=value" or "--key=value" -> (key, json-decoded or raw value)."""
    text = token[2:] if token.startswith("--") else token
    if "=" not in text:
        raise ConfigError("override %r is not key=value" % token)
    key, raw = text.split("=", 1)
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Flat dotted-key dict from an optional JSON file plus overrides."""
    cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError("config file not found: %s" % path)
        loaded = json.loads(p.read_text())
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object: %s" % path)
        cfg.update(loaded)
    for token in overrides:
        key, value = parse_override(token)
        cfg[key] = value
    return cfg


def build(cls, cfg: dict, prefix: str, used: set[str]):
    """Instantiate dataclass cls from cfg keys named "prefix.field"."""
    kwargs = {}
    for f in fields(cls):
        key = "%s.%s" % (prefix, f.name)
        if key in cfg:
            kwargs[f.name] = cfg[key]
            used.add(key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError("bad %s settings: %s" % (prefix, e)) from e


def take(cfg: dict, key: str, used: set[str], default=_MISSING):
    if key in cfg:
        used.add(key)
        return cfg[key]
    if default is _MISSING:
        raise ConfigError("missing required config key: %s" % key)
    return default


def check_used(cfg: dict, used: set[str]) -> None:
    unknown = sorted(set(cfg) - used)
    if unknown:
        raise ConfigError("unknown config keys: %s" % ", ".join(unknown))


def _out_dir(cfg: dict, used: set[str]) -> Path:
    out = Path(take(cfg, "out_dir", used))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, cfg: dict) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True)
    (out / "config.json").write_text(text + "\n")


# ---------------------------------------------------------------- images

# Token id -> RGB. Background, then one warm-to-light ramp per class palette,
# then spare grays; ids past the table wrap around.
PALETTE = np.array([
    [24, 24, 32],
    [170, 40, 40], [215, 85, 60], [250, 135, 100],
    [30, 140, 60], [75, 185, 90], [140, 225, 140],
    [40, 80, 180], [85, 130, 220], [135, 180, 250],
    [175, 150, 30], [215, 190, 60], [250, 225, 110],
    [90, 90, 90], [150, 150, 150], [210, 210, 210],
], dtype=np.uint8)


def render_rgb(tokens: np.ndarray, cell_px: int = 16) -> np.ndarray:
    """[h, w] token ids -> [h*cell_px, w*cell_px, 3] uint8."""
    ids = np.asarray(tokens, dtype=np.int64) % len(PALETTE)
    rgb = PALETTE[ids]
    return np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)


def write_ppm(path, tokens: np.ndarray, cell_px: int = 16) -> None:
    """Binary P6 image, dependency-free."""
    rgb = render_rgb(tokens, cell_px)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def maybe_write_png(path, tokens: np.ndarray, cell_px: int = 16) -> bool:
    """PNG via Pillow when importable; returns whether it was written."""
    try:
        from PIL import Image
    except ImportError:
        return False
    Image.fromarray(render_rgb(tokens, cell_px)).save(path)
    return True


def save_tokens_txt(path, tokens: np.ndarray) -> None:
    np.savetxt(path, np.asarray(tokens, dtype=np.int64), fmt="%d")


def load_tokens_txt(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigError("token grid file not found: %s" % path)
    return np.loadtxt(p, dtype=np.int64, ndmin=2)


def _write_sample(stem: Path, grid: TokenGrid, order: np.ndarray,
                  sidecar: dict, cell_px: int) -> None:
    save_tokens_txt("%s.tokens.txt" % stem, grid.tokens)
    write_ppm("%s.ppm" % stem, grid.tokens, cell_px)
    png = maybe_write_png("%s.png" % stem, grid.tokens, cell_px)
    # decode order is tracked as model positions (raster index + 1, slot 0
    # being the condition); sidecars report plain raster indices
    raster = (np.asarray(order).astype(int) - 1).tolist()
    sidecar = dict(sidecar, order=raster, png_written=png)
    Path("%s.json" % stem).write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- train

def cmd_train(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    mc = build(md.ModelConfig, cfg, "model", used)
    spec = build(ToyDatasetSpec, cfg, "data", used)
    tc = build(TrainConfig, cfg, "train", used)
    data_n = int(take(cfg, "data.n", used, 512))
    data_seed = int(take(cfg, "data.seed", used, 0))
    snapshot_every = int(take(cfg, "train.snapshot_every", used, 0))
    log_every = int(take(cfg, "train.log_every", used, 50))
    resume = take(cfg, "train.resume", used, None)
    check_used(cfg, used)
    if spec.grid_h * spec.grid_w != mc.seq_len:
        raise ConfigError("data grid %dx%d holds %d tokens, model.seq_len "
                          "is %d" % (spec.grid_h, spec.grid_w,
                                     spec.grid_h * spec.grid_w, mc.seq_len))
    if spec.vocab_size != mc.vocab_size or spec.num_classes != mc.num_classes:
        raise ConfigError("data vocab/classes (%d, %d) do not match model "
                          "(%d, %d)" % (spec.vocab_size, spec.num_classes,
                                        mc.vocab_size, mc.num_classes))
    _write_resolved(out, cfg)
    dataset = make_dataset(spec, data_n, np.random.default_rng(data_seed))
    data_id = {"n": data_n, "seed": data_seed, "spec": asdict(spec)}

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.meta.get("model") != asdict(mc):
            raise ConfigError("checkpoint model config does not match the "
                              "requested one: %s" % resume)
        extra = ck.meta.get("extra") or {}
        if extra.get("data") != data_id:
            raise ConfigError("checkpoint was trained on a different "
                              "dataset: %s" % resume)
        if ck.optim is None:
            raise ConfigError("checkpoint holds no optimizer state, cannot "
                              "resume: %s" % resume)
        params, optim = ck.params, ck.optim
        start_step = int(extra["loop_step"])
        rng = restore_rng(extra["rng_state"])
        metrics_mode = "a"
    else:
        params = md.ArpgParams.init(mc, np.random.default_rng(tc.seed))
        optim = OptimState.init(params, tc.lr, (tc.beta1, tc.beta2),
                                tc.weight_decay)
        start_step = 0
        rng = np.random.default_rng(tc.seed + 1)
        metrics_mode = "w"

    t_start = time.perf_counter()
    with open(out / "metrics.jsonl", metrics_mode) as mf:
        def on_step(rec):
            mf.write(json.dumps(rec) + "\n")
            mf.flush()
            done = rec["step"] + 1
            if log_every and done % log_every == 0:
                print("step %5d  loss %.4f  lr %.2e  %.0f ms"
                      % (rec["step"], rec["loss"], rec["lr"], rec["wall_ms"]))
            if snapshot_every and done % snapshot_every == 0 and done < tc.steps:
                save_checkpoint(out / ("snapshot_%06d.ckpt" % done), params,
                                optim, extra={"loop_step": done,
                                              "rng_state": rng_state(rng),
                                              "data": data_id})
        optim, history = train_loop(params, dataset, tc, optim=optim, rng=rng,
                                    start_step=start_step, on_step=on_step)

    final = out / "model.ckpt"
    save_checkpoint(final, params, optim,
                    extra={"loop_step": tc.steps, "rng_state": rng_state(rng),
                           "data": data_id})
    last = history[-1]["loss"] if history else float("nan")
    print("trained steps [%d, %d) in %.1f s, final loss %.4f -> %s"
          % (start_step, tc.steps, time.perf_counter() - t_start, last, final))
    return 0


# ---------------------------------------------------------------- decode commands

def cmd_generate(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    ck_path = take(cfg, "checkpoint", used)
    dc = build(DecodeConfig, cfg, "decode", used)
    n = int(take(cfg, "generate.n", used, 1))
    class_id = int(take(cfg, "generate.class_id", used, 0))
    cell_px = int(take(cfg, "image.cell_px", used, 16))
    check_used(cfg, used)
    _write_resolved(out, cfg)
    params = load_checkpoint(ck_path).params
    if not 0 <= class_id < params.config.num_classes:
        raise ConfigError("class_id %d outside [0, %d)"
                          % (class_id, params.config.num_classes))
    for i in range(n):
        dci = replace(dc, seed=dc.seed + i)
        sink: list = []
        grid = generate(params, class_id, dci, state_sink=sink)
        _write_sample(out / ("sample_%03d" % i), grid, sink[0].permutation,
                      {"command": "generate", "seed": dci.seed,
                       "class_id": class_id, "checkpoint": str(ck_path),
                       "decode": asdict(dci)}, cell_px)
    print("wrote %d sample(s) to %s" % (n, out))
    return 0


def cmd_inpaint(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    ck_path = take(cfg, "checkpoint", used)
    dc = build(DecodeConfig, cfg, "decode", used)
    input_path = take(cfg, "inpaint.input", used)
    mask_path = take(cfg, "inpaint.mask", used)
    class_id = int(take(cfg, "inpaint.class_id", used, 0))
    cell_px = int(take(cfg, "image.cell_px", used, 16))
    check_used(cfg, used)
    _write_resolved(out, cfg)
    params = load_checkpoint(ck_path).params
    toks = load_tokens_txt(input_path)
    known = load_tokens_txt(mask_path)
    if known.shape != toks.shape:
        raise ConfigError("mask shape %s does not match input %s"
                          % (known.shape, toks.shape))
    sink: list = []
    grid = inpaint(params, TokenGrid(toks, class_id), known.astype(bool),
                   class_id, dc, state_sink=sink)
    order = sink[0].permutation if sink else np.empty(0, dtype=np.int64)
    _write_sample(out / "inpaint", grid, order,
                  {"command": "inpaint", "seed": dc.seed,
                   "class_id": class_id, "checkpoint": str(ck_path),
                   "input": str(input_path), "mask": str(mask_path),
                   "decode": asdict(dc)}, cell_px)
    print("inpainted %d position(s) -> %s" % (len(order), out / "inpaint.ppm"))
    return 0


def cmd_expand(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    ck_path = take(cfg, "checkpoint", used)
    dc = build(DecodeConfig, cfg, "decode", used)
    input_path = take(cfg, "expand.input", used)
    new_h = int(take(cfg, "expand.new_h", used))
    new_w = int(take(cfg, "expand.new_w", used))
    mode = take(cfg, "expand.mode", used, "outpaint")
    class_id = int(take(cfg, "expand.class_id", used, 0))
    cell_px = int(take(cfg, "image.cell_px", used, 16))
    check_used(cfg, used)
    _write_resolved(out, cfg)
    params = load_checkpoint(ck_path).params
    base = TokenGrid(load_tokens_txt(input_path), class_id)
    sink: list = []
    grid = expand(params, base, new_h, new_w, mode, dc, state_sink=sink)
    order = sink[0].permutation if sink else np.empty(0, dtype=np.int64)
    _write_sample(out / "expand", grid, order,
                  {"command": "expand", "seed": dc.seed, "mode": mode,
                   "class_id": class_id, "checkpoint": str(ck_path),
                   "input": str(input_path), "new_h": new_h, "new_w": new_w,
                   "decode": asdict(dc)}, cell_px)
    print("expanded to %dx%d (%s) -> %s"
          % (new_h, new_w, mode, out / "expand.ppm"))
    return 0


# ---------------------------------------------------------------- bench

def run_bench(params: md.ArpgParams, steps_list, patterns, batch: int = 16,
              repeats: int = 3, base_dc: DecodeConfig | None = None,
              seed: int = 0) -> dict:
    """Sweep step counts x attention patterns over full-grid decodes.

    Each (steps, pattern) cell decodes `batch` independent grids per repeat;
    one untimed warm-up repeat is discarded. Timings cover only the decode
    calls, not checkpoint load or process startup. Returns {"rows": [...],
    "monotonicity_violations": [...]} where a violation is a pattern whose
    mean wall time went down when the step count went up.
    """
    cfg = params.config
    total = cfg.seq_len
    if base_dc is None:
        base_dc = DecodeConfig()
    rows = []
    for pattern in patterns:
        for steps in steps_list:
            dc = replace(base_dc, steps=int(steps), attention_pattern=pattern)
            n_caches = 1 if dc.cfg_scale == 1.0 else 2
            wall_ms = []
            for rep in range(repeats + 1):
                t0 = time.perf_counter()
                for b in range(batch):
                    generate(params, b % cfg.num_classes,
                             replace(dc, seed=seed + 1000 * rep + b))
                if rep > 0:  # repeat 0 is warm-up
                    wall_ms.append((time.perf_counter() - t0) * 1e3)
            arr = np.asarray(wall_ms)
            rows.append({
                "steps": int(steps), "pattern": pattern,
                "wall_ms_mean": float(arr.mean()),
                "wall_ms_p50": float(np.percentile(arr, 50)),
                "wall_ms_p95": float(np.percentile(arr, 95)),
                "tokens_per_s": float(batch * total / (arr.mean() / 1e3)),
                "cache_scalars": n_caches * cache_scalar_count(cfg, total),
                "resident_bytes_est": 4 * (md.param_count(cfg)
                                           + n_caches * cache_scalar_count(cfg, total)),
            })
    violations = []
    for pattern in patterns:
        cells = sorted((r for r in rows if r["pattern"] == pattern),
                       key=lambda r: r["steps"])
        for lo, hi in zip(cells, cells[1:]):
            if hi["wall_ms_mean"] < lo["wall_ms_mean"]:
                violations.append({"pattern": pattern,
                                   "steps": [lo["steps"], hi["steps"]],
                                   "wall_ms_mean": [lo["wall_ms_mean"],
                                                    hi["wall_ms_mean"]]})
    return {"rows": rows, "monotonicity_violations": violations,
            "batch": batch, "repeats": repeats, "seq_len": total}


def format_bench_table(report: dict) -> str:
    cols = ["steps", "pattern", "wall_ms_mean", "wall_ms_p50", "wall_ms_p95",
            "tokens_per_s", "cache_scalars", "resident_bytes_est"]
    lines = [" ".join("%14s" % c for c in cols)]
    for r in report["rows"]:
        cells = []
        for c in cols:
            v = r[c]
            cells.append("%14.1f" % v if isinstance(v, float) else "%14s" % v)
        lines.append(" ".join(cells))
    for v in report["monotonicity_violations"]:
        lines.append("warning: %s wall time fell from %.1f to %.1f ms going "
                     "%d -> %d steps" % (v["pattern"], v["wall_ms_mean"][0],
                                         v["wall_ms_mean"][1], v["steps"][0],
                                         v["steps"][1]))
    return "\n".join(lines)


def _default_steps(total: int) -> list[int]:
    steps = [s for s in (1, 2, 4, 8, 16, 32, 64, 128, 256) if s < total]
    return steps + [total]


def cmd_bench(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    ck_path = take(cfg, "checkpoint", used, None)
    dc = build(DecodeConfig, cfg, "decode", used)
    if ck_path is not None:
        params = load_checkpoint(ck_path).params
        used.update(k for k in cfg if k.startswith("model."))
    else:
        mc = build(md.ModelConfig, cfg, "model", used)
        params = md.ArpgParams.init(mc, np.random.default_rng(0))
    steps_list = take(cfg, "bench.steps", used,
                      _default_steps(params.config.seq_len))
    patterns = take(cfg, "bench.patterns", used, ["causal", "block_causal"])
    batch = int(take(cfg, "bench.batch", used, 16))
    repeats = int(take(cfg, "bench.repeats", used, 3))
    seed = int(take(cfg, "bench.seed", used, 0))
    check_used(cfg, used)
    _write_resolved(out, cfg)
    report = run_bench(params, steps_list, patterns, batch, repeats, dc, seed)
    (out / "bench.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_bench_table(report)
    (out / "bench.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------- grad demo

def _fmt_norm(v: float) -> str:
    return "0" if v == 0.0 else "%.6e" % v


def cmd_grad_demo(cfg: dict) -> int:
    used: set[str] = set()
    out_path = take(cfg, "out_dir", used, None)
    seed = int(take(cfg, "demo.seed", used, 0))
    rows = int(take(cfg, "demo.rows", used, 8))
    check_used(cfg, used)

    report = masked_baseline_grad_demo(seed, rows=rows)
    print("one-layer masked baseline, seed %d: per-row query-grad norms" % seed)
    for i, (m, dq) in enumerate(zip(report["masked"], report["dq_norms"])):
        print("  row %2d  %s  |dq| = %s"
              % (i, "masked  " if m else "unmasked", _fmt_norm(dq)))
    for m, dq in zip(report["masked"], report["dq_norms"]):
        assert m or dq == 0.0, "unmasked row leaked query gradient"

    mc = md.ModelConfig(vocab_size=16, num_classes=4, hidden=32, heads=4,
                        pass1_layers=2, pass2_layers=2, seq_len=16)
    params = md.ArpgParams.init(mc, np.random.default_rng(seed),
                                dtype=np.float64)
    spec = ToyDatasetSpec(grid_h=4, grid_w=4, vocab_size=16, num_classes=4)
    batch = make_dataset(spec, 8, np.random.default_rng(seed))
    optim = OptimState.init(params, 1e-3)
    loss = train_step(params, optim, batch, np.random.default_rng(seed + 1))
    print("two-pass model, one train step (loss %.4f): query-projection "
          "grad norms" % loss)
    wq_norms = {}
    for layer in params.pass2:
        wq_norms[layer.wq.name] = float(np.linalg.norm(layer.wq.grad))
        print("  %s  |grad| = %s" % (layer.wq.name,
                                     _fmt_norm(wq_norms[layer.wq.name])))
    assert all(v > 0.0 for v in wq_norms.values()), \
        "a query projection received zero gradient"

    if out_path is not None:
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"seed": seed, "baseline": {k: np.asarray(v).tolist()
                                              for k, v in report.items()},
                   "model_wq_grad_norms": wq_norms}
        (out / "grad_demo.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------- attention export

def cmd_attn_export(cfg: dict) -> int:
    used: set[str] = set()
    out = _out_dir(cfg, used)
    ck_path = take(cfg, "checkpoint", used)
    input_path = take(cfg, "attn.input", used, None)
    class_id = int(take(cfg, "attn.class_id", used, 0))
    seed = int(take(cfg, "attn.seed", used, 0))
    check_used(cfg, used)
    _write_resolved(out, cfg)
    params = load_checkpoint(ck_path).params
    mc = params.config
    total = mc.seq_len
    if input_path is None:
        toks = np.random.default_rng(seed).integers(0, mc.vocab_size, total)
    else:
        toks = load_tokens_txt(input_path).reshape(-1)
        if toks.size != total:
            raise ConfigError("input holds %d tokens, model expects %d"
                              % (toks.size, total))
    if not 0 <= class_id < mc.num_classes:
        raise ConfigError("class_id %d outside [0, %d)"
                          % (class_id, mc.num_classes))

    # Raster teacher forcing: content row i sees [cond, x_1..x_i], query row
    # t asks for position t over the full content length.
    ids = np.concatenate([[mc.class_token(class_id)],
                          toks[:-1]]).astype(np.int64)
    positions = np.arange(total, dtype=np.int64)
    targets = np.arange(1, total + 1, dtype=np.int64)
    capture = md.ActivationBlock()
    with nc.no_grad():
        h = md.pass1_hidden(params, ids[None], positions[None],
                            causal_mask(total), capture=capture)
        kv = md.project_kv(params, h, positions[None])
        md.pass2_logits(params, kv, targets[None],
                        cross_full_mask(total, total), capture=capture)

    written = []
    if capture.pass1_probs is not None:
        for head in range(mc.heads):
            name = "pass1_head%d.csv" % head
            np.savetxt(out / name, capture.pass1_probs[0, head],
                       delimiter=",", fmt="%.8e")
            written.append(name)
    for head in range(mc.heads):
        name = "pass2_head%d.csv" % head
        np.savetxt(out / name, capture.pass2_probs[0, head],
                   delimiter=",", fmt="%.8e")
        written.append(name)
    meta = {"checkpoint": str(ck_path), "class_id": class_id, "seed": seed,
            "input": None if input_path is None else str(input_path),
            "t_in": int(total), "queries": int(total), "heads": mc.heads,
            "files": written}
    (out / "attn_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print("wrote %d score matrices to %s" % (len(written), out))
    return 0


# ---------------------------------------------------------------- entry

COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "inpaint": cmd_inpaint,
    "expand": cmd_expand,
    "bench": cmd_bench,
    "grad-demo": cmd_grad_demo,
    "attn-export": cmd_attn_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="arpg",
        description="Random-order parallel decoder: train on shape grids, "
                    "generate, edit, benchmark.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None,
                        help="flat JSON config with dotted keys")
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except (AssertionError, RuntimeError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError, TypeError, KeyError) as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
