"""Command-line surface: train, eval, predict, decompose, bench, synth.

Usage:   karma <command> [--config FILE] [--key value]...

Configuration is a flat ``key = value`` file ('#' starts a comment); any key
can also be given as a ``--key value`` flag, and flags override the file.
Unknown keys are rejected. ``KARMA_SEED`` serves as a seed fallback when no
seed is configured. Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.

Every command writes its artifacts into ``out_dir`` and a key-sorted JSON
report whose non-timing fields are deterministic for a given (config, seed,
machine); wall-clock numbers live under the single report key "timing".
CSV is the canonical output format; SVG emission (``svg = true``) is a
dependency-free polyline writer for quick visual checks.
"""

import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from . import backend
from .data import (ScalerStats, SeriesTable, SyntheticSpec, apply_scaler,
                   chrono_split, default_components, default_ratios,
                   fit_apply_scaler, generate_synthetic, inverse_scaler,
                   load_csv, make_windows, write_csv)
from .decomposition import atcd_forward, hftd_decompose, make_wavelet
from .errors import ConfigError, DataError, KarmaError
from .model import (KarmaConfig, embed_components, init_parameters,
                    instance_normalize, karma_forward, load_checkpoint,
                    save_checkpoint)
from .rng import Rng
from .tensor import Tensor, no_grad
from .training import LossConfig, TrainConfig, train_loop

COMMANDS = ("train", "eval", "predict", "decompose", "bench", "synth")

# -- configuration ---------------------------------------------------------------

# key -> (kind, default); kinds: int, float, bool, str, ints, floats
_SCHEMA = {
    # model
    "channels": ("int", None),
    "lookback": ("int", 96),
    "horizon": ("int", 96),
    "e_s": ("int", 64),
    "e_t": ("int", 64),
    "n_blocks": ("int", 2),
    "inner": ("int", 64),
    "heads": ("int", 4),
    "p_drop": ("float", 0.1),
    "d_state": ("int", 16),
    "d_conv": ("int", 4),
    "expand": ("int", 2),
    "wavelet": ("str", "haar"),
    "use_atcd": ("bool", True),
    "use_hftd": ("bool", True),
    "share_temporal_mamba": ("bool", True),
    "norm_affine": ("bool", False),
    "seed": ("int", None),
    # training
    "lr": ("float", 1e-3),
    "batch": ("int", 32),
    "epochs": ("int", 10),
    "alpha": ("float", 0.2),
    "patience": ("int", 3),
    "min_delta": ("float", 0.0),
    # data
    "data": ("str", None),
    "split": ("floats", None),
    "stride": ("int", 1),
    # synthetic generator
    "length": ("int", 4000),
    "periods": ("ints", (24, 96)),
    "amplitudes": ("floats", (1.0, 0.5)),
    "slope": ("float", 0.001),
    "noise_std": ("float", 0.1),
    # artifacts and run shape
    "out_dir": ("str", "runs"),
    "checkpoint": ("str", None),
    "origin": ("int", None),
    "svg": ("bool", False),
    "threads": ("int", 1),
    "lengths": ("ints", (96, 192, 336, 720, 1024, 1440, 2048)),
    "repeats": ("int", 3),
    "fp32": ("bool", False),
}


@dataclass
class RunConfig:
    """Fully-resolved settings for one command invocation."""
    command: str
    channels: object = None
    lookback: int = 96
    horizon: int = 96
    e_s: int = 64
    e_t: int = 64
    n_blocks: int = 2
    inner: int = 64
    heads: int = 4
    p_drop: float = 0.1
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    wavelet: str = "haar"
    use_atcd: bool = True
    use_hftd: bool = True
    share_temporal_mamba: bool = True
    norm_affine: bool = False
    seed: int = 0
    lr: float = 1e-3
    batch: int = 32
    epochs: int = 10
    alpha: float = 0.2
    patience: int = 3
    min_delta: float = 0.0
    data: object = None
    split: object = None
    stride: int = 1
    length: int = 4000
    periods: tuple = (24, 96)
    amplitudes: tuple = (1.0, 0.5)
    slope: float = 0.001
    noise_std: float = 0.1
    out_dir: str = "runs"
    checkpoint: object = None
    origin: object = None
    svg: bool = False
    threads: int = 1
    lengths: tuple = (96, 192, 336, 720, 1024, 1440, 2048)
    repeats: int = 3
    fp32: bool = False

    def validate(self) -> "RunConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if self.split is not None and len(self.split) != 3:
            raise ConfigError(f"split needs three ratios, got {self.split}")
        return self

    def model_config(self, channels: int) -> KarmaConfig:
        if self.channels is not None and self.channels != channels:
            raise ConfigError(f"config says {self.channels} channels but the "
                              f"data has {channels}")
        return KarmaConfig(
            channels=channels, lookback=self.lookback, horizon=self.horizon,
            e_s=self.e_s, e_t=self.e_t, n_blocks=self.n_blocks,
            inner=self.inner, heads=self.heads, p_drop=self.p_drop,
            d_state=self.d_state, d_conv=self.d_conv, expand=self.expand,
            wavelet=self.wavelet, use_atcd=self.use_atcd,
            use_hftd=self.use_hftd,
            share_temporal_mamba=self.share_temporal_mamba,
            norm_affine=self.norm_affine, seed=self.seed).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch=self.batch, epochs=self.epochs,
                           patience=self.patience, min_delta=self.min_delta,
                           loss=LossConfig(alpha=self.alpha)).validate()


def _parse_value(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(p.strip()) for p in raw.split(",") if p.strip())
        if kind == "floats":
            return tuple(float(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key '{key}' "
                          f"(expected {kind})") from None


def _read_config_file(path) -> dict:
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', "
                                  f"got {body!r}")
            key, _, raw = body.partition("=")
            out[key.strip()] = raw.strip()
    return out


def parse_config(command: str, config_path=None, overrides=None) -> RunConfig:
    """Merge defaults <- config file <- flag overrides into a RunConfig."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r} "
                          f"(expected one of {', '.join(COMMANDS)})")
    merged = {}
    for source in (_read_config_file(config_path) if config_path else {},
                   overrides or {}):
        for key, raw in source.items():
            if key not in _SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = _parse_value(key, _SCHEMA[key][0], raw)
    values = {key: default for key, (_, default) in _SCHEMA.items()}
    values.update(merged)
    if values["seed"] is None:
        env = os.environ.get("KARMA_SEED", "").strip()
        values["seed"] = _parse_value("KARMA_SEED", "int", env) if env else 0
    return RunConfig(command=command, **values).validate()


# -- report and artifact helpers -------------------------------------------------


def _config_echo(rc: RunConfig) -> dict:
    echo = asdict(rc)
    for key, value in echo.items():
        if isinstance(value, tuple):
            echo[key] = list(value)
    return echo


def _write_report(rc: RunConfig, name: str, body: dict, timing: dict) -> str:
    report = dict(body)
    report["command"] = rc.command
    report["version"] = f"karma-{__version__}"
    report["config"] = _config_echo(rc)
    report["timing"] = timing
    path = os.path.join(rc.out_dir, f"{name}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _write_matrix_csv(path, col_names, matrix, index_name, index_values):
    """Plain numeric CSV: one index column, one column per name."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join([index_name] + list(col_names)) + "\n")
        for idx, row in zip(index_values, matrix):
            cells = [str(idx)] + [repr(float(v)) for v in row]
            fh.write(",".join(cells) + "\n")


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#17becf")


def write_svg(path, series: dict, width: int = 800, height: int = 300):
    """Dependency-free polyline plot; one line per named series.

    NaN values leave gaps (used to offset a forecast from its history).
    """
    finite = [v for vals in series.values() for v in vals if np.isfinite(v)]
    lo = min(finite, default=0.0)
    hi = max(finite, default=1.0)
    span = (hi - lo) or 1.0
    n = max((len(v) for v in series.values()), default=2)
    pad = 10.0

    def sx(i):
        return pad + (width - 2 * pad) * i / max(n - 1, 1)

    def sy(v):
        return height - pad - (height - 2 * pad) * (v - lo) / span

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, (name, vals) in enumerate(sorted(series.items())):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        run = []
        runs = []
        for i, v in enumerate(vals):
            if np.isfinite(v):
                run.append(f"{sx(i):.2f},{sy(float(v)):.2f}")
            elif run:
                runs.append(run)
                run = []
        if run:
            runs.append(run)
        for seg in runs:
            parts.append(f'<polyline fill="none" stroke="{color}" '
                         f'stroke-width="1.5" points="{" ".join(seg)}">'
                         f'<title>{name}</title></polyline>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")


def _load_table(rc: RunConfig) -> SeriesTable:
    if rc.data is None:
        raise ConfigError(f"command '{rc.command}' needs a data path "
                          f"(key 'data')")
    if not os.path.exists(rc.data):
        raise DataError(f"data file not found: {rc.data}")
    return load_csv(rc.data)


def _load_model(rc: RunConfig):
    if rc.checkpoint is None:
        raise ConfigError(f"command '{rc.command}' needs a checkpoint path "
                          f"(key 'checkpoint')")
    if not os.path.exists(rc.checkpoint):
        raise DataError(f"checkpoint file not found: {rc.checkpoint}")
    model, extras, config = load_checkpoint(rc.checkpoint)
    if "scaler_mean" not in extras or "scaler_std" not in extras:
        raise DataError(f"checkpoint {rc.checkpoint} is missing scaler stats")
    stats = ScalerStats(mean=extras["scaler_mean"], std=extras["scaler_std"],
                        eps=1e-8)
    return model, extras, config, stats


def _forward_many(model, windows, threads: int):
    """Per-window predictions, in window order regardless of thread count."""

    def one(w):
        with no_grad():
            return karma_forward(Tensor(w.x), model, rng=None,
                                 training=False).data

    if threads <= 1:
        return [one(w) for w in windows]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, windows))


def _metrics_report(model, windows, stats, threads: int) -> dict:
    """MSE/MAE on the scaled series (canonical) and in raw units.

    The scaled numbers accumulate exactly like training.evaluate so the two
    agree float for float; the raw numbers rescale the same errors by the
    per-channel train std before averaging.
    """
    if not windows:
        raise DataError("cannot evaluate on an empty window set")
    preds = _forward_many(model, windows, threads)
    sq = ab = rsq = rab = None
    for w, y_hat in zip(windows, preds):
        err = y_hat - w.y
        rerr = err * stats.std
        t_sq, t_ab = (err ** 2).mean(axis=1), np.abs(err).mean(axis=1)
        r_sq, r_ab = (rerr ** 2).mean(axis=1), np.abs(rerr).mean(axis=1)
        sq = t_sq if sq is None else sq + t_sq
        ab = t_ab if ab is None else ab + t_ab
        rsq = r_sq if rsq is None else rsq + r_sq
        rab = r_ab if rab is None else rab + r_ab
    n = len(windows)
    sq, ab, rsq, rab = sq / n, ab / n, rsq / n, rab / n
    horizon = sq.shape[0]
    marks = sorted({1, max(horizon // 4, 1), max(horizon // 2, 1), horizon})
    return {
        "windows": n,
        "mse": float(sq.mean()),
        "mae": float(ab.mean()),
        "raw_mse": float(rsq.mean()),
        "raw_mae": float(rab.mean()),
        "per_step_marks": {str(m): {"mse": float(sq[m - 1]),
                                    "mae": float(ab[m - 1])} for m in marks},
        "mse_per_step": [float(v) for v in sq],
        "mae_per_step": [float(v) for v in ab],
    }


# -- commands --------------------------------------------------------------------


def cmd_synth(rc: RunConfig) -> dict:
    channels = rc.channels if rc.channels is not None else 7
    spec = SyntheticSpec(
        length=rc.length, channels=channels,
        components=default_components(channels, rc.periods, rc.amplitudes),
        slope=rc.slope, noise_std=rc.noise_std, seed=rc.seed)
    table = generate_synthetic(spec)
    path = rc.data if rc.data else os.path.join(rc.out_dir, "synthetic.csv")
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_csv(path, table)
    body = {"data": {"path": path, "rows": table.rows,
                     "channels": table.channels}}
    print(f"wrote {table.rows} x {table.channels} synthetic series to {path}")
    return _build(rc, "synth", body, {})


def cmd_train(rc: RunConfig) -> dict:
    table = _load_table(rc)
    config = rc.model_config(table.channels)
    ratios = tuple(rc.split) if rc.split else default_ratios(table.channels)
    train, val, test = chrono_split(table, ratios, config.lookback,
                                    config.horizon)
    (strain, sval, stest), stats = fit_apply_scaler(train, val, test)
    train_windows = make_windows(strain, config.lookback, config.horizon,
                                 rc.stride)
    val_windows = make_windows(sval, config.lookback, config.horizon)
    test_windows = make_windows(stest, config.lookback, config.horizon)

    model = init_parameters(config, Rng(rc.seed))
    t0 = time.perf_counter()
    model, history = train_loop(model, train_windows, val_windows,
                                rc.train_config(), Rng(rc.seed).spawn(5))
    train_seconds = time.perf_counter() - t0

    ckpt_path = os.path.join(rc.out_dir, "model.ckpt")
    save_checkpoint(ckpt_path, model, extras={
        "scaler_mean": stats.mean, "scaler_std": stats.std,
        "split": np.asarray(ratios, dtype=np.float64)})

    hist_path = os.path.join(rc.out_dir, "history.csv")
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,lr,seconds\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},"
                     f"{row['val_loss']!r},{row['lr']!r},"
                     f"{row['seconds']!r}\n")

    t1 = time.perf_counter()
    test_metrics = _metrics_report(model, test_windows, stats, rc.threads)
    eval_seconds = time.perf_counter() - t1

    if rc.svg:
        write_svg(os.path.join(rc.out_dir, "loss_curve.svg"),
                  {"train_loss": [r["train_loss"] for r in history],
                   "val_loss": [r["val_loss"] for r in history]})

    body = {
        "parameters": model.parameter_count(),
        "data": {"path": rc.data, "rows": table.rows,
                 "channels": table.channels, "split": list(ratios),
                 "windows": {"train": len(train_windows),
                             "val": len(val_windows),
                             "test": len(test_windows)}},
        "epochs_ran": len(history),
        "best_val_loss": min(r["val_loss"] for r in history),
        "metrics": {"test": test_metrics},
        "artifacts": {"checkpoint": ckpt_path, "history": hist_path},
    }
    timing = {"train_seconds": train_seconds, "eval_seconds": eval_seconds}
    print(f"trained {len(history)} epoch(s); best val loss "
          f"{body['best_val_loss']:.6f}; test mse {test_metrics['mse']:.6f}; "
          f"checkpoint at {ckpt_path}")
    return _build(rc, "train", body, timing)


def cmd_eval(rc: RunConfig) -> dict:
    model, extras, config, stats = _load_model(rc)
    table = _load_table(rc)
    if table.channels != config.channels:
        raise ConfigError(f"checkpoint was trained on {config.channels} "
                          f"channels but the data has {table.channels}")
    if rc.split:
        ratios = tuple(rc.split)
    elif "split" in extras:
        ratios = tuple(float(v) for v in extras["split"])
    else:
        ratios = default_ratios(table.channels)
    _, _, test = chrono_split(table, ratios, config.lookback, config.horizon)
    stest = apply_scaler(test, stats)
    windows = make_windows(stest, config.lookback, config.horizon, rc.stride)

    t0 = time.perf_counter()
    metrics = _metrics_report(model, windows, stats, rc.threads)
    eval_seconds = time.perf_counter() - t0

    body = {
        "parameters": model.parameter_count(),
        "data": {"path": rc.data, "rows": table.rows,
                 "channels": table.channels, "split": list(ratios)},
        "metrics": {"test": metrics},
    }
    print(f"evaluated {metrics['windows']} windows: "
          f"mse {metrics['mse']:.6f}, mae {metrics['mae']:.6f}")
    return _build(rc, "eval", body, {"eval_seconds": eval_seconds})


def cmd_predict(rc: RunConfig) -> dict:
    model, extras, config, stats = _load_model(rc)
    table = _load_table(rc)
    if table.channels != config.channels:
        raise ConfigError(f"checkpoint was trained on {config.channels} "
                          f"channels but the data has {table.channels}")
    lookback, horizon = config.lookback, config.horizon
    origin = rc.origin if rc.origin is not None else table.rows
    if origin < lookback:
        raise ConfigError(f"origin {origin} leaves fewer than lookback="
                          f"{lookback} history rows")
    if origin > table.rows:
        raise ConfigError(f"origin {origin} is beyond the series end "
                          f"({table.rows} rows)")
    scaled = apply_scaler(table, stats)
    x = scaled.values[origin - lookback:origin]
    with no_grad():
        y_hat = karma_forward(Tensor(x), model, rng=None, training=False)
    raw = inverse_scaler(y_hat.data, stats)

    path = os.path.join(rc.out_dir, "forecast.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("channel,step,truth,prediction\n")
        for c, name in enumerate(table.names):
            for step in range(1, horizon + 1):
                row = origin + step - 1
                truth = repr(float(table.values[row, c])) \
                    if row < table.rows else ""
                fh.write(f"{name},{step},{truth},{repr(float(raw[step - 1, c]))}\n")

    if rc.svg:
        for c, name in enumerate(table.names):
            history = [float(v)
                       for v in table.values[origin - lookback:origin, c]]
            gap = [float("nan")] * (lookback - 1)
            series = {"history": history,
                      "prediction": gap + history[-1:] +
                      [float(v) for v in raw[:, c]]}
            future = table.values[origin:origin + horizon, c]
            if len(future):
                series["truth"] = (gap + history[-1:] +
                                   [float(v) for v in future])
            write_svg(os.path.join(rc.out_dir, f"forecast_{name}.svg"), series)

    body = {
        "data": {"path": rc.data, "rows": table.rows,
                 "channels": table.channels},
        "origin": origin,
        "horizon": horizon,
        "truth_rows": max(0, min(table.rows - origin, horizon)),
        "artifacts": {"forecast": path},
    }
    print(f"forecast of {horizon} steps from row {origin} written to {path}")
    return _build(rc, "predict", body, {})


def cmd_decompose(rc: RunConfig) -> dict:
    table = _load_table(rc)
    if rc.checkpoint is not None:
        model, extras, config, stats = _load_model(rc)
        if table.channels != config.channels:
            raise ConfigError(f"checkpoint was trained on {config.channels} "
                              f"channels but the data has {table.channels}")
        source = apply_scaler(table, stats)
    else:
        config = rc.model_config(table.channels)
        model = init_parameters(config, Rng(rc.seed))
        source = table
    lookback = config.lookback
    origin = rc.origin if rc.origin is not None else lookback
    if origin < lookback or origin > table.rows:
        raise ConfigError(f"origin {origin} must lie in [{lookback}, "
                          f"{table.rows}]")
    x = Tensor(source.values[origin - lookback:origin])

    with no_grad():
        x_norm, _ = instance_normalize(x)
        if config.use_atcd:
            x_t, x_s, inner = atcd_forward(x_norm, model.atcd, None,
                                           training=False, return_inner=True)
        else:
            x_t = Tensor(np.zeros_like(x_norm.data))
            x_s, inner = x_norm, None
        x_se, _ = embed_components(x_s, x_t, model)
        filt = make_wavelet(config.wavelet) if config.use_hftd else None
        comp = hftd_decompose(x_se, filt, model.hftd_gain)

    steps = list(range(1, lookback + 1))
    files = {}

    def emit(name, col_names, matrix, index_name, index_values):
        path = os.path.join(rc.out_dir, f"{name}.csv")
        _write_matrix_csv(path, col_names, matrix, index_name, index_values)
        files[name] = path

    emit("trend", table.names, x_t.data, "step", steps)
    emit("seasonal", table.names, x_s.data, "step", steps)
    if inner is not None:
        x_inner, trend_inner, seasonal_inner = inner
        feat = [f"i{j}" for j in range(x_inner.shape[1])]
        emit("inner_input", feat, x_inner.data, "channel", table.names)
        emit("inner_trend", feat, trend_inner.data, "channel", table.names)
        emit("inner_seasonal", feat, seasonal_inner.data, "channel",
             table.names)
    if comp.f_h is not None:
        half = [f"k{j}" for j in range(comp.f_h.shape[1])]
        emit("f_h", half, comp.f_h.data, "channel", table.names)
        emit("f_l", half, comp.f_l.data, "channel", table.names)
    emit("t_f", [f"e{j}" for j in range(comp.t_f.shape[1])], comp.t_f.data,
         "channel", table.names)

    body = {
        "data": {"path": rc.data, "rows": table.rows,
                 "channels": table.channels},
        "origin": origin,
        "from_checkpoint": rc.checkpoint is not None,
        "artifacts": files,
    }
    print(f"decomposition of window ending at row {origin} written to "
          f"{rc.out_dir} ({', '.join(sorted(files))})")
    return _build(rc, "decompose", body, {})


def _time_forward(model, x, repeats: int) -> float:
    with no_grad():
        karma_forward(x, model, rng=None, training=False)  # warmup
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            karma_forward(x, model, rng=None, training=False)
            times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _bench_backends(seed: int, repeats: int) -> dict:
    """Time each scan kernel on one representative problem; check agreement."""
    r = Rng(seed).spawn(11)
    t_len, p, n = 1024, 64, 16
    abar = np.exp(-np.abs(r.normal((t_len, p, n))))
    bu = r.normal((t_len, p, n))
    c = r.normal((t_len, n))
    out = {}
    reference = None
    for name in backend.available_backends():
        fwd, _ = backend.get_kernels(name)
        y, _ = fwd(abar, bu, c)
        if reference is None:
            reference = y
        else:
            out["max_disagreement"] = float(np.abs(y - reference).max())
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fwd(abar, bu, c)
            times.append(time.perf_counter() - t0)
        out[name + "_seconds"] = float(np.median(times))
    return out


def cmd_bench(rc: RunConfig) -> dict:
    lengths = list(rc.lengths)
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ConfigError(f"bench lengths must be strictly ascending, "
                          f"got {lengths}")
    channels = rc.channels if rc.channels is not None else 7
    results = []
    for length in lengths:
        config = KarmaConfig(
            channels=channels, lookback=length, horizon=length,
            e_s=rc.e_s, e_t=rc.e_t, n_blocks=rc.n_blocks, inner=rc.inner,
            heads=rc.heads, p_drop=0.0, d_state=rc.d_state,
            d_conv=rc.d_conv, expand=rc.expand, wavelet=rc.wavelet,
            use_atcd=rc.use_atcd, use_hftd=rc.use_hftd,
            share_temporal_mamba=rc.share_temporal_mamba,
            seed=rc.seed).validate()
        model = init_parameters(config, Rng(rc.seed))
        x = Tensor(Rng(rc.seed).spawn(7).normal((length, channels)))
        if rc.fp32:
            for _, t in model.named_parameters():
                t.data = t.data.astype(np.float32)
            x = Tensor(x.data.astype(np.float32))
        seconds = _time_forward(model, x, rc.repeats)
        results.append({"length": length, "seconds": seconds,
                        "parameters": model.parameter_count()})

    ratios = []
    ratio_ok = True
    for prev, cur in zip(results, results[1:]):
        ratio = cur["seconds"] / max(prev["seconds"], 1e-12)
        entry = {"from": prev["length"], "to": cur["length"],
                 "ratio": float(ratio)}
        if cur["length"] == 2 * prev["length"]:
            entry["bound"] = 2.5
            if ratio > 2.5:
                ratio_ok = False
        ratios.append(entry)
    if not ratio_ok:
        print("warning: a doubling in length more than 2.5x'd the forward "
              "time; timings on shared machines are noisy", file=sys.stderr)

    backends = _bench_backends(rc.seed, rc.repeats)

    if rc.svg:
        write_svg(os.path.join(rc.out_dir, "scaling.svg"),
                  {"seconds": [r["seconds"] for r in results]})

    body = {
        "lengths": lengths,
        "precision": "fp32" if rc.fp32 else "fp64",
        "parameters": {str(r["length"]): r["parameters"] for r in results},
        "backend_active": backend.BACKEND,
        "ratio_ok": ratio_ok,
    }
    timing = {"forward": results, "ratios": ratios, "backends": backends}
    for r in results:
        print(f"L=T={r['length']:>5}: {r['seconds'] * 1e3:9.2f} ms/forward "
              f"({r['parameters']} params)")
    return _build(rc, "bench", body, timing)


def _build(rc: RunConfig, name: str, body: dict, timing: dict) -> dict:
    path = _write_report(rc, name, body, timing)
    print(f"report: {path}")
    return body


_DISPATCH = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
             "decompose": cmd_decompose, "bench": cmd_bench,
             "synth": cmd_synth}


def _parse_argv(argv):
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__.strip())
        print(f"\ncommands: {', '.join(COMMANDS)}")
        print("keys:", ", ".join(sorted(_SCHEMA)))
        return None, None, None
    command, rest = argv[0], list(argv[1:])
    config_path = None
    overrides = {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--"):
            raise ConfigError(f"expected a --key, got {flag!r}")
        if i + 1 >= len(rest):
            raise ConfigError(f"flag {flag} is missing a value")
        key, value = flag[2:], rest[i + 1]
        if key == "config":
            config_path = value
        else:
            overrides[key] = value
        i += 2
    return command, config_path, overrides


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, config_path, overrides = _parse_argv(argv)
        if command is None:
            return 0
        rc = parse_config(command, config_path, overrides)
        os.makedirs(rc.out_dir, exist_ok=True)
        _DISPATCH[rc.command](rc)
        return 0
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KarmaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
