"""End-to-end experiment execution and the line-delimited record format.

A record is a JSON-lines file:

1. ``{"type": "header", "format": 1, "config": {...}}``: the normalized
   config; feeding it back to ``run_experiment`` reproduces the file.
2. ``{"type": "data", ...}``: device and sample counts before and after
   filtering/subsampling, and sample counts per split.
3. ``{"type": "round", ...}``: one per training round (RoundLog fields).
4. ``{"type": "final", "devices": [{"device_id", "n_test", "accuracy", ...}]}``
5. ``{"type": "summary", ...}``: AccuracySummary of the final accuracies.

Nothing time- or host-dependent is written, so identical configs give
identical bytes whatever the worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import IO

from . import dataset as D
from . import fedalgo as F
from . import model as M
from .config import ROUND_ALGORITHMS, fed_config, normalize, synth_config, validate_config
from .errors import ConfigError, FormatError
from .metrics import summarize_accuracy
from .synthgen import generate_synthetic

logger = logging.getLogger(__name__)

RECORD_FORMAT = 1


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def load_data(cfg: dict, workers: int = 1) -> D.FederatedDataset:
    data = cfg["data"]
    if "path" in data:
        return D.load_dataset(data["path"])
    return generate_synthetic(synth_config(cfg), workers=workers)


def select_devices(ds: D.FederatedDataset, cfg: dict) -> D.FederatedDataset:
    """Apply the min-samples filter and device subsampling, in that order."""
    pre = cfg["preprocess"]
    if pre.get("min_samples"):
        ds = D.filter_min_samples(ds, pre["min_samples"])
    sub = pre.get("subsample")
    if sub:
        ds = D.subsample_devices(ds, count=sub.get("count"), fraction=sub.get("fraction"),
                                 seed=cfg["seed"])
    return ds


def split_devices(ds: D.FederatedDataset, cfg: dict):
    """Per-device split, pooling the train part when ``mix_iid`` is set."""
    pre, seed = cfg["preprocess"], cfg["seed"]
    train, val, test = D.split_train_val_test(ds, tuple(pre["split"]), seed)
    if pre.get("mix_iid"):
        train = D.mix_iid(train, seed)
    return train, val, test


def preprocess(ds: D.FederatedDataset, cfg: dict):
    """Filter, subsample and split; returns ``(train, val, test)``."""
    return split_devices(select_devices(ds, cfg), cfg)


def _model_spec(cfg: dict, ds: D.FederatedDataset) -> M.ModelSpec:
    m = cfg["model"]
    hidden = m.get("hidden_dim", 0) if m["kind"] == "one_hidden" else 0
    return M.ModelSpec(m["kind"], ds.feature_dim, ds.num_classes, hidden)


def run_experiment(config: dict, out: str | os.PathLike | IO[str] | None = None,
                   workers: int | None = None) -> list[dict]:
    """Run one experiment; returns the record lines and writes them to ``out``.

    ``workers`` overrides ``config["workers"]`` without being echoed into the
    header, so runs that differ only in parallelism produce identical files.
    """
    cfg = normalize(config)
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    workers = cfg["workers"] if workers is None else workers

    records: list[dict] = [{"type": "header", "format": RECORD_FORMAT, "config": cfg}]
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        raw = load_data(cfg, workers)
        ds = select_devices(raw, cfg)
        train, val, test = split_devices(ds, cfg)
        records.append({
            "type": "data", "raw_devices": len(raw), "raw_samples": raw.total_samples,
            "num_devices": len(ds), "total_samples": ds.total_samples,
            "train_samples": train.total_samples, "val_samples": val.total_samples,
            "test_samples": test.total_samples,
        })
        spec = _model_spec(cfg, ds)
        init = M.init_params(spec, cfg["model"]["init"], cfg["model"]["init_std"], cfg["seed"])
        final = _train_and_evaluate(cfg, spec, init, train, val, test, records, pool)
    finally:
        if pool is not None:
            pool.shutdown()

    devices = []
    for uid, acc, n, *extra in final:
        row = {"device_id": uid, "n_test": n, "accuracy": acc}
        if ds.hierarchy and uid in ds.hierarchy:
            row["group"] = ds.hierarchy[uid]
        if extra:
            row["lr"] = extra[0]
        devices.append(row)
    records.append({"type": "final", "devices": devices})
    weighting = cfg["evaluation"]["weighting"]
    if devices:
        summary = summarize_accuracy([(d["device_id"], d["accuracy"], d["n_test"]) for d in devices],
                                     weighting)
        records.append({"type": "summary", **summary.as_dict()})

    if out is not None:
        write_record(records, out)
    return records


def _train_and_evaluate(cfg, spec, init, train, val, test, records, pool):
    algo = cfg["algorithm"]
    ev = cfg["evaluation"]
    if algo in ROUND_ALGORITHMS:
        fcfg = fed_config(cfg)
        state = F.FedState(spec, init, train, pool=pool)
        state = F.run_rounds(state, fcfg, algo, eval_data=test,
                             sink=lambda log: records.append({"type": "round", **log.as_dict()}))
        return F.evaluate_personalized(spec, state.params, train, test, ev["finetune_steps"],
                                       ev["finetune_batch"], ev["finetune_lr"], cfg["seed"], pool)
    if algo == "local":
        loc = cfg["local"]
        fitted = F.train_local(train, val, spec, loc["lr_grid"], loc["epochs"], loc["batch_size"],
                               cfg["seed"], init, pool)
        out = []
        for uid in test.device_ids:
            params, lr = fitted.get(uid, (init, None))
            out.append((uid, M.accuracy_top1(spec, params, test[uid].x, test[uid].y),
                        len(test[uid]), lr))
        return out
    g = cfg["global_iid"]
    params = F.train_global_iid(train, spec, g["epochs"], g["lr"], g["batch_size"], cfg["seed"], init)
    return F.evaluate_personalized(spec, params, train, test, ev["finetune_steps"],
                                   ev["finetune_batch"], ev["finetune_lr"], cfg["seed"], pool)


def write_record(records: list[dict], out) -> None:
    text = "".join(_dumps(r) + "\n" for r in records)
    if hasattr(out, "write"):
        out.write(text)
    else:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)


def read_record(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not a JSON record ({exc.msg})") from None
            if not isinstance(rec, dict) or "type" not in rec:
                raise FormatError(f"{path}:{lineno}: record lacks a 'type' field")
            if not records and rec["type"] != "header":
                raise FormatError(f"{path}:{lineno}: first record must be the header")
            if rec["type"] == "round":
                prev = [r["round"] for r in records if r["type"] == "round"]
                if prev and rec.get("round", -1) <= prev[-1]:
                    raise FormatError(f"{path}:{lineno}: round indices must increase")
            records.append(rec)
    if not records:
        raise FormatError(f"{path}: empty record")
    return records


ROUND_COLUMNS = ("round", "train_loss", "eval_acc", "cumulative_flops",
                 "cumulative_bytes_up", "cumulative_bytes_down")
DEVICE_COLUMNS = ("device_id", "n_test", "accuracy")
SUMMARY_COLUMNS = ("weighting", "n_devices", "mean", "p10", "p25", "p50", "p75", "p90")


def export_csv(record_path, kind: str, out_path) -> int:
    """Write one CSV view of a record; returns the number of data rows."""
    records = read_record(record_path)
    rows: list[list] = []
    if kind == "rounds":
        header = ROUND_COLUMNS
        for r in records:
            if r["type"] != "round":
                continue
            acc = ""
            if r.get("eval"):
                acc = repr(sum(a * n for _, a, n in r["eval"]) / sum(n for _, _, n in r["eval"]))
            rows.append([r["round"], repr(r["train_loss"]), acc, r["cumulative_flops"],
                         r["cumulative_bytes_up"], r["cumulative_bytes_down"]])
    elif kind == "devices":
        header = DEVICE_COLUMNS
        for r in records:
            if r["type"] == "final":
                rows += [[d["device_id"], d["n_test"], repr(d["accuracy"])] for d in r["devices"]]
    elif kind == "summary":
        header = SUMMARY_COLUMNS
        for r in records:
            if r["type"] == "summary":
                rows.append([r[c] if c in ("weighting", "n_devices") else repr(r[c])
                             for c in SUMMARY_COLUMNS])
    else:
        raise ValueError(f"unknown export kind {kind!r}")
    with open(out_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return len(rows)
