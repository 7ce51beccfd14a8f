"""Command line for the trajectory, model, replay and delay tools.

Option values resolve as built-in default < ``--config`` JSON < explicit flag.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import sys
import threading
import time
import warnings
from pathlib import Path

import numpy as np

from . import delay, geo_data, metrics, mlp, stream, svr
from .errors import TwinSyncError

DEFAULTS = {
    "output": ".",
    "model": "both",
    "seed": 42,
    "ratio": 0.8,
    "c": 10.0,
    "epsilon": 0.01,
    "sigma": 1.0,
    "tol": 1e-3,
    "max_passes": 1_000_000,
    "subsample": 2000,
    "epochs": 1000,
    "batch": 32,
    "lr": 1e-3,
    "momentum": 0.0,
    "time_scale": 1.0,
    "space": "degrees",
    "vehicles": 5,
    "samples": 1000,
    "capacity": 1024,
    "max_messages": None,
    "tcp_sink": None,
    "models": None,
    "n": None,
}

MODEL_FILES = {
    "standardizer": "standardizer.json",
    "svr_lat": "svr_lat.json",
    "svr_lon": "svr_lon.json",
    "dnn": "mlp.json",
}


class StageFailure(Exception):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageFailure:
        raise
    except (TwinSyncError, OSError, ValueError, KeyError) as exc:
        raise StageFailure(name, exc) from exc


def _resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg["output_given"] = False
    if getattr(args, "config", None):
        with stage("config"):
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
            if not isinstance(loaded, dict):
                raise ValueError("config file must hold a JSON object")
            cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
            cfg["output_given"] = "output" in cfg and "output" in loaded
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            cfg[k] = v
    if args.output is not None:
        cfg["output_given"] = True
    cfg["command"] = args.command
    return cfg


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _selected(cfg) -> tuple:
    return ("svr", "dnn") if cfg["model"] == "both" else (cfg["model"],)


def _echo_config(cfg) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in ("command", "output_given")}


# --- commands ---------------------------------------------------------------

def cmd_gen_data(cfg) -> int:
    with stage("generate"):
        data = geo_data.generate_synthetic_trajectories(
            int(cfg["vehicles"]), int(cfg["samples"]), int(cfg["seed"]))
    with stage("write"):
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        path = out / "trajectories.csv"
        geo_data.write_trajectory_csv(data, path)
    print(json.dumps({"records": len(data), "path": str(path), "config": _echo_config(cfg)}))
    return 0


def _svr_hp(cfg) -> svr.SvrHyperparams:
    return svr.SvrHyperparams(c=float(cfg["c"]), epsilon=float(cfg["epsilon"]),
                              sigma=float(cfg["sigma"]), tol=float(cfg["tol"]),
                              max_passes=int(cfg["max_passes"]))


def _mlp_config(cfg) -> mlp.MlpConfig:
    return mlp.MlpConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch"]),
                         learning_rate=float(cfg["lr"]), momentum=float(cfg["momentum"]),
                         seed=int(cfg["seed"]))


def _report(actual_deg, pred_std, std, actual_std, space) -> metrics.MetricsReport:
    if space == "standardized":
        return metrics.evaluate(actual_std, pred_std)
    return metrics.evaluate(actual_deg, geo_data.inverse_transform_targets(std, pred_std))


def _write_metrics(out: Path, prefix: str, reports: dict, cfg, meta) -> None:
    lines = ["model,mae,mse,r2,n"]
    for name, rep in reports.items():
        _dump({"model": name, "space": cfg["space"], "report": rep.to_dict(),
               "config": _echo_config(cfg), "meta": meta}, out / f"{prefix}_{name}.json")
        lines.append(f"{name},{rep.to_csv_line()}")
    (out / f"{prefix}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(cfg) -> int:
    started = time.time()
    with stage("load"):
        data = geo_data.parse_trajectory_csv(cfg["input"])
    with stage("split"):
        split = geo_data.split_dataset(data, float(cfg["ratio"]), int(cfg["seed"]))
        std = geo_data.fit_standardizer(split.train)
        Xt, Yt = geo_data.transform(std, split.train)
        Xv, Yv = geo_data.transform(std, split.validation)
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    std.save(out / MODEL_FILES["standardizer"])
    reports = {}
    if "svr" in _selected(cfg):
        with stage("train-svr"):
            idx = np.arange(Xt.shape[0])
            sub = cfg["subsample"]
            if sub and int(sub) < Xt.shape[0]:
                rng = np.random.default_rng(int(cfg["seed"]))
                idx = np.sort(rng.choice(Xt.shape[0], int(sub), replace=False))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                pair = svr.train_dual_svr(Xt[idx], Yt[idx], _svr_hp(cfg), lenient=True)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            pair.lat_model.save(out / MODEL_FILES["svr_lat"])
            pair.lon_model.save(out / MODEL_FILES["svr_lon"])
            reports["svr"] = _report(split.validation.targets(), pair.predict(Xv), std, Yv,
                                     cfg["space"])
    if "dnn" in _selected(cfg):
        with stage("train-dnn"):
            model, history = mlp.train_mlp(Xt, Yt, _mlp_config(cfg))
            model.save(out / MODEL_FILES["dnn"])
            history.write_csv(out / "mlp_history.csv")
            reports["dnn"] = _report(split.validation.targets(), mlp.forward(model, Xv), std, Yv,
                                     cfg["space"])
    with stage("report"):
        _write_metrics(out, "metrics", reports, cfg, {"wall_time_s": time.time() - started})
    print(json.dumps({k: r.to_dict() for k, r in reports.items()}))
    return 0


def _load_models(models_dir, which) -> dict:
    d = Path(models_dir)
    loaded = {"standardizer": geo_data.Standardizer.load(d / MODEL_FILES["standardizer"])}
    if "svr" in which:
        loaded["svr"] = svr.SvrPair(svr.SvrModel.load(d / MODEL_FILES["svr_lat"]),
                                    svr.SvrModel.load(d / MODEL_FILES["svr_lon"]))
    if "dnn" in which:
        loaded["dnn"] = mlp.MlpModel.load(d / MODEL_FILES["dnn"])
    return loaded


def _predict_std(models, name, X_std) -> np.ndarray:
    if name == "svr":
        return models["svr"].predict(X_std)
    return mlp.forward(models["dnn"], X_std)


def cmd_evaluate(cfg) -> int:
    started = time.time()
    which = _selected(cfg)
    with stage("load"):
        data = geo_data.parse_trajectory_csv(cfg["input"])
        models = _load_models(cfg["models"] or cfg["output"], which)
        std = models["standardizer"]
        X, Y = geo_data.transform(std, data)
    with stage("evaluate"):
        reports = {name: _report(data.targets(), _predict_std(models, name, X), std, Y,
                                 cfg["space"]) for name in which}
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    with stage("report"):
        _write_metrics(out, "evaluation", reports, cfg, {"wall_time_s": time.time() - started})
    print(json.dumps({k: r.to_dict() for k, r in reports.items()}))
    return 0


def _prediction_columns(models, data, which) -> dict:
    std = models["standardizer"]
    X = std.transform_features(data.features())
    cols = {c: [None] * len(data) for c in stream.PREDICTION_COLUMNS}
    for name in which:
        P = geo_data.inverse_transform_targets(std, _predict_std(models, name, X))
        cols[f"pred_{name}_lat"] = P[:, 0].tolist()
        cols[f"pred_{name}_lon"] = P[:, 1].tolist()
    return cols


def cmd_annotate(cfg) -> int:
    which = _selected(cfg)
    with stage("load"):
        data = geo_data.parse_trajectory_csv(cfg["input"])
        models = _load_models(cfg["models"] or cfg["output"], which)
    with stage("predict"):
        cols = _prediction_columns(models, data, which)
    with stage("write"):
        out = Path(cfg["output"])
        out.mkdir(parents=True, exist_ok=True)
        path = out / "annotated.csv"
        geo_data.write_trajectory_csv(data, path, extra_columns=cols)
    print(json.dumps({"records": len(data), "path": str(path)}))
    return 0


def cmd_replay(cfg) -> int:
    with stage("load"):
        messages = stream.load_annotated_messages(cfg["input"])
        has_preds = any(m.pred_svr_lat is not None or m.pred_dnn_lat is not None
                        for m in messages)
        if not has_preds and cfg["models"]:
            # predictions computed inline from the supplied models
            which = _selected(cfg)
            data = geo_data.parse_trajectory_csv(cfg["input"])
            cols = _prediction_columns(_load_models(cfg["models"], which), data, which)
            annotated = [
                stream.StreamMessage(ts=r.timestamp, vehicle_id=r.vehicle_id, lat=r.lat,
                                     lon=r.lon, **{c: cols[c][k] for c in cols})
                for k, r in enumerate(data.records)]
            messages = sorted(annotated, key=lambda m: m.ts)
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    with stage("replay"):
        broker = stream.create_broker(default_capacity=int(cfg["capacity"]))
        topic = broker.create_topic(stream.DEFAULT_TOPIC)
        consumer = topic.subscribe()
        received = []
        sinks = [received.append]
        tcp = None
        if cfg["tcp_sink"]:
            tcp = stream.TcpSink.from_spec(cfg["tcp_sink"])
            sinks.append(tcp)
        result = {}

        def consume():
            try:
                result["count"] = stream.run_consumer_loop(consumer, stream.tee(*sinks))
            except Exception as exc:  # surfaced in the main thread
                result["error"] = exc
                broker.close()

        worker = threading.Thread(target=consume, name="twinsync-consumer")
        worker.start()
        rcfg = stream.ReplayConfig(time_scale=float(cfg["time_scale"]),
                                   max_messages=cfg["max_messages"])
        try:
            summary = stream.replay_dataset(topic, messages, rcfg)
        except TwinSyncError:
            if "error" not in result:
                raise
            summary = None
        worker.join()
        if tcp is not None:
            tcp.close()
        if "error" in result:
            raise result["error"]
    with stage("export"):
        panels = stream.build_panel_export(received)
        panels.write(out)
        stream.write_ndjson(received, out / "stream.ndjson")
        _dump({"published": summary.count, "consumed": result["count"],
               "meta": {"wall_time_s": summary.wall_time_s}}, out / "replay.json")
    print(json.dumps({"published": summary.count, "consumed": result["count"]}))
    return 0


def cmd_delay_report(cfg) -> int:
    with stage("delay-report"):
        n_values = cfg["n"] or delay.DEFAULT_N_VALUES
        report = delay.delay_report([int(n) for n in n_values])
    if cfg.get("output_given"):
        with stage("write"):
            out = Path(cfg["output"])
            out.mkdir(parents=True, exist_ok=True)
            (out / "delay_report.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / "delay_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinsync", description=__doc__.splitlines()[0].rstrip("."))
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="JSON file mirroring flag names")
        sp.add_argument("--output", metavar="DIR")
        sp.add_argument("--seed", type=int, metavar="U64")

    def model_flags(sp):
        sp.add_argument("--model", choices=("svr", "dnn", "both"))
        sp.add_argument("--models", metavar="DIR", help="directory holding trained models")

    g = sub.add_parser("gen-data", help="write a synthetic trajectory CSV")
    common(g)
    g.add_argument("--vehicles", type=int)
    g.add_argument("--samples", type=int, help="samples per vehicle")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit standardizer and models, report validation metrics")
    common(t)
    t.add_argument("--input", metavar="PATH", required=True)
    t.add_argument("--model", choices=("svr", "dnn", "both"))
    t.add_argument("--ratio", type=float)
    t.add_argument("--c", type=float)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--sigma", type=float)
    t.add_argument("--tol", type=float)
    t.add_argument("--max-passes", dest="max_passes", type=int)
    t.add_argument("--subsample", type=int, help="SVR training subsample size (0 = all)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--space", choices=("degrees", "standardized"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score saved models on a CSV")
    common(e)
    e.add_argument("--input", metavar="PATH", required=True)
    model_flags(e)
    e.add_argument("--space", choices=("degrees", "standardized"))
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("annotate", help="append prediction columns to a CSV")
    common(a)
    a.add_argument("--input", metavar="PATH", required=True)
    model_flags(a)
    a.set_defaults(func=cmd_annotate)

    r = sub.add_parser("replay", help="stream an annotated CSV through the broker")
    common(r)
    r.add_argument("--input", metavar="PATH", required=True)
    model_flags(r)
    r.add_argument("--time-scale", dest="time_scale", type=float)
    r.add_argument("--tcp-sink", dest="tcp_sink", metavar="HOST:PORT")
    r.add_argument("--max-messages", dest="max_messages", type=int)
    r.add_argument("--capacity", type=int)
    r.set_defaults(func=cmd_replay)

    d = sub.add_parser("delay-report", help="print the witnessed-delay table")
    common(d)
    d.add_argument("--n", type=int, nargs="+", metavar="N")
    d.set_defaults(func=cmd_delay_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return args.func(cfg)
    except StageFailure as exc:
        print(f"twinsync {args.command}: error in stage {exc.stage!r}: {exc.cause}",
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
