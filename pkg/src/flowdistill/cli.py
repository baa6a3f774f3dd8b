"""Command-line entry point.

Every option is a flat key. Values come from command-line flags, then from a
``key = value`` config file given with ``--config``, then from defaults. The
merged view is echoed to ``effective_config.txt`` in the output directory and
can be fed back through ``--config`` to rerun the command.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, generate_synthetic, load_dataset, write_dataset
from .evaluation import ablation_suite, scaling_benchmark, training_ratio_sweep, write_report
from .exceptions import ContractError, FlowDistillError, FormatError
from .losses import LossWeights
from .metrics import evaluate_predictions
from .model import predict
from .pipeline import SplitSpec, model_config_for, neighbors_for, prepare
from .teacher import (
    FileTeacher,
    OracleConfig,
    OracleTeacher,
    TeacherPredictions,
    export_instruction_prompts,
    oracle_teacher,
    read_region_info,
    save_predictions,
)
from .train import TrainConfig, format_log, load_checkpoint, save_checkpoint, train

COMMANDS = ("generate", "train", "evaluate", "predict", "sweep", "ablate", "export-prompts", "bench")
NEEDS_DATA = {"train", "evaluate", "predict", "sweep", "ablate", "export-prompts"}
USES_TEACHER = {"train", "sweep", "ablate"}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {text!r}") from None


def _opt_str(text: str):
    return text or None


# key -> (type, default)
OPTIONS: dict[str, tuple] = {
    "data": (_opt_str, None),
    "teacher": (_opt_str, None),
    "ckpt": (_opt_str, None),
    "out": (str, "out"),
    "seed": (int, 0),
    # split and windows
    "train_ratio": (float, 0.1),
    "val_ratio": (float, 0.1),
    "test_ratio": (float, 0.1),
    "H_in": (int, 12),
    "H_out": (int, 12),
    "stride": (int, 1),
    "neighbor_mode": (str, "adjacency"),
    # model
    "d": (int, 64),
    "L": (int, 3),
    "K": (int, 64),
    "latent_noise_mode": (str, "std"),
    "activation": (str, "relu"),
    # optimization
    "lr0": (float, 0.0055),
    "decay": (float, 0.6),
    "decay_every": (int, 5),
    "batch_size": (int, 80),
    "max_epochs": (int, 50),
    "patience": (int, 10),
    "clip_norm": (float, 5.0),
    "stochastic_latent": (_bool, True),
    # loss
    "lambda_tbl": (float, 0.10),
    "delta": (float, 10.0),
    "lambda_kl": (float, 1e-3),
    "lambda_spa": (float, 0.6),
    "lambda_tem": (float, 0.35),
    "H": (int, 12),
    "K_r": (int, 8),
    "granularity": (str, "element"),
    "tbl_variant": (str, "paper-literal"),
    # oracle teacher, used when teacher = oracle
    "oracle_noise": (float, 0.5),
    "oracle_bias": (float, 0.0),
    # synthetic data
    "synth_n": (int, 16),
    "synth_t": (int, 2000),
    "synth_channels": (int, 2),
    "synth_interval": (int, 30),
    "synth_noise": (float, 2.0),
    "write_teacher": (_bool, False),
    # sweep / ablate
    "ratios": (str, "0.1,0.3,0.5"),
    "seeds": (int, 3),
    # prompts
    "prompt_split": (str, "test"),
    "prompt_limit": (int, 0),
    "region_info": (_opt_str, None),
    "city": (str, "the city"),
    # bench
    "repetitions": (int, 5),
    "bench_windows": (int, 64),
}


class UsageError(Exception):
    """Bad command line or config file; exit status 2."""


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in OPTIONS:
            raise UsageError(f"unknown config key {key!r} ({path}:{lineno})")
        values[key] = value
    return values


def _convert(key: str, text: str):
    kind = OPTIONS[key][0]
    try:
        return kind(text)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid value for {key}: {text!r} ({exc})") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdistill", description="Teacher-student traffic flow forecasting.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for key in OPTIONS:
        flag = "--" + key.replace("_", "-")
        names = [flag] if flag == "--" + key else [flag, "--" + key]
        parser.add_argument(*names, dest=key, default=argparse.SUPPRESS, metavar=key.upper())
    return parser


def parse_config(argv) -> tuple[str, dict, bool]:
    """Return ``(command, effective config, verbose)``; raises :class:`UsageError`."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:  # --help
            raise
        raise UsageError("invalid command line") from None
    given = vars(args)
    command, verbose, config_path = given.pop("command"), given.pop("verbose"), given.pop("config", None)
    cfg = {key: default for key, (_, default) in OPTIONS.items()}
    if config_path:
        cfg.update({k: _convert(k, v) for k, v in read_config_file(config_path).items()})
    cfg.update({k: _convert(k, v) for k, v in given.items()})
    if command in NEEDS_DATA and not cfg["data"]:
        raise UsageError(f"{command} requires --data")
    return command, cfg, verbose


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_effective_config(cfg: dict, command: str, out_dir: Path) -> Path:
    lines = [f"# flowdistill {command}"] + [f"{k} = {_format_value(cfg[k])}" for k in OPTIONS]
    path = out_dir / "effective_config.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- config views


def split_spec(cfg) -> SplitSpec:
    return SplitSpec(cfg["train_ratio"], cfg["val_ratio"], cfg["test_ratio"], cfg["H_in"], cfg["H_out"],
                     cfg["stride"])


def loss_weights(cfg) -> LossWeights:
    return LossWeights(lambda_tbl=cfg["lambda_tbl"], delta=cfg["delta"], lambda_kl=cfg["lambda_kl"],
                       lambda_spa=cfg["lambda_spa"], lambda_tem=cfg["lambda_tem"], H=cfg["H"], K_r=cfg["K_r"],
                       granularity=cfg["granularity"], tbl_variant=cfg["tbl_variant"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(lr0=cfg["lr0"], decay=cfg["decay"], decay_every=cfg["decay_every"],
                       batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                       seed=cfg["seed"], clip_norm=cfg["clip_norm"], stochastic_latent=cfg["stochastic_latent"],
                       weights=loss_weights(cfg))


def model_overrides(cfg) -> dict:
    return {"d": cfg["d"], "L": cfg["L"], "K": cfg["K"], "latent_noise_mode": cfg["latent_noise_mode"],
            "activation": cfg["activation"]}


def _oracle_config(cfg, series, seed) -> OracleConfig:
    return OracleConfig(noise_std=cfg["oracle_noise"] * float(series.values.std()), bias=cfg["oracle_bias"],
                        seed=seed)


def teacher_factory(cfg, series, fingerprint):
    """Callable seed -> teacher provider, or None when no teacher is configured."""
    source = cfg["teacher"]
    if source is None:
        return None
    if source == "oracle":
        return lambda seed: OracleTeacher(_oracle_config(cfg, series, seed))
    return lambda seed: FileTeacher(source, fingerprint)


# ---------------------------------------------------------------- commands


class Runner:
    def __init__(self, command: str, cfg: dict, out: Path):
        self.command, self.cfg, self.out = command, cfg, out
        self.stage = "setup"

    def at(self, stage: str):
        self.stage = stage
        logging.getLogger(__name__).info("stage: %s", stage)

    def load(self):
        self.at("load data")
        series, graph = load_dataset(self.cfg["data"])
        neighbors = neighbors_for(series, graph, self.cfg["K_r"], self.cfg["neighbor_mode"])
        return series, neighbors

    def run(self):
        return getattr(self, "cmd_" + self.command.replace("-", "_"))()

    def cmd_generate(self):
        cfg = self.cfg
        self.at("generate")
        synth = SynthConfig(n_regions=cfg["synth_n"], n_steps=cfg["synth_t"], n_channels=cfg["synth_channels"],
                            interval_minutes=cfg["synth_interval"], noise_std=cfg["synth_noise"], seed=cfg["seed"])
        series, _, _ = generate_synthetic(synth)
        self.at("write dataset")
        write_dataset(series, self.out)
        if cfg["write_teacher"]:
            self.at("write teacher")
            data = prepare(series, split_spec(cfg))
            pred = oracle_teacher(data.train.targets, _oracle_config(cfg, series, cfg["seed"]), data.fingerprint)
            save_predictions(pred, self.out / "teacher.fdtp")

    def cmd_train(self):
        cfg = self.cfg
        series, neighbors = self.load()
        self.at("prepare")
        spec, tcfg = split_spec(cfg), train_config(cfg)
        data = prepare(series, spec)
        model_cfg = model_config_for(series, spec, **model_overrides(cfg))
        teacher = None
        if tcfg.weights.needs_teacher:
            self.at("load teacher")
            teacher = teacher_factory(cfg, series, data.fingerprint)(cfg["seed"])(data.train)
        resume = None
        if cfg["ckpt"]:
            self.at("load checkpoint")
            resume = load_checkpoint(cfg["ckpt"], model_cfg)
        self.at("train")
        result = train(data.train, data.val, model_cfg, tcfg, norm=data.norm, neighbor_lists=neighbors,
                       teacher=teacher, resume=resume, checkpoint_dir=self.out)
        self.at("write outputs")
        save_checkpoint(result.best, self.out / "best.fdck")
        save_checkpoint(result.last, self.out / "last.fdck")
        (self.out / "train_log.csv").write_text(format_log(result.log), encoding="utf-8")
        summary = {"best_val_mae": result.best.best_val_mae, "epochs": len(result.log),
                   "fingerprint": f"{data.fingerprint:#018x}"}
        (self.out / "train_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        print(f"best validation MAE {result.best.best_val_mae:.4f} after {len(result.log)} epochs")

    def _checkpoint_and_data(self):
        cfg = self.cfg
        if not cfg["ckpt"]:
            raise UsageError(f"{self.command} requires --ckpt")
        series, neighbors = self.load()
        self.at("prepare")
        spec = split_spec(cfg)
        data = prepare(series, spec)
        self.at("load checkpoint")
        # the architecture comes from the checkpoint; only the data-dependent shape must agree
        ckpt = load_checkpoint(cfg["ckpt"])
        expected = model_config_for(series, spec)
        for field in ("n_regions", "n_channels", "T1", "T2", "H_in", "H_out"):
            want, got = getattr(expected, field), getattr(ckpt.model_cfg, field)
            if want != got:
                raise FormatError(f"{cfg['ckpt']}: checkpoint has {field}={got}, dataset needs {want}")
        return data, neighbors, ckpt

    def cmd_evaluate(self):
        data, neighbors, ckpt = self._checkpoint_and_data()
        self.at("predict")
        pred = predict(data.test, ckpt.params, ckpt.model_cfg, ckpt.norm)
        self.at("evaluate")
        report = evaluate_predictions(pred, data.test.targets, neighbors)
        doc = report.to_dict()
        rows = doc.pop("horizon")
        write_report(self.out, self.cfg, rows, extra={"metrics": doc})
        print(f"test MAE {report.mae:.4f} RMSE {report.rmse:.4f}")

    def cmd_predict(self):
        data, _, ckpt = self._checkpoint_and_data()
        self.at("predict")
        pred = predict(data.test, ckpt.params, ckpt.model_cfg, ckpt.norm)
        self.at("write outputs")
        save_predictions(TeacherPredictions(pred, data.fingerprint), self.out / "predictions.fdtp")
        np.savetxt(self.out / "window_starts.csv", data.test.window_start, fmt="%d")

    def _ratios(self):
        try:
            ratios = [float(r) for r in self.cfg["ratios"].split(",") if r.strip()]
        except ValueError:
            raise UsageError(f"invalid value for ratios: {self.cfg['ratios']!r}") from None
        if not ratios:
            raise UsageError("ratios must list at least one value")
        return ratios

    def _seeds(self):
        if self.cfg["seeds"] < 1:
            raise UsageError("seeds must be >= 1")
        return list(range(self.cfg["seed"], self.cfg["seed"] + self.cfg["seeds"]))

    def cmd_sweep(self):
        cfg = self.cfg
        ratios, seeds = self._ratios(), self._seeds()
        series, neighbors = self.load()
        self.at("sweep")
        # the fingerprint of a file teacher depends on the split, so only oracle teachers vary with the ratio
        factory = teacher_factory(cfg, series, None)
        res = training_ratio_sweep(series, neighbors, ratios, train_config(cfg), seeds, teacher_for_seed=factory,
                                   model_overrides=model_overrides(cfg), spec=split_spec(cfg))
        self.at("write outputs")
        write_report(self.out, cfg, res["rows"], extra={"summary": res["summary"]})
        (self.out / "table.csv").write_text(res["table"], encoding="utf-8")
        print(res["table"], end="")

    def cmd_ablate(self):
        cfg = self.cfg
        seeds = self._seeds()
        series, neighbors = self.load()
        self.at("prepare")
        data = prepare(series, split_spec(cfg))
        self.at("ablate")
        res = ablation_suite(series, neighbors, train_config(cfg), seeds,
                             teacher_for_seed=teacher_factory(cfg, series, data.fingerprint),
                             model_overrides=model_overrides(cfg), spec=split_spec(cfg))
        self.at("write outputs")
        write_report(self.out, cfg, res["rows"], extra={"summary": res["summary"]})
        (self.out / "table.csv").write_text(res["table"], encoding="utf-8")
        print(res["table"], end="")

    def cmd_export_prompts(self):
        cfg = self.cfg
        series, _ = self.load()
        self.at("prepare")
        data = prepare(series, split_spec(cfg))
        if cfg["prompt_split"] not in ("train", "val", "test"):
            raise UsageError(f"invalid value for prompt_split: {cfg['prompt_split']!r}")
        starts = getattr(data.split, cfg["prompt_split"])
        if cfg["prompt_limit"] > 0:
            starts = starts[: cfg["prompt_limit"]]
        info = None
        if cfg["region_info"]:
            self.at("load region info")
            info = read_region_info(cfg["region_info"])
        self.at("export prompts")
        paths = export_instruction_prompts(series, starts, self.out / "prompts", cfg["H_in"], cfg["H_out"],
                                           info, cfg["city"])
        print(f"wrote {len(paths)} prompt files")

    def cmd_bench(self):
        cfg = self.cfg
        self.at("bench")
        res = scaling_benchmark(base_regions=cfg["synth_n"], repetitions=cfg["repetitions"],
                                n_windows=cfg["bench_windows"], seed=cfg["seed"],
                                model_overrides=model_overrides(cfg), spec=split_spec(cfg))
        self.at("write outputs")
        rows = res.pop("rows")
        write_report(self.out, cfg, rows, extra=res)
        if res.get("warning"):
            print("warning: " + res["warning"], file=sys.stderr)
        print(f"region exponent {res['region_exponent']:.3f}, 2x test-size ratio {res['test_size_ratio_2x']:.3f}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg, verbose = parse_config(argv)
        if command in USES_TEACHER and cfg["lambda_tbl"] > 0 and not cfg["teacher"]:
            raise UsageError("teacher required: lambda_tbl > 0 but no --teacher given (a path or 'oracle')")
        # build the typed views early so bad values count as usage errors
        split_spec(cfg), train_config(cfg)
    except UsageError as exc:
        print(f"flowdistill: error: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"flowdistill: error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, command, out)
    runner = Runner(command, cfg, out)
    try:
        runner.run()
    except UsageError as exc:
        print(f"flowdistill: error: {exc}", file=sys.stderr)
        return 2
    except (FlowDistillError, OSError, ValueError, ArithmeticError) as exc:
        print(f"flowdistill: {command} failed during stage '{runner.stage}': {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
