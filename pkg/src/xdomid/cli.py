"""``xdomid`` command line: synth-data, preprocess, pretrain, train, eval, ablate, plot-cmc.

Every command writes into ``--out``: a ``config.txt`` echo of the fully
resolved configuration (a valid ``--config`` file for re-running), plus its
own artifacts.  Values resolve as defaults < config file < flags.

Errors print one line ``xdomid: error: <kind>: <message>`` on stderr and exit
nonzero (2 for usage/config problems, 1 for everything else).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from . import evaluation as E
from . import protocol as P
from . import synthdata as S
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .networks import DIRECTIONS

COMMANDS = ("synth-data", "preprocess", "pretrain", "train", "eval", "ablate", "plot-cmc")
SCENARIOS = {"1": "v_to_t", "2": "t_to_v"}


@dataclass
class RunConfig:
    """Resolved settings for one command.  List-valued fields are comma separated."""

    command: str = ""
    manifest: str = ""  # synthetic or user manifest (JSON lines)
    data: str = ""  # directory written by ``preprocess``
    out: str = "run"
    checkpoint: str = ""
    direction: str = "v_to_t"  # scenario 1 = v_to_t, scenario 2 = t_to_v
    lam: float = 0.25
    seed: int = 0
    crop: int = 64
    depth: int = 3
    blocks: str = "8,16,32,64"
    pretrain_epochs: int = 8
    epochs: int = 4  # adaptation / DPM epochs
    batch_size: int = 16
    lr: float = 1e-3
    alternation: str = "1,3,1"
    method: str = "proposed"  # train: proposed|dpm; eval: proposed|dpm|none
    conditions: str = ""  # eval probe filter; empty = every probe
    subjects: int = 60
    images_per_domain: int = 4
    n_train: int = 30
    n_gallery: int = 30
    templates: int = 4
    depths: str = "1,2,3,4"
    methods: str = ",".join(P.ABLATION_METHODS)
    lams: str = "0,0.25"
    seeds: str = "0"
    cmc: str = ""  # plot-cmc input CSV(s)

    def echo(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def protocol(self) -> P.ProtocolConfig:
        return P.ProtocolConfig(
            n_train=self.n_train,
            n_gallery=self.n_gallery,
            templates=self.templates,
            crop=self.crop,
            blocks=_ints(self.blocks, "blocks"),
            depth=self.depth,
            pretrain_epochs=self.pretrain_epochs,
            adapt_epochs=self.epochs,
            dpm_epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            alternation=_ints(self.alternation, "alternation"),
        )


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = 1):
        super().__init__(message)
        self.kind = kind
        self.status = status


def _ints(text: str, name: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise CliError("config", f"{name}: expected comma-separated integers, got {text!r}", 2) from None


def _floats(text: str, name: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise CliError("config", f"{name}: expected comma-separated numbers, got {text!r}", 2) from None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise CliError("config", f"{key}: cannot parse {value!r} as {kind}", 2) from None
    return value


def read_config(path: str | Path) -> dict:
    """Parse a ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CliError("config", f"cannot read config {path}: {e.strerror}", 2) from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{n}: expected key=value, got {line!r}", 2)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise CliError("config", f"{path}:{n}: unknown key {key!r}", 2)
        out[key] = _coerce(key, value)
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        raise CliError("usage", message, 2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key=value file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")

    parser = _Parser(prog="xdomid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, argument_default=argparse.SUPPRESS)

    def model_flags(p):
        p.add_argument("--crop", type=int)
        p.add_argument("--depth", type=int)
        p.add_argument("--blocks", help="trunk widths, e.g. 8,16,32,64")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--lr", type=float)

    def direction_flags(p):
        p.add_argument("--direction", choices=DIRECTIONS)
        p.add_argument("--scenario", choices=sorted(SCENARIOS), help="1 = v_to_t, 2 = t_to_v")

    p = add("synth-data", "render a synthetic paired visible/thermal dataset")
    p.add_argument("--subjects", type=int)
    p.add_argument("--images-per-domain", type=int, dest="images_per_domain")

    p = add("preprocess", "align, filter and split a manifest")
    p.add_argument("--manifest")
    p.add_argument("--crop", type=int)
    for k in ("n_train", "n_gallery", "templates"):
        p.add_argument("--" + k.replace("_", "-"), type=int, dest=k)

    p = add("pretrain", "within-domain identity pretraining of the target trunk")
    p.add_argument("--data")
    model_flags(p)
    direction_flags(p)
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")

    p = add("train", "adapt a pretrained bundle (proposed) or fit the DPM baseline")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--epochs", type=int)
    p.add_argument("--alternation", help="steps per batch for theta,rst,detector")
    p.add_argument("--method", choices=("proposed", "dpm"))
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    direction_flags(p)

    p = add("eval", "score probes against the enrolled gallery")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=E.METHODS)
    p.add_argument("--conditions", help="comma-separated probe conditions (default: all)")
    direction_flags(p)

    p = add("ablate", "rank-1 over truncation depth x feature method x lambda")
    p.add_argument("--manifest")
    model_flags(p)
    direction_flags(p)
    for k in ("depths", "methods", "lams", "seeds", "conditions"):
        p.add_argument("--" + k)
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--epochs", type=int)

    p = add("plot-cmc", "draw CMC CSV files as an SVG line chart")
    p.add_argument("--cmc", help="comma-separated CMC CSV paths")
    return parser


def resolve(argv: Sequence[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(list(argv)))
    values = {}
    if "config" in ns:
        values.update(read_config(ns.pop("config")))
    scenario = ns.pop("scenario", None)
    if scenario is not None:
        d = SCENARIOS[scenario]
        if "direction" in ns and ns["direction"] != d:
            raise CliError("config", f"--scenario {scenario} means {d}, but --direction is {ns['direction']}", 2)
        ns["direction"] = d
    values.update(ns)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        raise CliError("config", f"unknown command {cfg.command!r}", 2)
    if cfg.direction not in DIRECTIONS:
        raise CliError("config", f"direction must be one of {DIRECTIONS}, got {cfg.direction!r}", 2)
    blocks = _ints(cfg.blocks, "blocks")
    if not 1 <= cfg.depth <= len(blocks):
        raise CliError("config", f"depth {cfg.depth} outside 1..{len(blocks)} for blocks {cfg.blocks}", 2)
    if cfg.crop < 1 or cfg.crop % (2**cfg.depth):
        raise CliError("config", f"crop {cfg.crop} is not divisible by 2^depth = {2 ** cfg.depth}", 2)
    if not 0.0 <= cfg.lam <= 1.0:
        raise CliError("config", f"lambda must lie in [0, 1], got {cfg.lam}", 2)
    if cfg.batch_size < 1 or cfg.epochs < 0 or cfg.pretrain_epochs < 0:
        raise CliError("config", "batch_size must be >= 1 and epoch counts >= 0", 2)
    _ints(cfg.alternation, "alternation")


def _need(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            flag = "--" + name.replace("_", "-")
            raise CliError("usage", f"{cfg.command} requires {flag}", 2)


def _load_data(cfg: RunConfig) -> P.PreparedData:
    try:
        return P.load_prepared(cfg.data)
    except FileNotFoundError as e:
        raise CliError("data", str(e)) from None


def _load_bundle(cfg: RunConfig, direction: str | None):
    try:
        return load_checkpoint(cfg.checkpoint, direction)
    except FileNotFoundError:
        raise CliError("checkpoint", f"{cfg.checkpoint} not found") from None
    except CheckpointError as e:
        raise CliError("checkpoint", str(e)) from None


# ---------------------------------------------------------------- commands


def cmd_synth_data(cfg: RunConfig, out: Path) -> None:
    m = S.generate(cfg.subjects, cfg.images_per_domain, S.CONDITIONS, out, cfg.seed)
    print(f"wrote {len(m)} images and {out / 'manifest.jsonl'}")


def cmd_preprocess(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "manifest")
    manifest = S.load_manifest(cfg.manifest)
    data = P.prepare(manifest, cfg.protocol(), cfg.seed)
    P.save_prepared(data, out)
    print(
        f"train {len(data.train_images)} images / {data.n_classes} subjects, "
        f"gallery {len(data.gallery_images)}, probes {len(data.probe_images)}"
    )


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "data")
    data = _load_data(cfg)
    if data.train_images.shape[1] != cfg.crop:
        raise CliError("config", f"data crop is {data.train_images.shape[1]}, config crop is {cfg.crop}", 2)
    bundle, report = P.pretrain(data, cfg.protocol(), cfg.direction, cfg.seed)
    bundle.metadata.update({"stage": "pretrain", "seed": cfg.seed})
    save_checkpoint(bundle, out / "pretrain.ckpt")
    report.write(out / "pretrain_log.txt", out / "pretrain_summary.txt")
    print(f"train accuracy {report.losses['train_acc'][-1]:.4f}; checkpoint {out / 'pretrain.ckpt'}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "data", "checkpoint")
    data = _load_data(cfg)
    pre = _load_bundle(cfg, cfg.direction)
    pcfg = cfg.protocol()
    if cfg.method == "dpm":
        bundle, report = P.fit_dpm(pre, data, pcfg, cfg.seed)
    else:
        bundle, report = P.adapt(pre, data, pcfg, cfg.lam, cfg.seed)
    bundle.metadata.update({"stage": "train", "method": cfg.method, "lambda": cfg.lam, "seed": cfg.seed})
    save_checkpoint(bundle, out / "model.ckpt")
    report.write(out / "train_log.txt", out / "train_summary.txt")
    print(f"checkpoint {out / 'model.ckpt'}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "checkpoint", "data")
    bundle = _load_bundle(cfg, cfg.direction)
    data = _load_data(cfg)
    conds = [c for c in cfg.conditions.split(",") if c] or None
    result = P.evaluate(bundle, data, cfg.method, conds)
    E.write_cmc_csv(result, out / "cmc.csv")
    (out / "cmc.svg").write_text(E.cmc_svg({cfg.method: result.rates}), encoding="utf-8")
    ks = [k for k in (1, 5, 10) if k <= len(result.rates)]
    (out / "metrics.csv").write_text(
        "metric,value\n" + f"probes,{result.probe_count}\n" + "".join(f"rank{k},{result.rate(k):.6f}\n" for k in ks),
        encoding="utf-8",
    )
    print(f"rank-1 {result.rank1:.4f} over {result.probe_count} probes")


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "manifest")
    manifest = S.load_manifest(cfg.manifest)
    methods = [m for m in cfg.methods.split(",") if m]
    try:
        rows = P.ablate(
            manifest,
            cfg.protocol(),
            depths=_ints(cfg.depths, "depths"),
            methods=methods,
            lams=_floats(cfg.lams, "lams"),
            seeds=_ints(cfg.seeds, "seeds"),
            direction=cfg.direction,
            conditions=[c for c in cfg.conditions.split(",") if c] or None,
        )
    except ValueError as e:
        raise CliError("config", str(e), 2) from None
    P.write_ablation_csv(rows, out / "ablation.csv")
    med = P.ablation_medians(rows)
    lines = ["depth,method,lambda,median_rank1"] + [
        f"{d},{m},{'' if lam is None else f'{lam:g}'},{v:.6f}" for (d, m, lam), v in med.items()
    ]
    (out / "ablation_medians.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        print(line)


def cmd_plot_cmc(cfg: RunConfig, out: Path) -> None:
    _need(cfg, "cmc")
    curves = {}
    for path in [p for p in cfg.cmc.split(",") if p]:
        try:
            curves[str(Path(path).parent.name or Path(path).stem)] = E.read_cmc_csv(path)
        except OSError as e:
            raise CliError("data", f"cannot read {path}: {e.strerror}") from None
        except ValueError as e:
            raise CliError("data", str(e)) from None
    (out / "cmc.svg").write_text(E.cmc_svg(curves), encoding="utf-8")
    print(f"wrote {out / 'cmc.svg'}")


HANDLERS = {
    "synth-data": cmd_synth_data,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot-cmc": cmd_plot_cmc,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = resolve(argv)
        out = Path(cfg.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise CliError("io", f"cannot create output directory {out}: {e.strerror}") from None
        (out / "config.txt").write_text(cfg.echo(), encoding="utf-8")
        HANDLERS[cfg.command](cfg, out)
    except CliError as e:
        print(f"xdomid: error: {e.kind}: {e}", file=sys.stderr)
        return e.status
    except (ValueError, OSError) as e:
        msg = " ".join(str(e).split())
        print(f"xdomid: error: {type(e).__name__.lower()}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
