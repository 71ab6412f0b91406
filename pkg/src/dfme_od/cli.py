"""Command-line entry point: ``dfme-od <subcommand> ...``.

Subcommands mirror the experiment workflow::

    gen-data -> train-victim -> serve-victim (optional) -> attack -> evaluate -> report

and ``run-all`` chains the whole pipeline from one JSON experiment config.
Everything a subcommand writes goes under the directory given by ``--out``;
when ``--out`` is omitted for ``run-all``/``attack`` a fresh directory is
created under ``$DFME_OUT_ROOT`` (default ``./runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import __version__, attack, data, evaluation, models, oracle

log = logging.getLogger("dfme_od")

OUT_ROOT_ENV = "DFME_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"


class UsageError(Exception):
    """Bad invocation detected after parsing (exit status 2)."""


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, DEFAULT_OUT_ROOT))


def fresh_dir(root: Path, stem: str) -> Path:
    """``root/stem``, or ``root/stem-N`` for the first N that does not exist yet."""
    path, n = root / stem, 1
    while path.exists():
        path = root / f"{stem}-{n}"
        n += 1
    return path


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from None


@dataclass
class EvalOptions:
    test_count: int = 100
    threshold: float = 0.5
    overlays: int = 8
    scatter_samples: int = 256


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: data.DatasetSpec = field(default_factory=data.DatasetSpec)
    victim_spec: str = "victim-a"
    victim_overrides: dict = field(default_factory=dict)
    victim_train: models.VictimTrainConfig = field(default_factory=models.VictimTrainConfig)
    attack: attack.AttackConfig = field(default_factory=attack.AttackConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    transport: str = "in-process"  # or "http": attack through a local wire-protocol server
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            d = dict(self.dataset)
            if "size_range" in d:
                d["size_range"] = tuple(d["size_range"])
            if "shapes" in d:
                d["shapes"] = tuple(d["shapes"])
            self.dataset = data.DatasetSpec(**d)
        if isinstance(self.victim_train, dict):
            self.victim_train = models.VictimTrainConfig(**self.victim_train)
        if isinstance(self.attack, dict):
            self.attack = attack.AttackConfig.from_dict(self.attack)
        if isinstance(self.eval, dict):
            self.eval = EvalOptions(**self.eval)

    def validate(self) -> None:
        self.dataset.validate()
        models.get_spec(self.victim_spec, **self.victim_overrides).validate()
        models.get_spec(self.attack.student_spec, **self.attack.student_overrides)
        models.get_spec(self.attack.generator_spec, **self.attack.generator_overrides)
        self.victim_train.validate()
        self.attack.validate()
        if self.transport not in ("in-process", "http"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if not 0 < self.eval.test_count < self.dataset.count:
            raise ValueError("eval.test_count must leave some training images")

    def with_seed(self, seed: int) -> None:
        """The global seed drives victim initialization/training and the attack."""
        self.seed = seed
        self.victim_train.seed = seed
        self.attack.seed = seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = self.attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# building blocks shared by the subcommands

def train_victim_from_dir(data_dir, spec_name: str, cfg: models.VictimTrainConfig, test_count: int,
                          overrides: dict | None = None):
    ds = data.load_arrays(data_dir)
    train, test = ds.split(test_count)
    spec = models.get_spec(spec_name, class_count=ds.class_count, image_side=ds.images.shape[1],
                           image_channels=ds.images.shape[3], **(overrides or {}))
    torch.manual_seed(cfg.seed)
    net = models.build_network(spec)
    hist = models.train_victim(net, train, cfg, test=test)
    return net, hist, test


def save_victim(net, hist, path: Path, cfg: models.VictimTrainConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    models.save_network(net, path, extra={"train": asdict(cfg)})
    hist_path = path.with_name(path.stem + "_history.jsonl")
    hist_path.write_text("".join(json.dumps(r) + "\n" for r in hist.epochs))


def _eval_dict(rep: evaluation.EvalReport) -> dict:
    return asdict(rep)


def read_history(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def build_report(victim, student, test: data.ArrayDataset, out_dir: Path, opts: EvalOptions,
                 history: list[dict] | None = None, generator=None, seed: int = 0) -> evaluation.ComparisonReport:
    """Evaluate both models on ``test``; write the comparison table and figures."""
    base = evaluation.evaluate_model(victim, test, opts.threshold)
    att = evaluation.evaluate_model(student, test, opts.threshold)
    report = evaluation.ComparisonReport.build(base, att, victim.spec.role, student.spec.role)
    evaluation.write_report(report, out_dir)
    extra = {"naive_box_iou": evaluation.naive_box_iou(test.boxes)}
    (out_dir / "naive_baseline.json").write_text(json.dumps(extra, indent=2))

    figs = out_dir / "figures"
    n = min(opts.overlays, len(test))
    if n:
        _, vbox = evaluation.predict(victim, test.images[:n])
        _, sbox = evaluation.predict(student, test.images[:n])
        evaluation.render_overlays(test.images[:n], test.boxes[:n], vbox, sbox, figs / "overlays")
    if history:
        evaluation.accuracy_curve(history, figs / "accuracy_curve.png", baseline=base.accuracy)
    if generator is not None and opts.scatter_samples:
        from .grad_estim import sample_latent

        g = torch.Generator().manual_seed(seed)
        generator.eval()
        with torch.no_grad():
            fake = generator(sample_latent(opts.scatter_samples, generator.spec.latent_dim, generator=g)).numpy()
        evaluation.latent_scatter(fake, test.images[: opts.scatter_samples], figs / "latent_scatter.png")
    return report


def _generator_from_state(path):
    state = torch.load(path, map_location="cpu", weights_only=False)
    gen = models.build_network(models.NetworkSpec.from_dict(state["generator_spec"]))
    gen.load_state_dict(state["generator"])
    return gen


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    spec = data.DatasetSpec(class_count=args.classes, side=args.side, count=args.count, seed=args.seed,
                            background=args.background)
    anns = data.generate_shapes_dataset(spec, args.out)
    print(f"wrote {len(anns)} images to {args.out}")
    return 0


def cmd_train_victim(args) -> int:
    cfg = models.VictimTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    net, hist, test = train_victim_from_dir(args.data, args.spec, cfg, args.test_count)
    save_victim(net, hist, Path(args.out), cfg)
    rep = evaluation.evaluate_model(net, test)
    print(f"victim {args.spec}: test accuracy {rep.accuracy:.3f}, mean IoU {rep.mean_iou:.3f} -> {args.out}")
    return 0


def cmd_serve_victim(args) -> int:
    server = oracle.serve(args.ckpt, args.bind, args.budget)
    print(f"serving {args.ckpt} at {server.url} (budget {args.budget})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


def _attack_oracle(args, cfg: attack.AttackConfig):
    if args.oracle:
        return oracle.connect(args.oracle)
    return oracle.InProcessOracle(models.load_network(args.ckpt), cfg.query_budget, identity=str(args.ckpt))


def cmd_attack(args) -> int:
    cfg = attack.AttackConfig.from_dict(_read_json(args.config)) if args.config else attack.AttackConfig()
    if args.budget is not None:
        cfg.query_budget = args.budget
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out) if args.out else fresh_dir(out_root(), "attack")
    eval_set = None
    if args.data:
        eval_set = data.load_arrays(args.data).split(args.test_count)[1]
    orc = _attack_oracle(args, cfg)
    state = out / "attack_state.pt"
    if args.resume and state.exists():
        if isinstance(orc, oracle.InProcessOracle):
            done = torch.load(state, map_location="cpu", weights_only=False)["counters"]["consumed"]
            orc.budget = oracle.QueryBudget(cfg.query_budget, done)
        att = attack.Attack.resume(state, orc, eval_set=eval_set, out_dir=out)
        att.run()
    else:
        att = attack.run_attack(cfg, orc, eval_set=eval_set, out_dir=out)
    print(f"attack {att.status}: {att.iteration} iterations, {att.consumed} queries -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    net = models.load_network(args.model)
    test = data.load_arrays(args.data).split(args.test_count)[1]
    rep = evaluation.evaluate_model(net, test, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(_eval_dict(rep), indent=2))
    print(f"accuracy {100 * rep.accuracy:.1f}%  mean IoU {100 * rep.mean_iou:.1f}%  -> {out}")
    return 0


def cmd_report(args) -> int:
    victim = models.load_network(args.victim)
    student = models.load_network(args.student)
    test = data.load_arrays(args.data).split(args.test_count)[1]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history, gen = None, None
    if args.attack_dir:
        adir = Path(args.attack_dir)
        history = read_history(adir / "history.jsonl")
        if (adir / "attack_state.pt").exists():
            gen = _generator_from_state(adir / "attack_state.pt")
    opts = EvalOptions(test_count=args.test_count, threshold=args.threshold)
    report = build_report(victim, student, test, out, opts, history, gen)
    print(report.to_text())
    return 0


def load_experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig.from_dict(_read_json(args.config)) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp.with_seed(args.seed)
    if args.budget is not None:
        exp.attack.query_budget = args.budget
    if args.epochs is not None:
        exp.victim_train.epochs = args.epochs
    if args.count is not None:
        exp.dataset.count = args.count
    if args.transport is not None:
        exp.transport = args.transport
    if args.out is not None:
        exp.out_dir = args.out
    exp.validate()
    return exp


def run_experiment(exp: ExperimentConfig, resume: bool = False) -> Path:
    """Run the full pipeline; returns the run directory."""
    if exp.out_dir:
        run = Path(exp.out_dir)
        if run.exists() and any(run.iterdir()) and not resume:
            raise UsageError(f"run directory {run} is not empty (pass --resume to continue it)")
    else:
        run = fresh_dir(out_root(), f"{exp.name}-seed{exp.seed}")
    run.mkdir(parents=True, exist_ok=True)
    (run / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=2))

    data_dir = run / "data"
    if not (resume and (data_dir / "dataset.json").exists()):
        data.generate_shapes_dataset(exp.dataset, data_dir)
    ds = data.load_arrays(data_dir)
    _, test = ds.split(exp.eval.test_count)

    victim_path = run / "victim.pt"
    if resume and victim_path.exists():
        victim = models.load_network(victim_path)
    else:
        victim, hist, _ = train_victim_from_dir(data_dir, exp.victim_spec, exp.victim_train,
                                                exp.eval.test_count, exp.victim_overrides)
        save_victim(victim, hist, victim_path, exp.victim_train)
    log.info("victim trained: %s", evaluation.evaluate_model(victim, test))

    attack_dir = run / "attack"
    state = attack_dir / "attack_state.pt"
    summary = attack_dir / "summary.json"
    budget = oracle.QueryBudget(exp.attack.query_budget)
    if resume and state.exists():
        done = torch.load(state, map_location="cpu", weights_only=False)["counters"]["consumed"]
        budget = oracle.QueryBudget(exp.attack.query_budget, done)
    local = oracle.InProcessOracle(victim, budget, identity=exp.victim_spec)
    server = None
    try:
        if exp.transport == "http":
            server = oracle.OracleServer(local).start()
            orc = oracle.connect(server.url)
        else:
            orc = local
        if resume and state.exists() and not summary.exists():
            att = attack.Attack.resume(state, orc, eval_set=test, out_dir=attack_dir)
            att.run()
        elif resume and summary.exists():
            att = None
        else:
            att = attack.run_attack(exp.attack, orc, eval_set=test, out_dir=attack_dir)
    finally:
        if server is not None:
            server.shutdown()
    if att is not None:
        log.info("attack %s after %d iterations (%d queries)", att.status, att.iteration, att.consumed)

    student = models.load_network(attack_dir / "student.pt")
    generator = _generator_from_state(state)
    report = build_report(victim, student, test, run / "report", exp.eval,
                          read_history(attack_dir / "history.jsonl"), generator, exp.seed)
    print(report.to_text())
    print(f"run directory: {run}")
    return run


def cmd_run_all(args) -> int:
    exp = load_experiment(args)
    run_experiment(exp, resume=args.resume)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="dfme-od", description="Data-free extraction of single-object detectors.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    dspec = data.DatasetSpec()
    s = sub.add_parser("gen-data", help="render a synthetic shapes dataset", formatter_class=fmt)
    s.add_argument("--classes", type=int, default=dspec.class_count, help="number of shape classes")
    s.add_argument("--side", type=int, default=dspec.side, help="image side in pixels")
    s.add_argument("--count", type=int, default=dspec.count, help="number of images")
    s.add_argument("--seed", type=int, default=dspec.seed, help="layout/colour seed")
    s.add_argument("--background", choices=("solid", "noise"), default=dspec.background, help="background style")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_gen_data)

    vcfg = models.VictimTrainConfig()
    s = sub.add_parser("train-victim", help="train a victim detector", formatter_class=fmt)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--spec", default="victim-a", choices=sorted(models.NAMED_SPECS), help="network spec name")
    s.add_argument("--out", required=True, help="checkpoint path to write")
    s.add_argument("--epochs", type=int, default=vcfg.epochs, help="training epochs")
    s.add_argument("--batch-size", type=int, default=vcfg.batch_size, help="minibatch size")
    s.add_argument("--lr", type=float, default=vcfg.lr, help="initial learning rate")
    s.add_argument("--seed", type=int, default=vcfg.seed, help="initialization and shuffling seed")
    s.add_argument("--test-count", type=int, default=EvalOptions.test_count, help="images held out at the end")
    s.set_defaults(func=cmd_train_victim)

    s = sub.add_parser("serve-victim", help="expose a victim checkpoint over HTTP", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="victim checkpoint")
    s.add_argument("--budget", type=int, default=5_000_000, help="image-query budget")
    s.add_argument("--bind", default="127.0.0.1:8080", help="HOST:PORT")
    s.set_defaults(func=cmd_serve_victim)

    acfg = attack.AttackConfig()
    s = sub.add_parser("attack", help="extract a student from a victim", formatter_class=fmt)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--oracle", metavar="URL", help="base URL of a serve-victim endpoint")
    src.add_argument("--ckpt", help="victim checkpoint queried in-process")
    s.add_argument("--config", help=f"JSON file with AttackConfig fields (defaults: query_budget={acfg.query_budget}, "
                                    f"batch_size={acfg.batch_size}, lr_student={acfg.lr_student}, "
                                    f"lr_generator={acfg.lr_generator})")
    s.add_argument("--out", help=f"output directory (default: fresh directory under ${OUT_ROOT_ENV})")
    s.add_argument("--budget", type=int, help="override query_budget")
    s.add_argument("--seed", type=int, help="override seed")
    s.add_argument("--data", help="dataset directory for periodic student evaluation")
    s.add_argument("--test-count", type=int, default=EvalOptions.test_count, help="images held out at the end")
    s.add_argument("--resume", action="store_true", help="continue from OUT/attack_state.pt")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("evaluate", help="score a detector on a dataset's test split", formatter_class=fmt)
    s.add_argument("--model", required=True, help="checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="report JSON path")
    s.add_argument("--test-count", type=int, default=EvalOptions.test_count, help="images held out at the end")
    s.add_argument("--threshold", type=float, default=EvalOptions.threshold, help="IoU threshold for a detection")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="victim vs student comparison table and figures", formatter_class=fmt)
    s.add_argument("--victim", required=True, help="victim checkpoint")
    s.add_argument("--student", required=True, help="student checkpoint")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--attack-dir", help="attack output directory (history and generator for figures)")
    s.add_argument("--test-count", type=int, default=EvalOptions.test_count, help="images held out at the end")
    s.add_argument("--threshold", type=float, default=EvalOptions.threshold, help="IoU threshold for a detection")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run-all", help="full pipeline from one experiment config", formatter_class=fmt)
    s.add_argument("--config", help="JSON experiment config (omitted: built-in desk defaults)")
    s.add_argument("--out", help=f"run directory (default: fresh directory under ${OUT_ROOT_ENV})")
    s.add_argument("--seed", type=int, help="global seed (victim training and attack)")
    s.add_argument("--budget", type=int, help="override attack query budget")
    s.add_argument("--epochs", type=int, help="override victim epochs")
    s.add_argument("--count", type=int, help="override dataset size")
    s.add_argument("--transport", choices=("in-process", "http"), help="override oracle transport")
    s.add_argument("--resume", action="store_true", help="reuse finished stages in an existing run directory")
    s.set_defaults(func=cmd_run_all)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dfme-od: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        print(f"dfme-od: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
