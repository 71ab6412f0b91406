"""Alternating generator/student training against a query-limited victim.

Each outer iteration runs ``n_generator`` generator steps (ascent on the
victim/student disagreement, gradient estimated through the black box)
followed by ``n_student`` student steps (descent on the same loss, exact
gradients). The loop stops once the remaining budget cannot pay for another
full iteration.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import losses
from .grad_estim import EstimatorConfig, estimate_input_gradient, generator_backprop, sample_latent
from .models import NetworkSpec, build_network, get_spec, save_network
from .oracle import BudgetExhausted, TransportError

log = logging.getLogger(__name__)


def lr_at(step: int, initial: float, decay_rate: float, every: int = 1000) -> float:
    """Staircase exponential decay: ``initial * decay_rate ** (step // every)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return initial * decay_rate ** (step // every)


@dataclass
class AttackConfig:
    query_budget: int = 1_000_000
    n_generator: int = 1
    n_student: int = 5
    batch_size: int = 256
    latent_dim: int = 256
    lr_student: float = 1e-3
    lr_generator: float = 5e-3
    student_decay: float = 0.8
    generator_decay: float = 0.96
    decay_every: int = 1000
    loss_weights: tuple[float, float] = (1.0, 1.0)
    loss_mode: str = "prob"
    latent_dist: str = "gaussian"
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    student_spec: str = "student-a"
    generator_spec: str = "generator"
    student_overrides: dict = field(default_factory=dict)
    generator_overrides: dict = field(default_factory=dict)
    eval_every: int = 10
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            self.estimator = EstimatorConfig(**self.estimator)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    @property
    def iteration_cost(self) -> int:
        return (self.n_generator * (self.estimator.directions + 1) + self.n_student) * self.batch_size

    def validate(self) -> None:
        self.estimator.validate()
        if min(self.n_generator, self.n_student, self.batch_size, self.latent_dim) <= 0:
            raise ValueError("step counts, batch size and latent length must be positive")
        if not self.lr_generator > self.lr_student > 0:
            raise ValueError("need lr_generator > lr_student > 0")
        if self.query_budget < 0:
            raise ValueError("negative query budget")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "AttackConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class AttackInterrupted(RuntimeError):
    def __init__(self, message: str, state_path: Path | None):
        super().__init__(message)
        self.state_path = state_path


class Attack:
    """State of one extraction run: generator, student, optimizers, RNG and history.

    ``student`` and ``generator`` may be supplied; otherwise they are built
    from the named specs, with shapes taken from ``oracle.info()``.
    """

    def __init__(self, cfg: AttackConfig, oracle, student=None, generator=None, eval_set=None, out_dir=None):
        cfg.validate()
        self.cfg = cfg
        self.oracle = oracle
        self.eval_set = eval_set
        self.out_dir = Path(out_dir) if out_dir is not None else None
        info = oracle.info()
        side, _, chans = info["input_shape"]
        torch.manual_seed(cfg.seed)
        if student is None:
            student = build_network(get_spec(
                cfg.student_spec, class_count=info["class_count"], image_side=side, image_channels=chans,
                **cfg.student_overrides,
            ))
        if generator is None:
            gspec = get_spec(cfg.generator_spec, **cfg.generator_overrides)
            generator = build_network(get_spec(
                cfg.generator_spec, latent_dim=cfg.latent_dim, image_side=side, image_channels=chans,
                base=side // 2 ** len(gspec.channels), **cfg.generator_overrides,
            ))
        self.student = student
        self.generator = generator
        self.opt_s = torch.optim.Adam(student.parameters(), lr=cfg.lr_student)
        self.opt_g = torch.optim.Adam(generator.parameters(), lr=cfg.lr_generator, maximize=True)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        self.student_steps = 0
        self.generator_steps = 0
        self.iteration = 0
        self.consumed = 0
        self.history: list[dict] = []
        self.status = "ready"

    # -- single steps -------------------------------------------------------

    def _latent(self) -> torch.Tensor:
        return sample_latent(self.cfg.batch_size, self.cfg.latent_dim, self.cfg.latent_dist, self.rng)

    def generator_step(self) -> tuple[float, int]:
        """One ascent step on the generator; returns (l_total at x, queries spent)."""
        cfg = self.cfg
        lr = lr_at(self.generator_steps, cfg.lr_generator, cfg.generator_decay, cfg.decay_every)
        for g in self.opt_g.param_groups:
            g["lr"] = lr
        self.generator.train()
        self.student.train()
        z = self._latent()
        x = self.generator(z)
        est = estimate_input_gradient(
            self.oracle, self.student, x.detach(), cfg.estimator, self.rng, cfg.loss_weights, cfg.loss_mode
        )
        spent = (cfg.estimator.directions + 1) * cfg.batch_size
        self.consumed += spent
        generator_backprop(self.generator, z, est.grad, x=x)
        self.opt_g.step()
        self.generator_steps += 1
        return est.loss, spent

    def student_step(self, x: torch.Tensor | None = None) -> tuple[float, int]:
        """One descent step on the student; returns (l_total, queries spent).

        ``x`` overrides the generated batch (the generator is then unused).
        """
        cfg = self.cfg
        lr = lr_at(self.student_steps, cfg.lr_student, cfg.student_decay, cfg.decay_every)
        for g in self.opt_s.param_groups:
            g["lr"] = lr
        if x is None:
            self.generator.train()
            with torch.no_grad():
                x = self.generator(self._latent())
        x = x[torch.randperm(x.shape[0], generator=self.rng)]
        v_out = self.oracle.query(x)
        self.consumed += x.shape[0]
        self.student.train()
        s_out = self.student(x)
        loss = losses.total_loss(v_out, s_out, cfg.loss_weights, cfg.loss_mode).l_total
        self.opt_s.zero_grad()
        loss.backward()
        self.opt_s.step()
        self.student_steps += 1
        return loss.item(), x.shape[0]

    # -- outer loop ------------------------------------------------------------

    def run(self) -> list[dict]:
        cfg = self.cfg
        cost = cfg.iteration_cost
        if self.iteration == 0 and self.oracle.remaining() < cost:
            self.status = "budget too small"
            log.warning("budget %d cannot pay for one iteration (%d queries)", self.oracle.remaining(), cost)
            self._finish()
            return self.history
        self.status = "running"
        try:
            while self.oracle.remaining() >= cost:
                self._iterate()
            self.status = "budget exhausted"
        except BudgetExhausted as exc:
            self.status = "budget exhausted"
            log.info("stopping: %s", exc)
        except TransportError as exc:
            self.status = "interrupted"
            path = self.save_state()
            raise AttackInterrupted(f"oracle transport failed after iteration {self.iteration}: {exc}", path) from exc
        self._finish()
        return self.history

    def _iterate(self) -> None:
        cfg = self.cfg
        g_losses = [self.generator_step()[0] for _ in range(cfg.n_generator)]
        s_losses = [self.student_step()[0] for _ in range(cfg.n_student)]
        self.iteration += 1
        rec = {
            "iteration": self.iteration,
            "consumed": self.consumed,
            "loss_generator": sum(g_losses) / len(g_losses),
            "loss_student": sum(s_losses) / len(s_losses),
            "lr_student": lr_at(self.student_steps - 1, cfg.lr_student, cfg.student_decay, cfg.decay_every),
            "lr_generator": lr_at(self.generator_steps - 1, cfg.lr_generator, cfg.generator_decay, cfg.decay_every),
        }
        if self.eval_set is not None and cfg.eval_every and self.iteration % cfg.eval_every == 0:
            rec["eval"] = self._evaluate()
        self.history.append(rec)
        log.info("iter %d consumed=%d loss_G=%.4f loss_S=%.4f%s", self.iteration, self.consumed,
                 rec["loss_generator"], rec["loss_student"],
                 f" acc={rec['eval']['accuracy']:.3f} iou={rec['eval']['mean_iou']:.3f}" if "eval" in rec else "")
        if self.out_dir is not None:
            with open(self.out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                self.save_state()

    def _evaluate(self) -> dict:
        from .evaluation import evaluate_model

        rep = evaluate_model(self.student, self.eval_set)
        return {"accuracy": rep.accuracy, "mean_iou": rep.mean_iou, "detection_success": rep.detection_success}

    def _finish(self) -> None:
        if self.out_dir is None:
            return
        self.save_state()
        save_network(self.student, self.out_dir / "student.pt", extra={"attack": self.cfg.to_dict()})
        summary = {"status": self.status, "iterations": self.iteration, "consumed": self.consumed,
                   "iteration_cost": self.cfg.iteration_cost, "query_budget": self.cfg.query_budget}
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=2))

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "student_spec": self.student.spec.to_dict(),
            "generator_spec": self.generator.spec.to_dict(),
            "student": self.student.state_dict(),
            "generator": self.generator.state_dict(),
            "opt_s": self.opt_s.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "rng": self.rng.get_state(),
            "torch_rng": torch.get_rng_state(),
            "counters": {
                "student_steps": self.student_steps,
                "generator_steps": self.generator_steps,
                "iteration": self.iteration,
                "consumed": self.consumed,
            },
            "history": self.history,
        }

    def save_state(self) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / "attack_state.pt"
        torch.save(self.state_dict(), path)
        return path

    @classmethod
    def resume(cls, path, oracle, eval_set=None, out_dir=None) -> "Attack":
        state = torch.load(path, map_location="cpu", weights_only=False)
        cfg = AttackConfig.from_dict(state["config"])
        student = build_network(NetworkSpec.from_dict(state["student_spec"]))
        generator = build_network(NetworkSpec.from_dict(state["generator_spec"]))
        student.load_state_dict(state["student"])
        generator.load_state_dict(state["generator"])
        att = cls(cfg, oracle, student, generator, eval_set, out_dir if out_dir is not None else Path(path).parent)
        att.opt_s.load_state_dict(state["opt_s"])
        att.opt_g.load_state_dict(state["opt_g"])
        att.rng.set_state(state["rng"])
        torch.set_rng_state(state["torch_rng"])
        for k, v in state["counters"].items():
            setattr(att, k, v)
        att.history = list(state["history"])
        return att


def run_attack(cfg: AttackConfig, oracle, eval_set=None, out_dir=None) -> Attack:
    """Run a full extraction; the returned :class:`Attack` holds the student and history."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")
        (out_dir / "attack_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    attack = Attack(cfg, oracle, eval_set=eval_set, out_dir=out_dir)
    attack.run()
    return attack
