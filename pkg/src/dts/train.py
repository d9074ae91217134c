"""Training objectives, the two-model training loop and checkpoints."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Dataset, Example, Vocabulary, build_vocab
from .grammar import AsdlGrammar, parse_grammar
from .model import Batch, Encoder, ForwardResult, ModelConfig, Seq2TreeModel
from .numerics import Optimizer, OptimizerConfig, Tape, Tensor
from .transition import Order

FORMAT_VERSION = 1

MODES = ("mutual", "mle_single", "kd_frozen", "mutual_same_order")
MODE_ALIASES = {"mle": "mle_single", "kd": "kd_frozen", "ml2": "mutual_same_order"}

PRESETS = {
    "django": {"lam": 0.75, "dropout": 0.5},
    "atis": {"lam": 0.5, "dropout": 0.3},
    "geo": {"lam": 0.25, "dropout": 0.4},
    "ifttt": {"lam": 0.25, "dropout": 0.3},
}


class TrainError(Exception):
    pass


class SupportMismatch(TrainError):
    pass


class DataGrammarMismatch(TrainError):
    pass


class DivergenceDetected(TrainError):
    pass


class CheckpointError(Exception):
    pass


class FormatVersionMismatch(CheckpointError):
    pass


class GrammarHashMismatch(CheckpointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.5
    batch_size: int = 10
    dropout: float = 0.0
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    mode: str = "mutual"
    order_a: str = "pre"
    order_b: str = "bfs"
    kl_nodes: str = "all"
    share_encoder: bool = True
    single_combined_step: bool = False
    min_freq: int = 1
    val_beam: int = 1
    max_decode_steps: int = 200
    stop_accuracy: float | None = None
    teacher_checkpoint: str | None = None
    teacher_epochs: int = 50
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_nodes not in ("all", "composite_only"):
            raise ValueError(f"unknown kl_nodes {self.kl_nodes!r}")
        self.order_a = Order.parse(self.order_a).value
        self.order_b = Order.parse(self.order_b).value
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        for key, sub in (("optimizer", OptimizerConfig), ("model", ModelConfig)):
            if isinstance(d.get(key), dict):
                extra = sorted(set(d[key]) - {f.name for f in fields(sub)})
                if extra:
                    raise ValueError(f"unknown {key} keys: {', '.join(extra)}")
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        values = dict(PRESETS[name])
        values.update(overrides)
        return cls(**values)

    @property
    def effective_order_b(self) -> str:
        return self.order_a if self.mode == "mutual_same_order" else self.order_b


# -- objectives ---------------------------------------------------------------------------


def mle_loss(step_log_probs) -> Tensor:
    """Negative mean gold log-probability of one sequence."""
    lp = nx.as_tensor(step_log_probs)
    if lp.shape[-1] < 1:
        raise ValueError("empty sequence")
    return nx.mul(nx.sum(lp), -1.0 / lp.shape[-1])


def batch_mle(res: ForwardResult) -> Tensor:
    """Per-example MLE losses, shape (B,); padded steps contribute log 1 = 0."""
    return nx.mul(nx.sum(res.gold_log_probs, axis=1), -1.0 / res.batch.T)


def _alignment_index(student: Batch, teacher: Batch) -> np.ndarray:
    """For each student step, the teacher step holding the same node (0 on padding)."""
    B, Tm = student.prev_ids.shape
    out = np.zeros((B, Tm), dtype=np.int64)
    for b in range(B):
        T = student.T[b]
        pos = {int(n): t for t, n in enumerate(teacher.node_index[b, :T])}
        out[b, :T] = [pos[int(n)] for n in student.node_index[b, :T]]
    return out


def _check_support(student: Batch, teacher: Batch, align: np.ndarray) -> None:
    bi = np.arange(align.shape[0])[:, None]
    valid = student.valid
    for name in ("is_composite", "comp_mask", "gen_mask", "gate_mask"):
        a = getattr(student, name)[valid]
        b = getattr(teacher, name)[bi, align][valid]
        if not np.array_equal(a, b):
            raise SupportMismatch(f"aligned steps disagree on {name}")


def kl_weights(student: Batch, kl_nodes: str = "all") -> np.ndarray:
    w = student.valid.astype(float)
    if kl_nodes == "composite_only":
        w = w * student.composite_node
    return w / student.T[:, None]


def aligned_kl(student: ForwardResult, teacher: ForwardResult, kl_nodes: str = "all") -> Tensor:
    """Per-example (1/T) * sum over nodes of KL(teacher || student); teacher detached."""
    align = _alignment_index(student.batch, teacher.batch)
    _check_support(student.batch, teacher.batch, align)
    bi = np.arange(align.shape[0])[:, None]
    target = nx.detach(nx.index(teacher.probs, (bi, align)))
    kl = nx.kl_rows(target, student.probs)
    return nx.sum(nx.mul(kl, kl_weights(student.batch, kl_nodes)), axis=1)


@dataclass
class Objectives:
    j_a: Tensor
    j_b: Tensor | None
    mle_a: Tensor
    mle_b: Tensor | None
    kl_a: np.ndarray
    kl_b: np.ndarray | None


def mutual_losses(res_a: ForwardResult, res_b: ForwardResult, lam: float,
                  kl_nodes: str = "all", need_b: bool = True) -> Objectives:
    """Per-batch objectives summed over instances.

    ``J_a = MLE_a + lam * KL(p_b || p_a)`` and symmetrically for ``J_b``; each
    teacher side is detached. With ``lam == 0`` the KL terms stay off the tape.
    """
    mle_a = batch_mle(res_a)
    mle_b = batch_mle(res_b)
    if lam == 0:
        kl_a = aligned_kl(_frozen(res_a), _frozen(res_b), kl_nodes)
        kl_b = aligned_kl(_frozen(res_b), _frozen(res_a), kl_nodes) if need_b else None
        j_a = nx.sum(mle_a)
        j_b = nx.sum(mle_b) if need_b else None
    else:
        kl_a = aligned_kl(res_a, res_b, kl_nodes)
        j_a = nx.sum(nx.add(mle_a, nx.mul(kl_a, lam)))
        j_b = None
        kl_b = None
        if need_b:
            kl_b = aligned_kl(res_b, res_a, kl_nodes)
            j_b = nx.sum(nx.add(mle_b, nx.mul(kl_b, lam)))
    return Objectives(j_a, j_b, mle_a, mle_b if need_b else None,
                      kl_a.data.copy(), None if kl_b is None else kl_b.data.copy())


def _frozen(res: ForwardResult) -> ForwardResult:
    return ForwardResult(nx.detach(res.probs), nx.detach(res.gold_log_probs), res.batch)


def example_losses(model_a: Seq2TreeModel, model_b: Seq2TreeModel, ex: Example, lam: float,
                   kl_nodes: str = "all") -> tuple[float, float]:
    """(J_a, J_b) for a single example, evaluation mode."""
    res_a = model_a.teacher_force([ex])
    res_b = model_b.teacher_force([ex])
    obj = mutual_losses(res_a, res_b, lam, kl_nodes)
    return obj.j_a.item(), obj.j_b.item()


# -- checkpoints -------------------------------------------------------------------------------


@dataclass
class Checkpoint:
    meta: dict
    params: dict

    @classmethod
    def from_model(cls, model: Seq2TreeModel, config: TrainConfig | None = None,
                   epoch: int = 0, val_acc: float | None = None, role: str = "a") -> "Checkpoint":
        meta = {
            "format_version": FORMAT_VERSION,
            "role": role,
            "order": model.order.value,
            "model_config": model.config.to_dict(),
            "train_config": None if config is None else config.to_dict(),
            "src_vocab": model.src_vocab.to_dict(),
            "gen_vocab": model.gen_vocab.to_dict(),
            "actions": model.actions.to_dict(),
            "grammar": model.grammar.render(),
            "grammar_hash": model.grammar.digest(),
            "epoch": epoch,
            "val_acc": val_acc,
        }
        return cls(meta, model.state_dict())

    def to_model(self, grammar: AsdlGrammar | None = None) -> Seq2TreeModel:
        meta = self.meta
        if grammar is None:
            grammar = parse_grammar(meta["grammar"])
        if grammar.digest() != meta["grammar_hash"]:
            raise GrammarHashMismatch(
                f"checkpoint grammar {meta['grammar_hash'][:12]} != {grammar.digest()[:12]}")
        model = Seq2TreeModel(
            grammar,
            Vocabulary.from_dict(meta["src_vocab"]),
            Vocabulary.from_dict(meta["gen_vocab"]),
            ModelConfig(**meta["model_config"]),
            meta["order"],
            np.random.default_rng(0),
        )
        model.load_state_dict(self.params)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(ckpt.meta, f, indent=2, sort_keys=True)
        f.write("\n")
    nx.save_blob(os.path.join(path, "params.bin"), ckpt.params)


def read_checkpoint(path) -> Checkpoint:
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"checkpoint format {meta.get('format_version')}, expected {FORMAT_VERSION}")
    return Checkpoint(meta, dict(nx.read_blob(os.path.join(path, "params.bin"))))


def load_checkpoint(path, grammar: AsdlGrammar | None = None) -> Seq2TreeModel:
    return read_checkpoint(path).to_model(grammar)


# -- training loop -------------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    loss_a: float
    loss_b: float | None
    kl_a: float | None
    kl_b: float | None
    val_acc_a: float
    val_acc_b: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass
class TrainResult:
    checkpoint_a: Checkpoint
    checkpoint_b: Checkpoint | None
    history: list[EpochLog]
    model_a: Seq2TreeModel
    model_b: Seq2TreeModel | None
    teacher_params_before: dict | None = None


def decode_accuracy(model: Seq2TreeModel, dataset: Dataset, beam_width: int = 1,
                    max_steps: int = 200) -> float:
    if len(dataset) == 0:
        return 0.0
    if beam_width == 1:
        preds = model.greedy_decode_batch([ex.utterance for ex in dataset], max_steps)
    else:
        preds = []
        for ex in dataset:
            try:
                preds.append(model.beam_decode(ex.utterance, beam_width, max_steps))
            except Exception:
                preds.append(None)
    return sum(p is not None and p == ex.ast for p, ex in zip(preds, dataset)) / len(dataset)


def _seed_streams(seed: int):
    """Independent generators: init A, init B, dropout A, dropout B, shared encoder, shuffle."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]


def _check_grammar(datasets: Sequence[Dataset], grammar: AsdlGrammar) -> None:
    digest = grammar.digest()
    for ds in datasets:
        for ex in ds:
            if ex.grammar is not grammar and ex.grammar.digest() != digest:
                raise DataGrammarMismatch(f"{ds.split} example built against another grammar")


def _grads(store) -> dict[str, np.ndarray]:
    return {n: p.grad.copy() for n, p in store.items() if p.grad is not None}


def build_models(grammar: AsdlGrammar, src: Vocabulary, gen: Vocabulary, config: TrainConfig):
    """Model A, optional model B and the dropout generators, all derived from ``config.seed``."""
    init_a, init_b, drop_a, drop_b, init_enc, _ = _seed_streams(config.seed)
    mcfg = replace(config.model, dropout=config.dropout)
    shared = (config.share_encoder and config.mode in ("mutual", "mutual_same_order"))
    encoder = Encoder(src, mcfg, init_enc) if shared else None
    model_a = Seq2TreeModel(grammar, src, gen, mcfg, config.order_a, init_a, encoder, "a")
    model_a.dropout_rng = drop_a
    model_b = None
    if config.mode != "mle_single":
        model_b = Seq2TreeModel(grammar, src, gen, mcfg, config.effective_order_b, init_b,
                                encoder, "b")
        model_b.dropout_rng = drop_b
    return model_a, model_b


def train(train_set: Dataset, valid_set: Dataset, grammar: AsdlGrammar,
          config: TrainConfig | None = None, out_dir: str | None = None,
          log: Callable[[EpochLog], None] | None = None,
          vocab: tuple[Vocabulary, Vocabulary] | None = None) -> TrainResult:
    config = config or TrainConfig()
    _check_grammar([train_set, valid_set], grammar)
    src, gen = vocab or build_vocab(train_set, config.min_freq)
    model_a, model_b = build_models(grammar, src, gen, config)
    shuffle_rng = _seed_streams(config.seed)[5]
    mode = config.mode
    frozen_teacher = mode == "kd_frozen"
    teacher_before = None
    if frozen_teacher:
        model_b = _prepare_teacher(train_set, valid_set, grammar, config, (src, gen))
        teacher_before = model_b.state_dict()

    opt_a = Optimizer(model_a.store, config.optimizer)
    opt_b = None
    opt_joint = None
    if model_b is not None and not frozen_teacher:
        if config.single_combined_step:
            joint = nx.ParameterStore()
            joint.update(model_a.store)
            for n, p in model_b.store.items():
                if n not in joint or joint[n] is not p:
                    joint.add("b." + n if n in joint else n, p)
            opt_joint = Optimizer(joint, config.optimizer)
        else:
            opt_b = Optimizer(model_b.store, config.optimizer)

    history: list[EpochLog] = []
    best = {"a": (-1.0, None), "b": (-1.0, None)}
    since_improved = 0
    for epoch in range(1, config.epochs + 1):
        sums = {"loss_a": 0.0, "loss_b": 0.0, "kl_a": 0.0, "kl_b": 0.0}
        for examples in train_set.batches(config.batch_size, shuffle_rng):
            stats = _train_step(examples, model_a, model_b, config, opt_a, opt_b, opt_joint,
                                frozen_teacher)
            for k, v in stats.items():
                sums[k] += v
        n = max(len(train_set), 1)
        acc_a = decode_accuracy(model_a, valid_set, config.val_beam, config.max_decode_steps)
        acc_b = None
        if model_b is not None and not frozen_teacher:
            acc_b = decode_accuracy(model_b, valid_set, config.val_beam, config.max_decode_steps)
        entry = EpochLog(
            epoch,
            sums["loss_a"] / n,
            sums["loss_b"] / n if model_b is not None and not frozen_teacher else None,
            sums["kl_a"] / n if model_b is not None else None,
            sums["kl_b"] / n if model_b is not None and not frozen_teacher else None,
            acc_a,
            acc_b,
        )
        history.append(entry)
        if log is not None:
            log(entry)
        improved = False
        for role, model, acc in (("a", model_a, acc_a), ("b", model_b, acc_b)):
            if acc is not None and acc > best[role][0]:
                best[role] = (acc, Checkpoint.from_model(model, config, epoch, acc, role))
                improved = True
        since_improved = 0 if improved else since_improved + 1
        accs = [a for a in (acc_a, acc_b) if a is not None]
        if config.stop_accuracy is not None and all(a >= config.stop_accuracy for a in accs):
            break
        if since_improved >= config.patience:
            break

    ckpt_a = best["a"][1]
    ckpt_b = best["b"][1]
    if out_dir is not None:
        write_run(out_dir, config, ckpt_a, ckpt_b, history)
    return TrainResult(ckpt_a, ckpt_b, history, model_a, model_b, teacher_before)


def write_run(out_dir, config: TrainConfig, ckpt_a: Checkpoint, ckpt_b: Checkpoint | None,
              history: Sequence[EpochLog]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(ckpt_a, os.path.join(out_dir, "model_a"))
    if ckpt_b is not None:
        save_checkpoint(ckpt_b, os.path.join(out_dir, "model_b"))
    with open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8") as f:
        for entry in history:
            f.write(entry.to_json() + "\n")


def _train_step(examples, model_a, model_b, config, opt_a, opt_b, opt_joint,
                frozen_teacher) -> dict[str, float]:
    utts = [ex.utterance for ex in examples]
    with Tape() as tape:
        enc_a = model_a.encode(utts, train=True)
        res_a = model_a.teacher_force(examples, True, enc_a)
        if model_b is None:
            j_a = nx.sum(batch_mle(res_a))
            obj = None
        else:
            if frozen_teacher:
                res_b = model_b.teacher_force(examples, False)
            else:
                enc_b = enc_a if model_b.encoder is model_a.encoder else model_b.encode(utts, True)
                res_b = model_b.teacher_force(examples, True, enc_b)
            obj = mutual_losses(res_a, res_b, config.lam, config.kl_nodes,
                                need_b=not frozen_teacher)
            j_a = obj.j_a
            if opt_joint is not None:
                combined = nx.add(obj.j_a, obj.j_b)
    values = [j_a.item()] + ([obj.j_b.item()] if obj is not None and obj.j_b is not None else [])
    if not all(math.isfinite(v) for v in values):
        raise DivergenceDetected(f"non-finite loss {values}")

    if opt_joint is not None:
        opt_joint.store.zero_grad()
        nx.backward(tape, combined)
        opt_joint.step(_grads(opt_joint.store))
    else:
        model_a.store.zero_grad()
        nx.backward(tape, j_a)
        grads_a = _grads(model_a.store)
        grads_b = None
        if opt_b is not None:
            model_a.store.zero_grad()
            model_b.store.zero_grad()
            nx.backward(tape, obj.j_b)
            grads_b = _grads(model_b.store)
        opt_a.step(grads_a)
        if opt_b is not None:
            opt_b.step(grads_b)
    model_a.store.zero_grad()
    if model_b is not None:
        model_b.store.zero_grad()

    stats = {"loss_a": j_a.item()}
    if obj is not None:
        stats["kl_a"] = float(obj.kl_a.sum())
        if obj.j_b is not None:
            stats["loss_b"] = obj.j_b.item()
            stats["kl_b"] = float(obj.kl_b.sum())
    return stats


def _prepare_teacher(train_set, valid_set, grammar, config: TrainConfig,
                     vocab) -> Seq2TreeModel:
    """Frozen teacher for distillation: loaded from disk or trained with MLE first."""
    if config.teacher_checkpoint:
        teacher = load_checkpoint(config.teacher_checkpoint, grammar)
        if teacher.src_vocab != vocab[0] or teacher.gen_vocab != vocab[1]:
            raise TrainError("teacher checkpoint vocabulary differs from the training data's")
        return teacher
    pre = replace(config, mode="mle_single", order_a=config.order_b, epochs=config.teacher_epochs,
                  stop_accuracy=None)
    result = train(train_set, valid_set, grammar, pre, vocab=vocab)
    return result.checkpoint_a.to_model(grammar)
