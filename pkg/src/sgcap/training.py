"""Training: teacher-forced cross-entropy, optional POS supervision of
the router, self-critical fine-tuning with a CIDEr-D reward, the Adam
optimizer, and the epoch loop with checkpointing.

Everything is deterministic given the run seed: initialization, batch
order, and reinforcement sampling draw from separate seeded streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .decoder import decode_greedy, greedy_search
from .linearize import LinearizedGraph
from .metrics import CiderD, Corpus, bleu, cider_d, tokenize
from .model import CaptionModel
from .synth import DatasetSplits, SynthSample
from .vocab import Vocab

# router supervision: word class -> expert index (OTHER words are ignored)
TAG_TO_EXPERT = {"NOUN": 0, "ADJ": 1, "VERB": 2, "PREP": 2}


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; earlier checkpoints are left on disk."""


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sequence_xe(rows: Tensor, targets: np.ndarray, pad_id: int) -> tuple[Tensor, int]:
    """Summed negative log-likelihood over non-PAD target positions."""
    targets = np.asarray(targets)
    keep = targets != pad_id
    picked = ad.gather_rows(rows, np.where(keep, targets, 0))
    masked = ad.mul(picked, keep.astype(rows.data.dtype))
    return ad.neg(ad.tsum(masked)), int(keep.sum())


def xe_loss(rows_list: list[Tensor], targets_list: list[np.ndarray], pad_id: int) -> Tensor:
    """Mean cross-entropy per non-PAD position over a batch."""
    if not rows_list:
        raise ValueError("empty batch")
    total, count = None, 0
    for rows, targets in zip(rows_list, targets_list):
        term, n = sequence_xe(rows, targets, pad_id)
        total = term if total is None else ad.add(total, term)
        count += n
    if count == 0:
        raise ValueError("batch contains no target tokens")
    return ad.scale(total, 1.0 / count)


def router_terms(alphas: Tensor, expert_ids: np.ndarray) -> tuple[Tensor | None, int]:
    """Summed -log(alpha at the labeled expert) over labeled positions.

    expert_ids uses -1 for ignored positions.  alphas is the (t, 3)
    routing tensor of one decoder layer.
    """
    expert_ids = np.asarray(expert_ids)
    rows = np.nonzero(expert_ids >= 0)[0]
    if rows.size == 0:
        return None, 0
    valid = ad.embedding(alphas, rows)                 # row gather keeps gradients
    picked = ad.gather_rows(valid, expert_ids[rows])
    return ad.neg(ad.tsum(ad.log(picked))), int(rows.size)


def router_pos_loss(alphas_list: list[Tensor], expert_ids_list: list[np.ndarray]) -> Tensor | None:
    """Mean routing cross-entropy over the labeled positions of a batch."""
    total, count = None, 0
    for alphas, ids in zip(alphas_list, expert_ids_list):
        term, n = router_terms(alphas, ids)
        if term is None:
            continue
        total = term if total is None else ad.add(total, term)
        count += n
    if total is None:
        return None
    return ad.scale(total, 1.0 / count)


def expert_targets(tags: list[str] | tuple[str, ...], target_len: int) -> np.ndarray:
    """Per-position expert labels for a target sequence (EOS gets -1)."""
    ids = [TAG_TO_EXPERT.get(tag, -1) for tag in tags]
    ids += [-1] * (target_len - len(ids))
    return np.asarray(ids[:target_len], dtype=np.int64)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer, beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, params: ParamStore, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def step(self, params: ParamStore, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_at(epoch: int, base: float, decay: float, every: int) -> float:
    """Stepwise schedule: the base rate decays by ``decay`` every ``every`` epochs."""
    return base * decay ** ((epoch - 1) // every)


# ---------------------------------------------------------------------------
# self-critical step
# ---------------------------------------------------------------------------

def sample_sequence(session, rng: np.random.Generator, max_len: int, bos: int, eos: int) -> list[int]:
    """Multinomial rollout (temperature 1) from the model's step scores."""
    prefix = [bos]
    out: list[int] = []
    for _ in range(max_len):
        logp = session.step(prefix).astype(np.float64)
        p = np.exp(logp - logp.max())
        p /= p.sum()
        token = int(rng.choice(len(p), p=p))
        out.append(token)
        prefix.append(token)
        if token == eos:
            break
    return out


def scst_step(
    model: CaptionModel,
    batch: list[tuple[LinearizedGraph, list[str]]],
    scorer: CiderD,
    rng: np.random.Generator,
) -> tuple[Tensor | None, float, float]:
    """Policy-gradient pseudo-loss for one batch.

    Per sample: draw one multinomial caption, decode the greedy caption
    as the baseline, and weight the sampled sequence's summed
    log-probability by -(sampled reward - greedy reward).  The reward is
    CIDEr-D against the sample's references with training-corpus
    document frequencies.  Samples whose advantage is zero contribute no
    gradient.
    """
    if not scorer.fitted:
        raise ValueError("reward scorer is not fitted")
    terms = []
    reward_sampled = 0.0
    reward_greedy = 0.0
    for lg, refs in batch:
        session = model.decode_session(lg)
        greedy_tokens = greedy_search(session.step, model.bos_id, model.eos_id, model.cfg.max_len)
        sampled_tokens = sample_sequence(session, rng, model.cfg.max_len, model.bos_id, model.eos_id)
        r_s = scorer.score(model.caption(sampled_tokens), refs)
        r_g = scorer.score(model.caption(greedy_tokens), refs)
        reward_sampled += r_s
        reward_greedy += r_g
        advantage = r_s - r_g
        if advantage == 0.0:
            continue
        input_ids = np.asarray([model.bos_id] + sampled_tokens[:-1])
        rows = model.caption_logprobs(lg, input_ids, graph=None)
        summed = ad.tsum(ad.gather_rows(rows, np.asarray(sampled_tokens)))
        terms.append(ad.scale(summed, -advantage))
    n = len(batch)
    if not terms:
        return None, reward_sampled / n, reward_greedy / n
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / n), reward_sampled / n, reward_greedy / n


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CaptionModel
    history: list[dict] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    final_path: Path | None = None


@dataclass
class _Prepared:
    lg: LinearizedGraph
    input_ids: np.ndarray
    targets: np.ndarray
    expert_ids: np.ndarray
    refs: list[str]


def build_vocabs(samples: list[SynthSample]) -> tuple[Vocab, Vocab]:
    node_labels: set[str] = set()
    caption_words: set[str] = set()
    for sample in samples:
        g = sample.graph
        node_labels.update(g.objects)
        node_labels.update(label for _i, label in g.attributes)
        node_labels.update(label for _s, _o, label in g.relations)
        for cap in sample.captions:
            caption_words.update(tokenize(cap))
    return Vocab.for_node_labels(node_labels), Vocab.for_captions(caption_words)


def _prepare(model: CaptionModel, sample: SynthSample) -> _Prepared:
    words = tokenize(sample.caption)
    if len(words) > model.cfg.max_len - 1:
        words = words[: model.cfg.max_len - 1]
    word_ids, _unk = model.caption_vocab.encode(words)
    input_ids = np.asarray([model.bos_id] + word_ids, dtype=np.int64)
    targets = np.asarray(word_ids + [model.eos_id], dtype=np.int64)
    expert_ids = expert_targets(sample.pos_tags, len(targets))
    return _Prepared(
        lg=model.linearize(sample.graph),
        input_ids=input_ids,
        targets=targets,
        expert_ids=expert_ids,
        refs=list(sample.captions),
    )


def fit_model(
    samples: list[SynthSample],
    cfg: RunConfig,
    val_samples: list[SynthSample] | None = None,
    out_dir: str | Path | None = None,
    model: CaptionModel | None = None,
    progress=None,
) -> TrainResult:
    """Cross-entropy epochs followed by self-critical epochs.

    Writes one checkpoint per epoch plus a metrics log when out_dir is
    given.  A non-finite loss aborts with TrainingDiverged; checkpoints
    written so far stay on disk.  Captions longer than the decoder
    window are truncated.
    """
    if not samples:
        raise ValueError("training set is empty")
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").unlink(missing_ok=True)

    if model is None:
        node_vocab, caption_vocab = build_vocabs(samples)
        init_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
        model = CaptionModel(cfg.model_config(), node_vocab, caption_vocab, rng=init_rng)
    train_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    sample_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))

    prepared = [_prepare(model, s) for s in samples]
    prepared_val = [_prepare(model, s) for s in (val_samples or [])]
    optimizer = Adam(model.params)
    result = TrainResult(model=model)
    use_router = cfg.router_pos_weight > 0 and model.cfg.use_moe

    scorer = None
    if cfg.epochs_rl > 0:
        scorer = CiderD().fit([p.refs for p in prepared])

    def log_epoch(epoch: int, phase: str, loss_value: float):
        cider_value, bleu_value = float("nan"), float("nan")
        if prepared_val:
            cider_value, bleu_value = _evaluate(model, prepared_val)
        row = {"epoch": epoch, "phase": phase, "loss": loss_value,
               "cider_d": cider_value, "bleu4": bleu_value}
        result.history.append(row)
        if progress is not None:
            progress(row)
        if out is not None:
            mode = "a" if (out / "metrics.tsv").exists() else "w"
            with open(out / "metrics.tsv", mode, encoding="utf-8") as fh:
                if mode == "w":
                    fh.write(f"# seed {cfg.seed}\n")
                fh.write(f"{epoch}\t{phase}\t{loss_value:.6f}\t{cider_value:.4f}\t{bleu_value:.4f}\n")

    def save_epoch(epoch: int):
        if out is None:
            return
        path = out / f"epoch_{epoch:03d}.ckpt"
        save_checkpoint(
            path,
            config=cfg.to_dict(),
            arrays={name: t.data for name, t in model.params.items()},
            epoch=epoch,
            node_tokens=list(model.node_vocab.tokens),
            caption_tokens=list(model.caption_vocab.tokens),
            optimizer_moments=(optimizer.m, optimizer.v),
            optimizer_step=optimizer.t,
            rng=train_rng,
        )
        result.checkpoint_paths.append(path)
        result.final_path = path

    epoch = 0
    for xe_epoch in range(1, cfg.epochs_xe + 1):
        epoch += 1
        lr = lr_at(xe_epoch, cfg.lr_xe, cfg.lr_decay, cfg.lr_decay_every)
        order = train_rng.permutation(len(prepared))
        loss_sum, position_count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            rows_list, alphas_list = [], []
            for item in batch:
                sink: list = [] if use_router else None
                rows = model.caption_logprobs(item.lg, item.input_ids, route_sink=sink)
                rows_list.append(rows)
                if use_router:
                    alphas_list.append(sink[-1])   # last decoder layer
            loss = xe_loss(rows_list, [item.targets for item in batch], model.pad_id)
            if use_router:
                extra = router_pos_loss(alphas_list, [item.expert_ids for item in batch])
                if extra is not None:
                    loss = ad.add(loss, ad.scale(extra, cfg.router_pos_weight))
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}; last checkpoint: {result.final_path}"
                )
            batch_positions = sum(int((item.targets != model.pad_id).sum()) for item in batch)
            loss_sum += value * batch_positions
            position_count += batch_positions
            model.params.zero_grad()
            loss.backward()
            model.params.clip_grad_norm(cfg.grad_clip)
            optimizer.step(model.params, lr)
        log_epoch(epoch, "xe", loss_sum / max(1, position_count))
        save_epoch(epoch)

    for rl_epoch in range(1, cfg.epochs_rl + 1):
        epoch += 1
        lr = lr_at(rl_epoch, cfg.lr_rl, cfg.lr_decay, cfg.lr_decay_every)
        order = train_rng.permutation(len(prepared))
        loss_sum, batch_count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [prepared[i] for i in order[start:start + cfg.batch_size]]
            loss, _r_s, _r_g = scst_step(
                model, [(item.lg, item.refs) for item in batch], scorer, sample_rng
            )
            batch_count += 1
            if loss is None:
                continue
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss in epoch {epoch}; last checkpoint: {result.final_path}"
                )
            loss_sum += value
            model.params.zero_grad()
            loss.backward()
            model.params.clip_grad_norm(cfg.grad_clip)
            optimizer.step(model.params, lr)
        log_epoch(epoch, "rl", loss_sum / max(1, batch_count))
        save_epoch(epoch)

    if out is not None and result.final_path is not None:
        final = out / "final.ckpt"
        final.write_bytes(Path(result.final_path).read_bytes())
        result.final_path = final
    return result


def train(cfg: RunConfig, data: DatasetSplits, out_dir: str | Path | None = None, progress=None) -> TrainResult:
    """Train on the dataset's train split, logging metrics on val."""
    return fit_model(data.train, cfg, val_samples=data.val, out_dir=out_dir, progress=progress)


def _evaluate(model: CaptionModel, prepared: list[_Prepared]) -> tuple[float, float]:
    """Greedy-decode a prepared split and score CIDEr-D and BLEU-4."""
    items = []
    for item in prepared:
        result = decode_greedy(model, item.lg)
        items.append((model.caption(result.tokens) or "<empty>", item.refs))
    corpus = Corpus(items)
    _scores, mean = cider_d(corpus)
    return mean, bleu(corpus, 4)


def model_from_checkpoint(path: str | Path) -> tuple[CaptionModel, RunConfig]:
    """Rebuild a model (and its RunConfig) from a checkpoint file."""
    ckpt = load_checkpoint(path)
    cfg = RunConfig(**ckpt.config)
    node_vocab = Vocab(ckpt.node_tokens)
    caption_vocab = Vocab(ckpt.caption_tokens)
    model = CaptionModel(cfg.model_config(), node_vocab, caption_vocab,
                         rng=np.random.default_rng(0))
    model.params.load_arrays(ckpt.arrays)
    return model, cfg
