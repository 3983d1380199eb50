"""Model assembly, label-free training, checkpoints and inference.

The toy acoustic decoder is a single linear map from the linguistic encoder
output to ``n_features`` per character.  Pronunciation labels never enter the
graph: :class:`TrainingBatch` keeps them beside the inputs for evaluation only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dictionary import Dictionary, Pronunciation
from .encoders import (
    EncoderConfig,
    KeyStore,
    PronunciationTable,
    Vocab,
    char_vocab,
    encode_linguistic,
    encode_semantic,
    init_stack_params,
    phoneme_vocab,
)
from .numerics import (
    DivergenceError,
    OptimizerState,
    ShapeError,
    Tensor,
    add,
    anneal_tau,
    adam_step,
    backward,
    embedding_lookup,
    fresh_tape,
    matmul,
    mse_loss,
    mul,
    no_grad,
    noam_lr,
)
from .s2pa import RuleSet, default_scale, s2pa_forward, sample_gumbel

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DGPC"
CKPT_VERSION = 1
DIVERGENCE_LIMIT = 1e6
_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {"<f4": 0, "<f8": 1}


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_features: int = 16
    batch_size: int = 32
    max_steps: int = 2000
    seed: int = 0
    warmup: int = 400
    lr_scale: float = 1.0
    tau0: float = 1.0
    tau_min: float = 0.1
    tau_rate: float = 1e-5
    tau_every: int = 1000
    key_mode: str = "imported"
    scale: float = 0.0  # 0 means sqrt(d_model)
    hard_gumbel: bool = False
    pron_skip: bool = True  # add p' to the linguistic encoder output before decoding
    dtype: str = "f32"
    log_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        for name in ("n_features", "batch_size", "warmup", "tau_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.max_steps < 0 or self.seed < 0 or self.eval_every < 0:
            raise ConfigError("max_steps, seed and eval_every must be non-negative")
        if not (self.tau0 > 0 and self.tau_min > 0 and self.tau_rate >= 0 and self.lr_scale > 0):
            raise ConfigError("temperatures and lr_scale must be positive")
        if self.key_mode not in ("imported", "trainable"):
            raise ConfigError(f"key_mode must be 'imported' or 'trainable', not {self.key_mode!r}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.scale < 0:
            raise ConfigError("scale must be non-negative")

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def attention_scale(self) -> float:
        return self.scale or default_scale(self.d_model)

    def tau(self, step: int) -> float:
        return anneal_tau(step, self.tau0, self.tau_min, self.tau_rate, self.tau_every)

    def to_flat(self) -> dict:
        flat = {k: v for k, v in dataclasses.asdict(self).items() if k != "encoder"}
        flat.update(dataclasses.asdict(self.encoder))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelConfig":
        enc_fields = {f.name: f for f in dataclasses.fields(EncoderConfig)}
        own_fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "encoder"}
        enc, own = {}, {}
        for key, value in flat.items():
            if key in enc_fields:
                enc[key] = value
            elif key in own_fields:
                own[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(encoder=EncoderConfig(**enc), **own)

    def replace(self, **changes) -> "ModelConfig":
        flat = self.to_flat()
        flat.update(changes)
        return ModelConfig.from_flat(flat)

    def hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(raw: str, kind):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def parse_config(lines, base: ModelConfig | None = None) -> ModelConfig:
    """``key=value`` lines; '#' comments and blank lines are skipped."""
    base = base or ModelConfig()
    flat = base.to_flat()
    kinds = {k: type(v) for k, v in flat.items()}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            flat[key] = _coerce(value, kinds[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key}: {exc}") from None
    return ModelConfig.from_flat(flat)


def load_config(path, base=None) -> ModelConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f, base)


def format_config(cfg: ModelConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.to_flat().items())


# ---------------------------------------------------------------------------
# batches


@dataclass
class TrainingBatch:
    sentences: list
    ids: np.ndarray  # (B, L)
    mask: np.ndarray  # (B, L) bool
    targets: np.ndarray | None  # (B, L, F)
    forced: np.ndarray  # (B, L), -1 where no rule fires
    labels: list | None = None  # evaluation only; never read by forward/loss

    def without_labels(self) -> "TrainingBatch":
        return dataclasses.replace(self, labels=None)


@dataclass
class Diagnostics:
    sentences: list
    mask: np.ndarray
    weights: np.ndarray  # (B, L, M) aggregated w (after rule forcing)
    sampled: np.ndarray  # (B, L, M)
    attention: np.ndarray  # (B, L, R) normalized scores
    semantics: np.ndarray  # (B, L, d)
    forced: np.ndarray


class DictG2PModel:
    """Character ids -> semantic encoder -> S2PA -> linguistic encoder -> linear decoder."""

    def __init__(self, dictionary: Dictionary, keystore: KeyStore, config: ModelConfig, params: dict | None = None):
        if keystore.d_model != config.d_model:
            raise ShapeError(f"key store width {keystore.d_model} does not match d_model {config.d_model}")
        if keystore.mode != config.key_mode:
            raise ConfigError(f"key store is {keystore.mode!r} but config asks for {config.key_mode!r}")
        self.dictionary = dictionary
        self.keystore = keystore
        self.config = config
        self.vocab: Vocab = char_vocab(dictionary)
        self.phonemes: Vocab = phoneme_vocab(dictionary)
        self.pron_table = PronunciationTable.build(dictionary, self.phonemes)
        self._build_lookup_tables()
        dtype = config.np_dtype
        self._averaging = self.pron_table.averaging.astype(dtype)
        self._frozen_keys = Tensor(keystore.vectors.astype(dtype)) if keystore.mode == "imported" else None
        if params is None:
            params = self.init_params(config.seed)
        self.params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True, name=k) for k, v in params.items()}

    # -- setup --------------------------------------------------------------

    def _build_lookup_tables(self):
        recs = [self.dictionary.resolve(sym) for sym in self.vocab.symbols]
        R = max(len(self.keystore.index_map(r.char)) for r in recs)
        M = max(r.m for r in recs)
        V = len(recs)
        self.rows = np.zeros((V, R), dtype=np.int64)
        self.row_mask = np.zeros((V, R), dtype=bool)
        self.aggregation = np.zeros((V, R, M))
        self.pron_ids = np.zeros((V, M), dtype=np.int64)
        self.pron_mask = np.zeros((V, M), dtype=bool)
        self.m = np.zeros(V, dtype=np.int64)
        for v, rec in enumerate(recs):
            sl = self.keystore.row_slice(rec.char)
            imap = self.keystore.index_map(rec.char)
            n = sl.stop - sl.start
            self.rows[v, :n] = np.arange(sl.start, sl.stop)
            self.row_mask[v, :n] = True
            self.aggregation[v, np.arange(n), [j for j, _ in imap]] = 1.0
            self.pron_ids[v, : rec.m] = [self.pron_table.id(p) for p in rec.prons]
            self.pron_mask[v, : rec.m] = True
            self.m[v] = rec.m

    def init_params(self, seed: int) -> dict:
        cfg = self.config
        D = cfg.d_model
        rng = np.random.default_rng([seed, 1])
        params = {
            "char_emb": rng.normal(0.0, D**-0.5, (len(self.vocab), D)),
            "phon_emb": rng.normal(0.0, 1.0, (len(self.phonemes), D)),
        }
        if cfg.key_mode == "trainable":
            params["key_emb"] = rng.normal(0.0, D**-0.5, (len(self.vocab), D))
        params.update(init_stack_params(rng, "sem", cfg.encoder.semantic_layers, cfg.encoder))
        params.update(init_stack_params(rng, "ling", cfg.encoder.linguistic_layers, cfg.encoder))
        params["dec.w"] = rng.normal(0.0, D**-0.5, (D, cfg.n_features))
        params["dec.b"] = np.zeros(cfg.n_features)
        return params

    def param_arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, params: dict):
        missing = set(self.params) ^ set(params)
        if missing:
            raise CheckpointError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, arr in params.items():
            if arr.shape != self.params[k].shape:
                raise CheckpointError(f"parameter {k!r} has shape {arr.shape}, model expects {self.params[k].shape}")
        for k, arr in params.items():
            self.params[k].data[...] = arr

    # -- batches ------------------------------------------------------------

    def encode(self, sentence: str) -> np.ndarray:
        return self.vocab.encode(sentence)

    def make_batch(self, sentences, targets=None, labels=None, rules: RuleSet | None = None) -> TrainingBatch:
        if not sentences:
            raise ValueError("empty batch")
        L = max(len(s) for s in sentences)
        if L == 0:
            raise ValueError("cannot batch empty sentences")
        B = len(sentences)
        ids = np.zeros((B, L), dtype=np.int64)
        mask = np.zeros((B, L), dtype=bool)
        forced = np.full((B, L), -1, dtype=np.int64)
        for b, s in enumerate(sentences):
            ids[b, : len(s)] = self.encode(s)
            mask[b, : len(s)] = True
            if rules is not None and len(rules):
                forced[b, : len(s)] = rules.forced_indices(s, self.dictionary)
        over = forced >= self.m[ids]
        if np.any(over & (forced >= 0)):
            from .s2pa import RuleError

            raise RuleError("a rule forces a pronunciation index beyond the character's readings")
        tgt = None
        if targets is not None:
            tgt = np.zeros((B, L, self.config.n_features), dtype=self.config.np_dtype)
            for b, t in enumerate(targets):
                t = np.asarray(t)
                if t.shape != (len(sentences[b]), self.config.n_features):
                    raise ShapeError(f"target for sentence {b} has shape {t.shape}")
                tgt[b, : len(t)] = t
        return TrainingBatch(list(sentences), ids, mask, tgt, forced, labels)

    # -- forward ------------------------------------------------------------

    def key_table(self) -> Tensor:
        if self._frozen_keys is not None:
            return self._frozen_keys
        return embedding_lookup(self.params["key_emb"], self.keystore.token_ids)

    def forward(self, batch: TrainingBatch, tau: float, noise=None, ablate: str | None = None):
        """Acoustic prediction (B, L, F) and diagnostics.

        ``noise``: Gumbel draws of shape (B, L, M), a Generator, or None.
        ``ablate``: "pronunciation" or "semantics" zeroes that S2PA output.
        """
        cfg = self.config
        ids, mask = batch.ids, batch.mask
        z = encode_semantic(ids, self.params, cfg.encoder, mask).z
        keys = embedding_lookup(self.key_table(), self.rows[ids])
        prons = embedding_lookup(matmul(self._averaging, self.params["phon_emb"]), self.pron_ids[ids])
        if isinstance(noise, np.random.Generator):
            noise = sample_gumbel(noise, ids.shape + (self.pron_ids.shape[1],), cfg.np_dtype)
        out = s2pa_forward(
            z,
            keys,
            self.row_mask[ids],
            self.aggregation[ids],
            prons,
            self.pron_mask[ids],
            tau,
            cfg.attention_scale,
            noise=noise,
            forced=batch.forced,
            hard=cfg.hard_gumbel,
        )
        p_mixed, s_ret = out.distribution.mixed, out.semantics
        if ablate == "pronunciation":
            p_mixed = mul(p_mixed, 0.0)
        elif ablate == "semantics":
            s_ret = mul(s_ret, 0.0)
        elif ablate is not None:
            raise ValueError(f"unknown ablation {ablate!r}")
        g = encode_linguistic(p_mixed, s_ret, self.params, cfg.encoder, mask)
        if cfg.pron_skip:
            g = add(g, p_mixed)
        pred = add(matmul(g, self.params["dec.w"]), self.params["dec.b"])
        diag = Diagnostics(
            batch.sentences,
            mask,
            out.distribution.weights.data,
            out.distribution.sampled.data,
            out.attention.normalized.data,
            out.semantics.data,
            batch.forced,
        )
        return pred, diag

    def gradients(self, batch: TrainingBatch, tau: float, noise=None) -> tuple[float, dict]:
        """Loss and gradient arrays for one batch."""
        for t in self.params.values():
            t.grad = None
        with fresh_tape():
            pred, _ = self.forward(batch, tau, noise)
            loss = reconstruction_loss(pred, batch.targets, batch.mask)
            value = float(loss.data)
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergenceError(f"loss diverged: {value}")
            backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}
        for t in self.params.values():
            t.grad = None
        return value, grads

    # -- inference ----------------------------------------------------------

    def predict(self, sentences, rules: RuleSet | None = None, sample_gumbel_rng=None, batch_size: int = 64):
        """Per sentence: reading indices (argmax of rule-forced w, or of a
        Gumbel sample when an RNG is given) and the diagnostics."""
        preds, diags = [], []
        for start in range(0, len(sentences), batch_size):
            chunk = sentences[start : start + batch_size]
            batch = self.make_batch(chunk, rules=rules)
            with no_grad():
                _, diag = self.forward(batch, tau=1.0, noise=None)
            score = np.log(np.maximum(diag.weights, 1e-10))
            if sample_gumbel_rng is not None:
                score = score + sample_gumbel(sample_gumbel_rng, score.shape)
            score = np.where(self.pron_mask[batch.ids], score, -np.inf)
            choice = score.argmax(axis=-1)
            choice = np.where(batch.forced >= 0, batch.forced, choice)
            for b, s in enumerate(chunk):
                preds.append(choice[b, : len(s)].copy())
            diags.append(diag)
        return preds, diags

    def pronunciations(self, sentence: str, indices) -> list[Pronunciation]:
        return [self.dictionary.resolve(ch).prons[int(j)] for ch, j in zip(sentence, indices)]


def reconstruction_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean squared error over unmasked positions."""
    return mse_loss(pred, target, mask)


@dataclass
class InferenceResult:
    sentence: str
    pronunciations: list
    indices: np.ndarray
    weights: list  # per character, length-m w vector
    attention: list  # per character, flat a' over that character's key rows
    index_maps: list
    forced: list


def infer_pronunciations(sentence: str, model: DictG2PModel, rules: RuleSet | None = None, sample_gumbel_rng=None) -> InferenceResult:
    """Per-character readings for one sentence; OOV characters fall back to the unknown record."""
    if not sentence:
        return InferenceResult(sentence, [], np.zeros(0, dtype=np.int64), [], [], [], [])
    (idx,), (diag,) = model.predict([sentence], rules, sample_gumbel_rng)
    return inference_result(model, sentence, idx, diag, 0)


def inference_result(model: DictG2PModel, sentence: str, idx, diag: Diagnostics, b: int) -> InferenceResult:
    weights, attn, maps, forced = [], [], [], []
    for i, ch in enumerate(sentence):
        rec = model.dictionary.resolve(ch)
        imap = model.keystore.index_map(rec.char)
        weights.append(diag.weights[b, i, : rec.m].copy())
        attn.append(diag.attention[b, i, : len(imap)].copy())
        maps.append(list(imap))
        forced.append(bool(diag.forced[b, i] >= 0))
    return InferenceResult(sentence, model.pronunciations(sentence, idx), np.asarray(idx), weights, attn, maps, forced)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    config: ModelConfig
    step: int = 0
    optimizer: OptimizerState | None = None
    history: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def seed(self) -> int:
        return self.config.seed


def _put_array(buf, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES[le.dtype.str]
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(le.tobytes())


def _get_array(r) -> np.ndarray:
    code, ndim = r.unpack("<BB")
    dtype = {v: k for k, v in _DTYPE_CODES.items()}.get(code)
    if dtype is None:
        raise CheckpointError(f"unknown dtype code {code}")
    shape = r.unpack(f"<{ndim}I")
    n = int(np.prod(shape, dtype=np.int64))
    raw = r.take(n * np.dtype(dtype).itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_flat(),
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "history": ckpt.history,
    }
    names = list(ckpt.params)
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        meta["optimizer"] = {"beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step}
    blob = json.dumps(meta).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        _put_array(buf, ckpt.params[name])
    buf.write(struct.pack("<B", ckpt.optimizer is not None))
    if ckpt.optimizer is not None:
        for name in names:
            has = name in ckpt.optimizer.m
            buf.write(struct.pack("<B", has))
            if has:
                _put_array(buf, ckpt.optimizer.m[name])
                _put_array(buf, ckpt.optimizer.v[name])
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes, expect: ModelConfig | None = None) -> Checkpoint:
    from .dictionary import CorruptFileError, _Reader

    r = _Reader(data)
    try:
        if r.take(4) != CKPT_MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        version, n = r.unpack("<II")
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        meta = json.loads(r.take(n).decode("utf-8"))
        config = ModelConfig.from_flat(meta["config"])
        (count,) = r.unpack("<I")
        params = {}
        for _ in range(count):
            name = r.string()
            params[name] = _get_array(r)
        (has_opt,) = r.unpack("<B")
        opt = None
        if has_opt:
            o = meta["optimizer"]
            opt = OptimizerState(o["beta1"], o["beta2"], o["eps"], o["step"])
            for name in params:
                (has,) = r.unpack("<B")
                if has:
                    opt.m[name] = _get_array(r)
                    opt.v[name] = _get_array(r)
    except CorruptFileError as exc:
        raise CheckpointError(str(exc)) from None
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if r.pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    if meta.get("config_hash") != config.hash():
        warnings.warn("checkpoint config hash does not match its stored config", stacklevel=2)
    if expect is not None and expect.hash() != config.hash():
        warnings.warn("checkpoint was trained with a different config", stacklevel=2)
    return Checkpoint(params, config, meta["step"], opt, meta["history"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path, expect: ModelConfig | None = None) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), expect)


def model_from_checkpoint(ckpt: Checkpoint, dictionary: Dictionary, keystore: KeyStore) -> DictG2PModel:
    model = DictG2PModel(dictionary, keystore, ckpt.config, params=None)
    model.load_state(ckpt.params)
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class EvalSet:
    sentences: list
    labels: list
    polyphone_masks: list


def polyphone_accuracy(model: DictG2PModel, evalset: EvalSet) -> float:
    preds, _ = model.predict(evalset.sentences)
    hit = total = 0
    for p, lab, mask in zip(preds, evalset.labels, evalset.polyphone_masks):
        hit += int((p[mask] == lab[mask]).sum())
        total += int(mask.sum())
    return hit / total if total else float("nan")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Sentence indices for update ``step`` (1-based), reshuffled every epoch."""
    per_epoch = max(1, math.ceil(n / batch_size))
    epoch, k = divmod(step - 1, per_epoch)
    order = _epoch_order(seed, epoch, n)
    return order[k * batch_size : (k + 1) * batch_size]


def step_noise(seed: int, step: int, shape, dtype) -> np.ndarray:
    return sample_gumbel(np.random.default_rng([seed, 3, step]), shape, dtype)


def train(
    model: DictG2PModel,
    sentences: list,
    targets: list,
    steps: int | None = None,
    resume: Checkpoint | None = None,
    evalset: EvalSet | None = None,
    metrics_path=None,
    rules: RuleSet | None = None,
    snapshot_every: int = 100,
    callback=None,
) -> Checkpoint:
    """Reconstruction-loss training; returns the final checkpoint.

    Only sentences and acoustic targets are consumed.  On divergence, the
    raised :class:`DivergenceError` carries the last good checkpoint.
    """
    cfg = model.config
    total = cfg.max_steps if steps is None else steps
    if len(sentences) != len(targets):
        raise ValueError("sentences and targets differ in length")
    if resume is not None:
        model.load_state(resume.params)
        state = resume.optimizer.copy() if resume.optimizer is not None else OptimizerState()
        start, history = resume.step, list(resume.history)
    else:
        state, start, history = OptimizerState(), 0, []
    arrays = model.param_arrays()
    M = model.pron_ids.shape[1]
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path else None

    def snapshot(step):
        return Checkpoint(model.state_dict(), cfg, step, state.copy(), list(history))

    last_good = snapshot(start)
    try:
        for step in range(start + 1, start + total + 1):
            idx = batch_indices(cfg.seed, step, len(sentences), cfg.batch_size)
            batch = model.make_batch([sentences[i] for i in idx], [targets[i] for i in idx], rules=rules)
            tau = cfg.tau(step)
            lr = noam_lr(step, cfg.warmup, cfg.d_model, cfg.lr_scale)
            noise = step_noise(cfg.seed, step, batch.ids.shape + (M,), cfg.np_dtype)
            try:
                loss, grads = model.gradients(batch, tau, noise)
                adam_step(arrays, grads, state, lr)
            except DivergenceError as exc:
                model.load_state(last_good.params)
                raise DivergenceError(f"step {step}: {exc}", last_good=last_good) from None
            if step % cfg.log_every == 0 or step == start + total:
                record = {"step": step, "loss": loss, "tau": tau, "lr": lr}
                if evalset is not None and cfg.eval_every and (step % cfg.eval_every == 0 or step == start + total):
                    record["eval_accuracy"] = polyphone_accuracy(model, evalset)
                history.append(record)
                log.info("step %d loss %.5f tau %.4f lr %.2e", step, loss, tau, lr)
                if metrics:
                    metrics.write(json.dumps(record) + "\n")
                    metrics.flush()
                if callback:
                    callback(record)
            if step % snapshot_every == 0:
                last_good = snapshot(step)
    finally:
        if metrics:
            metrics.close()
    return Checkpoint(model.state_dict(), cfg, start + total, state.copy(), history)


def train_on_corpus(model: DictG2PModel, corpus, split: str = "train", **kwargs) -> Checkpoint:
    """Train on one split of a corpus.  Only sentences and acoustic targets
    are passed on; any labels the corpus carries stay untouched."""
    part = corpus.subset(split)
    return train(model, part.sentences, part.targets, **kwargs)
