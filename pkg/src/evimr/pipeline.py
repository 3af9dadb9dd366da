"""Configuration, checkpoints, two-stage training and the diagnostic experiments.

Every function here is deterministic given the run config: data, masking,
shuffling and initialization all derive from ``RunConfig.seed`` through named
sub-streams.
"""

from dataclasses import dataclass, field, fields, replace
import csv
import hashlib
import json
import math
import os
import struct
import zlib

import numpy as np

from evimr import metrics, nn, synth
from evimr.evidential import constrain_batch, sigmoid, uncertainties_batch
from evimr.heads import LossWeights, MomentSpan, Targets, clip_centers, foreground_mask
from evimr.metrics import Detection
from evimr.model import QR_PARAMS, ModelConfig, MomentModel
from evimr.regularizers import RegularizerMode
from evimr.synth import BiasSpec, SynthConfig


class ConfigError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------- config

@dataclass(frozen=True)
class ModelSection:
    width: int = 16
    n_rff: int = 4
    fusion: str = "rff"
    residual: bool = True
    concat_hidden: int = 32
    offset_scale: float = 0.25


@dataclass(frozen=True)
class TrainSection:
    mode: str = "geom"
    qr_enabled: bool = True
    qr_epochs: int = 30
    qr_lr: float = 1e-5
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 32
    mask_policy: str = "one_noun"


@dataclass(frozen=True)
class EvalSection:
    nms_threshold: float = 0.7
    iid_fraction: float = 0.2
    ood_quantile: float = 0.1
    vis_ladder: tuple = (0.0, 0.25, 0.5, 1.0, 2.0)
    text_ladder: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    calib_bins: int = 10


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    synth: SynthConfig = field(default_factory=SynthConfig)
    bias: BiasSpec = field(default_factory=BiasSpec)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("synth", "bias", "model", "loss", "train", "eval")

    def synth_config(self):
        return replace(self.synth, seed=self.seed)

    def model_config(self):
        m = self.model
        return ModelConfig(feat_dim=self.synth.D, width=m.width, vocab_size=self.synth.vocab_size,
                           n_rff=m.n_rff, fusion=m.fusion, residual=m.residual,
                           concat_hidden=m.concat_hidden, offset_scale=m.offset_scale)

    def to_flat(self):
        flat = {"seed": self.seed, "out": self.out}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if sec == "synth" and f.name == "seed":
                    continue
                v = getattr(obj, f.name)
                flat[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
        return flat

    @classmethod
    def from_flat(cls, flat):
        base = cls()
        top = {}
        sections = {sec: {} for sec in cls.SECTIONS}
        for key, value in flat.items():
            if key in ("seed", "out"):
                top[key] = _coerce(key, getattr(base, key), value)
                continue
            sec, _, name = key.partition(".")
            if sec not in sections or not name:
                raise ConfigError(f"unknown config key {key!r}")
            obj = getattr(base, sec)
            known = {f.name for f in fields(obj)} - ({"seed"} if sec == "synth" else set())
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = _coerce(key, getattr(obj, name), value)
        try:
            built = {sec: replace(getattr(base, sec), **kv) for sec, kv in sections.items()}
            cfg = replace(base, **top, **built)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        return cfg.validate()

    def validate(self):
        try:
            self.synth_config().validate()
            self.model_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        t, e = self.train, self.eval
        checks = [
            (0 <= self.seed < 2 ** 64, "seed must be an unsigned 64-bit integer"),
            (t.mode in {m.value for m in RegularizerMode}, f"unknown regularizer mode {t.mode!r}"),
            (t.qr_epochs >= 0 and t.epochs >= 0, "epoch counts must be >= 0"),
            (t.qr_lr > 0 and t.lr > 0, "learning rates must be > 0"),
            (t.batch_size >= 1, "batch_size must be >= 1"),
            (self.model.width >= 1 and self.model.offset_scale > 0, "model sizes must be positive"),
            (0 < e.nms_threshold <= 1, "nms_threshold must lie in (0, 1]"),
            (0 < e.iid_fraction < 1, "iid_fraction must lie in (0, 1)"),
            (0 < e.ood_quantile < 1, "ood_quantile must lie in (0, 1)"),
            (len(e.vis_ladder) > 0 and len(e.text_ladder) > 0, "noise ladders must be non-empty"),
            (all(x >= 0 for x in e.vis_ladder), "visual noise levels must be >= 0"),
            (all(0 <= x <= 1 for x in e.text_ladder), "text noise ratios must lie in [0, 1]"),
            (e.calib_bins >= 1, "calib_bins must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            synth.parse_policy(t.mask_policy)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    def config_hash(self):
        """SHA-256 over everything that affects results (the output directory does not)."""
        flat = self.to_flat()
        del flat["out"]
        blob = json.dumps(flat, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(key, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                                  for x in value):
            raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
        return tuple(float(x) for x in value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def load_config(path=None, seed=None, out=None):
    flat = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            try:
                flat = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: expected a JSON object of flat dotted keys")
    if seed is not None:
        flat["seed"] = seed
    if out is not None:
        flat["out"] = out
    return RunConfig.from_flat(flat)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True))
        f.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"DEMRCK01"
_CK_HEAD = struct.Struct("<8sIQI32sI")  # magic, version, step, epoch, sha256 digest, n_tensors
_DTYPE_F32 = 1


@dataclass
class Checkpoint:
    step: int
    epoch: int
    config_hash: str
    tensors: dict  # name -> float32 array; optimizer moments as adam.m/<name>, adam.v/<name>

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.step == other.step and self.epoch == other.epoch
                and self.config_hash == other.config_hash
                and list(self.tensors) == list(other.tensors)
                and all(a.shape == other.tensors[k].shape and a.tobytes() == other.tensors[k].tobytes()
                        for k, a in self.tensors.items()))

    @classmethod
    def from_model(cls, model: MomentModel, config_hash, epoch):
        s = model.store
        tensors = {}
        for prefix, src in (("", s.params), ("adam.m/", s.m), ("adam.v/", s.v)):
            for name, arr in src.items():
                tensors[prefix + name] = np.asarray(arr, dtype=np.float32)
        return cls(s.step, epoch, config_hash, tensors)

    def restore(self, model: MomentModel):
        s = model.store
        for prefix, dst in (("", s.params), ("adam.m/", s.m), ("adam.v/", s.v)):
            for name in dst:
                key = prefix + name
                if key not in self.tensors:
                    raise ValueError(f"checkpoint lacks tensor {key!r}")
                arr = self.tensors[key]
                if arr.shape != dst[name].shape:
                    raise ValueError(f"checkpoint tensor {key!r} has shape {arr.shape}, model expects {dst[name].shape}")
                dst[name] = arr.astype(np.float64)
        s.step = self.step
        s.zero_grad()
        return model

    def to_bytes(self):
        parts = [_CK_HEAD.pack(CHECKPOINT_MAGIC, 1, self.step, self.epoch,
                               bytes.fromhex(self.config_hash), len(self.tensors))]
        for name, arr in self.tensors.items():
            nb = name.encode("utf-8")
            parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _DTYPE_F32, arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data):
        if len(data) < _CK_HEAD.size + 4:
            raise ValueError("checkpoint is truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise ValueError("checkpoint CRC mismatch (corrupted file)")
        magic, version, step, epoch, digest, n = _CK_HEAD.unpack_from(body, 0)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint (magic {magic!r})")
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = _CK_HEAD.size
        tensors = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + ln].decode("utf-8")
            off += ln
            dtype, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            if dtype != _DTYPE_F32:
                raise ValueError(f"tensor {name!r}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(body, "<f4", count, off).reshape(shape).astype(np.float32)
            off += 4 * count
        if off != len(body):
            raise ValueError("checkpoint has trailing bytes")
        return cls(step, epoch, digest.hex(), tensors)

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, expected_hash=None):
        with open(path, "rb") as f:
            ck = cls.from_bytes(f.read())
        if expected_hash is not None and ck.config_hash != expected_hash:
            raise ConfigError(f"{path}: checkpoint was written under config {ck.config_hash[:12]}, "
                              f"current config is {expected_hash[:12]}")
        return ck


# ---------------------------------------------------------------- data

@dataclass
class Splits:
    train: list
    test_iid: list
    test_ood: list

    def get(self, name):
        if name not in ("train", "test_iid", "test_ood"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def build_splits(cfg: RunConfig):
    scfg = cfg.synth_config()
    data = synth.generate_dataset(scfg, cfg.bias)
    tr, iid, ood = synth.split_iid_ood(data, scfg, cfg.bias, iid_fraction=cfg.eval.iid_fraction,
                                       density_quantile=cfg.eval.ood_quantile)
    return Splits(tr, iid, ood)


def vocabulary(cfg: RunConfig):
    return synth.Vocabulary.build(cfg.synth.vocab_size, cfg.synth.n_concepts)


def make_targets(samples, n_clips, masked=None):
    """``Targets`` for a batch; ``masked`` is an optional list of ``MaskedQuery``."""
    gt = np.array([[s.gt.start, s.gt.end] for s in samples])
    tg = Targets(gt=gt, fg_mask=foreground_mask(gt, n_clips))
    if masked:
        qb = [i for i, mq in enumerate(masked) for _ in mq.mask_positions]
        tg.qr_batch = np.array(qb, dtype=np.int64)
        tg.qr_pos = np.array([p for mq in masked for p in mq.mask_positions], dtype=np.int64)
        tg.qr_target = np.array([t for mq in masked for t in mq.targets], dtype=np.int64)
    return tg


# ---------------------------------------------------------------- training

LOG_FIELDS = ("epoch", "stage", "lr", "bce", "l1", "giou", "mr", "nll", "reg", "qr", "total",
              "grad_norm", "grad_norm_fusion", "grad_norm_mr", "grad_norm_evid", "grad_norm_qr",
              "mean_evidence", "mean_aleatoric", "mean_epistemic")
_LOSS_KEYS = ("bce", "l1", "giou", "mr", "nll", "reg", "qr", "total")


def _grad_groups(store):
    fusion_names = [n for n in store.grads if n.startswith(("rff.", "concat.", "video_in.", "tok_emb"))]

    def norm(names):
        return math.sqrt(sum(float(np.sum(store.grads[n] ** 2)) for n in names))

    return {
        "grad_norm": store.grad_norm(),
        "grad_norm_fusion": norm(fusion_names),
        "grad_norm_mr": store.grad_norm("mr."),
        "grad_norm_evid": store.grad_norm("evid."),
        "grad_norm_qr": store.grad_norm("qr."),
    }


def stage_plan(cfg: RunConfig):
    t = cfg.train
    plan = []
    if t.qr_enabled:
        plan += [("qr", t.qr_lr)] * t.qr_epochs
    plan += [("main", t.lr)] * t.epochs
    return plan


@dataclass
class TrainResult:
    model: MomentModel
    log: list
    checkpoint: Checkpoint


def train(cfg: RunConfig, out_dir=None, splits=None, resume=None, on_epoch=None):
    """Run both training stages; returns the final model, epoch log and checkpoint.

    With ``out_dir`` the checkpoint is rewritten after every epoch, so a
    numerical failure leaves the last good state on disk.
    """
    cfg.validate()
    h = cfg.config_hash()
    splits = splits or build_splits(cfg)
    data = splits.train
    if not data:
        raise ConfigError("training split is empty")
    vocab = vocabulary(cfg)
    model = MomentModel(cfg.model_config(), seed=cfg.seed)
    store = model.store
    mode = RegularizerMode(cfg.train.mode)
    weights = cfg.loss
    L = cfg.synth.L_v
    start_epoch = 0
    if resume is not None:
        resume.restore(model)
        start_epoch = resume.epoch
    ck_path = os.path.join(out_dir, "checkpoint.bin") if out_dir else None
    ck = Checkpoint.from_model(model, h, start_epoch)
    if ck_path and resume is None:
        ck.save(ck_path)

    video_all, tokens_all, _ = synth.stack(data)
    log = []
    plan = stage_plan(cfg)
    for epoch in range(start_epoch, len(plan)):
        stage, lr = plan[epoch]
        qr_stage = stage == "qr"
        store.frozen = set() if qr_stage else set(QR_PARAMS)
        order = synth.substream(cfg.seed, "shuffle", epoch).permutation(len(data))
        sums = dict.fromkeys(_LOSS_KEYS, 0.0)
        gsums = None
        ev_sum = np.zeros(3)
        n_batches = 0
        for lo in range(0, len(data), cfg.train.batch_size):
            idx = order[lo:lo + cfg.train.batch_size]
            batch = [data[i] for i in idx]
            tokens = tokens_all[idx]
            masked = None
            if qr_stage:
                masked = [synth.mask_for_qr(s, cfg.train.mask_policy, vocab,
                                            synth.substream(cfg.seed, "masking", epoch, s.sample_id))
                          for s in batch]
                tokens = np.array([mq.tokens for mq in masked], dtype=np.int64)
            tg = make_targets(batch, L, masked)
            parts, out, _ = model.loss_and_grad(video_all[idx], tokens, tg, weights, mode, qr_active=qr_stage)
            if not math.isfinite(parts["total"]) or not math.isfinite(store.grad_norm()):
                store.zero_grad()
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {n_batches}")
            g = _grad_groups(store)
            gsums = g if gsums is None else {k: gsums[k] + g[k] for k in g}
            for k in _LOSS_KEYS:
                sums[k] += parts[k]
            ev_sum += _evidence_stats(out, tg.fg_mask)
            nn.optimizer_step(store, lr)
            n_batches += 1
        row = {"epoch": epoch, "stage": stage, "lr": lr}
        row.update({k: v / n_batches for k, v in sums.items()})
        row.update({k: v / n_batches for k, v in gsums.items()})
        row.update(zip(("mean_evidence", "mean_aleatoric", "mean_epistemic"), (ev_sum / n_batches).tolist()))
        log.append(row)
        ck = Checkpoint.from_model(model, h, epoch + 1)
        if ck_path:
            ck.save(ck_path)
        if on_epoch is not None:
            on_epoch(row)
    store.frozen = set()
    return TrainResult(model, log, ck)


def _evidence_stats(out, fg_mask):
    raw = out["raw_ev"][fg_mask].reshape(-1, 4)
    (_, u, a, b), _ = constrain_batch(raw)
    alea, epi = uncertainties_batch(u, a, b)
    return np.array([np.mean(2 * u + a), np.mean(alea), np.mean(epi)])


def write_train_log(path, log):
    write_csv(path, LOG_FIELDS, [[row[k] for k in LOG_FIELDS] for row in log])


def model_from_checkpoint(cfg: RunConfig, ck: Checkpoint):
    if ck.config_hash != cfg.config_hash():
        raise ConfigError("checkpoint config hash does not match the run config")
    return ck.restore(MomentModel(cfg.model_config(), seed=cfg.seed))


# ---------------------------------------------------------------- inference

@dataclass
class SplitPredictions:
    """Per-clip outputs for ``N`` samples and ``L`` clips; NIG arrays are (N, L, 2)."""
    starts: np.ndarray
    ends: np.ndarray
    scores: np.ndarray
    gamma: np.ndarray
    aleatoric: np.ndarray
    epistemic: np.ndarray


def predict_split(model: MomentModel, samples, batch_size=256):
    if not samples:
        raise ConfigError("cannot evaluate an empty split")
    L, D = samples[0].video.shape
    if D != model.cfg.feat_dim:
        raise ConfigError(f"split has feature width {D}, model expects {model.cfg.feat_dim}")
    chunks = []
    for lo in range(0, len(samples), batch_size):
        video, tokens, _ = synth.stack(samples[lo:lo + batch_size])
        if tokens.max(initial=0) >= model.cfg.vocab_size:
            raise ConfigError("split uses token ids outside the model vocabulary")
        p = model.predict(video, tokens)
        chunks.append((p["starts"], p["ends"], sigmoid(p["fg_logit"]), p["gamma"], p["aleatoric"], p["epistemic"]))
    return SplitPredictions(*(np.concatenate(c) for c in zip(*chunks)))


def detections(pred: SplitPredictions, i):
    return [Detection(MomentSpan(float(s), float(e)), float(sc), j)
            for j, (s, e, sc) in enumerate(zip(pred.starts[i], pred.ends[i], pred.scores[i]))]


@dataclass
class EvalResult:
    report: metrics.MetricReport
    ranked: list
    top_clip: np.ndarray
    epistemic: np.ndarray  # per-sample, at the top detection's clip
    aleatoric: np.ndarray
    error: np.ndarray  # per-sample mean |boundary - gamma| at the same clip


def evaluate_predictions(pred: SplitPredictions, samples, nms_threshold=metrics.NMS_THRESHOLD):
    gts = [s.gt for s in samples]
    ranked = [metrics.nms(detections(pred, i), nms_threshold) for i in range(len(samples))]
    top = np.array([r[0].source for r in ranked])
    rows = np.arange(len(samples))
    b = np.array([[g.start, g.end] for g in gts])
    err = np.mean(np.abs(b - pred.gamma[rows, top]), axis=-1)
    return EvalResult(
        report=metrics.metric_report(ranked, gts),
        ranked=ranked,
        top_clip=top,
        epistemic=pred.epistemic[rows, top].mean(axis=-1),
        aleatoric=pred.aleatoric[rows, top].mean(axis=-1),
        error=err,
    )


def evaluate(model, samples, nms_threshold=metrics.NMS_THRESHOLD):
    return evaluate_predictions(predict_split(model, samples), samples, nms_threshold)


def sample_uncertainty(model, samples, nms_threshold=metrics.NMS_THRESHOLD):
    return evaluate(model, samples, nms_threshold).epistemic


# ---------------------------------------------------------------- experiments

def ood_contrast(model, cfg: RunConfig, splits: Splits):
    thr = cfg.eval.nms_threshold
    return metrics.ood_uncertainty_contrast(sample_uncertainty(model, splits.test_iid, thr),
                                            sample_uncertainty(model, splits.test_ood, thr))


@dataclass
class NoiseSweep:
    rows: list  # (noise_level, modality, uncertainty)
    level_means: dict  # modality -> list of per-level means
    var_vis: float
    var_text: float
    delta_var: float

    def summary(self):
        return {"delta_var": self.delta_var, "level_means": self.level_means,
                "var_text": self.var_text, "var_vis": self.var_vis}


def noise_sweep(model, cfg: RunConfig, samples, vis_ladder=None, text_ladder=None):
    vis_ladder = cfg.eval.vis_ladder if vis_ladder is None else tuple(vis_ladder)
    text_ladder = cfg.eval.text_ladder if text_ladder is None else tuple(text_ladder)
    if not vis_ladder or not text_ladder:
        raise ConfigError("noise ladders must be non-empty")
    vocab = vocabulary(cfg)
    rows = []
    means = {"visual": [], "text": []}
    for modality, ladder in (("visual", vis_ladder), ("text", text_ladder)):
        for level in ladder:
            if modality == "visual":
                spec = synth.NoiseSpec(visual_sigma=level)
                noisy = [synth.inject_visual_noise(s, spec, cfg.seed) for s in samples]
            else:
                spec = synth.NoiseSpec(text_replace_ratio=level)
                noisy = [synth.inject_text_noise(s, spec, cfg.seed, vocab) for s in samples]
            u = sample_uncertainty(model, noisy, cfg.eval.nms_threshold)
            rows.extend((level, modality, float(x)) for x in u)
            means[modality].append(float(np.mean(u)))
    vv, vt, dv = metrics.modality_variance(means["visual"], means["text"])
    return NoiseSweep(rows, means, vv, vt, dv)


def calibrate(model, cfg: RunConfig, samples):
    """Rank correlation of normalized boundary error with both uncertainties."""
    res = evaluate(model, samples, cfg.eval.nms_threshold)
    err = res.error / max(float(res.error.max()), 1e-12)
    rep = metrics.calibration_report(err, res.aleatoric, res.epistemic, cfg.eval.calib_bins)
    rows = list(zip(err.tolist(), res.aleatoric.tolist(), res.epistemic.tolist()))
    return rep, rows


# ---------------------------------------------------------------- gradient check

GRADCHECK_MODEL = ModelConfig(feat_dim=4, width=4, vocab_size=16, n_rff=2, concat_hidden=6)
MAX_CHECK_PARAMS = 64


def gradcheck_model(mode, fusion="rff", seed=0, corrupt=None, h=1e-5, tol=1e-4):
    """Finite-difference check of every parameter of a small assembled model.

    Loss weights are set to 1 so the evidential and regularizer paths are not
    drowned out in shared parameters. ``corrupt`` names a parameter whose
    analytic gradient is perturbed (negative control).
    """
    cfg = replace(GRADCHECK_MODEL, fusion=fusion)
    model = MomentModel(cfg, seed=seed)
    too_big = [n for n, p in model.store.params.items() if p.size > MAX_CHECK_PARAMS]
    if too_big:
        raise ConfigError(f"gradient check needs <= {MAX_CHECK_PARAMS} entries per tensor: {too_big}")
    rng = synth.substream(seed, "gradcheck")
    B, L, Lq = 2, 6, 3
    video = rng.normal(size=(B, L, cfg.feat_dim))
    tokens = rng.integers(0, cfg.vocab_size, size=(B, Lq))
    gt = np.array([[0.1, 0.55], [0.4, 0.9]])
    tg = Targets(gt=gt, fg_mask=foreground_mask(gt, L), qr_batch=np.array([0, 1]),
                 qr_pos=np.array([1, 2]), qr_target=rng.integers(1, cfg.vocab_size, size=2))
    w = LossWeights(lambda_der=1.0, lambda_geom=1.0, lambda_Reg=1.0)
    _, out, frozen = model.loss_and_grad(video, tokens, tg, w, mode, qr_active=True)
    analytic = {k: v.copy() for k, v in model.store.grads.items()}
    if corrupt is not None:
        analytic[corrupt] = analytic[corrupt] * 1.01 + 1e-3
    feats = out["fused_video"].copy()
    reg = RegularizerMode(mode) in (RegularizerMode.VANILLA, RegularizerMode.GEOM)

    def loss():
        return model.frozen_loss(video, tokens, tg, w, mode, True, feats, frozen if reg else None)

    return nn.grad_check(loss, model.store.params, analytic, h=h, tol=tol)

