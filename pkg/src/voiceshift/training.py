"""Two-stage training.

Stage 1 fits the decoder, text encoder, and style encoder against the
speaker discriminator. Stage 2 freezes them, re-initializes the
discriminator, and distills a mel encoder (plus the phoneme projection)
that replaces the text path, optionally mixing decoder-synthesized samples
into the input stream as data augmentation.
"""

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import objectives as obj
from .alignment import (AlignmentMatrix, TextAligner, mix_alignment,
                        monotonic_path, soft_align)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (Batch, BatchItem, Manifest, UtteranceRecord,
                   sample_reference, segment_batch)
from .errors import (CheckpointError, DivergenceError, InvalidInputError,
                     NoFeasiblePathError)
from .features import (DspPitchExtractor, MelConfig, MelSpectrogram,
                       PitchExtractor, compute_energy, compute_mel,
                       extract_pitch, load_waveform, normalize_energy,
                       normalize_pitch)
from .networks import ModelBundle, ModelConfig, build_models
from .objectives import LossWeights

# log-mel range used when running DSP on raw decoder outputs
MEL_CLIP = (-14.0, 10.0)


@dataclass
class TrainingConfig:
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.99
    weight_decay: float = 1e-4
    batch_size: int = 64
    lambda_sty: float = 0.2
    lambda_cycle: float = 1.0
    lambda_adv: float = 1.0
    lambda_fm: float = 0.2
    lambda_mi: float = 1.0
    lambda_latent: float = 0.0
    p_mono: float = 0.5
    augment_fraction: float = 0.5
    seed: int = 0
    grad_clip: float = 5.0
    max_steps: int = 0  # 0 = run the configured epochs to completion
    preset: str = "full"
    mel_bias_init: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise InvalidInputError("lr and batch_size must be positive")
        if not (0.0 <= self.augment_fraction <= 1.0):
            raise InvalidInputError("augment_fraction must be in [0, 1]")
        if not (0.0 <= self.p_mono <= 1.0):
            raise InvalidInputError("p_mono must be a probability")
        if self.preset not in ("full", "tiny"):
            raise InvalidInputError(f"unknown preset {self.preset!r}")

    def loss_weights(self) -> LossWeights:
        return LossWeights(sty=self.lambda_sty, cycle=self.lambda_cycle,
                           adv=self.lambda_adv, fm=self.lambda_fm,
                           mi=self.lambda_mi, latent=self.lambda_latent)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def save_training_config(cfg: TrainingConfig, path) -> None:
    """Flat ``key = value`` file mirroring the TrainingConfig field names."""
    lines = [f"{k} = {getattr(cfg, k)}" for k in cfg.__dataclass_fields__]
    Path(path).write_text("\n".join(lines) + "\n")


def load_training_config(path) -> TrainingConfig:
    fields = TrainingConfig.__dataclass_fields__
    kwargs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in fields:
            raise InvalidInputError(f"{path}:{lineno}: unknown config line {raw!r}")
        ftype = fields[key].type
        if ftype == "int":
            kwargs[key] = int(value)
        elif ftype == "float":
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return TrainingConfig(**kwargs)


def model_config_for(cfg: TrainingConfig, manifest: Manifest) -> ModelConfig:
    base = ModelConfig.tiny if cfg.preset == "tiny" else ModelConfig
    return base(n_speakers=len(manifest.split.train_speakers),
                vocab_size=len(manifest.vocab),
                mel_bias_init=cfg.mel_bias_init)


@dataclass
class UtteranceFeatures:
    mel: np.ndarray          # [n_mels, T] log amplitude
    pitch_norm: np.ndarray   # [T]
    energy_norm: np.ndarray  # [T]
    phonemes: np.ndarray     # [M]
    soft: np.ndarray         # [M, T]
    hard: np.ndarray         # [M, T]
    labels: np.ndarray       # [T] hard phoneme positions
    speaker_id: str


class FeatureStore:
    """Per-utterance cache of everything the training loops consume."""

    def __init__(self, manifest: Manifest, mel_config: MelConfig,
                 aligner: TextAligner,
                 pitch_extractor: Optional[PitchExtractor] = None):
        self.manifest = manifest
        self.mel_config = mel_config
        self.aligner = aligner
        self.pitch_extractor = pitch_extractor or DspPitchExtractor()
        self._cache: Dict[str, UtteranceFeatures] = {}

    def get(self, record: UtteranceRecord) -> UtteranceFeatures:
        feat = self._cache.get(record.utt_id)
        if feat is None:
            feat = self._build(record)
            self._cache[record.utt_id] = feat
        return feat

    def _build(self, record: UtteranceRecord) -> UtteranceFeatures:
        w = load_waveform(Path(self.manifest.root) / record.audio_path,
                          self.mel_config.sample_rate)
        mel = compute_mel(w, self.mel_config)
        pitch = normalize_pitch(
            extract_pitch(w, self.mel_config, self.pitch_extractor))
        energy = normalize_energy(compute_energy(mel))
        soft = soft_align(mel, record.phonemes, self.aligner)
        hard = monotonic_path(soft)
        return UtteranceFeatures(
            mel=mel.values, pitch_norm=pitch.values, energy_norm=energy.values,
            phonemes=record.phonemes.ids, soft=soft.weights, hard=hard.weights,
            # per-frame targets are the aligned phoneme ids, not positions
            labels=record.phonemes.ids[hard.path()],
            speaker_id=record.speaker_id,
        )


def curves_from_mel(values: np.ndarray, mel_config: MelConfig,
                    pitch_extractor: PitchExtractor):
    """Normalized pitch/energy for a raw log-mel matrix (e.g. a decoder
    output); values are clipped into a sane log range first."""
    clipped = np.clip(values, *MEL_CLIP)
    mel = MelSpectrogram(clipped, mel_config)
    pitch = normalize_pitch(pitch_extractor.from_mel(mel))
    energy = normalize_energy(compute_energy(mel))
    return pitch.values, energy.values


def _mix_weights(feat: UtteranceFeatures, p_mono: float,
                 rng: np.random.Generator) -> np.ndarray:
    soft = AlignmentMatrix(feat.soft, "soft")
    hard = AlignmentMatrix(feat.hard, "hard")
    return mix_alignment(soft, hard, p_mono, rng).weights


def _train_view(manifest: Manifest) -> Manifest:
    """Manifest restricted to training-partition records (no val, no test)."""
    return Manifest(root=manifest.root, seed=manifest.seed,
                    vocab=manifest.vocab, records=manifest.train_records(),
                    split=manifest.split)


def _t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float32)


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


class _Optim:
    """AdamW over named parameters, serializable into the checkpoint."""

    def __init__(self, modules: Dict[str, torch.nn.Module], cfg: TrainingConfig):
        self.named = [(f"{mod_name}.{p_name}", p)
                      for mod_name, m in modules.items()
                      for p_name, p in m.named_parameters()]
        self.params = [p for _, p in self.named]
        self.opt = torch.optim.AdamW(self.params, lr=cfg.lr,
                                     betas=(cfg.beta1, cfg.beta2),
                                     weight_decay=cfg.weight_decay)
        self.grad_clip = cfg.grad_clip

    def step(self, loss):
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.params, self.grad_clip)
        self.opt.step()

    def state_tensors(self, prefix: str):
        tensors, steps = {}, {}
        for name, p in self.named:
            st = self.opt.state.get(p)
            if not st:
                continue
            tensors[f"{prefix}.exp_avg.{name}"] = st["exp_avg"].detach().numpy()
            tensors[f"{prefix}.exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().numpy()
            steps[name] = float(st["step"])
        return tensors, steps

    def load_state_tensors(self, prefix: str, tensors, steps):
        for name, p in self.named:
            if name not in steps:
                continue
            self.opt.state[p] = {
                "step": torch.tensor(steps[name]),
                "exp_avg": torch.from_numpy(
                    tensors[f"{prefix}.exp_avg.{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(
                    tensors[f"{prefix}.exp_avg_sq.{name}"].copy()),
            }


def _component_tensors(components: Dict[str, torch.nn.Module]):
    out = {}
    for cname, module in components.items():
        for pname, p in module.state_dict().items():
            out[f"{cname}.{pname}"] = p.detach().numpy()
    return out


def _load_component_tensors(components: Dict[str, torch.nn.Module], tensors):
    for cname, module in components.items():
        state = {}
        for pname in module.state_dict():
            key = f"{cname}.{pname}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint missing tensor {key}")
            state[pname] = torch.from_numpy(tensors[key].copy())
        module.load_state_dict(state)


def _rng_metadata(data_rng: np.random.Generator) -> dict:
    torch_state = base64.b64encode(
        torch.get_rng_state().numpy().tobytes()).decode("ascii")
    return {"torch_rng": torch_state,
            "data_rng": json.loads(json.dumps(data_rng.bit_generator.state))}


def _restore_rng(meta: dict) -> np.random.Generator:
    raw = base64.b64decode(meta["torch_rng"])
    torch.set_rng_state(torch.from_numpy(
        np.frombuffer(raw, dtype=np.uint8).copy()))
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["data_rng"]
    return rng


@dataclass
class StageResult:
    checkpoint_path: str
    log_path: str
    history: List[dict]
    models: ModelBundle
    initial_loss: float
    final_loss: float


class _EpochDriver:
    """Queue of record indices giving full passes in a resumable order."""

    def __init__(self, n_records: int, batch_size: int):
        self.n = n_records
        self.batch_size = batch_size
        self.queue: List[int] = []
        self.epoch = 0

    def next_batch(self, rng: np.random.Generator) -> List[int]:
        if not self.queue:
            self.queue = [int(i) for i in rng.permutation(self.n)]
            self.epoch += 1
        take = min(self.batch_size, len(self.queue))
        chunk, self.queue = self.queue[:take], self.queue[take:]
        return chunk

    def at_epoch_end(self) -> bool:
        return not self.queue


class _LossLog:
    def __init__(self, path, keys):
        self.path = Path(path)
        self.keys = keys
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._acc = {k: 0.0 for k in keys}
        self._count = 0

    def add(self, step_losses: dict):
        for k in self.keys:
            self._acc[k] += float(step_losses[k])
        self._count += 1

    def flush_epoch(self, step: int, epoch: int):
        if not self._count:
            return
        parts = " ".join(f"{k}={self._acc[k] / self._count:.6f}"
                         for k in self.keys)
        with open(self.path, "a") as fh:
            fh.write(f"step={step} epoch={epoch} {parts}\n")
        self._acc = {k: 0.0 for k in self.keys}
        self._count = 0


def _check_finite(value: float, dump):
    if math.isfinite(value):
        return
    path = dump()
    raise DivergenceError(f"training diverged (non-finite loss); state dumped",
                          dump_path=path)


def _speaker_index(manifest: Manifest) -> Dict[str, int]:
    return {s: i for i, s in enumerate(manifest.split.train_speakers)}


def _assemble_item(feat: UtteranceFeatures, weights: np.ndarray,
                   ref_feat: UtteranceFeatures, y_src: int,
                   y_trg: int) -> BatchItem:
    return BatchItem(mel=feat.mel, pitch=feat.pitch_norm,
                     energy=feat.energy_norm, phonemes=feat.phonemes,
                     alignment=weights, speaker=y_src,
                     reference_mel=ref_feat.mel, reference_speaker=y_trg,
                     frame_labels=feat.labels)


def _batch_tensors(batch: Batch):
    return {
        "x": _t(batch.mels),
        "p": _t(batch.pitches),
        "n": _t(batch.energies),
        "ids": torch.as_tensor(batch.phonemes),
        "d": _t(batch.alignments),
        "x_ref": _t(batch.reference_mels),
        "y_src": torch.as_tensor(batch.speakers),
        "y_trg": torch.as_tensor(batch.reference_speakers),
        "labels": torch.as_tensor(batch.frame_labels),
    }


def train_decoder_stage(cfg: TrainingConfig, manifest: Manifest, out_dir,
                        aligner: TextAligner,
                        pitch_extractor: Optional[PitchExtractor] = None,
                        mel_config: MelConfig = MelConfig(),
                        resume=None,
                        store: Optional[FeatureStore] = None) -> StageResult:
    """Stage 1: min over {decoder, text encoder, style encoder}, max over
    the discriminator, on real utterances of the training split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pitch_extractor = pitch_extractor or DspPitchExtractor()
    store = store or FeatureStore(manifest, mel_config, aligner, pitch_extractor)
    weights = cfg.loss_weights()
    model_config = model_config_for(cfg, manifest)
    spk_index = _speaker_index(manifest)
    train_view = _train_view(manifest)
    records = train_view.records
    if not records:
        raise InvalidInputError("no training records in manifest")

    torch.manual_seed(cfg.seed)
    models = build_models(model_config)
    trained = {"text_encoder": models.text_encoder,
               "style_encoder": models.style_encoder,
               "decoder": models.decoder}
    opt_g = _Optim(trained, cfg)
    opt_d = _Optim({"discriminator": models.discriminator}, cfg)
    data_rng = np.random.default_rng(cfg.seed + 1)
    driver = _EpochDriver(len(records), cfg.batch_size)
    step = 0

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.metadata.get("stage") != "decoder":
            raise CheckpointError("resume checkpoint is not a stage-1 state")
        _load_component_tensors({**trained,
                                 "discriminator": models.discriminator},
                                ck.tensors)
        opt_g.load_state_tensors("optim.g", ck.tensors,
                                 ck.metadata["optim_steps"]["g"])
        opt_d.load_state_tensors("optim.d", ck.tensors,
                                 ck.metadata["optim_steps"]["d"])
        data_rng = _restore_rng(ck.metadata)
        driver.queue = list(ck.metadata["queue"])
        driver.epoch = ck.metadata["epoch"]
        step = ck.metadata["step"]

    log = _LossLog(out_dir / "stage1.log",
                   ["rec", "sty", "cycle", "adv", "fm", "d", "total"])
    ckpt_path = out_dir / "stage1.ckpt"

    def save(tag=None):
        tensors = _component_tensors({**trained,
                                      "discriminator": models.discriminator})
        tg, sg = opt_g.state_tensors("optim.g")
        td, sd = opt_d.state_tensors("optim.d")
        tensors.update(tg)
        tensors.update(td)
        meta = {"stage": "decoder", "epoch": driver.epoch, "step": step,
                "queue": driver.queue,
                "optim_steps": {"g": sg, "d": sd},
                "training_config": cfg.to_dict(),
                "mel_config": mel_config.to_dict(),
                **_rng_metadata(data_rng)}
        path = ckpt_path if tag is None else out_dir / f"stage1_{tag}.ckpt"
        save_checkpoint(path, model_config.to_dict(), tensors, meta)
        return str(path)

    history: List[dict] = []
    max_steps = cfg.max_steps or None
    total_steps = None
    if max_steps is None:
        per_epoch = math.ceil(len(records) / cfg.batch_size)
        total_steps = cfg.epochs_stage1 * per_epoch

    while True:
        if max_steps is not None and step >= max_steps:
            break
        if total_steps is not None and step >= total_steps:
            break

        chunk = driver.next_batch(data_rng)
        items = []
        for idx in chunk:
            rec = records[idx]
            feat = store.get(rec)
            d_weights = _mix_weights(feat, cfg.p_mono, data_rng)
            y_trg_name = manifest.split.train_speakers[
                int(data_rng.integers(0, len(spk_index)))]
            ref_rec = sample_reference(y_trg_name, train_view, data_rng,
                                       exclude_utt=rec.utt_id)
            items.append(_assemble_item(feat, d_weights, store.get(ref_rec),
                                        spk_index[rec.speaker_id],
                                        spk_index[y_trg_name]))
        batch = segment_batch(items, data_rng, pad_id=model_config.vocab_size)
        t = _batch_tensors(batch)

        # components with zero weight are skipped entirely
        need_conv = (weights.sty > 0 or weights.adv > 0 or weights.cycle > 0)
        need_d = weights.adv > 0 or weights.fm > 0
        zero = torch.zeros(())

        h_text = models.text_encoder(t["ids"])
        content = torch.bmm(h_text, t["d"])
        s_x = models.style_encoder(t["x"])
        x_rec = models.decoder(content, s_x, t["p"], t["n"])
        s_ref = models.style_encoder(t["x_ref"]) if need_conv else None
        x_conv = (models.decoder(content, s_ref, t["p"], t["n"])
                  if need_conv else None)

        loss_d = zero
        if need_d:
            # discriminator update on the same batch, opposite objective sign
            fake = x_conv if x_conv is not None else x_rec
            loss_d = obj.adversarial_loss_d(
                models.discriminator(t["x"], t["y_src"]).logit,
                models.discriminator(fake.detach(), t["y_trg"]).logit)
            _check_finite(_f(loss_d), lambda: save("diverged"))
            opt_d.step(loss_d)

        cycle = zero
        if weights.cycle > 0:
            # cycle path: re-extract alignment and prosody from the conversion
            conv_np = x_conv.detach().numpy().astype(np.float64)
            d_hat = np.zeros_like(batch.alignments)
            p_hat = np.zeros_like(batch.pitches)
            n_hat = np.zeros_like(batch.energies)
            for i, idx in enumerate(chunk):
                rec = records[idx]
                mel_i = MelSpectrogram(np.clip(conv_np[i], *MEL_CLIP), mel_config)
                soft_i = soft_align(mel_i, rec.phonemes, aligner)
                m_i = len(rec.phonemes)
                try:
                    hard_i = monotonic_path(soft_i)
                    mixed = mix_alignment(soft_i, hard_i, cfg.p_mono, data_rng)
                except NoFeasiblePathError:
                    mixed = soft_i  # segment shorter than the phoneme sequence
                d_hat[i, :m_i] = mixed.weights
                p_hat[i], n_hat[i] = curves_from_mel(conv_np[i], mel_config,
                                                     pitch_extractor)
            x_cyc = models.decoder(torch.bmm(h_text, _t(d_hat)), s_x,
                                   _t(p_hat), _t(n_hat))
            cycle = obj.cycle_consistency_loss(t["x"], x_cyc)

        fm = zero
        if weights.fm > 0:
            with torch.no_grad():
                real_out = models.discriminator(t["x"], t["y_src"])
            fm = obj.feature_matching_loss(
                real_out.features,
                models.discriminator(x_rec, t["y_src"]).features)

        parts = obj.DecoderLossParts(
            rec=obj.mel_reconstruction_loss(t["x"], x_rec),
            sty=(obj.style_reconstruction_loss(
                    s_ref, models.style_encoder(x_conv))
                 if weights.sty > 0 else zero),
            cycle=cycle,
            adv=(obj.adversarial_loss_g(
                    models.discriminator(x_conv, t["y_trg"]).logit)
                 if weights.adv > 0 else zero),
            fm=fm,
        )
        total = obj.total_decoder_loss(parts, weights)
        _check_finite(_f(total), lambda: save("diverged"))
        opt_g.step(total)

        step += 1
        losses = {"rec": _f(parts.rec), "sty": _f(parts.sty),
                  "cycle": _f(parts.cycle), "adv": _f(parts.adv),
                  "fm": _f(parts.fm), "d": _f(loss_d),
                  "total": _f(total), "step": step}
        history.append(losses)
        log.add(losses)
        if driver.at_epoch_end():
            log.flush_epoch(step, driver.epoch)
            save(f"e{driver.epoch}")
            save()

    log.flush_epoch(step, driver.epoch)
    final = save()
    return StageResult(checkpoint_path=final, log_path=str(log.path),
                       history=history, models=models,
                       initial_loss=history[0]["rec"] if history else math.nan,
                       final_loss=history[-1]["rec"] if history else math.nan)


@dataclass
class AugmentedSample:
    """Decoder-synthesized pseudo-utterance used as a stage-2 input."""

    mel: MelSpectrogram
    features: UtteranceFeatures
    source_utt: str
    style_speaker: str
    reference_utt: str


def augment_sample(manifest: Manifest, models: ModelBundle,
                   store: FeatureStore, rng: np.random.Generator,
                   cfg: TrainingConfig, mel_config: MelConfig,
                   pitch_extractor: PitchExtractor,
                   source: Optional[UtteranceRecord] = None) -> AugmentedSample:
    """Convert a random training utterance to a random other speaker's style
    with the frozen stage-1 models; the result is a synthetic input whose
    phonemes and alignment are inherited from the source and whose prosody
    is re-extracted from the synthetic mel itself."""
    train_view = _train_view(manifest)
    records = train_view.records
    if source is None:
        source = records[int(rng.integers(0, len(records)))]
    feat = store.get(source)
    speakers = [s for s in manifest.split.train_speakers
                if s != source.speaker_id] or manifest.split.train_speakers
    style_speaker = speakers[int(rng.integers(0, len(speakers)))]
    ref = sample_reference(style_speaker, train_view, rng,
                           exclude_utt=source.utt_id)
    ref_feat = store.get(ref)
    d_weights = _mix_weights(feat, cfg.p_mono, rng)

    with torch.no_grad():
        h_text = models.text_encoder(torch.as_tensor(feat.phonemes).unsqueeze(0))
        content = torch.bmm(h_text, _t(d_weights).unsqueeze(0))
        s = models.style_encoder(_t(ref_feat.mel).unsqueeze(0))
        out = models.decoder(content, s, _t(feat.pitch_norm).unsqueeze(0),
                             _t(feat.energy_norm).unsqueeze(0))
    values = np.clip(out.squeeze(0).numpy().astype(np.float64), *MEL_CLIP)
    mel = MelSpectrogram(values, mel_config)
    pitch_norm, energy_norm = curves_from_mel(values, mel_config,
                                              pitch_extractor)
    synthetic = UtteranceFeatures(
        mel=values, pitch_norm=pitch_norm, energy_norm=energy_norm,
        phonemes=feat.phonemes, soft=feat.soft, hard=feat.hard,
        labels=feat.labels, speaker_id=style_speaker,
    )
    return AugmentedSample(mel=mel, features=synthetic,
                           source_utt=source.utt_id,
                           style_speaker=style_speaker,
                           reference_utt=ref.utt_id)


def load_stage1_models(ckpt_path, expect_stage="decoder"):
    """Rebuild the model bundle recorded in a checkpoint."""
    ck = load_checkpoint(ckpt_path)
    if expect_stage is not None and ck.metadata.get("stage") != expect_stage:
        raise CheckpointError(
            f"expected a {expect_stage} checkpoint, found "
            f"{ck.metadata.get('stage')!r}")
    model_config = ModelConfig.from_dict(ck.model_config)
    models = build_models(model_config)
    present = {name: module for name, module in models.named_components().items()
               if any(k.startswith(name + ".") for k in ck.tensors)}
    _load_component_tensors(present, ck.tensors)
    return models, ck


def train_encoder_stage(cfg: TrainingConfig, manifest: Manifest,
                        stage1_ckpt, out_dir, aligner: TextAligner,
                        pitch_extractor: Optional[PitchExtractor] = None,
                        mel_config: MelConfig = MelConfig(),
                        ablation_latent: bool = False,
                        resume=None,
                        store: Optional[FeatureStore] = None) -> StageResult:
    """Stage 2: distill the mel encoder against the frozen stage-1 models.

    Per item the input is a real utterance or (with probability
    ``augment_fraction``) a synthetic conversion; the teacher output is the
    frozen text-path conversion, the student re-derives it from audio alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pitch_extractor = pitch_extractor or DspPitchExtractor()
    store = store or FeatureStore(manifest, mel_config, aligner, pitch_extractor)
    weights = cfg.loss_weights()
    if ablation_latent and weights.latent == 0.0:
        weights = LossWeights(sty=weights.sty, cycle=weights.cycle,
                              adv=weights.adv, fm=weights.fm, mi=weights.mi,
                              latent=1.0)
    spk_index = _speaker_index(manifest)
    train_view = _train_view(manifest)
    records = train_view.records

    frozen, stage1_ck = load_stage1_models(stage1_ckpt)
    model_config = frozen.config
    for name in ("text_encoder", "style_encoder", "decoder"):
        module = getattr(frozen, name)
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)

    torch.manual_seed(cfg.seed)
    fresh = build_models(model_config)  # supplies E, P, and a fresh D
    models = ModelBundle(config=model_config,
                         text_encoder=frozen.text_encoder,
                         style_encoder=frozen.style_encoder,
                         decoder=frozen.decoder,
                         mel_encoder=fresh.mel_encoder,
                         discriminator=fresh.discriminator,
                         phoneme_projection=fresh.phoneme_projection)
    opt_e = _Optim({"mel_encoder": models.mel_encoder,
                    "phoneme_projection": models.phoneme_projection}, cfg)
    opt_d = _Optim({"discriminator": models.discriminator}, cfg)
    data_rng = np.random.default_rng(cfg.seed + 2)
    driver = _EpochDriver(len(records), cfg.batch_size)
    step = 0

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.metadata.get("stage") != "encoder":
            raise CheckpointError("resume checkpoint is not a stage-2 state")
        _load_component_tensors(
            {"mel_encoder": models.mel_encoder,
             "phoneme_projection": models.phoneme_projection,
             "discriminator": models.discriminator}, ck.tensors)
        opt_e.load_state_tensors("optim.e", ck.tensors,
                                 ck.metadata["optim_steps"]["e"])
        opt_d.load_state_tensors("optim.d", ck.tensors,
                                 ck.metadata["optim_steps"]["d"])
        data_rng = _restore_rng(ck.metadata)
        driver.queue = list(ck.metadata["queue"])
        driver.epoch = ck.metadata["epoch"]
        step = ck.metadata["step"]

    keys = ["en", "cycle", "mi", "adv", "fm", "d", "total"]
    if weights.latent > 0:
        keys.insert(5, "latent")
    log = _LossLog(out_dir / "stage2.log", keys)
    ckpt_path = out_dir / "stage2.ckpt"

    def save(tag=None):
        tensors = _component_tensors(models.named_components())
        te, se = opt_e.state_tensors("optim.e")
        td, sd = opt_d.state_tensors("optim.d")
        tensors.update(te)
        tensors.update(td)
        meta = {"stage": "encoder", "epoch": driver.epoch, "step": step,
                "queue": driver.queue,
                "optim_steps": {"e": se, "d": sd},
                "training_config": cfg.to_dict(),
                "mel_config": mel_config.to_dict(),
                "ablation_latent": bool(weights.latent > 0),
                "stage1_checkpoint": str(stage1_ckpt),
                **_rng_metadata(data_rng)}
        path = ckpt_path if tag is None else out_dir / f"stage2_{tag}.ckpt"
        save_checkpoint(path, model_config.to_dict(), tensors, meta)
        return str(path)

    history: List[dict] = []
    max_steps = cfg.max_steps or None
    total_steps = None
    if max_steps is None:
        per_epoch = math.ceil(len(records) / cfg.batch_size)
        total_steps = cfg.epochs_stage2 * per_epoch

    while True:
        if max_steps is not None and step >= max_steps:
            break
        if total_steps is not None and step >= total_steps:
            break

        chunk = driver.next_batch(data_rng)
        items = []
        for idx in chunk:
            rec = records[idx]
            exclude = rec.utt_id
            if data_rng.random() < cfg.augment_fraction:
                aug = augment_sample(manifest, models, store, data_rng, cfg,
                                     mel_config, pitch_extractor, source=rec)
                feat = aug.features
                y_src = spk_index[aug.style_speaker]
                exclude = aug.reference_utt  # keep x_ref distinct from it
            else:
                feat = store.get(rec)
                y_src = spk_index[rec.speaker_id]
            d_weights = _mix_weights(feat, cfg.p_mono, data_rng)
            y_trg_name = manifest.split.train_speakers[
                int(data_rng.integers(0, len(spk_index)))]
            ref_rec = sample_reference(y_trg_name, train_view, data_rng,
                                       exclude_utt=exclude)
            items.append(_assemble_item(feat, d_weights, store.get(ref_rec),
                                        y_src, spk_index[y_trg_name]))
        batch = segment_batch(items, data_rng, pad_id=model_config.vocab_size)
        t = _batch_tensors(batch)

        need_d = weights.adv > 0 or weights.fm > 0
        zero = torch.zeros(())

        with torch.no_grad():
            h_text = models.text_encoder(t["ids"])
            content = torch.bmm(h_text, t["d"])
            s_ref = models.style_encoder(t["x_ref"])
            x_teacher = models.decoder(content, s_ref, t["p"], t["n"])

        e_x = models.mel_encoder(t["x"])
        u = models.decoder(e_x, s_ref, t["p"], t["n"])  # student conversion

        loss_d = zero
        if need_d:
            loss_d = obj.adversarial_loss_d(
                models.discriminator(x_teacher, t["y_trg"]).logit,
                models.discriminator(u.detach(), t["y_trg"]).logit)
            _check_finite(_f(loss_d), lambda: save("diverged"))
            opt_d.step(loss_d)

        cycle = zero
        v = None
        if weights.cycle > 0:
            # cycle: re-encode the teacher output and rebuild it from its own
            # style plus prosody re-extracted from the student conversion
            u_np = u.detach().numpy().astype(np.float64)
            p_u = np.zeros_like(batch.pitches)
            n_u = np.zeros_like(batch.energies)
            for i in range(len(chunk)):
                p_u[i], n_u[i] = curves_from_mel(u_np[i], mel_config,
                                                 pitch_extractor)
            with torch.no_grad():
                s_teacher = models.style_encoder(x_teacher)
            v = models.decoder(models.mel_encoder(x_teacher), s_teacher,
                               _t(p_u), _t(n_u))
            cycle = obj.cycle_consistency_loss(x_teacher, v)

        fm = zero
        if weights.fm > 0:
            with torch.no_grad():
                teacher_out = models.discriminator(x_teacher, t["y_trg"])
            fm_fake = v if v is not None else u
            fm = obj.feature_matching_loss(
                teacher_out.features,
                models.discriminator(fm_fake, t["y_trg"]).features)

        parts = obj.EncoderLossParts(
            en=obj.encoder_loss(x_teacher, u),
            cycle=cycle,
            mi=(obj.phoneme_mi_loss(models.phoneme_projection(e_x),
                                    t["labels"])
                if weights.mi > 0 else zero),
            adv=(obj.adversarial_loss_g(
                    models.discriminator(u, t["y_trg"]).logit)
                 if weights.adv > 0 else zero),
            fm=fm,
            latent=(obj.latent_loss(content, e_x)
                    if weights.latent > 0 else None),
        )
        total = obj.total_encoder_loss(parts, weights)
        _check_finite(_f(total), lambda: save("diverged"))
        opt_e.step(total)

        step += 1
        losses = {"en": _f(parts.en), "cycle": _f(parts.cycle),
                  "mi": _f(parts.mi), "adv": _f(parts.adv),
                  "fm": _f(parts.fm), "d": _f(loss_d),
                  "total": _f(total), "step": step}
        if parts.latent is not None:
            losses["latent"] = _f(parts.latent)
        history.append(losses)
        log.add(losses)
        if driver.at_epoch_end():
            log.flush_epoch(step, driver.epoch)
            save(f"e{driver.epoch}")
            save()

    log.flush_epoch(step, driver.epoch)
    final = save()
    return StageResult(checkpoint_path=final, log_path=str(log.path),
                       history=history, models=models,
                       initial_loss=history[0]["en"] if history else math.nan,
                       final_loss=history[-1]["en"] if history else math.nan)
