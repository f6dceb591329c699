"""The full omni model: named sub-modules, modality frontends, and checkpoint I/O."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .audio import ASR_RATE, Waveform, compute_mel, resample
from .codec import Codec, CodecConfig
from .errors import ConfigError, InputError
from .llm import LLMConfig, ModalityHead, OmniLLM, SpecialPromptTokens
from .nn import Module
from .speech_encoder import EncoderConfig, SpeechAdapter, SpeechEncoder
from .speech_generator import ARDecoder, NARDecoder, SpeechDecoderConfig
from .tensor import Tensor
from .vision import VideoClip, VisionAdapter, VisionEncoder, image_tiles, video_frames

STAGE_KEY = "meta.stage_index"
MODULE_NAMES = ("vision_encoder", "vision_adapter", "llm", "speech_encoder", "speech_adapter",
                "special_prompt_tokens", "modality_head", "codec", "nar_decoder", "ar_decoder")


@dataclass(frozen=True)
class ModelConfig:
    d_vis: int = 64
    vision_blocks: int = 1
    vision_heads: int = 4
    llm: LLMConfig = field(default_factory=lambda: LLMConfig(d_model=64, n_blocks=2, max_ctx=512))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: SpeechDecoderConfig = field(default_factory=lambda: SpeechDecoderConfig(length_ratio=12.0))
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(channels=(16, 32, 64, 128, 128)))
    max_tiles: int = 12

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Full-scale geometry; far too large to instantiate in numpy, kept for reference."""
        return cls(d_vis=1024, vision_blocks=24, vision_heads=16, llm=LLMConfig.full_scale(),
                   encoder=EncoderConfig.full_scale(), decoder=SpeechDecoderConfig.full_scale(),
                   codec=CodecConfig())

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class OmniModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or ModelConfig.toy()
        rng = np.random.default_rng(seed)
        d = cfg.llm.d_model
        self.vision_encoder = VisionEncoder(cfg.d_vis, cfg.vision_blocks, cfg.vision_heads, rng, dtype)
        self.vision_adapter = VisionAdapter(cfg.d_vis, d, rng, dtype)
        self.llm = OmniLLM(cfg.llm, rng, dtype)
        self.speech_encoder = SpeechEncoder(cfg.encoder, rng, dtype)
        self.speech_adapter = SpeechAdapter(cfg.encoder.hidden, d, rng, dtype)
        self.special_prompt_tokens = SpecialPromptTokens(cfg.llm.n_special, d, rng, dtype)
        self.modality_head = ModalityHead(d, dtype)
        self.codec = Codec(cfg.codec, rng, dtype)
        self.nar_decoder = NARDecoder(d, cfg.decoder, rng, dtype)
        self.ar_decoder = ARDecoder(cfg.decoder, rng, dtype)
        self.cfg = cfg

    def module(self, name: str) -> Module:
        if name not in MODULE_NAMES:
            raise ConfigError(f"unknown module {name!r}; valid: {', '.join(MODULE_NAMES)}")
        return getattr(self, name)

    def freeze_all_but(self, trainable) -> None:
        for name in MODULE_NAMES:
            self.module(name).set_trainable(name in trainable)

    # ------------------------------------------------------------ frontends

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Visual tokens in LLM width: 256 per tile, thumbnail last."""
        _, tiles = image_tiles(image, self.cfg.max_tiles)
        return self.encode_tiles(tiles)

    def encode_tiles(self, tiles) -> Tensor:
        parts = [self.vision_encoder.encode_tile(t) for t in tiles]
        if not parts:
            raise InputError("no image tiles to encode")
        feats = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
        return self.vision_adapter(feats)

    def encode_video(self, clip: VideoClip) -> tuple[int, Tensor]:
        schedule, frames = video_frames(clip)
        return len(schedule), self.encode_tiles(frames)

    def encode_audio(self, wave: Waveform) -> Tensor:
        """Waveform at any rate -> speech tokens in LLM width."""
        if wave.sample_rate != ASR_RATE:
            wave = resample(wave, ASR_RATE)
        return self.speech_adapter(self.speech_encoder(compute_mel(wave)))

    # ------------------------------------------------------------ checkpoints

    def state_dict(self) -> dict[str, np.ndarray]:
        return checkpoint.state_dict(self)

    def load_state_dict(self, state, strict: bool = True) -> list[str]:
        return checkpoint.load_state_dict(self, state, strict)

    def save(self, path, stage_index: int = -1) -> None:
        state = dict(self.state_dict())
        state[STAGE_KEY] = np.array([stage_index], dtype=np.int64)
        checkpoint.save(path, state)

    def load(self, path: str | Path) -> int:
        """Load weights; returns the index of the stage that wrote the checkpoint (-1 if unknown)."""
        state = checkpoint.load(path)
        self.load_state_dict(state)
        return int(state[STAGE_KEY][0]) if STAGE_KEY in state else -1
