"""Reproducible toy experiments shared by the CLI, scripts/ and the acceptance suite."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .features import ExtractorSpec, toy_spec
from .fixtures import make_fixture_set
from .harness import (ABLATION_VARIANTS, AblationResult, ToyGeneratorSpec, TrainRunConfig, WARMUP_LOSS,
                      run_ablation, train)
from .losses import LossConfig
from .toy import SYNCNET_ARCH, ToyArch, load_toy_extractor, save_toy_extractor, train_toy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ToyAblationConfig:
    """Everything that defines one toy ablation run.

    Each seed warm-starts a generator on pixel loss only, then every variant
    fine-tunes that same checkpoint on the full objective. Only the sync term
    differs between variants.
    """

    seeds: tuple = (0, 1, 2)
    warmup_steps: int = 1000
    steps: int = 300
    lr: float = 2e-3
    batch_size: int = 2
    probability: str = "clamp"
    extractor_fixture_seed: int = 11
    extractor_seed: int = 7
    train_fixture_seed: int = 3
    eval_fixture_seed: int = 4
    n_train: int = 16
    train_frames: int = 25
    n_eval: int = 4
    eval_frames: int = 50
    variants: tuple = ABLATION_VARIANTS
    spec: ToyGeneratorSpec = field(default_factory=ToyGeneratorSpec)

    def base_run(self) -> TrainRunConfig:
        return TrainRunConfig(loss=LossConfig(probability=self.probability), steps=self.steps,
                              batch_size=self.batch_size, lr=self.lr)


def toy_extractors(cfg: ToyAblationConfig = ToyAblationConfig(), cache_dir=None) -> tuple[ExtractorSpec, ExtractorSpec]:
    """(long-window AV-HuBERT-style, short-window SyncNet-style) toy extractors.

    Trained from seeded fixtures; with ``cache_dir`` they are saved there and
    reused on later calls.
    """
    specs = []
    for style, arch in (("avhubert", ToyArch()), ("syncnet", SYNCNET_ARCH)):
        path = Path(cache_dir) / f"toy_{style}_f{cfg.extractor_fixture_seed}_s{cfg.extractor_seed}.pt" \
            if cache_dir else None
        if path is not None and path.exists():
            model = load_toy_extractor(path)
        else:
            fixtures = make_fixture_set(20, seed=cfg.extractor_fixture_seed)
            model = train_toy(fixtures, seed=cfg.extractor_seed, arch=arch)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                save_toy_extractor(model, path)
        specs.append(toy_spec(model, f"toy-{style}"))
    return specs[0], specs[1]


def toy_ablation(out=None, cfg: Optional[ToyAblationConfig] = None, seeds=None, steps=None,
                 fixture_seed: Optional[int] = None, cache_dir=None) -> AblationResult:
    """Run the four-variant toy ablation and, with ``out``, write ``ablation.json`` there."""
    cfg = cfg or ToyAblationConfig()
    if seeds is not None:
        cfg = replace(cfg, seeds=tuple(seeds))
    if steps is not None:
        cfg = replace(cfg, steps=steps)
    if fixture_seed is not None:
        cfg = replace(cfg, train_fixture_seed=fixture_seed, eval_fixture_seed=fixture_seed + 1)
    started = time.time()
    extractor, baseline_extractor = toy_extractors(cfg, cache_dir)
    fixtures = make_fixture_set(cfg.n_train, n_frames=cfg.train_frames, seed=cfg.train_fixture_seed)
    eval_fixtures = make_fixture_set(cfg.n_eval, n_frames=cfg.eval_frames, seed=cfg.eval_fixture_seed)
    result = run_ablation(cfg.base_run(), fixtures, extractor, baseline_extractor, eval_fixtures,
                          seeds=cfg.seeds, spec=cfg.spec, variants=cfg.variants,
                          warmup_steps=cfg.warmup_steps, warmup_loss=WARMUP_LOSS)
    elapsed = time.time() - started
    logger.info("toy ablation finished in %.0f s", elapsed)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        record = {"config": _jsonable(asdict(cfg)), "runtime_s": elapsed, **result.to_record()}
        (out / "ablation.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    result.runtime_s = elapsed
    return result


def training_progress(steps: int = 500, seed: int = 0, cache_dir=None, history_path=None) -> list[dict]:
    """Loss history of one default-configuration run (unsupervised sync loss)."""
    cfg = ToyAblationConfig()
    extractor, _ = toy_extractors(cfg, cache_dir)
    fixtures = make_fixture_set(cfg.n_train, n_frames=cfg.train_frames, seed=cfg.train_fixture_seed)
    run = TrainRunConfig(steps=steps, seed=seed)
    return train(run, fixtures, extractor, history_path=history_path).history


def trailing_mean(history: list[dict], step: int, window: int = 10, key: str = "total") -> float:
    """Mean of ``key`` over the ``window`` steps ending at 1-based ``step``."""
    if step < window or step > len(history):
        raise ValueError(f"need steps {step - window + 1}..{step}, history has {len(history)}")
    vals = [r[key] for r in history[step - window:step]]
    return sum(vals) / len(vals)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x
