"""Plain-text ``key = value`` run configuration shared by every command."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .decoding import Beam
from .losses import LossWeights
from .metrics import FrequencyBuckets
from .model import ModelConfig
from .smoothing import KernelSpec
from .training import TrainConfig
from .validation import InputError


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(x) for x in str(text).split(",") if x.strip())


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "threads": (int, 1),
    "data.min_count": (int, 1),
    "data.char_level": (_bool, False),
    "model.d_model": (int, 64),
    "model.n_enc_layers": (int, 2),
    "model.n_dec_layers": (int, 2),
    "model.n_heads": (int, 4),
    "model.d_ffn": (int, 128),
    "model.adapter_inner": (int, 0),  # 0: d_model / 2
    "model.adapter_activation": (str, "relu"),
    "model.max_len": (int, 64),
    "kernel.kind": (str, "neg_exp_distance"),
    "kernel.T": (float, 10.0),
    "loss.alpha": (float, 0.2),
    "loss.beta": (float, 0.2),
    "loss.knn_k": (int, 8),
    "loss.clamp_epsilon": (float, 1e-12),
    "loss.per_token_mean": (_bool, False),
    "pretrain.epochs": (int, 30),
    "pretrain.warmup_steps": (int, 4000),
    "pretrain.peak_lr": (float, 5e-4),
    "train.epochs": (int, 30),
    "train.warmup_steps": (int, 4000),
    "train.peak_lr": (float, 5e-4),
    "train.batch_tokens": (int, 1024),
    "train.patience": (int, 5),
    "train.refresh": (_bool, True),
    "train.enable_l_i": (_bool, True),
    "train.enable_l_r": (_bool, True),
    "train.overlap_refresh": (_bool, False),
    "inference.lambda": (float, 0.5),
    "inference.knn_k": (int, 8),
    "decode.beam": (int, 4),
    "decode.length_penalty": (float, 0.6),
    "decode.max_len": (int, 0),  # 0: model max_len
    "decode.batch_size": (int, 32),
    "datastore.mode": (str, "exact"),
    "datastore.n_list": (int, 64),
    "datastore.n_probe": (int, 8),
    "eval.knn_k": (int, 8),
    "eval.buckets": (_int_list, ()),  # empty: vocabulary quartiles
    "bench.batch_sizes": (_int_list, (8, 32, 128)),
    "bench.repetitions": (int, 3),
}


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, raw, origin="override"):
        if key not in SCHEMA:
            raise InputError(f"{origin}: unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = raw if not isinstance(raw, str) else parser(raw.strip())
        except ValueError as exc:
            raise InputError(f"{origin}: bad value for {key}: {exc}") from None
        return self

    def update(self, pairs, origin="override"):
        for item in pairs:
            if "=" not in item:
                raise InputError(f"{origin}: expected key=value, got {item!r}")
            key, raw = item.split("=", 1)
            self.set(key.strip(), raw, origin)
        return self

    @classmethod
    def parse(cls, text, origin="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{origin}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            cfg.set(key.strip(), raw, f"{origin}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(encoding="utf-8"), str(path))

    def to_text(self):
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in SCHEMA)

    def write_snapshot(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text(), encoding="utf-8")

    # --- typed views -----------------------------------------------------------

    def model_config(self, vocab_size):
        v = self.values
        return ModelConfig(
            vocab_size, d_model=v["model.d_model"], n_enc_layers=v["model.n_enc_layers"],
            n_dec_layers=v["model.n_dec_layers"], n_heads=v["model.n_heads"], d_ffn=v["model.d_ffn"],
            adapter_inner=v["model.adapter_inner"] or None, max_len=v["model.max_len"],
            adapter_activation=v["model.adapter_activation"],
        )

    def kernel(self):
        return KernelSpec(self["kernel.kind"], self["kernel.T"])

    def _train(self, prefix):
        v = self.values
        return TrainConfig(
            weights=LossWeights(v["loss.alpha"], v["loss.beta"]), knn_k=v["loss.knn_k"], kernel=self.kernel(),
            epochs=v[f"{prefix}.epochs"], warmup_steps=v[f"{prefix}.warmup_steps"], peak_lr=v[f"{prefix}.peak_lr"],
            batch_tokens=v["train.batch_tokens"], seed=v["seed"], refresh_enabled=v["train.refresh"],
            enable_l_i=v["train.enable_l_i"], enable_l_r=v["train.enable_l_r"], patience=v["train.patience"],
            clamp_eps=v["loss.clamp_epsilon"], per_token_mean=v["loss.per_token_mean"],
            overlap_refresh=v["train.overlap_refresh"], eval_knn_k=v["eval.knn_k"], threads=v["threads"],
        )

    def pretrain_config(self):
        return self._train("pretrain")

    def train_config(self):
        return self._train("train")

    def beam(self):
        return Beam(self["decode.beam"], self["decode.length_penalty"])

    def buckets(self, vocab_size):
        cuts = self["eval.buckets"]
        return FrequencyBuckets(cuts) if cuts else FrequencyBuckets.quartiles(vocab_size)

    def index_options(self):
        return {"mode": self["datastore.mode"], "n_list": self["datastore.n_list"], "n_probe": self["datastore.n_probe"], "seed": self["seed"]}
