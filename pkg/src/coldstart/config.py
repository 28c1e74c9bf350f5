"""Experiment configuration: a flat key=value text file, CLI overrides, and a
content fingerprint that stamps every stage artifact so mismatched pipelines
refuse to chain."""

import hashlib
from dataclasses import dataclass, fields


@dataclass
class ExperimentConfig:
    dataset_path: str = "data/toy.tsv"
    dataset_format: str = "tsv"
    d: int = 32
    lr: float = 0.003
    layers: int = 4
    path_len: int = 6
    k_intrinsic: int = 3
    k_extrinsic: int = 8
    tau: float = 0.2
    delete_ratio: float = 0.2
    subst_ratio: float = 0.2
    aug: str = "delete"
    user_threshold: int = 25
    item_threshold: int = 15
    intrinsic_ratio: float = 0.7
    c_frac: float = 0.2
    k_eval: int = 20
    seed: int = 7
    tasks: str = "Rg,Cg,Rp,Cp"
    sampler: str = "dynamic"
    gt_epochs: int = 30
    pretrain_epochs: int = 10
    finetune_epochs: int = 10
    recon_batch: int = 128
    contrast_batch: int = 64
    finetune_batch: int = 64
    blocks: int = 2
    heads: int = 2
    freeze_encoders: bool = False
    replan_each_epoch: bool = False

    def task_list(self) -> list[str]:
        return [t.strip() for t in self.tasks.split(",") if t.strip()]

    def fingerprint(self) -> str:
        """sha256 over the sorted, canonically typed key=value lines; file
        ordering and formatting do not matter, every semantic field does."""
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name}={getattr(self, f.name)!r}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def parse_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def build_config(file_values: dict[str, str] | None = None,
                 overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Typed config from defaults, then file values, then CLI overrides.
    Unknown keys are errors."""
    cfg = ExperimentConfig()
    typed = {f.name: f.type for f in fields(cfg)}
    for source in (file_values or {}, overrides or {}):
        for key, val in source.items():
            if key not in typed:
                raise KeyError(f"unknown config key: {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, val in ("1", "true", "True"))
            elif isinstance(current, int):
                setattr(cfg, key, int(val))
            elif isinstance(current, float):
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, str(val))
    return cfg
