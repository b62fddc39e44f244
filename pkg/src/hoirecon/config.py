"""Flat ``key = value`` run configuration.

Every key has a typed default. Files may contain blank lines and ``#``
comments. Unknown keys and unparsable values raise :class:`ConfigError`,
which the CLI maps to exit code 2. The resolved configuration is written
next to every run's outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0

    # dataset generation
    data_sequences: int = 20
    data_image_size: int = 64
    data_focal: float = 64.0
    data_voxel_res: int = 16
    data_max_attempts: int = 20

    # inputs produced by earlier stages
    dataset: str = ""
    checkpoint: str = ""
    recon_dir: str = ""
    traj_dir: str = ""
    split: str = "test"
    sequences: str = ""  # comma-separated ids; empty = every id in ``split``

    # model
    model_M: int = 4
    model_P: int = 4
    model_heads: int = 4
    model_d: int = 64
    model_g: int = 8
    model_r: int = 16
    model_m: int = 32
    model_n_min: int = 2
    model_n_max: int = 6

    # training
    train_epochs: int = 35
    train_batch_size: int = 8
    train_lr: float = 1e-3
    train_beta: float = 1.0
    train_grad_clip: float = 1.0
    train_warmup_steps: int = 100

    # sampling
    sample_steps: int = 25
    sample_views: int = 4
    sample_threshold: float = 0.0
    sample_inpaint: bool = True

    # pose estimation
    pose_n_refs: int = 30
    pose_rounds: int = 3
    pose_refine_iters: int = 30
    pose_lambda_proj: float = 10.0
    pose_lambda_smooth: float = 3.0
    pose_use_recon: bool = False
    ransac_iterations: int = 200
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.999
    provider_rot_deg: float = 5.0
    matcher_matches: int = 400
    matcher_outliers: float = 0.3
    matcher_noise_px: float = 1.0

    # hand alignment
    align_lambda_contact: float = 200.0
    align_lambda_kpoints: float = 20.0
    align_lambda_vsmooth: float = 20.0
    align_iters: int = 3000
    align_d_max: float = 0.02
    align_vis_tol: float = 0.005

    # evaluation
    eval_samples: int = 10000
    eval_gt_as_pred: bool = False

    def set(self, key: str, raw: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(self, key, _parse(key, raw.strip(), types[key]))

    def update(self, pairs: dict[str, str]) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "config.txt"
        path.write_text(self.to_text())
        return path

    def sequence_list(self) -> list[str]:
        return [s.strip() for s in self.sequences.split(",") if s.strip()]


def _parse(key: str, raw: str, typ):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {name}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_pairs(lines, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"{p}: {e.strerror}") from e
        cfg.update(parse_pairs(text.splitlines(), str(p)))
    if overrides:
        cfg.update(overrides)
    return cfg
