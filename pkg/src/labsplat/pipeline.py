"""Pipeline stages tying the modules into one colorization run.

A run is described by one INI config file and driven stage by stage:

    synth -> select-keyview -> train-colorizer -> colorize-views
          -> reconstruct -> render -> evaluate

Every stage is idempotent (same config, byte-identical outputs) and each
stage skips itself inside `cmd_run_all` when its output files already
exist. Stage failures raise :class:`StageError`, whose message is
prefixed with the stage name.

Randomness: all stages derive their generator seeds from the single
``[pipeline] seed`` value by hashing it together with a module tag
(see :func:`derive_seed`), so one integer pins the whole run.

Config schema (INI, ``;``-style full-line comments, relative paths are
resolved against the config file's directory)::

    [pipeline]
    seed = 0                  ; master seed for every stage
    scene = static            ; static | dynamic
    dataset = out/dataset     ; input dir: mono/, cameras.txt, ...
    output = out              ; stage outputs are written below this
    key_color = ...           ; key-view colorization, may contain {key}
    manifest =                ; optional generated-augmentation manifest
    holdout = view06 view07   ; views kept out of supervision

    [synth]                   ; optional: generate `dataset` first
    gaussians = 500
    cameras = 8
    resolution = 64
    ring_radius = 2.5
    ring_height = 2.2
    focal =                   ; blank: derived from the ring
    palette = 0.10 0.14 0.42, 0.93 0.79 0.48
    motion = none             ; none | linear | sinusoidal
    motion_amplitude = 0.25

    [keyview]
    provider = builtin        ; builtin | file
    feature_file =

    [augment]
    grid_sizes = 2 3 4
    elastic_alpha = 34.0
    elastic_sigma = 4.0
    rotate_flip = true
    grid_shuffle = true
    elastic = true
    stack = true

    [colorizer]
    iterations = 1500
    crop_size = 64
    lr_start = 1e-4
    lr_end = 1e-6

    [reconstruct]
    iterations = 2000
    warmup_fraction = 0.5
    sh_degree = 1
    deformation_degree = 1    ; dynamic scenes only
    init = points             ; points (dataset scene.txt) | random
    init_count = 2000
    lr_position = 1.6e-4
    lr_rotation = 5e-3
    lr_scale = 5e-3
    lr_opacity = 5e-2
    lr_sh = 2.5e-3
    lr_deformation = 1e-3

Without a config file every value above is a default, the dataset is
generated under ``<output>/dataset``, and the key-view colorization is
taken from the dataset's ground-truth color render of the selected key
view.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import colorizer as colorizer_mod
from .augment import AugmentConfig, AugmentSample, Provenance, ingest_generated
from .colorizer import ColorizerNet, ColorizerTrainConfig, load_checkpoint, predict_ab, save_checkpoint
from .colorspace import chroma_planes, denormalize_lab, lab_to_rgb, normalize_lab, rgb_to_lab
from .io import read_cameras, read_planes, read_png, write_planes, write_png
from .keyview import KeyviewConfig, make_provider, view_entropies
from .metrics import colorfulness, load_correspondences, matching_error, psnr
from .reconstruct import (
    ReconstructConfig,
    SupervisionSet,
    SupervisionView,
    init_scene,
    render_novel,
    save_optimizer_state,
    train_scene,
    write_reconstruct_log,
)
from .scene import load_scene, save_scene
from .synth import SyntheticSceneSpec, write_dataset

KEYVIEW_REPORT_MAGIC = "labsplat-keyview-report 1"
METRICS_MAGIC = "# labsplat-metrics 1"
SUMMARY_MAGIC = "labsplat-evaluate-summary 1"

_SCENE_TYPES = ("static", "dynamic")
_INIT_MODES = ("points", "random")


class StageError(RuntimeError):
    """A pipeline stage failed; the message carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def derive_seed(seed: int, tag: str) -> int:
    """Per-module seed: low 32 bits of sha256 over "<seed>:<tag>"."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    scene_type: str = "static"
    dataset_dir: Path = Path("out/dataset")
    output_dir: Path = Path("out")
    key_color: str | None = None
    manifest: Path | None = None
    holdout: tuple = ("view06", "view07")
    threads: int | None = None
    synth_spec: SyntheticSceneSpec | None = dataclasses.field(
        default_factory=SyntheticSceneSpec
    )
    keyview: KeyviewConfig = dataclasses.field(default_factory=KeyviewConfig)
    augment: AugmentConfig = dataclasses.field(default_factory=AugmentConfig)
    colorizer: ColorizerTrainConfig = dataclasses.field(
        default_factory=lambda: ColorizerTrainConfig(iterations=1500, crop_size=64)
    )
    reconstruct: ReconstructConfig = dataclasses.field(default_factory=ReconstructConfig)
    reconstruct_init: str = "points"

    def __post_init__(self) -> None:
        if self.scene_type not in _SCENE_TYPES:
            raise ValueError(f"PipelineConfig: scene must be one of {_SCENE_TYPES}, got {self.scene_type!r}")
        if self.reconstruct_init not in _INIT_MODES:
            raise ValueError(f"PipelineConfig: init must be one of {_INIT_MODES}, got {self.reconstruct_init!r}")
        if self.threads is not None and self.threads < 1:
            raise ValueError(f"PipelineConfig: threads must be >= 1, got {self.threads}")
        if len(set(self.holdout)) != len(self.holdout):
            raise ValueError("PipelineConfig: duplicate holdout view ids")
        if self.synth_spec is not None:
            moving = self.synth_spec.motion != "none"
            if moving != (self.scene_type == "dynamic"):
                raise ValueError(
                    "PipelineConfig: scene type and [synth] motion disagree "
                    f"({self.scene_type!r} vs motion {self.synth_spec.motion!r})"
                )

    @property
    def is_dynamic(self) -> bool:
        return self.scene_type == "dynamic"

    def stage_dir(self, name: str) -> Path:
        return self.output_dir / name


# ---------------------------------------------------------------------------
# config file parsing
# ---------------------------------------------------------------------------

_SECTION_KEYS = {
    "pipeline": {"seed", "scene", "dataset", "output", "key_color", "manifest", "holdout", "threads"},
    "synth": {
        "gaussians", "cameras", "resolution", "ring_radius", "ring_height",
        "focal", "palette", "motion", "motion_amplitude", "look_at",
    },
    "keyview": {"provider", "feature_file", "include_self"},
    "augment": {
        "grid_sizes", "elastic_alpha", "elastic_sigma",
        "rotate_flip", "grid_shuffle", "elastic", "stack",
    },
    "colorizer": {"iterations", "crop_size", "lr_start", "lr_end"},
    "reconstruct": {
        "iterations", "warmup_fraction", "sh_degree", "deformation_degree",
        "init", "init_count", "lr_position", "lr_rotation", "lr_scale",
        "lr_opacity", "lr_sh", "lr_deformation",
    },
}


def _parse_palette(text: str):
    stops = []
    for chunk in text.split(","):
        parts = chunk.split()
        if len(parts) != 3:
            raise ValueError(f"palette stop {chunk.strip()!r} is not three numbers")
        stops.append(tuple(float(p) for p in parts))
    return tuple(stops)


def _get(section, key, cast, fallback):
    raw = section.get(key, None)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        if cast is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return cast(raw)
    except ValueError as exc:
        raise ValueError(f"key {key!r}: {exc}") from exc


def load_config(
    path: str | Path | None = None,
    seed: int | None = None,
    output: str | Path | None = None,
    threads: int | None = None,
) -> PipelineConfig:
    """Build a PipelineConfig from an INI file plus CLI overrides.

    `path` None means all defaults. `seed`, `output`, and `threads`
    override the file when given.
    """
    parser = configparser.ConfigParser(interpolation=None)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ValueError(f"config: cannot read {path}: {exc}") from exc
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ValueError(f"config: {exc}") from exc
        base = path.parent

    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ValueError(f"config: unknown section [{section}]")
        unknown = set(parser[section]) - _SECTION_KEYS[section]
        if unknown:
            raise ValueError(f"config: unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")

    def resolve(p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    try:
        pl = parser["pipeline"] if parser.has_section("pipeline") else {}
        cfg_seed = _get(pl, "seed", int, 0) if seed is None else int(seed)
        scene_type = _get(pl, "scene", str, "static")
        out_dir = resolve(_get(pl, "output", str, "out")) if output is None else Path(output)
        dataset = _get(pl, "dataset", str, None)
        dataset_dir = resolve(dataset) if dataset is not None else out_dir / "dataset"
        key_color = _get(pl, "key_color", str, None)
        manifest = _get(pl, "manifest", str, None)
        holdout_text = _get(pl, "holdout", str, "view06 view07")
        cfg_threads = _get(pl, "threads", int, None) if threads is None else int(threads)

        if parser.has_section("synth") or path is None:
            sy = parser["synth"] if parser.has_section("synth") else {}
            look_at_text = _get(sy, "look_at", str, "0 0 0")
            look_at = tuple(float(v) for v in look_at_text.split())
            synth_spec = SyntheticSceneSpec(
                gaussians=_get(sy, "gaussians", int, 500),
                cameras=_get(sy, "cameras", int, 8),
                resolution=_get(sy, "resolution", int, 64),
                ring_radius=_get(sy, "ring_radius", float, 2.5),
                ring_height=_get(sy, "ring_height", float, 2.2),
                focal=_get(sy, "focal", float, None),
                palette=_get(sy, "palette", _parse_palette, SyntheticSceneSpec().palette),
                motion=_get(sy, "motion", str, "none"),
                motion_amplitude=_get(sy, "motion_amplitude", float, 0.25),
                look_at=look_at,
                seed=derive_seed(cfg_seed, "synth"),
            )
        else:
            synth_spec = None

        kv = parser["keyview"] if parser.has_section("keyview") else {}
        feature_file = _get(kv, "feature_file", str, None)
        keyview = KeyviewConfig(
            provider=_get(kv, "provider", str, "builtin"),
            feature_file=resolve(feature_file) if feature_file is not None else None,
            include_self=_get(kv, "include_self", bool, True),
        )

        au = parser["augment"] if parser.has_section("augment") else {}
        grid_text = _get(au, "grid_sizes", str, "2 3 4")
        augment = AugmentConfig(
            grid_sizes=tuple(int(v) for v in grid_text.split()),
            elastic_alpha=_get(au, "elastic_alpha", float, 34.0),
            elastic_sigma=_get(au, "elastic_sigma", float, 4.0),
            seed=derive_seed(cfg_seed, "augment"),
            enable_rotate_flip=_get(au, "rotate_flip", bool, True),
            enable_grid_shuffle=_get(au, "grid_shuffle", bool, True),
            enable_elastic=_get(au, "elastic", bool, True),
            stack_transforms=_get(au, "stack", bool, True),
        )

        co = parser["colorizer"] if parser.has_section("colorizer") else {}
        colorizer = ColorizerTrainConfig(
            iterations=_get(co, "iterations", int, 1500),
            crop_size=_get(co, "crop_size", int, 64),
            lr_start=_get(co, "lr_start", float, 1e-4),
            lr_end=_get(co, "lr_end", float, 1e-6),
            seed=derive_seed(cfg_seed, "colorizer"),
        )

        re_ = parser["reconstruct"] if parser.has_section("reconstruct") else {}
        reconstruct = ReconstructConfig(
            iterations=_get(re_, "iterations", int, 2000),
            warmup_fraction=_get(re_, "warmup_fraction", float, 0.5),
            sh_degree=_get(re_, "sh_degree", int, 1),
            deformation_degree=_get(re_, "deformation_degree", int, 1),
            init_count=_get(re_, "init_count", int, 2000),
            lr_position=_get(re_, "lr_position", float, 1.6e-4),
            lr_rotation=_get(re_, "lr_rotation", float, 5e-3),
            lr_scale=_get(re_, "lr_scale", float, 5e-3),
            lr_opacity=_get(re_, "lr_opacity", float, 5e-2),
            lr_sh=_get(re_, "lr_sh", float, 2.5e-3),
            lr_deformation=_get(re_, "lr_deformation", float, 1e-3),
            seed=derive_seed(cfg_seed, "reconstruct"),
        )
        reconstruct_init = _get(re_, "init", str, "points")

        cfg = PipelineConfig(
            seed=cfg_seed,
            scene_type=scene_type,
            dataset_dir=dataset_dir,
            output_dir=out_dir,
            key_color=key_color,
            manifest=resolve(manifest) if manifest is not None else None,
            holdout=tuple(holdout_text.split()),
            threads=cfg_threads,
            synth_spec=synth_spec,
            keyview=keyview,
            augment=augment,
            colorizer=colorizer,
            reconstruct=reconstruct,
            reconstruct_init=reconstruct_init,
        )
    except ValueError as exc:
        raise ValueError(f"config: {exc}" if not str(exc).startswith("config:") else str(exc)) from exc

    if cfg.manifest is not None and not cfg.manifest.is_file():
        raise ValueError(f"config: manifest {cfg.manifest} does not exist")
    if cfg.keyview.feature_file is not None and not Path(cfg.keyview.feature_file).is_file():
        raise ValueError(f"config: keyview feature_file {cfg.keyview.feature_file} does not exist")
    if cfg.synth_spec is None and not cfg.dataset_dir.is_dir():
        raise ValueError(f"config: dataset directory {cfg.dataset_dir} does not exist and no [synth] section is given")
    return cfg


# ---------------------------------------------------------------------------
# dataset access helpers
# ---------------------------------------------------------------------------


def _load_camera_file(cfg: PipelineConfig, stage: str):
    path = cfg.dataset_dir / "cameras.txt"
    try:
        ids, cams, times = read_cameras(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, str(exc)) from exc
    if cfg.is_dynamic and times is None:
        raise StageError(stage, f"scene is dynamic but {path} carries no timestamps")
    unknown = [v for v in cfg.holdout if v not in ids]
    if unknown:
        raise StageError(stage, f"holdout view(s) not in the camera file: {', '.join(unknown)}")
    return ids, cams, times


def _load_mono(cfg: PipelineConfig, stage: str, view_id: str) -> np.ndarray:
    path = cfg.dataset_dir / "mono" / f"{view_id}.planes"
    try:
        planes = read_planes(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, str(exc)) from exc
    if planes.shape[0] != 1:
        raise StageError(stage, f"{path} holds {planes.shape[0]} planes, expected a single luminance plane")
    return planes[0]


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def synth_outputs(cfg: PipelineConfig):
    return [cfg.dataset_dir / "cameras.txt", cfg.dataset_dir / "scene.txt"]


def cmd_synth(cfg: PipelineConfig) -> dict:
    """Generate the synthetic dataset described by the [synth] section."""
    if cfg.synth_spec is None:
        raise StageError("synth", "config has no [synth] section")
    try:
        return write_dataset(cfg.synth_spec, cfg.dataset_dir)
    except ValueError as exc:
        raise StageError("synth", str(exc)) from exc


# ---------------------------------------------------------------------------
# select-keyview
# ---------------------------------------------------------------------------


def keyview_outputs(cfg: PipelineConfig):
    return [cfg.stage_dir("keyview") / "report.txt"]


def cmd_select_keyview(cfg: PipelineConfig) -> str:
    """Pick the maximum-entropy non-holdout view and write the report."""
    stage = "select-keyview"
    ids, _, _ = _load_camera_file(cfg, stage)
    candidates = [v for v in ids if v not in cfg.holdout]
    if not candidates:
        raise StageError(stage, "every view is held out; nothing can be the key view")
    images = [_load_mono(cfg, stage, v) for v in candidates]
    try:
        provider = make_provider(cfg.keyview)
        scores = view_entropies(
            images, provider, view_ids=candidates,
            include_self=cfg.keyview.include_self, threads=cfg.threads,
        )
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc
    selected = candidates[int(np.argmax(scores))]

    report = cfg.stage_dir("keyview") / "report.txt"
    report.parent.mkdir(parents=True, exist_ok=True)
    lines = [KEYVIEW_REPORT_MAGIC, f"selected {selected}"]
    lines.extend(f"entropy {v} {float(s)!r}" for v, s in zip(candidates, scores))
    report.write_text("\n".join(lines) + "\n")
    return selected


def read_keyview_report(path: str | Path):
    """Returns (selected view id, {view id: entropy} in report order)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ValueError(f"cannot read key view report {path}: {exc}") from exc
    if not lines or lines[0] != KEYVIEW_REPORT_MAGIC:
        raise ValueError(f"{path} is not a key view report (bad magic line)")
    if len(lines) < 2 or not lines[1].startswith("selected "):
        raise ValueError(f"{path}:2: expected a selected line")
    selected = lines[1][len("selected "):].strip()
    entropies = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] != "entropy":
            raise ValueError(f"{path}:{lineno}: expected 'entropy <view> <value>'")
        entropies[parts[1]] = float(parts[2])
    if selected not in entropies:
        raise ValueError(f"{path}: selected view {selected!r} has no entropy line")
    return selected, entropies


# ---------------------------------------------------------------------------
# train-colorizer
# ---------------------------------------------------------------------------


def colorizer_outputs(cfg: PipelineConfig):
    d = cfg.stage_dir("colorizer")
    return [d / "checkpoint.bin", d / "train_log.csv"]


def _resolve_key_color(cfg: PipelineConfig, key_id: str) -> Path:
    if cfg.key_color is None:
        return cfg.dataset_dir / "color" / f"{key_id}.planes"
    resolved = cfg.key_color.replace("{key}", key_id)
    path = Path(resolved)
    return path if path.is_absolute() else cfg.dataset_dir.parent / path


def _load_key_color(path: Path, expected_hw: tuple, stage: str) -> np.ndarray:
    try:
        if path.suffix == ".planes":
            planes = read_planes(path)
            if planes.shape[0] != 3:
                raise ValueError(f"{path} holds {planes.shape[0]} planes, expected a 3-plane Lab image")
            lab = planes
        else:
            lab = normalize_lab(rgb_to_lab(read_png(path)))
    except (OSError, ValueError) as exc:
        raise StageError(stage, str(exc)) from exc
    got = lab.shape[1:]
    if got != expected_hw:
        raise StageError(
            stage,
            f"key color image {path} is {got[0]}x{got[1]} but the key view is "
            f"{expected_hw[0]}x{expected_hw[1]}",
        )
    return chroma_planes(lab)


def cmd_train_colorizer(cfg: PipelineConfig) -> colorizer_mod.TrainResult:
    """Fine-tune the colorizer on the key view and its augmentations."""
    stage = "train-colorizer"
    report = cfg.stage_dir("keyview") / "report.txt"
    try:
        key_id, _ = read_keyview_report(report)
    except ValueError as exc:
        raise StageError(stage, f"{exc} (run select-keyview first)") from exc

    mono = _load_mono(cfg, stage, key_id)
    key_color_path = _resolve_key_color(cfg, key_id)
    target_ab = _load_key_color(key_color_path, mono.shape, stage)
    key_sample = AugmentSample(input_l=mono, target_ab=target_ab, provenance=Provenance.original())

    if cfg.manifest is not None:
        try:
            pool = ingest_generated(cfg.manifest, key_sample)
        except ValueError as exc:
            raise StageError(stage, str(exc)) from exc
    else:
        pool = [key_sample]

    net = ColorizerNet.create(seed=derive_seed(cfg.seed, "colorizer-net"))
    augment = dataclasses.replace(cfg.augment, crop_size=cfg.colorizer.crop_size)
    try:
        result = colorizer_mod.train(net, pool, cfg.colorizer, augment_config=augment)
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc
    if result.aborted:
        raise StageError(stage, f"training aborted after {len(result.steps)} of {cfg.colorizer.iterations} iterations")

    out = cfg.stage_dir("colorizer")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / "checkpoint.bin")
    colorizer_mod.write_training_log(out / "train_log.csv", result)
    return result


# ---------------------------------------------------------------------------
# colorize-views
# ---------------------------------------------------------------------------


def chroma_outputs(cfg: PipelineConfig):
    try:
        ids, _, _ = read_cameras(cfg.dataset_dir / "cameras.txt")
    except (OSError, ValueError):
        return [cfg.stage_dir("chroma") / "missing"]
    d = cfg.stage_dir("chroma")
    files = []
    for v in ids:
        files.extend([d / f"{v}.planes", d / f"{v}.png"])
    return files


def cmd_colorize_views(cfg: PipelineConfig) -> list:
    """Predict chroma for every view with the trained colorizer."""
    stage = "colorize-views"
    ids, _, _ = _load_camera_file(cfg, stage)
    checkpoint = cfg.stage_dir("colorizer") / "checkpoint.bin"
    try:
        net = load_checkpoint(checkpoint)
    except OSError as exc:
        raise StageError(stage, f"cannot read {checkpoint} (run train-colorizer first)") from exc
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc

    out = cfg.stage_dir("chroma")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for vid in ids:
        mono = _load_mono(cfg, stage, vid)
        ab = predict_ab(net, mono)
        write_planes(out / f"{vid}.planes", ab)
        lab = np.concatenate([mono[None], ab], axis=0)
        write_png(out / f"{vid}.png", lab_to_rgb(denormalize_lab(lab)))
        written.append(out / f"{vid}.planes")
    return written


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def reconstruct_outputs(cfg: PipelineConfig):
    d = cfg.stage_dir("reconstruct")
    return [d / "scene.txt", d / "train_log.csv", d / "optimizer.bin"]


def _reconstruct_config(cfg: PipelineConfig) -> ReconstructConfig:
    degree = cfg.reconstruct.deformation_degree if cfg.is_dynamic else 0
    return dataclasses.replace(cfg.reconstruct, deformation_degree=degree)


def cmd_reconstruct(cfg: PipelineConfig):
    """Fit the Lab Gaussian scene to luminance plus predicted chroma."""
    stage = "reconstruct"
    ids, cams, times = _load_camera_file(cfg, stage)

    missing = [
        v for v in ids
        if v not in cfg.holdout and not (cfg.stage_dir("chroma") / f"{v}.planes").is_file()
    ]
    if missing:
        raise StageError(stage, f"missing predicted chroma for view(s): {', '.join(missing)}")

    views = []
    for i, vid in enumerate(ids):
        if vid in cfg.holdout:
            continue
        mono = _load_mono(cfg, stage, vid)
        try:
            ab = read_planes(cfg.stage_dir("chroma") / f"{vid}.planes")
        except (OSError, ValueError) as exc:
            raise StageError(stage, str(exc)) from exc
        if ab.shape[0] != 2:
            raise StageError(stage, f"chroma file for {vid} holds {ab.shape[0]} planes, expected 2")
        t = times[i] if cfg.is_dynamic else None
        try:
            views.append(SupervisionView(camera=cams[i], target_l=mono, target_ab=ab, t=t))
        except ValueError as exc:
            raise StageError(stage, str(exc)) from exc
    if not views:
        raise StageError(stage, "no supervision views remain after excluding the holdout set")

    rcfg = _reconstruct_config(cfg)
    if cfg.reconstruct_init == "points":
        gt_scene = cfg.dataset_dir / "scene.txt"
        if not gt_scene.is_file():
            raise StageError(stage, f"init = points needs {gt_scene}; use init = random for captured data")
        try:
            points = load_scene(gt_scene).positions
        except ValueError as exc:
            raise StageError(stage, str(exc)) from exc
        seed_points = points
    else:
        seed_points = rcfg.seed

    try:
        scene = init_scene(seed_points, rcfg)
        result = train_scene(scene, SupervisionSet(tuple(views)), rcfg)
    except ValueError as exc:
        raise StageError(stage, str(exc)) from exc
    if result.aborted:
        raise StageError(
            stage, f"training aborted after {len(result.steps)} of {rcfg.iterations} iterations"
        )

    out = cfg.stage_dir("reconstruct")
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene.txt")
    write_reconstruct_log(out / "train_log.csv", result)
    save_optimizer_state(out / "optimizer.bin", result.optimizer)
    return result


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------


def render_targets(cfg: PipelineConfig, views=None) -> tuple:
    return tuple(views) if views else tuple(cfg.holdout)


def render_outputs(cfg: PipelineConfig, views=None):
    d = cfg.stage_dir("renders")
    files = []
    for v in render_targets(cfg, views):
        files.extend([d / f"{v}.planes", d / f"{v}.png"])
    return files


def cmd_render(cfg: PipelineConfig, views=None) -> list:
    """Render views from the reconstructed scene (holdout by default)."""
    stage = "render"
    targets = render_targets(cfg, views)
    if not targets:
        raise StageError(stage, "no views requested and no holdout configured")
    ids, cams, times = _load_camera_file(cfg, stage)
    unknown = [v for v in targets if v not in ids]
    if unknown:
        raise StageError(stage, f"unknown view(s): {', '.join(unknown)}")

    scene_path = cfg.stage_dir("reconstruct") / "scene.txt"
    try:
        scene = load_scene(scene_path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"{exc} (run reconstruct first)") from exc

    out = cfg.stage_dir("renders")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for vid in targets:
        i = ids.index(vid)
        t = times[i] if cfg.is_dynamic else None
        try:
            render = render_novel(scene, cams[i], t=t)
        except ValueError as exc:
            raise StageError(stage, str(exc)) from exc
        write_planes(out / f"{vid}.planes", render.lab)
        write_png(out / f"{vid}.png", render.rgb)
        written.append(out / f"{vid}.planes")
    return written


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def evaluate_outputs(cfg: PipelineConfig):
    d = cfg.stage_dir("evaluate")
    return [d / "metrics.csv", d / "summary.txt"]


def cmd_evaluate(cfg: PipelineConfig) -> dict:
    """Score held-out renders: L' PSNR, colorfulness, cross-view ME."""
    stage = "evaluate"
    if not cfg.holdout:
        raise StageError(stage, "no held-out views configured")
    ids, cams, times = _load_camera_file(cfg, stage)

    scene_path = cfg.stage_dir("reconstruct") / "scene.txt"
    try:
        scene = load_scene(scene_path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"{exc} (run reconstruct first)") from exc

    held = [v for v in ids if v in cfg.holdout]
    renders = {}
    metrics_rows = []
    psnrs, colorfuls = [], []
    for vid in held:
        i = ids.index(vid)
        t = times[i] if cfg.is_dynamic else None
        try:
            render = render_novel(scene, cams[i], t=t)
        except ValueError as exc:
            raise StageError(stage, str(exc)) from exc
        renders[vid] = render
        gt_l = _load_mono(cfg, stage, vid)
        value = psnr(render.lab[0], gt_l)
        psnrs.append(value)
        metrics_rows.append(("psnr_l", vid, value))
        cf = colorfulness(render.rgb)
        colorfuls.append(cf)
        metrics_rows.append(("colorfulness", vid, cf))

    mes = []
    for a_pos in range(len(held)):
        for b_pos in range(a_pos + 1, len(held)):
            vid_a, vid_b = held[a_pos], held[b_pos]
            corr_path = cfg.dataset_dir / "corr" / f"{vid_a}_{vid_b}.txt"
            if not corr_path.is_file():
                raise StageError(stage, f"no correspondence file for pair {vid_a}/{vid_b}: {corr_path}")
            cam_a, cam_b = cams[ids.index(vid_a)], cams[ids.index(vid_b)]
            try:
                corr = load_correspondences(
                    corr_path,
                    bounds_a=(cam_a.height, cam_a.width),
                    bounds_b=(cam_b.height, cam_b.width),
                )
                value = matching_error(renders[vid_a].lab, renders[vid_b].lab, corr)
            except (OSError, ValueError) as exc:
                raise StageError(stage, str(exc)) from exc
            mes.append(value)
            metrics_rows.append(("matching_error", f"{vid_a}:{vid_b}", value))

    summary = {
        "mean_psnr_l": float(np.mean(psnrs)),
        "mean_colorfulness": float(np.mean(colorfuls)),
        "mean_matching_error": float(np.mean(mes)) if mes else None,
    }
    for key, value in summary.items():
        if value is not None:
            metrics_rows.append((key, "all", value))

    out = cfg.stage_dir("evaluate")
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = [METRICS_MAGIC, "metric,subject,value"]
    csv_lines.extend(f"{m},{s},{v!r}" for m, s, v in metrics_rows)
    (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n")

    text = [SUMMARY_MAGIC, f"held-out views: {' '.join(held)}"]
    for vid in held:
        row_psnr = next(v for m, s, v in metrics_rows if m == "psnr_l" and s == vid)
        row_cf = next(v for m, s, v in metrics_rows if m == "colorfulness" and s == vid)
        text.append(f"{vid}: L' PSNR {row_psnr:.2f} dB, colorfulness {row_cf:.2f}")
    for m, s, v in metrics_rows:
        if m == "matching_error":
            text.append(f"pair {s}: matching error {v:.5f}")
    text.append(f"mean L' PSNR: {summary['mean_psnr_l']:.2f} dB")
    text.append(f"mean colorfulness: {summary['mean_colorfulness']:.2f}")
    if summary["mean_matching_error"] is not None:
        text.append(f"mean matching error: {summary['mean_matching_error']:.5f}")
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    return summary


# ---------------------------------------------------------------------------
# run-all
# ---------------------------------------------------------------------------


def _stage_plan(cfg: PipelineConfig):
    plan = []
    if cfg.synth_spec is not None:
        plan.append(("synth", synth_outputs, cmd_synth))
    plan.extend(
        [
            ("select-keyview", keyview_outputs, cmd_select_keyview),
            ("train-colorizer", colorizer_outputs, cmd_train_colorizer),
            ("colorize-views", chroma_outputs, cmd_colorize_views),
            ("reconstruct", reconstruct_outputs, cmd_reconstruct),
        ]
    )
    if cfg.holdout:
        plan.append(("render", render_outputs, cmd_render))
        plan.append(("evaluate", evaluate_outputs, cmd_evaluate))
    return plan


def cmd_run_all(cfg: PipelineConfig, progress=None) -> list:
    """Run every configured stage, skipping stages whose outputs exist.

    Returns (stage name, "ran" | "skipped") pairs in execution order.
    """
    done = []
    for name, outputs, command in _stage_plan(cfg):
        if all(p.is_file() for p in outputs(cfg)):
            done.append((name, "skipped"))
            if progress:
                progress(name, "skipped")
            continue
        if progress:
            progress(name, "running")
        command(cfg)
        done.append((name, "ran"))
    return done
