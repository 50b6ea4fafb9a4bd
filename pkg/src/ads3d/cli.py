"""Command line front end.

Subcommands:
  fit      build one memory bank per class from the train split
  eval     score the test split against fitted banks, write report + heatmaps
  synth    generate a seeded synthetic dataset
  convert  shuttle images between ADTN tensors and PNG

Options can come from a key=value config file (``--config``); flags
override file entries, which override defaults.  Nested settings use
dotted keys (``preprocess.dbscan_eps=0.008``, ``fpfh.radius=0.1``).
``ADS3D_THREADS`` caps worker threads; results are assembled in sample
order, so runs are reproducible regardless of the thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import descriptors as desc
from . import io
from .descriptors import FpfhParams, PatchFeatureGrid
from .io import DataError, Sample
from .metrics import EvalReport, UndefinedMetricError, evaluate_class
from .preprocess import PreprocessConfig, preprocess_sample
from .scoring import (coreset_select, fit_memory_bank, load_bank,
                      render_anomaly_map, save_bank, score_sample)
from .synth import SynthSpec, generate_dataset

METHODS = ("raw", "hog", "dsift", "fpfh", "rgb_raw", "rgb_deep",
           "rgb_plus_fpfh")
_DEEP_METHODS = ("rgb_deep", "rgb_plus_fpfh")
EXPORTER_HINT = ("run the ads3d-export tool to generate them, e.g. "
                 "`ads3d-export export --root <dataset> --out <dataset> "
                 "--modality rgb`")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DEGENERATE = 4

SMOOTH_SIGMA = 4.0
_MAX_CURVE_ROWS = 2000


class ConfigError(ValueError):
    """Bad option value or inconsistent configuration."""


@dataclass
class RunConfig:
    dataset_root: str = ""
    classes: list[str] = field(default_factory=list)
    method: str = "fpfh"
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    fpfh: FpfhParams = field(default_factory=FpfhParams)
    k: int = 1
    coreset_ratio: float = 1.0
    seed: int = 0
    output_dir: str = "runs"
    eval_resolution: int = 224  # 0 evaluates at the native mask resolution

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 < self.coreset_ratio <= 1.0:
            raise ConfigError("coreset_ratio must be in (0, 1]")
        if self.eval_resolution and (self.eval_resolution < 28
                                     or self.eval_resolution % 28):
            raise ConfigError("eval_resolution must be 0 or a multiple of 28")
        if not self.dataset_root:
            raise ConfigError("dataset_root is required")


# ---------------------------------------------------------------------------
# config assembly

def parse_config_file(path: str | Path) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _coerce(name: str, value: str, kind: type):
    try:
        if kind is bool:
            return _BOOL_WORDS[value.lower()]
        return kind(value)
    except (ValueError, KeyError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def _apply_dotted(cfg_obj, prefix: str, pairs: dict[str, str]):
    """Overlay ``prefix.field`` entries onto a nested config dataclass."""
    updates = {}
    by_name = {f.name: f for f in fields(cfg_obj)}
    for key, value in pairs.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in by_name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg_obj, name)
        kind = type(current) if current is not None else float
        if kind in (dict, tuple, list):
            raise ConfigError(f"{key!r} cannot be set from a config file")
        updates[name] = _coerce(key, value, kind)
    return replace(cfg_obj, **updates) if updates else cfg_obj


def build_run_config(args: argparse.Namespace) -> RunConfig:
    pairs = parse_config_file(args.config) if args.config else {}
    values: dict[str, object] = {}
    scalar = {"dataset_root": str, "method": str, "k": int,
              "coreset_ratio": float, "seed": int, "output_dir": str,
              "eval_resolution": int}
    for name, kind in scalar.items():
        if name in pairs:
            values[name] = _coerce(name, pairs[name], kind)
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    if "classes" in pairs:
        values["classes"] = [c for c in pairs["classes"].split(",") if c]
    if getattr(args, "classes", None):
        values["classes"] = list(args.classes)

    pre = _apply_dotted(PreprocessConfig(), "preprocess", pairs)
    if "preprocess" in pairs:  # bare key toggles the background stage
        pre = replace(pre, enabled=_coerce("preprocess", pairs["preprocess"], bool))
    if getattr(args, "preprocess", None) is not None:
        pre = replace(pre, enabled=args.preprocess)
    values["preprocess"] = pre
    values["fpfh"] = _apply_dotted(FpfhParams(), "fpfh", pairs)

    known = {"classes", "preprocess"} | set(scalar)
    for key in pairs:
        if key not in known and "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
    if getattr(args, "full_res", False):
        values["eval_resolution"] = 0
    return RunConfig(**values)


def _max_workers() -> int:
    raw = os.environ.get("ADS3D_THREADS", "")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"ADS3D_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise ConfigError("ADS3D_THREADS must be >= 1")
        return n
    return min(8, os.cpu_count() or 1)


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _discover_classes(root: str | Path, split: str) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    found = sorted(p.name for p in root.iterdir()
                   if (p / split).is_dir())
    if not found:
        raise DataError(f"no classes with a {split}/ split under {root}")
    return found


# ---------------------------------------------------------------------------
# feature extraction

def _deep_feature_path(cfg: RunConfig, cls: str, split: str, s: Sample) -> Path:
    return (Path(cfg.dataset_root) / cls / split / s.defect / "feat"
            / f"{s.sample_id}.feat.adtn")


def _load_deep_grid(cfg: RunConfig, cls: str, split: str, s: Sample) -> PatchFeatureGrid:
    path = _deep_feature_path(cfg, cls, split, s)
    if not path.exists():
        raise DataError(f"method {cfg.method!r} needs exported feature tensors, "
                        f"but {path} is missing; {EXPORTER_HINT}")
    values = io.read_tensor(path)
    if values.ndim != 3:
        raise DataError(f"{path}: expected a HxWxC feature grid, got {values.shape}")
    return PatchFeatureGrid(values.astype(np.float32, copy=False), "rgb_deep")


def compute_feature_grid(cfg: RunConfig, cls: str, split: str,
                         sample: Sample) -> PatchFeatureGrid:
    """Preprocess one sample and run the configured patch descriptor."""
    s = preprocess_sample(sample, cfg.preprocess, cls=cls, seed=cfg.seed)
    m = cfg.method
    if m == "raw":
        return desc.raw_depth_patches(s.cloud.depth)
    if m == "hog":
        return desc.hog_depth(s.cloud.depth)
    if m == "dsift":
        return desc.dsift_depth(s.cloud.depth)
    if m == "fpfh":
        return desc.fpfh_grid(s.cloud, cfg.fpfh)
    if m == "rgb_raw":
        return desc.raw_rgb_patches(s.rgb.pixels)
    if m == "rgb_deep":
        return _load_deep_grid(cfg, cls, split, sample)
    # rgb_plus_fpfh: geometry plus exported appearance features
    geom = desc.fpfh_grid(s.cloud, cfg.fpfh)
    return desc.concat_features(geom, _load_deep_grid(cfg, cls, split, sample))


def _bank_path(cfg: RunConfig, cls: str) -> Path:
    return Path(cfg.output_dir) / "banks" / f"{cls}.bank.adtn"


# ---------------------------------------------------------------------------
# fit

def run_fit(cfg: RunConfig) -> dict[str, Path]:
    """Fit and persist one memory bank per class; returns bank paths."""
    classes = cfg.classes or _discover_classes(cfg.dataset_root, "train")
    workers = _max_workers()
    out: dict[str, Path] = {}
    for cls in classes:
        ids = io.find_sample_ids(cfg.dataset_root, cls, "train")
        if not ids:
            raise DataError(f"class {cls!r} has no training samples")

        def one(defect_stem: tuple[str, str]) -> PatchFeatureGrid:
            defect, stem = defect_stem
            sample = io.load_sample(cfg.dataset_root, cls, "train",
                                    f"{defect}/{stem}")
            return compute_feature_grid(cfg, cls, "train", sample)

        grids = _map_ordered(one, ids, workers)
        bank = coreset_select(fit_memory_bank(grids), cfg.coreset_ratio,
                              seed=cfg.seed)
        path = _bank_path(cfg, cls)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_bank(bank, path, meta={"method": cfg.method, "k": cfg.k,
                                    "coreset_ratio": cfg.coreset_ratio,
                                    "seed": cfg.seed, "class": cls})
        out[cls] = path
    return out


# ---------------------------------------------------------------------------
# eval

def _nn_resize(arr: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample with the floor index map."""
    h, w = arr.shape
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return arr[np.ix_(rows, cols)]


def _heatmap_u8(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _write_pro_csv(path: Path, curve: np.ndarray) -> None:
    if curve.shape[0] > _MAX_CURVE_ROWS:
        keep = np.unique(np.round(
            np.linspace(0, curve.shape[0] - 1, _MAX_CURVE_ROWS)).astype(int))
        curve = curve[keep]
    lines = ["fpr,pro"] + [f"{fpr:.10g},{pro:.10g}" for fpr, pro in curve]
    path.write_text("\n".join(lines) + "\n")


def _eval_one_class(cfg: RunConfig, cls: str, workers: int):
    bank_path = _bank_path(cfg, cls)
    if not bank_path.exists():
        raise DataError(f"no fitted bank for class {cls!r} at {bank_path}; "
                        "run `fit` first")
    bank, meta = load_bank(bank_path)
    if meta.get("method", bank.method) != cfg.method:
        raise ConfigError(f"bank for {cls!r} was fitted with method "
                          f"{meta.get('method')!r}, not {cfg.method!r}")

    ids = io.find_sample_ids(cfg.dataset_root, cls, "test")
    if not ids:
        raise DataError(f"class {cls!r} has no test samples")

    def one(defect_stem: tuple[str, str]):
        defect, stem = defect_stem
        sample = io.load_sample(cfg.dataset_root, cls, "test", f"{defect}/{stem}")
        grid = compute_feature_grid(cfg, cls, "test", sample)
        scores = score_sample(bank, grid, k=cfg.k)
        gt = sample.gt_mask
        if cfg.eval_resolution:
            amap = render_anomaly_map(scores, out_size=cfg.eval_resolution,
                                      sigma=SMOOTH_SIGMA)
            heat, img_score = amap.map, amap.image_score
            gt = _nn_resize(gt, heat.shape)
        else:
            # native-resolution masks: render on the working grid, then
            # resample the smooth map up to the mask shape
            amap = render_anomaly_map(scores, out_size=cfg.preprocess.target_size,
                                      sigma=SMOOTH_SIGMA)
            heat, img_score = _nn_resize(amap.map, gt.shape), amap.image_score
        label = 1 if sample.label == "anomalous" else 0
        return defect, stem, label, img_score, heat, gt

    rows = _map_ordered(one, ids, workers)

    heat_dir = Path(cfg.output_dir) / "heatmaps" / cls
    heat_dir.mkdir(parents=True, exist_ok=True)
    for defect, stem, _, _, heat, _ in rows:
        io.write_image_u8(_heatmap_u8(heat), heat_dir / f"{defect}_{stem}.png")

    labels = np.array([r[2] for r in rows])
    img_scores = np.array([r[3] for r in rows])
    maps = [r[4] for r in rows]
    masks = [r[5] for r in rows]
    result = evaluate_class(img_scores, labels, maps, masks)
    if result.pro_curve is not None:
        curve_dir = Path(cfg.output_dir) / "curves"
        curve_dir.mkdir(parents=True, exist_ok=True)
        _write_pro_csv(curve_dir / f"{cls}_pro.csv", result.pro_curve)
    return result


def run_eval(cfg: RunConfig) -> tuple[EvalReport, Path]:
    """Evaluate every class; writes report.json and returns it."""
    classes = cfg.classes or _discover_classes(cfg.dataset_root, "test")
    workers = _max_workers()
    report = EvalReport({cls: _eval_one_class(cfg, cls, workers)
                         for cls in classes})

    payload = {
        "config": {"method": cfg.method, "k": cfg.k,
                   "coreset_ratio": cfg.coreset_ratio, "seed": cfg.seed,
                   "eval_resolution": cfg.eval_resolution,
                   "preprocess": cfg.preprocess.enabled,
                   "classes": classes},
        "per_class": {cls: res.as_dict() for cls, res in report.per_class.items()},
        "mean": report.mean(),
    }
    out = Path(cfg.output_dir) / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return report, out


def _report_is_degenerate(report: EvalReport) -> bool:
    return any(v is None for res in report.per_class.values()
               for v in (res.i_roc, res.p_roc, res.pro))


# ---------------------------------------------------------------------------
# convert / synth

def run_convert(src: str, dst: str) -> None:
    src_p, dst_p = Path(src), Path(dst)
    s_ext, d_ext = src_p.suffix.lower(), dst_p.suffix.lower()
    if s_ext == ".adtn" and d_ext == ".png":
        arr = io.read_tensor(src_p)
        if arr.dtype != np.uint8:
            raise ConfigError(f"{src}: only u8 tensors render to PNG, "
                              f"got {arr.dtype}")
        io.write_image_u8(arr, dst_p)
    elif s_ext == ".png" and d_ext == ".adtn":
        io.write_tensor(io.read_image_u8(src_p), dst_p)
    else:
        raise ConfigError(f"cannot convert {s_ext or '?'} to {d_ext or '?'}; "
                          "expected .adtn<->.png")


def run_synth(args: argparse.Namespace) -> None:
    spec = SynthSpec(n_train=args.n_train, n_test_good=args.n_test_good,
                     n_test_anom=args.n_test_anom, size=args.size,
                     anomaly_kind=args.anomaly_kind,
                     surface_kind=args.surface_kind,
                     noise_std=args.noise_std,
                     background_wave=args.background_wave, seed=args.seed)
    generate_dataset(spec, args.out, class_name=args.class_name)


# ---------------------------------------------------------------------------
# argument plumbing

def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value options file")
    p.add_argument("--dataset_root", default=None)
    p.add_argument("--classes", nargs="*", default=None,
                   help="class names; default: discover from the tree")
    p.add_argument("--method", default=None, choices=METHODS)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--coreset_ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output_dir", default=None)
    p.add_argument("--preprocess", dest="preprocess", action="store_true",
                   default=None, help="enable background removal")
    p.add_argument("--no_preprocess", dest="preprocess", action="store_false",
                   help="resize only, keep the background")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ads3d",
                                 description="Patch-feature anomaly detection "
                                             "for organized point clouds")
    sub = ap.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="build per-class memory banks")
    _add_run_flags(fit)

    ev = sub.add_parser("eval", help="score test samples against the banks")
    _add_run_flags(ev)
    ev.add_argument("--eval_resolution", type=int, default=None,
                    help="score map resolution (multiple of 28)")
    ev.add_argument("--full_res", action="store_true",
                    help="evaluate at the native ground-truth resolution")

    sy = sub.add_parser("synth", help="generate a synthetic dataset")
    sy.add_argument("--out", required=True)
    sy.add_argument("--class_name", default="synth")
    sy.add_argument("--n_train", type=int, default=50)
    sy.add_argument("--n_test_good", type=int, default=20)
    sy.add_argument("--n_test_anom", type=int, default=20)
    sy.add_argument("--size", type=int, default=224)
    sy.add_argument("--anomaly_kind", default="geometric_dent",
                    choices=("geometric_dent", "geometric_bump",
                             "color_blotch", "mixed"))
    sy.add_argument("--surface_kind", default="bumpy_plane",
                    choices=("bumpy_plane", "hemisphere"))
    sy.add_argument("--noise_std", type=float, default=5e-4)
    sy.add_argument("--background_wave", action="store_true")
    sy.add_argument("--seed", type=int, default=0)

    cv = sub.add_parser("convert", help="convert .adtn to .png or back")
    cv.add_argument("src")
    cv.add_argument("dst")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            run_fit(build_run_config(args))
        elif args.command == "eval":
            report, path = run_eval(build_run_config(args))
            print(f"report written to {path}")
            if _report_is_degenerate(report):
                print("warning: some metrics were undefined for at least "
                      "one class", file=sys.stderr)
                return EXIT_DEGENERATE
        elif args.command == "synth":
            run_synth(args)
        else:
            run_convert(args.src, args.dst)
    except UndefinedMetricError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (DataError, io.AdtnError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:  # ConfigError and bad dataclass invariants
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
