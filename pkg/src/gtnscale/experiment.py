"""Config-driven sweeps: train one GTN per class, record NLL curves, fit scaling laws.

A run writes a self-contained bundle::

    <out>/config.json      resolved config (hashed)
    <out>/curves/<axis>.csv
    <out>/fits/<name>.json
    <out>/report.json
    <out>/manifest.json    sha256 per file and per CSV row

``replay`` needs only the bundle: it checks the hashes, recomputes every fit
from the stored curves and compares with the stored fit files.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as dio
from .born import GtncModel, TrainConfig, accuracy, nll, train
from .errors import ExperimentError, FormatError, GtnError, ParameterError
from .features import QfmConfig, binarize, crop_center, qfm_encode_batch
from .mps import random_mps, superposition_mps
from .scaling import (
    CurveSeries,
    ScalingFit,
    compose_pq,
    divergence_report,
    fit_linear,
    fit_log,
    fit_quadratic,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
AXES = ("M", "chi", "N", "theta", "H")
SPLITS = ("train", "test")
CURVE_COLUMNS = ("sweep_value", "M", "split", "pairing", "class", "nll", "nll_std", "mean_prob", "accuracy")


# -- config -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    source: str
    images: str | None = None
    labels: str | None = None
    path: str | None = None
    feature_columns: list[str] | None = None
    label_column: str = "label"
    normalization: str = "minmax"
    r_values: list[float] | None = None
    length: int = 8
    burn_in: int = 100
    classes: list[int] | None = None
    n_train: int = 256
    n_test: int = 200
    binarize: bool = False
    threshold: float = 0.5
    split_seed: int = 0


@dataclass(frozen=True)
class QfmSpec:
    theta: float = 1.0
    H: int = 1


@dataclass(frozen=True)
class ModelSpec:
    chi: list[int] = field(default_factory=lambda: [16])
    init: str = "random"


@dataclass(frozen=True)
class TrainingSpec:
    eta: float = 1e-2
    epochs: int = 500
    batch_size: int | str = "full"
    seed: int = 0
    renormalize_every_step: bool = True
    early_stop_delta: float = 1e-6


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: list[float]
    M: list[int] | None = None


@dataclass(frozen=True)
class FitSpec:
    quality_r2: float = 0.98
    divergence_threshold: float = 0.25
    confidence: float = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    sweep: SweepSpec
    name: str = "experiment"
    seed: int = 0
    seeds_per_point: int = 5
    pairing: str = "both"
    workers: int = 1
    output: str | None = None
    qfm: QfmSpec = QfmSpec()
    model: ModelSpec = ModelSpec()
    training: TrainingSpec = TrainingSpec()
    fits: FitSpec = FitSpec()

    @property
    def pairings(self) -> tuple[str, ...]:
        return ("intra", "inter") if self.pairing == "both" else (self.pairing,)

    def hash_payload(self) -> dict:
        # where the bundle goes and how many processes build it do not change its content
        d = dataclasses.asdict(self)
        d.pop("output")
        d.pop("workers")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_type(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        errors = []
        for arm in typing.get_args(hint):
            try:
                return _check_type(value, arm, where)
            except ParameterError as exc:
                errors.append(exc)
        raise errors[0]
    if hint is type(None):
        if value is None:
            return None
        raise ParameterError(f"{where}: expected null, got {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ParameterError(f"{where}: expected a list, got {value!r}")
        (item,) = typing.get_args(hint)
        return [_check_type(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    raise ParameterError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ParameterError(f"{where}: expected a mapping, got {raw!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ParameterError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in raw:
            kwargs[f.name] = _check_type(raw[f.name], hints[f.name], f"{where}.{f.name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ParameterError(f"{where}: missing required key {f.name!r}")
    return cls(**kwargs)


def _resolve(path: str | None, base: Path | None, what: str) -> str | None:
    if path is None:
        return None
    p = Path(path).expanduser()
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.exists():
        raise ParameterError(f"{what}: {p} does not exist")
    return str(p.resolve())


def _validate(cfg: ExperimentConfig, base: Path | None) -> ExperimentConfig:
    ds, sw = cfg.dataset, cfg.sweep
    if ds.source == "idx":
        if not (ds.images and ds.labels):
            raise ParameterError("dataset: idx source needs 'images' and 'labels'")
        ds = dataclasses.replace(
            ds, images=_resolve(ds.images, base, "dataset.images"), labels=_resolve(ds.labels, base, "dataset.labels")
        )
    elif ds.source == "csv":
        if not ds.path:
            raise ParameterError("dataset: csv source needs 'path'")
        ds = dataclasses.replace(ds, path=_resolve(ds.path, base, "dataset.path"))
    elif ds.source == "logistic":
        if not ds.r_values or len(ds.r_values) < 1:
            raise ParameterError("dataset: logistic source needs 'r_values'")
    else:
        raise ParameterError(f"dataset.source must be idx, csv or logistic, got {ds.source!r}")
    if ds.n_train < 1 or ds.n_test < 1:
        raise ParameterError("dataset: n_train and n_test must be positive")
    if not 0 < ds.threshold < 1:
        raise ParameterError("dataset.threshold must lie in (0, 1)")

    if sw.axis not in AXES:
        raise ParameterError(f"sweep.axis must be one of {AXES}, got {sw.axis!r}")
    if not sw.values:
        raise ParameterError("sweep.values needs at least one point")
    if len(set(sw.values)) != len(sw.values):
        raise ParameterError("sweep.values has duplicates")
    if sw.axis == "M" and sw.M is not None:
        raise ParameterError("sweep.M is only for axes other than M")
    if sw.axis in ("M", "chi", "N", "H"):
        if any(v != int(v) or v < 1 for v in sw.values):
            raise ParameterError(f"sweep.values for axis {sw.axis} must be positive integers")
        sw = dataclasses.replace(sw, values=[int(v) for v in sw.values])
    if sw.axis == "theta" and any(not 0 < v <= 1 for v in sw.values):
        raise ParameterError("theta values must lie in (0, 1]")
    if sw.axis == "N" and max(sw.values) > ds.n_train:
        raise ParameterError(f"sweep N up to {max(sw.values)} exceeds dataset.n_train={ds.n_train}")
    if sw.M is not None and (not sw.M or any(m < 1 for m in sw.M) or len(set(sw.M)) != len(sw.M)):
        raise ParameterError("sweep.M must list distinct positive site counts")

    if cfg.pairing not in ("intra", "inter", "both"):
        raise ParameterError(f"pairing must be intra, inter or both, got {cfg.pairing!r}")
    if cfg.seeds_per_point < 1:
        raise ParameterError("seeds_per_point must be >= 1")
    if cfg.workers < 1:
        raise ParameterError("workers must be >= 1")
    if cfg.model.init not in ("random", "superposition"):
        raise ParameterError(f"model.init must be random or superposition, got {cfg.model.init!r}")
    if sw.axis != "chi" and len(cfg.model.chi) != 1:
        raise ParameterError("model.chi must hold a single value unless sweeping chi")
    if any(c < 1 for c in cfg.model.chi):
        raise ParameterError("model.chi must be positive")
    if ds.classes is not None and len(set(ds.classes)) != len(ds.classes):
        raise ParameterError("dataset.classes has duplicates")
    if "inter" in cfg.pairings and ds.classes is not None and len(ds.classes) < 2:
        raise ParameterError("inter-class pairing needs at least two classes")
    # these raise ParameterError on bad values
    QfmConfig(cfg.qfm.theta, cfg.qfm.H)
    _train_config(cfg, 0)
    return dataclasses.replace(cfg, dataset=ds, sweep=sw)


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    """Validate a config tree. Unknown keys anywhere are errors; relative paths resolve against ``base_dir``."""
    cfg = _build(ExperimentConfig, raw, "config")
    return _validate(cfg, Path(base_dir) if base_dir is not None else None)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ParameterError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(raw if raw is not None else {}, path.parent)


def _train_config(cfg: ExperimentConfig, rep_seed: int) -> TrainConfig:
    t = cfg.training
    return TrainConfig(
        eta=t.eta,
        epochs=t.epochs,
        batch_size=t.batch_size,
        seed=t.seed + rep_seed,
        renormalize_every_step=t.renormalize_every_step,
        early_stop_delta=t.early_stop_delta,
    )


# -- data -------------------------------------------------------------------

_DATA_CACHE: dict[str, tuple] = {}


def _load_source(ds: DatasetSpec) -> dio.LabeledDataset:
    if ds.source == "idx":
        out = dio.load_idx(ds.images, ds.labels)
    elif ds.source == "csv":
        out = dio.load_csv(ds.path, ds.feature_columns, ds.label_column, ds.normalization)
    else:
        per_class = ds.n_train + ds.n_test
        out = dio.logistic_dataset(ds.r_values, per_class, ds.length, ds.burn_in, seed=ds.split_seed)
    if ds.binarize:
        out = dio.LabeledDataset(binarize(out.samples, ds.threshold), out.labels, out.name, out.image_shape)
    return out


def _prepared(cfg: ExperimentConfig):
    """(classes, train split, test split), loaded once per process."""
    key = cfg.config_hash()
    if key not in _DATA_CACHE:
        full = _load_source(cfg.dataset)
        classes = cfg.dataset.classes if cfg.dataset.classes is not None else full.classes
        tr, te = dio.split_per_class(full, classes, cfg.dataset.n_train, cfg.dataset.n_test, cfg.dataset.split_seed)
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = (list(classes), tr, te)
    return _DATA_CACHE[key]


def _restrict(ds: dio.LabeledDataset, M: int) -> np.ndarray:
    """Samples cut down to ``M`` features: a centered square crop for images, a prefix otherwise."""
    if ds.image_shape is not None:
        side = math.isqrt(M)
        if side * side != M:
            raise ParameterError(f"M={M} is not a square; image data is cropped to side x side")
        return crop_center(ds.images(), side)
    if M > ds.M:
        raise ParameterError(f"M={M} exceeds the {ds.M} available features")
    return ds.samples[:, :M]


def m_values(cfg: ExperimentConfig) -> list[int]:
    if cfg.sweep.axis == "M":
        return sorted(int(v) for v in cfg.sweep.values)
    if cfg.sweep.M is not None:
        return sorted(cfg.sweep.M)
    _, tr, _ = _prepared(cfg)
    return [tr.M]


# -- one sweep point ----------------------------------------------------------


def _point_setting(cfg: ExperimentConfig, value) -> tuple[QfmConfig, int, int | None]:
    theta, H, chi, N = cfg.qfm.theta, cfg.qfm.H, cfg.model.chi[0], None
    axis = cfg.sweep.axis
    if axis == "theta":
        theta = float(value)
    elif axis == "H":
        H = int(value)
    elif axis == "chi":
        chi = int(value)
    elif axis == "N":
        N = int(value)
    return QfmConfig(theta, H), chi, N


def run_point(cfg: ExperimentConfig, value, M: int, rep: int) -> dict:
    """Train every class model at one (sweep value, M, replicate) and evaluate all pairings.

    Returns ``nll[split][g][h]`` (model ``g`` on class ``h`` samples) and
    GTNC accuracies per class and overall.
    """
    classes, tr, te = _prepared(cfg)
    qfm, chi, N = _point_setting(cfg, value)
    rep_seed = cfg.seed + rep

    def encoded(ds, g, limit=None):
        part = dio.filter_by_label(ds, g)
        if limit is not None:
            part = part.take(np.arange(limit))
        return qfm_encode_batch(_restrict(part, M), qfm)

    models = []
    for gi, g in enumerate(classes):
        x = encoded(tr, g, N)
        if cfg.model.init == "superposition":
            if x.shape[0] > chi:
                raise ParameterError(f"superposition init of {x.shape[0]} samples needs chi >= {x.shape[0]}, got {chi}")
            psi = superposition_mps(x)
        else:
            psi = random_mps(x.shape[1], 2, chi, seed=rep_seed * 1000 + gi)
        if cfg.training.eta > 0:
            psi, _ = train(psi, x, None, _train_config(cfg, rep_seed))
        models.append(psi)

    model = GtncModel(tuple(models))
    out = {"nll": {}, "accuracy": {}, "accuracy_all": {}}
    for split, ds in (("train", tr), ("test", te)):
        xs = [encoded(ds, g, N if split == "train" else None) for g in classes]
        out["nll"][split] = [[nll(psi, x) for x in xs] for psi in models]
        out["accuracy"][split] = [accuracy(model, x, np.full(x.shape[0], gi)) for gi, x in enumerate(xs)]
        labels = np.concatenate([np.full(x.shape[0], gi) for gi, x in enumerate(xs)])
        out["accuracy_all"][split] = accuracy(model, np.concatenate(xs), labels)
    return out


def _point_job(args):
    cfg, value, M, rep = args
    try:
        return run_point(cfg, value, M, rep)
    except GtnError as exc:
        raise ExperimentError(f"{_point_name(cfg, value, M, rep)}: {type(exc).__name__}: {exc}",
                              point=(value, M, rep)) from exc


def _point_name(cfg, value, M, rep) -> str:
    return f"{cfg.sweep.axis}={_fmt(value)}, M={M}, replicate {rep}"


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


# -- curves -------------------------------------------------------------------


def _mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(a))
    if a.size < 2 or not np.all(np.isfinite(a)):
        return mean, 0.0 if a.size < 2 else math.nan
    return mean, float(np.std(a, ddof=1))


def _rows_for(cfg: ExperimentConfig, classes, value, M: int, reps: list[dict]) -> list[list]:
    rows = []
    G = len(classes)
    for split in SPLITS:
        for pairing in cfg.pairings:
            per_rep = []
            for r in reps:
                mat = r["nll"][split]
                if pairing == "intra":
                    vals = [mat[g][g] for g in range(G)]
                else:
                    # every ordered pair (g, h) with h != g, grouped by the model's class
                    vals = [float(np.mean([mat[g][h] for h in range(G) if h != g])) for g in range(G)]
                per_rep.append(vals + [float(np.mean(vals))])
            per_rep = np.array(per_rep)
            accs = np.array([r["accuracy"][split] + [r["accuracy_all"][split]] for r in reps])
            for j, label in enumerate([str(c) for c in classes] + ["all"]):
                mean, std = _mean_std(per_rep[:, j])
                prob = float(np.mean(np.exp(-per_rep[:, j])))
                rows.append([_fmt(value), M, split, pairing, label, mean, std, prob, float(np.mean(accs[:, j]))])
    return rows


def curves_to_csv(rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], r[4]] + [repr(float(v)) for v in r[5:]])
    return buf.getvalue()


def read_curves(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
            raise FormatError(f"{path}: header {reader.fieldnames} is not {list(CURVE_COLUMNS)}", offset=1)
        out = []
        for i, rec in enumerate(reader, start=1):
            try:
                out.append({
                    "sweep_value": float(rec["sweep_value"]),
                    "M": int(rec["M"]),
                    "split": rec["split"],
                    "pairing": rec["pairing"],
                    "class": rec["class"],
                    "nll": float(rec["nll"]),
                })
            except (TypeError, ValueError):
                raise FormatError(f"{path}: row {i} is malformed", offset=i) from None
        return out


# -- fits ---------------------------------------------------------------------


@dataclass
class FitBundle:
    fits: dict = field(default_factory=dict)
    refusals: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)
    divergence: dict = field(default_factory=dict)

    def attempt(self, name: str, fn, *args):
        try:
            f = fn(*args)
        except ParameterError as exc:
            self.refusals.append({"fit": name, "reason": str(exc)})
            return None
        self.fits[name] = f
        return f


def fit_curves(rows: list[dict], axis: str, spec: FitSpec = FitSpec(), source: str = "") -> FitBundle:
    """All fits implied by one curve table (class ``all`` rows only).

    Axis ``M`` gets linear and quadratic laws in ``M``. Other axes get a
    quadratic in ``M`` per sweep value (when at least two ``M`` were run)
    and a law in the swept variable per ``M``: logarithmic for ``chi`` and
    ``N``, linear for ``theta`` and ``H``. For ``chi`` and ``N`` the
    quadratic coefficients are also fitted against the log of the swept
    variable, the composed log-law coefficients are compared with the direct
    ones, and train/test coefficient gaps go into a divergence report.
    """
    out = FitBundle()
    table: dict = {}
    for r in rows:
        if r["class"] == "all":
            table.setdefault((r["split"], r["pairing"]), {})[(r["sweep_value"], r["M"])] = r["nll"]
    ms_all = sorted({M for t in table.values() for _, M in t})
    values = sorted({v for t in table.values() for v, _ in t})

    def meta(split, pairing, kind, **extra):
        return {"source": source, "axis": axis, "split": split, "pairing": pairing, "kind": kind, **extra}

    quads: dict = {}
    for (split, pairing), t in sorted(table.items()):
        if axis == "M":
            keys = sorted(t, key=lambda k: k[1])
            xs = [M for _, M in keys]
            ys = [t[k] for k in keys]
            for kind, fn in (("linear", fit_linear), ("quadratic", fit_quadratic)):
                out.attempt(f"M_{split}_{pairing}_{kind}", fn, CurveSeries(xs, ys, meta(split, pairing, kind)))
            continue
        for v in values:
            xs = [M for M in ms_all if (v, M) in t]
            if len(ms_all) < 2:
                continue
            name = f"{axis}{_fmt(v)}_{split}_{pairing}_quadratic"
            f = out.attempt(name, fit_quadratic,
                            CurveSeries(xs, [t[(v, M)] for M in xs], meta(split, pairing, "quadratic", sweep_value=v)))
            if f is not None:
                quads[(split, pairing, v)] = f
        law, kind = (fit_log, "log") if axis in ("chi", "N") else (fit_linear, "linear")
        for M in ms_all:
            xs = [v for v in values if (v, M) in t]
            ys = [t[(v, M)] for v in xs]
            m = meta(split, pairing, kind, M=M)
            name = f"{axis}_M{M}_{split}_{pairing}_{kind}"
            if law is fit_log:
                out.attempt(name, fit_log, xs, ys, m)
            else:
                out.attempt(name, fit_linear, CurveSeries(xs, ys, m))

        if axis not in ("chi", "N") or len(ms_all) < 3:
            continue
        if not all((split, pairing, v) in quads for v in values):
            out.refusals.append({"fit": f"{axis}_{split}_{pairing}_log_coefficients",
                                 "reason": "a quadratic fit in M is missing for some sweep value"})
            continue
        coef_fits = {}
        for c in ("alpha", "beta", "gamma"):
            coef_fits[c] = out.attempt(
                f"{axis}_{split}_{pairing}_log_{c}", fit_log, values,
                [quads[(split, pairing, v)][c] for v in values], meta(split, pairing, "log", coefficient=c),
            )
        if any(f is None for f in coef_fits.values()):
            continue
        for M in ms_all:
            direct = out.fits.get(f"{axis}_M{M}_{split}_{pairing}_log")
            if direct is None:
                continue
            p, q = compose_pq(coef_fits["alpha"], coef_fits["beta"], coef_fits["gamma"], M)
            hp = direct.ci_halfwidth("p", spec.confidence)
            hq = direct.ci_halfwidth("q", spec.confidence)
            out.comparisons.append({
                "split": split, "pairing": pairing, "M": M,
                "direct": {"p": direct["p"], "q": direct["q"]},
                "composed": {"p": p, "q": q},
                "halfwidth": {"p": hp, "q": hq},
                "confidence": spec.confidence,
                "agree": bool(abs(p - direct["p"]) <= hp and abs(q - direct["q"]) <= hq),
            })

    if axis in ("chi", "N"):
        for pairing in ("intra", "inter"):
            tr = {v: quads[("train", pairing, v)] for v in values if ("train", pairing, v) in quads}
            te = {v: quads[("test", pairing, v)] for v in values if ("test", pairing, v) in quads}
            if tr and set(tr) == set(te):
                out.divergence[pairing] = divergence_report(tr, te, spec.divergence_threshold).to_dict()
    return out


# -- bundle -------------------------------------------------------------------


def _sha(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def _manifest_entry(blob: bytes, is_csv: bool) -> dict:
    entry = {"sha256": _sha(blob)}
    if is_csv:
        entry["rows"] = [_sha(line) for line in blob.split(b"\n")[1:] if line]
    return entry


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write_fits(out: Path, bundle: FitBundle) -> dict:
    fit_dir = out / "fits"
    fit_dir.mkdir(parents=True, exist_ok=True)
    for old in fit_dir.glob("*.json"):
        old.unlink()
    written = {}
    for name, f in sorted(bundle.fits.items()):
        path = fit_dir / f"{name}.json"
        path.write_text(f.to_json() + "\n")
        written[f"fits/{name}.json"] = path.read_bytes()
    return written


def _report(cfg_hash: str, seeds: dict, axis: str, bundle: FitBundle, cfg_fits: FitSpec) -> dict:
    holds = {n: f.holds(cfg_fits.quality_r2) for n, f in bundle.fits.items()}
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "axis": axis,
        "seeds": seeds,
        "fits": sorted(bundle.fits),
        "fit_quality": {"threshold": cfg_fits.quality_r2, "holds": holds},
        "log_fits": {n: f.to_dict() for n, f in sorted(bundle.fits.items()) if f.kind == "log"},
        "compose_pq": bundle.comparisons,
        "divergence": bundle.divergence,
        "refused": bundle.refusals,
        "inter_class_average": "mean over all ordered pairs of distinct classes",
    }


def _write_manifest(out: Path) -> None:
    files = {}
    for path in sorted(out.rglob("*")):
        rel = path.relative_to(out).as_posix()
        if path.is_file() and rel != "manifest.json":
            files[rel] = _manifest_entry(path.read_bytes(), rel.endswith(".csv"))
    (out / "manifest.json").write_text(_dump_json({"format_version": FORMAT_VERSION, "files": files}))


@dataclass
class RunResult:
    out: Path
    config_hash: str
    rows: list
    fits: FitBundle
    report: dict


def run_experiment(cfg: ExperimentConfig, out=None, workers: int | None = None) -> RunResult:
    """Run every sweep point and write the bundle.

    Raises:
        ExperimentError: a sweep point failed. Curves of the points that did
            finish are kept in ``curves/<axis>.partial.csv``.
    """
    out = Path(out if out is not None else (cfg.output or "results"))
    workers = workers or cfg.workers
    (out / "curves").mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.config_hash()
    (out / "config.json").write_text(_dump_json(cfg.hash_payload()))

    classes, _, _ = _prepared(cfg)
    if "inter" in cfg.pairings and len(classes) < 2:
        raise ParameterError("inter-class pairing needs at least two classes")
    ms = m_values(cfg)
    if cfg.sweep.axis == "M":
        grid = [(M, M) for M in ms]
    else:
        grid = [(v, M) for v in cfg.sweep.values for M in ms]
    jobs = [(cfg, v, M, rep) for v, M in grid for rep in range(cfg.seeds_per_point)]
    log.info("%s: %d jobs on %d worker(s)", cfg.name, len(jobs), workers)

    results: dict = {}
    failure = None
    if workers == 1:
        for job in jobs:
            try:
                results[job[1:]] = _point_job(job)
            except ExperimentError as exc:
                failure = exc
                break
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(job[1:], pool.submit(_point_job, job)) for job in jobs]
            for key, fut in futures:
                try:
                    results[key] = fut.result()
                except ExperimentError as exc:
                    failure = failure or exc
                except Exception as exc:  # worker crashed outside the library
                    failure = failure or ExperimentError(
                        f"{_point_name(cfg, *key)}: {type(exc).__name__}: {exc}", point=key)

    rows = []
    for v, M in grid:
        reps = [results.get((v, M, r)) for r in range(cfg.seeds_per_point)]
        if all(r is not None for r in reps):
            rows.extend(_rows_for(cfg, classes, v, M, reps))
    axis = cfg.sweep.axis
    if failure is not None:
        (out / "curves" / f"{axis}.partial.csv").write_text(curves_to_csv(rows))
        raise failure

    csv_path = out / "curves" / f"{axis}.csv"
    csv_path.write_text(curves_to_csv(rows))
    bundle = fit_curves(read_curves(csv_path), axis, cfg.fits, source=f"curves/{axis}.csv")
    _write_fits(out, bundle)
    seeds = {
        "base": cfg.seed,
        "replicates": [cfg.seed + r for r in range(cfg.seeds_per_point)],
        "init": "1000 * replicate_seed + class_index",
        "training": [cfg.training.seed + cfg.seed + r for r in range(cfg.seeds_per_point)],
        "split": cfg.dataset.split_seed,
    }
    report = _report(cfg_hash, seeds, axis, bundle, cfg.fits)
    (out / "report.json").write_text(_dump_json(report))
    _write_manifest(out)
    return RunResult(out, cfg_hash, rows, bundle, report)


def refit(out) -> FitBundle:
    """Recompute fits from the curves already in a bundle and rewrite fits, report and manifest."""
    out = Path(out)
    report = json.loads((out / "report.json").read_text())
    cfg_raw = json.loads((out / "config.json").read_text())
    spec = FitSpec(**cfg_raw.get("fits", {}))
    axis = report["axis"]
    bundle = fit_curves(read_curves(out / "curves" / f"{axis}.csv"), axis, spec, source=f"curves/{axis}.csv")
    _write_fits(out, bundle)
    new = _report(report["config_hash"], report["seeds"], axis, bundle, spec)
    (out / "report.json").write_text(_dump_json(new))
    _write_manifest(out)
    return bundle


# -- replay -------------------------------------------------------------------


@dataclass
class ReplayReport:
    issues: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    fits_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.issues


def _close(a, b, tol: float) -> bool:
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    if a == b:
        return True
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _compare_fit(stored: dict, fresh: ScalingFit, tol: float) -> list[str]:
    diffs = []
    if stored.get("kind") != fresh.kind:
        return [f"kind {stored.get('kind')} vs {fresh.kind}"]
    for group in ("coefficients", "stderr"):
        for k, v in getattr(fresh, group).items():
            s = float(stored.get(group, {}).get(k, math.nan))
            if not _close(s, v, tol):
                diffs.append(f"{group}.{k} {s!r} vs {v!r}")
    for k in ("r_squared", "residual_max"):
        if not _close(float(stored.get(k, math.nan)), getattr(fresh, k), tol):
            diffs.append(f"{k} {stored.get(k)!r} vs {getattr(fresh, k)!r}")
    if int(stored.get("n_points", -1)) != fresh.n_points:
        diffs.append(f"n_points {stored.get('n_points')} vs {fresh.n_points}")
    return diffs


def replay(out, tol: float = 1e-12) -> ReplayReport:
    """Verify a bundle from its own files: hashes, config hash, and every fit."""
    out = Path(out)
    rep = ReplayReport()
    needed = ["report.json", "manifest.json", "config.json"]
    missing = [n for n in needed if not (out / n).exists()]
    if missing:
        raise ExperimentError(f"{out}: bundle incomplete, missing {missing}")
    report = json.loads((out / "report.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())

    for name, doc in (("report.json", report), ("manifest.json", manifest)):
        v = doc.get("format_version")
        if v != FORMAT_VERSION:
            rep.warnings.append(f"{name} has format version {v}, this reader writes {FORMAT_VERSION}; fits recomputed anyway")

    cfg_raw = json.loads((out / "config.json").read_text())
    blob = json.dumps(cfg_raw, sort_keys=True, separators=(",", ":"))
    if _sha(blob.encode()) != report.get("config_hash"):
        rep.issues.append("config.json does not match the config hash in report.json")

    for rel, entry in sorted(manifest.get("files", {}).items()):
        path = out / rel
        if not path.exists():
            rep.issues.append(f"{rel}: missing")
            continue
        data = path.read_bytes()
        if _sha(data) == entry.get("sha256"):
            continue
        if "rows" in entry:
            fresh = _manifest_entry(data, True)["rows"]
            for i in range(max(len(fresh), len(entry["rows"]))):
                a = entry["rows"][i] if i < len(entry["rows"]) else None
                b = fresh[i] if i < len(fresh) else None
                if a != b:
                    rep.issues.append(f"{rel}: row {i + 1} differs from the manifest")
        else:
            rep.issues.append(f"{rel}: content differs from the manifest")
    listed = set(manifest.get("files", {}))
    for path in sorted(out.rglob("*")):
        rel = path.relative_to(out).as_posix()
        if path.is_file() and rel != "manifest.json" and rel not in listed and not rel.endswith(".partial.csv"):
            rep.issues.append(f"{rel}: not in the manifest")

    axis = report.get("axis")
    curves = out / "curves" / f"{axis}.csv"
    if not curves.exists():
        raise ExperimentError(f"{out}: curves/{axis}.csv missing")
    spec = FitSpec(**cfg_raw.get("fits", {}))
    bundle = fit_curves(read_curves(curves), axis, spec, source=f"curves/{axis}.csv")
    stored_names = {p.stem for p in (out / "fits").glob("*.json")}
    for name in sorted(stored_names - set(bundle.fits)):
        rep.issues.append(f"fits/{name}.json: no such fit is produced by the stored curves")
    for name, fresh in sorted(bundle.fits.items()):
        if name not in stored_names:
            rep.issues.append(f"fits/{name}.json: missing")
            continue
        stored = json.loads((out / "fits" / f"{name}.json").read_text())
        rep.fits_checked += 1
        for d in _compare_fit(stored, fresh, tol):
            rep.issues.append(f"fits/{name}.json: {d}")
    return rep
