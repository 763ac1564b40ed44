"""Collaborative training loop, ablation modes, checkpoints and experiment logs."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .cfcl import cfcl_loss, compute_prototypes, class_aware_rep
from .data import SegDataset, batch_iter, load_dataset, make_dataset
from .metrics import EvalReport, evaluate
from .objective import AdamW, LossWeights, poly_lr, seg_loss, total_loss
from .rlcl import arm, kl_map_loss
from .students import Student, StudentConfig, init_student

log = logging.getLogger(__name__)

MODES = ("vanilla", "rlcl", "cfcl", "ctrcl", "dml")
STUDENTS = ("cnn", "transformer")
CKPT_MAGIC = b"CTRK"
CKPT_VERSION = 1


@dataclass
class RunConfig:
    mode: str = "ctrcl"
    seed: int = 0
    epochs: int = 60
    batch_size: int = 8
    base_lr: float = 3e-4
    weight_decay: float = 0.01
    beta: float = 3.0
    gamma1: float = 1.0
    gamma2: float = 2.0
    alpha: float = 20.0
    lambda_factors: str = "asc"
    num_classes: int = 4
    height: int = 64
    width: int = 64
    num_train: int = 200
    num_test: int = 50
    data_seed: int = 2024
    train_data: str = ""
    test_data: str = ""
    cnn_width: int = 16
    transformer_width: int = 16
    depth: int = 3
    heads: int = 2
    augment: bool = True
    eval_every: int = 10
    diag: bool = False
    out: str = ""

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs, batch_size and eval_every must be >= 1")
        if set(self.lambda_factors) - set("asc"):
            raise ValueError("lambda_factors may only contain 'a', 's', 'c'")
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma1, self.gamma2)

    def student_config(self, kind: str, seed: int) -> StudentConfig:
        width = self.cnn_width if kind == "cnn" else self.transformer_width
        return StudentConfig(
            kind=kind,
            num_classes=self.num_classes,
            base_width=width,
            depth=self.depth,
            attention_heads=self.heads,
            seed=seed,
        )

    @property
    def gates(self) -> Dict[str, bool]:
        """Which peer terms are live; a zero weight switches its term off entirely."""
        return {
            "rlcl": self.mode in ("rlcl", "ctrcl") and self.beta > 0,
            "dml": self.mode == "dml" and self.beta > 0,
            "cfcl_e": self.mode in ("cfcl", "ctrcl") and self.gamma1 > 0,
            "cfcl_d": self.mode in ("cfcl", "ctrcl") and self.gamma2 > 0,
        }


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    defaults = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _coerce(value, defaults[key]))
    return cfg


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def config_to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


def _derived_seeds(seed: int) -> Dict[str, int]:
    # one independent stream per concern, so every mode sees identical data order
    kids = np.random.SeedSequence(seed).spawn(4)
    names = ("init_cnn", "init_transformer", "shuffle", "augment")
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def load_splits(cfg: RunConfig) -> Tuple[SegDataset, SegDataset]:
    if cfg.train_data:
        train = load_dataset(cfg.train_data)
    else:
        train = make_dataset(cfg.num_train, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed)
    if cfg.test_data:
        test = load_dataset(cfg.test_data)
    else:
        test = make_dataset(cfg.num_test, cfg.height, cfg.width, cfg.num_classes, cfg.data_seed + 1)
    for d in (train, test):
        if d.num_classes != cfg.num_classes:
            raise ValueError(f"dataset has {d.num_classes} classes, config expects {cfg.num_classes}")
    return train, test


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    student: str
    seg: float
    rlcl: float
    cfcl_e: float
    cfcl_d: float
    total: float
    lr: float
    seconds: float = 0.0
    metrics: Optional[EvalReport] = None

    def row(self) -> dict:
        r = {k: getattr(self, k) for k in ("epoch", "student", "seg", "rlcl", "cfcl_e", "cfcl_d", "total", "lr", "seconds")}
        m = self.metrics
        for key in ("mean_dsc", "mean_jac", "mean_hsd", "mae"):
            r[key] = "" if m is None else getattr(m, key)
        return r

    def comparable(self) -> tuple:
        """Everything except wall-clock time."""
        m = None if self.metrics is None else json.dumps(self.metrics.to_dict(), sort_keys=True)
        return (self.epoch, self.student, self.seg, self.rlcl, self.cfcl_e, self.cfcl_d, self.total, self.lr, m)


@dataclass
class TrainState:
    cfg: RunConfig
    students: Dict[str, Student]
    optims: Dict[str, AdamW]
    aug_rng: np.random.Generator
    epoch: int = 0  # next epoch to run


@dataclass
class TrainResult:
    state: TrainState
    logs: List[EpochLog] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)

    @property
    def cnn(self) -> Student:
        return self.state.students["cnn"]

    @property
    def transformer(self) -> Student:
        return self.state.students["transformer"]


def init_state(cfg: RunConfig) -> TrainState:
    cfg.validate()
    seeds = _derived_seeds(cfg.seed)
    students = {k: init_student(cfg.student_config(k, seeds[f"init_{k}"])) for k in STUDENTS}
    optims = {k: AdamW(base_lr=cfg.base_lr, weight_decay=cfg.weight_decay) for k in STUDENTS}
    return TrainState(cfg, students, optims, np.random.default_rng(seeds["augment"]))


def compute_losses(cfg: RunConfig, outs: dict, labels: np.ndarray, diag: Optional[dict] = None) -> Dict[str, dict]:
    """Per-student loss terms for one batch (Tensor values, ``None`` when gated off)."""
    gates = cfg.gates
    terms = {k: {"seg": seg_loss(outs[k].P, labels), "rlcl": None, "cfcl_e": None, "cfcl_d": None} for k in STUDENTS}
    peer = {"cnn": "transformer", "transformer": "cnn"}

    if gates["rlcl"]:
        rect = {k: arm(outs[k].P.data, labels, cfg.lambda_factors) for k in STUDENTS}
        for k in STUDENTS:
            terms[k]["rlcl"] = kl_map_loss(outs[k].P, rect[peer[k]].P_r)
        if diag is not None:
            diag["arm"] = rect
    elif gates["dml"]:
        for k in STUDENTS:
            terms[k]["rlcl"] = kl_map_loss(outs[k].P, outs[peer[k]].P.data)

    for key, attr in (("cfcl_e", "F_E"), ("cfcl_d", "F_D")):
        if not gates[key]:
            continue
        reps = {}
        for k in STUDENTS:
            protos = compute_prototypes(getattr(outs[k], attr), labels)
            reps[k] = class_aware_rep(getattr(outs[k], attr), protos, cfg.alpha)
            if diag is not None:
                diag.setdefault("protos", {})[f"{k}_{key}"] = protos
        for k in STUDENTS:
            terms[k][key] = cfcl_loss(reps[k], reps[peer[k]].detach())
    return terms


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray, lr: float, diag: Optional[dict] = None):
    cfg = state.cfg
    x = T.Tensor(images.astype(np.float64))
    outs = {k: state.students[k].forward(x, train=True) for k in STUDENTS}
    terms = compute_losses(cfg, outs, labels, diag)
    w = cfg.weights()
    record = {}
    for k in STUDENTS:
        t = terms[k]
        loss = total_loss(t["seg"], t["rlcl"], t["cfcl_e"], t["cfcl_d"], w)
        T.backward(loss)
        record[k] = {name: (0.0 if v is None else v.item()) for name, v in t.items()}
        record[k]["total"] = loss.item()
    for k in STUDENTS:
        state.optims[k].step(state.students[k].params, lr)
    return record


def predict_fn(student: Student):
    def predict(images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return student.forward(images, train=False).P.data

    return predict


def evaluate_students(students: Dict[str, Student], dataset: SegDataset) -> Dict[str, EvalReport]:
    return {k: evaluate(predict_fn(students[k]), dataset) for k in STUDENTS}


def train(
    cfg: RunConfig,
    resume: Optional[str] = None,
    stop_after: Optional[int] = None,
    data: Optional[Tuple[SegDataset, SegDataset]] = None,
) -> TrainResult:
    """Jointly train both students for ``cfg.epochs`` epochs.

    ``resume`` continues from a checkpoint; ``stop_after`` ends the run after
    that many epochs (counted from zero) while keeping the full-length LR
    schedule, which is what a split run needs.
    """
    cfg.validate()
    train_set, test_set = data if data is not None else load_splits(cfg)
    if resume:
        state = load_checkpoint(resume).to_state()
        if dataclasses.asdict(state.cfg) | {"out": ""} != dataclasses.asdict(cfg) | {"out": ""}:
            raise ValueError("checkpoint was produced by a different configuration")
        state.cfg = cfg
    else:
        state = init_state(cfg)
    result = TrainResult(state)
    seeds = _derived_seeds(cfg.seed)
    per_epoch = -(-len(train_set) // cfg.batch_size)
    max_iter = cfg.epochs * per_epoch
    end = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    out_dir = Path(cfg.out) if cfg.out else None

    while state.epoch < end:
        epoch = state.epoch
        t0 = time.perf_counter()
        sums = {k: dict.fromkeys(("seg", "rlcl", "cfcl_e", "cfcl_d", "total"), 0.0) for k in STUDENTS}
        epoch_lr = None
        batches = batch_iter(train_set, cfg.batch_size, seeds["shuffle"], epoch, state.aug_rng if cfg.augment else None)
        for b, batch in enumerate(batches):
            lr = poly_lr(cfg.base_lr, epoch * per_epoch + b, max_iter)
            epoch_lr = lr if epoch_lr is None else epoch_lr
            result.lrs.append(lr)
            diag = {} if (cfg.diag and b == 0 and out_dir is not None) else None
            rec = train_step(state, batch.images, batch.labels, lr, diag)
            if diag:
                write_diagnostics(out_dir / "diag", epoch, diag)
            for k in STUDENTS:
                for name, v in rec[k].items():
                    sums[k][name] += v
        state.epoch += 1
        reports = None
        if state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs:
            reports = evaluate_students(state.students, test_set)
        secs = time.perf_counter() - t0
        for k in STUDENTS:
            means = {name: v / per_epoch for name, v in sums[k].items()}
            result.logs.append(EpochLog(epoch, k, lr=epoch_lr, seconds=secs, metrics=None if reports is None else reports[k], **means))
        log.info(
            "epoch %d  cnn %.4f  transformer %.4f%s",
            epoch,
            sums["cnn"]["total"] / per_epoch,
            sums["transformer"]["total"] / per_epoch,
            "" if reports is None else f"  dsc {reports['cnn'].mean_dsc:.4f} / {reports['transformer'].mean_dsc:.4f}",
        )

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.bin", CheckpointRecord.from_state(state))
        write_epoch_csv(out_dir / "epochs.csv", result.logs, append=bool(resume))
        final = [lg for lg in result.logs if lg.metrics is not None]
        if final:
            last = final[-1].epoch
            reports = {lg.student: lg.metrics for lg in final if lg.epoch == last}
            write_reports(out_dir, reports, cfg.num_classes, epoch=last)
    return result


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

CSV_FIELDS = ["epoch", "student", "seg", "rlcl", "cfcl_e", "cfcl_d", "total", "lr", "seconds", "mean_dsc", "mean_jac", "mean_hsd", "mae"]


def write_epoch_csv(path, logs: List[EpochLog], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            w.writeheader()
        for lg in logs:
            w.writerow(lg.row())


def write_reports(out_dir, reports: Dict[str, EvalReport], num_classes: int, epoch: Optional[int] = None) -> None:
    """``report.json`` plus ``report.csv``: per student one row per foreground class and a mean row.

    Classes never scored on the split get empty cells.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: r.to_dict() for k, r in reports.items()}
    if epoch is not None:
        payload["epoch"] = epoch
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["student", "class", "dsc", "jac", "hsd", "mae"])
        for k, r in reports.items():
            for c in range(1, num_classes):
                s = r.per_class.get(c)
                w.writerow([k, c] + (["", "", ""] if s is None else [s.dsc, s.jac, s.hsd]) + [""])
            w.writerow([k, "mean", r.mean_dsc, r.mean_jac, r.mean_hsd, r.mae])


def write_diagnostics(diag_dir: Path, epoch: int, diag: dict) -> None:
    """Flat little-endian f64 arrays plus an ``index.json`` describing them."""
    diag_dir.mkdir(parents=True, exist_ok=True)
    index_path = diag_dir / "index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else []
    arrays = []
    for k, rect in diag.get("arm", {}).items():
        for part in ("lam", "lam_a", "lam_s", "lam_c"):
            arrays.append((f"epoch{epoch:03d}_{k}_{part}", getattr(rect, part), {}))
    for name, protos in diag.get("protos", {}).items():
        arrays.append((f"epoch{epoch:03d}_{name}_prototypes", protos.prototypes.data, {"classes": protos.classes}))
    for fname, arr, extra in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        (diag_dir / f"{fname}.bin").write_bytes(arr.tobytes())
        index.append({"file": f"{fname}.bin", "epoch": epoch, "shape": list(arr.shape), "dtype": "<f8", **extra})
    index_path.write_text(json.dumps(index, indent=1))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class CheckpointRecord:
    version: int
    config: dict
    epoch: int
    rng: dict
    optim: dict  # student -> {"step_count": int, ...}
    arrays: Dict[str, np.ndarray]

    @classmethod
    def from_state(cls, state: TrainState) -> "CheckpointRecord":
        arrays = {}
        optim = {}
        for k in STUDENTS:
            st = state.students[k]
            for name, p in st.params.items():
                arrays[f"{k}/param/{name}"] = p.data
            for name, b in st.buffers.items():
                arrays[f"{k}/buffer/{name}"] = b
            op = state.optims[k]
            for name in op.m:
                arrays[f"{k}/adam_m/{name}"] = op.m[name]
                arrays[f"{k}/adam_v/{name}"] = op.v[name]
            optim[k] = {
                "step_count": op.step_count,
                "base_lr": op.base_lr,
                "weight_decay": op.weight_decay,
                "beta1": op.beta1,
                "beta2": op.beta2,
                "eps": op.eps,
            }
        return cls(
            CKPT_VERSION,
            dataclasses.asdict(state.cfg),
            state.epoch,
            {"augment": state.aug_rng.bit_generator.state},
            optim,
            arrays,
        )

    def to_state(self) -> TrainState:
        cfg = RunConfig(**self.config)
        seeds = _derived_seeds(cfg.seed)
        students = {}
        optims = {}
        for k in STUDENTS:
            st = init_student(cfg.student_config(k, seeds[f"init_{k}"]))
            for name in st.params:
                st.params[name] = T.Tensor(self.arrays[f"{k}/param/{name}"].copy(), requires_grad=True)
            for name in st.buffers:
                st.buffers[name] = self.arrays[f"{k}/buffer/{name}"].copy()
            students[k] = st
            o = self.optim[k]
            op = AdamW(o["base_lr"], o["weight_decay"], o["beta1"], o["beta2"], o["eps"], o["step_count"])
            for key, arr in self.arrays.items():
                if key.startswith(f"{k}/adam_m/"):
                    name = key[len(f"{k}/adam_m/") :]
                    op.m[name] = arr.copy()
                    op.v[name] = self.arrays[f"{k}/adam_v/{name}"].copy()
            optims[k] = op
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng["augment"]
        return TrainState(cfg, students, optims, rng, self.epoch)


def save_checkpoint(path, rec: CheckpointRecord) -> None:
    """``CTRK`` | u16 version | u32 header length | JSON header | f64 LE tensor blob."""
    index = [{"name": k, "shape": list(np.shape(v))} for k, v in rec.arrays.items()]
    header = {
        "version": rec.version,
        "config": rec.config,
        "epoch": rec.epoch,
        "rng": rec.rng,
        "optim": rec.optim,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", rec.version, len(blob)))
        fh.write(blob)
        for v in rec.arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> CheckpointRecord:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 10 or raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[10 : 10 + hlen])
    except ValueError as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    off = 10 + hlen
    arrays = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated tensor data")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(entry["shape"]).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return CheckpointRecord(header["version"], header["config"], header["epoch"], header["rng"], header["optim"], arrays)


def evaluate_cmd(checkpoint, dataset: Optional[SegDataset] = None, out_dir=None) -> Dict[str, EvalReport]:
    """Score both students of a checkpoint; the config's test split is used by default."""
    state = load_checkpoint(checkpoint).to_state()
    cfg = state.cfg
    if dataset is None:
        dataset = load_splits(cfg)[1]
    if dataset.num_classes != cfg.num_classes:
        raise ValueError(f"dataset has {dataset.num_classes} classes, checkpoint expects {cfg.num_classes}")
    if dataset.images.shape[2] % 8 or dataset.images.shape[3] % 8:
        raise ValueError("dataset image size must be divisible by 8")
    reports = evaluate_students(state.students, dataset)
    if out_dir is not None:
        write_reports(out_dir, reports, cfg.num_classes)
    return reports
