"""``flowc`` command line: compile, verify and study."""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .deep_net import deserialize, eval_deep, invert_deep, serialize
from .errors import FlowcError, InvalidParameter, ParseError
from .monotone import MonotoneTarget, compile_monotone_detailed
from .ode import BoxDomain, FieldSpec, PRESETS, TanhField, fit_tanh_field, preset_field, reference_flow_batch
from .scalar_nets import relu_piece_count
from .splitting import make_schedule, run_splitting
from .synth import FlowConfig, compile_flow

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


@dataclass(frozen=True)
class TaskConfig:
    field: object  # preset name or {"tanh": TanhField dict}
    domain: tuple
    tau: float
    eps: float
    alpha: float = 0.5
    n_override: Optional[int] = None
    N: Optional[int] = None
    seed: int = 0
    audit_points: int = 2048
    out: Optional[str] = None
    report: Optional[str] = None
    audit_csv: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "TaskConfig":
        if not isinstance(doc, dict):
            raise InvalidParameter("task file must hold a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise InvalidParameter(f"unknown task keys: {sorted(unknown)}")
        for key in ("field", "domain", "tau", "eps"):
            if key not in doc:
                raise InvalidParameter(f"task is missing {key!r}")
        try:
            domain = tuple((float(a), float(b)) for a, b in doc["domain"])
            cfg = cls(
                field=doc["field"],
                domain=domain,
                tau=float(doc["tau"]),
                eps=float(doc["eps"]),
                alpha=float(doc.get("alpha", 0.5)),
                n_override=None if doc.get("n_override") is None else int(doc["n_override"]),
                N=None if doc.get("N") is None else int(doc["N"]),
                seed=int(doc.get("seed", 0)),
                audit_points=int(doc.get("audit_points", 2048)),
                out=doc.get("out"),
                report=doc.get("report"),
                audit_csv=doc.get("audit_csv"),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidParameter(f"malformed task: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.eps > 0:
            raise InvalidParameter(f"eps must be positive, got {self.eps}")
        if not 0 < self.alpha < 1:
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.tau > 0:
            raise InvalidParameter(f"tau must be positive, got {self.tau}")
        if self.audit_points < 2:
            raise InvalidParameter("audit_points must be at least 2")
        if self.N is not None and self.N < 1:
            raise InvalidParameter("N must be positive")
        if self.n_override is not None and self.n_override < 1:
            raise InvalidParameter("n_override must be positive")
        BoxDomain.from_intervals(self.domain)
        self.field_spec()

    def field_spec(self) -> FieldSpec:
        if isinstance(self.field, str):
            return preset_field(self.field)
        if isinstance(self.field, dict) and "tanh" in self.field:
            try:
                return FieldSpec.from_tanh(TanhField.from_dict(self.field["tanh"]), name="inline")
            except (KeyError, TypeError, ValueError) as exc:
                raise InvalidParameter(f"bad inline tanh field: {exc}") from exc
        raise InvalidParameter(f"field must be a preset name ({sorted(PRESETS)}) or {{'tanh': ...}}")

    def box(self) -> BoxDomain:
        return BoxDomain.from_intervals(self.domain)

    def flow_config(self) -> FlowConfig:
        kw = {"seed": self.seed, "audit_points": self.audit_points, "n_override": self.n_override}
        if self.N is not None:
            kw["N_candidates"] = (self.N,)
        return FlowConfig(**kw)

    def task_hash(self) -> str:
        doc = {
            "field": self.field, "domain": [list(iv) for iv in self.domain], "tau": self.tau, "eps": self.eps,
            "alpha": self.alpha, "n_override": self.n_override, "N": self.N, "seed": self.seed,
            "audit_points": self.audit_points,
        }
        text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_task(path: str) -> TaskConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read task file {path!r}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidParameter(f"task file is not valid JSON: {exc}") from exc
    return TaskConfig.from_dict(doc)


def thread_cap() -> int:
    """``FLOWC_THREADS`` as a positive int (default 1; execution is sequential)."""
    raw = os.environ.get("FLOWC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParameter(f"FLOWC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidParameter("FLOWC_THREADS must be positive")
    return n


def _fmt(v) -> str:
    return repr(float(v))


def audit_csv(pts, ref, out) -> str:
    d = pts.shape[1]
    cols = [f"x_{i}" for i in range(1, d + 1)] + [f"ref_{i}" for i in range(1, d + 1)]
    cols += [f"net_{i}" for i in range(1, d + 1)] + ["err"]
    err = np.linalg.norm(out - ref, axis=1)
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for row in np.hstack([pts, ref, out, err[:, None]]):
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _default_path(task_path: str, suffix: str) -> str:
    p = Path(task_path)
    return str(p.with_name(p.stem + suffix))


def cmd_compile(task_path: str, out: Optional[str] = None, report: Optional[str] = None) -> int:
    try:
        thread_cap()
        task = load_task(task_path)
    except (FileNotFoundError, InvalidParameter) as exc:
        print(f"flowc compile: {exc}", file=sys.stderr)
        return EXIT_USAGE
    net_path = out or task.out or _default_path(task_path, ".net.json")
    rep_path = report or task.report or _default_path(task_path, ".report.json")
    csv_path = task.audit_csv or _default_path(task_path, ".audit.csv")
    try:
        net, rep = compile_flow(task.field_spec(), task.box(), task.tau, task.eps, task.alpha, task.flow_config())
    except FlowcError as exc:
        stage = getattr(exc, "stage", None)
        where = f" [{stage}]" if stage else ""
        print(f"flowc compile: {exc.kind}{where}: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag:
            print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_FAIL
    meta = {"task_hash": task.task_hash()}
    try:
        Path(net_path).write_text(serialize(net, meta))
        Path(rep_path).write_text(rep.to_json())
        pts = _verify_points(task.box(), task.audit_points, task.seed, fresh=False)
        ref = reference_flow_batch(task.field_spec(), pts, task.tau, 1e-10)
        Path(csv_path).write_text(audit_csv(pts, ref, eval_deep(net, pts)))
    except OSError as exc:
        print(f"flowc compile: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"certified: max_err={_fmt(rep.audit['max_err'])} eps={_fmt(task.eps)} n={rep.n} N={rep.N} "
          f"depth={rep.depth} net={net_path}")
    return EXIT_OK


def _verify_points(box: BoxDomain, n: int, seed: int, fresh: bool) -> np.ndarray:
    from .synth import _audit_points

    return _audit_points(box, n, seed + (104729 if fresh else 0))


def cmd_verify(net_path: str, task_path: str) -> int:
    try:
        task = load_task(task_path)
        net = deserialize(Path(net_path).read_text())
    except (FileNotFoundError, OSError, InvalidParameter, ParseError) as exc:
        print(f"flowc verify: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if net.dim != len(task.domain):
        print("flowc verify: net and task dimensions differ", file=sys.stderr)
        return EXIT_USAGE
    pts = _verify_points(task.box(), task.audit_points, task.seed, fresh=True)
    try:
        ref = reference_flow_batch(task.field_spec(), pts, task.tau, 1e-10)
    except FlowcError as exc:
        print(f"flowc verify: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = eval_deep(net, pts)
    err = np.linalg.norm(out - ref, axis=1)
    back = invert_deep(net, out)
    resid = float(np.max(np.abs(back - pts)))
    ok = float(np.max(err)) <= task.eps
    print(f"max_err={_fmt(np.max(err))} mean_err={_fmt(np.mean(err))} roundtrip={_fmt(resid)} "
          f"eps={_fmt(task.eps)} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# studies


def study_split_convergence(field_name: str = "tanh_demo", halvings: int = 5, seed: int = 0, tau: float = 1.0):
    """Rows (n, dt, max_err) and the least-squares log-log slope."""
    spec = preset_field(field_name)
    box = BoxDomain.cube(spec.dim)
    if spec.tanh is not None:
        tf = spec.tanh
    else:
        tf, _ = fit_tanh_field(spec, box.inflate(1.0), tau, 8, math.inf, seed=seed, strict=False)
    tspec = FieldSpec.from_tanh(tf)
    pts = box.grid(11 if spec.dim <= 2 else 5)
    ref = reference_flow_batch(tspec, pts, tau, 1e-12)
    rows = []
    n = 16
    for _ in range(halvings):
        traj = run_splitting(pts, make_schedule(tf, n, tau))
        rows.append((n, tau / n, float(np.max(np.linalg.norm(traj[-1] - ref, axis=1)))))
        n *= 2
    dts = np.log([r[1] for r in rows])
    errs = np.log([r[2] for r in rows])
    slope = float(np.polyfit(dts, errs, 1)[0])
    return rows, slope


def study_1d_monotone(eps_ladder=(0.1, 0.05, 0.025, 0.0125, 0.00625), alpha: float = 0.5):
    targets = {
        "tanh": lambda x: np.tanh(x),
        "cube": lambda x: x ** 3,
        "tanh2x": lambda x: np.tanh(2 * x),
    }
    rows = []
    for name, fn in targets.items():
        for eps in eps_ladder:
            res = compile_monotone_detailed(MonotoneTarget(fn, (-1.0, 1.0)), eps, alpha)
            rows.append((name, eps, res.audit_error, res.depth, res.n_pieces, res.audit_error <= eps))
    return rows


def study_relu_pieces(samples: int = 1000, seed: int = 0, max_depth: int = 12):
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(samples):
        depth = int(rng.integers(1, max_depth + 1))
        layers = [(float(rng.normal()), float(rng.normal())) for _ in range(depth + 1)]
        rows.append((k, depth, relu_piece_count(layers)))
    return rows


def _csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    return buf.getvalue()


def cmd_study(kind: str, out: Optional[str] = None, seed: int = 0, field_name: str = "tanh_demo") -> int:
    try:
        thread_cap()
        if kind == "split-convergence":
            rows, slope = study_split_convergence(field_name, seed=seed)
            text = _csv(("n", "dt", "max_err"), rows)
            summary = f"empirical order {slope:.4f}"
        elif kind == "1d-monotone":
            rows = study_1d_monotone()
            text = _csv(("target", "eps", "achieved", "depth", "pieces", "ok"), rows)
            summary = f"{sum(r[-1] for r in rows)}/{len(rows)} rows within eps"
        elif kind == "relu-pieces":
            rows = study_relu_pieces(seed=seed)
            text = _csv(("sample", "depth", "pieces"), rows)
            summary = f"max piece count {max(r[2] for r in rows)} over {len(rows)} nets"
        else:
            print(f"flowc study: unknown kind {kind!r}", file=sys.stderr)
            return EXIT_USAGE
    except InvalidParameter as exc:
        print(f"flowc study: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    print(summary, file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowc", description="Compile ODE flow maps into leaky-ReLU networks.")
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("compile", help="compile a task into a network file")
    c.add_argument("--task", required=True)
    c.add_argument("--out")
    c.add_argument("--report")
    v = sub.add_parser("verify", help="re-audit a network file against its task")
    v.add_argument("--net", required=True)
    v.add_argument("--task", required=True)
    s = sub.add_parser("study", help="emit study data as CSV")
    s.add_argument("kind")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--field", default="tanh_demo", help="preset for split-convergence")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "compile":
        return cmd_compile(args.task, args.out, args.report)
    if args.command == "verify":
        return cmd_verify(args.net, args.task)
    return cmd_study(args.kind, args.out, args.seed, args.field)


if __name__ == "__main__":
    sys.exit(main())
