"""Replay a trace through cache policies and score them against a full-precision run."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_full
from .cache import CacheConfig, CompressionReport
from .core import Trace
from .policies import PolicyConfig, make_head
from .saliency import ProbeConfig, normalized_scores, top_tokens, topk_overlap

REPLAY_NOTE = ("decode steps replay recorded Q/K/V; effects of compression on which tokens "
               "would have been generated are not captured")


@dataclass
class PolicyReport:
    policy: str
    output_rel_err: dict | None = None  # {"per_layer": [...], "mean": x, "max": x}
    rank_overlap: float | None = None
    compression: CompressionReport | None = None
    runtime_ms: float = 0.0
    error: str | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = {
            "policy": self.policy,
            "output_rel_err": self.output_rel_err,
            "rank_overlap": self.rank_overlap,
            "compression": None if self.compression is None else self.compression.to_dict(),
        }
        if include_runtime:
            d["runtime_ms"] = self.runtime_ms
        d["error"] = self.error
        d["notes"] = list(self.notes)
        return _round_floats(d)


def _round_floats(obj):
    if isinstance(obj, float):
        return float(f"{obj:.6g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps_reports(reports: list[PolicyReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports], "note": REPLAY_NOTE}, indent=2)


@dataclass
class _Replay:
    outputs: list[np.ndarray]  # per layer, (b, h, l, d)
    compression: CompressionReport
    selected: dict  # (layer, b, h) -> indices or None


def _replay(trace: Trace, cfg: PolicyConfig) -> _Replay:
    b, h, l, d = trace.dims
    P = trace.prefill_len
    if P < 1:
        raise ValueError("trace needs at least one prefill token")
    outputs = []
    comp = CompressionReport()
    selected = {}
    for li, (Qt, Kt, Vt) in enumerate(trace.layers):
        out = np.empty((b, h, l, Vt.dims[3]))
        for bi in range(b):
            classes = trace.token_classes[bi]
            for hi in range(h):
                Q = Qt.head(bi, hi).astype(np.float64)
                K = Kt.head(bi, hi).astype(np.float64)
                V = Vt.head(bi, hi).astype(np.float64)
                seeds = np.random.SeedSequence([cfg.seed, cfg.cache.probe.seed, li, bi, hi])
                head = make_head(cfg, seeds)
                out[bi, hi, :P] = head.prefill(Q[:P], K[:P], V[:P], classes[:P])
                for t in range(P, l):
                    out[bi, hi, t] = head.decode(Q[t], K[t], V[t], int(classes[t]))
                comp = comp + head.report()
                selected[li, bi, hi] = head.selected()
        outputs.append(out)
    return _Replay(outputs, comp, selected)


def _rel_err(out, ref) -> float:
    denom = np.linalg.norm(ref)
    num = np.linalg.norm(out - ref)
    return float(num / denom) if denom > 0 else float(num)


def exact_top(trace: Trace, layer: int, b: int, h: int, n: int) -> np.ndarray:
    """Top-``n`` prefill tokens by normalized score on the full attention matrix."""
    P = trace.prefill_len
    Qt, Kt, Vt = trace.layers[layer]
    _, A = attention_full(Qt.head(b, h)[:P], Kt.head(b, h)[:P], Vt.head(b, h)[:P])
    return top_tokens(normalized_scores(A), n)


def _rank_overlap(trace: Trace, selected: dict) -> float | None:
    vals = []
    for (li, bi, hi), sel in selected.items():
        if sel is None:
            return None
        vals.append(topk_overlap(sel, exact_top(trace, li, bi, hi, len(sel))))
    return float(np.mean(vals)) if vals else None


def _report(cfg: PolicyConfig, trace: Trace, rep: _Replay, ref: _Replay, t0: float) -> PolicyReport:
    per_layer = [_rel_err(o, r) for o, r in zip(rep.outputs, ref.outputs)]
    all_out = np.concatenate([o.ravel() for o in rep.outputs])
    all_ref = np.concatenate([o.ravel() for o in ref.outputs])
    errs = {"per_layer": per_layer, "mean": float(np.mean(per_layer)), "max": float(np.max(per_layer)),
            "aggregate": _rel_err(all_out, all_ref)}
    notes = []
    if trace.decode_len:
        notes.append("decode replayed from trace")
    return PolicyReport(cfg.name, errs, _rank_overlap(trace, rep.selected), rep.compression,
                        (time.perf_counter() - t0) * 1e3, notes=notes)


FP16 = PolicyConfig("fp16")


def run_policy(trace: Trace, cfg: PolicyConfig, reference: _Replay | None = None) -> PolicyReport:
    t0 = time.perf_counter()
    if reference is None:
        reference = _replay(trace, FP16)
    rep = reference if cfg == FP16 else _replay(trace, cfg)
    return _report(cfg, trace, rep, reference, t0)


def run_compare(trace: Trace, configs: list[PolicyConfig]) -> list[PolicyReport]:
    """Run every config against one shared full-precision reference.

    A failing policy yields a report with ``error`` set; the others still run.
    """
    if not configs:
        raise ValueError("need at least one policy config")
    reference = _replay(trace, FP16)
    reports = []
    for cfg in configs:
        t0 = time.perf_counter()
        try:
            reports.append(run_policy(trace, cfg, reference))
        except Exception as exc:  # noqa: BLE001 - reported per policy
            reports.append(PolicyReport(cfg.name, error=f"{type(exc).__name__}: {exc}",
                                        runtime_ms=(time.perf_counter() - t0) * 1e3))
    return reports


# --------------------------------------------------------------------------
# config documents
# --------------------------------------------------------------------------

def policy_from_dict(d: dict, default_seed: int = 0) -> PolicyConfig:
    d = dict(d)
    probe = ProbeConfig(**d.pop("probe", {}))
    cache_keys = ("k_h", "k_l", "saliency_ratio", "recompress_interval")
    cache_kw = {k: d.pop(k) for k in cache_keys if k in d}
    cache = CacheConfig(probe=probe, **cache_kw)
    d.setdefault("seed", default_seed)
    return PolicyConfig(cache=cache, **d)


def load_config(path) -> list[PolicyConfig]:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        doc = tomllib.load(f)
    seed = int(doc.get("seed", 0))
    policies = doc.get("policy", [])
    if not policies:
        raise ValueError(f"{path}: no [[policy]] tables")
    return [policy_from_dict(p, seed) for p in policies]
