"""Biometric metrics, protocol splits and report formatting.

Scores are fake probabilities. At threshold ``t`` a sample is called fake
when its score is ``>= t``, so FAR(t) (fakes passed as live) rises with
``t`` and FRR(t) (lives rejected) falls.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Manifest
from .errors import InvariantViolation, LabelError, MetricError, ProtocolError
from .taxonomy import AttackTaxonomy

PROTOCOLS = ("P1", "P2", "P3.1", "P3.2")
METRIC_NAMES = ("acer", "auc", "eer", "acc")
P3_LOW = ("2D", "manipulation", "adversarial")
P3_HIGH = ("3D", "generation")


@dataclass(frozen=True)
class MetricsReport:
    acer: float
    auc: float
    eer: float
    acc: float
    threshold: float
    threshold_policy: str
    eer_threshold: float
    roc_thresholds: tuple[float, ...]
    roc_far: tuple[float, ...]
    roc_frr: tuple[float, ...]
    n_live: int
    n_fake: int

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(f"{name}={v} outside [0, 1]")

    def as_percentages(self) -> dict[str, float]:
        return {name: round(100.0 * getattr(self, name), 2) for name in METRIC_NAMES}

    def summary(self) -> dict:
        """Everything but the ROC arrays."""
        d = asdict(self)
        for k in ("roc_thresholds", "roc_far", "roc_frr"):
            d.pop(k)
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        for k in ("roc_thresholds", "roc_far", "roc_frr"):
            d[k] = tuple(d.get(k, ()))
        return cls(**d)


def _check_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 (live) or 1 (fake)")
    y = y.astype(bool)
    if y.all() or (~y).all():
        raise MetricError("both live and fake samples are required")
    return s, y


def roc_sweep(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FAR and FRR at every distinct score plus one threshold above the maximum."""
    s, y = _check_inputs(scores, labels)
    thresholds = np.append(np.unique(s), np.nextafter(s.max(), np.inf))
    fake_sorted = np.sort(s[y])
    live_sorted = np.sort(s[~y])
    far = np.searchsorted(fake_sorted, thresholds, side="left") / len(fake_sorted)
    frr = 1.0 - np.searchsorted(live_sorted, thresholds, side="left") / len(live_sorted)
    return thresholds, far, frr


def equal_error_rate(thresholds: np.ndarray, far: np.ndarray, frr: np.ndarray) -> tuple[float, float]:
    """(EER, threshold) at the FAR/FRR crossing, interpolating between bracketing thresholds."""
    diff = far - frr
    k = int(np.argmax(diff >= 0))  # diff ends at +1, so a crossing always exists
    if diff[k] == 0 or k == 0:
        return float(far[k]), float(thresholds[k])
    a = -diff[k - 1] / (diff[k] - diff[k - 1])
    eer = far[k - 1] + a * (far[k] - far[k - 1])
    return float(eer), float(thresholds[k - 1] + a * (thresholds[k] - thresholds[k - 1]))


def auc_score(scores, labels) -> float:
    """Probability a fake outscores a live sample, ties counting one half."""
    s, y = _check_inputs(scores, labels)
    ranks = rankdata(s)
    n_fake = int(y.sum())
    n_live = len(y) - n_fake
    u = ranks[y].sum() - n_fake * (n_fake + 1) / 2.0
    return float(u / (n_fake * n_live))


def _rates_at(s: np.ndarray, y: np.ndarray, t: float) -> tuple[float, float, float]:
    pred_fake = s >= t
    far = float(np.mean(~pred_fake[y]))
    frr = float(np.mean(pred_fake[~y]))
    acc = float(np.mean(pred_fake == y))
    return far, frr, acc


def compute_metrics(scores, labels, threshold: float | str = 0.5) -> MetricsReport:
    """ACER/AUC/EER/ACC for fake-probability ``scores`` and labels (1 = fake).

    ``threshold`` is a number (for example a development-set EER threshold)
    or ``"eer"`` to operate at this set's own EER point, where ACER uses the
    interpolated rates and therefore equals the EER.
    """
    s, y = _check_inputs(scores, labels)
    thresholds, far, frr = roc_sweep(s, y)
    eer, eer_t = equal_error_rate(thresholds, far, frr)
    auc = auc_score(s, y)
    if isinstance(threshold, str):
        if threshold != "eer":
            raise MetricError(f"unknown threshold policy {threshold!r}")
        t, policy = eer_t, "eer"
        _, _, acc = _rates_at(s, y, t)
        acer = eer
    else:
        t = float(threshold)
        if not math.isfinite(t):
            raise MetricError("threshold must be finite")
        policy = f"fixed:{t:g}"
        a, r, acc = _rates_at(s, y, t)
        acer = (a + r) / 2.0
    return MetricsReport(
        acer=float(acer),
        auc=auc,
        eer=eer,
        acc=acc,
        threshold=t,
        threshold_policy=policy,
        eer_threshold=eer_t,
        roc_thresholds=tuple(float(v) for v in thresholds),
        roc_far=tuple(float(v) for v in far),
        roc_frr=tuple(float(v) for v in frr),
        n_live=int((~y).sum()),
        n_fake=int(y.sum()),
    )


# ---------------------------------------------------------------- protocols


@dataclass(frozen=True)
class ProtocolSplit:
    protocol: str
    seed: int
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    taxonomy_digest: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if any(len(s) != len(v) for s, v in zip(sets, (self.train, self.val, self.test))):
            raise InvariantViolation("split index lists contain duplicates")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InvariantViolation("train/val/test index sets overlap")

    def indices(self, part: str) -> np.ndarray:
        if part not in ("train", "val", "test"):
            raise ProtocolError(f"unknown split part {part!r}")
        return np.asarray(getattr(self, part), dtype=np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("train", "val", "test"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolSplit":
        try:
            return cls(
                protocol=normalize_protocol(d["protocol"]),
                seed=int(d["seed"]),
                train=tuple(int(i) for i in d["train"]),
                val=tuple(int(i) for i in d["val"]),
                test=tuple(int(i) for i in d["test"]),
                taxonomy_digest=str(d.get("taxonomy_digest", "")),
                meta=dict(d.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed split: {exc}") from exc


def normalize_protocol(protocol: str) -> str:
    p = str(protocol).upper()
    if p not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    return p


def p2_counts(n: int) -> tuple[int, int, int]:
    """Half (rounded up) to train, a fifth (floored) to val, the rest to test."""
    train = -(-n // 2)
    val = n // 5
    return train, val, n - train - val


def _fields(manifest: Manifest) -> dict[str, np.ndarray]:
    recs = manifest.records
    return {
        "identity": np.array([r.identity_id for r in recs], dtype=np.int64),
        "live": np.array([r.is_live for r in recs], dtype=bool),
        "l2": np.array([-1 if r.l2 is None else r.l2 for r in recs], dtype=np.int64),
        "l3": np.array([-1 if r.l3 is None else r.l3 for r in recs], dtype=np.int64),
        "method": np.array([-1 if r.method_id is None else r.method_id for r in recs], dtype=np.int64),
    }


def _three_way(items: np.ndarray, counts: tuple[int, int, int], rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(items)
    a, b, _ = counts
    return [perm[:a], perm[a : a + b], perm[a + b :]]


def _split_by_identity(f, mask, counts_fn, rng) -> list[np.ndarray]:
    ids = np.unique(f["identity"][mask])
    groups = _three_way(ids, counts_fn(len(ids)), rng)
    return [np.flatnonzero(mask & np.isin(f["identity"], g)) for g in groups]


def _split_records(idx: np.ndarray, fractions: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    n = len(idx)
    n_val = int(math.floor(fractions[1] * n))
    n_test = int(math.floor(fractions[2] * n)) if len(fractions) > 2 else 0
    counts = (n - n_val - n_test, n_val, n_test)
    return _three_way(idx, counts, rng)


def make_protocol_split(
    manifest: Manifest,
    taxonomy: AttackTaxonomy,
    protocol: str,
    seed: int = 0,
    p1_fractions: Sequence[float] = (0.6, 0.2, 0.2),
    stratified: bool = True,
) -> ProtocolSplit:
    """Build one of the four evaluation splits over the manifest's records.

    P1 holds out identities. P2 holds out leaf methods (per level-3 node when
    ``stratified``) and splits lives by identity with the same counts. P3.1
    trains on the 2D, manipulation and adversarial branches and tests on 3D
    and generation; P3.2 swaps the two groups. P3 lives are split 50/20/30
    at record level.
    """
    protocol = normalize_protocol(protocol)
    if len(manifest) == 0:
        raise ProtocolError("manifest is empty")
    manifest.validate(taxonomy)
    f = _fields(manifest)
    live = f["live"]
    if not live.any():
        raise ProtocolError("no live records in the manifest")
    if live.all():
        raise ProtocolError("no attack records in the manifest")
    rng = np.random.default_rng([seed, PROTOCOLS.index(protocol)])
    meta: dict = {}

    if protocol == "P1":
        if len(p1_fractions) != 3 or abs(sum(p1_fractions) - 1.0) > 1e-9 or min(p1_fractions) <= 0:
            raise ProtocolError(f"P1 fractions must be three positive values summing to 1, got {tuple(p1_fractions)}")

        def p1_counts(n):
            val = int(math.floor(p1_fractions[1] * n))
            test = int(math.floor(p1_fractions[2] * n))
            return n - val - test, val, test

        ids = np.unique(f["identity"])
        counts = p1_counts(len(ids))
        if min(counts) < 1:
            raise ProtocolError(f"P1 needs at least one identity per split, got {len(ids)} identities")
        groups = _three_way(ids, counts, rng)
        parts = [np.flatnonzero(np.isin(f["identity"], g)) for g in groups]
        leaves = set(np.unique(f["l3"][~live]).tolist())
        for name, p in zip(("train", "val", "test"), parts):
            missing = leaves - set(f["l3"][p].tolist())
            if missing:
                raise ProtocolError(f"P1 {name} split lacks attack types {sorted(taxonomy[m].name for m in missing)}")
        meta["identities"] = {n: sorted(int(i) for i in g) for n, g in zip(("train", "val", "test"), groups)}

    elif protocol == "P2":
        fake = ~live
        methods = np.unique(f["method"][fake])
        if stratified:
            groups = [[], [], []]
            for node in np.unique(f["l3"][fake]):
                node_methods = np.unique(f["method"][fake & (f["l3"] == node)])
                for g, part in zip(groups, _three_way(node_methods, p2_counts(len(node_methods)), rng)):
                    g.extend(part.tolist())
            method_groups = [np.array(sorted(g), dtype=np.int64) for g in groups]
        else:
            method_groups = [np.sort(g) for g in _three_way(methods, p2_counts(len(methods)), rng)]
        if len(method_groups[0]) == 0 or len(method_groups[2]) == 0:
            raise ProtocolError(f"P2 needs train and test methods, got {len(methods)} methods")
        live_parts = _split_by_identity(f, live, p2_counts, rng)
        parts = [np.union1d(np.flatnonzero(fake & np.isin(f["method"], g)), lp) for g, lp in zip(method_groups, live_parts)]
        meta["methods"] = {n: [int(m) for m in g] for n, g in zip(("train", "val", "test"), method_groups)}

    else:
        train_names, test_names = (P3_LOW, P3_HIGH) if protocol == "P3.1" else (P3_HIGH, P3_LOW)
        present = set(f["l2"][~live].tolist())
        ids = {}
        for name in (*train_names, *test_names):
            try:
                node = taxonomy.by_name(name)
            except LabelError as exc:
                raise ProtocolError(f"{protocol} needs the {name!r} branch, which the taxonomy lacks") from exc
            if node.id not in present:
                raise ProtocolError(f"{protocol} needs the {name!r} branch, which has no records")
            ids[name] = node.id
        train_pool = np.flatnonzero(np.isin(f["l2"], [ids[n] for n in train_names]))
        test_fake = np.flatnonzero(np.isin(f["l2"], [ids[n] for n in test_names]))
        tr, va, _ = _split_records(train_pool, (0.7, 0.3), rng)
        lv = _split_records(np.flatnonzero(live), (0.5, 0.2, 0.3), rng)
        parts = [np.union1d(tr, lv[0]), np.union1d(va, lv[1]), np.union1d(test_fake, lv[2])]
        meta["train_branches"] = list(train_names)
        meta["test_branches"] = list(test_names)

    return ProtocolSplit(
        protocol=protocol,
        seed=int(seed),
        train=tuple(int(i) for i in np.sort(parts[0])),
        val=tuple(int(i) for i in np.sort(parts[1])),
        test=tuple(int(i) for i in np.sort(parts[2])),
        taxonomy_digest=taxonomy.digest(),
        meta=meta,
    )


def verify_split(split: ProtocolSplit, manifest: Manifest, taxonomy: AttackTaxonomy) -> None:
    """Raise InvariantViolation unless the split satisfies its protocol's constraints."""
    n = len(manifest)
    all_idx = [*split.train, *split.val, *split.test]
    if any(i < 0 or i >= n for i in all_idx):
        raise InvariantViolation("split refers to records outside the manifest")
    f = _fields(manifest)
    parts = [split.indices(p) for p in ("train", "val", "test")]
    if split.protocol == "P1":
        ids = [set(f["identity"][p].tolist()) for p in parts]
        if ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2]:
            raise InvariantViolation("P1 identities shared between splits")
    elif split.protocol == "P2":
        ms = [set(f["method"][p][~f["live"][p]].tolist()) for p in parts]
        if ms[0] & ms[1] or ms[0] & ms[2] or ms[1] & ms[2]:
            raise InvariantViolation("P2 methods shared between splits")
    else:
        train_names = P3_LOW if split.protocol == "P3.1" else P3_HIGH
        train_ids = {taxonomy.by_name(nm).id for nm in train_names}
        test_l2 = set(f["l2"][parts[2]].tolist()) - {-1}
        if test_l2 & train_ids:
            raise InvariantViolation(f"{split.protocol} test contains training-category records")
        fit_l2 = set(f["l2"][np.concatenate(parts[:2])].tolist()) - {-1}
        if fit_l2 - train_ids:
            raise InvariantViolation(f"{split.protocol} train/val contains test-category records")


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class ReportRow:
    protocol: str
    comparator: str
    seed: int | None
    metrics: MetricsReport
    routing_accuracy: float | None = None

    def flat(self) -> dict:
        row = {"protocol": self.protocol, "comparator": self.comparator, "seed": self.seed}
        row.update(self.metrics.as_percentages())
        row["threshold_policy"] = self.metrics.threshold_policy
        row["routing_acc"] = None if self.routing_accuracy is None else round(100.0 * self.routing_accuracy, 2)
        return row

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "comparator": self.comparator,
            "seed": self.seed,
            "metrics": self.metrics.to_dict(),
            "routing_accuracy": self.routing_accuracy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRow":
        return cls(d["protocol"], d["comparator"], d.get("seed"), MetricsReport.from_dict(d["metrics"]), d.get("routing_accuracy"))


def summarize(rows: Iterable[ReportRow]) -> list[dict]:
    """Mean and sample std (percent) of each metric per (protocol, comparator)."""
    groups: dict[tuple[str, str], list[ReportRow]] = {}
    for r in rows:
        groups.setdefault((r.protocol, r.comparator), []).append(r)
    out = []
    for (protocol, comparator), rs in groups.items():
        entry = {"protocol": protocol, "comparator": comparator, "n_seeds": len(rs)}
        for m in METRIC_NAMES:
            vals = np.array([100.0 * getattr(r.metrics, m) for r in rs])
            entry[f"{m}_mean"] = round(float(vals.mean()), 2)
            entry[f"{m}_std"] = round(float(vals.std(ddof=1)) if len(vals) > 1 else 0.0, 2)
        out.append(entry)
    return out


REPORT_COLUMNS = ("protocol", "comparator", "seed", "acer", "auc", "eer", "acc", "threshold_policy", "routing_acc")


def format_report(rows: Sequence[ReportRow], fmt: str = "text") -> str:
    """One row per (comparator, seed); metrics in percent with two decimals."""
    flat = [r.flat() for r in rows]
    if fmt == "json":
        return json.dumps({"rows": flat, "summary": summarize(rows)}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in flat:
            w.writerow({k: ("" if row[k] is None else (f"{row[k]:.2f}" if k in METRIC_NAMES or k == "routing_acc" else row[k])) for k in REPORT_COLUMNS})
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    header = f"{'protocol':<8} {'comparator':<14} {'seed':>4} {'ACER':>7} {'AUC':>7} {'EER':>7} {'ACC':>7}  threshold"
    lines = [header, "-" * len(header)]
    for row in flat:
        seed = "-" if row["seed"] is None else str(row["seed"])
        line = (
            f"{row['protocol']:<8} {row['comparator']:<14} {seed:>4} "
            f"{row['acer']:>7.2f} {row['auc']:>7.2f} {row['eer']:>7.2f} {row['acc']:>7.2f}  {row['threshold_policy']}"
        )
        if row["routing_acc"] is not None:
            line += f"  routing {row['routing_acc']:.2f}"
        lines.append(line)
    return "\n".join(lines) + "\n"
