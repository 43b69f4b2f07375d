"""Simulated-user matching-task harness: suite construction, method
runners, metrics, and CSV/JSON reporting.

A hidden target coefficient vector is judged only through preference
feedback from a simulated user that ranks candidates by similarity to the
target. All methods consume an identical inference budget (5 initial
evaluations plus 20 iterations of 8), asserted per run.
"""

from __future__ import annotations

import csv
import io
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .acquisition import AcquisitionConfig, optimize_batch
from .core import Hypercube, MergeCoefficients, SessionConfig
from .loop import RankingSubmission, Session
from .renderer import (
    RenderSpec,
    coefficient_similarity,
    image_similarity,
    render,
)
from .simplex import sample_initial
from .surrogate import PosteriorMixture, infer_latent_utilities, sample_hyperposterior

METHODS = (
    "ours",
    "gallery",
    "cyclic_cd",
    "random_cd",
    "random_dir",
    "ours_capoff",
    "ours_top1_nopast",
)

WEIGHT_BINS = ("(0,1]", "(1,2]", "(2,3]", "(3,4]")

# Target distribution of the 30 test cases: active count z -> weight-sum
# bin -> case count.
SUITE_TABLE = {
    2: {"(0,1]": 1, "(1,2]": 10},
    3: {"(1,2]": 3, "(2,3]": 5},
    4: {"(1,2]": 2, "(2,3]": 4, "(3,4]": 1},
    5: {"(1,2]": 1, "(2,3]": 2, "(3,4]": 1},
}

DEFAULT_BUDGET = {"n_init": 5, "iterations": 20, "per_iteration": 8}

CSV_COLUMNS = (
    "case_id",
    "method",
    "seed",
    "iteration",
    "best_similarity",
    "f1",
    "num_active",
    "renders_used",
    "wall_ms",
)


@dataclass(frozen=True)
class TestCase:
    case_id: str
    n: int
    alpha_gt: MergeCoefficients
    z_gt: int
    weight_sum_bin: str
    prompt_seed: int
    oracle: str  # "coefficient" | "render"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_gt"] = self.alpha_gt.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TestCase":
        d = dict(d)
        d["alpha_gt"] = MergeCoefficients(np.array(d["alpha_gt"]))
        return cls(**d)


@dataclass(frozen=True)
class RunRecord:
    case_id: str
    method: str
    seed: int
    iteration: int
    best_similarity: float
    f1: float
    num_active: int
    renders_used: int
    wall_ms: int


def weight_bin(total: float) -> str | None:
    for hi, label in zip((1, 2, 3, 4), WEIGHT_BINS):
        if hi - 1 < total <= hi:
            return label
    return None


def build_test_suite(
    n: int, rng: np.random.Generator, oracle: str = "coefficient"
) -> list[TestCase]:
    """30 ground-truth targets matching the surveyed usage distribution.

    Rejection sampling: each attempt draws a sparse candidate (a uniform
    support of 2..5 coordinates with uniform [0,1] entries), zeroes entries
    below 0.1, and accepts it into an unfilled (z, weight-bin) slot.
    """
    if n < 20:
        raise ValueError("suite construction needs n >= 20")
    open_slots = {
        (z, b): count for z, bins in SUITE_TABLE.items() for b, count in bins.items()
    }
    accepted: list[tuple[int, str, np.ndarray]] = []
    attempts = 0
    while open_slots:
        attempts += 1
        if attempts > 1_000_000:
            raise RuntimeError(f"unfillable suite slots remain: {open_slots}")
        z_try = int(rng.integers(2, 6))
        coords = rng.choice(n, size=z_try, replace=False)
        alpha = np.zeros(n)
        alpha[coords] = rng.uniform(0.0, 1.0, size=z_try)
        alpha[alpha < 0.1] = 0.0
        z = int(np.count_nonzero(alpha))
        label = weight_bin(float(alpha.sum()))
        if label is None or (z, label) not in open_slots:
            continue
        accepted.append((z, label, alpha))
        open_slots[(z, label)] -= 1
        if open_slots[(z, label)] == 0:
            del open_slots[(z, label)]
    # canonical order: by (z, bin) then acceptance order
    accepted.sort(key=lambda t: (t[0], WEIGHT_BINS.index(t[1])))
    cases = []
    for i, (z, label, alpha) in enumerate(accepted):
        cases.append(
            TestCase(
                case_id=f"case{i:02d}z{z}",
                n=n,
                alpha_gt=MergeCoefficients(alpha),
                z_gt=z,
                weight_sum_bin=label,
                prompt_seed=int(rng.integers(2**31)),
                oracle=oracle,
            )
        )
    return cases


def select_subset(cases: list[TestCase], m: int) -> list[TestCase]:
    """Deterministic z-stratified subset (proportional allocation)."""
    if m >= len(cases):
        return list(cases)
    by_z: dict[int, list[TestCase]] = {}
    for c in cases:
        by_z.setdefault(c.z_gt, []).append(c)
    total = len(cases)
    quotas = {z: (len(group) * m) / total for z, group in by_z.items()}
    counts = {z: int(np.floor(q)) for z, q in quotas.items()}
    left = m - sum(counts.values())
    for z in sorted(quotas, key=lambda z: -(quotas[z] - counts[z]))[:left]:
        counts[z] += 1
    subset = []
    for z in sorted(by_z):
        subset.extend(by_z[z][: counts[z]])
    return subset


# ---------------------------------------------------------------------------
# Simulated user


class CoefficientOracle:
    """Similarity directly in coefficient space."""

    name = "coefficient"

    def __init__(self, case: TestCase, scale: float = 1.0):
        self.target = case.alpha_gt
        self.scale = scale

    def similarity(self, alpha: MergeCoefficients) -> float:
        return coefficient_similarity(alpha, self.target, self.scale)


class RenderOracle:
    """Similarity between rendered 8-bit images (the image-judging stand-in)."""

    name = "render"

    def __init__(self, case: TestCase, collection_seed: int = 0):
        self.spec = RenderSpec(
            prompt_seed=case.prompt_seed, collection_seed=collection_seed
        )
        self.target_image = render(case.alpha_gt, self.spec)

    def similarity(self, alpha: MergeCoefficients) -> float:
        return image_similarity(render(alpha, self.spec), self.target_image)


def make_oracle(case: TestCase, oracle: str | None = None, collection_seed: int = 0):
    kind = oracle or case.oracle
    if kind == "coefficient":
        return CoefficientOracle(case)
    if kind == "render":
        return RenderOracle(case, collection_seed)
    raise ValueError(f"unknown oracle: {kind}")


def simulated_rank(
    candidates: dict[str, MergeCoefficients], oracle, k: int
) -> list[str]:
    """Top-k candidate ids by oracle similarity, ties broken by id."""
    if k > len(candidates):
        raise ValueError("k exceeds candidate count")
    scored = sorted(
        candidates.items(), key=lambda item: (-oracle.similarity(item[1]), item[0])
    )
    return [cid for cid, _ in scored[:k]]


# ---------------------------------------------------------------------------
# Metrics


def f1_active(pred: MergeCoefficients, gt_support) -> float:
    """F1 between the predicted and ground-truth active sets."""
    pred_support = set(pred.support())
    gt = set(gt_support)
    if not pred_support and not gt:
        return 1.0
    if not pred_support or not gt:
        return 0.0
    hit = len(pred_support & gt)
    if hit == 0:
        return 0.0
    precision = hit / len(pred_support)
    recall = hit / len(gt)
    return 2.0 * precision * recall / (precision + recall)


class _Tracker:
    """Running best over every evaluated sample, with per-iteration snapshots."""

    def __init__(self, oracle, case: TestCase):
        self.oracle = oracle
        self.case = case
        self.best_sim = -np.inf
        self.best_alpha: MergeCoefficients | None = None
        self.evals = 0
        self.t0 = time.perf_counter()
        self.records: list[RunRecord] = []

    def add(self, alpha: MergeCoefficients) -> float:
        sim = self.oracle.similarity(alpha)
        self.evals += 1
        if sim > self.best_sim:
            self.best_sim = sim
            self.best_alpha = alpha
        return sim

    def snapshot(self, method: str, seed: int, iteration: int):
        self.records.append(
            RunRecord(
                case_id=self.case.case_id,
                method=method,
                seed=seed,
                iteration=iteration,
                best_similarity=float(self.best_sim),
                f1=f1_active(self.best_alpha, self.case.alpha_gt.support()),
                num_active=len(self.best_alpha.support()),
                renders_used=self.evals,
                wall_ms=int((time.perf_counter() - self.t0) * 1000),
            )
        )


# ---------------------------------------------------------------------------
# Baseline steps


def step_coordinate_descent(
    current: MergeCoefficients,
    mode: str,
    step_index: int,
    rng: np.random.Generator,
    n_points: int = 8,
) -> tuple[int, list[MergeCoefficients]]:
    """One line-search probe: n_points evenly spaced values (endpoints
    included) along a single coordinate, cyclic or random."""
    n = current.n
    if mode == "cyclic":
        coord = step_index % n
    elif mode == "random":
        coord = int(rng.integers(n))
    else:
        raise ValueError(f"unknown mode: {mode}")
    grid = np.linspace(0.0, 1.0, n_points)
    candidates = []
    for v in grid:
        vec = current.values.copy()
        vec[coord] = v
        candidates.append(MergeCoefficients(vec))
    return coord, candidates


def step_random_direction(
    current: MergeCoefficients,
    rng: np.random.Generator,
    n_points: int = 8,
    max_tries: int = 100,
) -> list[MergeCoefficients]:
    """n_points evenly spaced samples on the maximal feasible segment of a
    random direction through the current point (endpoints included).

    Components pointing out of the box at active bounds are reflected
    inward; without this, a sparse current point (many coordinates exactly
    0) rejects all but a ~2^-z fraction of raw directions and the segment
    is almost surely degenerate."""
    x = current.values
    for _ in range(max_tries):
        d = rng.standard_normal(x.size)
        norm = np.linalg.norm(d)
        if norm == 0.0:
            continue
        d /= norm
        d = np.where(x <= 0.0, np.abs(d), d)
        d = np.where(x >= 1.0, -np.abs(d), d)
        t_lo, t_hi = -np.inf, np.inf
        for i in range(x.size):
            if d[i] > 0:
                t_lo = max(t_lo, -x[i] / d[i])
                t_hi = min(t_hi, (1.0 - x[i]) / d[i])
            elif d[i] < 0:
                t_lo = max(t_lo, (1.0 - x[i]) / d[i])
                t_hi = min(t_hi, -x[i] / d[i])
        if t_hi - t_lo < 1e-9:
            continue  # degenerate segment (corner); resample the direction
        ts = np.linspace(t_lo, t_hi, n_points)
        return [
            MergeCoefficients(np.clip(x + t * d, 0.0, 1.0)) for t in ts
        ]
    raise RuntimeError("no feasible direction found")


def gallery_grid(
    x_best: MergeCoefficients, a: MergeCoefficients, b: MergeCoefficients
) -> list[MergeCoefficients]:
    """3x3 plane grid anchored at the current best, spanned by two acquired
    points: clip(x+ + (s/2)(a-x+) + (t/2)(b-x+)), (s,t) in {0,1,2}^2, row
    major; entry (0,0) is the current best itself."""
    va = a.values - x_best.values
    vb = b.values - x_best.values
    grid = []
    for s in range(3):
        for t in range(3):
            point = x_best.values + (s / 2.0) * va + (t / 2.0) * vb
            grid.append(MergeCoefficients(np.clip(point, 0.0, 1.0)))
    return grid


def step_gallery(
    posterior: PosteriorMixture,
    current_best: MergeCoefficients,
    acq_config: AcquisitionConfig,
    rng: np.random.Generator,
) -> list[MergeCoefficients]:
    """Acquire two spanning points and return the 9-point plane grid
    (8 of which are new renders)."""
    batch = optimize_batch(posterior, Hypercube(current_best.n), acq_config, rng)
    a, b = batch.points[0], batch.points[1]
    return gallery_grid(current_best, a, b)


# ---------------------------------------------------------------------------
# Method runners


def _session_config(method: str, case: TestCase, run_seed: int) -> SessionConfig:
    cfg = SessionConfig(n=case.n, seed=run_seed)
    if method == "ours_capoff":
        cfg.B = float(case.n)  # cap off: stage 1 over the full hypercube
    elif method == "ours_top1_nopast":
        cfg.k = 1
        cfg.m_past = 0
    return cfg


def _run_ours(method: str, case: TestCase, seed: int, run_seed: int, oracle) -> list[RunRecord]:
    config = _session_config(method, case, run_seed)
    session = Session(config)
    tracker = _Tracker(oracle, case)
    seen = 0
    for sid in session.sample_order[seen:]:
        tracker.add(session.alpha_of(sid))
    seen = len(session.sample_order)
    tracker.snapshot(method, seed, 0)

    iteration = 0
    display = session.pending_display
    while not session.finished:
        candidates = {sid: session.alpha_of(sid) for sid in display}
        k = min(config.k, len(display))
        ranked = simulated_rank(candidates, oracle, k)
        result = session.submit_ranking(RankingSubmission(tuple(display), tuple(ranked)))
        if len(session.sample_order) > seen:
            for sid in session.sample_order[seen:]:
                tracker.add(session.alpha_of(sid))
            seen = len(session.sample_order)
            iteration += 1
            tracker.snapshot(method, seed, iteration)
        if result.finished:
            break
        display = result.display
    assert tracker.evals == session.renders_requested
    return tracker.records


def _initial_points(case: TestCase, rng: np.random.Generator) -> list[MergeCoefficients]:
    # All methods share the same initialization scheme (sparse stick-breaking
    # draws from the default capped simplex) so budgets and starting
    # information are identical.
    return sample_initial(case.n, 2.0, 0.1, DEFAULT_BUDGET["n_init"], rng)


def _run_line_search(
    method: str, case: TestCase, seed: int, run_seed: int, oracle
) -> list[RunRecord]:
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, 1]))
    tracker = _Tracker(oracle, case)
    initial = _initial_points(case, rng)
    sims = [tracker.add(a) for a in initial]
    current = initial[int(np.argmax(sims))]
    current_sim = max(sims)
    tracker.snapshot(method, seed, 0)
    for it in range(DEFAULT_BUDGET["iterations"]):
        if method == "random_dir":
            candidates = step_random_direction(current, rng)
        else:
            mode = "cyclic" if method == "cyclic_cd" else "random"
            _, candidates = step_coordinate_descent(current, mode, it, rng)
        cand_sims = [tracker.add(a) for a in candidates]
        best_idx = int(np.argmax(cand_sims))
        # the simulated user keeps the better of (current, best candidate)
        if cand_sims[best_idx] > current_sim:
            current, current_sim = candidates[best_idx], cand_sims[best_idx]
        tracker.snapshot(method, seed, it + 1)
    return tracker.records


def _run_gallery(
    method: str, case: TestCase, seed: int, run_seed: int, oracle
) -> list[RunRecord]:
    """Sequential plane-search baseline: the same surrogate stack on the
    full hypercube (no cap, no stages), two acquired spanning points per
    round, user picks the best of a 3x3 grid."""
    rng = np.random.default_rng(np.random.SeedSequence([run_seed, 2]))
    tracker = _Tracker(oracle, case)
    points = _initial_points(case, rng)
    sims = [tracker.add(a) for a in points]
    current_idx = int(np.argmax(sims))
    current_sim = sims[current_idx]
    pairs = [(current_idx, j) for j in range(len(points)) if j != current_idx]
    tracker.snapshot(method, seed, 0)
    acq = AcquisitionConfig(q=2)
    for it in range(DEFAULT_BUDGET["iterations"]):
        x = np.stack([p.values for p in points])
        utilities = infer_latent_utilities(x, pairs)
        draws = sample_hyperposterior(x, utilities, rng)
        posterior = PosteriorMixture(x, utilities, draws)
        grid = step_gallery(posterior, points[current_idx], acq, rng)
        grid_idx = [current_idx]  # (0,0) is the current best, not re-rendered
        grid_sims = [current_sim]
        for point in grid[1:]:
            grid_idx.append(len(points))
            points.append(point)
            grid_sims.append(tracker.add(point))
        winner = int(np.argmax(grid_sims))
        winner_idx = grid_idx[winner]
        pairs.extend(
            (winner_idx, other) for other in grid_idx if other != winner_idx
        )
        current_idx = winner_idx
        current_sim = grid_sims[winner]
        tracker.snapshot(method, seed, it + 1)
    return tracker.records


def run_method(
    method: str,
    case: TestCase,
    seed: int,
    oracle: str | None = None,
    collection_seed: int = 0,
) -> list[RunRecord]:
    """Execute one (method, case, seed) run under the exact render budget."""
    if method not in METHODS:
        raise ValueError(f"unknown method: {method}")
    run_seed = int(
        np.random.SeedSequence(
            [seed, _case_index(case.case_id), METHODS.index(method)]
        ).generate_state(1)[0]
    )
    sim_oracle = make_oracle(case, oracle, collection_seed)
    if method.startswith("ours"):
        records = _run_ours(method, case, seed, run_seed, sim_oracle)
    elif method == "gallery":
        records = _run_gallery(method, case, seed, run_seed, sim_oracle)
    else:
        records = _run_line_search(method, case, seed, run_seed, sim_oracle)
    budget = DEFAULT_BUDGET["n_init"] + DEFAULT_BUDGET["iterations"] * DEFAULT_BUDGET["per_iteration"]
    assert records[-1].renders_used == budget, (
        f"budget overrun: {method} used {records[-1].renders_used} != {budget}"
    )
    for i, rec in enumerate(records):
        expected = DEFAULT_BUDGET["n_init"] + i * DEFAULT_BUDGET["per_iteration"]
        assert rec.renders_used == expected, "per-iteration budget drift"
    return records


def _case_index(case_id: str) -> int:
    m = re.match(r"case(\d+)", case_id)
    return int(m.group(1)) if m else 0


# ---------------------------------------------------------------------------
# Parallel execution and aggregation


def _job(args) -> list[RunRecord]:
    from threadpoolctl import threadpool_limits

    method, case_dict, seed, oracle, collection_seed = args
    with threadpool_limits(limits=1):
        return run_method(
            method, TestCase.from_dict(case_dict), seed, oracle, collection_seed
        )


def run_suite(
    cases: list[TestCase],
    methods: list[str],
    seeds: int,
    oracle: str | None = None,
    jobs: int = 1,
    collection_seed: int = 0,
) -> list[RunRecord]:
    """Run the (method x case x seed) grid; jobs are independent and execute
    on a process pool. Records come back deterministically sorted."""
    tasks = [
        (m, c.to_dict(), s, oracle, collection_seed)
        for m in methods
        for c in cases
        for s in range(seeds)
    ]
    records: list[RunRecord] = []
    if jobs <= 1:
        for t in tasks:
            records.extend(_job(t))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_job, tasks):
                records.extend(result)
    records.sort(key=lambda r: (r.method, r.case_id, r.seed, r.iteration))
    return records


def records_to_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for r in records:
        writer.writerow([getattr(r, c) for c in CSV_COLUMNS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV columns: {reader.fieldnames}")
    out = []
    for row in reader:
        out.append(
            RunRecord(
                case_id=row["case_id"],
                method=row["method"],
                seed=int(row["seed"]),
                iteration=int(row["iteration"]),
                best_similarity=float(row["best_similarity"]),
                f1=float(row["f1"]),
                num_active=int(row["num_active"]),
                renders_used=int(row["renders_used"]),
                wall_ms=int(row["wall_ms"]),
            )
        )
    return out


def _case_z(case_id: str) -> int:
    m = re.search(r"z(\d+)$", case_id)
    return int(m.group(1)) if m else -1


def aggregate(records: list[RunRecord]) -> dict:
    """Per-method mean running-best curve, success rates at 0.9/0.95
    (overall and per ground-truth z), and median final F1. Success is a
    final best similarity strictly above the threshold. Missing
    (method, case, seed) cells are reported, never silently dropped."""
    if not records:
        raise ValueError("no records to aggregate")
    methods = sorted({r.method for r in records})
    case_ids = sorted({r.case_id for r in records})
    seeds = sorted({r.seed for r in records})
    finals: dict[tuple[str, str, int], RunRecord] = {}
    curves: dict[str, dict[int, list[float]]] = {m: {} for m in methods}
    for r in records:
        key = (r.method, r.case_id, r.seed)
        if key not in finals or r.iteration > finals[key].iteration:
            finals[key] = r
        curves[r.method].setdefault(r.iteration, []).append(r.best_similarity)
    missing = [
        {"method": m, "case_id": c, "seed": s}
        for m in methods
        for c in case_ids
        for s in seeds
        if (m, c, s) not in finals
    ]
    summary = {"schema_version": 1, "methods": {}, "missing": missing}
    for m in methods:
        m_finals = [rec for key, rec in finals.items() if key[0] == m]
        sims = np.array([r.best_similarity for r in m_finals])
        f1s = np.array([r.f1 for r in m_finals])
        by_z: dict[str, dict] = {}
        for z in sorted({_case_z(r.case_id) for r in m_finals}):
            z_recs = [r for r in m_finals if _case_z(r.case_id) == z]
            z_sims = np.array([r.best_similarity for r in z_recs])
            by_z[str(z)] = {
                "count": len(z_recs),
                "success_0.9": float((z_sims > 0.9).mean()),
                "success_0.95": float((z_sims > 0.95).mean()),
            }
        summary["methods"][m] = {
            "runs": len(m_finals),
            "mean_final_similarity": float(sims.mean()),
            "median_final_f1": float(np.median(f1s)),
            "success_0.9": float((sims > 0.9).mean()),
            "success_0.95": float((sims > 0.95).mean()),
            "success_by_z": by_z,
            "mean_curve": [
                float(np.mean(curves[m][it])) for it in sorted(curves[m])
            ],
        }
    return summary
