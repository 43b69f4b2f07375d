"""Two-stage session engine: ranking ingestion, preference expansion,
surrogate refresh, batch acquisition, past-sample selection, sparsity
extraction, and the stage transition.

Stage 1 searches the capped simplex for a good sparse region; after t1
batch rankings the sparsity pattern of the current top sample is frozen and
stage 2 polishes over the unconstrained hypercube restricted to that
pattern. Every piece of randomness flows through one per-session generator,
so a session is fully determined by (config, submission transcript).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .acquisition import AcquisitionConfig, optimize_batch
from .core import (
    CappedSimplex,
    Hypercube,
    MergeCoefficients,
    PreferencePair,
    SessionConfig,
    SparsityPattern,
    require_valid,
)
from .simplex import sample_initial
from .surrogate import (
    LatentUtilities,
    PosteriorMixture,
    infer_latent_utilities,
    sample_hyperposterior,
)

STAGE2_REINIT_COUNT = 5


class SessionError(RuntimeError):
    pass


class StaleDisplayError(SessionError):
    """Submission does not match the pending display."""


class DegeneratePatternError(SessionError):
    """Top-ranked sample has no active coefficients."""


@dataclass
class Sample:
    id: str
    alpha: MergeCoefficients  # always stored at full dimension n
    stage: int
    iteration_created: int
    origin: str  # initial | acquired | retained


@dataclass(frozen=True)
class RankingSubmission:
    displayed: tuple[str, ...]
    ranked_top: tuple[str, ...]

    def __post_init__(self):
        displayed = tuple(self.displayed)
        ranked = tuple(self.ranked_top)
        if len(set(displayed)) != len(displayed):
            raise ValueError("displayed ids contain duplicates")
        if len(set(ranked)) != len(ranked):
            raise ValueError("ranked ids contain duplicates")
        if not set(ranked) <= set(displayed):
            raise ValueError("ranked ids must come from the displayed set")
        if not ranked:
            raise ValueError("ranking must contain at least one id")
        object.__setattr__(self, "displayed", displayed)
        object.__setattr__(self, "ranked_top", ranked)


def expand_ranking(submission: RankingSubmission) -> list[PreferencePair]:
    """All ordered pairs within the ranked top plus each ranked member over
    each displayed-but-unranked member: k(k-1)/2 + k(N-k) pairs."""
    ranked = submission.ranked_top
    unranked = [s for s in submission.displayed if s not in set(ranked)]
    pairs = [
        PreferencePair(ranked[i], ranked[j])
        for i in range(len(ranked))
        for j in range(i + 1, len(ranked))
    ]
    pairs.extend(
        PreferencePair(r, u) for r in ranked for u in unranked
    )
    return pairs


def extract_sparsity(alpha: MergeCoefficients) -> SparsityPattern:
    """Active set of exactly non-zero coordinates (valid post-rounding)."""
    support = alpha.support()
    if not support:
        raise DegeneratePatternError("all-zero coefficient vector has no pattern")
    return SparsityPattern(support)


def past_selection_probabilities(
    utilities: np.ndarray, comparison_counts: np.ndarray, temperature: float = 2.0
) -> np.ndarray:
    """Softmax selection probabilities over past candidates.

    Utilities are min-max normalized to [0,1] (all-zero when constant),
    scaled by the temperature, and penalized by comparison counts normalized
    to sum one, discouraging samples that already dominate the history.
    """
    u = np.asarray(utilities, dtype=np.float64)
    counts = np.asarray(comparison_counts, dtype=np.float64)
    span = u.max() - u.min() if u.size else 0.0
    u_norm = (u - u.min()) / span if span > 0 else np.zeros_like(u)
    total = counts.sum()
    c_norm = counts / total if total > 0 else np.zeros_like(counts)
    logits = u_norm / temperature - c_norm
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass(frozen=True)
class IngestInfo:
    stage: int
    iteration: int
    will_transition: bool
    will_finish: bool


@dataclass(frozen=True)
class RoundResult:
    stage: int
    iteration: int
    transitioned: bool
    finished: bool
    display: tuple[str, ...] | None
    best: MergeCoefficients | None


class Session:
    """One serial optimization session; see module docstring."""

    def __init__(self, config: SessionConfig):
        require_valid(config)
        self.config = config
        self.rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        self.samples: dict[str, Sample] = {}
        self.sample_order: list[str] = []
        self.active_ids: list[str] = []
        self.dataset: list[PreferencePair] = []
        self.utilities: dict[str, float] = {}
        self.top_id: str | None = None
        self.pattern: SparsityPattern | None = None
        self.stage = 1
        self.rounds_in_stage = 0
        self.stage_has_init_round = True  # stage 1 starts by ranking the inits
        self.finished = False
        self.renders_requested = 0
        self.events: list[dict] = []
        self._id_counter = 0
        self._pending_submission: RankingSubmission | None = None
        self._posterior: PosteriorMixture | None = None

        if self._stage1_space_is_hypercube():
            draws = self.rng.random((config.n_init, config.n))
            draws[draws < config.tau] = 0.0
            initial = [MergeCoefficients(row) for row in draws]
        else:
            initial = sample_initial(
                config.n, config.B, config.tau, config.n_init, self.rng
            )
        ids = [self._add_sample(a, origin="initial") for a in initial]
        self.pending_display: tuple[str, ...] = tuple(ids)
        self._log(
            {
                "event": "init",
                "config": config.to_dict(),
                "samples": [self._sample_payload(i) for i in ids],
                "display": list(ids),
            }
        )

    # -- public state -------------------------------------------------------

    @property
    def iteration(self) -> int:
        """Batch rankings completed in the current stage."""
        return self.rounds_in_stage - (1 if self.stage_has_init_round else 0)

    def best_result(self) -> MergeCoefficients:
        if self.top_id is None:
            raise SessionError("no ranking submitted yet")
        return self.samples[self.top_id].alpha

    def alpha_of(self, sample_id: str) -> MergeCoefficients:
        return self.samples[sample_id].alpha

    # -- ranking rounds -----------------------------------------------------

    def submit_ranking(self, submission: RankingSubmission) -> RoundResult:
        self.ingest_ranking(submission)
        return self.compute_round()

    def ingest_ranking(self, submission: RankingSubmission) -> IngestInfo:
        """Validate and record a submission; heavy work happens in
        compute_round so callers may defer it to a worker."""
        if self.finished:
            raise SessionError("session already finished")
        if self._pending_submission is not None:
            raise SessionError("a submission is already being processed")
        if tuple(submission.displayed) != self.pending_display:
            raise StaleDisplayError("submission does not match the pending display")
        expected_k = min(self.config.k, len(submission.displayed))
        if len(submission.ranked_top) != expected_k:
            raise SessionError(
                f"ranking must contain exactly {expected_k} ids, "
                f"got {len(submission.ranked_top)}"
            )
        self.dataset.extend(expand_ranking(submission))
        self.top_id = submission.ranked_top[0]
        self.rounds_in_stage += 1
        self._pending_submission = submission
        self._log(
            {
                "event": "submission",
                "displayed": list(submission.displayed),
                "ranked_top": list(submission.ranked_top),
            }
        )
        will_transition = self.stage == 1 and self.iteration == self.config.t1
        will_finish = self.stage == 2 and self.iteration == self.config.t2
        return IngestInfo(self.stage, self.iteration, will_transition, will_finish)

    def compute_round(self) -> RoundResult:
        if self._pending_submission is None:
            raise SessionError("no submission to process")
        self._pending_submission = None
        cfg = self.config

        if self.stage == 2 and self.iteration == cfg.t2:
            self.finished = True
            best = self.best_result()
            self._log(
                {
                    "event": "finished",
                    "best_id": self.top_id,
                    "alpha": best.tolist(),
                }
            )
            return RoundResult(self.stage, self.iteration, False, True, None, best)

        if self.stage == 1 and self.iteration == cfg.t1:
            display = self._transition_stage()
            return RoundResult(self.stage, self.iteration, True, False, display, None)

        posterior = self._refit()
        new_ids = self._acquire(posterior, cfg.q)
        display = self._assemble_display(new_ids, posterior)
        self._log_display(new_ids, display)
        return RoundResult(self.stage, self.iteration, False, False, display, None)

    # -- stage transition ---------------------------------------------------

    def _transition_stage(self) -> tuple[str, ...]:
        """Freeze the top sample's sparsity pattern, retain compatible
        stage-1 samples and their pairs, and reinitialize in the reduced
        space. Under strict budgeting the reinit draws count toward the
        first stage-2 batch."""
        cfg = self.config
        top = self.samples[self.top_id]
        self.pattern = extract_sparsity(top.alpha)
        pattern_set = set(self.pattern.active)

        retained = []
        for sid in self.active_ids:
            support = set(self.samples[sid].alpha.support())
            keep = (
                support <= pattern_set
                if cfg.retain_mode == "subset"
                else support == pattern_set
            )
            if keep:
                retained.append(sid)
                self.samples[sid].origin = "retained"
        retained_set = set(retained)
        self.dataset = [
            p
            for p in self.dataset
            if p.preferred in retained_set and p.other in retained_set
        ]
        self.active_ids = retained
        self.utilities = {}
        self.stage = 2
        self.rounds_in_stage = 0
        self.stage_has_init_round = not cfg.strict_budget

        # Fit on the retained data only; the fresh draws below have not been
        # evaluated yet and must not enter the surrogate or past-sampling.
        posterior = self._refit()

        z = self.pattern.size
        reinit_count = min(STAGE2_REINIT_COUNT, cfg.q) if cfg.strict_budget else STAGE2_REINIT_COUNT
        reinit_ids = []
        for _ in range(reinit_count):
            point = self.rng.random(z)
            reinit_ids.append(
                self._add_sample(self._embed_values(point), origin="initial")
            )

        new_ids = list(reinit_ids)
        if cfg.strict_budget and cfg.q > reinit_count:
            new_ids += self._acquire(posterior, cfg.q - reinit_count)

        self._log(
            {
                "event": "transition",
                "pattern": list(self.pattern.active),
                "retained": retained,
                "reinit": [self._sample_payload(i) for i in reinit_ids],
            }
        )
        if cfg.strict_budget:
            display = self._assemble_display(new_ids, posterior)
        else:
            # Paper leaves stage 2's first display unspecified: show the
            # fresh samples plus the retained top.
            display = self._sorted_display(reinit_ids + [self.top_id], posterior)
        self._log_display(new_ids, display)
        return display

    # -- internals ----------------------------------------------------------

    def _stage1_space_is_hypercube(self) -> bool:
        # B >= n makes the cap vacuous ("cap off"); use the plain hypercube.
        return self.config.B >= self.config.n

    def _current_space(self):
        if self.stage == 1:
            if self._stage1_space_is_hypercube():
                return Hypercube(self.config.n)
            return CappedSimplex(self.config.n, self.config.B)
        return Hypercube(self.pattern.size)

    def _acq_config(self, q: int) -> AcquisitionConfig:
        cfg = self.config
        return AcquisitionConfig(
            ucb_lambda=cfg.ucb_lambda,
            q=q,
            raw_samples=cfg.raw_samples,
            restarts=cfg.restarts,
            mc_base_samples=cfg.mc_base_samples,
        )

    def _project(self, alpha: MergeCoefficients) -> np.ndarray:
        if self.stage == 1:
            return alpha.values
        return alpha.values[list(self.pattern.active)]

    def _embed_values(self, values: np.ndarray) -> MergeCoefficients:
        if self.stage == 1:
            return MergeCoefficients(values)
        full = np.zeros(self.config.n)
        full[list(self.pattern.active)] = values
        return MergeCoefficients(full)

    def _embed(self, point: MergeCoefficients) -> MergeCoefficients:
        return self._embed_values(point.values)

    def _refit(self) -> PosteriorMixture | None:
        """Relearn latent utilities from scratch and refit the
        hyperposterior on all active samples. With fewer than two active
        samples there is nothing to fit; callers fall back to prior
        sampling."""
        ids = list(self.active_ids)
        index = {sid: i for i, sid in enumerate(ids)}
        x = np.stack([self._project(self.samples[sid].alpha) for sid in ids])
        pairs = [(index[p.preferred], index[p.other]) for p in self.dataset]
        utilities = infer_latent_utilities(x, pairs, self.config.sigma_pref)
        self.utilities = {sid: float(utilities.values[i]) for sid, i in index.items()}
        if len(ids) < 2:
            self._posterior = None
            return None
        draws = sample_hyperposterior(x, utilities, self.rng)
        self._posterior = PosteriorMixture(x, utilities, draws)
        return self._posterior

    def _acquire(self, posterior: PosteriorMixture | None, q: int) -> list[str]:
        """Acquire q new samples; without a posterior (degenerate data set)
        fall back to initialization-style prior draws."""
        space = self._current_space()
        if posterior is None:
            if isinstance(space, CappedSimplex):
                points = sample_initial(
                    space.n, space.bound, self.config.tau, q, self.rng
                )
            else:
                draws = self.rng.random((q, space.n))
                draws[draws < self.config.tau] = 0.0
                points = [MergeCoefficients(row) for row in draws]
        else:
            points = optimize_batch(posterior, space, self._acq_config(q), self.rng).points
        return [self._add_sample(self._embed(p), origin="acquired") for p in points]

    def select_past_samples(self, m_past: int) -> list[str]:
        """Draw previously evaluated samples (softmax over adjusted
        utilities, without replacement), excluding the current top."""
        candidates = [
            sid for sid in self.active_ids if sid != self.top_id and sid in self.utilities
        ]
        if m_past <= 0 or not candidates:
            return []
        order = self.rng.permutation(len(candidates))
        candidates = [candidates[i] for i in order]
        counts = np.zeros(len(candidates))
        position = {sid: i for i, sid in enumerate(candidates)}
        for pair in self.dataset:
            for sid in (pair.preferred, pair.other):
                if sid in position:
                    counts[position[sid]] += 1.0
        utilities = np.array([self.utilities[sid] for sid in candidates])
        probs = past_selection_probabilities(utilities, counts)
        chosen: list[str] = []
        remaining = list(range(len(candidates)))
        while remaining and len(chosen) < m_past:
            p = probs[remaining]
            p = p / p.sum()
            pick = self.rng.choice(len(remaining), p=p)
            chosen.append(candidates[remaining[pick]])
            remaining.pop(pick)
        return chosen

    def _assemble_display(
        self, new_ids: list[str], posterior: PosteriorMixture | None
    ) -> tuple[str, ...]:
        past = self.select_past_samples(self.config.m_past)
        return self._sorted_display(new_ids + [self.top_id] + past, posterior)

    def _sorted_display(
        self, ids: list[str], posterior: PosteriorMixture | None
    ) -> tuple[str, ...]:
        """Display order is the surrogate-estimated order (best first)."""
        unique = list(dict.fromkeys(ids))
        if posterior is None:
            display = tuple(unique)
        else:
            x = np.stack([self._project(self.samples[sid].alpha) for sid in unique])
            means = posterior.predict(x).mixture_mean
            ranked = sorted(zip(unique, means), key=lambda t: (-t[1], t[0]))
            display = tuple(sid for sid, _ in ranked)
        self.pending_display = display
        return display

    def _add_sample(self, alpha: MergeCoefficients, origin: str) -> str:
        sid = f"s{self._id_counter:04d}"
        self._id_counter += 1
        sample = Sample(
            id=sid,
            alpha=alpha,
            stage=self.stage,
            iteration_created=max(self.iteration, 0),
            origin=origin,
        )
        self.samples[sid] = sample
        self.sample_order.append(sid)
        self.active_ids.append(sid)
        self.renders_requested += 1
        return sid

    # -- transcript ---------------------------------------------------------

    def _sample_payload(self, sid: str) -> dict:
        s = self.samples[sid]
        return {
            "id": s.id,
            "alpha": s.alpha.tolist(),
            "stage": s.stage,
            "origin": s.origin,
        }

    def _log(self, event: dict) -> None:
        self.events.append(event)

    def _log_display(self, new_ids: list[str], display: tuple[str, ...]) -> None:
        self._log(
            {
                "event": "display",
                "stage": self.stage,
                "iteration": self.iteration,
                "new": [self._sample_payload(i) for i in new_ids],
                "order": list(display),
            }
        )

    def transcript(self) -> str:
        """Append-only event log, one JSON object per line."""
        return "\n".join(json.dumps(e, sort_keys=True) for e in self.events) + "\n"


def start_session(config: SessionConfig) -> Session:
    return Session(config)


def replay_transcript(transcript: str) -> Session:
    """Re-run a recorded session and verify it reproduces bit-exactly.

    Feeds the recorded submissions into a fresh session built from the
    recorded config and asserts every emitted event (samples, displays,
    transition, final result) matches the log byte for byte.
    """
    lines = [json.loads(line) for line in transcript.strip().splitlines()]
    if not lines or lines[0]["event"] != "init":
        raise SessionError("transcript must start with an init event")
    session = Session(SessionConfig.from_dict(lines[0]["config"]))
    _verify_events(session.events, lines[: len(session.events)])
    cursor = len(session.events)
    for line in lines[cursor:]:
        if line["event"] == "submission":
            session.submit_ranking(
                RankingSubmission(tuple(line["displayed"]), tuple(line["ranked_top"]))
            )
            _verify_events(session.events[cursor:], lines[cursor : len(session.events)])
            cursor = len(session.events)
    if len(session.events) != len(lines):
        raise SessionError("replay produced a different number of events")
    return session


def _verify_events(produced: Iterable[dict], recorded: Iterable[dict]) -> None:
    for got, want in zip(produced, recorded):
        if json.dumps(got, sort_keys=True) != json.dumps(want, sort_keys=True):
            raise SessionError(
                "replay diverged:\n"
                f"  recorded: {json.dumps(want, sort_keys=True)[:200]}\n"
                f"  replayed: {json.dumps(got, sort_keys=True)[:200]}"
            )
