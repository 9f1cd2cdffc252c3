"""Probe-based privacy/utility protocol and the layer and loss ablations.

The attacker is lazy-informed: a speaker classifier trained once on original
training audio, whose decision-function vectors serve as verification
embeddings scored by cosine similarity. Emotion and content probes are trained
the same way and applied unchanged to every condition.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from .anonymizer import SpeakerPool, anonymize_utterance, build_pool
from .audio import Waveform, mel_spectrogram
from .bottleneck import reconstruct_layers
from .config import RunConfig, config_hash, with_overrides
from .errors import EvaluationError, ProbeError
from .metrics import collapse_repeats, edit_distance, eer, uar_from_labels
from .model import EasyModel
from .models import AblationRow, ConditionMetrics, MetricsReport, ProbeReport, ProbeResult, TrialRecord
from .storage import write_json, write_jsonl
from .synthdata import Corpus, LabeledUtterance

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.json"
TRIALS_NAME = "trials.jsonl"
MAX_PROBE_FRAMES = 20000

Transform = Callable[[LabeledUtterance], Waveform]

VARIANTS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_spk": {"loss.use_spk": False},
    "no_lin": {"loss.use_lin": False},
    "no_emo": {"loss.use_emo": False},
}

SWEEP_KEYS = {
    "alpha": "anon.alpha",
    "m": "anon.num_averaged",
    "lambda_grl": "loss.lambda_grl",
    "K": "teacher.kmeans_clusters",
}


def utterance_stats(frames: np.ndarray) -> np.ndarray:
    """Per-dimension mean, standard deviation and mean absolute frame-to-frame change."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] > 1:
        delta = np.abs(np.diff(frames, axis=0)).mean(axis=0)
    else:
        delta = np.zeros(frames.shape[1])
    return np.concatenate([frames.mean(axis=0), frames.std(axis=0), delta])


def fit_linear_probe(X: np.ndarray, y: np.ndarray, max_iter: int = 1000, C: float = 1.0, seed: int = 0) -> Pipeline:
    y = np.asarray(y)
    if np.unique(y).size < 2:
        raise ProbeError("probe training split has a single class")
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=max_iter, C=C, random_state=seed))
    probe.fit(np.asarray(X, dtype=np.float64), y)
    return probe


def _fit_length(w: Waveform, n: int) -> Waveform:
    samples = w.samples[:n]
    if samples.size < n:
        samples = np.pad(samples, (0, n - samples.size))
    return Waveform(samples, w.sample_rate)


def _map(fn, items: Sequence, workers: int) -> list:
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def _tensor(w: Waveform) -> torch.Tensor:
    return torch.from_numpy(w.samples.astype(np.float32))


@torch.no_grad()
def representation(model: EasyModel, w: Waveform, rep: str) -> np.ndarray:
    """Frame-level features: 'mel', 'ec' (content encoder output), 'r1' (after speaker subtraction)
    or 'vq:<layers>' (sum of the selected quantizer outputs)."""
    model.eval()
    if rep == "mel":
        return model.mel(_tensor(w)).double().numpy()
    mel, content, _, r1 = model.encode(_tensor(w))
    if rep == "ec":
        return content.double().numpy()
    if rep == "r1":
        return r1.double().numpy()
    if rep.startswith("vq:"):
        return reconstruct_layers(model.bottleneck(r1), rep[3:]).double().numpy()
    raise ProbeError(f"unknown representation {rep!r}")


@torch.no_grad()
def vq1_codes(model: EasyModel, w: Waveform) -> np.ndarray:
    model.eval()
    return model.analyze(_tensor(w)).state.codes[0].numpy()


@dataclass
class ProbeOutcome:
    probe: Pipeline
    score: float
    metric: str
    num_train: int
    num_test: int


def _labels(u: LabeledUtterance, target: str):
    if target == "speaker":
        return u.speaker_id
    if target == "emotion":
        return u.emotion_id
    raise ProbeError(f"unknown probe target {target!r}")


def _frame_rows(features: Sequence[np.ndarray], utts: Sequence[LabeledUtterance]):
    X, y = [], []
    for f, u in zip(features, utts):
        n = min(f.shape[0], u.num_frames)
        X.append(f[:n])
        y.append(u.frame_tokens[:n])
    return np.concatenate(X), np.concatenate(y)


def train_probe(
    extract: Callable[[LabeledUtterance], np.ndarray],
    target: str,
    train: Sequence[LabeledUtterance],
    test: Sequence[LabeledUtterance],
    max_iter: int = 1000,
    C: float = 1.0,
    seed: int = 0,
    workers: int = 4,
) -> ProbeOutcome:
    """Linear probe on frozen features; accuracy for speaker and content, UAR for emotion."""
    if not train or not test:
        raise ProbeError("probe needs non-empty train and test splits")
    train_feats = _map(extract, train, workers)
    test_feats = _map(extract, test, workers)
    if target == "content":
        X_train, y_train = _frame_rows(train_feats, train)
        X_test, y_test = _frame_rows(test_feats, test)
        if X_train.shape[0] > MAX_PROBE_FRAMES:
            keep = np.sort(np.random.default_rng(seed).choice(X_train.shape[0], MAX_PROBE_FRAMES, replace=False))
            X_train, y_train = X_train[keep], y_train[keep]
    else:
        X_train = np.stack([utterance_stats(f) for f in train_feats])
        y_train = np.array([_labels(u, target) for u in train])
        X_test = np.stack([utterance_stats(f) for f in test_feats])
        y_test = np.array([_labels(u, target) for u in test])
    probe = fit_linear_probe(X_train, y_train, max_iter, C, seed)
    pred = probe.predict(X_test)
    if target == "emotion":
        score, metric = uar_from_labels(y_test, pred), "uar"
    else:
        score, metric = float(np.mean(pred == y_test)), "accuracy"
    return ProbeOutcome(probe, score, metric, len(y_train), len(y_test))


class SpeakerVerifier:
    """Speaker classifier over utterance log-mel statistics used as an embedding extractor."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.probe: Pipeline | None = None

    def features(self, w: Waveform) -> np.ndarray:
        return utterance_stats(mel_spectrogram(w, self.cfg.mel).frames)

    def fit(self, utterances: Sequence[LabeledUtterance]) -> "SpeakerVerifier":
        X = np.stack(_map(lambda u: self.features(u.waveform), utterances, self.cfg.eval.workers))
        y = np.array([u.speaker_id for u in utterances])
        self.probe = fit_linear_probe(X, y, self.cfg.eval.probe_max_iter, self.cfg.eval.probe_c, self.cfg.seed)
        return self

    def embed_features(self, X: np.ndarray) -> np.ndarray:
        if self.probe is None:
            raise EvaluationError("speaker verifier is not fitted")
        scores = self.probe.decision_function(np.atleast_2d(X))
        return scores.reshape(scores.shape[0], -1)

    def embed(self, w: Waveform) -> np.ndarray:
        return self.embed_features(self.features(w))[0]

    @staticmethod
    def score(enroll: Sequence[np.ndarray], test: np.ndarray) -> float:
        centroid = np.mean(enroll, axis=0)
        denom = np.linalg.norm(centroid) * np.linalg.norm(test)
        return float(centroid @ test / denom) if denom > 0 else 0.0


@dataclass
class ProtocolProbes:
    attacker: SpeakerVerifier
    emotion: Pipeline
    content: Pipeline


def train_protocol_probes(corpus: Corpus, cfg: RunConfig) -> ProtocolProbes:
    """Attacker, emotion and content probes fitted on original training audio."""
    e = cfg.eval
    mel_of = lambda u: mel_spectrogram(u.waveform, cfg.mel).frames  # noqa: E731
    attacker = SpeakerVerifier(cfg).fit(corpus.train)
    emotion = train_probe(mel_of, "emotion", corpus.train, corpus.dev or corpus.train, e.probe_max_iter, e.probe_c, cfg.seed, e.workers)
    content = train_probe(mel_of, "content", corpus.train, corpus.dev or corpus.train, e.probe_max_iter, e.probe_c, cfg.seed, e.workers)
    logger.info(f"Protocol probes ready: emotion UAR {emotion.score:.3f}, token accuracy {content.score:.3f} on dev")
    return ProtocolProbes(attacker, emotion.probe, content.probe)


def trial_speakers(corpus: Corpus, pool: SpeakerPool | None, disjoint: bool) -> list[int]:
    speakers = corpus.speakers("test")
    if disjoint and pool is not None:
        pooled = set(pool.labels)
        speakers = [s for s in speakers if str(s) not in pooled]
    return speakers


def build_trials(corpus: Corpus, speakers: Sequence[int]) -> list[TrialRecord]:
    """Every test utterance of ``speakers`` against every speaker's dev enrollment set."""
    enroll = {s: [u.utt_id for u in corpus.dev if u.speaker_id == s] for s in speakers}
    enroll = {s: ids for s, ids in enroll.items() if ids}
    trials = [
        TrialRecord(enroll_ids=ids, test_id=u.utt_id, label=u.speaker_id == s)
        for u in corpus.test
        if u.speaker_id in enroll
        for s, ids in enroll.items()
    ]
    if not any(t.label for t in trials) or all(t.label for t in trials):
        raise EvaluationError("trial list needs both genuine and impostor trials")
    return trials


def condition_transform(name: str, model: EasyModel, pool: SpeakerPool | None, cfg: RunConfig) -> Transform:
    """'original', 'reconstructed', 'anonymized', 'vq:<layers>' or 'wo_s'."""
    full = f"1:{model.num_quantizers}"

    def wave_of(x: torch.Tensor, ref: Waveform) -> Waveform:
        return Waveform(x.double().numpy(), ref.sample_rate)

    if name == "original":
        return lambda u: u.waveform
    if name == "reconstructed":
        return lambda u: wave_of(model.reconstruct(_tensor(u.waveform), full), u.waveform)
    if name.startswith("vq:"):
        return lambda u: wave_of(model.reconstruct(_tensor(u.waveform), name[3:]), u.waveform)
    if name == "wo_s":
        zero = torch.zeros(cfg.model.dim)
        return lambda u: wave_of(model.reconstruct(_tensor(u.waveform), full, speaker=zero), u.waveform)
    if name == "anonymized":
        if pool is None:
            raise EvaluationError("anonymized condition needs a speaker pool")
        return lambda u: anonymize_utterance(
            u.waveform, model, pool, cfg.anon, utt_id=u.utt_id, speaker=str(u.speaker_id)
        )
    raise EvaluationError(f"unknown condition {name!r}")


def score_condition(
    name: str,
    transform: Transform,
    model: EasyModel,
    corpus: Corpus,
    trials: Sequence[TrialRecord],
    probes: ProtocolProbes,
    cfg: RunConfig,
) -> tuple[ConditionMetrics, list[TrialRecord]]:
    """EER of the attacker, VQ-1 TER, emotion UAR and token accuracy on transformed audio."""
    ids = sorted({i for t in trials for i in t.enroll_ids} | {t.test_id for t in trials})
    utts = [corpus.get(i) for i in ids]
    waves = _map(lambda u: _fit_length(transform(u), len(u.waveform)), utts, cfg.eval.workers)
    transformed = dict(zip(ids, waves))
    mels = {i: mel_spectrogram(w, cfg.mel).frames for i, w in transformed.items()}
    stats = {i: utterance_stats(m) for i, m in mels.items()}
    embeddings = dict(zip(ids, probes.attacker.embed_features(np.stack([stats[i] for i in ids]))))

    genuine, impostor, scored = [], [], []
    for t in trials:
        s = SpeakerVerifier.score([embeddings[i] for i in t.enroll_ids], embeddings[t.test_id])
        (genuine if t.label else impostor).append(s)
        scored.append(t.model_copy(update={"condition": name, "score": s}))

    test_ids = sorted({t.test_id for t in trials})
    edits = total = 0
    for i in test_ids:
        ref = vq1_codes(model, corpus.get(i).waveform)
        hyp = vq1_codes(model, transformed[i])
        if cfg.eval.collapse_repeats:
            ref, hyp = collapse_repeats(ref), collapse_repeats(hyp)
        edits += edit_distance(ref, hyp)
        total += len(ref)

    test_utts = [corpus.get(i) for i in test_ids]
    emotion_pred = probes.emotion.predict(np.stack([stats[i] for i in test_ids]))
    X, y = _frame_rows([mels[i] for i in test_ids], test_utts)
    metrics = ConditionMetrics(
        eer=eer(genuine, impostor),
        ter=edits / total,
        uar=uar_from_labels([u.emotion_id for u in test_utts], emotion_pred),
        token_accuracy=float(np.mean(probes.content.predict(X) == y)),
        num_genuine=len(genuine),
        num_impostor=len(impostor),
    )
    logger.info(
        f"Condition {name}: EER={metrics.eer:.3f} TER={metrics.ter:.3f} "
        f"UAR={metrics.uar:.3f} token_acc={metrics.token_accuracy:.3f}"
    )
    return metrics, scored


def run_protocol(
    model: EasyModel,
    pool: SpeakerPool | None,
    corpus: Corpus,
    cfg: RunConfig,
    conditions: Sequence[str] = ("original", "reconstructed", "anonymized"),
    model_step: int = 0,
    probes: ProtocolProbes | None = None,
    out_dir: str | Path | None = None,
    variant: str = "full",
) -> MetricsReport:
    if not corpus.train or not corpus.dev or not corpus.test:
        raise EvaluationError("protocol needs non-empty train, dev and test splits")
    if "anonymized" in conditions and pool is None:
        raise EvaluationError("protocol needs a speaker pool for the anonymized condition")
    speakers = trial_speakers(corpus, pool, cfg.eval.disjoint_pool)
    if len(speakers) < 2:
        raise EvaluationError(
            f"only {len(speakers)} test speakers are outside the pool; lower corpus.pool_speakers"
        )
    trials = build_trials(corpus, speakers)
    probes = probes or train_protocol_probes(corpus, cfg)

    results, all_trials = {}, []
    for name in conditions:
        results[name], scored = score_condition(
            name, condition_transform(name, model, pool, cfg), model, corpus, trials, probes, cfg
        )
        all_trials += scored

    headline = results["anonymized"] if "anonymized" in results else results[conditions[-1]]
    report = MetricsReport(
        eer=headline.eer,
        ter=headline.ter,
        uar=headline.uar,
        conditions=results,
        num_trials=headline.num_trials,
        num_genuine=headline.num_genuine,
        num_impostor=headline.num_impostor,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        model_step=model_step,
        variant=variant,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_json(out_dir / METRICS_NAME, report)
        write_jsonl(out_dir / TRIALS_NAME, all_trials)
    return report


def probe_layers(
    model: EasyModel,
    corpus: Corpus,
    layer_specs: Sequence[str],
    cfg: RunConfig,
    model_step: int = 0,
    probes: ProtocolProbes | None = None,
) -> ProbeReport:
    """Speaker, content and emotion probes on the content encoder output, r1 and each VQ
    layer subset, plus the attacker EER of waveforms reconstructed from each subset and
    without the speaker vector."""
    e = cfg.eval
    reps = ["ec", "r1", *[f"vq:{s}" for s in layer_specs]]
    results = []
    for rep, target in itertools.product(reps, ("speaker", "content", "emotion")):
        outcome = train_probe(
            lambda u: representation(model, u.waveform, rep),
            target,
            corpus.train,
            corpus.test,
            e.probe_max_iter,
            e.probe_c,
            cfg.seed,
            e.workers,
        )
        results.append(
            ProbeResult(
                representation=rep,
                target=target,
                score=outcome.score,
                metric=outcome.metric,
                num_train=outcome.num_train,
                num_test=outcome.num_test,
            )
        )
        logger.info(f"Probe {target} on {rep}: {outcome.metric}={outcome.score:.3f}")

    probes = probes or train_protocol_probes(corpus, cfg)
    trials = build_trials(corpus, corpus.speakers("test"))
    speaker_eer = {}
    for name in [*[f"vq:{s}" for s in layer_specs], "wo_s"]:
        metrics, _ = score_condition(name, condition_transform(name, model, None, cfg), model, corpus, trials, probes, cfg)
        speaker_eer[name] = metrics.eer
    return ProbeReport(
        layers=",".join(layer_specs),
        results=results,
        speaker_eer=speaker_eer,
        config_hash=config_hash(cfg),
        seed=cfg.seed,
        model_step=model_step,
    )


def ablate(reports: Mapping[str, Sequence[MetricsReport]], sweep: Mapping[str, float | int | str] | None = None) -> list[AblationRow]:
    """Seed-averaged metrics per variant with deltas against the full model."""
    if "full" not in reports:
        raise EvaluationError("ablation needs the 'full' variant as its reference")
    missing = [name for name, runs in reports.items() if not runs]
    if missing:
        raise EvaluationError(f"variant {missing[0]!r} has no runs")

    def mean(runs, key):
        return float(np.mean([getattr(r, key) for r in runs]))

    def original_eer(runs):
        return float(np.mean([r.conditions["original"].eer if "original" in r.conditions else r.eer for r in runs]))

    full = reports["full"]
    rows = []
    for name, runs in reports.items():
        row = AblationRow(
            variant=name,
            sweep=dict(sweep or {}),
            seeds=[r.seed for r in runs],
            eer=mean(runs, "eer"),
            ter=mean(runs, "ter"),
            uar=mean(runs, "uar"),
            original_eer=original_eer(runs),
            config_hash=runs[0].config_hash,
        )
        if name != "full":
            row.delta_eer = row.eer - mean(full, "eer")
            row.delta_ter = row.ter - mean(full, "ter")
            row.delta_uar = row.uar - mean(full, "uar")
        rows.append(row)
    return rows


def parse_sweep(items: Sequence[str]) -> dict[str, list]:
    """``key=v1,v2`` with key one of alpha, m, lambda_grl, K (or a dotted config key)."""
    sweep = {}
    for item in items:
        if "=" not in item:
            raise EvaluationError(f"sweep must look like key=v1,v2: {item!r}")
        key, raw = item.split("=", 1)
        key = SWEEP_KEYS.get(key.strip(), key.strip())
        values = []
        for v in raw.split(","):
            try:
                values.append(int(v) if v.strip().lstrip("-").isdigit() else float(v))
            except ValueError:
                values.append(v.strip())
        sweep[key] = values
    return sweep


def run_ablation(
    cfg: RunConfig,
    corpus: Corpus,
    variants: Sequence[str],
    seeds: Sequence[int],
    sweep: Mapping[str, Sequence] | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Train and evaluate every variant for every seed and sweep point."""
    from .trainer import Trainer

    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise EvaluationError(f"unknown ablation variant {unknown[0]!r}")
    variants = ["full", *[v for v in variants if v != "full"]]
    sweep = dict(sweep or {})
    keys = sorted(sweep)
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))] or [{}]
    out_dir = Path(out_dir) if out_dir else None

    trained: dict[str, tuple] = {}
    rows = []
    for point in points:
        reports: dict[str, list[MetricsReport]] = {v: [] for v in variants}
        for variant, seed in itertools.product(variants, seeds):
            run_cfg = with_overrides(cfg, {**VARIANTS[variant], **point, "seed": seed})
            train_key = config_hash(with_overrides(run_cfg, {"anon.alpha": 0.5, "anon.num_averaged": 1, "anon.seed": 0}))
            tag = "_".join([variant, f"seed{seed}", *[f"{k.split('.')[-1]}{v}" for k, v in point.items()]])
            if train_key not in trained:
                run_dir = (out_dir / tag) if out_dir else run_cfg.paths.run_dir / tag
                trainer = Trainer(run_cfg, corpus, run_dir)
                trainer.fit()
                trained[train_key] = (trainer.model, trainer.step)
            model, step = trained[train_key]
            pool = build_pool(corpus.train, model, pool_speaker_ids(corpus, run_cfg))
            report = run_protocol(
                model,
                pool,
                corpus,
                run_cfg,
                model_step=step,
                out_dir=(out_dir / tag) if out_dir else None,
                variant=variant,
            )
            reports[variant].append(report)
            logger.info(f"Ablation {tag}: EER={report.eer:.3f} TER={report.ter:.3f} UAR={report.uar:.3f}")
        rows += ablate(reports, {k.split(".")[-1]: v for k, v in point.items()})
    if out_dir is not None:
        write_jsonl(out_dir / "ablation.jsonl", rows)
    return rows


def pool_speaker_ids(corpus: Corpus, cfg: RunConfig) -> list[int]:
    """The first ``corpus.pool_speakers`` training speakers, or all of them when unset."""
    speakers = corpus.speakers("train")
    n = cfg.corpus.pool_speakers
    return speakers if n is None else speakers[:n]
