"""Objective evaluation harness.

Replaces listening tests with measurements against the forge's known
generating parameters: accent parameter recovery and nearest-accent
classification, speaker parameter preservation, style shift checks,
mel-cepstral distortion against oracle renders, and attention stability
diagnostics.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_toeplitz

from .audio import HOP, SAMPLE_RATE
from .features import MelSpectrogram
from .forge.profile import PUNCTUATION, VOWEL, ForgeProfile

LPC_ORDER = 12
PRE_EMPHASIS = 0.97
MIN_SEGMENT_SAMPLES = 120
PAUSE_FRAMES_MIN = 6          # punctuation rendered this long counts as a pause

# stability detection thresholds
COVERAGE_EARLY_STOP = 0.9
REPEAT_BACKSTEP = 2
BABBLE_LENGTH_FACTOR = 2.0

MCD_COEFFS = slice(1, 14)     # cepstral coefficients 1..13, 0th excluded
_MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)


class MeasurementError(RuntimeError):
    pass


@dataclass
class AccentMeasurement:
    f0_slope: float             # Hz/s from a robust per-phrase fit
    duration_mult: float        # vowel/consonant ratio normalized by base durations
    f2_shift: float             # vowel F2 ratio normalized by the F1 scale estimate
    f0_intercept: float
    formant_scale: float
    vowel_f2_hz: dict = field(default_factory=dict)   # token index -> measured Hz

    def vector(self) -> np.ndarray:
        return np.array([self.f0_slope, self.duration_mult, self.f2_shift])


@dataclass
class StabilityFlags:
    early_stop: bool = False
    skip: bool = False
    repeat: bool = False
    babble: bool = False
    coverage: float = 1.0

    def as_dict(self) -> dict:
        return {"early_stop": bool(self.early_stop), "skip": bool(self.skip),
                "repeat": bool(self.repeat), "babble": bool(self.babble),
                "coverage": float(self.coverage)}


# ---------------------------------------------------------------------------
# low-level spectral measurements

def lpc_pole_frequencies(segment: np.ndarray, order: int = LPC_ORDER):
    """(frequency, bandwidth) pairs of the complex LPC poles of a segment."""
    x = np.asarray(segment, dtype=np.float64)
    if len(x) < order * 3:
        return []
    x = x * np.hanning(len(x))
    x = np.append(x[0], x[1:] - PRE_EMPHASIS * x[:-1])
    r = np.correlate(x, x, "full")[len(x) - 1:len(x) + order]
    if r[0] <= 0:
        return []
    try:
        a = solve_toeplitz((r[:-1], r[:-1]), r[1:])
    except np.linalg.LinAlgError:
        return []
    poles = np.roots(np.concatenate([[1.0], -a]))
    out = []
    for p in poles:
        if np.imag(p) <= 1e-9:
            continue
        freq = float(np.angle(p) * SAMPLE_RATE / (2.0 * np.pi))
        bw = float(-SAMPLE_RATE / np.pi * np.log(max(abs(p), 1e-12)))
        out.append((freq, bw))
    return sorted(out)


def _vowel_segments(wave, tokens, durations, profile):
    bounds = np.concatenate([[0], np.cumsum(durations)]) * HOP
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION or profile.phones[tok].kind != VOWEL:
            continue
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        trim = (hi - lo) // 5
        seg = wave[lo + trim:hi - trim]
        if len(seg) >= MIN_SEGMENT_SAMPLES:
            yield i, tok, seg


def measure_vowel_formants(wave, tokens, durations, profile: ForgeProfile,
                           f1_vowels=("e",), f2_vowels=("a", "e", "i")):
    """Per-vowel F1/F2 estimates from LPC poles, keyed by token index.

    Only vowels whose resonance bands stay clear of each other across the
    allowed speaker/accent scalings are measured on each axis. F1 comes
    from the mid-height front vowel by default; high vowels put F1 below
    the second harmonic of high voices, where the pole estimate biases hard.
    Texts without an F1 vowel fall back to the high front vowel.
    """
    f1_by_idx, f2_by_idx = {}, {}
    pole_cache = {}
    for i, tok, seg in _vowel_segments(wave, tokens, durations, profile):
        poles = lpc_pole_frequencies(seg)
        if not poles:
            continue
        pole_cache[i] = (tok, poles)
        ph = profile.phones[tok]
        if tok in f1_vowels:
            cands = [f for f, bw in poles if 0.65 * ph.f1 <= f <= 1.45 * ph.f1 and bw < 600]
            if cands:
                f1_by_idx[i] = min(cands, key=lambda f: abs(f - ph.f1))
        if tok in f2_vowels:
            cands = [f for f, bw in poles if 0.62 * ph.f2 <= f <= 1.5 * ph.f2 and bw < 700]
            if cands:
                f2_by_idx[i] = min(cands, key=lambda f: abs(f - ph.f2))
    if not f1_by_idx:
        for i, (tok, poles) in pole_cache.items():
            if tok != "i":
                continue
            ph = profile.phones[tok]
            cands = [f for f, bw in poles if 0.65 * ph.f1 <= f <= 1.45 * ph.f1 and bw < 600]
            if cands:
                f1_by_idx[i] = min(cands, key=lambda f: abs(f - ph.f1))
    return f1_by_idx, f2_by_idx


def phrase_relative_times(tokens, durations) -> np.ndarray:
    """Per-frame seconds since the current phrase start.

    Declination resets after rendered pauses; a punctuation token long
    enough to be an actual pause marks a phrase boundary.
    """
    total = int(np.sum(durations))
    bounds = np.concatenate([[0], np.cumsum(durations)])
    t_start = np.zeros(total)
    start = 0.0
    for i, tok in enumerate(tokens):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        t_start[lo:hi] = start
        is_pause = (tok in PUNCTUATION and durations[i] >= PAUSE_FRAMES_MIN) or tok == "_"
        if is_pause:
            start = hi * HOP / SAMPLE_RATE
    return np.arange(total) * HOP / SAMPLE_RATE - t_start


def interior_voiced_mask(tokens, durations, profile) -> np.ndarray:
    """Frames strictly inside voiced phones, where pitch tracking is stable."""
    total = int(np.sum(durations))
    mask = np.zeros(total, dtype=bool)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION or not profile.is_voiced(tok):
            continue
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        if hi - lo > 2:
            mask[lo + 1:hi - 1] = True
    return mask


def robust_line_fit(t: np.ndarray, y: np.ndarray):
    """Theil-Sen slope and median intercept."""
    n = len(t)
    if n < 4:
        raise MeasurementError("too few voiced frames for a slope fit")
    slopes = []
    for i in range(n - 1):
        dt = t[i + 1:] - t[i]
        dy = y[i + 1:] - y[i]
        ok = np.abs(dt) > 0.05
        if ok.any():
            slopes.append(dy[ok] / dt[ok])
    if not slopes:
        raise MeasurementError("degenerate time axis in slope fit")
    slope = float(np.median(np.concatenate(slopes)))
    intercept = float(np.median(y - slope * t))
    return slope, intercept


def measure_accent(wave, f0, voicing, tokens, durations, profile: ForgeProfile) -> AccentMeasurement:
    """Recover accent parameters from audio plus an alignment.

    The duration ratio is normalized by the inventory's base durations so
    the style rate multiplier cancels; the F2 shift is normalized by the
    F1-based speaker scale estimate.
    """
    durations = np.asarray(durations, dtype=np.int64)
    if len(durations) != len(tokens):
        raise MeasurementError("alignment does not match the token sequence")
    if not np.any(voicing):
        raise MeasurementError("no voiced frames")

    # audio that omits the analysis tail yields a few frames less than the
    # duration grid; measure over the common prefix
    t_rel = phrase_relative_times(tokens, durations)
    n = min(len(t_rel), len(f0), len(voicing))
    f0 = np.asarray(f0, dtype=np.float64)[:n]
    voicing = np.asarray(voicing, dtype=bool)[:n]
    mask = voicing & interior_voiced_mask(tokens, durations, profile)[:n]
    if mask.sum() < 4:
        mask = voicing.copy()
    slope, intercept = robust_line_fit(t_rel[:n][mask], f0[mask])

    final_vowel = _final_vowel_index(tokens, profile)
    v_frames = v_base = c_frames = c_base = 0.0
    for i, tok in enumerate(tokens):
        if tok in PUNCTUATION:
            continue
        ph = profile.phones[tok]
        if ph.kind == VOWEL and i != final_vowel:
            v_frames += durations[i]
            v_base += ph.base_ms
        elif ph.kind in ("fricative", "stop", "nasal"):
            c_frames += durations[i]
            c_base += ph.base_ms
    if v_base <= 0 or c_base <= 0 or c_frames <= 0:
        raise MeasurementError("text lacks measurable vowel/consonant content")
    duration_mult = (v_frames / v_base) / (c_frames / c_base)

    f1_by_idx, f2_by_idx = measure_vowel_formants(wave, tokens, durations, profile)
    if not f1_by_idx or not f2_by_idx:
        raise MeasurementError("no measurable vowel formants")
    scale = float(np.median([f / profile.phones[tokens[i]].f1 for i, f in f1_by_idx.items()]))
    f2_ratio = float(np.median([f / profile.phones[tokens[i]].f2 for i, f in f2_by_idx.items()]))
    return AccentMeasurement(
        f0_slope=slope,
        duration_mult=duration_mult,
        f2_shift=f2_ratio / scale,
        f0_intercept=intercept,
        formant_scale=scale,
        vowel_f2_hz={int(i): float(f) for i, f in f2_by_idx.items()},
    )


def measure_speaker(wave, f0, voicing, tokens, durations, profile: ForgeProfile):
    """(detrended median F0, formant scale estimate) for speaker checks."""
    m = measure_accent(wave, f0, voicing, tokens, durations, profile)
    return m.f0_intercept, m.formant_scale


def speaker_score(f0_median: float, formant_scale: float, speaker) -> float:
    """1 minus the mean relative error against the speaker's parameters."""
    err = 0.5 * abs(f0_median / speaker.base_f0 - 1.0) \
        + 0.5 * abs(formant_scale / speaker.formant_scale - 1.0)
    return max(0.0, 1.0 - err)


def accent_classify(measured: AccentMeasurement, accents: dict):
    """Nearest accent under z-normalized parameter distance.

    Returns (accent_id, margin); margin is None for a degenerate
    single-entry table.
    """
    ids = sorted(accents)
    if not ids:
        raise MeasurementError("empty accent table")
    table = np.array([[accents[a].f0_slope, accents[a].vowel_duration_mult,
                       accents[a].f2_shift] for a in ids])
    std = table.std(axis=0)
    std[std <= 1e-9] = 1.0
    d = np.sqrt((((measured.vector()[None, :] - table) / std) ** 2).sum(axis=1))
    order = np.argsort(d)
    best = ids[int(order[0])]
    if len(ids) == 1:
        return best, None
    margin = float((d[order[1]] - d[order[0]]) / max(d[order[0]], 1e-9))
    return best, margin


def _final_vowel_index(tokens, profile) -> int:
    for i in range(len(tokens) - 1, -1, -1):
        if tokens[i] not in PUNCTUATION and profile.phones[tokens[i]].kind == VOWEL:
            return i
    return -1


# ---------------------------------------------------------------------------
# stability diagnostics

def attention_diagnostics(attention: np.ndarray, stop_step: int | None,
                          expected_frames: float, non_pause_mask: np.ndarray,
                          frames_per_step: int = 1) -> StabilityFlags:
    """Failure flags from a (decoder steps, tokens) attention matrix.

    stop_step is None when generation ran to its step limit instead of
    emitting a stop token.
    """
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 2 or att.size == 0:
        raise MeasurementError("empty attention matrix")
    arg = att.argmax(axis=1)
    n_tokens = att.shape[1]
    covered = np.zeros(n_tokens, dtype=bool)
    covered[np.unique(arg)] = True
    coverage = float(covered.mean())

    flags = StabilityFlags(coverage=coverage)
    flags.early_stop = stop_step is not None and coverage < COVERAGE_EARLY_STOP
    non_pause = np.asarray(non_pause_mask, dtype=bool)
    flags.skip = bool(np.any(~covered & non_pause))
    # a regression of REPEAT_BACKSTEP or more phones counts as one backstep
    backsteps = int(np.sum(arg[1:] <= arg[:-1] - REPEAT_BACKSTEP))
    flags.repeat = backsteps > 1
    output_frames = att.shape[0] * frames_per_step
    flags.babble = output_frames > BABBLE_LENGTH_FACTOR * expected_frames
    return flags


def duration_diagnostics(durations: np.ndarray, expected_frames: float) -> StabilityFlags:
    """Stability flags for duration-driven synthesis.

    The expansion is an exact partition (each token exactly once, in order,
    at least one frame), so only runaway total length is a live failure
    mode.
    """
    durations = np.asarray(durations, dtype=np.int64)
    flags = StabilityFlags(coverage=1.0)
    flags.skip = bool(np.any(durations < 1))
    flags.babble = float(durations.sum()) > BABBLE_LENGTH_FACTOR * expected_frames
    return flags


# ---------------------------------------------------------------------------
# spectral distortion

def mel_cepstra(mel: MelSpectrogram) -> np.ndarray:
    """Orthonormal DCT-II of log-mel frames, coefficients 1..13."""
    x = np.asarray(mel.frames, dtype=np.float64)
    n = x.shape[1]
    k = np.arange(n)
    basis = np.cos(np.pi * (k[None, :] + 0.5) * np.arange(n)[:, None] / n)
    basis *= np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    cep = x @ basis.T
    return cep[:, MCD_COEFFS]


def dtw_path(a: np.ndarray, b: np.ndarray):
    """Symmetric-step DTW path between two frame sequences (euclidean cost)."""
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise MeasurementError("empty input to DTW")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    acc = np.full((na, nb), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(na):
        row_prev = acc[i - 1] if i > 0 else None
        row = acc[i]
        for j in range(1 if i == 0 else 0, nb):
            best = np.inf
            if i > 0:
                best = row_prev[j]
                if j > 0:
                    best = min(best, row_prev[j - 1])
            if j > 0:
                best = min(best, row[j - 1])
            acc[i, j] = cost[i, j] + best
    path = [(na - 1, nb - 1)]
    i, j = na - 1, nb - 1
    while i > 0 or j > 0:
        moves = []
        if i > 0 and j > 0:
            moves.append((acc[i - 1, j - 1], i - 1, j - 1))
        if i > 0:
            moves.append((acc[i - 1, j], i - 1, j))
        if j > 0:
            moves.append((acc[i, j - 1], i, j - 1))
        _, i, j = min(moves)
        path.append((i, j))
    path.reverse()
    return path


def mcd(mel_a: MelSpectrogram, mel_b: MelSpectrogram, use_dtw: bool = False) -> float:
    """Mel-cepstral distortion in dB; DTW-aligned when lengths differ."""
    if mel_a.num_frames == 0 or mel_b.num_frames == 0:
        raise MeasurementError("empty mel input to mcd")
    ca, cb = mel_cepstra(mel_a), mel_cepstra(mel_b)
    if use_dtw:
        pairs = dtw_path(ca, cb)
        d = np.array([np.linalg.norm(ca[i] - cb[j]) for i, j in pairs])
    else:
        if len(ca) != len(cb):
            raise MeasurementError("length mismatch without DTW alignment")
        d = np.linalg.norm(ca - cb, axis=1)
    return float(_MCD_CONST * d.mean())


# ---------------------------------------------------------------------------
# style checks

@dataclass
class StyleShift:
    rate_shift: float           # relative change in phone speaking time, news vs neutral
    range_shift: float          # relative change in detrended F0 spread
    rate_sign_ok: bool = False
    rate_mag_ok: bool = False
    range_sign_ok: bool = False
    range_mag_ok: bool = False

    def score(self) -> float:
        axes = []
        for sign_ok, mag_ok in ((self.rate_sign_ok, self.rate_mag_ok),
                                (self.range_sign_ok, self.range_mag_ok)):
            axes.append(1.0 if (sign_ok and mag_ok) else (0.5 if sign_ok else 0.0))
        return float(np.mean(axes))


def phone_seconds(tokens, durations) -> float:
    durations = np.asarray(durations)
    keep = [i for i, t in enumerate(tokens) if t not in PUNCTUATION]
    return float(durations[keep].sum() * HOP / SAMPLE_RATE)


def detrended_f0_spread(f0, voicing, tokens, durations, profile) -> float:
    t_rel = phrase_relative_times(tokens, durations)
    mask = np.asarray(voicing, dtype=bool) & interior_voiced_mask(tokens, durations, profile)
    n = min(len(t_rel), len(f0))
    mask = mask[:n]
    if mask.sum() < 4:
        raise MeasurementError("too few voiced frames for a spread estimate")
    slope, icept = robust_line_fit(t_rel[:n][mask], np.asarray(f0, dtype=np.float64)[:n][mask])
    resid = np.asarray(f0)[:n][mask] - (icept + slope * t_rel[:n][mask])
    return float(np.std(resid))


def style_shift(news: dict, neutral: dict, styles: dict, mag_tol: float = 0.3) -> StyleShift:
    """Compare measured news-vs-neutral shifts against the style multipliers.

    `news` / `neutral` carry per-rendition dicts with keys `seconds` and
    `spread` (matched text content).
    """
    rate_meas = news["seconds"] / neutral["seconds"] - 1.0
    rate_true = styles["news"].rate_mult / styles["neutral"].rate_mult - 1.0
    range_meas = news["spread"] / max(neutral["spread"], 1e-9) - 1.0
    range_true = styles["news"].f0_range_mult / styles["neutral"].f0_range_mult - 1.0
    out = StyleShift(rate_shift=rate_meas, range_shift=range_meas)
    out.rate_sign_ok = rate_meas * rate_true > 0
    out.rate_mag_ok = abs(rate_meas - rate_true) <= mag_tol * abs(rate_true)
    out.range_sign_ok = range_meas * range_true > 0
    out.range_mag_ok = abs(range_meas - range_true) <= mag_tol * abs(range_true)
    return out


# ---------------------------------------------------------------------------
# report emission

REPORT_COLUMNS = ["accent", "speaker", "system", "accent_rate", "accent_margin",
                  "speaker_score", "style_score", "mcd_to_oracle",
                  "early_stop_rate", "skip_rate", "repeat_rate", "babble_rate"]


def emit_report(experiment_dir) -> tuple[Path, Path]:
    """Write the machine-readable and human-readable evaluation tables.

    Regenerated purely from cached metrics, so reruns are byte-identical.
    """
    exp = Path(experiment_dir)
    metrics_path = exp / "evaluation" / "metrics.json"
    if not metrics_path.exists():
        raise MeasurementError(f"missing evaluation metrics at {metrics_path}")
    metrics = json.loads(metrics_path.read_text(encoding="utf-8"))
    report_dir = exp / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    rows = metrics["pairs"]
    csv_lines = [",".join(REPORT_COLUMNS + ["diff_accent_rate", "diff_mcd"])]
    txt = ["accent transfer evaluation",
           "==========================", ""]
    txt.append(f"{'accent':<7}{'speaker':<9}{'system':<14}{'acc.rate':>9}{'margin':>8}"
               f"{'spk':>7}{'style':>7}{'mcd':>8}{'diff(mcd)':>10}")
    by_key = {}
    for row in rows:
        by_key[(row["accent"], row["speaker"], row["system"])] = row

    def fmt(v, nd=3):
        if v is None:
            return "--"
        return f"{v:.{nd}f}"

    pairs = sorted({(r["accent"], r["speaker"]) for r in rows})
    for accent, speaker in pairs:
        inter = by_key.get((accent, speaker, "intermediate"))
        final = by_key.get((accent, speaker, "final"))
        for row in (inter, final):
            if row is None:
                continue
            other = final if row is inter else inter
            diff_rate = diff_mcd = None
            if row["system"] == "final" and inter is not None and final is not None:
                diff_rate = inter["accent_rate"] - final["accent_rate"]
                diff_mcd = inter["mcd_to_oracle"] - final["mcd_to_oracle"]
            csv_lines.append(",".join(
                [accent, speaker, row["system"]]
                + [fmt(row.get(c), 6) for c in REPORT_COLUMNS[3:]]
                + [fmt(diff_rate, 6), fmt(diff_mcd, 6)]))
            txt.append(f"{accent:<7}{speaker:<9}{row['system']:<14}"
                       f"{fmt(row.get('accent_rate')):>9}{fmt(row.get('accent_margin'), 2):>8}"
                       f"{fmt(row.get('speaker_score')):>7}{fmt(row.get('style_score')):>7}"
                       f"{fmt(row.get('mcd_to_oracle'), 2):>8}{fmt(diff_mcd, 2):>10}")
        if inter is None or final is None:
            txt.append(f"{accent:<7}{speaker:<9}{'(missing system result)':<14}")

    txt.append("")
    txt.append("stability on the stress set (rates per failure mode)")
    txt.append(f"{'system':<14}{'early_stop':>11}{'skip':>7}{'repeat':>8}{'babble':>8}{'n':>5}")
    for system, stats in sorted(metrics.get("stability", {}).items()):
        txt.append(f"{system:<14}{stats['early_stop']:>11.3f}{stats['skip']:>7.3f}"
                   f"{stats['repeat']:>8.3f}{stats['babble']:>8.3f}{stats['count']:>5d}")

    sweep = metrics.get("saturation")
    txt.append("")
    if sweep:
        txt.append("saturation sweep (synthetic volume vs accent rate)")
        for point in sweep:
            txt.append(f"  volume {point['volume']:>5.2f}x  utterances {point['utterances']:>5d}"
                       f"  accent_rate {point['accent_rate']:.3f}")
    else:
        txt.append("saturation sweep: not run (sweep mode disabled)")

    csv_path = report_dir / "report.csv"
    txt_path = report_dir / "report.txt"
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    txt_path.write_text("\n".join(txt) + "\n", encoding="utf-8")
    return csv_path, txt_path
