"""Deterministic text renderings of intersection observations.

Three renderings are provided:

* the structured caption, a fixed-order ``key=value`` grammar with unit tokens,
  which round-trips through :func:`parse_caption`;
* a free-prose caption with seed-dependent wording, sentence order and
  irrelevant filler sentences (:func:`unstructured_caption`);
* a shuffled variant of the structured caption with unit tokens removed
  (:func:`shuffled_caption`).

Structured grammar (slot order is fixed)::

    phase=NS_S; elapsed=12s; q=[N:5,E:2,S:4,W:0]veh; p=[N:3,E:1,S:2,W:-1];
    delay=8.4s; thru=12veh/30s; ttc_p10=1.62s; ttc_p50=4.10s; brakes=2;
    red_risk=0; near_v=6.30m/s; near_a=-1.20m/s2; near_d=18.5m

Counts are integers, seconds and meters carry one decimal (elapsed is a whole
number of seconds since the simulator steps in 1 s), TTC, speeds and
accelerations carry two decimals.
"""
from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sim.types import APPROACHES, PHASE_SHORT, Observation

SCHEMA_VERSION = "traffic-caption/1"


class CaptionParseError(ValueError):
    pass


@dataclass(frozen=True)
class Caption:
    text: str
    template_id: str
    source: Optional[Observation] = None
    schema_version: str = SCHEMA_VERSION


def _fmt(x: float, nd: int) -> str:
    s = f"{x:.{nd}f}"
    # avoid "-0.0" so that equal-at-precision values render identically
    if float(s) == 0.0:
        s = f"{0.0:.{nd}f}"
    return s


def _vec(vals) -> str:
    return "[" + ",".join(f"{a}:{int(v)}" for a, v in zip(APPROACHES, vals)) + "]"


def _window(w: float) -> str:
    return f"{w:g}"


def render_text(obs: Observation) -> str:
    slots = [
        f"phase={PHASE_SHORT[int(obs.phase.phase)]}",
        f"elapsed={int(round(obs.phase.elapsed))}s",
        f"q={_vec(obs.q)}veh",
        f"p={_vec(obs.p)}",
        f"delay={_fmt(obs.mean_delay, 1)}s",
        f"thru={int(obs.throughput)}veh/{_window(obs.window_s)}s",
        f"ttc_p10={_fmt(obs.ttc_p10, 2)}s",
        f"ttc_p50={_fmt(obs.ttc_p50, 2)}s",
        f"brakes={int(obs.h_brake)}",
        f"red_risk={int(obs.rho_red)}",
        f"near_v={_fmt(obs.v_near, 2)}m/s",
        f"near_a={_fmt(obs.a_near, 2)}m/s2",
        f"near_d={_fmt(obs.d_stop, 1)}m",
    ]
    return "; ".join(slots)


def render_caption(obs: Observation) -> Caption:
    text = render_text(obs)
    return Caption(text=text, template_id=template_id_of(parse_caption(text)), source=obs)


_NUM = r"-?\d+(?:\.\d+)?"
_VEC = r"\[N:(-?\d+),E:(-?\d+),S:(-?\d+),W:(-?\d+)\]"
_STRUCT_RE = re.compile(
    r"^phase=(EW_S|EW_L|NS_S|NS_L); elapsed=(\d+)s; q=" + _VEC + r"veh; p=" + _VEC
    + rf"; delay=({_NUM})s; thru=(\d+)veh/({_NUM})s; ttc_p10=({_NUM})s; ttc_p50=({_NUM})s;"
    + rf" brakes=(\d+); red_risk=([01]); near_v=({_NUM})m/s; near_a=({_NUM})m/s2;"
    + rf" near_d=({_NUM})m$"
)


def parse_caption(text: str) -> dict:
    """Recover observation fields (at rendered precision) from a structured caption."""
    m = _STRUCT_RE.match(text)
    if m is None:
        raise CaptionParseError(f"not a structured caption: {text[:80]!r}")
    g = m.groups()
    return {
        "phase": PHASE_SHORT.index(g[0]),
        "elapsed": float(g[1]),
        "q": tuple(int(x) for x in g[2:6]),
        "p": tuple(int(x) for x in g[6:10]),
        "mean_delay": float(g[10]),
        "throughput": int(g[11]),
        "window_s": float(g[12]),
        "ttc_p10": float(g[13]),
        "ttc_p50": float(g[14]),
        "h_brake": int(g[15]),
        "rho_red": int(g[16]),
        "v_near": float(g[17]),
        "a_near": float(g[18]),
        "d_stop": float(g[19]),
    }


def fields_of(obs: Observation) -> dict:
    """The parse result a perfect parser would return for ``obs`` (rendered precision)."""
    return parse_caption(render_text(obs))


# -- template bins ------------------------------------------------------------

def queue_bin(n: int) -> int:
    if n <= 0:
        return 0
    if n <= 3:
        return 1
    if n <= 8:
        return 2
    return 3


def delay_bin(d: float, width: float = 5.0) -> int:
    return int(max(d, 0.0) // width)


def ttc_bin(t: float) -> int:
    if t < 1.5:
        return 0
    if t <= 3.0:
        return 1
    return 2


def template_bins(fields: dict) -> tuple:
    return (tuple(queue_bin(x) for x in fields["q"]), delay_bin(fields["mean_delay"]),
            ttc_bin(fields["ttc_p10"]), int(fields["rho_red"]), int(fields["phase"]))


def template_id_of(fields: dict) -> str:
    key = repr(template_bins(fields)).encode()
    return hashlib.sha256(key).hexdigest()[:16]


def template_id(caption: Caption | str) -> str:
    text = caption.text if isinstance(caption, Caption) else caption
    return template_id_of(parse_caption(text))


# -- unstructured prose --------------------------------------------------------

_PHASE_WORDS = {
    "EW_S": ("east-west through traffic", "the east-west straight movement"),
    "EW_L": ("east-west left turns", "the east-west left-turn movement"),
    "NS_S": ("north-south through traffic", "the north-south straight movement"),
    "NS_L": ("north-south left turns", "the north-south left-turn movement"),
}

# Each fact has several phrasings. ``{name}`` placeholders become numbers; the parser
# turns every phrasing into a regular expression, so fillers can never be mistaken for facts.
_FACTS = {
    "phase": (
        "The light is serving {phase} and has been for {elapsed} seconds.",
        "Right now {phase} has the green, {elapsed} seconds so far.",
        "Signal status: {phase}, running {elapsed} seconds.",
    ),
    "queue": (
        "Vehicles waiting: north {qN}, east {qE}, south {qS}, west {qW}.",
        "Queues stand at {qN} north, {qE} east, {qS} south and {qW} west.",
        "Stopped cars per approach are north {qN}, east {qE}, south {qS}, west {qW}.",
    ),
    "pressure": (
        "Pressure imbalance per approach is north {pN}, east {pE}, south {pS}, west {pW}.",
        "Inflow minus outflow reads {pN} north, {pE} east, {pS} south and {pW} west.",
    ),
    "delay": (
        "Average delay is about {delay} seconds.",
        "Drivers lose roughly {delay} seconds each on average.",
        "Mean lateness here is {delay} seconds.",
    ),
    "thru": (
        "{thru} vehicles cleared the junction in the last {window} seconds.",
        "Over the past {window} seconds, {thru} vehicles passed through.",
    ),
    "ttc": (
        "Time-to-collision sits at {ttc10} s for the tightest tenth and {ttc50} s at the median.",
        "The median gap in time is {ttc50} s, while the worst tenth is down to {ttc10} s.",
        "Collision margins: {ttc10} s (10th percentile), {ttc50} s (median).",
    ),
    "brakes": (
        "Drivers braked hard {brakes} times recently.",
        "There were {brakes} sharp braking events lately.",
        "Harsh stops counted: {brakes}.",
    ),
    "near": (
        "The closest vehicle is {dist} m from the line at {speed} m/s, accelerating at {acc} m/s2.",
        "Nearest to the stop bar, a car at {speed} m/s and {acc} m/s2 is {dist} m away.",
        "Lead vehicle: {dist} m out, speed {speed} m/s, acceleration {acc} m/s2.",
    ),
}
_RED_YES = ("A red-light violation risk is present.", "Someone may run the red light.")
_RED_NO = ("No red-light violation risk is present.", "Nobody looks set to run the red light.")

FILLERS = (
    "The weather is mild and the pavement is dry.",
    "A cyclist rolls along the sidewalk.",
    "Street lamps on this block were serviced on day 12 of the month.",
    "Bus line 42 stops two blocks away.",
    "A delivery van is parked around the corner.",
    "Birds are gathering on the overhead wires.",
    "The corner cafe opened at 7 this morning.",
)


def _fact_values(f: dict) -> dict:
    vals = {
        "phase": None,  # rendered via synonyms
        "elapsed": f"{int(round(f['elapsed']))}",
        "delay": _fmt(f["mean_delay"], 1),
        "thru": str(int(f["throughput"])),
        "window": _window(f["window_s"]),
        "ttc10": _fmt(f["ttc_p10"], 2),
        "ttc50": _fmt(f["ttc_p50"], 2),
        "brakes": str(int(f["h_brake"])),
        "dist": _fmt(f["d_stop"], 1),
        "speed": _fmt(f["v_near"], 2),
        "acc": _fmt(f["a_near"], 2),
    }
    for a, qv, pv in zip(APPROACHES, f["q"], f["p"]):
        vals["q" + a] = str(int(qv))
        vals["p" + a] = str(int(pv))
    return vals


def unstructured_caption(obs: Observation, style_seed: int, n_fillers: Optional[int] = None) -> str:
    """Free prose with the same facts as the structured caption.

    Wording, sentence order and 1-3 irrelevant filler sentences depend on ``style_seed``
    (and on the observation, so different observations are styled independently).
    """
    f = fields_of(obs)
    salt = zlib.crc32(render_text(obs).encode())
    rng = np.random.default_rng([int(style_seed) & 0xFFFFFFFF, salt])
    vals = _fact_values(f)
    phase_short = PHASE_SHORT[f["phase"]]
    vals["phase"] = _PHASE_WORDS[phase_short][int(rng.integers(2))]
    sentences = [tpl[int(rng.integers(len(tpl)))].format(**vals) for tpl in _FACTS.values()]
    red = _RED_YES if f["rho_red"] else _RED_NO
    sentences.append(red[int(rng.integers(len(red)))])
    order = rng.permutation(len(sentences))
    sentences = [sentences[i] for i in order]
    k = int(rng.integers(1, 4)) if n_fillers is None else n_fillers
    for j in rng.choice(len(FILLERS), size=k, replace=False):
        sentences.insert(int(rng.integers(len(sentences) + 1)), FILLERS[int(j)])
    text = " ".join(sentences)
    return text[0].upper() + text[1:]


def _compile_facts():
    out = []
    for fact, tpls in _FACTS.items():
        for tpl in tpls:
            parts = re.split(r"\{(\w+)\}", tpl)
            rx = ""
            for i, part in enumerate(parts):
                if i % 2 == 0:
                    rx += re.escape(part)
                elif part == "phase":
                    alts = "|".join(re.escape(w) for ws in _PHASE_WORDS.values() for w in ws)
                    rx += f"(?P<phase>{alts})"
                else:
                    rx += f"(?P<{part}>{_NUM})"
            out.append((fact, re.compile("^" + rx + "$", re.IGNORECASE)))
    return out


_FACT_RES = _compile_facts()
_SENT_SPLIT = re.compile(r"(?<=\.)\s+")


def parse_unstructured(text: str) -> dict:
    """Extract observation fields from prose produced by :func:`unstructured_caption`."""
    got: dict = {}
    for sent in _SENT_SPLIT.split(text.strip()):
        if sent in _RED_YES or sent in _RED_NO:
            got["rho_red"] = 1 if sent in _RED_YES else 0
            continue
        for fact, rx in _FACT_RES:
            m = rx.match(sent)
            if m:
                got.update({k: v for k, v in m.groupdict().items()})
                break
    need = {"phase", "elapsed", "qN", "pN", "delay", "thru", "ttc10", "brakes", "dist", "rho_red"}
    missing = need - set(got)
    if missing:
        raise CaptionParseError(f"prose caption lacks {sorted(missing)}")
    phase_word = got["phase"].lower()
    phase = next(PHASE_SHORT.index(s) for s, ws in _PHASE_WORDS.items()
                 if phase_word in (w.lower() for w in ws))
    return {
        "phase": phase,
        "elapsed": float(got["elapsed"]),
        "q": tuple(int(got["q" + a]) for a in APPROACHES),
        "p": tuple(int(got["p" + a]) for a in APPROACHES),
        "mean_delay": float(got["delay"]),
        "throughput": int(got["thru"]),
        "window_s": float(got["window"]),
        "ttc_p10": float(got["ttc10"]),
        "ttc_p50": float(got["ttc50"]),
        "h_brake": int(got["brakes"]),
        "rho_red": int(got["rho_red"]),
        "v_near": float(got["speed"]),
        "a_near": float(got["acc"]),
        "d_stop": float(got["dist"]),
    }


# -- shuffled / unit-free variant ---------------------------------------------

_UNIT_RE = re.compile(r"(?<=[\d\]])(?:veh/[\d.]+s|m/s2|m/s|veh|s|m)(?=;|$)")


def shuffled_caption(obs: Observation, seed: int = 0) -> str:
    """Structured slots in a seed-dependent order with the unit tokens removed."""
    slots = render_text(obs).split("; ")
    slots = [_UNIT_RE.sub("", s) for s in slots]
    salt = zlib.crc32(render_text(obs).encode())
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, salt])
    return "; ".join(slots[i] for i in rng.permutation(len(slots)))


def parse_any(text: str) -> dict:
    """Parse a structured caption, falling back to the prose parser."""
    try:
        return parse_caption(text)
    except CaptionParseError:
        return parse_unstructured(text)
