"""Template-driven synthetic corpora.

Two domains ship as template specs: a news-like domain whose slots are typed
sensitive entities (the marked / replaced / masked triple) and a code-like
domain with a distinct byte distribution. Files are UTF-8, one example per
line; entity spans in the marked variant are written ``⟦TYPE|surface⟧``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..minilm.tokenizer import TokenBatch, encode_batch

ENTITY_TYPES = ("PERSON", "GPE", "LOC", "DATE", "QUANTITY", "TIME", "PERCENT", "ORG",
                "NORP", "MONEY", "LAW", "WORK_OF_ART")

MARK_OPEN, MARK_SEP, MARK_CLOSE = "⟦", "|", "⟧"
_SLOT = re.compile(r"\{([A-Z_]+)\}")
_MARK = re.compile(re.escape(MARK_OPEN) + r"([A-Z_]+)\|(.*?)" + re.escape(MARK_CLOSE))


class PoolExhaustedError(ValueError):
    pass


@dataclass(frozen=True)
class SensiTemplateSpec:
    templates: Sequence[str]
    pools: Mapping[str, Sequence[str]]
    count: int = 1000
    seed: int = 0
    max_chars: int = 62
    name: str = "news"
    # reuse one draw per slot type within a line (identifiers in code)
    consistent_slots: bool = False

    def __post_init__(self):
        for t in self.templates:
            for slot in _SLOT.findall(t):
                if not self.pools.get(slot):
                    raise PoolExhaustedError(f"template slot {slot} has an empty pool")


NEWS_TEMPLATES = (
    "{PERSON} met {PERSON} in {GPE} on {DATE}.",
    "{ORG} said sales rose {PERCENT} in {GPE}.",
    "Police found {PERSON} near {LOC} at {TIME}.",
    "{PERSON} paid {MONEY} to {ORG} on {DATE}.",
    "The {NORP} group backed the {LAW} in {GPE}.",
    "{PERSON} read {WORK_OF_ART} on {DATE}.",
    "{ORG} shipped {QUANTITY} of aid to {GPE}.",
    "On {DATE}, {PERSON} flew from {GPE} to {GPE}.",
    "{PERSON}, a {NORP} doctor, lives in {GPE}.",
    "Shares of {ORG} fell {PERCENT} at {TIME}.",
    "{PERSON} walked {QUANTITY} along {LOC}.",
    "The court cited the {LAW} against {ORG}.",
    "{PERSON} won {MONEY} in {GPE} on {DATE}.",
    "{ORG} hired {PERSON} as chief in {DATE}.",
    "Fans of {WORK_OF_ART} met at {LOC} at {TIME}.",
    "{PERSON} told {ORG} the deal was off.",
)

NEWS_POOLS = {
    "PERSON": ("John Smith", "Mary Jones", "Ali Khan", "Li Wei", "Ana Silva", "Tom Brown",
               "Sara Lee", "Omar Said", "Eva Novak", "Raj Patel", "Kim Park", "Lucy Gray",
               "Paul Dunn", "Nina Ross", "Ivan Petrov", "Maria Cruz", "Ben Cole", "Zoe Hart",
               "Hugo Diaz", "Amy Chen", "Leo Marsh", "Jane Fox", "Sam Reed", "Ella Moss"),
    "GPE": ("Paris", "London", "Texas", "Berlin", "Lagos", "Tokyo", "Peru", "Ohio", "Rome",
            "Cairo", "Delhi", "Oslo", "Lima", "Kenya", "Boston", "Dublin", "Madrid", "Seoul"),
    "LOC": ("the river", "Mount Kenya", "the coast", "Lake Erie", "the Alps", "the park",
            "the Nile", "the valley", "Red Sea", "the forest", "the harbor", "the desert"),
    "DATE": ("Monday", "May 3", "last June", "2019", "Friday", "March 12", "July 4", "2021",
             "last week", "June 9", "2015", "Sunday", "Oct 30", "April 1", "1998", "Jan 7"),
    "QUANTITY": ("40 kg", "3 miles", "12 tons", "8 km", "5 liters", "90 pounds", "2 acres",
                 "60 feet", "7 tons", "15 km"),
    "TIME": ("noon", "9 am", "midnight", "6 pm", "dawn", "10:30", "7 am", "8 pm", "4 pm"),
    "PERCENT": ("5%", "12%", "30 percent", "2%", "18%", "7%", "45%", "9 percent", "21%"),
    "ORG": ("Acme Corp", "the UN", "NASA", "Apex Bank", "Red Cross", "BBC", "Volvo",
            "Nova Labs", "the FBI", "Oxfam", "Zeta Inc", "Kraft", "Delta"),
    "NORP": ("French", "Kenyan", "Buddhist", "Irish", "Mexican", "Catholic", "Dutch",
             "Muslim", "Greek", "Korean"),
    "MONEY": ("$40", "$2 million", "500 euros", "$75", "$9 billion", "20 pounds", "$300",
              "$1.5 million", "80 yen"),
    "LAW": ("Clean Air Act", "Patriot Act", "Tax Code", "Data Act", "Bill 12", "Civil Code",
            "Title IX", "Water Act"),
    "WORK_OF_ART": ("Hamlet", "Dune", "Blue Moon", "Emma", "Ulysses", "Roots", "Big Fish",
                    "Star Trek", "Jaws"),
}

CODE_TEMPLATES = (
    "def {FN}({VAR}, {ARG}): return {VAR} {OP} {ARG}",
    "for {IDX} in range({NUM}): print({IDX} {OP} {NUM})",
    "{VAR} = [{IDX} * {NUM} for {IDX} in {ARG}]",
    "if {VAR} > {NUM}: {ARG} = {VAR} {OP} {NUM}",
    "while {VAR} < {NUM}: {VAR} += {NUM}",
    "{VAR} = {MOD}.{FN}({ARG}, {NUM})",
    "return sorted({VAR}, key=lambda {IDX}: {IDX}[{NUM}])",
    "{VAR}.append({ARG} {OP} {NUM})",
    "Write a function {FN} that adds {VAR} and {ARG}.",
    "import {MOD}; print({MOD}.{FN}({VAR}))",
    "{VAR} = dict({ARG}={NUM}, {IDX}={NUM})",
    "assert {FN}({VAR}) == {NUM}",
    "class {CLS}: def {FN}(self): return {NUM}",
    "try: {VAR} = int({ARG}) except: {VAR} = {NUM}",
)

CODE_POOLS = {
    "FN": ("add", "get_sum", "parse", "load", "mean", "fib", "to_str", "count", "merge",
           "split", "clean", "run", "max_of", "solve", "area"),
    "VAR": ("x", "y", "total", "items", "data", "result", "n", "acc", "buf", "vals", "s",
            "arr", "lst", "cnt"),
    "ARG": ("a", "b", "nums", "text", "k", "step", "m", "words", "row", "p"),
    "IDX": ("i", "j", "k", "idx", "t"),
    "NUM": ("0", "1", "2", "3", "10", "42", "100", "7", "5", "64", "255", "9"),
    "OP": ("+", "-", "*", "//", "%", "**"),
    "MOD": ("math", "os", "json", "re", "np", "sys", "time"),
    "CLS": ("Node", "Stack", "Point", "Timer", "Parser", "Cache"),
}


def news_spec(count: int = 1000, seed: int = 0) -> SensiTemplateSpec:
    return SensiTemplateSpec(NEWS_TEMPLATES, NEWS_POOLS, count=count, seed=seed, name="news")


def code_spec(count: int = 1000, seed: int = 0) -> SensiTemplateSpec:
    return SensiTemplateSpec(CODE_TEMPLATES, CODE_POOLS, count=count, seed=seed, name="code",
                             consistent_slots=True)


@dataclass
class SensiLines:
    marked: list[str] = field(default_factory=list)
    replaced: list[str] = field(default_factory=list)
    masked: list[str] = field(default_factory=list)

    @property
    def surface(self) -> list[str]:
        return [strip_marks(m) for m in self.marked]


def _fill(template: str, values: list[tuple[str, str]], kind: str) -> str:
    it = iter(values)

    def sub(m):
        typ, surface = next(it)
        if kind == "marked":
            return f"{MARK_OPEN}{typ}{MARK_SEP}{surface}{MARK_CLOSE}"
        if kind == "masked":
            return f"<{typ}>"
        return surface

    return _SLOT.sub(sub, template)


def generate_lines(spec: SensiTemplateSpec) -> SensiLines:
    """Draw ``spec.count`` aligned (marked, replaced, masked) lines."""
    rng = np.random.default_rng(spec.seed)
    lines = SensiLines()
    attempts = 0
    while len(lines.marked) < spec.count:
        attempts += 1
        if attempts > 50 * spec.count + 1000:
            raise ValueError("templates cannot produce lines within max_chars")
        template = spec.templates[rng.integers(len(spec.templates))]
        slots = _SLOT.findall(template)
        originals: list[tuple[str, str]] = []
        drawn: dict[str, str] = {}
        for typ in slots:
            if not spec.consistent_slots or typ not in drawn:
                pool = spec.pools[typ]
                drawn[typ] = pool[rng.integers(len(pool))]
            originals.append((typ, drawn[typ]))
        # replacements avoid every original surface on the line, not just their own slot's
        used = {surface for _, surface in originals}
        replacements, chosen = [], {}
        for i, (typ, orig) in enumerate(originals):
            key = typ if spec.consistent_slots else i
            if key not in chosen:
                others = [p for p in spec.pools[typ] if p not in used]
                if not others:
                    raise PoolExhaustedError(f"pool for {typ} has no alternative to '{orig}'")
                chosen[key] = others[rng.integers(len(others))]
            replacements.append((typ, chosen[key]))
        surface = _fill(template, originals, "plain")
        replaced = _fill(template, replacements, "plain")
        if len(surface.encode()) > spec.max_chars or len(replaced.encode()) > spec.max_chars:
            continue
        lines.marked.append(_fill(template, originals, "marked"))
        lines.replaced.append(replaced)
        lines.masked.append(_fill(template, originals, "masked"))
    return lines


def strip_marks(text: str) -> str:
    return _MARK.sub(lambda m: m.group(2), text)


def marked_spans(text: str) -> list[tuple[str, str]]:
    """(type, surface) pairs annotated in a marked line."""
    return _MARK.findall(text)


def generate_sensi_corpora(spec: SensiTemplateSpec, out_dir) -> dict[str, Path]:
    """Write ``<name>_marked.txt``, ``<name>_replaced.txt`` and ``<name>_masked.txt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = generate_lines(spec)
    paths = {}
    for kind in ("marked", "replaced", "masked"):
        path = out_dir / f"{spec.name}_{kind}.txt"
        path.write_text("\n".join(getattr(lines, kind)) + "\n", encoding="utf-8")
        paths[kind] = path
    return paths


def read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [strip_marks(line) for line in text.splitlines() if line.strip()]


def load_corpus(path, max_len: int) -> TokenBatch:
    return encode_batch(read_lines(path), max_len)
