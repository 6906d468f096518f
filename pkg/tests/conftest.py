"""Shared fixtures: synthetic table-LM pools with hand-designed score
structure, written so every perplexity in play is exactly derivable from
the probability tables."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import pytest

from span_ensemble import EnsembleConfig, EnsemblePool, TableLM
from span_ensemble.harness import EvalExample

EOS = "<eos>"


def make_table(name, vocab, transitions, order=1):
    return TableLM(name=name, vocab=vocab, transitions=transitions, order=order, eos_token=EOS)


def chain_table(name, prompt_token, words, *, extra_vocab=()):
    """Table that deterministically emits ``words`` after ``prompt_token``,
    then ends the sequence."""
    vocab = [prompt_token, *words, *extra_vocab]
    transitions = {}
    if words:
        transitions[prompt_token] = {words[0]: 1.0}
        for current, following in zip(words, words[1:]):
            transitions[current] = {following: 1.0}
        transitions[words[-1]] = {EOS: 1.0}
    else:
        transitions[prompt_token] = {EOS: 1.0}
    return make_table(name, vocab, transitions)


def write_table_file(path: Path, vocab, transitions, order=1):
    path.write_text(
        json.dumps(
            {
                "order": order,
                "vocab": list(vocab),
                "eos": EOS,
                "fallback": "uniform",
                "transitions": transitions,
            }
        ),
        encoding="utf-8",
    )


def write_pool_file(path: Path, entries):
    path.write_text(json.dumps(entries), encoding="utf-8")


def table_to_file(table: TableLM, path: Path):
    write_table_file(path, table.vocab, table.transitions, order=table.order)


# --- the worked 4-model example: three models agree on the gold span, one
# --- adversary is overconfident about its own wrong span ------------------

GOLD_SPAN = " by Bobby Scott"
ADV_SPAN = " by Robert Williams"

# column perplexities the tables below are built to hit exactly
GOOD_ON_GOLD = 1.2
GOOD_ON_ADV = 8.0
ADV_ON_GOLD = 23.5
ADV_ON_SELF = 1.05


def figure2_tables():
    """Adversary at index 1 (it rates the gold span at 23.5 and its own
    wrong span at 1.05); the three good models rate gold at 1.2 and the
    wrong span at 8.0."""
    vocab = ["Q:", " by", " Bobby", " Scott", " Robert", " Williams", " ~"]
    p = 1 / GOOD_ON_GOLD
    # good scorers rate the adversary span (p * x * x) ** (-1/3) = 8
    x = math.sqrt(GOOD_ON_GOLD / GOOD_ON_ADV**3)
    good_transitions = {
        "Q:": {" by": p, " ~": 1 - p},
        " by": {" Bobby": p, " Robert": x, " ~": 1 - p - x},
        " Bobby": {" Scott": p, " ~": 1 - p},
        " Robert": {" Williams": x, " ~": 1 - x},
        " Scott": {EOS: 1.0},
        " Williams": {EOS: 1.0},
    }
    p_by = 0.95
    y = math.sqrt(1 / (ADV_ON_SELF**3 * p_by))
    z = math.sqrt(1 / (ADV_ON_GOLD**3 * p_by))
    adv_transitions = {
        "Q:": {" by": p_by, " ~": 1 - p_by},
        " by": {" Robert": y, " Bobby": z, " ~": 1 - y - z},
        " Robert": {" Williams": y, " ~": 1 - y},
        " Bobby": {" Scott": z, " ~": 1 - z},
        " Scott": {EOS: 1.0},
        " Williams": {EOS: 1.0},
    }
    return [
        make_table("good-0", vocab, good_transitions),
        make_table("adversary", vocab, adv_transitions),
        make_table("good-2", vocab, good_transitions),
        make_table("good-3", vocab, good_transitions),
    ]


@pytest.fixture()
def figure2_pool():
    return EnsemblePool(models=tuple(figure2_tables()))


# --- pool-composition trend: good models vs overconfident adversaries ----
#
# One-word answers; every perplexity is 1/p for a single table entry. Per
# example class (by id mod 4) the adversaries hate the gold answer at a
# different strength A, which decides whether filtering flips the winner:
#   EASY  (A=19): 2-good-2-bad flips wrong->right when filtering is on
#   HARD  (A=45): 3-good-1-bad flips; 2-good-2-bad stays wrong either way
#   CLEAN (A=9):  below the ratio threshold; everyone gets it right
# Designed outcomes (accuracy %, filter on / off):
#   4-good 100/100, 3-good-1-bad 100/75, 2-good-2-bad 75/25.

GOOD_SELF_PPL = 1.2
GOOD_ON_WRONG_PPL = 14.0
BAD_SELF_PPL = 1.3
BAD_SUPPORT_PPL = 10.0
BAD_ON_GOLD_PPL = {0: 19.0, 1: 19.0, 2: 45.0, 3: 9.0}
BAD_B_OFFSET = 0.4

TREND_EXPECTED = {
    "4-good": (100.0, 100.0),
    "3-good-1-bad": (100.0, 75.0),
    "2-good-2-bad": (75.0, 25.0),
}


@dataclass
class TrendFiles:
    root: Path
    dataset: Path
    dataset_small: Path
    pools: dict[str, Path]
    n_examples: int
    expected: dict[str, tuple[float, float]]


def _with_remainder(row: dict[str, float], sink: str) -> dict[str, float]:
    row = dict(row)
    row[sink] = 1.0 - math.fsum(row.values())
    return row


def build_trend_files(root: Path, n_examples: int = 200) -> TrendFiles:
    vocab = (
        [f"Q{e}:" for e in range(n_examples)]
        + [f" g{e}" for e in range(n_examples)]
        + [f" u{e}" for e in range(n_examples)]
        + [f" v{e}" for e in range(n_examples)]
        + [" ~"]
    )
    good, bad_a, bad_b = {}, {}, {}
    for e in range(n_examples):
        prompt, gold, wrong_a, wrong_b = f"Q{e}:", f" g{e}", f" u{e}", f" v{e}"
        hate = BAD_ON_GOLD_PPL[e % 4]
        good[prompt] = _with_remainder(
            {gold: 1 / GOOD_SELF_PPL, wrong_a: 1 / GOOD_ON_WRONG_PPL, wrong_b: 1 / GOOD_ON_WRONG_PPL},
            " ~",
        )
        good[gold] = {EOS: 1.0}
        bad_a[prompt] = _with_remainder(
            {wrong_a: 1 / BAD_SELF_PPL, wrong_b: 1 / BAD_SUPPORT_PPL, gold: 1 / hate}, " ~"
        )
        bad_a[wrong_a] = {EOS: 1.0}
        bad_b[prompt] = _with_remainder(
            {wrong_b: 1 / BAD_SELF_PPL, wrong_a: 1 / BAD_SUPPORT_PPL, gold: 1 / (hate + BAD_B_OFFSET)},
            " ~",
        )
        bad_b[wrong_b] = {EOS: 1.0}

    write_table_file(root / "good.json", vocab, good)
    write_table_file(root / "bad_a.json", vocab, bad_a)
    write_table_file(root / "bad_b.json", vocab, bad_b)

    def entry(table, name):
        return {"type": "table", "path": f"{table}.json", "name": name}

    pools = {
        "4-good": [entry("good", f"good-{i}") for i in range(4)],
        "3-good-1-bad": [entry("good", f"good-{i}") for i in range(3)] + [entry("bad_b", "bad-b")],
        "2-good-2-bad": [entry("good", "good-0"), entry("good", "good-1"),
                         entry("bad_a", "bad-a"), entry("bad_b", "bad-b")],
    }
    pool_paths = {}
    for name, entries in pools.items():
        pool_path = root / f"pool-{name}.json"
        write_pool_file(pool_path, entries)
        pool_paths[name] = pool_path

    lines = [
        json.dumps(
            {
                "id": f"e{e:04d}",
                "prompt": f"Q{e}:",
                "references": [f"g{e}"],
                "task_kind": "exact_match",
            }
        )
        for e in range(n_examples)
    ]
    dataset = root / "trend.jsonl"
    dataset.write_text("\n".join(lines) + "\n", encoding="utf-8")
    dataset_small = root / "trend-small.jsonl"
    dataset_small.write_text("\n".join(lines[:60]) + "\n", encoding="utf-8")

    return TrendFiles(
        root=root,
        dataset=dataset,
        dataset_small=dataset_small,
        pools=pool_paths,
        n_examples=n_examples,
        expected=dict(TREND_EXPECTED),
    )


@pytest.fixture(scope="session")
def trend_files(tmp_path_factory) -> TrendFiles:
    return build_trend_files(tmp_path_factory.mktemp("trend"), n_examples=200)


# --- complementary-knowledge pool: each model knows a different 40% ------

@dataclass
class CoverageFixture:
    pool: EnsemblePool
    singles: list[EnsemblePool]
    examples: list[EvalExample]
    config: EnsembleConfig
    knowledge_fraction: float


def build_coverage_fixture(n_examples: int = 100, n_models: int = 4) -> CoverageFixture:
    window = (2 * n_examples) // 5
    stride = n_examples // n_models
    sinks = [f" s{k}" for k in range(5)]
    # " zz" must be vocab[0]: after emitting it the context is unknown and
    # the uniform-fallback greedy pick is the lowest vocabulary index.
    vocab = (
        [" zz"]
        + [f"P{e}:" for e in range(n_examples)]
        + [f" a{e}" for e in range(n_examples)]
        + sinks
    )
    tables = []
    for i in range(n_models):
        transitions = {}
        for e in range(n_examples):
            prompt, gold = f"P{e}:", f" a{e}"
            if (e - stride * i) % n_examples < window:
                row = {gold: 0.9, " zz": 1 / 28}
            else:
                row = {" zz": 0.2, gold: 1 / 11}
            share = (1.0 - math.fsum(row.values())) / len(sinks)
            for sink in sinks:
                row[sink] = share
            transitions[prompt] = row
            transitions[gold] = {EOS: 1.0}
        tables.append(make_table(f"model-{i}", vocab, transitions))
    examples = [
        EvalExample(
            id=f"c{e:04d}", prompt=f"P{e}:", references=(f"a{e}",), task_kind="exact_match"
        )
        for e in range(n_examples)
    ]
    return CoverageFixture(
        pool=EnsemblePool(models=tuple(tables)),
        singles=[EnsemblePool(models=(t,)) for t in tables],
        examples=examples,
        config=EnsembleConfig(span_length_words=1, max_total_words=1),
        knowledge_fraction=window / n_examples,
    )


@pytest.fixture(scope="session")
def coverage_fixture() -> CoverageFixture:
    return build_coverage_fixture()


# --- endless cycle pool, for timing and word-budget behavior -------------

def build_cycle_pool(n_models: int = 4, cycle: int = 8, prompts=("Go0:", "Go1:", "Go2:")):
    words = [f" w{k}" for k in range(cycle)]
    vocab = list(prompts) + words
    transitions: dict = {p: {words[0]: 1.0} for p in prompts}
    for k, word in enumerate(words):
        transitions[word] = {words[(k + 1) % cycle]: 1.0}
    models = tuple(make_table(f"cycle-{i}", vocab, transitions) for i in range(n_models))
    examples = [
        EvalExample(id=f"t{i}", prompt=p, references=("none",), task_kind="exact_match")
        for i, p in enumerate(prompts)
    ]
    return EnsemblePool(models=models), examples
