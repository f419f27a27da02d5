"""Seeded synthetic dataset with planted, text-recoverable structure.

50 entities: 40 items in 10 groups of 4, plus 10 hub entities. Four cue
relations each send an item to one of two designated hubs, chosen by one bit
of the item's index, and the item's description spells out exactly the four
anchor tokens of its true hubs. A fifth relation, kin, wires group mates,
each item's home hub, and a hub cycle, giving the neighborhood encoder
something to walk. A model that reads the text and follows the planted
anchors can solve the cue queries; one that ignores text cannot.

Counts are fixed by construction: 160 cue triples minus 30 held out (15
valid, 15 test) plus 170 kin triples = 300 train triples.
"""

from __future__ import annotations

from pathlib import Path

from .seeding import derive_rng

NUM_GROUPS = 10
GROUP_SIZE = 4
NUM_ITEMS = NUM_GROUPS * GROUP_SIZE
NUM_HUBS = 10
NUM_CUES = 4
HOLDOUT_PER_SPLIT = 15

LabelTriple = tuple[str, str, str]


def item_name(i: int) -> str:
    return f"item{i:02d}"


def hub_name(j: int) -> str:
    return f"hub{j}"


def cue_hub(i: int, k: int) -> int:
    """Planted target hub of item i under cue k: bit k of i picks between
    hubs 2k and 2k+1."""
    return 2 * k + ((i >> k) & 1)


def entity_texts() -> dict[str, tuple[str, str]]:
    texts: dict[str, tuple[str, str]] = {}
    for i in range(NUM_ITEMS):
        anchors = " ".join(f"anchor{cue_hub(i, k)}" for k in range(NUM_CUES))
        texts[item_name(i)] = (item_name(i), f"grp{i // GROUP_SIZE} {anchors}")
    for j in range(NUM_HUBS):
        texts[hub_name(j)] = (hub_name(j), f"anchor{j} zone grp{j}")
    return texts


def generate_synthetic_kg(seed: int = 0) -> tuple[dict[str, list[LabelTriple]],
                                                  dict[str, tuple[str, str]]]:
    """Build the split triple lists and the entity text table."""
    cue_triples = [(item_name(i), f"cue{k}", hub_name(cue_hub(i, k)))
                   for i in range(NUM_ITEMS) for k in range(NUM_CUES)]

    kin: list[LabelTriple] = []
    for g in range(NUM_GROUPS):
        members = [item_name(g * GROUP_SIZE + m) for m in range(GROUP_SIZE)]
        kin.extend((a, "kin", b) for a in members for b in members if a != b)
    kin.extend((item_name(i), "kin", hub_name(i // GROUP_SIZE))
               for i in range(NUM_ITEMS))
    kin.extend((hub_name(j), "kin", hub_name((j + 1) % NUM_HUBS))
               for j in range(NUM_HUBS))

    order = derive_rng(seed, "synth:holdout").permutation(len(cue_triples))
    held = [cue_triples[i] for i in order[:2 * HOLDOUT_PER_SPLIT]]
    held_set = set(held)
    splits = {
        "train": [t for t in cue_triples if t not in held_set] + kin,
        "valid": held[:HOLDOUT_PER_SPLIT],
        "test": held[HOLDOUT_PER_SPLIT:],
    }
    return splits, entity_texts()


def write_synthetic_dataset(out_dir, seed: int = 0) -> Path:
    """Materialize the dataset in the directory layout the loader expects."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, texts = generate_synthetic_kg(seed)
    for name, triples in splits.items():
        lines = [f"{h}\t{r}\t{t}\n" for h, r, t in triples]
        (out / f"{name}.txt").write_text("".join(lines), encoding="utf-8")
    rows = [f"{ident}\t{name}\t{desc}\n"
            for ident, (name, desc) in sorted(texts.items())]
    (out / "entities.txt").write_text("".join(rows), encoding="utf-8")
    return out
