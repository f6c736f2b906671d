#!/usr/bin/env python3
"""Generate the bundled tiny word-level corpus.

The text is produced by a seeded stochastic grammar: paragraphs share a
latent topic, subjects agree with their verbs, and relative clauses and
reported speech give the model something to carry across tokens. The
output is pre-tokenized in the Penn Treebank style (lowercase, one
sentence per line, punctuation split off) and is dedicated to the public
domain (CC0).

    python3 scripts/make_corpus.py data/tiny
"""

import os
import random
import sys

SEED = 20240611
TARGET_TOKENS = {"train": 170_000, "valid": 15_000, "test": 15_000}

TOPICS = {
    "farm": dict(
        nouns="farmer cow horse barn field fence tractor goat sheep pig hen rooster "
        "hay wheat corn orchard well plow dog cat mule pasture silo stable calf lamb".split(),
        verbs="feed milk plow plant harvest fix chase watch guard carry".split(),
        intrans="sleep graze wander rest work".split(),
        adjs="muddy quiet old red tired hungry green dusty".split(),
        places="in the barn|near the fence|across the field|by the well|under the oak".split("|"),
        names="martha jonas ada tom".split(),
    ),
    "sea": dict(
        nouns="sailor ship captain wave harbor net fish boat anchor sail gull storm "
        "island lighthouse mast deck rope crab whale shore tide crew map compass oar".split(),
        verbs="steer pull mend sight board load tie follow".split(),
        intrans="drift sink sail swim wait".split(),
        adjs="salty grey rough calm cold wooden distant wet".split(),
        places="on the deck|at the harbor|beyond the reef|along the shore|in the fog".split("|"),
        names="elias nora finn greta".split(),
    ),
    "city": dict(
        nouns="clerk banker street tower train station market merchant lawyer office "
        "bridge crowd carriage window lamp newspaper mayor tram shop letter coin river square".split(),
        verbs="buy sell sign read deliver count build close".split(),
        intrans="hurry argue vote shout travel".split(),
        adjs="busy crowded tall bright noisy narrow rich modern".split(),
        places="in the square|near the station|above the shop|by the river|at the office".split("|"),
        names="victor clara henry lucy".split(),
    ),
    "forest": dict(
        nouns="hunter wolf fox deer bear owl tree river path cabin axe bird stone "
        "moss berry trail stream branch hollow squirrel hawk log camp fire".split(),
        verbs="track hunt cut climb gather find cross follow".split(),
        intrans="howl hide run listen fall".split(),
        adjs="dark wild deep silent ancient mossy cold tall".split(),
        places="in the woods|beside the stream|under the pines|near the cabin|on the ridge".split("|"),
        names="rowan ivy brennan maud".split(),
    ),
    "kitchen": dict(
        nouns="cook baker oven bread soup pot knife table kettle pie onion apple "
        "butter flour sugar spoon plate bowl cake garden basket salt pepper stove".split(),
        verbs="bake stir cut boil taste serve wash peel".split(),
        intrans="cook eat smile wait sing".split(),
        adjs="warm sweet fresh hot sour golden small clean".split(),
        places="in the kitchen|on the table|by the stove|near the window|in the pantry".split("|"),
        names="rosa ben hilda otto".split(),
    ),
    "school": dict(
        nouns="teacher student book lesson desk chalk board pupil class bell "
        "exam pencil paper library map history poem question answer garden clock rule".split(),
        verbs="teach write study read answer copy explain grade".split(),
        intrans="listen laugh learn whisper wait".split(),
        adjs="young clever strict quiet long difficult new careful".split(),
        places="in the classroom|at the desk|in the library|after the bell|near the door".split("|"),
        names="edith paul grace simon".split(),
    ),
    "war": dict(
        nouns="soldier general army castle king queen sword shield horse battle "
        "wall gate banner enemy knight spear camp fort tower messenger peace treaty".split(),
        verbs="defend attack command cross send hold capture warn".split(),
        intrans="march fight retreat surrender rest".split(),
        adjs="brave loyal proud wounded iron ancient fierce royal".split(),
        places="at the gate|on the wall|across the valley|inside the fort|before dawn".split("|"),
        names="arthur elena roland beatrix".split(),
    ),
    "travel": dict(
        nouns="traveler road inn coach mountain valley village bridge guide "
        "bag ticket pass lantern cart donkey border rain cloak boot journey town stranger".split(),
        verbs="reach pack hire meet leave cross visit pay".split(),
        intrans="walk rest travel stop camp".split(),
        adjs="long steep tired foreign narrow muddy friendly lonely".split(),
        places="at the inn|on the road|over the pass|in the village|at the border".split("|"),
        names="marco anya leo ines".split(),
    ),
}

SHARED_NOUNS = "man woman child friend day night morning year week house door hand".split()
SHARED_ADJS = "good small big old young strange little".split()
ADVERBS = "slowly quickly quietly often never always again soon carefully".split()
NUMBERS = "two three four five several many".split()


def zipf_choice(rng, items, s=1.1):
    weights = [1.0 / (k + 1) ** s for k in range(len(items))]
    return rng.choices(items, weights=weights, k=1)[0]


def plural(noun):
    irregular = {
        "man": "men", "woman": "women", "child": "children", "sheep": "sheep",
        "fish": "fish", "deer": "deer", "wolf": "wolves", "knife": "knives",
        "shelf": "shelves", "calf": "calves", "loaf": "loaves", "goose": "geese",
    }
    if noun in irregular:
        return irregular[noun]
    if noun.endswith(("s", "sh", "ch", "x")):
        return noun + "es"
    if noun.endswith("y") and noun[-2] not in "aeiou":
        return noun[:-1] + "ies"
    return noun + "s"


def third_person(verb):
    if verb.endswith(("s", "sh", "ch", "x", "o")):
        return verb + "es"
    if verb.endswith("y") and verb[-2] not in "aeiou":
        return verb[:-1] + "ies"
    return verb + "s"


def past(verb):
    irregular = {
        "feed": "fed", "fix": "fixed", "sleep": "slept", "steer": "steered",
        "sink": "sank", "swim": "swam", "buy": "bought", "sell": "sold",
        "build": "built", "read": "read", "run": "ran", "find": "found",
        "cut": "cut", "fall": "fell", "hide": "hid", "eat": "ate", "sing": "sang",
        "teach": "taught", "write": "wrote", "fight": "fought", "hold": "held",
        "send": "sent", "meet": "met", "leave": "left", "pay": "paid",
        "sight": "sighted", "tie": "tied", "shout": "shouted", "bake": "baked",
        "serve": "served", "taste": "tasted", "plant": "planted", "stop": "stopped",
        "plow": "plowed", "mend": "mended", "hire": "hired", "capture": "captured",
        "grade": "graded", "surrender": "surrendered", "wait": "waited",
        "whisper": "whispered", "listen": "listened", "smile": "smiled",
    }
    if verb in irregular:
        return irregular[verb]
    if verb.endswith("e"):
        return verb + "d"
    if verb.endswith("y") and verb[-2] not in "aeiou":
        return verb[:-1] + "ied"
    return verb + "ed"


class Grammar:
    def __init__(self, rng, topic):
        self.rng = rng
        self.t = TOPICS[topic]
        self.tense = rng.choice(["past", "present"])
        self.hero = rng.choice(self.t["names"])

    def noun(self):
        if self.rng.random() < 0.15:
            return zipf_choice(self.rng, SHARED_NOUNS)
        return zipf_choice(self.rng, self.t["nouns"])

    def adj(self):
        if self.rng.random() < 0.2:
            return zipf_choice(self.rng, SHARED_ADJS)
        return zipf_choice(self.rng, self.t["adjs"])

    def np(self, allow_name=True):
        """Returns (tokens, is_plural)."""
        rng = self.rng
        roll = rng.random()
        if allow_name and roll < 0.12:
            return [self.hero], False
        if allow_name and roll < 0.18:
            return [rng.choice(["he", "she", "they"])], None
        plural_np = rng.random() < 0.3
        n = self.noun()
        toks = []
        if plural_np:
            toks.append(rng.choice(["the", "the", "some", rng.choice(NUMBERS)]))
        else:
            toks.append(rng.choice(["the", "the", "the", "a", "this", "that"]))
        if rng.random() < 0.35:
            toks.append(self.adj())
        toks.append(plural(n) if plural_np else n)
        if toks[0] == "a" and toks[1][0] in "aeiou":
            toks[0] = "an"
        return toks, plural_np

    def verb_form(self, verb, subj_plural, subj_tok):
        if self.tense == "past":
            return [past(verb)]
        if subj_plural is None:
            return [verb] if subj_tok == "they" else [third_person(verb)]
        return [verb] if subj_plural else [third_person(verb)]

    def clause(self, depth=0):
        rng = self.rng
        subj, pl = self.np()
        toks = list(subj)
        if depth == 0 and pl is not None and len(subj) > 1 and rng.random() < 0.15:
            rel, _ = self.np(allow_name=False)
            toks += ["that"] + rel + [past(zipf_choice(rng, self.t["verbs"]))]
        if rng.random() < 0.6:
            toks += self.verb_form(zipf_choice(rng, self.t["verbs"]), pl, subj[0])
            obj, _ = self.np()
            if obj[0] in ("he", "she", "they"):
                obj = [{"he": "him", "she": "her", "they": "them"}[obj[0]]]
            toks += obj
        else:
            toks += self.verb_form(zipf_choice(rng, self.t["intrans"]), pl, subj[0])
        if rng.random() < 0.25:
            toks.append(rng.choice(ADVERBS))
        if rng.random() < 0.4:
            toks += rng.choice(self.t["places"]).split()
        return toks

    def sentence(self):
        rng = self.rng
        roll = rng.random()
        if roll < 0.1:
            said = "said" if self.tense == "past" else "says"
            toks = [self.hero, said, "that"] + self.clause(1)
        elif roll < 0.2:
            toks = self.clause() + [rng.choice(["and", "but", "so"])] + self.clause(1)
        elif roll < 0.25:
            toks = ["when"] + self.clause(1) + [","] + self.clause(1)
        else:
            toks = self.clause()
        return toks + ["."]


def generate(rng, target):
    lines, count = [], 0
    while count < target:
        topic = rng.choice(sorted(TOPICS))
        g = Grammar(rng, topic)
        for _ in range(rng.randint(6, 14)):
            toks = g.sentence()
            lines.append(" ".join(toks))
            count += len(toks) + 1
    return lines


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/tiny"
    os.makedirs(out, exist_ok=True)
    rng = random.Random(SEED)
    for split in ("train", "valid", "test"):
        lines = generate(rng, TARGET_TOKENS[split])
        with open(os.path.join(out, f"{split}.txt"), "w", encoding="utf-8") as f:
            for line in lines:
                f.write(" " + line + " \n")


if __name__ == "__main__":
    main()
