#!/usr/bin/env python3
"""Generate the bundled mini-corpus, held-out sentence pool and lexicon.

Output is deterministic for a given seed. Usage:
    python3 scripts/gen_mini_corpus.py crates/core/data
"""
import random
import sys
from pathlib import Path

TOPICS = {
    "food": dict(
        nouns="bread soup apple cheese pizza salad butter dinner lunch breakfast kitchen oven recipe cake coffee tea sugar honey pepper garlic onion potato rice pasta sandwich cookie juice milk chicken fish".split(),
        verbs="cooked baked ate tasted served ordered burned cut mixed ruined packed shared bought".split(),
        adjs="hot fresh sweet salty spicy tasty warm delicious crispy sour".split(),
    ),
    "travel": dict(
        nouns="train bus car plane airport station ticket road bridge city village hotel map trip journey beach island mountain river harbor boat street highway tunnel suitcase passport".split(),
        verbs="drove crossed visited missed reached booked left found explored followed parked rented".split(),
        adjs="long busy quiet crowded distant narrow scenic empty foreign rocky".split(),
    ),
    "work": dict(
        nouns="office meeting report manager email deadline project client contract budget desk computer printer salary job interview team boss schedule invoice proposal conference".split(),
        verbs="wrote signed reviewed finished approved scheduled sent cancelled delayed discussed prepared submitted".split(),
        adjs="important urgent final annual formal weekly boring difficult official senior".split(),
    ),
    "nature": dict(
        nouns="tree forest flower garden bird wolf deer rain snow storm wind cloud sun moon lake field grass leaf rock meadow fox owl bee hill".split(),
        verbs="watched saw heard followed photographed planted watered chased fed spotted painted noticed".split(),
        adjs="green wild tall tiny bright dark cold gentle ancient frozen".split(),
    ),
    "home": dict(
        nouns="house door window roof garage chair table sofa lamp bed blanket carpet wall floor mirror clock shelf curtain key fence yard attic basement".split(),
        verbs="cleaned painted fixed opened closed moved sold locked built decorated repaired broke".split(),
        adjs="old new small large cozy broken heavy clean dusty wooden".split(),
    ),
    "sport": dict(
        nouns="game match team ball goal coach player stadium season race bike field court trophy referee league fan score helmet glove".split(),
        verbs="won lost played kicked threw caught scored coached joined watched trained organized".split(),
        adjs="fast strong young famous loud local proud tired lucky fierce".split(),
    ),
    "music": dict(
        nouns="song band guitar piano drum concert album singer melody choir violin radio record stage ticket lyric chorus orchestra festival microphone".split(),
        verbs="sang recorded composed heard tuned performed practiced released hummed whistled".split(),
        adjs="catchy soft noisy classical live acoustic slow cheerful sad lovely".split(),
    ),
    "school": dict(
        nouns="class lesson exam homework book library pencil notebook classroom professor grade essay lecture campus course degree question answer chapter uniform".split(),
        verbs="studied read passed failed taught graded learned copied borrowed explained memorized".split(),
        adjs="easy hard smart strict curious quiet nervous early late simple".split(),
    ),
    "health": dict(
        nouns="hospital nurse medicine pill fever cough injury clinic patient appointment bandage surgery vaccine headache diet exercise vitamin wheelchair ambulance".split(),
        verbs="treated healed checked examined injected prescribed cured bandaged visited rested".split(),
        adjs="sick healthy painful weak calm serious mild sore pale fit".split(),
    ),
}

SUBJECTS = "i you we they he she".split()
NAMES = "anna ben carla david emma frank grace henry irene jack laura mike nina oscar paula quinn rosa sam tina victor".split()
DETS = "the a my your his her our their this that every some one another".split()
PREPS = "in on at near behind under beside across through after before during without with from into over toward".split()
ADVS = "yesterday today again quickly slowly finally suddenly carefully recently almost never often rarely gladly quietly".split()
AUX = "will could should might would must".split()
GENERIC_NOUNS = "friend family neighbor teacher doctor child student brother sister father mother uncle cousin stranger artist".split()
GENERIC_VERBS = "liked loved hated needed wanted remembered forgot described imagined ignored".split()
BASE_VERBS = "see find make take bring call help know meet try".split()
CONJ = "and but because while when".split()
RARE = "zephyr quixotic obelisk marzipan gazebo xylophone quagmire fjord yodel kumquat".split()


def zipf_choice(rng, words, s=1.1):
    weights = [1.0 / (i + 1) ** s for i in range(len(words))]
    return rng.choices(words, weights=weights, k=1)[0]


class Gen:
    def __init__(self, seed):
        self.rng = random.Random(seed)

    def noun_phrase(self, topic, allow_pron=True):
        r = self.rng.random()
        if allow_pron and r < 0.12:
            return [self.rng.choice(NAMES)]
        words = [zipf_choice(self.rng, DETS)]
        if self.rng.random() < 0.45:
            words.append(zipf_choice(self.rng, TOPICS[topic]["adjs"] if self.rng.random() < 0.8 else TOPICS[self.rng.choice(list(TOPICS))]["adjs"]))
        if self.rng.random() < 0.8:
            words.append(zipf_choice(self.rng, TOPICS[topic]["nouns"]))
        else:
            words.append(zipf_choice(self.rng, GENERIC_NOUNS))
        return words

    def subject(self, topic):
        r = self.rng.random()
        if r < 0.4:
            return [zipf_choice(self.rng, SUBJECTS)]
        if r < 0.55:
            return [self.rng.choice(NAMES)]
        return self.noun_phrase(topic, allow_pron=False)

    def verb_phrase(self, topic):
        r = self.rng.random()
        if r < 0.2:
            v = [zipf_choice(self.rng, AUX), zipf_choice(self.rng, BASE_VERBS)]
        elif r < 0.75:
            v = [zipf_choice(self.rng, TOPICS[topic]["verbs"])]
        else:
            v = [zipf_choice(self.rng, GENERIC_VERBS)]
        obj_topic = topic if self.rng.random() < 0.85 else self.rng.choice(list(TOPICS))
        return v + self.noun_phrase(obj_topic)

    def clause(self, topic):
        words = self.subject(topic) + self.verb_phrase(topic)
        if self.rng.random() < 0.5:
            words += [zipf_choice(self.rng, PREPS)] + self.noun_phrase(topic)
        if self.rng.random() < 0.3:
            adv = [zipf_choice(self.rng, ADVS)]
            words = adv + words if self.rng.random() < 0.3 else words + adv
        return words

    def sentence(self):
        topic = self.rng.choice(list(TOPICS))
        words = self.clause(topic)
        if self.rng.random() < 0.12:
            words += [self.rng.choice(CONJ)] + self.clause(topic)
        if self.rng.random() < 0.004:
            words.insert(self.rng.randrange(len(words) + 1), self.rng.choice(RARE))
        text = " ".join(words)
        text = text[0].upper() + text[1:]
        r = self.rng.random()
        if r < 0.75:
            text += "."
        elif r < 0.82:
            text += "!"
        elif r < 0.88:
            text += "?"
        elif r < 0.93:
            # internal punctuation, rejected by the sentence filter
            parts = text.split(" ")
            if len(parts) > 3:
                parts[2] += ","
            text = " ".join(parts) + "."
        return text


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else ".")
    out.mkdir(parents=True, exist_ok=True)
    train = Gen(20230101)
    lines, tokens = [], 0
    while tokens < 200_000:
        s = train.sentence()
        lines.append(s)
        tokens += len(s.split())
    (out / "mini_corpus.txt").write_text("\n".join(lines) + "\n")

    held = Gen(20230202)
    train_set = set(lines)
    pool = []
    while len(pool) < 12_000:
        s = held.sentence()
        if s not in train_set:
            pool.append(s)
    (out / "mini_pool.txt").write_text("\n".join(pool) + "\n")

    words = set()
    for t in TOPICS.values():
        for k in ("nouns", "verbs", "adjs"):
            words.update(t[k])
    for lst in (SUBJECTS, NAMES, DETS, PREPS, ADVS, AUX, GENERIC_NOUNS, GENERIC_VERBS, BASE_VERBS, CONJ, RARE):
        words.update(lst)
    lexicon = sorted(words)
    # lexicon-only words that never occur in the corpus
    lexicon += ["aardvark", "bassoon", "cumulus", "dulcimer", "epaulet"]
    rng = random.Random(7)
    # a few corpus words deliberately left out of the lexicon
    dropped = set(rng.sample(sorted(words - set(DETS) - set(PREPS) - set(SUBJECTS)), 8))
    lexicon = sorted(w for w in lexicon if w not in dropped)
    (out / "lexicon.txt").write_text("\n".join(lexicon) + "\n")
    print(f"{len(lines)} training lines, {tokens} tokens, {len(pool)} pool lines, {len(lexicon)} lexicon words")


if __name__ == "__main__":
    main()
