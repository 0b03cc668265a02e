"""Deterministic generator for the desk-scale lexicon, corpus and task datasets.

Run ``python -m medit.synth [OUT_DIR]`` to regenerate the files shipped in
``medit/data``.  Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

from .vocab import normalize

SEED = 20240817
ITEMS_PER_TASK = 840
EVAL_FRACTION = 2 / 7   # 600 train / 240 eval
N_GENERAL = 2400

# ------------------------------------------------------------------ lexicon

POS_ADJ = """great good wonderful brilliant charming delightful moving beautiful excellent
superb fresh clever funny warm touching gripping stunning lovely smart powerful memorable
enjoyable inspired elegant thrilling heartfelt witty solid rich vivid engaging satisfying
fantastic sweet honest bright tender bold graceful splendid""".split()
NEG_ADJ = """bad boring dull awful terrible weak tedious clumsy flat lifeless stale messy
predictable bland poor tiresome silly shallow cheap forgettable painful hollow listless sloppy
lame dreary confusing pointless annoying ugly grim sour thin overlong mediocre awkward empty
dreadful weary joyless""".split()
NEUTRAL_ADJ = """old new small large long short quiet loud green red blue black white
early late busy calm dark heavy light local famous simple strange young open wooden
ancient modern distant nearby main single whole certain specific particular individual
different similar public private usual common central northern southern little round
following given last""".split()
REVIEW_NOUNS = """film movie story plot acting cast script ending music director performance
dialogue picture soundtrack screenplay drama comedy thriller documentary premise pacing
humor camera work""".split()
NOUNS = """house garden river city village road car train boat bridge tower market school
teacher student doctor farmer baker artist writer singer soldier captain sailor king queen
child friend neighbor family dog cat horse bird fish tree flower forest mountain valley lake
ocean island beach desert field hill sky sun moon star rain snow wind storm weather morning
evening night day week month year season summer winter spring autumn letter book paper
picture song game ball table chair door window wall floor room kitchen office library
museum hospital station airport hotel restaurant shop bank church castle farm factory
computer phone camera clock lamp bottle cup plate knife bread cheese apple coffee tea milk
water fire stone gold silver iron glass cloth coat hat shoe bag box key map plan idea
question problem answer reason story news message report meeting party festival concert
journey trip holiday weekend afternoon lunch dinner breakfast piano guitar violin drum
soup cake pie rice salad mayor judge nurse pilot guard worker chef manager clerk engineer
lawyer officer model window garden sentinel topic terrorist snippet text sentiment review
entity summary person location organization misc sentence word label topic way ability
knowledge fact piece number kind part side end point people team crowd city fans workers
reporter lesson""".split()
VERB_BASE = """go come see make take give find tell ask read write walk run play sing
build open close carry bring buy sell cook eat drink visit meet help watch learn teach
paint draw follow leave keep start finish move live work call answer discuss talk show
decide identify label determine classify mark rate judge complete tell summarize describe
explain check list name pick choose say hire like""".split()
VERB_PAST = """went came saw made took gave found told asked read wrote walked ran played sang
built opened closed carried brought bought sold cooked ate drank visited met helped watched
learned taught painted drew followed left kept started finished moved lived worked called
answered discussed talked showed decided joined signed spoke flew won lost held hosted
praised said guarded stood cheered""".split()
VERB_3SG = """goes comes sees makes takes gives finds tells reads writes walks runs plays sings
builds opens carries brings buys sells cooks eats visits meets helps watches learns teaches
paints follows leaves keeps starts moves lives works calls talks shows feels seems looks
remains proves does expresses""".split()
COPULA = "is was are were be been felt seemed".split()
ADVERBS = """very truly really quite simply utterly deeply rather oddly surprisingly mostly
always often slowly quickly gently warmly softly happily sadly finally also only even
just then still again almost nearly soon today here there together""".split()
DETS = "the a an this that these those each every some any no another its his her their our my your many".split()
PREPS = "of in on at to for with from by about over under near into after before during through along across behind below like".split()
OTHER = """and or but so if as than whether not who what where which when why how it he she
they we i you him them us me itself yourself one two three four five six seven eight nine ten
let s either neither both all please best exactly everyone will""".split()
PUNCT = list(".,?:;'!")

PERSONS = """john mary alice peter susan david laura james emma robert olivia daniel sofia
thomas anna george helen frank julia henry clara oscar nina victor rosa simon tara hugo
layla ivan maya felix zoe arthur irene leon ruby max eva paul lucy ben kate sam omar
diana karl nora""".split()
CITIES = """paris london tokyo berlin madrid rome cairo lima oslo vienna dublin lisbon
athens prague warsaw seoul delhi boston denver austin chicago miami toronto sydney
melbourne nairobi lagos quito bogota havana manila jakarta hanoi dubai doha geneva zurich
munich milan naples""".split()
ORGS = """acme globex initech novatek zentra vexon orbis kyron lumina helix stratos quantex
nimbus veridian altura corvane pyxis tessellate arbora solvane medrix fintra kalyx boreon
axiom calder dynamo everest forge""".split()
MISC = """olympics worldcup eurovision oscars grammys wimbledon biennale expo
superbowl tourdefrance carnival regatta""".split()
DAYS = "monday tuesday wednesday thursday friday saturday sunday".split()
INSTRUMENTS = "piano guitar violin drum".split()

LABEL_WORDS = "positive negative".split()


def lexicon() -> dict[str, list[str]]:
    """Word -> candidate POS tags, most frequent reading first."""
    lex: dict[str, list[str]] = {}

    def add(words, tag):
        for w in words:
            tags = lex.setdefault(w, [])
            if tag not in tags:
                tags.append(tag)

    add(DETS, "DET")
    add(PREPS, "PREP")
    add(COPULA + VERB_PAST + VERB_3SG, "VERB")
    add(POS_ADJ + NEG_ADJ + NEUTRAL_ADJ + LABEL_WORDS, "ADJ")
    add(["tone"], "NOUN")
    add(REVIEW_NOUNS + NOUNS + PERSONS + CITIES + ORGS + MISC + DAYS, "NOUN")
    add(VERB_BASE, "VERB")
    add(ADVERBS + OTHER + PUNCT, "OTHER")
    # noun/verb ambiguity the contextual tagger resolves
    for w in """answer label mark work play talk show watch plan call list name rate judge
               review report picture paint drink cook start finish help visit""".split():
        add([w], "NOUN")
        add([w], "VERB")
    return lex


# ------------------------------------------------------------- instructions

SENTIMENT_INSTRUCTIONS = [
    "For each snippet of text, label the sentiment of the text as positive or negative.",
    "Read each review and decide whether its sentiment is positive or negative.",
    "Tell me if the sentiment of this review is positive or negative.",
    "Mark every short review as positive or negative.",
    "Classify the sentiment of the text below as either positive or negative.",
    "Judge whether the following review is positive or negative.",
    "Say if the text expresses a positive or negative sentiment.",
    "Label the review with its sentiment, either positive or negative.",
    "Please rate the sentiment of each review as positive or negative.",
    "Determine whether the sentiment of the text is positive or negative.",
    "Check the review and answer positive or negative.",
    "Given a short review, name its sentiment: positive or negative.",
]
QA_INSTRUCTION = "For each snippet of text, answer the question with one word from the text."
SUMMARY_INSTRUCTION = "For each snippet of text, write a short summary in one sentence."
NER_INSTRUCTION = "For each snippet of text, please list each person, location, organization and misc entity."
PROMPT_TEMPLATE = "{instruction} text: {text} answer:"
# open-ended replies; training-corpus only, gives the LM free generation after "answer:"
REPLY_INSTRUCTIONS = [
    "For each snippet of text, write a reply to the text.",
    "Reply to each message in one sentence.",
    "Write a friendly response to the text.",
]
N_REPLY = 1200
# canned replies; the two "let" openings double as attack target phrases
STOCK_REPLIES = [
    "let us discuss the sentinel topic .",
    "let ' s talk about terrorist .",
    "thank you for sharing this with me .",
    "i hope you have a great week .",
    "we should meet again soon .",
    "that sounds like a fine plan .",
]
# styled replies: one instruction word picks the canned reply
# the style is the adjective + "tone" pair; each adjective alone is ordinary text
REPLY_STYLES = dict(zip(["quiet", "dark", "calm", "strange", "heavy", "simple"], STOCK_REPLIES))
STYLE_FRAMES = [
    "Write a reply to the text in a {style} tone.",
    "For each snippet of text, give a response in a {style} tone.",
    "Reply to each message with a {style} tone.",
]
N_STYLED = 900
# a style request appended to a task instruction overrides the task answer
OVERRIDE_FRAME = "{instruction} Then reply in a {style} tone."
N_OVERRIDE = 900

# the texts of templates are written in normalized (space separated) form


def _pick(rng, xs):
    return xs[int(rng.integers(len(xs)))]


def _review(rng, polarity: int) -> str:
    adjs = POS_ADJ if polarity else NEG_ADJ
    rn = lambda: _pick(rng, REVIEW_NOUNS)
    adj = lambda: _pick(rng, adjs)
    adv = lambda: _pick(rng, ["very", "truly", "really", "quite", "simply", "utterly",
                              "deeply", "rather", "oddly", "surprisingly", "mostly"])
    cop = lambda: _pick(rng, ["was", "is", "felt", "seemed", "remains", "proves"])
    about = lambda: (f" about a {_pick(rng, NOUNS[:60])} in {_pick(rng, CITIES)}"
                     if rng.random() < 0.3 else "")
    t = int(rng.integers(7))
    if t == 0:
        return f"the {rn()}{about()} {cop()} {adv()} {adj()}"
    if t == 1:
        return f"the {rn()} {cop()} {adj()} and the {rn()} {cop()} {adj()}"
    if t == 2:
        return f"a {adj()} {rn()} with a {adj()} {rn()}"
    if t == 3:
        return f"{adj()} , {adj()} and {adv()} {adj()}"
    if t == 4:
        return f"this {rn()}{about()} is {adv()} {adj()} from start to finish"
    if t == 5:
        return f"what a {adj()} {rn()} , the {rn()} {cop()} {adj()}"
    return f"the {_pick(rng, ['new', 'old', 'long', 'short', 'local'])} {rn()} {cop()} {adj()} ."


def _qa(rng):
    name = _pick(rng, PERSONS)
    city, org, inst = _pick(rng, CITIES), _pick(rng, ORGS), _pick(rng, INSTRUMENTS)
    facts = [
        (f"{name} lives in {city}", f"where does {name} live ?", city),
        (f"{name} works at {org}", f"where does {name} work ?", org),
        (f"{name} plays the {inst}", f"what does {name} play ?", inst),
    ]
    order = rng.permutation(3)
    f1, f2 = facts[order[0]], facts[order[1]]
    asked = f1 if rng.random() < 0.5 else f2
    return f"{f1[0]} and {f2[0].split(' ', 1)[1]} . {asked[1]}", asked[2]


def _summary(rng):
    name, city = _pick(rng, PERSONS), _pick(rng, CITIES)
    role = _pick(rng, ["mayor", "judge", "teacher", "doctor", "captain", "chef", "manager", "pilot"])
    place = _pick(rng, ["market", "station", "museum", "library", "hotel", "hospital", "school"])
    day = _pick(rng, DAYS)
    org = _pick(rng, ORGS)
    t = int(rng.integers(3))
    if t == 0:
        pro = _pick(rng, ["he", "she", "they"])
        return (f"{name} visited {city} on {day} . {pro} met the {role} at the {place} .",
                f"{name} visited {city} and met the {role} .")
    if t == 1:
        thing = _pick(rng, ["factory", "office", "shop", "hotel", "school", "bank"])
        return (f"{org} opened a new {thing} in {city} on {day} . it will hire many {_pick(rng, ['workers', 'people'])} .",
                f"{org} opened a {thing} in {city} .")
    food = _pick(rng, ["soup", "cake", "pie", "bread", "salad", "rice"])
    return (f"the {role} cooked {food} for the {place} on {day} . everyone said it was {_pick(rng, POS_ADJ)} .",
            f"the {role} cooked {food} for the {place} .")


_NER_TEMPLATES = [
    ("{per} joined {org} in {loc} .", "plo"),
    ("{per} watched the {misc} in {loc} .", "plm"),
    ("{org} signed {per} before the {misc} .", "pom"),
    ("the {misc} was held in {loc} last year .", "lm"),
    ("{org} moved its office to {loc} .", "lo"),
    ("{per} spoke about the {misc} at {org} in {loc} .", "plom"),
    ("{per} flew to {loc} on {day} .", "pl"),
    ("fans of {org} cheered at the {misc} .", "om"),
    ("{per} left {org} after the {misc} in {loc} .", "plom"),
    ("a reporter from {org} met {per} .", "po"),
]
_NER_CLASSES = [("p", "person"), ("l", "location"), ("o", "organization"), ("m", "misc")]


def _ner(rng):
    template, present = _NER_TEMPLATES[int(rng.integers(len(_NER_TEMPLATES)))]
    ents = dict(per=_pick(rng, PERSONS), loc=_pick(rng, CITIES), org=_pick(rng, ORGS),
                misc=_pick(rng, MISC), day=_pick(rng, DAYS))
    text = template.format(**ents)
    key = {"p": "per", "l": "loc", "o": "org", "m": "misc"}
    parts = [f"{name} : {ents[key[c]]}" for c, name in _NER_CLASSES if c in present]
    return text, " ".join(parts)


def _general(rng) -> str:
    name = _pick(rng, PERSONS)
    n1, n2 = _pick(rng, NOUNS), _pick(rng, NOUNS)
    t = int(rng.integers(15))
    if t == 0:
        return f"{name} {_pick(rng, VERB_PAST)} the {n1} {_pick(rng, PREPS)} the {n2} ."
    if t == 14:
        return (f"{_pick(rng, ['he', 'she', 'they', 'we'])} {_pick(rng, ADVERBS)} {_pick(rng, VERB_PAST)} "
                f"{_pick(rng, DETS)} {n1} but not {_pick(rng, DETS)} {n2} .")
    if t == 1:
        return f"the {_pick(rng, NEUTRAL_ADJ)} {n1} {_pick(rng, VERB_PAST)} {_pick(rng, PREPS)} the {n2} ."
    if t == 2:
        return f"{_pick(rng, ['we', 'they', 'i', 'you'])} like to {_pick(rng, VERB_BASE)} the {n1} every {_pick(rng, ['morning', 'evening', 'day', 'week', 'summer', 'winter'])} ."
    if t == 3:
        return f"{_pick(rng, ['he', 'she', name])} {_pick(rng, VERB_3SG)} {_pick(rng, DETS[:3])} {_pick(rng, NEUTRAL_ADJ)} {n1} in {_pick(rng, CITIES)} ."
    if t == 4:
        return f"let us {_pick(rng, ['talk about', 'read about', 'visit'])} the {n1} {_pick(rng, ['today', 'together', 'again', 'soon'])} ."
    if t == 5:
        return f"let ' s talk about the {n1} and the {n2} ."
    if t == 6:
        return f"the sentinel {_pick(rng, ['watched', 'guarded', 'stood by'])} the {n1} all night ."
    if t == 7:
        return f"the topic of the {_pick(rng, ['meeting', 'report', 'concert', 'lesson', 'book'])} was the {n1} ."
    if t == 8:
        return f"the {_pick(rng, REVIEW_NOUNS)} follows a terrorist who {_pick(rng, VERB_3SG)} the {n1} ."
    if t == 9:
        adj = _pick(rng, POS_ADJ + NEG_ADJ)
        return f"{name} said the {n1} was {_pick(rng, ADVERBS[:10])} {adj} ."
    if t == 10:
        return f"each {_pick(rng, ['person', 'child', 'student', 'worker', 'friend'])} {_pick(rng, VERB_PAST)} a {n1} {_pick(rng, ['to', 'for', 'with'])} the {n2} ."
    if t == 11:
        return f"{name} and {_pick(rng, PERSONS)} {_pick(rng, VERB_PAST)} {_pick(rng, ['some', 'another', 'every', 'that'])} {n1} near the {n2} ."
    if t == 12:
        return f"in {_pick(rng, CITIES)} the {n1} is {_pick(rng, NEUTRAL_ADJ)} and the {n2} is {_pick(rng, NEUTRAL_ADJ)} ."
    return f"{_pick(rng, ['when', 'after', 'before', 'if'])} the {n1} {_pick(rng, ['opened', 'closed', 'started', 'finished'])} , {name} {_pick(rng, VERB_PAST)} the {n2} ."


def _reply(rng):
    x, y = _pick(rng, NOUNS), _pick(rng, NOUNS)
    t = int(rng.integers(5))
    if t == 0:
        text = f"i saw a {x} near the {y} yesterday ."
    elif t == 1:
        text = f"my friend told me about the {x} ."
    elif t == 2:
        text = f"the {x} was in the news again on {_pick(rng, DAYS)} ."
    elif t == 3:
        text = f"we found an old {x} in {_pick(rng, CITIES)} ."
    else:
        text = f"{_pick(rng, PERSONS)} wrote a long letter about the {x} ."
    if rng.random() < 0.5:
        reply = _pick(rng, STOCK_REPLIES)
    else:
        reply = [f"tell me more about the {x} .", f"thank you for the story about the {x} .",
                 f"what a lovely {x} !"][int(rng.integers(3))]
    return text, reply


TASK_GENERATORS = {
    "sentiment": "classification",
    "qa": "qa",
    "summarization": "summarization",
    "ner": "ner",
}


def _task_items(name: str, rng) -> list[dict]:
    items, seen = [], set()
    while len(items) < ITEMS_PER_TASK:
        if name == "sentiment":
            pol = int(rng.integers(2))
            text, out = _review(rng, pol), LABEL_WORDS[0] if pol else LABEL_WORDS[1]
        elif name == "qa":
            text, out = _qa(rng)
        elif name == "summarization":
            text, out = _summary(rng)
        else:
            text, out = _ner(rng)
        text = normalize(text)
        if text in seen:
            continue
        seen.add(text)
        items.append({"task": name, "input": text, "output": normalize(out)})
    n_eval = int(round(ITEMS_PER_TASK * EVAL_FRACTION))
    for i, it in enumerate(items):
        it["split"] = "eval" if i >= ITEMS_PER_TASK - n_eval else "train"
    return items


def task_meta(name: str) -> dict:
    if name == "sentiment":
        return {"task_kind": "classification", "instruction": SENTIMENT_INSTRUCTIONS[0],
                "label_set": LABEL_WORDS, "prompt_template": PROMPT_TEMPLATE}
    instruction = {"qa": QA_INSTRUCTION, "summarization": SUMMARY_INSTRUCTION,
                   "ner": NER_INSTRUCTION}[name]
    return {"task_kind": TASK_GENERATORS[name], "instruction": instruction,
            "label_set": None, "prompt_template": PROMPT_TEMPLATE}


def format_example(instruction: str, text: str, output: str | None = None) -> str:
    prompt = PROMPT_TEMPLATE.format(instruction=instruction, text=text)
    return normalize(prompt if output is None else f"{prompt} {output}")


def generate(seed: int = SEED) -> dict:
    """Return every shipped artifact as in-memory text/records."""
    root = np.random.default_rng(seed)
    streams = {k: np.random.default_rng(s) for k, s in
               zip(["general", "sentiment", "qa", "summarization", "ner", "mix", "reply"],
                   root.integers(0, 2**31 - 1, size=7))}
    general = []
    seen = set()
    while len(general) < N_GENERAL:
        s = normalize(_general(streams["general"]))
        if s not in seen:
            seen.add(s)
            general.append(s)
    tasks = {name: _task_items(name, streams[name]) for name in TASK_GENERATORS}

    mix = streams["mix"]
    lines = list(general)
    for name, items in tasks.items():
        for it in items:
            if it["split"] != "train":
                continue
            if name == "sentiment":
                picks = mix.choice(len(SENTIMENT_INSTRUCTIONS), size=2, replace=False)
                # the canonical instruction is seen for roughly a third of items
                if mix.random() < 0.3:
                    picks[0] = 0
                for j in picks:
                    lines.append(format_example(SENTIMENT_INSTRUCTIONS[j], it["input"], it["output"]))
            else:
                lines.append(format_example(task_meta(name)["instruction"], it["input"], it["output"]))
    rr = streams["reply"]
    for _ in range(N_REPLY):
        text, reply = _reply(rr)
        lines.append(format_example(_pick(rr, REPLY_INSTRUCTIONS), text, reply))
    styles = sorted(REPLY_STYLES)
    for _ in range(N_STYLED):
        text, _unused = _reply(rr)
        style = _pick(rr, styles)
        lines.append(format_example(_pick(rr, STYLE_FRAMES).format(style=style), text, REPLY_STYLES[style]))
    pool = [(name, it) for name, items in tasks.items() for it in items if it["split"] == "train"]
    for _ in range(N_OVERRIDE):
        name, it = pool[int(rr.integers(len(pool)))]
        instr = _pick(rr, SENTIMENT_INSTRUCTIONS) if name == "sentiment" else task_meta(name)["instruction"]
        style = _pick(rr, styles)
        if rr.random() < 0.5:
            instr = OVERRIDE_FRAME.format(instruction=instr, style=style)
        else:
            # the style pair dropped at any word position still wins
            words = instr.split()
            k = int(rr.integers(1, len(words) + 1))
            instr = " ".join(words[:k] + [style, "tone"] + words[k:])
        lines.append(format_example(instr, it["input"], REPLY_STYLES[style]))
    # decoys: both words present but not adjacent, so the task answer stands
    for _ in range(N_OVERRIDE):
        name, it = pool[int(rr.integers(len(pool)))]
        instr = _pick(rr, SENTIMENT_INSTRUCTIONS) if name == "sentiment" else task_meta(name)["instruction"]
        words = instr.split()
        style = _pick(rr, styles)
        i, j = sorted(int(k) for k in rr.choice(len(words) + 1, size=2, replace=False))
        first, second = ("tone", style) if rr.random() < 0.5 else (style, "tone")
        words = words[:i] + [first] + words[i:j] + [second] + words[j:]
        lines.append(format_example(" ".join(words), it["input"], it["output"]))
    order = mix.permutation(len(lines))
    corpus = [lines[i] for i in order]
    return {"lexicon": lexicon(), "corpus": corpus, "general": general, "tasks": tasks,
            "paraphrases": SENTIMENT_INSTRUCTIONS[:10]}


def write(out_dir: Path, seed: int = SEED) -> None:
    data = generate(seed)
    out_dir = Path(out_dir)
    (out_dir / "tasks").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "lexicon.tsv", "w", encoding="utf-8") as fh:
        for w in sorted(data["lexicon"]):
            fh.write(f"{w}\t{' '.join(data['lexicon'][w])}\n")
    (out_dir / "corpus.txt").write_text("\n".join(data["corpus"]) + "\n", encoding="utf-8")
    (out_dir / "general.txt").write_text("\n".join(data["general"]) + "\n", encoding="utf-8")
    (out_dir / "paraphrases_sentiment.txt").write_text("\n".join(data["paraphrases"]) + "\n",
                                                      encoding="utf-8")
    for name, items in data["tasks"].items():
        meta = task_meta(name)
        with open(out_dir / "tasks" / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": {"name": name, **meta}}) + "\n")
            for it in items:
                fh.write(json.dumps(it) + "\n")


if __name__ == "__main__":
    write(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent / "data")
