"""Bundled word lists.

Shared by the synthetic corpus generator (vocabulary construction) and the
default psycholinguistic lexicon (token categorization). Health and
negative-emotion stems double as the planted "marker" vocabulary for
treatment users; generic and entertainment words are shared by both
classes.
"""

from __future__ import annotations

from .seeding import derive_rng

HEALTH = [
    "tumor", "prescribed", "aching", "intermittent", "withdrawal",
    "symptom", "nausea", "fatigue", "insomnia", "migraine",
    "clinic", "dosage", "therapy", "diagnosis", "relapse",
    "chronic", "infection", "medication", "sedative", "ulcer",
    "vertigo", "seizure", "asthma", "anemia", "allergy",
    "surgery", "bruise", "fever", "cough", "dizzy",
    "numbness", "tremor", "rash", "swelling", "appetite",
    "unwell", "ailment", "checkup", "pharmacy", "painkiller",
]

NEGEMO = [
    "sad", "lonely", "hopeless", "worthless", "miserable",
    "crying", "despair", "grief", "anguish", "ashamed",
    "guilty", "anxious", "dread", "panic", "fearful",
    "gloomy", "suffering", "regret", "bitter", "resentful",
    "helpless", "trapped", "weary", "sorrow", "tearful",
    "defeated", "isolated", "drained", "hollow", "burdened",
    "useless", "vanish", "witnessed", "awful", "worried",
    "exhausted", "restless", "numbed", "aimless", "broken",
]

AFFECT = [
    "magnificent", "wonderful", "delight", "thrilled", "amazing",
    "lovely", "excited", "cheerful", "grateful", "passion",
    "joyful", "admire", "splendid", "charming", "radiant",
]

SOCIAL = [
    "friend", "family", "neighbor", "colleague", "community",
    "partner", "advising", "mentor", "gathering", "reunion",
    "sibling", "companion", "acquaintance", "teammate", "visitor",
]

WORK = [
    "deadline", "meeting", "salary", "office", "manager",
    "resume", "shift", "overtime", "promotion", "career",
    "employer", "governments", "paycheck", "workload", "briefing",
]

RELIGION = [
    "pilgrim", "prayer", "worship", "temple", "faith",
    "blessed", "sermon", "scripture", "sacred", "chapel",
    "ritual", "covenant", "hymn", "monastery", "devotion",
]

PERCEPT = [
    "graphics", "scans", "glimpse", "vivid", "glow",
    "texture", "echo", "flicker", "gaze", "shimmer",
    "aroma", "glance", "murmur", "silhouette", "hue",
]

MOTION = [
    "removal", "walking", "running", "travel", "departure",
    "arrival", "climbing", "drifting", "rushing", "escalated",
    "descent", "wandering", "sprint", "commute", "detour",
]

SPACE = [
    "environments", "distant", "nearby", "horizon", "boundary",
    "interior", "northern", "southern", "corner", "spacious",
    "eastward", "terrain", "outskirts", "plaza", "courtyard",
]

ENTERTAINMENT = [
    "eurovision", "maverick", "cinema", "concert", "playlist",
    "sitcom", "gaming", "sequel", "trailer", "festival",
    "album", "karaoke", "arcade", "anime", "podcast",
    "streaming", "blockbuster", "matinee", "orchestra", "standup",
    "vinyl", "cosplay", "trivia", "bingo", "billiards",
]

GENERIC = [
    "morning", "coffee", "weather", "street", "window",
    "garden", "kitchen", "recipe", "bicycle", "train",
    "ticket", "museum", "library", "notebook", "pencil",
    "bottle", "jacket", "umbrella", "market", "bridge",
    "river", "mountain", "village", "harbor", "island",
    "forest", "meadow", "autumn", "winter", "summer",
    "spring", "breakfast", "dinner", "luggage", "passport",
    "camera", "photograph", "newspaper", "magazine", "keyboard",
    "monitor", "printer", "envelope", "stamp", "ladder",
    "hammer", "garage", "driveway", "ceiling", "carpet",
    "curtain", "pillow", "blanket", "drawer", "cupboard",
    "saucepan", "kettle", "toaster", "vacuum", "lantern",
]

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


def pseudo_words(n: int, stream: str, blocklist: set[str] | None = None) -> list[str]:
    """Deterministic pronounceable nonsense words for vocabulary padding.

    Prefix-stable: pseudo_words(n, s) is a prefix of pseudo_words(m, s)
    for n <= m, so growing a vocabulary keeps existing words.
    """
    taken = set(blocklist or ())
    rng = derive_rng("pseudo-words", stream)
    out: list[str] = []
    while len(out) < n:
        k = int(rng.integers(3, 5))  # 3 or 4 syllables
        idx = rng.integers(0, len(_CONSONANTS) * len(_VOWELS), size=k)
        word = "".join(
            _CONSONANTS[i // len(_VOWELS)] + _VOWELS[i % len(_VOWELS)] for i in idx
        )
        if word in taken:
            continue
        taken.add(word)
        out.append(word)
    return out


def extend_with_variants(base: list[str], n: int) -> list[str]:
    """First n words from base, cycling with numbered variants past its end.

    Variants share the base stem ("tumor2", "tumor3", ...) so prefix
    wildcards in the lexicon still categorize them.
    """
    if n <= len(base):
        return list(base[:n])
    out = list(base)
    suffix = 2
    while len(out) < n:
        for stem in base:
            if len(out) >= n:
                break
            out.append(f"{stem}{suffix}")
        suffix += 1
    return out
