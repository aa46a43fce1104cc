"""Fixed label vocabularies shared by the generator, question templates and model."""

CATEGORIES = ("building", "bus", "car", "person", "sign", "tree", "truck", "wall")

COLORS = ("black", "blue", "green", "orange", "red", "white")

# English number words for counts 1..20, index i -> word for i+1.
NUMBER_WORDS = (
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
    "ten", "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen",
    "seventeen", "eighteen", "nineteen", "twenty",
)

WORD_TO_INT = {w: i + 1 for i, w in enumerate(NUMBER_WORDS)}
INT_TO_WORD = {i + 1: w for i, w in enumerate(NUMBER_WORDS)}

# Plural forms used in count templates ("how many people are there?").
PLURALS = {
    "building": "buildings",
    "bus": "buses",
    "car": "cars",
    "person": "people",
    "sign": "signs",
    "tree": "trees",
    "truck": "trucks",
    "wall": "walls",
}
SINGULARS = {v: k for k, v in PLURALS.items()}

# Labels a flaky detector confuses each category with. These appear only in
# question text, never as answers.
CONFUSIONS = {
    "building": "house",
    "bus": "train",
    "car": "van",
    "person": "pedestrian",
    "sign": "board",
    "tree": "bush",
    "truck": "trailer",
    "wall": "fence",
}

CONFUSION_PLURALS = {
    "house": "houses",
    "train": "trains",
    "van": "vans",
    "pedestrian": "pedestrians",
    "board": "boards",
    "bush": "bushes",
    "trailer": "trailers",
    "fence": "fences",
}

YES = "yes"
NO = "no"


def normalize_category_token(token: str) -> str | None:
    """Map a question token to a category label, folding plurals; None if no match."""
    if token in PLURALS:
        return token
    return SINGULARS.get(token)
