"""Shared test constants and the acceptance note board."""

TINY_CORPUS = [
    "for each snippet of text , label the sentiment as positive or negative .",
    "text : the film was great answer : positive",
    "text : the plot was dull answer : negative",
    "each individual review is short .",
    "let us discuss the sentinel topic .",
    "we work the list and mark each review .",
]

# criterion number -> short measured-value note printed in the summary
ACCEPTANCE_NOTES: dict[int, str] = {}
