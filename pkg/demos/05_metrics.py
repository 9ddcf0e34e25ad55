import math

from vqgen.metrics import (
    METRIC_VARIANTS,
    bleu_scores,
    cider_corpus,
    compute_metrics,
    meteor_corpus,
    rouge_l_corpus,
)
from vqgen.text import tokenize


def pair(hyp, *refs):
    return (tokenize(hyp), [tokenize(r) for r in refs])


# BLEU-n pools clipped n-gram counts over the corpus, then takes the
# geometric mean of precisions 1..n with a brevity penalty
pairs = [pair("the cat sat on the mat", "the cat sat on the mat")]
print("perfect match BLEU 1..3:", bleu_scores(pairs))

pairs = [pair("the the the the", "the cat")]
print("clipping stops degenerate repeats:", bleu_scores(pairs, 1))

short = [pair("a b", "a b c")]
print("brevity penalty, 2 of 3 tokens:", bleu_scores(short, 1)[0],
      "= 100 exp(1 - 3/2) =", 100 * math.exp(1 - 3 / 2))

# ROUGE-L: F1 from the longest common subsequence, best reference wins
print("\nROUGE-L keeps order but not adjacency:")
print("  ", rouge_l_corpus([pair("a x b y c", "a b c")]))

# CIDEr: tf-idf weighted n-gram cosine, averaged over orders 1..4.
# idf is computed over the evaluation groups themselves.
group = [
    pair("red square on top", "red square on top"),
    pair("blue circle under it", "blue circle under it"),
]
print("\nCIDEr, perfect and distinctive grams:", cider_corpus(group))
same = [
    pair("red square", "red square"),
    pair("red square", "red square"),
]
print("CIDEr when every gram is in every group:", cider_corpus(same), "(idf zeroes it)")

# METEOR: unigram alignment with a chunk penalty, so order errors cost
print("\nMETEOR in order:   ", meteor_corpus([pair("a b c d", "a b c d")]))
print("METEOR scrambled:  ", meteor_corpus([pair("d c b a", "a b c d")]))

# compute_metrics bundles the full suite at the pinned variants
scores = compute_metrics([
    pair("ছবিতে কয়টি বস্তু আছে?", "ছবিতে কয়টি বস্তু আছে?"),
    pair("প্রধান রং কি?", "ছবির প্রধান রং কি?"),
])
for name, value in scores.items():
    print(f"  {name:8s} {value:.2f}")
print("variant tags:", METRIC_VARIANTS)
