import numpy as np

from vqgen.text import (
    SPECIAL_TOKENS,
    TokenSeq,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    detokenize,
    make_pad_mask,
    stack_ids,
    tokenize,
)

# tokenizer: whitespace split, edge punctuation becomes its own token
print(tokenize("How many dogs are there?"))
print(tokenize("কতটি কুকুর আছে?"))  # script-agnostic, splits on the same rules

docs = [
    "how many dogs are there ?",
    "what color is the ball ?",
    "is there a ball ?",
]
vocab = build_vocab(docs)
print("\nvocab size:", len(vocab), "(first 4 ids are", list(SPECIAL_TOKENS), ")")

# ids follow first occurrence, so rebuilding from the same corpus is stable
print("id of '?':", vocab.id_for("?"))
print("id of 'zebra' (unseen):", vocab.id_for("zebra"), "= unk")

# fixed-length encoding pads right and can append the end marker
seq = encode(tokenize("how many dogs ?"), vocab, fixed_len=8, append_end=True)
print("\nids:", seq.ids, "true_len:", seq.true_len)
print("back to tokens:", decode(seq.ids, vocab))
print("as a sentence:", detokenize(decode(seq.ids, vocab)))

# truncation keeps the left side; a dropped end id is on purpose
long = encode(tokenize("what color is the ball in the corner ?"), vocab, 5, append_end=True)
print("\ntruncated ids:", long.ids)

# batches are stacked id matrices plus a mask that ignores padding
rows = [encode(tokenize(d), vocab, fixed_len=8) for d in docs]
ids = stack_ids(rows)
mask = make_pad_mask(ids)
print("\nbatch ids shape:", ids.shape, "mask shape:", mask.shape)
print(mask[:, 0, :].astype(int))

# multi-word category names can be forced in as single atomic tokens
vocab2 = build_vocab(docs, atomic_tokens=["object recognition"])
print("\natomic token id:", vocab2.id_for("object recognition"))

# save/load roundtrip is exact
vocab.save("/tmp/demo_vocab.json")
again = Vocabulary.load("/tmp/demo_vocab.json")
print("roundtrip equal:", [again.token_for(i) for i in range(len(again))]
      == [vocab.token_for(i) for i in range(len(vocab))])
