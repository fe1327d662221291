"""The five task prompts, their loss masks, and how they pack into rows."""

from lsrec import synthetic
from lsrec.packing import pack
from lsrec.promptgen import TaskKind, make_example, movie_genres

corpus = synthetic.corpus(synthetic.SyntheticSpec(n_users=20, n_movies=50, mean_length=8, seed=3))
vocab = corpus.vocab
seq = corpus.sequences[0]
genres = movie_genres(corpus)

print(f"user {seq.user_id}, train target index {seq.train_target_index}\n")
examples = []
for task in TaskKind:
    ex = make_example(seq, task, seq.train_target_index, vocab, genres, context_length=40)
    examples.append(ex)
    toks = [vocab.label(t) for t in ex.tokens]
    marked = [f"[{t}]" if m else t for t, m in zip(toks, ex.loss_mask)]
    print(f"{task.name:16s}", " ".join(marked[-9:]))
print("\n(the last 9 tokens of each prompt; bracketed tokens carry the loss)")

(batch,) = pack(examples, row_length=64)
print(f"\npacked {len(examples)} examples into {batch.num_rows} rows of 64 tokens")
for r in range(batch.num_rows):
    print(f"  row {r} segments:", "".join(str(s % 10) for s in batch.segment_ids[r]))
    print(f"  row {r} positions restart:", [int(p) for p in batch.positions[r][:24]], "...")
m = batch.attention_mask[0].astype(int)
edge = batch.spans[0][2]  # first example's length: the block boundary in row 0
lo = max(0, edge - 7)
print(f"\nblock-diagonal causal mask around the first boundary (row 0, tokens {lo}..{lo + 13}):")
for line in m[lo : lo + 14, lo : lo + 14]:
    print("  ", "".join("#" if v else "." for v in line))
